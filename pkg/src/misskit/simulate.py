"""Modality-missing benchmark construction.

Five missing patterns (LTM long-time, SM switch, RM random, and the mixed
LTMM/SMM) are combined with three missing ratios (30/60/90 %).  Sequences are
assigned to pattern groups in descending-length chunks of five and then to
ratio subgroups in chunks of three, each chunk by a seeded random
permutation, so that group sizes stay balanced.

Conventions
-----------
* Frame 0 is always complete; at most one modality is missing per frame.
* Budget ``M = round_half_up(ratio / 100 * L)`` missing frames, exactly.
* Randomness: ``numpy.random.default_rng`` (PCG64).  Per-sequence seeds are
  ``global_seed XOR fnv1a64(name)``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

PATTERNS = ("LTM", "SM", "RM", "LTMM", "SMM")
RATIOS = (30, 60, 90)
FORMAT_VERSION = 1
SM_BLOCKS = 4

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def sequence_seed(global_seed: int, name: str) -> int:
    return (int(global_seed) & _MASK64) ^ fnv1a64(name)


def missing_budget(length: int, ratio: int) -> int:
    """round_half_up(ratio / 100 * length) in exact integer arithmetic."""
    return (2 * ratio * length + 100) // 200


@dataclass(frozen=True)
class SequenceMeta:
    name: str
    length: int

    def __post_init__(self):
        if self.length < 2:
            raise DataError(f"sequence {self.name!r} has {self.length} frames; at least 2 required")


@dataclass
class MissingSchedule:
    name: str
    pattern: str
    ratio: int
    seed: int
    frames: list[tuple[bool, bool]]

    @property
    def length(self) -> int:
        return len(self.frames)

    @property
    def missing_count(self) -> int:
        return sum(1 for rgb, tir in self.frames if not (rgb and tir))

    def to_record(self) -> dict:
        return {"name": self.name, "pattern": self.pattern, "ratio": self.ratio, "seed": self.seed,
                "frames": [[bool(r), bool(t)] for r, t in self.frames]}

    @classmethod
    def from_record(cls, rec: dict) -> "MissingSchedule":
        return cls(rec["name"], rec["pattern"], int(rec["ratio"]), int(rec["seed"]),
                   [(bool(r), bool(t)) for r, t in rec["frames"]])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("frame_index,rgb,tir\n")
        for i, (r, t) in enumerate(self.frames):
            buf.write(f"{i},{int(r)},{int(t)}\n")
        return buf.getvalue()


@dataclass
class DatasetAssignment:
    global_seed: int
    cells: dict[str, tuple[str, int]] = field(default_factory=dict)

    def by_pattern(self) -> dict[str, list[str]]:
        out = {p: [] for p in PATTERNS}
        for name, (pattern, _) in self.cells.items():
            out[pattern].append(name)
        return out

    def by_ratio(self) -> dict[int, list[str]]:
        out = {r: [] for r in RATIOS}
        for name, (_, ratio) in self.cells.items():
            out[ratio].append(name)
        return out

    def to_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION, "global_seed": self.global_seed,
                "sequences": [{"name": n, "pattern": p, "ratio": r}
                              for n, (p, r) in self.cells.items()]}

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetAssignment":
        return cls(int(data["global_seed"]),
                   {rec["name"]: (rec["pattern"], int(rec["ratio"])) for rec in data["sequences"]})


# ---------------------------------------------------------------- assignment


def _chunked_assign(items: Sequence, groups: Sequence, rng: np.random.Generator) -> dict:
    """Deal items (already ordered) to groups chunk by chunk.

    A full chunk gets a random permutation of the groups; a trailing partial
    chunk goes to distinct randomly chosen groups.
    """
    k = len(groups)
    out = {}
    for start in range(0, len(items), k):
        chunk = items[start:start + k]
        if len(chunk) == k:
            order = rng.permutation(k)
        else:
            order = rng.choice(k, size=len(chunk), replace=False)
        for item, g in zip(chunk, order):
            out[item] = groups[int(g)]
    return out


def sort_by_length(sequences: Iterable[SequenceMeta]) -> list[SequenceMeta]:
    """Descending by frame count, ties broken by name."""
    return sorted(sequences, key=lambda s: (-s.length, s.name))


def assign_patterns(sequences: Sequence[SequenceMeta], seed: int) -> DatasetAssignment:
    """Balanced (pattern, ratio) assignment.

    One generator seeded with ``seed`` is consumed first by the pattern
    chunks, then by the ratio chunks of each group in pattern order.
    """
    names = [s.name for s in sequences]
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise DataError(f"duplicate sequence names: {dupes}")
    rng = np.random.default_rng(seed)
    ordered = [s.name for s in sort_by_length(sequences)]
    pattern_of = _chunked_assign(ordered, PATTERNS, rng)
    cells = {}
    for pattern in PATTERNS:
        members = [n for n in ordered if pattern_of[n] == pattern]
        for name, ratio in _chunked_assign(members, RATIOS, rng).items():
            cells[name] = (pattern, ratio)
    return DatasetAssignment(seed, {n: cells[n] for n in ordered})


# ---------------------------------------------------------------- schedules


def _block_sizes(total: int, blocks: int) -> list[int]:
    base, extra = divmod(total, blocks)
    return [base + (1 if i < extra else 0) for i in range(blocks)]


def _place_ltm(frames, rng, length: int, budget: int) -> None:
    if budget == 0:
        return
    modality = int(rng.integers(2))
    start = int(rng.integers(1, length - budget + 1))
    for i in range(start, start + budget):
        frames[i][modality] = False


def _place_sm(frames, rng, length: int, budget: int, blocks: int = SM_BLOCKS) -> None:
    if budget == 0:
        return
    modality = int(rng.integers(2))
    start = int(rng.integers(1, length - budget + 1))
    pos = start
    for size in _block_sizes(budget, blocks):
        if size == 0:
            continue
        for i in range(pos, pos + size):
            frames[i][modality] = False
        pos += size
        modality = 1 - modality


def _place_rm(frames, rng, length: int, budget: int) -> None:
    if budget == 0:
        return
    free = np.array([i for i in range(1, length) if frames[i][0] and frames[i][1]])
    picks = np.sort(rng.choice(free, size=budget, replace=False))
    which = rng.integers(2, size=budget)
    for i, m in zip(picks, which):
        frames[int(i)][int(m)] = False


def generate_schedule(meta: SequenceMeta, pattern: str, ratio: int, seed: int,
                      sm_blocks: int = SM_BLOCKS) -> MissingSchedule:
    if pattern not in PATTERNS:
        raise DataError(f"unknown pattern {pattern!r}; choose from {PATTERNS}")
    if not 0 <= ratio <= 100:
        raise DataError(f"ratio {ratio} outside [0, 100]")
    L = meta.length
    M = missing_budget(L, ratio)
    if M > L - 1:
        raise DataError(f"{meta.name}: budget {M} missing frames exceeds {L - 1} available "
                        f"(frame 0 stays complete)")
    rng = np.random.default_rng(seed)
    frames = [[True, True] for _ in range(L)]
    if pattern == "LTM":
        _place_ltm(frames, rng, L, M)
    elif pattern == "SM":
        _place_sm(frames, rng, L, M, sm_blocks)
    elif pattern == "RM":
        _place_rm(frames, rng, L, M)
    else:
        structured = -(-M // 2)
        if pattern == "LTMM":
            _place_ltm(frames, rng, L, structured)
        else:
            _place_sm(frames, rng, L, structured, sm_blocks)
        _place_rm(frames, rng, L, M - structured)
    return MissingSchedule(meta.name, pattern, ratio, seed, [(r, t) for r, t in frames])


def build_missing_dataset(sequences: Sequence[SequenceMeta], seed: int):
    """Assign every sequence a (pattern, ratio) cell and generate its schedule."""
    assignment = assign_patterns(sequences, seed)
    by_name = {s.name: s for s in sequences}
    schedules = []
    for name, (pattern, ratio) in assignment.cells.items():
        schedules.append(generate_schedule(by_name[name], pattern, ratio, sequence_seed(seed, name)))
    return schedules, assignment


# ---------------------------------------------------------------- invariants


def missing_runs(schedule: MissingSchedule) -> list[tuple[int, int, int]]:
    """Maximal runs of consecutive frames missing the same modality: (modality, start, length)."""
    runs = []
    for i, (r, t) in enumerate(schedule.frames):
        m = 0 if not r else (1 if not t else None)
        if m is None:
            continue
        if runs and runs[-1][0] == m and runs[-1][1] + runs[-1][2] == i:
            runs[-1] = (m, runs[-1][1], runs[-1][2] + 1)
        else:
            runs.append((m, i, 1))
    return runs


def check_schedule(schedule: MissingSchedule) -> list[str]:
    """Violated invariants of one schedule (empty when valid)."""
    problems = []
    frames = schedule.frames
    if not frames or frames[0] != (True, True):
        problems.append("frame 0 not complete")
    if any(not r and not t for r, t in frames):
        problems.append("frame with both modalities missing")
    expected = missing_budget(len(frames), schedule.ratio)
    if schedule.missing_count != expected:
        problems.append(f"missing count {schedule.missing_count} != budget {expected}")
    runs = missing_runs(schedule)
    if schedule.pattern == "LTM" and expected and len(runs) != 1:
        problems.append(f"LTM has {len(runs)} runs")
    if schedule.pattern == "SM":
        if any(runs[i][1] + runs[i][2] != runs[i + 1][1] for i in range(len(runs) - 1)):
            problems.append("SM runs not contiguous")
        if any(runs[i][0] == runs[i + 1][0] for i in range(len(runs) - 1)):
            problems.append("SM runs do not alternate")
    return problems


# ---------------------------------------------------------------- statistics


def _group_stats(schedules: list[MissingSchedule]) -> dict:
    frames = [s.length for s in schedules]
    missing = [s.missing_count for s in schedules]
    n = len(schedules)
    return {
        "sequences": n,
        "total_frames": int(sum(frames)),
        "avg_frames": (sum(frames) / n) if n else 0.0,
        "max_frames": max(frames, default=0),
        "total_missing": int(sum(missing)),
        "avg_missing": (sum(missing) / n) if n else 0.0,
        "max_missing": max(missing, default=0),
    }


def dataset_stats(schedules: Sequence[MissingSchedule]) -> dict:
    """Totals plus per-pattern and per-ratio breakdowns."""
    schedules = list(schedules)
    out = _group_stats(schedules)
    out["per_pattern"] = {p: _group_stats([s for s in schedules if s.pattern == p]) for p in PATTERNS}
    out["per_ratio"] = {str(r): _group_stats([s for s in schedules if s.ratio == r]) for r in RATIOS}
    return out


# ---------------------------------------------------------------- file formats


def parse_metadata(text: str) -> list[SequenceMeta]:
    """``name,frame_count`` per line; blank lines are skipped."""
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2 or not parts[0]:
            raise DataError(f"line {lineno}: expected 'name,frame_count', got {line!r}")
        try:
            length = int(parts[1])
        except ValueError:
            raise DataError(f"line {lineno}: frame count {parts[1]!r} is not an integer") from None
        try:
            out.append(SequenceMeta(parts[0], length))
        except DataError as exc:
            raise DataError(f"line {lineno}: {exc}") from None
    return out


def read_metadata(path) -> list[SequenceMeta]:
    return parse_metadata(Path(path).read_text(encoding="utf-8"))


def format_metadata(sequences: Iterable[SequenceMeta]) -> str:
    return "".join(f"{s.name},{s.length}\n" for s in sequences)


def schedules_to_json(schedules: Sequence[MissingSchedule], global_seed: int) -> str:
    doc = {"format_version": FORMAT_VERSION, "global_seed": int(global_seed),
           "sequences": [s.to_record() for s in schedules]}
    return json.dumps(doc, separators=(",", ":")) + "\n"


def schedules_from_json(text: str) -> tuple[list[MissingSchedule], int]:
    doc = json.loads(text)
    if doc.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported schedule format version {doc.get('format_version')!r}")
    return [MissingSchedule.from_record(r) for r in doc["sequences"]], int(doc["global_seed"])


def synthetic_metadata(num_sequences: int, total_frames: int, max_frames: int, seed: int = 0,
                       min_frames: int = 40, prefix: str = "seq") -> list[SequenceMeta]:
    """Log-normal sequence lengths rescaled to hit an exact total and maximum.

    Useful for fixtures that mimic a real benchmark's length distribution
    when the per-sequence counts are not at hand.
    """
    if num_sequences * min_frames > total_frames or max_frames > total_frames:
        raise DataError("infeasible length targets")
    rng = np.random.default_rng(seed)
    raw = np.sort(rng.lognormal(0.0, 0.7, size=num_sequences))[::-1]
    rest = raw[1:]
    budget = total_frames - max_frames - min_frames * (num_sequences - 1)
    if budget < 0:
        raise DataError("infeasible length targets")
    scaled = min_frames + rest / rest.sum() * budget
    lengths = np.floor(scaled).astype(int)
    lengths[: total_frames - max_frames - int(lengths.sum())] += 1
    if lengths.max() > max_frames:
        raise DataError("length distribution exceeds the requested maximum")
    lengths = [max_frames] + lengths.tolist()
    width = len(str(num_sequences))
    return [SequenceMeta(f"{prefix}{i:0{width}d}", int(n)) for i, n in enumerate(lengths)]
