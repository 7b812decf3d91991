"""Simulating missing-modality schedules for a benchmark-sized dataset.

Run:  python demos/02_missing_schedules.py
"""

from misskit.simulate import (build_missing_dataset, check_schedule, dataset_stats, missing_runs,
                              synthetic_metadata)

# %% 234 sequences, 116.7K frames in total, longest 4000 frames.
meta = synthetic_metadata(234, 116_700, 4000, seed=0)
schedules, assignment = build_missing_dataset(meta, seed=0)

stats = dataset_stats(schedules)
print("total frames  :", stats["total_frames"])
print("missing frames:", stats["total_missing"], f"({stats['total_missing'] / stats['total_frames']:.3f} of all)")
for pattern, group in sorted(assignment.by_pattern().items()):
    print(f"  {pattern:5s} {len(group)} sequences")

# %% One schedule up close: runs of (missing modality, start, length), 0 = RGB.
s = next(s for s in schedules if s.pattern == "SM")
print(s.name, s.pattern, s.ratio, "% ->", s.missing_count, "of", s.length, "frames missing")
print("runs:", missing_runs(s)[:6], "...")

# %% Every schedule satisfies the invariants.
problems = [p for s in schedules for p in check_schedule(s)]
print("invariant violations:", len(problems))
