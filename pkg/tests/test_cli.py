import json
import os
from pathlib import Path

import numpy as np
import pytest

from misskit.cli import main, read_boxes, resolve_threads, write_boxes
from misskit.simulate import PATTERNS, RATIOS, format_metadata, SequenceMeta

from test_metrics import oracle

DATA = Path(__file__).parent / "data"
GOLDEN = DATA / "golden_report.json"


def write_metadata(path, n=15):
    path.write_text(format_metadata([SequenceMeta(f"seq{i:02d}", 40 + 7 * i) for i in range(n)]))
    return path


def make_eval_fixture(root: Path, n=6, seed=0):
    """Results, ground truths (every other sequence with a TIR ground truth) and schedules."""
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    meta = write_metadata(root / "meta.txt", n)
    assert main(["simulate", str(meta), "--seed", "3", "--out", str(root / "sim")]) == 0
    for i in range(n):
        name = f"seq{i:02d}"
        length = 40 + 7 * i
        gt = np.column_stack([rng.uniform(20, 200, (length, 2)).round(1), rng.uniform(8, 50, (length, 2)).round(1)])
        pred = gt + np.column_stack([rng.normal(0, 12, (length, 2)), rng.normal(0, 3, (length, 2))]).round(2)
        write_boxes(root / "gt" / name / "gt_rgb.txt", gt)
        if i % 2:
            write_boxes(root / "gt" / name / "gt_tir.txt", gt + np.r_[2.0, -1.0, 0.0, 0.0])
        write_boxes(root / "results" / name / "result.txt", pred)
    return root


def evaluate(root: Path, out: str = "eval", *extra):
    return main(["evaluate", "--results", str(root / "results"), "--gt", str(root / "gt"),
                 "--schedules", str(root / "sim" / "schedules.json"), "--out", str(root / out), *extra])


def test_simulate_outputs(tmp_path):
    meta = write_metadata(tmp_path / "m.txt")
    assert main(["simulate", str(meta), "--seed", "1", "--out", str(tmp_path / "o")]) == 0
    o = tmp_path / "o"
    doc = json.loads((o / "schedules.json").read_text())
    assert len(doc["sequences"]) == 15
    cells = {(s["pattern"], s["ratio"]) for s in doc["sequences"]}
    assert cells == {(p, r) for p in PATTERNS for r in RATIOS}
    assert len(list((o / "schedules").glob("*.csv"))) == 15
    stats = (o / "stats.csv").read_text().splitlines()
    assert stats[0].startswith("group,sequences,total_frames")
    assert len(stats) == 1 + 1 + 5 + 3
    manifest = json.loads((o / "manifest.json").read_text())
    assert manifest["format_version"] == 1 and "stats.json" in manifest["files"]
    assert json.loads((o / "assignment.json").read_text())["config_hash"] == manifest["config_hash"]


def test_simulate_bytewise_reproducible(tmp_path):
    meta = write_metadata(tmp_path / "m.txt")
    for out in ("a", "b"):
        assert main(["simulate", str(meta), "--seed", "7", "--out", str(tmp_path / out)]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_simulate_malformed_metadata(tmp_path, capsys):
    meta = tmp_path / "bad.txt"
    meta.write_text("a,10\nb,xx\n")
    assert main(["simulate", str(meta), "--out", str(tmp_path / "o")]) == 2
    assert "line 2" in capsys.readouterr().err


def test_simulate_does_not_touch_input(tmp_path):
    meta = write_metadata(tmp_path / "m.txt")
    before = meta.read_bytes()
    main(["simulate", str(meta), "--out", str(tmp_path / "o")])
    assert meta.read_bytes() == before


def test_evaluate_perfect_predictions(tmp_path):
    root = make_eval_fixture(tmp_path)
    for d in (root / "gt").iterdir():
        (root / "results" / d.name / "result.txt").write_bytes((d / "gt_rgb.txt").read_bytes())
    assert evaluate(root) == 0
    rep = json.loads((root / "eval" / "report.json").read_text())
    assert rep["overall"]["MPR"] == 1.0


def test_evaluate_matches_oracle_and_golden(tmp_path):
    root = make_eval_fixture(tmp_path)
    assert evaluate(root) == 0
    rep = json.loads((root / "eval" / "report.json").read_text())
    for row in rep["per_sequence"]:
        pred = read_boxes(root / "results" / row["name"] / "result.txt")
        gts = [read_boxes(root / "gt" / row["name"] / "gt_rgb.txt")]
        if (root / "gt" / row["name"] / "gt_tir.txt").exists():
            gts.append(read_boxes(root / "gt" / row["name"] / "gt_tir.txt"))
        ref = oracle(pred, gts)
        for k in ("MPR", "MSR", "NPR"):
            assert abs(row[k] - ref[k]) < 1e-12
    produced = (root / "eval" / "report.json").read_bytes()
    if os.environ.get("MISSKIT_REGEN_GOLDEN"):
        GOLDEN.parent.mkdir(exist_ok=True)
        GOLDEN.write_bytes(produced)
    assert produced == GOLDEN.read_bytes()


def test_evaluate_reproducible_across_threads(tmp_path):
    root = make_eval_fixture(tmp_path)
    assert evaluate(root, "a") == 0
    assert evaluate(root, "b", "--threads", "3") == 0
    for name in ("report.json", "per_sequence.csv", "manifest.json"):
        assert (root / "a" / name).read_bytes() == (root / "b" / name).read_bytes()


def test_evaluate_missing_file_errata(tmp_path, capsys):
    root = make_eval_fixture(tmp_path)
    (root / "results" / "seq02" / "result.txt").unlink()
    (root / "gt" / "seq04" / "gt_rgb.txt").unlink()
    assert evaluate(root) != 0
    assert "2 errata" in capsys.readouterr().err
    rep = json.loads((root / "eval" / "report.json").read_text())
    assert [e["sequence"] for e in rep["errata"]] == ["seq02", "seq04"]
    assert "seq02/result.txt" in rep["errata"][0]["issue"]
    assert rep["overall"]["sequences"] == 4


def test_evaluate_records_strategy(tmp_path):
    root = make_eval_fixture(tmp_path)
    assert evaluate(root, "z", "--strategy", "zero") == 0
    rep = json.loads((root / "z" / "report.json").read_text())
    assert rep["metadata"]["compensation"] == "zero"
    assert rep["metadata"]["config"]["strategy"] == "zero"


def test_config_unknown_key_is_an_error(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"seeed": 1}')
    meta = write_metadata(tmp_path / "m.txt")
    assert main(["simulate", str(meta), "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "unknown keys" in capsys.readouterr().err


def test_threads_resolution(monkeypatch):
    monkeypatch.delenv("MISSKIT_THREADS", raising=False)
    assert resolve_threads(None) == 1
    monkeypatch.setenv("MISSKIT_THREADS", "4")
    assert resolve_threads(None) == 4
    assert resolve_threads(2) == 2


def test_read_boxes_formats(tmp_path):
    p = tmp_path / "b.txt"
    p.write_text("1,2,3,4\n5\t6\t7\t8\n\n9 10 11 12\n")
    assert read_boxes(p).tolist() == [[1, 2, 3, 4], [5, 6, 7, 8], [9, 10, 11, 12]]
    p.write_text("1,2,3\n")
    with pytest.raises(Exception, match="expected 4"):
        read_boxes(p)


def test_verify_quick(capsys):
    assert main(["verify", "--quick"]) == 0
    out = capsys.readouterr().out
    assert "all suites passed" in out and "max reconstruction error" in out


def test_verify_catches_sign_error_in_inverse():
    from misskit import tensor as T
    from misskit.verify import invertibility_sweep

    def broken(y, block):
        y1, y2 = T.split_channels(y)
        x2 = y2 + block.T(y1)  # sign flipped
        return T.concat_channels(y1 - block.S(x2), x2)

    assert not invertibility_sweep(20, inverse_fn=broken).passed


def test_train_demo_smoke(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"tracker": {"embed_dim": 8, "num_layers": 2, "specific_layers": [2],
                                           "head_hidden": 8},
                               "data": {"train_sequences": 2, "frames_per_sequence": 2,
                                        "eval_sequences": 2, "eval_length": 5}}))
    args = ["train-demo", "--config", str(cfg), "--stage1-steps", "3", "--stage2-steps", "4"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ("stage1.ckpt", "stage2.ckpt", "stage1_trace.csv", "stage2_trace.csv", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    trace = (tmp_path / "a" / "stage2_trace.csv").read_text().splitlines()
    assert trace[0].startswith("step,total") and len(trace) == 1 + 5
