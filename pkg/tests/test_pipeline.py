"""End-to-end pipeline behavior on the blob fixture: canonical outputs,
worker-count and kill/resume byte-identity, failure isolation, the job
ledger, and the dispatch retry path."""
import json
import shutil

import numpy as np
import pytest

from conftest import CANONICAL_OUTPUTS
from marginlab import data, pipeline
from marginlab.manifest import ManifestError
from marginlab.model import init_model, save_checkpoint
from marginlab.pipeline import (JobLedger, dispatch_cmps, run_experiment)
from marginlab.solver import SAMPLE_FAILED, SolverConfig


def _canonical_bytes(exp):
    return {name: (exp / name).read_bytes() for name in CANONICAL_OUTPUTS}


def test_reference_run_layout(blob_fixture):
    exp = blob_fixture.exp
    mhash = blob_fixture.manifest.hash
    for name in CANONICAL_OUTPUTS:
        assert (exp / name).exists(), name
    for name in CANONICAL_OUTPUTS:
        if name.endswith(".csv"):
            first = open(exp / name).readline()
            assert first == f"# manifest_hash={mhash}\n", name
    report = json.loads((exp / "report.json").read_text())
    assert report["manifest_hash"] == mhash
    assert report["cells_failed"] == []
    assert len(report["cell_stats"]) == 6          # 2 capacities x 3 variants
    for st in report["cell_stats"]:
        assert st["attempted"] + st["excluded_misclassified"] == st["selected"]
        assert 0 < st["valid"] <= st["attempted"]
    figs = sorted(p.name for p in exp.glob("fig_*.png"))
    assert len(figs) >= 5
    assert all((exp / f).stat().st_size > 0 for f in figs)
    # staging files must not survive a completed run
    assert list(exp.glob("margins/*_work.npz")) == []


def test_selection_is_shared_and_seeded(blob_fixture):
    exp = blob_fixture.exp
    m = blob_fixture.manifest
    sel = json.loads((exp / "datasets" / "selection.json").read_text())
    train = data.load_dataset(exp / "datasets" / "train_clean.npz")
    ids = np.sort(train.ids)
    rng = np.random.default_rng(m.selection_seed)
    want = np.sort(rng.choice(ids, size=m.sample_budget, replace=False))
    assert np.array_equal(np.array(sel["ids"]), want)
    assert sel["manifest_hash"] == m.hash
    # every variant holds the same sample ids, so the selection is shared
    for kind in ("label_corrupted", "input_corrupted"):
        other = data.load_dataset(exp / "datasets" / f"train_{kind}.npz")
        assert np.array_equal(np.sort(other.ids), ids)


def test_worker_pool_outputs_byte_identical(blob_fixture, tmp_path):
    out = run_experiment(blob_fixture.manifest, tmp_path / "exp_w2", workers=2,
                         base_dir=blob_fixture.manifest_path.parent)
    assert out.ok
    assert _canonical_bytes(tmp_path / "exp_w2") == _canonical_bytes(blob_fixture.exp)


def test_resume_after_mid_chunk_truncation_byte_identical(blob_fixture, tmp_path):
    exp = tmp_path / "exp_resume"
    shutil.copytree(blob_fixture.exp, exp)
    ledgers = sorted((exp / "margins").glob("*.jsonl"))
    # cut one ledger mid-chunk and leave a torn line on another
    lines = ledgers[0].read_text().splitlines(keepends=True)
    ledgers[0].write_text("".join(lines[:len(lines) // 2]))
    lines = ledgers[-1].read_text().splitlines(keepends=True)
    ledgers[-1].write_text("".join(lines[:3]) + '{"sample_id": 1, "i"')
    out = run_experiment(blob_fixture.manifest, exp, workers=1, resume=True,
                         base_dir=blob_fixture.manifest_path.parent)
    assert out.ok
    assert _canonical_bytes(exp) == _canonical_bytes(blob_fixture.exp)


def test_report_only_replays_ledgers(blob_fixture, tmp_path):
    exp = tmp_path / "exp_report"
    shutil.copytree(blob_fixture.exp, exp)
    for name in CANONICAL_OUTPUTS:
        (exp / name).unlink()
    out = run_experiment(blob_fixture.manifest, exp, workers=1, resume=True,
                         base_dir=blob_fixture.manifest_path.parent,
                         phases=("report",))
    assert out.ok
    assert _canonical_bytes(exp) == _canonical_bytes(blob_fixture.exp)
    report = json.loads((exp / "report.json").read_text())
    assert len(report["cell_stats"]) == 6
    assert all(st["attempted"] > 0 for st in report["cell_stats"])


def test_existing_directory_requires_resume(blob_fixture):
    with pytest.raises(ManifestError, match="--resume"):
        run_experiment(blob_fixture.manifest, blob_fixture.exp, workers=1,
                       base_dir=blob_fixture.manifest_path.parent)


def test_mixed_manifest_directory_refused(blob_fixture, tmp_path):
    import dataclasses
    other = dataclasses.replace(blob_fixture.manifest, selection_seed=123)
    with pytest.raises(ManifestError, match="refusing to mix"):
        pipeline.prepare_directory(other, blob_fixture.exp, resume=True)


def test_cell_failure_is_isolated(blob_fixture, tmp_path, monkeypatch):
    real = pipeline.train_cell

    def sabotaged(manifest, paths, cell, train_ds, val_ds):
        if cell.name == "w8_s1_clean":
            raise RuntimeError("injected training failure")
        return real(manifest, paths, cell, train_ds, val_ds)

    monkeypatch.setattr(pipeline, "train_cell", sabotaged)
    exp = tmp_path / "exp_fail"
    out = run_experiment(blob_fixture.manifest, exp, workers=1,
                         base_dir=blob_fixture.manifest_path.parent)
    assert not out.ok
    assert out.cells_failed == ["w8_s1_clean"]
    assert len(out.cells_done) == 5
    report = json.loads((exp / "report.json").read_text())
    assert "injected training failure" in report["failures"]["w8_s1_clean"]
    assert (exp / "margins.csv").exists()     # the report still aggregates


def test_margins_incompleteness_fails_the_cell(blob_fixture, tmp_path,
                                               monkeypatch):
    exp = tmp_path / "exp_incomplete"
    shutil.copytree(blob_fixture.exp, exp)
    victim = sorted((exp / "margins").glob("*.jsonl"))[0]
    victim.unlink()
    monkeypatch.setattr(pipeline, "dispatch_cmps", lambda *a, **k: None)
    out = run_experiment(blob_fixture.manifest, exp, workers=1, resume=True,
                         base_dir=blob_fixture.manifest_path.parent)
    assert victim.stem in out.cells_failed


def test_job_ledger_truncates_torn_tail_and_keeps_last_line(tmp_path):
    p = tmp_path / "cell.jsonl"
    rec = {"sample_id": 4, "i": 1, "status": "valid", "j_star": 0,
           "margin": 0.5, "residual": 0.0, "corruption": 0, "redirects": 0,
           "restarted": False, "pairs": []}
    with open(p, "w") as fh:
        fh.write(json.dumps(rec) + "\n")
        fh.write('{"sample_id": 5, "i": 0, "status"')   # torn, no newline
    led = JobLedger(p)
    assert led.completed == {4}
    # the torn tail is gone from disk, so appends land on a clean line
    assert p.read_bytes().endswith(b"\n") and b'"status"\n' not in p.read_bytes()
    led.append([dict(rec, margin=0.75)])
    led.append([dict(rec, sample_id=2, margin=0.1)])
    replay = JobLedger(p).replay()
    assert [r.sample_id for r in replay] == [2, 4]      # sorted by id
    assert replay[1].margin == 0.75                      # last line wins


def test_job_ledger_repairs_missing_final_newline(tmp_path):
    p = tmp_path / "cell.jsonl"
    rec = {"sample_id": 9, "i": 0, "status": "valid", "j_star": 1,
           "margin": 1.0, "residual": 0.0, "corruption": 0, "redirects": 0,
           "restarted": False, "pairs": []}
    p.write_text(json.dumps(rec))          # complete record, no newline
    led = JobLedger(p)
    assert led.completed == {9}
    led.append([dict(rec, sample_id=10)])
    assert JobLedger(p).completed == {9, 10}


def test_dispatch_without_chunks_is_a_noop(tmp_path):
    led = JobLedger(tmp_path / "empty.jsonl")
    dispatch_cmps(tmp_path / "missing.npz", tmp_path / "missing.ckpt",
                  SolverConfig(), [], workers=4, ledger=led,
                  preds=np.zeros(0, dtype=np.int64),
                  ids=np.zeros(0, dtype=np.int64),
                  flags=np.zeros(0, dtype=np.uint8))
    assert len(led) == 0
    assert not (tmp_path / "empty.jsonl").exists()


def test_pool_crash_exhausts_retries_into_failed_records(tmp_path, monkeypatch):
    model = init_model(input_dim=2, hidden_width=4, num_classes=3, seed=0)
    ckpt = tmp_path / "m.ckpt"
    save_checkpoint(model, ckpt)
    rng = np.random.default_rng(0)
    anchors = rng.normal(size=(5, 2))
    ids = np.arange(5, dtype=np.int64)
    flags = np.array([0, 1, 0, 2, 0], dtype=np.uint8)
    work = tmp_path / "w.npz"
    np.savez(work, anchors=anchors, ids=ids, corruption=flags,
             ref_features=anchors, ref_labels=np.array([0, 1, 2, 0, 1]))
    preds = model.predict_batch(anchors)

    def crash(positions):
        raise ValueError("injected worker crash")

    monkeypatch.setattr(pipeline, "_solve_chunk", crash)
    led = JobLedger(tmp_path / "led.jsonl")
    dispatch_cmps(work, ckpt, SolverConfig(), [[0, 1, 2], [3, 4]], workers=2,
                  ledger=led, preds=preds, ids=ids, flags=flags)
    replay = led.replay()
    assert [r.sample_id for r in replay] == list(range(5))
    assert all(r.status == SAMPLE_FAILED for r in replay)
    assert [r.corruption for r in replay] == [0, 1, 0, 2, 0]
    assert [r.i for r in replay] == [int(p) for p in preds]
