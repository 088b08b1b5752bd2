"""Manifest-driven experiment pipeline with a resumable worker pool.

An experiment directory is a pure function of its manifest: every phase
either finds its outputs on disk (and trusts them) or recomputes them
deterministically, so a killed run continues from wherever it stopped and
worker counts never change results. Layout:

    out_dir/
      manifest.json                 canonical manifest copy
      datasets/                     split + corrupted variants (NPZ)
        selection.json              seeded margin-budget sample ids
      models/                       checkpoints, train curves, summaries
      margins/<cell>.jsonl          per-cell CMP job ledgers
      *.csv, distance_matrix.bin    canonical report tables
      report.json, fig_*.png        run summary and rendered figures

A "cell" is one (capacity, training seed, dataset variant) triple. Cells
fail independently: a dead cell is recorded in report.json and the run
exits with the partial-failure code, but every other cell still produces
its outputs.

The margin phase is the expensive part (thousands of CMPs), so it runs on
a process pool fed by sample-level jobs. Jobs are staged to disk (a small
NPZ of anchors plus reference samples) and workers load them in their
initializer — cheaper than pickling arrays into every task, and identical
under fork or spawn. Completed jobs land in an append-only JSONL ledger,
fsynced per chunk; a partially written tail line (from a kill) is dropped
on replay and its jobs simply recompute. Aggregates are built only from
replayed ledgers sorted by sample id, which is what makes worker count,
completion order, and kill/resume cycles invisible in the outputs.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import time
from collections import deque
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from multiprocessing import get_context
from pathlib import Path

import numpy as np
import pandas as pd

from . import analytics, figures
from .data import (Corruption, CorruptionKind, CorruptionSpec, LabeledDataset,
                   apply_corruption, load_dataset, load_idx_dataset,
                   save_dataset, train_validation_split)
from .geometry import (build_max_margin_records, distance_matrix, order_ids,
                       save_distance_matrix, scatter_before_after)
from .manifest import ManifestError, RunManifest
from .model import (TrainConfig, evaluate, init_model, load_checkpoint,
                    save_checkpoint, train)
from .solver import SAMPLE_FAILED, SAMPLE_VALID, MarginResult, SolverConfig, \
    solve_margins

log = logging.getLogger(__name__)

CHUNK_SIZE = 8          # samples per pool job; fixed so chunking never varies
MAX_JOB_RETRIES = 2     # re-queues per chunk before its jobs are marked failed


# ---------------------------------------------------------------------------
# Paths and cells
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Cell:
    capacity: int
    seed: int
    variant: CorruptionSpec
    kind: str  # Table-1 model kind

    @property
    def name(self) -> str:
        return f"w{self.capacity}_s{self.seed}_{self.kind}"


class ExperimentPaths:
    def __init__(self, root):
        self.root = Path(root)
        self.datasets = self.root / "datasets"
        self.models = self.root / "models"
        self.margins = self.root / "margins"

    def make_dirs(self) -> None:
        for p in (self.root, self.datasets, self.models, self.margins):
            p.mkdir(parents=True, exist_ok=True)

    def variant_npz(self, kind: str) -> Path:
        return self.datasets / f"train_{kind}.npz"

    def val_npz(self) -> Path:
        return self.datasets / "val.npz"

    def selection(self) -> Path:
        return self.datasets / "selection.json"

    def checkpoint(self, cell: Cell) -> Path:
        return self.models / f"{cell.name}.ckpt"

    def train_curves(self, cell: Cell) -> Path:
        return self.models / f"{cell.name}_train.csv"

    def train_summary(self, cell: Cell) -> Path:
        return self.models / f"{cell.name}.json"

    def ledger(self, cell: Cell) -> Path:
        return self.margins / f"{cell.name}.jsonl"

    def work_npz(self, cell: Cell) -> Path:
        return self.margins / f"{cell.name}_work.npz"


def cells_of(manifest: RunManifest) -> list[Cell]:
    return [Cell(cap, seed, var, manifest.model_kind(var))
            for cap, seed, var in manifest.cells()]


# ---------------------------------------------------------------------------
# Job ledger
# ---------------------------------------------------------------------------

class JobLedger:
    """Append-only JSONL of completed margin jobs for one cell.

    Keyed by sample_id; per-pair records ride inside each line. The torn
    tail of a killed run (an unparseable final line) is truncated from the
    file on open — those jobs are simply not "completed" and will be
    recomputed, and later appends start on a clean line. Duplicate sample
    ids keep the last line, which is byte-identical anyway for a
    deterministic solver re-solving the same fixed chunk.
    """

    def __init__(self, path):
        self.path = Path(path)
        self._records: dict[int, dict] = {}
        if not self.path.exists():
            return
        raw = self.path.read_bytes()
        good_end = 0
        for line in raw.splitlines(keepends=True):
            body = line.strip()
            if body:
                try:
                    rec = json.loads(body)
                    self._records[int(rec["sample_id"])] = rec
                except (json.JSONDecodeError, KeyError, TypeError):
                    break     # torn tail of a killed run; nothing after it counts
            good_end += len(line)
        if good_end < len(raw):
            # heal the file: a surviving torn tail would swallow the next
            # appended record (no newline separates them)
            with open(self.path, "r+b") as fh:
                fh.truncate(good_end)
            log.warning("ledger %s: dropped a torn %d-byte tail",
                        self.path.name, len(raw) - good_end)
        elif raw and not raw.endswith(b"\n"):
            with open(self.path, "ab") as fh:
                fh.write(b"\n")

    @property
    def completed(self) -> set[int]:
        return set(self._records)

    def __len__(self) -> int:
        return len(self._records)

    def append(self, records: list[dict]) -> None:
        with open(self.path, "a") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        for rec in records:
            self._records[int(rec["sample_id"])] = rec

    def replay(self) -> list[MarginResult]:
        return [MarginResult.from_dict(self._records[sid])
                for sid in sorted(self._records)]


# ---------------------------------------------------------------------------
# Worker pool
# ---------------------------------------------------------------------------

_WORKER: dict = {}


def _init_worker(work_path: str, ckpt_path: str, cfg_kwargs: dict) -> None:
    with np.load(work_path) as blob:
        _WORKER.update(
            anchors=blob["anchors"], ids=blob["ids"],
            corruption=blob["corruption"],
            refs=(blob["ref_features"], blob["ref_labels"]))
    _WORKER["model"] = load_checkpoint(ckpt_path)
    _WORKER["cfg"] = SolverConfig(**cfg_kwargs)


def _solve_chunk(positions: list[int]) -> list[dict]:
    w = _WORKER
    sel = np.asarray(positions, dtype=np.int64)
    results = solve_margins(w["model"], w["anchors"][sel], w["ids"][sel],
                            w["cfg"], corruption=w["corruption"][sel],
                            restart_refs=w["refs"])
    return [r.to_dict() for r in results]


def dispatch_cmps(work_path: Path, ckpt_path: Path, cfg: SolverConfig,
                  chunks: list[list[int]], workers: int, ledger: JobLedger,
                  preds: np.ndarray, ids: np.ndarray, flags: np.ndarray,
                  ) -> None:
    """Run the given sample-chunk jobs on `workers` processes, feeding the ledger.

    Chunk composition matters: a chunk is solved as one batch, and batched
    BLAS reductions are only bit-reproducible for identical batches. The
    caller therefore derives chunks from the full attempted list (fixed
    8-blocks), never from what happens to be pending, so worker count,
    completion order, and kill/resume cycles replay byte-identically.
    A chunk whose worker raises (or dies) is re-queued up to
    MAX_JOB_RETRIES times, then its samples are recorded as failed jobs.
    """
    if not chunks:
        return
    cfg_kwargs = dataclasses.asdict(cfg)

    def failed_records(chunk: list[int], reason: str) -> list[dict]:
        log.error("margin chunk failed permanently (%s): samples %s",
                  reason, [int(ids[p]) for p in chunk])
        return [MarginResult(sample_id=int(ids[p]), i=int(preds[p]),
                             status=SAMPLE_FAILED, corruption=int(flags[p]),
                             ).to_dict()
                for p in chunk]

    if workers <= 1:
        _init_worker(str(work_path), str(ckpt_path), cfg_kwargs)
        try:
            for chunk in chunks:
                ledger.append(_solve_chunk(chunk))
        finally:
            _WORKER.clear()
        return

    queue = deque((chunk, 0) for chunk in chunks)
    ctx = get_context("fork")
    while queue:
        batch = list(queue)
        queue.clear()
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx,
                                 initializer=_init_worker,
                                 initargs=(str(work_path), str(ckpt_path),
                                           cfg_kwargs)) as pool:
            futures = {pool.submit(_solve_chunk, chunk): (chunk, tries)
                       for chunk, tries in batch}
            for fut in as_completed(futures):
                chunk, tries = futures[fut]
                try:
                    ledger.append(fut.result())
                except Exception as exc:  # includes BrokenProcessPool
                    if tries >= MAX_JOB_RETRIES:
                        ledger.append(failed_records(chunk, repr(exc)))
                    else:
                        log.warning("re-queueing a margin chunk after %r", exc)
                        queue.append((chunk, tries + 1))


# ---------------------------------------------------------------------------
# Phases
# ---------------------------------------------------------------------------

def prepare_directory(manifest: RunManifest, out_dir, resume: bool,
                      ) -> ExperimentPaths:
    """Create/validate the experiment directory and pin the manifest to it."""
    paths = ExperimentPaths(out_dir)
    mpath = paths.root / "manifest.json"
    if mpath.exists():
        existing = json.loads(mpath.read_text())
        if existing.get("_hash") != manifest.hash:
            raise ManifestError(
                f"{paths.root} belongs to a different manifest "
                f"(found {existing.get('_hash', '?')[:12]}, "
                f"expected {manifest.hash[:12]}); refusing to mix outputs")
        if not resume:
            raise ManifestError(
                f"{paths.root} already holds this experiment; pass --resume "
                f"to continue it")
    paths.make_dirs()
    doc = manifest.canonical_dict()
    doc["_hash"] = manifest.hash
    mpath.write_text(json.dumps(doc, indent=2) + "\n")
    return paths


def _load_or_none(path: Path) -> LabeledDataset | None:
    if not path.exists():
        return None
    try:
        return load_dataset(path)
    except Exception as exc:
        log.warning("unreadable dataset %s (%s); regenerating", path.name, exc)
        return None


def prepare_datasets(manifest: RunManifest, paths: ExperimentPaths,
                     base_dir: Path | None = None,
                     ) -> tuple[dict[str, LabeledDataset], LabeledDataset,
                                np.ndarray]:
    """Split, corrupt, and persist every dataset variant, plus the selection.

    Returns ({model_kind: train variant}, validation set, selected ids).
    Existing NPZ files are reused, so a resumed run sees bit-identical data.
    """
    variants: dict[str, LabeledDataset] = {}
    val = _load_or_none(paths.val_npz())
    missing = [v for v in manifest.variants
               if _load_or_none(paths.variant_npz(manifest.model_kind(v))) is None]
    if val is None or missing:
        ds = load_idx_dataset(manifest.images_path(base_dir),
                              manifest.labels_path(base_dir),
                              num_classes=manifest.dataset.num_classes)
        train_ds, val = train_validation_split(
            ds, manifest.dataset.train_size, manifest.dataset.val_size,
            seed=manifest.dataset.split_seed)
        save_dataset(val, paths.val_npz())
        for var in manifest.variants:
            kind = manifest.model_kind(var)
            out = apply_corruption(train_ds, var)
            save_dataset(out, paths.variant_npz(kind))
    for var in manifest.variants:
        kind = manifest.model_kind(var)
        variants[kind] = load_dataset(paths.variant_npz(kind))

    sel_path = paths.selection()
    if sel_path.exists():
        selected = np.array(json.loads(sel_path.read_text())["ids"],
                            dtype=np.int64)
    else:
        any_train = next(iter(variants.values()))
        ids = np.sort(any_train.ids)
        rng = np.random.default_rng(manifest.selection_seed)
        budget = min(manifest.sample_budget, len(ids))
        selected = np.sort(rng.choice(ids, size=budget, replace=False))
        sel_path.write_text(json.dumps(
            {"ids": selected.tolist(), "selection_seed": manifest.selection_seed,
             "manifest_hash": manifest.hash}) + "\n")
    return variants, val, selected


def train_cell(manifest: RunManifest, paths: ExperimentPaths, cell: Cell,
               train_ds: LabeledDataset, val_ds: LabeledDataset):
    """Train (or reload) one cell's model; persist checkpoint + curves."""
    ckpt = paths.checkpoint(cell)
    if ckpt.exists():
        try:
            return load_checkpoint(ckpt)
        except Exception as exc:
            log.warning("unreadable checkpoint %s (%s); retraining",
                        ckpt.name, exc)
    cfg = dataclasses.replace(manifest.train, seed=cell.seed)
    model0 = init_model(input_dim=train_ds.input_dim,
                        hidden_width=cell.capacity,
                        num_classes=train_ds.num_classes, seed=cell.seed)
    t0 = time.time()
    model, report = train(model0, train_ds, val_ds, cfg)
    train_err = evaluate(model, train_ds)
    val_err = evaluate(model, val_ds)
    log.info("trained %s: epochs=%d train_err=%.4f val_err=%.4f (%.0fs)",
             cell.name, report.epochs_run, train_err, val_err,
             time.time() - t0)
    report.to_csv(paths.train_curves(cell),
                  header_comment=f"manifest_hash={manifest.hash}")
    summary = {"capacity": cell.capacity, "seed": cell.seed,
               "model_kind": cell.kind, "train_error": train_err,
               "val_error": val_err, "epochs_run": report.epochs_run,
               "interpolated": report.interpolated,
               "manifest_hash": manifest.hash}
    paths.train_summary(cell).write_text(json.dumps(summary, indent=1) + "\n")
    save_checkpoint(model, ckpt, tag=bytes.fromhex(manifest.hash)[:16])
    return model


def margins_cell(manifest: RunManifest, paths: ExperimentPaths, cell: Cell,
                 model, train_ds: LabeledDataset, selected: np.ndarray,
                 workers: int) -> list[MarginResult]:
    """Compute (or resume) the margin jobs for one cell; returns the replay.

    Attempts only the correctly classified members of the shared selection
    (§5 protocol); the selection-level exclusion count lands in the cell's
    summary within report.json.
    """
    order = np.argsort(train_ds.ids)
    sel_pos = order[np.searchsorted(train_ds.ids[order], selected)]
    preds_sel = model.predict_batch(train_ds.features[sel_pos])
    correct = preds_sel == train_ds.effective_labels[sel_pos]
    attempted_pos = sel_pos[correct]

    ledger = JobLedger(paths.ledger(cell))
    attempted_ids = train_ds.ids[attempted_pos]
    # Chunks are fixed 8-blocks of the attempted list. A chunk with any
    # member missing from the ledger is recomputed whole: batched solves
    # are only bit-reproducible for identical batches, so resuming with
    # reshuffled partial chunks would not replay byte-identically.
    done = ledger.completed
    pending_chunks = []
    for k in range(0, len(attempted_ids), CHUNK_SIZE):
        block = list(range(k, min(k + CHUNK_SIZE, len(attempted_ids))))
        if any(int(attempted_ids[p]) not in done for p in block):
            pending_chunks.append(block)

    if pending_chunks:
        anchors = np.ascontiguousarray(train_ds.features[attempted_pos])
        flags = train_ds.corruption[attempted_pos]
        all_preds = model.predict_batch(train_ds.features)
        ref_mask = all_preds == train_ds.effective_labels
        work = paths.work_npz(cell)
        np.savez(work, anchors=anchors, ids=attempted_ids,
                 corruption=flags,
                 ref_features=np.ascontiguousarray(train_ds.features[ref_mask]),
                 ref_labels=train_ds.effective_labels[ref_mask])
        log.info("margins %s: %d/%d chunks pending (workers=%d)",
                 cell.name, len(pending_chunks),
                 -(-len(attempted_ids) // CHUNK_SIZE), workers)
        dispatch_cmps(work, paths.checkpoint(cell), manifest.solver,
                      pending_chunks, workers, ledger,
                      preds=preds_sel[correct], ids=attempted_ids, flags=flags)
        work.unlink(missing_ok=True)

    results = ledger.replay()
    missing = set(int(s) for s in attempted_ids) - {r.sample_id for r in results}
    if missing:
        raise RuntimeError(f"{cell.name}: ledger incomplete after dispatch "
                           f"({len(missing)} samples missing)")
    return results


def maxmargin_phase(manifest: RunManifest, paths: ExperimentPaths,
                    variants: dict[str, LabeledDataset],
                    selected: np.ndarray) -> dict:
    """Eq.-4 max margins before/after corruption for each corrupted variant."""
    frames = []
    summaries = {}
    clean_kind = None
    for var in manifest.variants:
        if var.kind == CorruptionKind.NONE:
            clean_kind = manifest.model_kind(var)
    for var in manifest.variants:
        kind = manifest.model_kind(var)
        if var.kind == CorruptionKind.NONE:
            continue
        if clean_kind is None:
            raise ManifestError("max-margin records need the clean variant "
                                "as the 'before' dataset")
        records = build_max_margin_records(variants[clean_kind],
                                           variants[kind], selected)
        df, summary = scatter_before_after(records)
        df.insert(0, "variant", kind)
        frames.append(df)
        summaries[kind] = summary
    if frames:
        out = pd.concat(frames, ignore_index=True)
        out = out.sort_values(["variant", "sample_id"], ignore_index=True)
        analytics.write_table(out, paths.root / "scatter_maxmargin.csv",
                              manifest.hash)
    return summaries


def aggregate_phase(manifest: RunManifest, paths: ExperimentPaths,
                    results_by_cell: dict[Cell, list[MarginResult]]) -> dict:
    """Shared-bin aggregation plus every canonical report table."""
    all_valid = np.array([r.margin for results in results_by_cell.values()
                          for r in results if r.status == SAMPLE_VALID])
    if all_valid.size == 0:
        raise RuntimeError("no valid margins anywhere; nothing to aggregate")
    edges = analytics.shared_bin_edges(all_valid)

    summaries = []
    for cell, results in sorted(results_by_cell.items(),
                                key=lambda kv: (kv[0].capacity, kv[0].seed,
                                                kv[0].kind)):
        by_group = analytics.aggregate(results, cell.capacity, cell.seed,
                                       cell.kind, edges)
        summaries.extend(by_group.values())

    analytics.write_table(analytics.summaries_frame(summaries),
                          paths.root / "summaries.csv", manifest.hash)
    analytics.write_table(analytics.histograms_frame(summaries),
                          paths.root / "histograms.csv", manifest.hash)
    analytics.write_table(analytics.skew_report(summaries),
                          paths.root / "skew.csv", manifest.hash)
    try:
        curves = analytics.capacity_curves(summaries)
        analytics.write_table(curves, paths.root / "curves.csv", manifest.hash)
    except ValueError as exc:
        log.warning("capacity curves skipped: %s", exc)

    rows = []
    for cell, results in results_by_cell.items():
        for r in results:
            rows.append({
                "capacity": cell.capacity, "seed": cell.seed,
                "model_kind": cell.kind, "sample_id": r.sample_id,
                "corruption": r.corruption,
                "sample_group": "corrupt" if r.corruption else "clean",
                "status": r.status, "i": r.i, "j_star": r.j_star,
                "margin": r.margin, "residual": r.residual,
                "iterations": r.iterations, "redirects": r.redirects,
                "restarted": r.restarted})
    margins_df = pd.DataFrame(rows).sort_values(
        ["capacity", "seed", "model_kind", "sample_id"], ignore_index=True)
    analytics.write_table(margins_df, paths.root / "margins.csv", manifest.hash)
    return {"bin_edges": [float(edges[0]), float(edges[-1]), len(edges) - 1],
            "cells": len(results_by_cell), "samples": int(len(margins_df))}


def val_error_table(manifest: RunManifest, paths: ExperimentPaths,
                    cells: list[Cell]) -> pd.DataFrame:
    rows = []
    for cell in cells:
        p = paths.train_summary(cell)
        if not p.exists():
            continue
        rows.append(json.loads(p.read_text()))
    df = pd.DataFrame(rows)
    if len(df):
        df = df.drop(columns=["manifest_hash"]).sort_values(
            ["capacity", "seed", "model_kind"], ignore_index=True)
        analytics.write_table(df, paths.root / "val_error.csv", manifest.hash)
    return df


def distance_phase(manifest: RunManifest, paths: ExperimentPaths,
                   variants: dict[str, LabeledDataset],
                   results_by_cell: dict[Cell, list[MarginResult]],
                   side: int = 1000) -> dict | None:
    """Fig.-4 cross-group distance matrix for the largest label-corrupted model.

    Rows: clean-group samples with the smallest margins; columns: corrupt
    group, same rule; both capped at `side`. Skipped (with a log line) when
    the experiment has no label-corrupted cell with valid margins.
    """
    candidates = [c for c in results_by_cell if c.kind == "label_corrupted"]
    if not candidates:
        log.info("distance matrix skipped: no label-corrupted cell")
        return None
    cap = max(c.capacity for c in candidates)
    seed = min(c.seed for c in candidates if c.capacity == cap)
    cell = next(c for c in candidates if c.capacity == cap and c.seed == seed)

    valid = [r for r in results_by_cell[cell] if r.status == SAMPLE_VALID]
    clean = sorted((r for r in valid if not r.corruption),
                   key=lambda r: (r.margin, r.sample_id))[:side]
    corrupt = sorted((r for r in valid if r.corruption),
                     key=lambda r: (r.margin, r.sample_id))[:side]
    if not clean or not corrupt:
        log.info("distance matrix skipped: a group is empty in %s", cell.name)
        return None

    key = {r.sample_id: (r.corruption, r.margin) for r in valid}
    ds = variants[cell.kind]
    row_ids = order_ids(np.array([r.sample_id for r in clean]),
                        np.array([r.corruption for r in clean]),
                        np.array([r.margin for r in clean]))
    col_ids = order_ids(np.array([r.sample_id for r in corrupt]),
                        np.array([r.corruption for r in corrupt]),
                        np.array([r.margin for r in corrupt]))
    dm = distance_matrix(ds, row_ids, col_ids, ordering_key=key)
    save_distance_matrix(dm, paths.root / "distance_matrix.bin")

    axes_rows = []
    for axis, ids in (("row", dm.row_ids), ("col", dm.col_ids)):
        for pos, sid in enumerate(ids):
            corr, margin = key[int(sid)]
            axes_rows.append({"axis": axis, "position": pos,
                              "sample_id": int(sid), "corruption": int(corr),
                              "margin": margin})
    analytics.write_table(pd.DataFrame(axes_rows),
                          paths.root / "distance_axes.csv", manifest.hash)
    return {"cell": cell.name, "rows": len(dm.row_ids), "cols": len(dm.col_ids)}


# ---------------------------------------------------------------------------
# End-to-end run
# ---------------------------------------------------------------------------

@dataclass
class RunOutcome:
    out_dir: Path
    cells_done: list[str]
    cells_failed: list[str]
    elapsed: float

    @property
    def ok(self) -> bool:
        return not self.cells_failed


def run_experiment(manifest: RunManifest, out_dir, workers: int = 1,
                   resume: bool = False, base_dir: Path | None = None,
                   phases: tuple[str, ...] = ("train", "margins", "report"),
                   ) -> RunOutcome:
    """Drive the full pipeline; isolated per-cell failures, idempotent resume.

    `phases` restricts the work (the CLI's train/margins/report subcommands
    are this function with a subset): "train" builds models, "margins" adds
    CMP results, "report" builds max margins, aggregates, the distance
    matrix, report.json, and renders figures.
    """
    t0 = time.time()
    paths = prepare_directory(manifest, out_dir, resume)
    variants, val, selected = prepare_datasets(manifest, paths, base_dir)

    done: list[str] = []
    failed: list[str] = []
    failures: dict[str, str] = {}
    results_by_cell: dict[Cell, list[MarginResult]] = {}
    cell_stats: list[dict] = []

    for cell in cells_of(manifest):
        train_ds = variants[cell.kind]
        try:
            model = None
            if "train" in phases or "margins" in phases:
                model = train_cell(manifest, paths, cell, train_ds, val)
            if "margins" in phases:
                results = margins_cell(manifest, paths, cell, model, train_ds,
                                       selected, workers)
                results_by_cell[cell] = results
                n_valid = sum(r.status == SAMPLE_VALID for r in results)
                cell_stats.append({
                    "cell": cell.name, "selected": int(len(selected)),
                    "attempted": len(results), "valid": n_valid,
                    "excluded_misclassified":
                        int(len(selected)) - len(results)})
            done.append(cell.name)
        except Exception as exc:
            log.exception("cell %s failed", cell.name)
            failed.append(cell.name)
            failures[cell.name] = repr(exc)

    report_info: dict = {}
    if "report" in phases:
        if not results_by_cell:
            # report-only invocation: replay whatever ledgers exist
            for cell in cells_of(manifest):
                ledger_path = paths.ledger(cell)
                if not ledger_path.exists():
                    continue
                results = JobLedger(ledger_path).replay()
                results_by_cell[cell] = results
                n_valid = sum(r.status == SAMPLE_VALID for r in results)
                cell_stats.append({
                    "cell": cell.name, "selected": int(len(selected)),
                    "attempted": len(results), "valid": n_valid,
                    "excluded_misclassified":
                        int(len(selected)) - len(results)})
        try:
            report_info["maxmargin"] = maxmargin_phase(manifest, paths,
                                                       variants, selected)
            if results_by_cell:
                report_info["aggregate"] = aggregate_phase(manifest, paths,
                                                           results_by_cell)
                report_info["distance_matrix"] = distance_phase(
                    manifest, paths, variants, results_by_cell)
            val_error_table(manifest, paths, cells_of(manifest))
            payload = {
                "manifest_hash": manifest.hash,
                "elapsed_seconds": round(time.time() - t0, 3),
                "cells_done": done, "cells_failed": failed,
                "failures": failures, "cell_stats": cell_stats,
                **report_info,
            }
            analytics.write_summary_json(paths.root / "report.json", payload,
                                         manifest.hash)
            rendered = figures.render_all(paths.root)
            log.info("rendered %d figures", len(rendered))
        except Exception:
            log.exception("report phase failed")
            failed.append("report")

    return RunOutcome(out_dir=paths.root, cells_done=done,
                      cells_failed=failed, elapsed=time.time() - t0)
