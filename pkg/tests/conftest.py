"""Shared fixtures: a tiny blob fixture for pipeline tests and the cached
desk-scale digit sweep that the acceptance suite audits.

The desk-scale run is expensive (hours, single core), so it lives in
.cache/acceptance/ keyed by manifest hash and is resumed — never recomputed —
when its outputs already exist.  Delete the directory to force a fresh run.
"""
from __future__ import annotations

import json
import os
from pathlib import Path
from types import SimpleNamespace

import pytest

from marginlab import synth
from marginlab.manifest import load_manifest
from marginlab.pipeline import run_experiment

REPO_ROOT = Path(__file__).resolve().parent.parent
ACCEPTANCE_CACHE = Path(os.environ.get(
    "MARGINLAB_ACCEPTANCE_CACHE", REPO_ROOT / ".cache" / "acceptance"))

# Frozen desk-scale recipe.  The digit-generator seed, split seed, corruption
# seeds, and selection seed are all load-bearing: the max-margin geometry
# assertions were calibrated against exactly this dataset.
ACCEPTANCE_MANIFEST = {
    "version": 1,
    "dataset": {
        "images": "digits_images.idx",
        "labels": "digits_labels.idx",
        "train_size": 4000,
        "val_size": 2000,
        "split_seed": 5,
    },
    "variants": [
        {"kind": "none", "fraction": 0.0, "seed": 0},
        {"kind": "label", "fraction": 0.2, "seed": 77},
        {"kind": "gaussian_input", "fraction": 0.2, "seed": 78},
    ],
    "capacities": [100, 500, 2000],
    "seeds": [3, 4],
    "train": {"lr0": 0.05, "max_epochs": 800},
    "solver": {},
    "margins": {"sample_budget": 1000, "selection_seed": 99},
}
ACCEPTANCE_DIGITS = {"n": 6000, "seed": 11}

# Small 2-D blob recipe for fast end-to-end pipeline tests (~5 s per run).
BLOB_MANIFEST = {
    "version": 1,
    "dataset": {
        "images": "blob_images.idx",
        "labels": "blob_labels.idx",
        "train_size": 150,
        "val_size": 60,
        "split_seed": 5,
    },
    "variants": [
        {"kind": "none", "fraction": 0.0, "seed": 0},
        {"kind": "label", "fraction": 0.2, "seed": 77},
        {"kind": "gaussian_input", "fraction": 0.2, "seed": 78},
    ],
    "capacities": [8, 64],
    "seeds": [1],
    "train": {"lr0": 0.1, "max_epochs": 500},
    "solver": {},
    "margins": {"sample_budget": 50, "selection_seed": 99},
}
BLOB_POINTS = {"n": 240, "seed": 4}

CANONICAL_OUTPUTS = (
    "margins.csv", "summaries.csv", "histograms.csv", "curves.csv",
    "skew.csv", "scatter_maxmargin.csv", "val_error.csv",
    "distance_axes.csv", "distance_matrix.bin", "distance_matrix.bin.json",
)


def ensure_acceptance_assets() -> tuple[Path, Path]:
    """Generate the digit dataset and manifest file if missing.

    Returns (manifest_path, experiment_dir).  Idempotent; safe to call from
    both the pytest fixture and the standalone launcher.
    """
    ACCEPTANCE_CACHE.mkdir(parents=True, exist_ok=True)
    images = ACCEPTANCE_CACHE / ACCEPTANCE_MANIFEST["dataset"]["images"]
    labels = ACCEPTANCE_CACHE / ACCEPTANCE_MANIFEST["dataset"]["labels"]
    if not (images.exists() and labels.exists()):
        synth.write_digit_dataset(images, labels, **ACCEPTANCE_DIGITS)
    manifest_path = ACCEPTANCE_CACHE / "manifest.json"
    if not manifest_path.exists():
        with open(manifest_path, "w") as fh:
            json.dump(ACCEPTANCE_MANIFEST, fh, indent=1)
    return manifest_path, ACCEPTANCE_CACHE / "exp"


def write_blob_fixture(root: Path) -> Path:
    """Materialize the blob dataset + manifest under root; return manifest path."""
    root.mkdir(parents=True, exist_ok=True)
    images = root / BLOB_MANIFEST["dataset"]["images"]
    labels = root / BLOB_MANIFEST["dataset"]["labels"]
    if not (images.exists() and labels.exists()):
        synth.write_blob_dataset(images, labels, **BLOB_POINTS)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        with open(manifest_path, "w") as fh:
            json.dump(BLOB_MANIFEST, fh, indent=1)
    return manifest_path


@pytest.fixture(scope="session")
def blob_fixture(tmp_path_factory) -> SimpleNamespace:
    """Blob dataset + manifest, plus one completed reference run (workers=1)."""
    root = tmp_path_factory.mktemp("blobfix")
    manifest_path = write_blob_fixture(root)
    manifest = load_manifest(manifest_path)
    exp = root / "exp_ref"
    outcome = run_experiment(manifest, exp, workers=1,
                             base_dir=manifest_path.parent)
    assert outcome.ok, f"blob reference run failed: {outcome.cells_failed}"
    return SimpleNamespace(root=root, manifest_path=manifest_path,
                           manifest=manifest, exp=exp)


@pytest.fixture(scope="session")
def acceptance_run() -> SimpleNamespace:
    """The desk-scale sweep, resumed from .cache/acceptance when present."""
    manifest_path, exp = ensure_acceptance_assets()
    manifest = load_manifest(manifest_path)
    outcome = run_experiment(manifest, exp, workers=1,
                             resume=exp.exists(),
                             base_dir=manifest_path.parent)
    assert outcome.ok, f"acceptance sweep failed: {outcome.cells_failed}"
    return SimpleNamespace(cache=ACCEPTANCE_CACHE, manifest_path=manifest_path,
                           manifest=manifest, exp=exp)
