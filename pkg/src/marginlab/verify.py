"""Oracle and invariant audit behind `marginlab verify`.

Three self-contained oracles (no experiment needed):
  * linear-margin exactness against the closed-form point-to-hyperplane
    distance,
  * analytic input gradients against central finite differences,
  * nearest-different-label search against a quadratic brute force.

Given an experiment directory, additionally audits its artifacts: one
manifest hash across every table, histogram invariants, validity of
reported margins/residuals, and a random recomputation of distance-matrix
entries. Each check prints one ok/FAIL line; the CLI maps any failure to
exit code 4.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from .model import LinearModel, init_model, input_gradient
from .solver import SolverConfig, solve_margin

log = logging.getLogger(__name__)

VALIDITY_THRESHOLD = SolverConfig().validity_threshold


def _report(failures: list[str], name: str, ok: bool, detail: str) -> None:
    print(f"[{'ok' if ok else 'FAIL'}] {name}: {detail}")
    if not ok:
        failures.append(f"{name}: {detail}")


def check_linear_oracle(failures: list[str], seed: int, cases: int = 30) -> None:
    """Solver margin vs closed form |w.(x) + b| / ||w|| on random linear models."""
    rng = np.random.default_rng(seed)
    cfg = SolverConfig()
    worst = 0.0
    for k in range(cases):
        d = int(rng.choice([2, 10, 784]))
        C = int(rng.integers(2, 6))
        W = rng.normal(size=(C, d))
        b = rng.normal(size=C)
        x = rng.normal(size=d)
        model = LinearModel(W=W, b=b)
        i = int(np.argmax(W @ x + b))
        exact = np.inf
        for j in range(C):
            if j == i:
                continue
            w = W[i] - W[j]
            exact = min(exact, abs(w @ x + (b[i] - b[j])) / np.linalg.norm(w))
        res = solve_margin(model, x, cfg)
        if res.status != "valid":
            _report(failures, "linear-oracle", False,
                    f"case {k}: solver status {res.status}")
            return
        rel = abs(res.margin - exact) / max(exact, 1e-30)
        worst = max(worst, rel)
    _report(failures, "linear-oracle", worst <= 1e-6,
            f"{cases} cases, worst relative error {worst:.2e} (tol 1e-6)")


def check_gradients(failures: list[str], seed: int, probes: int = 20) -> None:
    """pair_value_grad vs central differences away from ReLU kinks."""
    rng = np.random.default_rng(seed)
    model = init_model(input_dim=30, hidden_width=40, num_classes=5,
                       seed=seed + 1)
    h = 1e-5
    worst = 0.0
    done = 0
    while done < probes:
        x = rng.normal(size=30)
        pre = model.W1 @ x + model.b1
        if np.min(np.abs(pre)) < 50 * h * np.linalg.norm(model.W1, axis=1).max():
            continue  # too close to a kink for clean finite differences
        i, j = rng.choice(5, size=2, replace=False)
        g = input_gradient(model, x, int(i), int(j))
        fd = np.empty_like(x)
        for k in range(x.size):
            e = np.zeros_like(x)
            e[k] = h
            fp = model.pair_value((x + e)[None, :], np.array([i]), np.array([j]))[0]
            fm = model.pair_value((x - e)[None, :], np.array([i]), np.array([j]))[0]
            fd[k] = (fp - fm) / (2 * h)
        rel = np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-30)
        worst = max(worst, rel)
        done += 1
    _report(failures, "gradient-fd", worst <= 1e-4,
            f"{probes} probes, worst relative error {worst:.2e} (tol 1e-4)")


def check_nearest_neighbor(failures: list[str], seed: int,
                           queries: int = 50) -> None:
    """nearest_other_label vs a direct quadratic scan."""
    from .geometry import nearest_other_label

    rng = np.random.default_rng(seed)
    X = rng.normal(size=(400, 24))
    y = rng.integers(0, 4, size=400)
    q = rng.choice(400, size=queries, replace=False)
    dist, idx = nearest_other_label(X[q], y[q], X, y)
    worst = 0.0
    for k, qi in enumerate(q):
        mask = y != y[qi]
        d = np.linalg.norm(X[mask] - X[qi], axis=1)
        worst = max(worst, abs(d.min() - dist[k]))
    _report(failures, "nearest-neighbor", worst <= 1e-12,
            f"{queries} queries, worst |Δdistance| {worst:.2e} (tol 1e-12)")


def audit_experiment(failures: list[str], exp_dir: Path) -> None:
    """Consistency audit of an experiment directory's artifacts."""
    from .analytics import read_table
    from .data import load_dataset
    from .geometry import load_distance_matrix

    mpath = exp_dir / "manifest.json"
    if not mpath.exists():
        _report(failures, "experiment", False, f"{mpath} missing")
        return
    manifest_hash = json.loads(mpath.read_text()).get("_hash", "")
    tables = [p for p in sorted(exp_dir.glob("*.csv"))]
    bad = []
    for p in tables:
        try:
            read_table(p, expect_hash=manifest_hash)
        except Exception as exc:
            bad.append(f"{p.name} ({exc})")
    _report(failures, "manifest-hash", not bad,
            f"{len(tables)} tables under one manifest"
            + (f"; mismatches: {bad}" if bad else ""))

    spath = exp_dir / "summaries.csv"
    hpath = exp_dir / "histograms.csv"
    if spath.exists() and hpath.exists():
        s = read_table(spath)
        h = read_table(hpath)
        merged = h.groupby(["capacity", "seed", "sample_group", "model_kind"],
                           as_index=False)["count"].sum()
        j = s.merge(merged, on=["capacity", "seed", "sample_group",
                                "model_kind"], suffixes=("", "_hist"))
        ok = bool((j["count"] == j["count_hist"]).all()) and len(j) == len(s)
        edges_ok = (h.groupby("bin")[["bin_left", "bin_right"]].nunique()
                    .le(1).all().all())
        _report(failures, "histogram-counts", ok and bool(edges_ok),
                f"{len(s)} summary cells vs binned counts; shared edges: "
                f"{bool(edges_ok)}")

    mpath = exp_dir / "margins.csv"
    if mpath.exists():
        m = read_table(mpath)
        valid = m[m["status"] == "valid"]
        ok = bool((valid["margin"] >= 0).all()
                  and (valid["residual"].abs() <= VALIDITY_THRESHOLD).all())
        _report(failures, "margin-records", ok,
                f"{len(valid)} valid margins nonnegative with residual <= "
                f"{VALIDITY_THRESHOLD:g}")

    bpath = exp_dir / "distance_matrix.bin"
    if bpath.exists():
        dm = load_distance_matrix(bpath)
        ds = None
        for cand in sorted((exp_dir / "datasets").glob("train_*.npz")):
            trial = load_dataset(cand)
            if np.isin(dm.row_ids, trial.ids).all() \
                    and np.isin(dm.col_ids, trial.ids).all():
                ds = trial
                if "label" in cand.name:
                    break
        if ds is None:
            _report(failures, "distance-matrix", False,
                    "no stored dataset covers the matrix ids")
        else:
            pos = {int(s): k for k, s in enumerate(ds.ids)}
            rng = np.random.default_rng(7)
            n = max(1, dm.entries.size // 100)
            rr = rng.integers(0, len(dm.row_ids), size=n)
            cc = rng.integers(0, len(dm.col_ids), size=n)
            worst = 0.0
            for a, b in zip(rr, cc):
                xa = ds.features[pos[int(dm.row_ids[a])]]
                xb = ds.features[pos[int(dm.col_ids[b])]]
                worst = max(worst, abs(np.linalg.norm(xa - xb)
                                       - dm.entries[a, b]))
            _report(failures, "distance-matrix", worst <= 1e-9,
                    f"{n} random entries recomputed, worst |Δ| {worst:.2e}")


def run_verification(manifest_path=None, exp_dir=None, seed: int = 0,
                     ) -> list[str]:
    """Run every applicable check; returns the list of failures."""
    failures: list[str] = []
    check_linear_oracle(failures, seed)
    check_gradients(failures, seed + 1)
    check_nearest_neighbor(failures, seed + 2)
    if manifest_path is not None:
        from .manifest import load_manifest

        try:
            load_manifest(manifest_path)
            _report(failures, "manifest", True, f"{manifest_path} validates")
        except Exception as exc:
            _report(failures, "manifest", False, str(exc))
    if exp_dir is not None:
        audit_experiment(failures, Path(exp_dir))
    print(f"{'PASS' if not failures else 'FAIL'}: "
          f"{len(failures)} failed check(s)")
    return failures
