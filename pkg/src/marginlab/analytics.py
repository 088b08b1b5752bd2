"""Aggregation of margin results by the sample-corruption taxonomy.

Margins are partitioned into clean / corrupt / overall sample groups per
model kind (clean, label_corrupted, input_corrupted); the corrupt group
under a clean model is inadmissible. Each (group, capacity, seed) cell
gets mean, median, sample std, sample skewness, tail mass beyond
mean + 2*std, a histogram over experiment-wide shared bin edges, and the
solver exclusion rate. Curves average cells across seeds. Everything is
emitted as CSV with the run-manifest hash in a comment header; rendering
the figures from these tables lives in the figures module, not here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import stats

from .solver import SAMPLE_VALID, MarginResult

SAMPLE_GROUPS = ("clean", "corrupt", "overall")
MODEL_KINDS = ("clean", "label_corrupted", "input_corrupted")
DEFAULT_BIN_COUNT = 60


@dataclass(frozen=True)
class GroupKey:
    sample_group: str
    model_kind: str

    def __post_init__(self):
        if self.sample_group not in SAMPLE_GROUPS:
            raise ValueError(f"unknown sample_group {self.sample_group!r}")
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"unknown model_kind {self.model_kind!r}")
        if self.sample_group == "corrupt" and self.model_kind == "clean":
            raise ValueError("corrupt:clean is inadmissible (the N/a cell)")

    @property
    def label(self) -> str:
        return f"{self.sample_group}:{self.model_kind}"


@dataclass
class MarginSummary:
    group: GroupKey
    capacity: int
    seed: int
    count: int
    mean: float
    median: float
    std: float
    skewness: float
    tail_mass: float
    histogram: np.ndarray
    bin_edges: np.ndarray
    solver_exclusion_rate: float

    def check_invariants(self) -> None:
        if self.count != int(self.histogram.sum()):
            raise AssertionError("histogram counts do not add up to the group count")
        if self.count and not (self.bin_edges[0] <= self.mean <= self.bin_edges[-1]):
            raise AssertionError("mean falls outside the shared bin range")


def shared_bin_edges(margins: np.ndarray, bin_count: int = DEFAULT_BIN_COUNT,
                     ) -> np.ndarray:
    """Uniform edges over [0, max margin across the whole experiment].

    Computed once per experiment so histograms stay comparable across
    capacities and model kinds.
    """
    margins = np.asarray(margins, dtype=np.float64)
    top = float(margins.max()) if margins.size else 1.0
    if top <= 0:
        top = 1.0
    return np.linspace(0.0, top, bin_count + 1)


def _cell_stats(margins: np.ndarray, excluded: int, group: GroupKey,
                capacity: int, seed: int, bin_edges: np.ndarray) -> MarginSummary:
    n = len(margins)
    total = n + excluded
    excl = float(excluded) / total if total else 0.0
    hist = np.histogram(margins, bins=bin_edges)[0] if n else \
        np.zeros(len(bin_edges) - 1, dtype=np.int64)
    if n and hist.sum() != n:
        raise ValueError("margins fall outside the shared bin edges; the edges "
                         "must be computed over the whole experiment")
    mean = float(np.mean(margins)) if n else np.nan
    median = float(np.median(margins)) if n else np.nan
    std = float(np.std(margins, ddof=1)) if n >= 2 else np.nan
    skewness = float(stats.skew(margins, bias=False)) if n >= 3 else np.nan
    tail = float(np.mean(margins > mean + 2.0 * std)) if n >= 2 and np.isfinite(std) \
        else np.nan
    return MarginSummary(group=group, capacity=capacity, seed=seed, count=n,
                         mean=mean, median=median, std=std, skewness=skewness,
                         tail_mass=tail, histogram=hist.astype(np.int64),
                         bin_edges=np.asarray(bin_edges, dtype=np.float64),
                         solver_exclusion_rate=excl)


def aggregate(results: list[MarginResult], capacity: int, seed: int,
              model_kind: str, bin_edges: np.ndarray,
              ) -> dict[GroupKey, MarginSummary]:
    """Partition one cell's results into clean/corrupt/overall summaries.

    Only valid-status margins enter the statistics; the per-group share of
    excluded results is reported as solver_exclusion_rate. Corruption
    flags come from the result records (the dataset stamped them there).
    """
    if model_kind not in MODEL_KINDS:
        raise ValueError(f"unknown model_kind {model_kind!r}")
    flags = np.array([r.corruption for r in results], dtype=np.int64)
    valid = np.array([r.status == SAMPLE_VALID for r in results], dtype=bool)
    margins = np.array([r.margin if r.status == SAMPLE_VALID else np.nan
                        for r in results], dtype=np.float64)
    if model_kind == "clean" and np.any(flags > 0):
        raise ValueError("corrupted samples cannot appear under a clean model kind")

    out: dict[GroupKey, MarginSummary] = {}
    masks = {"clean": flags == 0, "corrupt": flags > 0,
             "overall": np.ones(len(results), dtype=bool)}
    for name, mask in masks.items():
        if name == "corrupt" and model_kind == "clean":
            continue
        key = GroupKey(name, model_kind)
        vals = margins[mask & valid]
        excluded = int(np.sum(mask & ~valid))
        out[key] = _cell_stats(vals, excluded, key, capacity, seed, bin_edges)
        out[key].check_invariants()
    clean_n = out[GroupKey("clean", model_kind)].count
    corrupt_n = 0
    if model_kind != "clean":
        corrupt_n = out[GroupKey("corrupt", model_kind)].count
    if clean_n + corrupt_n != out[GroupKey("overall", model_kind)].count:
        raise AssertionError("clean + corrupt counts must equal the overall count")
    return out


def check_shared_edges(summaries: list[MarginSummary]) -> np.ndarray:
    """Assert every summary uses one identical edge array; returns it."""
    if not summaries:
        raise ValueError("no summaries")
    edges = summaries[0].bin_edges
    for s in summaries[1:]:
        if not np.array_equal(s.bin_edges, edges):
            raise AssertionError("histogram bin edges differ across summaries")
    return edges


def summaries_frame(summaries: list[MarginSummary]) -> pd.DataFrame:
    rows = [{"capacity": s.capacity, "seed": s.seed,
             "sample_group": s.group.sample_group, "model_kind": s.group.model_kind,
             "count": s.count, "mean": s.mean, "median": s.median, "std": s.std,
             "skewness": s.skewness, "tail_mass": s.tail_mass,
             "solver_exclusion_rate": s.solver_exclusion_rate}
            for s in summaries]
    df = pd.DataFrame(rows)
    return df.sort_values(["model_kind", "sample_group", "capacity", "seed"],
                          ignore_index=True)


def capacity_curves(summaries: list[MarginSummary]) -> pd.DataFrame:
    """Fig. 2 data: per-group mean margin vs capacity, averaged over seeds.

    std is the across-seed sample standard deviation (ddof=1; NaN with a
    single seed), matching the shaded-band convention.
    """
    if not summaries:
        raise ValueError("no summaries")
    by_seed: dict[int, set] = {}
    for s in summaries:
        by_seed.setdefault(s.seed, set()).add((s.group, s.capacity))
    cells = list(by_seed.values())
    if any(c != cells[0] for c in cells[1:]):
        raise ValueError("summaries carry inconsistent group sets across seeds")

    df = summaries_frame(summaries)
    grouped = df.groupby(["capacity", "sample_group", "model_kind"], sort=True)
    out = grouped.agg(seeds=("seed", "count"), mean=("mean", "mean"),
                      std=("mean", lambda v: v.std(ddof=1)),
                      mean_count=("count", "mean")).reset_index()
    return out.sort_values(["model_kind", "sample_group", "capacity"],
                           ignore_index=True)


def skew_report(summaries: list[MarginSummary]) -> pd.DataFrame:
    """Per-cell sample skewness and tail mass beyond mean + 2*std.

    Cells with fewer than 3 valid margins are omitted; zero-variance cells
    are kept but flagged degenerate.
    """
    rows = []
    for s in summaries:
        if s.count < 3:
            continue
        rows.append({"capacity": s.capacity, "seed": s.seed,
                     "sample_group": s.group.sample_group,
                     "model_kind": s.group.model_kind, "count": s.count,
                     "skewness": s.skewness, "tail_mass": s.tail_mass,
                     "degenerate": bool(s.std == 0.0)})
    df = pd.DataFrame(rows, columns=["capacity", "seed", "sample_group",
                                     "model_kind", "count", "skewness",
                                     "tail_mass", "degenerate"])
    return df.sort_values(["model_kind", "sample_group", "capacity", "seed"],
                          ignore_index=True)


def histograms_frame(summaries: list[MarginSummary]) -> pd.DataFrame:
    """Long-form shared-bin histogram table (Fig. 3 data)."""
    edges = check_shared_edges(summaries)
    rows = []
    for s in summaries:
        for b, cnt in enumerate(s.histogram):
            rows.append({"capacity": s.capacity, "seed": s.seed,
                         "sample_group": s.group.sample_group,
                         "model_kind": s.group.model_kind, "bin": b,
                         "bin_left": edges[b], "bin_right": edges[b + 1],
                         "count": int(cnt)})
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# Delimited output with a manifest fingerprint
# ---------------------------------------------------------------------------

def write_table(df: pd.DataFrame, path, manifest_hash: str) -> None:
    """CSV with `# manifest_hash=...` so mixed-manifest dirs are detectable."""
    with open(path, "w") as fh:
        fh.write(f"# manifest_hash={manifest_hash}\n")
        df.to_csv(fh, index=False)


def read_table(path, expect_hash: str | None = None) -> pd.DataFrame:
    with open(path) as fh:
        first = fh.readline().strip()
    if not first.startswith("# manifest_hash="):
        raise ValueError(f"{path}: missing manifest_hash header")
    found = first.split("=", 1)[1]
    if expect_hash is not None and found != expect_hash:
        raise ValueError(f"{path}: manifest_hash {found} does not match "
                         f"expected {expect_hash} (mixed-manifest directory?)")
    return pd.read_csv(path, comment="#")


def write_summary_json(path, payload: dict, manifest_hash: str) -> None:
    body = {"manifest_hash": manifest_hash, **payload}
    with open(path, "w") as fh:
        json.dump(body, fh, indent=1, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"not JSON-serializable: {type(v)}")
