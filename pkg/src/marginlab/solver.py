"""Nearest decision-boundary point search.

For an anchor x predicted as class i and a candidate class j, the solver
minimizes the squared Euclidean distance ||x - xhat||^2 subject to the
logit-equality constraint g(xhat) = f(xhat)[i] - f(xhat)[j] = 0 with an
augmented-Lagrangian outer loop

    L(xhat, lam, rho) = ||x - xhat||^2 + lam * g + (rho / 2) * g^2,
    lam <- lam + rho * g,   rho <- rho * growth on insufficient decrease,

and a first-order inner minimizer: a linearized-constraint projection step
(exact minimizer of L when g is locally affine, as it is inside one ReLU
region) safeguarded by Armijo backtracking. Distances are optimized
squared and reported unsquared. The search runs over unconstrained R^d.

A point counts as on-boundary when |g| <= validity_threshold, but the
outer loop polishes well past that (residual_target), so the reported
distance is the distance to the g = 0 boundary itself rather than to the
relaxed |g| <= threshold shell. An anchor already within the threshold
short-circuits to margin 0. The lowest-residual iterate is kept as the
fallback answer on non-convergence. The whole engine is vectorized over a
batch of independent problems; identical inputs give bit-identical
outputs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger("marginlab.solver")

PAIR_VALID = "valid"
PAIR_INVALID = "invalid_residual"
PAIR_NAN = "nan_objective"
SAMPLE_VALID = "valid"
SAMPLE_FAILED = "no_pair_converged"

RESTART_NONE = "none"
RESTART_BISECTION = "bisection_seed"
SEED_ANCHOR = "anchor"
SEED_PAIR_BISECTION = "pair_bisection"


@dataclass(frozen=True)
class SolverConfig:
    validity_threshold: float = 1e-3
    residual_target: float = 1e-9        # outer loop polishes well past validity
    convergence_tol: float = 1e-9        # inner stop on step norm
    inner_max_iters: int = 500
    outer_max_iters: int = 50
    penalty_init: float = 10.0
    penalty_growth: float = 2.0
    penalty_max: float = 1e12
    multiplier_init: float = 0.0
    sufficient_decrease: float = 0.25    # residual shrink demanded before rho grows
    max_backtracks: int = 30
    armijo_c1: float = 1e-4
    restart_policy: str = RESTART_BISECTION
    # "anchor": every CMP starts its search at x (the default). "pair_bisection":
    # start at the g-sign crossing toward the nearest reference labeled j, which
    # skips the long march through ReLU regions on far pairs; the minimization
    # problem itself is unchanged. Needs restart_refs at solve_margins level.
    seed_policy: str = SEED_ANCHOR
    sandwich_slack: float = 1e-4         # audit tolerance for the bisection bound
    bisection_precision: float = 1e-6
    bisection_max_iters: int = 60

    def __post_init__(self):
        if self.validity_threshold <= 0:
            raise ValueError("validity_threshold must be positive")
        if self.penalty_growth <= 1:
            raise ValueError("penalty_growth must exceed 1")
        if self.restart_policy not in (RESTART_NONE, RESTART_BISECTION):
            raise ValueError(f"unknown restart_policy {self.restart_policy!r}")
        if self.seed_policy not in (SEED_ANCHOR, SEED_PAIR_BISECTION):
            raise ValueError(f"unknown seed_policy {self.seed_policy!r}")


@dataclass(frozen=True)
class CmpProblem:
    """One constrained minimization: anchor x, predicted class i, candidate j."""

    model: object
    x: np.ndarray
    i: int
    j: int

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError("candidate class j must differ from predicted class i")


@dataclass
class PairDiag:
    """Outcome of one (sample, j) CMP."""

    j: int
    distance: float
    residual: float
    status: str
    iterations: int
    restarted: bool = False


@dataclass
class MarginResult:
    """Margin of one sample: winning pair plus per-pair diagnostics."""

    sample_id: int
    i: int
    status: str
    j_star: int | None = None
    margin: float | None = None
    residual: float | None = None
    boundary_point: np.ndarray | None = None
    corruption: int = 0
    pairs: list[PairDiag] = field(default_factory=list)
    redirects: int = 0
    restarted: bool = False

    @property
    def iterations(self) -> int:
        return sum(p.iterations for p in self.pairs)

    def to_dict(self) -> dict:
        """JSON-ready record for the job ledger.

        The boundary point is deliberately dropped: no aggregate consumes
        it, and keeping ledger lines small is what makes resume cheap.
        """
        return {
            "sample_id": self.sample_id, "i": self.i, "status": self.status,
            "j_star": self.j_star, "margin": self.margin,
            "residual": self.residual, "corruption": self.corruption,
            "redirects": self.redirects, "restarted": self.restarted,
            "pairs": [{"j": p.j, "distance": p.distance,
                       "residual": p.residual, "status": p.status,
                       "iterations": p.iterations, "restarted": p.restarted}
                      for p in self.pairs],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MarginResult":
        pairs = [PairDiag(**p) for p in d.get("pairs", [])]
        return cls(sample_id=d["sample_id"], i=d["i"], status=d["status"],
                   j_star=d["j_star"], margin=d["margin"],
                   residual=d["residual"], corruption=d["corruption"],
                   redirects=d.get("redirects", 0),
                   restarted=d.get("restarted", False), pairs=pairs)


class _PairBlock:
    """Engine state/result arrays for a batch of B independent CMPs."""

    def __init__(self, xhat, dist, residual, status, iterations):
        self.xhat = xhat
        self.dist = dist
        self.residual = residual
        self.status = status          # int8: 0 valid, 1 invalid_residual, 2 nan
        self.iterations = iterations

    def status_str(self, k: int) -> str:
        return (PAIR_VALID, PAIR_INVALID, PAIR_NAN)[int(self.status[k])]


def _solve_pair_block(model, anchors: np.ndarray, I: np.ndarray, J: np.ndarray,
                      cfg: SolverConfig, x0: np.ndarray | None = None) -> _PairBlock:
    """Augmented-Lagrangian solve for B independent (anchor, i, j) problems."""
    X = np.ascontiguousarray(anchors, dtype=np.float64)
    B, d = X.shape
    I = np.asarray(I, dtype=np.int64)
    J = np.asarray(J, dtype=np.int64)
    xhat = np.array(x0 if x0 is not None else X, dtype=np.float64, copy=True)

    lam = np.full(B, cfg.multiplier_init, dtype=np.float64)
    rho = np.full(B, cfg.penalty_init, dtype=np.float64)
    iters = np.zeros(B, dtype=np.int64)

    # fallback: lowest-residual iterate seen (ties to the closer one)
    best_res = np.full(B, np.inf)
    bestres_dist2 = np.full(B, np.inf)
    bestres_x = X.copy()
    nan_flag = np.zeros(B, dtype=bool)

    def consider(rows, g_rows, x_rows):
        finite = np.isfinite(g_rows) & np.all(np.isfinite(x_rows), axis=1)
        if not np.all(finite):
            nan_flag[rows[~finite]] = True
            if not np.any(finite):
                return
            rows, g_rows, x_rows = rows[finite], g_rows[finite], x_rows[finite]
        diff = x_rows - X[rows]
        d2 = np.einsum("bd,bd->b", diff, diff)
        res = np.abs(g_rows)
        low = (res < best_res[rows]) | ((res == best_res[rows]) & (d2 < bestres_dist2[rows]))
        if np.any(low):
            tgt = rows[low]
            best_res[tgt] = res[low]
            bestres_dist2[tgt] = d2[low]
            bestres_x[tgt] = x_rows[low]

    # anchors on (or within threshold of) the boundary have margin 0 outright
    g_anchor = model.pair_value(X, I, J)
    iters += 1
    feasible_anchor = np.abs(g_anchor) <= cfg.validity_threshold
    if np.any(feasible_anchor):
        xhat[feasible_anchor] = X[feasible_anchor]
    consider(np.arange(B), g_anchor, X)
    nan_flag |= ~np.isfinite(g_anchor)
    g_prev = np.abs(np.where(np.isfinite(g_anchor), g_anchor, np.inf))

    active = ~nan_flag & ~feasible_anchor
    stall = np.zeros(B, dtype=np.int64)   # consecutive outers without progress
    alpha_warm = np.ones(B)               # carried-over backtracking start
    for _outer in range(cfg.outer_max_iters):
        rows_outer = np.nonzero(active)[0]
        if rows_outer.size == 0:
            break

        alpha_warm[rows_outer] = 1.0      # polish steps want full steps again
        inner_active = active.copy()
        L_last = np.full(B, np.inf)       # L is (lam, rho)-specific: reset per outer
        flat = np.zeros(B, dtype=np.int64)
        for _inner in range(cfg.inner_max_iters):
            rows = np.nonzero(inner_active)[0]
            if rows.size == 0:
                break
            g, w = model.pair_value_grad(xhat[rows], I[rows], J[rows])
            iters[rows] += 1
            consider(rows, g, xhat[rows])

            bad = ~(np.isfinite(g) & np.all(np.isfinite(w), axis=1))
            if np.any(bad):
                nan_flag[rows[bad]] = True
                inner_active[rows[bad]] = False
                active[rows[bad]] = False
                keep = ~bad
                rows, g, w = rows[keep], g[keep], w[keep]
                if rows.size == 0:
                    continue

            diff = X[rows] - xhat[rows]                    # anchor minus iterate
            G = g + np.einsum("bd,bd->b", w, diff)         # g linearized at anchor
            wn2 = np.einsum("bd,bd->b", w, w)
            lam_r, rho_r = lam[rows], rho[rows]
            c = np.where(wn2 > 0, (lam_r + rho_r * G) / (2.0 + rho_r * wn2), 0.0)
            Y = X[rows] - c[:, None] * w
            D = Y - xhat[rows]
            step_norm = np.sqrt(np.einsum("bd,bd->b", D, D))
            dist_now = np.sqrt(np.einsum("bd,bd->b", diff, diff))

            gradL = -2.0 * diff + (lam_r + rho_r * g)[:, None] * w
            dirderiv = np.einsum("bd,bd->b", gradL, D)
            L_cur = (np.einsum("bd,bd->b", diff, diff)
                     + lam_r * g + 0.5 * rho_r * g * g)
            # kink oscillation shows up as a flat L long before steps shrink
            no_gain = L_last[rows] - L_cur <= 1e-12 * (1.0 + np.abs(L_cur))
            flat[rows] = np.where(no_gain, flat[rows] + 1, 0)
            L_last[rows] = np.minimum(L_last[rows], L_cur)

            converged = step_norm <= cfg.convergence_tol * (1.0 + dist_now)
            stalled = (wn2 <= 0) | (dirderiv >= 0) | (flat[rows] >= 2)
            done_now = converged | stalled
            if np.any(done_now):
                inner_active[rows[done_now]] = False
            move = ~done_now
            if not np.any(move):
                continue
            mrows = rows[move]
            mD, mdir, mL = D[move], dirderiv[move], L_cur[move]
            m_sn, m_dist = step_norm[move], dist_now[move]

            alpha = alpha_warm[mrows].copy()
            accepted = np.zeros(len(mrows))
            pending = np.ones(len(mrows), dtype=bool)
            for _bt in range(cfg.max_backtracks + 1):
                p = np.nonzero(pending)[0]
                if p.size == 0:
                    break
                trial = xhat[mrows[p]] + alpha[p, None] * mD[p]
                gt = model.pair_value(trial, I[mrows[p]], J[mrows[p]])
                iters[mrows[p]] += 1
                consider(mrows[p], gt, trial)
                dt = trial - X[mrows[p]]
                Lt = (np.einsum("bd,bd->b", dt, dt)
                      + lam[mrows[p]] * gt + 0.5 * rho[mrows[p]] * gt * gt)
                ok = np.isfinite(Lt) & (Lt <= mL[p] + cfg.armijo_c1 * alpha[p] * mdir[p])
                if np.any(ok):
                    acc = p[ok]
                    xhat[mrows[acc]] = trial[ok]
                    accepted[acc] = alpha[acc]
                    pending[acc] = False
                alpha[pending] *= 0.5
            took = accepted > 0
            alpha_warm[mrows[took]] = np.minimum(1.0, accepted[took] * 4.0)
            # no acceptable step, or only a numerically negligible one: done
            tiny = accepted * m_sn <= cfg.convergence_tol * (1.0 + m_dist)
            if np.any(~took | tiny):
                inner_active[mrows[~took | tiny]] = False

        rows = np.nonzero(active)[0]
        g_end = model.pair_value(xhat[rows], I[rows], J[rows])
        iters[rows] += 1
        consider(rows, g_end, xhat[rows])
        bad = ~np.isfinite(g_end)
        if np.any(bad):
            nan_flag[rows[bad]] = True
            active[rows[bad]] = False
            rows, g_end = rows[~bad], g_end[~bad]
        if rows.size == 0:
            continue

        res_end = np.abs(g_end)
        lam[rows] += rho[rows] * g_end
        grow = res_end > cfg.sufficient_decrease * g_prev[rows]
        rho[rows[grow]] = np.minimum(rho[rows[grow]] * cfg.penalty_growth, cfg.penalty_max)
        no_progress = res_end > 0.9 * g_prev[rows]
        stall[rows] = np.where(no_progress, stall[rows] + 1, 0)
        g_prev[rows] = res_end
        # stagnation: settle quickly if already valid, persist a while if not
        gave_up = np.where(best_res[rows] <= cfg.validity_threshold,
                           stall[rows] >= 3, stall[rows] >= 10)
        finished = (res_end <= cfg.residual_target) | gave_up
        active[rows[finished]] = False

    # answer: the final (polished) iterate when valid, else the best fallback
    finite_final = np.all(np.isfinite(xhat), axis=1)
    g_fin = np.full(B, np.inf)
    if np.any(finite_final):
        g_fin[finite_final] = model.pair_value(
            xhat[finite_final], I[finite_final], J[finite_final])
        iters[finite_final] += 1
    res_fin = np.abs(g_fin)
    use_final = np.isfinite(g_fin) & (res_fin <= cfg.validity_threshold)
    out_x = np.where(use_final[:, None], xhat, bestres_x)
    diff = out_x - X
    out_d2 = np.einsum("bd,bd->b", diff, diff)
    out_res = np.where(use_final, res_fin, best_res)
    status = np.where(out_res <= cfg.validity_threshold, 0, 1).astype(np.int8)
    status[(status != 0) & nan_flag] = 2
    return _PairBlock(out_x, np.sqrt(out_d2), out_res, status, iters)


def solve_pair(problem: CmpProblem, cfg: SolverConfig,
               x0: np.ndarray | None = None) -> tuple[np.ndarray, float, float, str]:
    """Solve one CMP; returns (boundary point, distance, residual, status)."""
    block = _solve_pair_block(
        problem.model, np.asarray(problem.x, dtype=np.float64)[None, :],
        np.array([problem.i]), np.array([problem.j]), cfg,
        x0=None if x0 is None else np.asarray(x0, dtype=np.float64)[None, :])
    return block.xhat[0], float(block.dist[0]), float(block.residual[0]), block.status_str(0)


# ---------------------------------------------------------------------------
# Bisection oracle: certified upper bound on the margin along a segment
# ---------------------------------------------------------------------------

def _bisect_crossing_batch(model, X, X_other, cfg: SolverConfig):
    """First predicted-class change along each segment [x, x_other].

    Returns (distance to crossing, crossing point, class on the far side).
    The far endpoint must be predicted differently from x.
    """
    X = np.asarray(X, dtype=np.float64)
    X_other = np.asarray(X_other, dtype=np.float64)
    pred_x = model.predict_batch(X)
    seg = X_other - X
    seg_len = np.sqrt(np.einsum("bd,bd->b", seg, seg))
    lo = np.zeros(len(X))
    hi = np.ones(len(X))
    for _ in range(cfg.bisection_max_iters):
        todo = (hi - lo) * seg_len > cfg.bisection_precision
        if not np.any(todo):
            break
        mid = 0.5 * (lo + hi)
        pts = X[todo] + mid[todo, None] * seg[todo]
        same = model.predict_batch(pts) == pred_x[todo]
        rows = np.nonzero(todo)[0]
        lo[rows[same]] = mid[todo][same]
        hi[rows[~same]] = mid[todo][~same]
    crossing = X + hi[:, None] * seg
    far_class = model.predict_batch(crossing)
    return hi * seg_len, crossing, far_class


def bisection_upper_bound(model, x: np.ndarray, x_other: np.ndarray,
                          cfg: SolverConfig | None = None) -> float:
    """Distance from x to the first predicted-class change along [x, x_other].

    A certified upper bound on the margin of x (the segment's logit path is
    continuous, so a boundary crossing lies within the returned distance).
    """
    cfg = cfg or SolverConfig()
    x = np.asarray(x, dtype=np.float64)
    x_other = np.asarray(x_other, dtype=np.float64)
    if int(model.predict_batch(x[None, :])[0]) == int(model.predict_batch(x_other[None, :])[0]):
        raise ValueError("x_other must be predicted as a different class than x")
    dist, _, _ = _bisect_crossing_batch(model, x[None, :], x_other[None, :], cfg)
    return float(dist[0])


# ---------------------------------------------------------------------------
# Per-sample margin: all candidate classes, domination guard, restart policy
# ---------------------------------------------------------------------------

def _nearest_per_class(queries: np.ndarray, refs: np.ndarray,
                       ref_labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Nearest reference of each class per query (inner-product scan).

    Seeding only — close enough is fine, so no exact recomputation here.
    Classes with no reference get index -1.
    """
    Q = np.ascontiguousarray(queries, dtype=np.float64)
    out = np.full((len(Q), num_classes), -1, dtype=np.int64)
    for c in range(num_classes):
        idx = np.nonzero(ref_labels == c)[0]
        if idx.size == 0:
            continue
        Rc = np.ascontiguousarray(refs[idx], dtype=np.float64)
        r2 = np.einsum("rd,rd->r", Rc, Rc)
        for s in range(0, len(Q), 512):
            qb = Q[s:s + 512]
            d2 = r2[None, :] - 2.0 * (qb @ Rc.T)
            out[s:s + 512, c] = idx[np.argmin(d2, axis=1)]
    return out


def _pair_bisection_seeds(model, anchors: np.ndarray, I: np.ndarray, J: np.ndarray,
                          refs: np.ndarray, ref_labels: np.ndarray) -> np.ndarray:
    """Seed each CMP at the sign change of g = f_i - f_j along the segment
    to the query's nearest reference labeled j. Falls back to the anchor
    where no reference of class j exists or g does not change sign."""
    seeds = np.array(anchors, dtype=np.float64, copy=True)
    nn = _nearest_per_class(anchors, refs, ref_labels, model.num_classes)
    ref_idx = nn[np.arange(len(anchors)), J]
    rows = np.nonzero(ref_idx >= 0)[0]
    if rows.size == 0:
        return seeds
    A = seeds[rows]
    E = np.asarray(refs, dtype=np.float64)[ref_idx[rows]]
    g_a = model.pair_value(A, I[rows], J[rows])
    g_e = model.pair_value(E, I[rows], J[rows])
    cross = (g_a > 0) & (g_e < 0)
    rows, A, E = rows[cross], A[cross], E[cross]
    if rows.size == 0:
        return seeds
    Ic, Jc = I[rows], J[rows]
    lo = np.zeros(len(rows))
    hi = np.ones(len(rows))
    for _ in range(30):
        mid = 0.5 * (lo + hi)
        gm = model.pair_value(A + mid[:, None] * (E - A), Ic, Jc)
        pos = gm > 0
        lo[pos] = mid[pos]
        hi[~pos] = mid[~pos]
    t = 0.5 * (lo + hi)
    seeds[rows] = A + t[:, None] * (E - A)
    return seeds

def _dominating_class(model, result: MarginResult, cfg: SolverConfig) -> int | None:
    """Class strictly beating both i and j* at the boundary point, if any."""
    logits = model.forward(result.boundary_point)
    top = max(logits[result.i], logits[result.j_star])
    k = int(np.argmax(logits))
    if k not in (result.i, result.j_star) and logits[k] > top + cfg.validity_threshold:
        return k
    return None


def _pick_winner(result: MarginResult, cfg: SolverConfig,
                 xhat_by_j: dict[int, np.ndarray]) -> None:
    """Set the winning pair (min valid distance; ties to the lower class index)."""
    valid = [p for p in result.pairs if p.status == PAIR_VALID]
    if not valid:
        result.status = SAMPLE_FAILED
        result.j_star = None
        result.margin = None
        result.residual = None
        result.boundary_point = None
        return
    win = min(valid, key=lambda p: (p.distance, p.j))
    result.status = SAMPLE_VALID
    result.j_star = win.j
    result.margin = win.distance
    result.residual = win.residual
    result.boundary_point = xhat_by_j[win.j]


def solve_margins(model, anchors: np.ndarray, sample_ids: np.ndarray,
                  cfg: SolverConfig,
                  corruption: np.ndarray | None = None,
                  restart_refs: tuple[np.ndarray, np.ndarray] | None = None,
                  ) -> list[MarginResult]:
    """Margins for a batch of anchors: one CMP per candidate class each.

    The margin is the smallest valid per-pair distance. A third class
    dominating the winning boundary point triggers a re-solve of that pair
    seeded from the offending point. With restart_policy="bisection_seed"
    and restart_refs=(features, labels) given, any sample whose margin
    exceeds its bisection upper bound (or that has no valid pair) is
    re-solved seeded from the bisection crossing toward its nearest
    different-label reference.
    """
    X = np.ascontiguousarray(anchors, dtype=np.float64)
    S = len(X)
    C = model.num_classes
    flags = corruption if corruption is not None else np.zeros(S, dtype=np.uint8)

    pred = model.predict_batch(X)
    results = [MarginResult(sample_id=int(sample_ids[s]), i=int(pred[s]),
                            status=SAMPLE_FAILED, corruption=int(flags[s]))
               for s in range(S)]
    xhat_by: list[dict[int, np.ndarray]] = [{} for _ in range(S)]

    # initial block: every candidate class for every sample
    rows_s = np.repeat(np.arange(S), C - 1)
    J = np.concatenate([[j for j in range(C) if j != pred[s]] for s in range(S)]) \
        if S else np.zeros(0, dtype=np.int64)
    J = J.astype(np.int64)
    I = pred[rows_s]
    x0 = None
    if cfg.seed_policy == SEED_PAIR_BISECTION and restart_refs is not None and S:
        x0 = _pair_bisection_seeds(model, X[rows_s], I, J,
                                   restart_refs[0], restart_refs[1])
    block = _solve_pair_block(model, X[rows_s], I, J, cfg, x0=x0)
    for k in range(len(rows_s)):
        s = rows_s[k]
        diag = PairDiag(j=int(J[k]), distance=float(block.dist[k]),
                        residual=float(block.residual[k]),
                        status=block.status_str(k), iterations=int(block.iterations[k]))
        results[s].pairs.append(diag)
        xhat_by[s][diag.j] = block.xhat[k]
    for s in range(S):
        _pick_winner(results[s], cfg, xhat_by[s])

    def resolve_rows(rows, classes, seeds, mark_restart):
        """Re-solve pair (i, k) for the given samples, merging the outcome."""
        blk = _solve_pair_block(model, X[rows], pred[rows], classes, cfg, x0=seeds)
        for t, s in enumerate(rows):
            k = int(classes[t])
            new = PairDiag(j=k, distance=float(blk.dist[t]),
                           residual=float(blk.residual[t]), status=blk.status_str(t),
                           iterations=int(blk.iterations[t]), restarted=mark_restart)
            old = next((p for p in results[s].pairs if p.j == k), None)
            if old is None:
                results[s].pairs.append(new)
                xhat_by[s][k] = blk.xhat[t]
            else:
                old.iterations += new.iterations
                better = (new.status == PAIR_VALID
                          and (old.status != PAIR_VALID or new.distance < old.distance))
                if better:
                    old.distance, old.residual, old.status = \
                        new.distance, new.residual, new.status
                    old.restarted = old.restarted or mark_restart
                    xhat_by[s][k] = blk.xhat[t]
            _pick_winner(results[s], cfg, xhat_by[s])

    def domination_rounds():
        for _ in range(C):
            rows, classes, seeds = [], [], []
            for s in range(S):
                r = results[s]
                if r.status != SAMPLE_VALID:
                    continue
                k = _dominating_class(model, r, cfg)
                if k is not None:
                    rows.append(s)
                    classes.append(k)
                    seeds.append(r.boundary_point)
                    r.redirects += 1
                    log.debug("sample %d: class %d dominates pair (%d, %d); re-solving",
                              r.sample_id, k, r.i, r.j_star)
            if not rows:
                return
            resolve_rows(np.array(rows), np.array(classes, dtype=np.int64),
                         np.array(seeds), mark_restart=False)

    domination_rounds()

    if cfg.restart_policy == RESTART_BISECTION and restart_refs is not None and S:
        from .geometry import nearest_other_label

        ref_X, ref_labels = restart_refs

        # pair-level rescue: failed CMPs restart from their own sign crossing
        fs, fj = [], []
        for s in range(S):
            for p in results[s].pairs:
                if p.status != PAIR_VALID:
                    fs.append(s)
                    fj.append(p.j)
        if fs:
            fs = np.array(fs)
            fj = np.array(fj, dtype=np.int64)
            seeds = _pair_bisection_seeds(model, X[fs], pred[fs], fj,
                                          ref_X, ref_labels)
            moved = np.einsum("bd,bd->b", seeds - X[fs], seeds - X[fs]) > 0
            if np.any(moved):
                for s in set(fs[moved].tolist()):
                    results[s].restarted = True
                resolve_rows(fs[moved], fj[moved], seeds[moved], mark_restart=True)
                domination_rounds()
        nn_dist, nn_idx = nearest_other_label(X, pred, ref_X, ref_labels)
        reachable = np.isfinite(nn_dist)
        bounds = np.full(S, np.inf)
        crossings = np.zeros_like(X)
        far = np.zeros(S, dtype=np.int64)
        if np.any(reachable):
            rr = np.nonzero(reachable)[0]
            bounds[rr], crossings[rr], far[rr] = _bisect_crossing_batch(
                model, X[rr], ref_X[nn_idx[rr]], cfg)
        rows, classes, seeds = [], [], []
        for s in range(S):
            r = results[s]
            if not reachable[s] or int(far[s]) == r.i:
                continue
            if r.status != SAMPLE_VALID or r.margin > bounds[s]:
                rows.append(s)
                classes.append(int(far[s]))
                seeds.append(crossings[s])
                r.restarted = True
        if rows:
            rows_a = np.array(rows)
            classes_a = np.array(classes, dtype=np.int64)
            seeds_a = np.array(seeds)
            resolve_rows(rows_a, classes_a, seeds_a, mark_restart=True)
            # the crossing itself is a boundary point up to bisection
            # precision; keep it when the re-solve lands farther out
            g_cross = model.pair_value(seeds_a, pred[rows_a], classes_a)
            for t, s in enumerate(rows_a):
                res = results[s]
                if abs(g_cross[t]) > cfg.validity_threshold:
                    continue
                k = int(classes_a[t])
                diag = next(p for p in res.pairs if p.j == k)
                if diag.status != PAIR_VALID or bounds[s] < diag.distance:
                    diag.distance = float(bounds[s])
                    diag.residual = float(abs(g_cross[t]))
                    diag.status = PAIR_VALID
                    diag.restarted = True
                    xhat_by[s][k] = seeds_a[t]
                    _pick_winner(res, cfg, xhat_by[s])
            domination_rounds()

    for r in results:
        r.pairs.sort(key=lambda p: p.j)
    return results


def solve_margin(model, x: np.ndarray, cfg: SolverConfig,
                 sample_id: int = 0, corruption: int = 0,
                 restart_refs=None) -> MarginResult:
    """Margin of a single (correctly classified) anchor; see solve_margins."""
    return solve_margins(model, np.asarray(x, dtype=np.float64)[None, :],
                         np.array([sample_id]), cfg,
                         corruption=np.array([corruption], dtype=np.uint8),
                         restart_refs=restart_refs)[0]
