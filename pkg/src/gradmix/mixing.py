"""Layer-wise weighting and mixing of source gradients.

For every trunk layer the nonnegative source weights maximise the cosine
between the weighted sum of source gradients and the validation gradient.
The objective is scale-free, so each layer's problem lives on the unit
simplex.  Two solvers are provided and both are checked against an
exhaustive simplex grid (``oracle_layer_weights``):

* ``"nnls"`` (default): the best direction inside the cone spanned by the
  sources is the projection of the validation gradient onto that cone, which
  is a nonnegative least-squares problem.  It is solved exactly by trying
  every support set on the Gram matrix (k is small).  When the projection is
  zero every source points away from V and the best single source is optimal.
* ``"pga"``: projected gradient ascent on the simplex with backtracking and
  random restarts.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor_net import GradientSet, MomentumState, NetworkParams, sgd_momentum_step

EPS_NORM = 1e-12

# eta is kept strictly inside (0, 1) even when float64 saturates the sigmoid
_ETA_HI = np.nextafter(1.0, 0.0)
_ETA_LO = np.finfo(np.float64).tiny


@dataclass
class MixWeights:
    raw: np.ndarray  # (n_layers, k), nonnegative
    normalized: np.ndarray  # rows sum to one

    @property
    def n_layers(self) -> int:
        return self.raw.shape[0]

    @property
    def n_sources(self) -> int:
        return self.raw.shape[1]


@dataclass(frozen=True)
class AdaptiveLrParams:
    beta: float = 10.0
    gamma: float = 0.6
    alpha: float = 0.05

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")


@dataclass
class MixDiagnostics:
    rho: float
    eta: float
    per_layer_cossim: list[float]
    solver_iterations: int
    objective_value: float
    weights: np.ndarray | None = None
    degenerate: bool = False
    degenerate_layers: list[int] = field(default_factory=list)

    def to_record(self) -> dict:
        return {
            "rho": self.rho,
            "eta": self.eta,
            "per_layer_cossim": list(self.per_layer_cossim),
            "solver_iterations": self.solver_iterations,
            "objective": self.objective_value,
            "weights": None if self.weights is None else self.weights.tolist(),
            "degenerate": self.degenerate,
        }


def cossim(a, b) -> float:
    """Cosine similarity; 0 when either vector has (near) zero norm."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < EPS_NORM or nb < EPS_NORM:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def normalize(row) -> np.ndarray:
    row = np.asarray(row, dtype=np.float64)
    if np.any(row < 0):
        raise ValueError("mixing weights must be nonnegative")
    total = row.sum()
    if total < EPS_NORM:
        return np.full(row.shape, 1.0 / row.size)
    return row / total


def _check_aligned(grads: Sequence[GradientSet], n_layers=None):
    n_layers = len(grads[0].trunk_grads) if n_layers is None else n_layers
    for g in grads:
        if len(g.trunk_grads) != n_layers:
            raise ValueError("gradient sets have different trunk depths")
        for a, b in zip(g.trunk_grads, grads[0].trunk_grads):
            if a.shape != b.shape:
                raise ValueError("gradient sets are not shape-aligned")
    return n_layers


def combine(grads: Sequence[GradientSet], weights: MixWeights,
            head_assignment: dict[str, list[int]] | None = None) -> GradientSet:
    """Trunk layer l becomes ``sum_i w~[l, i] * grads[i].trunk[l]``.

    Head gradients are averaged over the sources that touched each head, or
    over the sources listed in ``head_assignment[head]`` when given.
    """
    k = len(grads)
    if k == 0:
        raise ValueError("no gradients to combine")
    n_layers = _check_aligned(grads)
    if weights.normalized.shape != (n_layers, k):
        raise ValueError(f"weights shape {weights.normalized.shape} != ({n_layers}, {k})")
    trunk = []
    for l in range(n_layers):
        acc = np.zeros_like(grads[0].trunk_grads[l])
        for i in range(k):
            acc += weights.normalized[l, i] * grads[i].trunk_grads[l]
        trunk.append(acc)
    heads = combine_heads(grads, head_assignment)
    return GradientSet(trunk, heads, sum(g.batch_size for g in grads))


def combine_heads(grads: Sequence[GradientSet], head_assignment=None) -> dict[str, np.ndarray]:
    if head_assignment is None:
        head_assignment = {}
        for i, g in enumerate(grads):
            for h in g.head_grads:
                head_assignment.setdefault(h, []).append(i)
    heads = {}
    for h, members in head_assignment.items():
        if not members:
            continue
        if len(members) == 1:
            heads[h] = grads[members[0]].head_grads[h]
            continue
        acc = np.zeros_like(grads[members[0]].head_grads[h])
        for i in members:
            acc += grads[i].head_grads[h]
        heads[h] = acc / len(members)
    return heads


# ----------------------------------------------------------------------------
# per-layer problem


class _LayerProblem:
    """max_{u on simplex} b.u / sqrt(u.A.u) with unit-norm source columns.

    ``A`` is the Gram matrix of the normalised source gradients and ``b`` the
    cosines of each source with the validation gradient, so the objective
    value is exactly the cosine of the combined gradient.  Sources with zero
    gradient are dropped (their weight is 0).
    """

    def __init__(self, source_vecs: Sequence[np.ndarray], val_vec: np.ndarray):
        self.k = len(source_vecs)
        G = np.stack([np.asarray(v, dtype=np.float64).ravel() for v in source_vecs], axis=1)
        v = np.asarray(val_vec, dtype=np.float64).ravel()
        self.norms = np.linalg.norm(G, axis=0)
        self.vnorm = np.linalg.norm(v)
        self.active = np.flatnonzero(self.norms >= EPS_NORM)
        self.degenerate = self.vnorm < EPS_NORM or self.active.size == 0
        if self.degenerate:
            return
        self.Gn = G[:, self.active] / self.norms[self.active]
        self.vn = v / self.vnorm
        self.A = self.Gn.T @ self.Gn
        self.b = self.Gn.T @ self.vn

    def value(self, u):
        q = u @ self.A @ u
        if q < EPS_NORM**2:
            return 0.0
        return float(self.b @ u / math.sqrt(q))

    def grad(self, u):
        Au = self.A @ u
        q = u @ Au
        if q < EPS_NORM**2:
            return self.b.copy()
        s = math.sqrt(q)
        return self.b / s - (self.b @ u) * Au / (s * q)

    def to_raw(self, u_active):
        """Weights on the original (unnormalised) source gradients."""
        w = np.zeros(self.k)
        w[self.active] = u_active / self.norms[self.active]
        return w


def project_simplex(y) -> np.ndarray:
    """Euclidean projection onto {u >= 0, sum(u) = 1}."""
    y = np.asarray(y, dtype=np.float64)
    srt = np.sort(y)[::-1]
    css = np.cumsum(srt) - 1.0
    ind = np.arange(1, y.size + 1)
    rho = np.nonzero(srt - css / ind > 0)[0][-1]
    tau = css[rho] / (rho + 1)
    return np.maximum(y - tau, 0.0)


def _ascend(prob: _LayerProblem, u0, max_iter, tol):
    u = project_simplex(u0)
    f = prob.value(u)
    step = 1.0
    it = 0
    for it in range(1, max_iter + 1):
        g = prob.grad(u)
        improved = False
        t = step
        while t > 1e-12:
            cand = project_simplex(u + t * g)
            fc = prob.value(cand)
            if fc > f + 1e-15:
                improved = True
                break
            t *= 0.5
        if not improved:
            break
        gain = fc - f
        u, f = cand, fc
        step = min(2.0 * t, 1e3)
        if gain < tol:
            break
    return u, f, it


@dataclass(frozen=True)
class SolverConfig:
    max_iter: int = 200
    restarts: int = 3
    tol: float = 1e-9
    seed: int = 0
    mode: str = "layerwise"  # or "global": one weight row shared by all layers
    method: str = "nnls"  # or "pga"


NNLS_MAX_SOURCES = 12  # 2^k supports; beyond this the pga solver is used


def _solve_nnls(prob: _LayerProblem):
    # the projection lies in the relative interior of one face of the cone, so
    # some support has an all-positive unconstrained solution; keep the best
    m = prob.active.size
    i = int(np.argmax(prob.b))
    best_u, best_f = np.eye(m)[i], float(prob.b[i])
    for r in range(2, m + 1):
        for S in itertools.combinations(range(m), r):
            S = list(S)
            A = prob.A[np.ix_(S, S)]
            if np.linalg.cond(A) > 1e12:
                continue
            x = np.linalg.solve(A, prob.b[S])
            if np.all(x > 0):
                u = np.zeros(m)
                u[S] = x / x.sum()
                f = prob.value(u)
                if f > best_f + 1e-15:
                    best_u, best_f = u, f
    return best_u, best_f, 1


def _solve_one(prob: _LayerProblem, cfg: SolverConfig, rng):
    if cfg.method == "nnls" and prob.active.size <= NNLS_MAX_SOURCES:
        return _solve_nnls(prob)
    if cfg.method not in ("nnls", "pga"):
        raise ValueError(f"unknown solver method {cfg.method!r}")
    m = prob.active.size
    starts = [np.full(m, 1.0 / m)]
    starts += [rng.dirichlet(np.ones(m)) for _ in range(cfg.restarts)]
    best_u, best_f, total = None, -np.inf, 0
    for u0 in starts:
        u, f, it = _ascend(prob, u0, cfg.max_iter, cfg.tol)
        total += it
        if f > best_f + 1e-15:
            best_u, best_f = u, f
    # single-source vertices cost nothing to score and guard the negative regime
    i = int(np.argmax(prob.b))
    if prob.b[i] > best_f + 1e-15:
        best_u, best_f = np.eye(m)[i], float(prob.b[i])
    return best_u, best_f, total


def _layer_vectors(source_grads, val_grad, mode):
    if mode == "layerwise":
        return [([g.trunk_grads[l] for g in source_grads], val_grad.trunk_grads[l])
                for l in range(len(val_grad.trunk_grads))]
    if mode == "global":
        flat = [np.concatenate([t.ravel() for t in g.trunk_grads]) for g in source_grads]
        vflat = np.concatenate([t.ravel() for t in val_grad.trunk_grads])
        return [(flat, vflat)]
    raise ValueError(f"unknown solver mode {mode!r}")


def layer_objectives(source_grads: Sequence[GradientSet], val_grad: GradientSet,
                     normalized: np.ndarray) -> list[float]:
    """Cosine between the mixed gradient and the validation gradient, per layer."""
    out = []
    for l, vg in enumerate(val_grad.trunk_grads):
        mixed = np.zeros_like(vg)
        for i, g in enumerate(source_grads):
            mixed += normalized[l, i] * g.trunk_grads[l]
        out.append(cossim(mixed, vg))
    return out


def solve_layer_weights(source_grads: Sequence[GradientSet], val_grad: GradientSet,
                        config: SolverConfig | None = None):
    """Nonnegative per-layer source weights maximising the summed layer cosines.

    Returns ``(MixWeights, MixDiagnostics)``; the diagnostics' ``eta`` is left
    as NaN for the caller to fill in.
    """
    cfg = config or SolverConfig()
    k = len(source_grads)
    if k < 1:
        raise ValueError("need at least one source")
    n_layers = _check_aligned(list(source_grads) + [val_grad])
    rng = np.random.default_rng(cfg.seed)
    rows, iters, degenerate_layers = [], 0, []
    for j, (vecs, vvec) in enumerate(_layer_vectors(source_grads, val_grad, cfg.mode)):
        prob = _LayerProblem(vecs, vvec)
        if prob.degenerate:
            rows.append(np.full(k, 1.0 / k))
            degenerate_layers.append(j)
            continue
        u, _, it = _solve_one(prob, cfg, rng)
        iters += it
        rows.append(prob.to_raw(u))
    raw = np.array(rows)
    if cfg.mode == "global":
        raw = np.repeat(raw, n_layers, axis=0)
        if degenerate_layers:
            degenerate_layers = list(range(n_layers))
    normalized = np.array([normalize(r) for r in raw])
    per_layer = layer_objectives(source_grads, val_grad, normalized)
    rho = importance_score(per_layer)
    diag = MixDiagnostics(
        rho=rho, eta=float("nan"), per_layer_cossim=per_layer, solver_iterations=iters,
        objective_value=rho, weights=normalized,
        degenerate=bool(degenerate_layers), degenerate_layers=degenerate_layers,
    )
    return MixWeights(raw, normalized), diag


def simplex_grid(k: int, step: float) -> np.ndarray:
    """All points of the simplex grid with spacing ``step``, in lexicographic order."""
    n = round(1.0 / step)
    if n < 1 or abs(n * step - 1.0) > 1e-9:
        raise ValueError("grid step must divide 1")
    pts = [c + (n - sum(c),) for c in itertools.product(range(n + 1), repeat=k - 1) if sum(c) <= n]
    return np.array(pts, dtype=np.float64) / n


def oracle_layer_weights(source_grads: Sequence[GradientSet], val_grad: GradientSet,
                         grid_step: float = 0.01) -> MixWeights:
    """Exhaustive simplex grid search, independently per layer.

    Cosine is scale-invariant, so the simplex covers every direction of the
    nonnegative orthant.  Ties go to the lexicographically smallest point.
    """
    k = len(source_grads)
    if k > 4:
        raise ValueError("oracle grid is limited to k <= 4 sources")
    n_layers = _check_aligned(list(source_grads) + [val_grad])
    grid = simplex_grid(k, grid_step)
    rows = []
    for l in range(n_layers):
        vecs = [np.asarray(g.trunk_grads[l], dtype=np.float64).ravel() for g in source_grads]
        v = np.asarray(val_grad.trunk_grads[l], dtype=np.float64).ravel()
        if np.linalg.norm(v) < EPS_NORM:
            rows.append(np.full(k, 1.0 / k))
            continue
        # direct cosines of the raw combination, no normalisation tricks
        G = np.stack(vecs, axis=1)
        mixed = grid @ G.T
        norms = np.linalg.norm(mixed, axis=1)
        vals = np.zeros(len(grid))
        ok = norms >= EPS_NORM
        vals[ok] = mixed[ok] @ v / (norms[ok] * np.linalg.norm(v))
        rows.append(grid[int(np.argmax(vals))])
    raw = np.array(rows)
    return MixWeights(raw, np.array([normalize(r) for r in raw]))


def objective(source_grads, val_grad, weights: MixWeights) -> float:
    """Summed per-layer cosine of the mixed gradient (the quantity being maximised)."""
    return float(sum(layer_objectives(source_grads, val_grad, weights.normalized)))


def importance_score(per_layer_cossim: Sequence[float]) -> float:
    return float(sum(per_layer_cossim))


def lr_scale(rho: float, params: AdaptiveLrParams) -> float:
    """Sigmoid learning-rate scale in the open interval (0, 1)."""
    x = params.beta * rho - params.gamma
    if x >= 0:
        eta = 1.0 / (1.0 + math.exp(-x))
    else:
        e = math.exp(x)
        eta = e / (1.0 + e)
    return float(min(max(eta, _ETA_LO), _ETA_HI))


def gradmix_step(params: NetworkParams, source_grads: Sequence[GradientSet], val_grad: GradientSet,
                 lrp: AdaptiveLrParams, momentum_state: MomentumState, momentum: float = 0.9,
                 fixed_eta: float | None = None, solver: SolverConfig | None = None,
                 head_assignment: dict[str, list[int]] | None = None):
    """One mixed update: solve weights, score the batch, scale the step, apply it.

    The batch's mixed gradient is multiplied by ``eta`` before entering the
    momentum buffer, then the buffer is applied with rate ``alpha``; with zero
    momentum this is exactly ``theta -= eta * alpha * mixed``.  Returns
    ``(params, MixDiagnostics)``; params are updated in place.
    """
    weights, diag = solve_layer_weights(source_grads, val_grad, solver)
    eta = lr_scale(diag.rho, lrp) if fixed_eta is None else float(fixed_eta)
    diag.eta = eta
    mixed = combine(source_grads, weights, head_assignment)
    if eta != 1.0:
        mixed = mixed.scaled(eta)
    sgd_momentum_step(params, mixed, lrp.alpha, momentum, momentum_state)
    return params, diag
