"""Finite differences for the semilinear equation

    d_u v + 1/2 Tr(a D^2 v) + b0 . Dv + f(u, x, sigma^T Dv) = 0,  v(t, .) = h,

solved backward in time. The generator ``f`` is consumed only through an
evaluator ``f(t, X, Z) -> (values, argmax)`` from the conjugate module.

First derivatives are one-sided, chosen per axis by the sign of the drift
``sigma lam* + b0`` at the conjugate's argmax; second derivatives use the
standard 3-point stencil and, for a correlated pair of axes, the 7-point
stencil whose diagonal neighbours match the sign of the cross term. Every
step audits the linearized stencil weights and refuses to continue when one
goes negative.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import CflViolation, GridMismatch, NonFinite, NonmonotoneWeights, UnsupportedVariant
from .model import DiffusionSpec, GridSpec, eval_a

SCHEMES = ("explicit-upwind", "semi-implicit", "equivalence")
WEIGHT_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class PdeField:
    grid: GridSpec
    values: np.ndarray  # (nt + 1, N)
    argmax: np.ndarray  # (nt, N, d)
    scheme: str
    substeps: int
    min_weight: float
    residual_stats: dict | None = None

    def at(self, s, x):
        return self.grid.interpolate(self.values[self.grid.time_index(s)], np.atleast_2d(x))


# ---------------------------------------------------------------------------
# neighbour values as linear combinations of node values
# ---------------------------------------------------------------------------

class _Neighbours:
    """Values at offsets ``o in {-1,0,1}^n`` from each node, with ghost
    values from the boundary rule (``clamp``: copy the edge node; ``linear``:
    extrapolate from the edge cell)."""

    def __init__(self, grid: GridSpec, boundary):
        if boundary not in ("clamp", "linear"):
            raise UnsupportedVariant(f"unknown boundary mode {boundary!r}")
        self.grid = grid
        nx = np.array(grid.nx)
        multi = np.stack(np.unravel_index(np.arange(grid.n_nodes), grid.nx), axis=-1)
        strides = np.array([int(np.prod(nx[k + 1:])) for k in range(grid.dim)])
        self.terms = {}
        for o in itertools.product((-1, 0, 1), repeat=grid.dim):
            # per axis: list of (position, coefficient) alternatives
            per_axis = []
            for k, ok in enumerate(o):
                p = multi[:, k] + ok
                if boundary == "clamp":
                    per_axis.append([(np.clip(p, 0, nx[k] - 1), np.ones(len(p)))])
                else:
                    low, high = p < 0, p > nx[k] - 1
                    edge = np.clip(p, 0, nx[k] - 1)
                    inner = np.where(low, 1, np.where(high, nx[k] - 2, p))
                    out = low | high
                    per_axis.append([(edge, np.where(out, 2.0, 1.0)),
                                     (inner, np.where(out, -1.0, 0.0))])
            idx, coef = [], []
            for combo in itertools.product(*per_axis):
                pos = np.stack([c[0] for c in combo], axis=-1)
                idx.append((pos * strides).sum(axis=-1))
                coef.append(np.prod(np.stack([c[1] for c in combo], axis=-1), axis=-1))
            self.terms[o] = (np.stack(idx, axis=-1), np.stack(coef, axis=-1))

    def value(self, v, o):
        idx, coef = self.terms[tuple(o)]
        return np.sum(coef * v[idx], axis=-1)

    def matrix(self, coeffs):
        """Sparse matrix of ``v -> sum_o coeffs[o] * V_o``."""
        N = self.grid.n_nodes
        rows, cols, vals = [], [], []
        for o, c in coeffs.items():
            idx, coef = self.terms[o]
            for j in range(idx.shape[1]):
                rows.append(np.arange(N))
                cols.append(idx[:, j])
                vals.append(c * coef[:, j])
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(N, N))


def _unit(n, k, s=1):
    o = [0] * n
    o[k] = s
    return tuple(o)


def diffusion_coefficients(grid: GridSpec, a):
    """Stencil coefficients ``{offset: (N,)}`` of ``1/2 Tr(a D^2 v)``."""
    n = grid.dim
    h = grid.spacing
    zero = (0,) * n
    c = {zero: np.zeros(a.shape[0])}
    for k in range(n):
        side = a[:, k, k] / (2 * h[k] ** 2)
        for l in range(n):
            if l != k:
                side = side - np.abs(a[:, k, l]) / (2 * h[k] * h[l])
        c[_unit(n, k, 1)] = c.get(_unit(n, k, 1), 0) + side
        c[_unit(n, k, -1)] = c.get(_unit(n, k, -1), 0) + side
        c[zero] = c[zero] - a[:, k, k] / h[k] ** 2
    for k in range(n):
        for l in range(k + 1, n):
            akl = a[:, k, l]
            w = np.abs(akl) / (2 * h[k] * h[l])
            c[zero] = c[zero] + 2 * w
            for sk, sl in ((1, 1), (-1, -1), (1, -1), (-1, 1)):
                o = [0] * n
                o[k], o[l] = sk, sl
                same = sk == sl
                c[tuple(o)] = c.get(tuple(o), 0) + np.where((akl > 0) == same, w, 0.0) * (akl != 0)
    return c


# ---------------------------------------------------------------------------
# generator terms
# ---------------------------------------------------------------------------

def _gradients(nb: _Neighbours, v):
    grid = nb.grid
    n = grid.dim
    V0 = v
    fwd = np.stack([(nb.value(v, _unit(n, k, 1)) - V0) / grid.spacing[k] for k in range(n)], -1)
    bwd = np.stack([(V0 - nb.value(v, _unit(n, k, -1))) / grid.spacing[k] for k in range(n)], -1)
    return fwd, bwd


def _drift_terms(f, t, X, sig, b0, fwd, bwd):
    """Upwinded gradient, f value, argmax and total drift per node."""
    cen = 0.5 * (fwd + bwd)
    _, lam_c = f(t, X, np.einsum("nji,nj->ni", sig, cen))
    b = np.einsum("nij,nj->ni", sig, lam_c) + b0
    side = np.sign(b)  # +1 forward, -1 backward, 0 centred
    D = np.where(side > 0, fwd, np.where(side < 0, bwd, cen))
    val, lam = f(t, X, np.einsum("nji,nj->ni", sig, D))
    b_fin = np.einsum("nij,nj->ni", sig, lam) + b0
    return D, val + np.einsum("ni,ni->n", b0, D), lam, b_fin, side


def _drift_weights(grid: GridSpec, b, side):
    """Linearized drift weights: (centre, {offset: weight})."""
    n = grid.dim
    h = grid.spacing
    centre = np.zeros(b.shape[0])
    nbr = {}
    for k in range(n):
        bk, sk = b[:, k], side[:, k]
        plus = np.where(sk > 0, bk / h[k], np.where(sk == 0, bk / (2 * h[k]), 0.0))
        minus = np.where(sk < 0, -bk / h[k], np.where(sk == 0, -bk / (2 * h[k]), 0.0))
        centre -= plus + minus
        nbr[_unit(n, k, 1)] = plus
        nbr[_unit(n, k, -1)] = minus
    return centre, nbr


def _audit(weights, context):
    worst = min(float(np.min(w)) for w in weights.values())
    if worst < -WEIGHT_TOL:
        raise NonmonotoneWeights(f"stencil weight {worst:.3e} < 0 ({context})")
    return worst


def _rate_bound(grid, f, t, X, sig, b0, a, implicit, lam_hint=None):
    """Largest stable substep from the diffusion and drift bounds."""
    R = np.asarray(f.drift_bound(t, X), dtype=float)
    if not np.all(np.isfinite(R)):
        if lam_hint is None:
            R = np.ones(X.shape[0])
        else:
            R = 2.0 * np.linalg.norm(lam_hint, axis=-1) + 1.0
    sig_norm = np.linalg.norm(sig, ord=2, axis=(-2, -1))
    bmax = sig_norm * R + np.linalg.norm(b0, axis=-1)
    rate = bmax * np.sum(1.0 / grid.spacing)
    if not implicit:
        diag = sum(a[:, k, k] / grid.spacing[k] ** 2 for k in range(grid.dim))
        cross = sum(np.abs(a[:, k, l]) / (grid.spacing[k] * grid.spacing[l])
                    for k in range(grid.dim) for l in range(k + 1, grid.dim))
        rate = rate + diag - cross
    mx = float(np.max(rate))
    return math.inf if mx <= 0 else 1.0 / mx


def cfl_substeps(diff: DiffusionSpec, f, grid: GridSpec, scheme="explicit-upwind"):
    """Substeps per grid step needed for nonnegative weights at ``t0``."""
    X = grid.nodes
    t = grid.t0
    tau = _rate_bound(grid, f, t, X, diff.eval_sigma(t, X), diff.eval_drift(t, X),
                      eval_a(diff, t, X), scheme == "semi-implicit")
    return max(1, math.ceil(grid.dt / tau * (1 - 1e-12)))


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------

def solve_semilinear(diff: DiffusionSpec, f, h, grid: GridSpec, scheme="explicit-upwind",
                     substeps=None, boundary="clamp", problem=None) -> PdeField:
    """Backward time stepping from ``v(t1) = h``.

    ``h`` is a payoff callable on states or an array of node values.
    ``scheme="equivalence"`` evaluates the generator on the control lattice
    and transition weights of ``problem`` (a procedure ``ControlProblem``),
    written as an explicit PDE update.
    """
    if scheme not in SCHEMES:
        raise UnsupportedVariant(f"unknown scheme {scheme!r}")
    if grid.dim > 2 and scheme != "equivalence":
        raise UnsupportedVariant("the finite-difference route supports n <= 2")
    X = grid.nodes
    hv = np.asarray(h(X) if callable(h) else h, dtype=float)
    values = np.empty((grid.nt + 1, grid.n_nodes))
    values[-1] = hv
    if scheme == "equivalence":
        return _solve_equivalence(problem, grid, values)

    implicit = scheme == "semi-implicit"
    nb = _Neighbours(grid, boundary)
    d = diff.dim
    argmax = np.zeros((grid.nt, grid.n_nodes, d))
    min_weight = math.inf
    m_used = 0
    homogeneous = problem is None or getattr(problem, "time_homogeneous", True)
    cached = {}
    for k in range(grid.nt - 1, -1, -1):
        t_hi = float(grid.times[k + 1])
        dt = t_hi - float(grid.times[k])
        key = None if homogeneous else k
        if key not in cached:
            sig = diff.eval_sigma(t_hi, X)
            b0 = diff.eval_drift(t_hi, X)
            a = eval_a(diff, t_hi, X)
            coeffs = diffusion_coefficients(grid, a)
            cached[key] = (sig, b0, a, coeffs, None)
        sig, b0, a, coeffs, lu = cached[key]
        tau_max = _rate_bound(grid, f, t_hi, X, sig, b0, a, implicit,
                              argmax[k + 1] if k + 1 < grid.nt else None)
        need = max(1, math.ceil(dt / tau_max * (1 - 1e-12)))
        if substeps is None:
            m = need
        else:
            m = int(substeps)
            if m < need:
                raise CflViolation(f"{m} substeps per step violate the stability bound "
                                   f"(need {need}, dt/m = {dt / m:.3e} > {tau_max:.3e})")
        m_used = max(m_used, m)
        tau = dt / m
        if implicit:
            mats = cached.setdefault(("lu", key, m), None)
            if mats is None:
                A = nb.matrix(coeffs)
                mats = spla.splu((sp.identity(grid.n_nodes, format="csc") - tau * A).tocsc())
                cached[("lu", key, m)] = mats
        v = values[k + 1].copy()
        for j in range(m):
            t = t_hi - j * tau
            fwd, bwd = _gradients(nb, v)
            D, fval, lam, b, side = _drift_terms(f, t, X, sig, b0, fwd, bwd)
            dcentre, dnbr = _drift_weights(grid, b, side)
            zero = (0,) * grid.dim
            weights = {o: tau * w for o, w in dnbr.items()}
            weights[zero] = 1.0 + tau * dcentre
            if not implicit:
                for o, c in coeffs.items():
                    weights[o] = weights.get(o, 0.0) + tau * c
            min_weight = min(min_weight, _audit(weights, f"time {t:.6g}"))
            if implicit:
                v = mats.solve(v + tau * fval)
            else:
                diffusion = sum(c * nb.value(v, o) for o, c in coeffs.items())
                v = v + tau * (diffusion + fval)
            if not np.all(np.isfinite(v)):
                raise NonFinite(f"non-finite PDE values at time {t:.6g}")
        argmax[k] = lam
        values[k] = v
    return PdeField(grid, values, argmax, scheme, m_used, float(min_weight))


def _solve_equivalence(problem, grid, values):
    from .procedure import step_operator

    if problem is None:
        raise UnsupportedVariant("equivalence mode needs the procedure problem")
    rows = np.arange(grid.n_nodes)
    argmax = np.zeros((grid.nt, grid.n_nodes, problem.control_set.dim))
    for k in range(grid.nt - 1, -1, -1):
        op = step_operator(problem, grid, k)
        dt = float(grid.times[k + 1] - grid.times[k])
        v = values[k + 1]
        T = op.expectations(v)
        base = T[:, 0]  # zero control comes first in every lattice
        if np.any(op.lam[:, 0] != 0):
            raise UnsupportedVariant("control lattice must start with the zero control")
        # (T0 v - v)/dt is the discrete L v; the bracket is the discrete generator
        gen = (T - base[:, None]) / dt - op.g / dt
        j = np.argmax(gen, axis=1)
        values[k] = v + dt * ((base - v) / dt + gen[rows, j])
        argmax[k] = op.lam[rows, j]
    return PdeField(grid, values, argmax, "equivalence", 1, 0.0)


# ---------------------------------------------------------------------------
# residuals and comparison
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ResidualReport:
    residuals: np.ndarray  # (nt, N) with NaN off the interior
    max: float
    min: float
    mean_abs: float
    tolerance: float

    @property
    def supersolution(self):
        return self.min >= -self.tolerance


def scheme_tolerance(grid: GridSpec, values, fraction=0.5, factor=10.0):
    """``factor * (dt + dx) * (1 + sup|v|)`` over the inner box."""
    mask = grid.inner_mask(fraction)
    scale = 1.0 + float(np.max(np.abs(values[:, mask])))
    return factor * (grid.dt + float(np.max(grid.spacing))) * scale


def residual_check(field, diff: DiffusionSpec, f, grid: GridSpec | None = None,
                   boundary="clamp", fraction=0.5, tolerance=None) -> ResidualReport:
    """Discrete ``-d_u v - L v - f(sigma^T Dv)`` with centred differences in
    space at the later slice; evaluated on the inner box."""
    values = field.values if hasattr(field, "values") else np.asarray(field, dtype=float)
    grid = field.grid if grid is None else grid
    nb = _Neighbours(grid, boundary)
    X = grid.nodes
    mask = grid.inner_mask(fraction) & ~grid.boundary_layer_mask(1)
    res = np.full((grid.nt, grid.n_nodes), np.nan)
    for k in range(grid.nt):
        t = float(grid.times[k + 1])
        dt = t - float(grid.times[k])
        v = values[k + 1]
        a = eval_a(diff, t, X)
        coeffs = diffusion_coefficients(grid, a)
        Lv = sum(c * nb.value(v, o) for o, c in coeffs.items())
        fwd, bwd = _gradients(nb, v)
        cen = 0.5 * (fwd + bwd)
        sig = diff.eval_sigma(t, X)
        fv, _ = f(t, X, np.einsum("nji,nj->ni", sig, cen))
        drift = np.einsum("ni,ni->n", diff.eval_drift(t, X), cen)
        r = -(v - values[k]) / dt - Lv - drift - fv
        res[k, mask] = r[mask]
    body = res[:, mask]
    tol = scheme_tolerance(grid, values, fraction) if tolerance is None else float(tolerance)
    return ResidualReport(res, float(np.max(body)), float(np.min(body)),
                          float(np.mean(np.abs(body))), tol)


@dataclass(frozen=True)
class CompareReport:
    max_per_slice: np.ndarray
    mean_per_slice: np.ndarray
    max_abs: float
    mean_abs: float
    scale: float

    @property
    def relative(self):
        return self.max_abs / self.scale if self.scale > 0 else self.max_abs


def compare_fields(a, b, fraction=0.5) -> CompareReport:
    """Differences of two fields on the inner box, per time slice. The
    scale is ``max |b|`` over the inner box."""
    if not a.grid.same_lattice(b.grid):
        raise GridMismatch("fields live on different grids")
    mask = a.grid.inner_mask(fraction)
    diff = np.abs(a.values[:, mask] - b.values[:, mask])
    scale = float(np.max(np.abs(b.values[:, mask])))
    return CompareReport(diff.max(axis=1), diff.mean(axis=1), float(diff.max()),
                         float(diff.mean()), scale)
