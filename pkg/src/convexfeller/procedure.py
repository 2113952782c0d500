"""Backward induction for the convex procedure

    Pi_{s,t}(h(X_t)) = sup_mu ( E_mu[h(X_t) | X_s] - E_mu[int_s^t g du | X_s] )

over feedback controls on a space-time grid, together with Monte-Carlo
lower bounds and the property checks (time consistency, penalty cocycle,
axioms, continuity modulus).

The one-step expectation uses a Markov-chain stencil matched to the
conditional mean ``(sigma lam + b0) dt`` and covariance ``a dt``: with
``L L^T = a dt``, the stencil puts mass ``1 / (2 kappa_j^2)`` on
``x + m +- kappa_j L e_j`` and the rest on ``x + m``. Columns along a grid
axis use two rings of grid points weighted to match the Gaussian second and
fourth moments; other columns use one ring at ``kappa_j = sqrt(3)``. Nodes
where the rings would leave a negative centre weight fall back to single
rings with ``kappa_j >= sqrt(n)``. Off-lattice points are interpolated
multilinearly, so every step is a convex combination of next-slice values (a monotone
scheme).
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .controls import MarkovControl, TableSelector, constant_control
from .errors import (
    AxiomViolation,
    EllipticityFailure,
    EmptyControlSet,
    NonFinite,
    UnstableStep,
    UnsupportedVariant,
)
from .model import (
    ControlSet,
    DiffusionSpec,
    GridSpec,
    Penalty,
    PointSet,
    ZeroPenalty,
    eval_a,
)

logger = logging.getLogger(__name__)

TRANSITIONS = ("markov-chain", "quadrature", "local-mc")


# ---------------------------------------------------------------------------
# payoffs
# ---------------------------------------------------------------------------

class PayoffSpec:
    """Terminal payoff ``offset + scale * min(base(x_coord), cap)``.

    Base kinds: ``call`` (strike K), ``put`` (K), ``power`` (exponent k,
    ``x^k``), ``linear`` (``x``), ``tanh`` (``tanh(x / width)``), ``softplus``
    (``log(1 + e^x)``), ``wave`` (``x + eps sin x``), ``constant`` (c) and
    ``table`` (node values on a grid, interpolated multilinearly).
    """

    KINDS = ("call", "put", "power", "linear", "tanh", "softplus", "wave", "constant", "table")

    def __init__(self, kind, *, strike=0.0, exponent=2, width=1.0, eps=0.0, c=0.0,
                 values=None, grid: GridSpec | None = None, cap=None, coord=0,
                 scale=1.0, offset=0.0):
        if kind not in self.KINDS:
            raise UnsupportedVariant(f"unknown payoff kind {kind!r}")
        if kind == "table" and (values is None or grid is None):
            raise UnsupportedVariant("table payoff needs values and grid")
        self.kind = kind
        self.strike = float(strike)
        self.exponent = int(exponent)
        self.width = float(width)
        self.eps = float(eps)
        self.c = float(c)
        self.values = None if values is None else np.asarray(values, dtype=float)
        self.grid = grid
        self.cap = None if cap is None else float(cap)
        self.coord = int(coord)
        self.scale = float(scale)
        self.offset = float(offset)

    # convenience constructors
    @classmethod
    def call(cls, strike, **kw):
        return cls("call", strike=strike, **kw)

    @classmethod
    def put(cls, strike, **kw):
        return cls("put", strike=strike, **kw)

    @classmethod
    def power(cls, exponent, **kw):
        return cls("power", exponent=exponent, **kw)

    @classmethod
    def constant(cls, c):
        return cls("constant", c=c)

    @classmethod
    def table(cls, grid, values):
        return cls("table", grid=grid, values=values)

    def base(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.kind == "table":
            return self.grid.interpolate(self.values, X)
        if self.kind == "constant":
            return np.full(X.shape[0], self.c)
        x = X[:, self.coord]
        if self.kind == "call":
            return np.maximum(x - self.strike, 0.0)
        if self.kind == "put":
            return np.maximum(self.strike - x, 0.0)
        if self.kind == "power":
            return x ** self.exponent
        if self.kind == "linear":
            return x.copy()
        if self.kind == "tanh":
            return np.tanh(x / self.width)
        if self.kind == "softplus":
            return np.logaddexp(0.0, x)
        return x + self.eps * np.sin(x)  # wave

    def __call__(self, X):
        b = self.base(X)
        if self.cap is not None:
            b = np.minimum(b, self.cap)
        return self.offset + self.scale * b

    def on_grid(self, grid: GridSpec):
        return self(grid.nodes)

    def lower_bound(self, grid: GridSpec):
        """Certified lower bound on the truncated box (node minimum is exact
        for the monotone or convex kinds shipped)."""
        vals = self.on_grid(grid)
        if self.kind in ("tanh", "wave"):
            # smooth kinds: bound the deviation between nodes by the slope
            slope = abs(self.scale) * (1.0 / self.width if self.kind == "tanh" else 1 + abs(self.eps))
            return float(vals.min() - slope * grid.spacing.max())
        return float(vals.min())

    def negate(self):
        out = PayoffSpec.__new__(PayoffSpec)
        out.__dict__.update(self.__dict__)
        out.scale, out.offset = -self.scale, -self.offset
        return out

    def with_cap(self, cap):
        out = PayoffSpec.__new__(PayoffSpec)
        out.__dict__.update(self.__dict__)
        out.cap = None if cap is None else float(cap)
        return out

    def to_dict(self):
        d = {"kind": self.kind, "scale": self.scale, "offset": self.offset, "coord": self.coord}
        if self.cap is not None:
            d["cap"] = self.cap
        if self.kind in ("call", "put"):
            d["strike"] = self.strike
        elif self.kind == "power":
            d["exponent"] = self.exponent
        elif self.kind == "tanh":
            d["width"] = self.width
        elif self.kind == "wave":
            d["eps"] = self.eps
        elif self.kind == "constant":
            d["c"] = self.c
        elif self.kind == "table":
            d["values"] = self.values.tolist()
            d["grid"] = self.grid.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        kind = d.pop("kind")
        if kind == "table":
            d["grid"] = GridSpec.from_dict(d["grid"])
        return cls(kind, **d)


# ---------------------------------------------------------------------------
# problem, stencils
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ControlProblem:
    """Diffusion, control set and penalty plus the discretization choices.

    ``kappa`` overrides the automatic stencil stretch (values below
    ``sqrt(n)`` give negative centre weights and are rejected).
    ``time_homogeneous`` lets stencils be reused across time slices.
    """

    diffusion: DiffusionSpec
    control_set: ControlSet
    penalty: Penalty
    transition: str = "markov-chain"
    boundary: str = "clamp"
    resolution: int | None = None
    kappa: float | None = None
    mc_points: int = 64
    mc_seed: int = 12345
    time_homogeneous: bool = True
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.transition not in TRANSITIONS:
            raise UnsupportedVariant(f"unknown transition {self.transition!r}")
        if self.boundary not in ("clamp", "linear"):
            raise UnsupportedVariant(f"unknown boundary mode {self.boundary!r}")
        if self.control_set.dim != self.diffusion.dim and not isinstance(self.control_set, PointSet):
            # sigma is n x n, so controls live in R^n
            raise UnsupportedVariant("control dimension must equal the state dimension")

    def replace(self, **kw):
        d = {k: getattr(self, k) for k in ("diffusion", "control_set", "penalty", "transition",
                                            "boundary", "resolution", "kappa", "mc_points",
                                            "mc_seed", "time_homogeneous")}
        d.update(kw)
        return ControlProblem(**d)

    @property
    def monotone(self):
        return self.boundary == "clamp"


def _chain_stencil(problem, grid, L):
    """Symmetric per-column stencil with nonnegative weights.

    A column along a grid axis gets two rings ``+-k1 h`` and ``+-k2 h`` with
    ``k1 h <= sqrt(3) |c| <= k2 h`` weighted to match the Gaussian second and
    fourth moments; where the grid is too coarse for that (``k1 = 0``) a
    single ring at the first multiple of ``h`` beyond ``sqrt(n) |c|`` is
    used. Other columns get one ring at ``sqrt(3) |c|``. Nodes whose total
    ring mass would exceed one fall back to single rings of mass ``<= 1/n``.
    """
    N, n = L.shape[0], grid.dim
    norms = np.linalg.norm(L, axis=1)  # (N, n) column norms
    unit = L / np.where(norms > 0, norms, 1.0)[:, None, :]
    r1 = np.zeros((N, n))
    r2 = np.zeros((N, n))
    w1 = np.zeros((N, n))
    w2 = np.zeros((N, n))
    safe_r = np.zeros((N, n))
    if problem.kappa is not None:
        r1[:] = problem.kappa * norms
        w1[:] = 0.5 / problem.kappa ** 2
        centre = 1.0 - 2 * w1.sum(axis=1)
        if np.any(centre < -1e-14):
            raise UnstableStep(
                f"negative centre weight {centre.min():.3e}; increase kappa or refine dt")
    else:
        for j in range(n):
            c = norms[:, j]
            col = L[:, :, j]
            axis = np.argmax(np.abs(col), axis=1)
            aligned = np.sum(np.abs(col) > 1e-14 * c[:, None], axis=1) == 1
            h = grid.spacing[axis]
            k1 = np.floor(math.sqrt(3.0) * c / h + 1e-9)
            x1 = (k1 * h) ** 2
            x2 = ((k1 + 1) * h) ** 2
            c2 = c ** 2
            with np.errstate(divide="ignore", invalid="ignore"):
                u2 = np.clip((3 * c2 ** 2 - c2 * x1) / (x2 - x1), 0.0, c2)
                two = aligned & (k1 >= 1)
                single = np.ceil(c * math.sqrt(n) / h - 1e-9) * h
                r1[:, j] = np.where(two, k1 * h, np.where(aligned, single, math.sqrt(3.0) * c))
                r2[:, j] = np.where(two, (k1 + 1) * h, 0.0)
                w1[:, j] = np.where(two, (c2 - u2) / (2 * x1), 0.5 * c2 / r1[:, j] ** 2)
                w2[:, j] = np.where(two, u2 / (2 * x2), 0.0)
            safe_r[:, j] = np.where(aligned, single, math.sqrt(n) * c)
        over = 2 * (w1 + w2).sum(axis=1) > 1.0 + 1e-14
        if np.any(over):
            r1[over] = safe_r[over]
            r2[over] = 0.0
            w1[over] = 0.5 * norms[over] ** 2 / safe_r[over] ** 2
            w2[over] = 0.0
    w1 = np.where(norms > 0, w1, 0.0)
    w2 = np.where(norms > 0, w2, 0.0)
    centre = np.maximum(1.0 - 2 * (w1 + w2).sum(axis=1), 0.0)
    offsets = [np.zeros((N, n))]
    weights = [centre]
    for j in range(n):
        for r, w in ((r1, w1), (r2, w2)):
            for sgn in (1.0, -1.0):
                offsets.append(sgn * r[:, j:j + 1] * unit[:, :, j])
                weights.append(w[:, j])
    return np.stack(offsets, axis=1), np.stack(weights, axis=1)


def _noise_stencil(problem: ControlProblem, grid: GridSpec, t, dt, X):
    """Offsets ``(N, S, n)`` and weights ``(N, S)`` of the noise stencil."""
    n = grid.dim
    a = eval_a(problem.diffusion, t, X) * dt
    try:
        L = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise EllipticityFailure("a is not positive definite on the grid") from exc
    N = X.shape[0]
    if problem.transition == "markov-chain":
        return _chain_stencil(problem, grid, L)
    if problem.transition == "quadrature":
        nodes = np.array([-math.sqrt(3.0), 0.0, math.sqrt(3.0)])
        wq = np.array([1 / 6, 2 / 3, 1 / 6])
        xi = np.array(list(itertools.product(nodes, repeat=n)))
        w = np.prod(np.array(list(itertools.product(wq, repeat=n))), axis=1)
        offsets = np.einsum("Nij,Sj->NSi", L, xi)
        return offsets, np.broadcast_to(w, (N, w.size))
    # local-mc: fixed antithetic normals shared by all nodes
    rng = np.random.default_rng(problem.mc_seed)
    half = rng.standard_normal((problem.mc_points // 2, n))
    xi = np.concatenate([half, -half])
    offsets = np.einsum("Nij,Sj->NSi", L, xi)
    return offsets, np.full((N, xi.shape[0]), 1.0 / xi.shape[0])


@dataclass(frozen=True, eq=False)
class StepOperator:
    """Per-node control lattice, penalties and interpolation stencil for one
    time step: ``E_lam[v] = sum(w * v[idx], -1)``."""

    lam: np.ndarray  # (N, M, d)
    g: np.ndarray  # (N, M)
    idx: np.ndarray  # (N, M, P)
    w: np.ndarray  # (N, M, P)

    def expectations(self, v):
        return np.einsum("nmp,nmp->nm", self.w, v[self.idx])


def _lattice(problem: ControlProblem, grid: GridSpec, t, X):
    res = problem.resolution or grid.control_resolution
    lam = problem.control_set.sample(t, X, res)
    if lam.shape[1] == 0:
        raise EmptyControlSet("control lattice is empty")
    return np.array(lam)


def stencil_for(problem: ControlProblem, grid: GridSpec, t, dt, lam):
    """Interpolation indices and weights for controls ``lam`` (N, M, d)."""
    X = grid.nodes
    offsets, weights = _noise_stencil(problem, grid, t, dt, X)
    sig = problem.diffusion.eval_sigma(t, X)
    drift = np.einsum("nij,nmj->nmi", sig, lam) + problem.diffusion.eval_drift(t, X)[:, None, :]
    points = X[:, None, None, :] + dt * drift[:, :, None, :] + offsets[:, None, :, :]
    idx, w = grid.interp_weights(points, problem.boundary)
    w = w * weights[:, None, :, None]
    N, M = lam.shape[:2]
    return idx.reshape(N, M, -1), w.reshape(N, M, -1)


def step_operator(problem: ControlProblem, grid: GridSpec, k) -> StepOperator:
    t = float(grid.times[k])
    dt = float(grid.times[k + 1] - grid.times[k])
    key = (grid.state_lo, grid.state_hi, grid.nx, round(dt, 13), problem.resolution or
           grid.control_resolution, None if problem.time_homogeneous else round(t, 13))
    op = problem._cache.get(key)
    if op is None:
        X = grid.nodes
        lam = _lattice(problem, grid, t, X)
        g = np.asarray(problem.penalty(t, X[:, None, :], lam), dtype=float)
        idx, w = stencil_for(problem, grid, t, dt, lam)
        op = StepOperator(lam, np.broadcast_to(g, lam.shape[:2]) * dt, idx, w)
        problem._cache[key] = op
    return op


# ---------------------------------------------------------------------------
# value fields
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ValueField:
    grid: GridSpec
    values: np.ndarray  # (nt + 1, N)
    argmax: np.ndarray  # (nt, N, d)
    terminal: PayoffSpec
    problem: ControlProblem

    def at(self, s, x):
        """Value at grid time ``s`` and state(s) ``x`` (interpolated)."""
        k = self.grid.time_index(s)
        return self.grid.interpolate(self.values[k], np.atleast_2d(x))

    def slice_at(self, s):
        return self.values[self.grid.time_index(s)]


def backward_induction(problem: ControlProblem, payoff: PayoffSpec, grid: GridSpec,
                       terminal_values=None) -> ValueField:
    """Dynamic programming from ``grid.t1`` back to ``grid.t0``.

    ``v(t1) = h`` and for each step
    ``v(s_i, x) = max_lam E_lam[v(s_{i+1})] - g(s_i, x, lam) dt``
    with ties resolved towards the smallest lattice index.
    """
    h = payoff.on_grid(grid) if terminal_values is None else np.asarray(terminal_values, float)
    values = np.empty((grid.nt + 1, grid.n_nodes))
    values[-1] = h
    d = problem.control_set.dim
    argmax = np.zeros((grid.nt, grid.n_nodes, d))
    rows = np.arange(grid.n_nodes)
    for k in range(grid.nt - 1, -1, -1):
        op = step_operator(problem, grid, k)
        obj = op.expectations(values[k + 1]) - op.g
        j = np.argmax(obj, axis=1)
        values[k] = obj[rows, j]
        argmax[k] = op.lam[rows, j]
        if not np.all(np.isfinite(values[k])):
            raise NonFinite(f"non-finite values at time index {k}")
    return ValueField(grid, values, argmax, payoff, problem)


def evaluate_policy(problem: ControlProblem, grid: GridSpec, policy, terminal_values,
                    with_penalty=True):
    """Linear backward recursion under a fixed node policy ``(nt, N, d)``:
    returns ``(nt + 1, N)`` values of ``E[h] - E[int g]`` (or ``E[h]``)."""
    values = np.empty((grid.nt + 1, grid.n_nodes))
    values[-1] = terminal_values
    X = grid.nodes
    for k in range(grid.nt - 1, -1, -1):
        t = float(grid.times[k])
        dt = float(grid.times[k + 1] - t)
        lam = policy[k][:, None, :]
        idx, w = stencil_for(problem, grid, t, dt, lam)
        ev = np.einsum("nmp,nmp->nm", w, values[k + 1][idx])[:, 0]
        if with_penalty:
            ev = ev - np.asarray(problem.penalty(t, X, policy[k]), dtype=float) * dt
        values[k] = ev
    return values


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MCEstimate:
    mean: float
    stderr: float
    n_paths: int


def mc_value(diff: DiffusionSpec, ctrl: MarkovControl, g: Penalty, h: PayoffSpec, r, y,
             grid: GridSpec, n_paths, seed, control_set: ControlSet | None = None) -> MCEstimate:
    """Monte-Carlo estimate of ``E[h(X_t)] - E[int_r^t g du]`` under one control."""
    from .simulate import accumulate_penalty, simulate_paths

    batch = simulate_paths(diff, ctrl, r, y, grid, n_paths, seed)
    payoff = h(batch.states[:, -1])
    if isinstance(g, ZeroPenalty):
        pen = 0.0
    else:
        cs = control_set if control_set is not None else _AnySet()
        pen = accumulate_penalty(batch, g, cs, ctrl, grid.t0, grid.t1)
    sample = payoff - pen
    return MCEstimate(float(np.mean(sample)), float(np.std(sample, ddof=1) / math.sqrt(n_paths)),
                      int(n_paths))


class _AnySet:
    def contains(self, t, X, lam, tol=0.0):
        return np.ones(np.asarray(lam).shape[:-1], dtype=bool)


def policy_control(vf: ValueField) -> MarkovControl:
    """The recorded argmax policy as a single-interval feedback control."""
    g = vf.grid
    sel = TableSelector(g, vf.argmax, vf.problem.control_set)
    return constant_control(sel, g.t0, g.t1, tuple(g.lo), tuple(g.hi),
                            control_id="argmax-policy")


# ---------------------------------------------------------------------------
# consistency checks
# ---------------------------------------------------------------------------

def check_time_consistency(vf: ValueField, s) -> float:
    """``max |Pi_{r,s}(v(s)) - v(r)|`` with ``Pi_{r,s}`` recomputed on
    ``[r, s]`` from the stored slice ``v(s)``."""
    k = vf.grid.time_index(s)
    if k == 0:
        return 0.0
    sub = vf.grid.sub(0, k)
    table = PayoffSpec.table(vf.grid, vf.values[k])
    again = backward_induction(vf.problem, table, sub, terminal_values=vf.values[k])
    return float(np.max(np.abs(again.values[0] - vf.values[0])))


def check_nested_time_consistency(vf: ValueField, s1, s2) -> float:
    """Two splits ``r < s1 < s2 < t``: compose ``Pi_{r,s1} Pi_{s1,s2}``."""
    k1, k2 = vf.grid.time_index(s1), vf.grid.time_index(s2)
    mid = backward_induction(vf.problem, PayoffSpec.table(vf.grid, vf.values[k2]),
                             vf.grid.sub(k1, k2), terminal_values=vf.values[k2])
    first = backward_induction(vf.problem, PayoffSpec.table(vf.grid, mid.values[0]),
                               vf.grid.sub(0, k1), terminal_values=mid.values[0])
    return float(np.max(np.abs(first.values[0] - vf.values[0])))


def time_consistency_all(vf: ValueField) -> float:
    """Worst deviation over every interior split point."""
    worst = 0.0
    for k in range(1, vf.grid.nt):
        worst = max(worst, check_time_consistency(vf, vf.grid.times[k]))
    return worst


@dataclass(frozen=True)
class CocycleReport:
    split_index: int
    additivity_error: float  # alpha_{r,t} vs alpha_{r,m} + E alpha_{m,t}
    decomposition_error: float  # v(r) vs E[h] - alpha_{r,t} under the argmax policy


def check_penalty_cocycle(vf: ValueField, m) -> CocycleReport:
    """Penalty additivity at procedure level under the recorded policy.

    ``alpha_{r,t}`` is computed in one backward run and, separately, as the
    penalty over ``[r, m]`` plus the transported penalty over ``[m, t]``.
    """
    grid, prob = vf.grid, vf.problem
    km = grid.time_index(m)
    zero = np.zeros(grid.n_nodes)
    # alpha as the penalty part of the policy recursion with zero payoff
    full = -evaluate_policy(prob, grid, vf.argmax, zero)
    late = -evaluate_policy(prob, grid.sub(km, grid.nt), vf.argmax[km:], zero)
    early = -evaluate_policy(prob, grid.sub(0, km), vf.argmax[:km], zero)
    carried = evaluate_policy(prob, grid.sub(0, km), vf.argmax[:km], late[0],
                              with_penalty=False)
    add_err = float(np.max(np.abs(full[0] - (early[0] + carried[0]))))
    eh = evaluate_policy(prob, grid, vf.argmax, vf.values[-1], with_penalty=False)
    dec_err = float(np.max(np.abs(vf.values[0] - (eh[0] - full[0]))))
    return CocycleReport(km, add_err, dec_err)


# ---------------------------------------------------------------------------
# axioms
# ---------------------------------------------------------------------------

class ProcedureEngine:
    """``h_nodes -> Pi(h)`` on all slices, for one problem and grid."""

    def __init__(self, problem: ControlProblem, grid: GridSpec):
        self.problem = problem
        self.grid = grid

    def __call__(self, h_nodes):
        h_nodes = np.asarray(h_nodes, dtype=float)
        table = PayoffSpec.table(self.grid, h_nodes)
        return backward_induction(self.problem, table, self.grid, terminal_values=h_nodes).values


@dataclass(frozen=True)
class AxiomReport:
    violations: dict  # axiom -> worst signed excess (<= tol means pass)
    checked: tuple
    tol: float

    @property
    def passed(self):
        return all(v <= self.tol for v in self.violations.values())


def random_payoff_pairs(grid: GridSpec, n_pairs=10, seed=0, amplitude=1.0):
    """Smooth bounded random payoffs (sums of random sinusoids) on the nodes."""
    rng = np.random.default_rng(seed)
    X = grid.nodes
    width = grid.hi - grid.lo
    out = []
    for _ in range(n_pairs):
        pair = []
        for _ in range(2):
            k = rng.normal(size=(4, grid.dim)) * 2 * np.pi / width
            ph = rng.uniform(0, 2 * np.pi, 4)
            c = rng.normal(size=4) * amplitude / 2
            pair.append(np.sin(X @ k.T + ph) @ c + rng.normal() * amplitude)
        out.append(tuple(pair))
    return out


def check_axioms(engine: ProcedureEngine, pairs, thetas=(0.25, 0.5, 0.75),
                 constants=(-1.0, 0.5, 2.0), tol=1e-9, raise_on_fail=True) -> AxiomReport:
    """Node-wise checks of monotonicity, translation invariance, convexity,
    normalization (normalized penalties) and positive homogeneity (zero
    penalty). Violations are signed so that ``<= tol`` passes."""
    prob = engine.problem
    worst = {}
    where = {}

    def record(name, excess):
        k = int(np.argmax(excess))
        val = float(excess.ravel()[k])
        if val > worst.get(name, -np.inf):
            worst[name] = val
            where[name] = np.unravel_index(k, excess.shape)

    cache = {}

    def Pi(h):
        key = h.tobytes()
        if key not in cache:
            cache[key] = engine(h)
        return cache[key]

    for h1, h2 in pairs:
        h1, h2 = np.asarray(h1, float), np.asarray(h2, float)
        lo, hi = np.minimum(h1, h2), np.maximum(h1, h2)
        record("monotonicity", Pi(lo) - Pi(hi))
        for c in constants:
            record("translation", np.abs(Pi(h1 + c) - Pi(h1) - c))
        for th in thetas:
            record("convexity", Pi(th * h1 + (1 - th) * h2) - th * Pi(h1) - (1 - th) * Pi(h2))
        if isinstance(prob.penalty, ZeroPenalty):
            for th in tuple(thetas) + (2.0,):
                record("homogeneity", np.abs(Pi(th * h1) - th * Pi(h1)))
    if prob.penalty.normalized:
        record("normalization", np.abs(Pi(np.zeros(engine.grid.n_nodes))))
    report = AxiomReport(worst, tuple(worst), tol)
    if raise_on_fail:
        for name, val in worst.items():
            if val > tol:
                raise AxiomViolation(name, where[name], val)
    return report


# ---------------------------------------------------------------------------
# continuity modulus
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FellerReport:
    terminal_gap: float
    max_slice_step: float
    lipschitz: np.ndarray  # per slice, on the inner box
    lags: np.ndarray
    sup_gap: np.ndarray
    exponent: float
    constant: float

    @property
    def max_lipschitz(self):
        return float(np.max(self.lipschitz))


def _lipschitz(grid: GridSpec, v, mask):
    shaped = v.reshape(grid.nx)
    m = mask.reshape(grid.nx)
    best = 0.0
    for ax in range(grid.dim):
        dq = np.abs(np.diff(shaped, axis=ax)) / grid.spacing[ax]
        both = np.logical_and(np.take(m, range(grid.nx[ax] - 1), axis=ax),
                              np.take(m, range(1, grid.nx[ax]), axis=ax))
        if np.any(both):
            best = max(best, float(dq[both].max()))
    return best


def check_feller_modulus(vf: ValueField, inner_fraction=0.5) -> FellerReport:
    """Time and space moduli of the value field on the inner box and the
    fitted rate ``sup |v(s) - h| ~ C (t - s)^exponent`` over dyadic lags."""
    grid = vf.grid
    mask = grid.inner_mask(inner_fraction)
    h = vf.terminal.on_grid(grid)
    terminal_gap = float(np.max(np.abs(vf.values[-1] - h)))
    steps = np.abs(np.diff(vf.values, axis=0))[:, mask]
    lips = np.array([_lipschitz(grid, v, mask) for v in vf.values])
    lags, sups = [], []
    k = 1
    while k <= grid.nt:
        i = grid.nt - k
        lags.append(grid.t1 - grid.times[i])
        sups.append(float(np.max(np.abs(vf.values[i] - h)[mask])))
        k *= 2
    lags, sups = np.array(lags), np.array(sups)
    ok = sups > 1e-14
    if ok.sum() >= 2:
        slope, icpt = np.polyfit(np.log(lags[ok]), np.log(sups[ok]), 1)
    else:
        slope, icpt = np.inf, -np.inf
    const = float(np.max(sups / np.sqrt(lags)))
    return FellerReport(terminal_gap, float(steps.max()), lips, lags, sups, float(slope), const)


# ---------------------------------------------------------------------------
# ceilings for payoffs unbounded above
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CeilingSweep:
    ceilings: np.ndarray
    values: np.ndarray  # value at the reference state per ceiling
    increments: np.ndarray
    nondecreasing: bool
    converged: bool


def ceiling_sweep(problem: ControlProblem, payoff: PayoffSpec, grid: GridSpec, y, ceilings,
                  rtol=1e-3) -> CeilingSweep:
    """Values of ``Pi(min(h, n))`` for increasing ceilings ``n``; the limit is
    the value of the uncapped payoff."""
    ceilings = np.sort(np.asarray(ceilings, dtype=float))
    vals = []
    for c in ceilings:
        vf = backward_induction(problem, payoff.with_cap(c), grid)
        vals.append(float(vf.at(grid.t0, y)[0]))
    vals = np.array(vals)
    inc = np.diff(vals)
    nondecreasing = bool(np.all(inc >= -1e-12))
    converged = bool(len(inc) > 0 and abs(inc[-1]) <= rtol * max(1.0, abs(vals[-1])))
    return CeilingSweep(ceilings, vals, inc, nondecreasing, converged)


def relative_error(grid: GridSpec, values, exact, fraction=0.5):
    """``max |values - exact| / max |exact|`` on the inner box."""
    mask = grid.inner_mask(fraction)
    err = np.max(np.abs(values[..., mask] - exact[..., mask]))
    scale = np.max(np.abs(exact[..., mask]))
    return float(err / scale) if scale > 0 else float(err)
