"""Monte-Carlo paths of the controlled diffusion

    dX = (sigma(u, X) mu + b0(u, X)) du + sigma(u, X) dW,

with Euler-Maruyama steps, left-endpoint controls, and the statistical
checks built on them (change of measure, accumulated penalties, the
exponential martingale, moment windows).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .controls import MarkovControl
from .errors import GridMismatch, NonFinite, OffDomainControl, SingularSigma
from .model import ControlSet, DiffusionSpec, GridSpec, Penalty, eval_a

logger = logging.getLogger(__name__)

#: paths per RNG substream; path ``i`` always draws from block ``i // BLOCK``
BLOCK = 4096


@dataclass(frozen=True, eq=False)
class PathBatch:
    times: np.ndarray
    states: np.ndarray  # (paths, steps + 1, n)
    seed: int
    control_id: str
    controls: np.ndarray  # (paths, steps, d), left-endpoint values used
    absorbed: np.ndarray  # (paths,) bool
    log_weights: np.ndarray | None = None
    penalties: np.ndarray | None = None
    box: tuple = field(default=None)
    control: object = field(default=None, repr=False)

    @property
    def n_paths(self):
        return self.states.shape[0]

    def index_of(self, s, tol=1e-9):
        k = int(np.argmin(np.abs(self.times - s)))
        if abs(self.times[k] - s) > tol * max(1.0, abs(s)):
            raise GridMismatch(f"time {s} is not on the simulation grid")
        return k

    def history(self, k_max=None):
        """``tau -> states at tau`` restricted to already simulated steps."""
        def lookup(tau):
            k = self.index_of(tau)
            if k_max is not None and k > k_max:
                raise ValueError("control looks into the future")
            return self.states[:, k]
        return lookup


def normal_increments(seed, n_paths, n_steps, dim):
    """Standard normals of shape ``(n_paths, n_steps, dim)``.

    Path ``i`` reads from substream ``(seed, i // BLOCK)`` so adding paths
    never changes existing ones.
    """
    out = np.empty((n_paths, n_steps, dim))
    for b in range(math.ceil(n_paths / BLOCK)):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(b,))))
        block = rng.standard_normal((BLOCK, n_steps, dim))
        lo = b * BLOCK
        hi = min(n_paths, lo + BLOCK)
        out[lo:hi] = block[: hi - lo]
    return out


def simulate_paths(diff: DiffusionSpec, ctrl: MarkovControl, r, y, grid: GridSpec, n_paths,
                   seed, absorb=True) -> PathBatch:
    """Euler-Maruyama paths started at ``y`` at time ``r`` on ``grid.times``.

    Paths leaving the grid's state box are absorbed at its boundary when
    ``absorb`` is set.
    """
    times = grid.times
    if abs(grid.t0 - r) > 1e-12 or abs(ctrl.r - r) > 1e-12 or ctrl.t < grid.t1 - 1e-12:
        raise GridMismatch("grid and control must both span [r, t]")
    for tau in list(ctrl.subdivision) + ctrl.anchor_times():
        if tau <= grid.t1 + 1e-12:
            grid.time_index(tau)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    n = diff.dim
    K = grid.nt
    xi = normal_increments(seed, n_paths, K, n)
    states = np.empty((n_paths, K + 1, n))
    states[:, 0] = y
    controls = np.empty((n_paths, K, ctrl.dim))
    absorbed = np.zeros(n_paths, dtype=bool)
    lo, hi = grid.lo, grid.hi

    def history(tau):
        return states[:, int(round((tau - grid.t0) / grid.dt))]

    X = states[:, 0].copy()
    for k in range(K):
        u = times[k]
        dt = times[k + 1] - u
        mu = ctrl.evaluate(u, X, history)
        sig = diff.eval_sigma(u, X)
        drift = np.einsum("pij,pj->pi", sig, mu) + diff.eval_drift(u, X)
        Xn = X + drift * dt + np.einsum("pij,pj->pi", sig, xi[:, k]) * math.sqrt(dt)
        if absorb:
            out = np.any((Xn < lo) | (Xn > hi), axis=-1)
            Xn = np.clip(Xn, lo, hi)
            Xn[absorbed] = X[absorbed]
            absorbed |= out
        if not np.all(np.isfinite(Xn)):
            raise NonFinite(f"non-finite state at step {k}")
        controls[:, k] = mu
        states[:, k + 1] = Xn
        X = Xn
    if absorb and np.any(absorbed):
        logger.info("%d of %d paths absorbed at the box boundary", absorbed.sum(), n_paths)
    return PathBatch(times.copy(), states, int(seed), ctrl.control_id, controls, absorbed,
                     box=(tuple(lo), tuple(hi)), control=ctrl)


def replay_controls(batch: PathBatch, ctrl: MarkovControl, k0=0, k1=None):
    """Values of ``ctrl`` along the stored paths at steps ``k0 <= k < k1``."""
    k1 = len(batch.times) - 1 if k1 is None else k1
    if ctrl is batch.control:
        return batch.controls[:, k0:k1]
    out = np.empty((batch.n_paths, k1 - k0, ctrl.dim))
    for k in range(k0, k1):
        out[:, k - k0] = ctrl.evaluate(batch.times[k], batch.states[:, k], batch.history(k))
    return out


def girsanov_log_weight(batch: PathBatch, diff: DiffusionSpec, mu: MarkovControl):
    """Discrete log density of the ``mu``-controlled law against the
    uncontrolled one along a batch simulated without control:

        sum_k mu_k . sigma_k^{-1} (dX_k - b0_k dt) - 1/2 sum_k |mu_k|^2 dt.
    """
    if np.any(batch.controls != 0):
        raise ValueError("batch must be simulated under the zero control")
    if np.any(batch.absorbed):
        logger.warning("absorbed paths bias the change of measure")
    t = batch.times
    out = np.zeros(batch.n_paths)
    for k in range(len(t) - 1):
        dt = t[k + 1] - t[k]
        X = batch.states[:, k]
        sig = diff.eval_sigma(t[k], X)
        cond = np.linalg.cond(sig)
        if np.any(~np.isfinite(cond)) or np.max(cond) > 1e12:
            raise SingularSigma(f"sigma is numerically singular at step {k}")
        dX = batch.states[:, k + 1] - X - diff.eval_drift(t[k], X) * dt
        w = np.linalg.solve(sig, dX[..., None])[..., 0]
        m = mu.evaluate(t[k], X, batch.history(k))
        out += np.einsum("pd,pd->p", m, w) - 0.5 * np.einsum("pd,pd->p", m, m) * dt
    if not np.all(np.isfinite(out)):
        raise NonFinite("non-finite log weights")
    return out


def accumulate_penalty(batch: PathBatch, g: Penalty, control_set: ControlSet,
                       mu: MarkovControl, s, t):
    """Left-endpoint Riemann sum of ``g(u_k, X_k, mu_k) du`` over ``[s, t)``."""
    i0, i1 = batch.index_of(s), batch.index_of(t)
    if i1 < i0:
        raise GridMismatch("need s <= t")
    lam = replay_controls(batch, mu, i0, i1)
    total = np.zeros(batch.n_paths)
    for j, k in enumerate(range(i0, i1)):
        u = batch.times[k]
        X = batch.states[:, k]
        ok = control_set.contains(u, X, lam[:, j])
        if not np.all(ok):
            p = int(np.argmin(ok))
            raise OffDomainControl(f"control {lam[p, j]} outside the set at t={u}, x={X[p]}")
        total += g(u, X, lam[:, j]) * (batch.times[k + 1] - u)
    return total


# ---------------------------------------------------------------------------
# statistical identities
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DefectReport:
    theta: np.ndarray
    checkpoints: tuple
    defects: np.ndarray
    stderrs: np.ndarray
    max_abs_defect: float
    max_z: float
    passed: bool


def martingale_defect(batch: PathBatch, diff: DiffusionSpec, ctrl: MarkovControl, theta,
                      checkpoints=None, n_bins=10, z_limit=4.0) -> DefectReport:
    """Conditional defect ``E[M_t2 / M_t1 | bin of X_t1] - 1`` of

        M_t = exp(theta.(X_t - y) - int theta.b du - 1/2 int theta' a theta du),

    with ``b = sigma mu + b0`` the drift actually simulated.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    t = batch.times
    if checkpoints is None:
        checkpoints = (t[(len(t) - 1) // 2], t[-1])
    i1, i2 = batch.index_of(checkpoints[0]), batch.index_of(checkpoints[1])
    lam = replay_controls(batch, ctrl, i1, i2)
    log_r = batch.states[:, i2] @ theta - batch.states[:, i1] @ theta
    for j, k in enumerate(range(i1, i2)):
        X = batch.states[:, k]
        dt = t[k + 1] - t[k]
        sig = diff.eval_sigma(t[k], X)
        b = np.einsum("pij,pj->pi", sig, lam[:, j]) + diff.eval_drift(t[k], X)
        a = eval_a(diff, t[k], X)
        log_r -= (b @ theta + 0.5 * np.einsum("i,pij,j->p", theta, a, theta)) * dt
    ratio = np.exp(log_r)
    key = batch.states[:, i1] @ (theta if np.any(theta) else np.eye(diff.dim)[0])
    order = np.argsort(key, kind="stable")
    defects, ses = [], []
    for chunk in np.array_split(order, n_bins):
        vals = ratio[chunk]
        defects.append(vals.mean() - 1.0)
        ses.append(vals.std(ddof=1) / math.sqrt(len(vals)) if len(vals) > 1 else 0.0)
    defects, ses = np.array(defects), np.array(ses)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(ses > 0, np.abs(defects) / ses, np.where(defects == 0, 0.0, np.inf))
    return DefectReport(theta, (float(t[i1]), float(t[i2])), defects, ses,
                        float(np.max(np.abs(defects))), float(np.max(z)),
                        bool(np.all(np.abs(defects) <= z_limit * ses)))


@dataclass(frozen=True)
class MomentLevel:
    level: int
    tau: float
    estimate: float
    stderr: float
    bound: float

    @property
    def within_bound(self):
        return self.estimate <= self.bound


@dataclass(frozen=True)
class MomentReport:
    q: int
    K_margin: float
    levels: tuple
    passed: bool
    monotone: bool

    def scaled(self):
        """Estimates divided by ``tau**q``; constant for Brownian scaling."""
        return np.array([lv.estimate / lv.tau ** self.q for lv in self.levels])


def moment_bound_check(batch: PathBatch, q, K_margin, n_levels=4) -> MomentReport:
    """Estimate ``E sup_{s<=u<=t} |X_t - X_u|^{2q}`` on dyadic windows.

    Level ``k`` splits the horizon into ``2**k`` windows; each window is
    read at the same number of equally spaced points (the step count of
    the finest window), so all levels share one discretization of the sup.
    The level estimate is the largest window estimate, compared with
    ``K_margin * tau^q * (|y|^{2q} + 1)``.
    """
    if q not in (1, 2):
        raise ValueError("q must be 1 or 2")
    K = len(batch.times) - 1
    finest = 2 ** (n_levels - 1)
    if K % finest:
        raise GridMismatch(f"step count {K} not divisible by {finest}")
    pts = K // finest
    y = batch.states[0, 0]
    yfac = np.linalg.norm(y) ** (2 * q) + 1.0
    T = batch.times[-1] - batch.times[0]
    levels = []
    for lev in range(n_levels):
        m = K // 2 ** lev
        stride = m // pts
        tau = T / 2 ** lev
        best = (-1.0, 0.0)
        for j in range(2 ** lev):
            idx = j * m + stride * np.arange(pts + 1)
            seg = batch.states[:, idx]
            dev = np.linalg.norm(seg[:, -1:, :] - seg, axis=-1) ** (2 * q)
            sup = dev.max(axis=1)
            est = float(sup.mean())
            if est > best[0]:
                best = (est, float(sup.std(ddof=1) / math.sqrt(len(sup))))
        levels.append(MomentLevel(lev, tau, best[0], best[1], K_margin * tau ** q * yfac))
    est = [lv.estimate for lv in levels]
    return MomentReport(q, float(K_margin), tuple(levels),
                        all(lv.within_bound for lv in levels),
                        all(b <= a for a, b in zip(est, est[1:])))


def moment_constant(q, sigma_bound, drift_bound, horizon, dim=1):
    """A constant K for the moment bound, from

    sup_u |X_t - X_u| <= 2 sup_u |M_u - M_s| + B tau,
    Doob's L^{2q} inequality, and Gaussian moments of the martingale part
    (exact for constant coefficients)."""
    double_fact = 1 if q == 1 else 3
    mart = 2 ** (2 * q) * (2 * q / (2 * q - 1)) ** (2 * q) * double_fact * (dim * sigma_bound ** 2) ** q
    return 2 ** (2 * q - 1) * (mart + drift_bound ** (2 * q) * horizon ** q)
