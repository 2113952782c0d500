"""Penalty evaluation and the convex conjugate

    f(t, x, z) = sup_{lam in Lambda(t, x)} (z . lam - g(t, x, lam)).

``fenchel_numeric`` is the reference evaluation (lattice search followed by
local refinement). Closed forms are provided for the shipped families and
are used as cross-checks and as fast generators for the PDE solver.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, GrowthViolation
from .model import (
    MEMBERSHIP_TOL,
    BallSet,
    ControlSet,
    Penalty,
    PointSet,
    control_set_sample,
)


@dataclass(frozen=True)
class ConjugateResult:
    value: float
    argmax: np.ndarray
    attained: bool
    refinement_depth: int


def eval_g(g: Penalty, control_set: ControlSet, t, x, lam):
    """Penalty extended by ``+inf`` outside the control set."""
    x = np.asarray(x, dtype=float)
    lam = np.asarray(lam, dtype=float)
    inside = control_set.contains(t, x, lam, MEMBERSHIP_TOL)
    val = np.where(inside, g(t, x, lam), np.inf)
    return float(val) if val.ndim == 0 else val


def _objective(g, t, x, z, lam):
    return lam @ z - g(t, x, lam)


def fenchel_numeric(g: Penalty, control_set: ControlSet, t, x, z, resolution=20, depth=0):
    """Lattice maximization of ``z . lam - g`` with ``depth`` local refinements.

    The search keeps its incumbent, so the value never decreases with depth
    and is always a lower bound on the true conjugate. Ties go to the
    smallest lattice index (the zero control comes first).
    """
    if resolution < 2 or depth < 0:
        raise ValueError("need resolution >= 2 and depth >= 0")
    x = np.asarray(x, dtype=float)
    z = np.atleast_1d(np.asarray(z, dtype=float))
    lattice = control_set_sample(control_set, t, x, resolution)
    obj = _objective(g, t, x, z, lattice)
    i = int(np.argmax(obj))
    best, lam = float(obj[i]), lattice[i]

    radius = float(control_set.radius(t, x[None])[0])
    width = 2.0 * radius / resolution
    last_gain = np.inf
    if width > 0 and depth > 0:
        d = lattice.shape[-1]
        steps = np.linspace(-1.0, 1.0, 5)
        offsets = np.stack(np.meshgrid(*([steps] * d), indexing="ij"), axis=-1).reshape(-1, d)
        for _ in range(depth):
            cand = control_set.project(t, x, lam + width * offsets)
            vals = _objective(g, t, x, z, cand)
            j = int(np.argmax(vals))
            gain = float(vals[j]) - best
            if gain > 0:
                best, lam = float(vals[j]), cand[j]
            last_gain = max(gain, 0.0)
            width *= 0.5
    attained = bool(control_set.contains(t, x, lam)) and (
        depth == 0 or last_gain <= 1e-12 * (1.0 + abs(best)))
    return ConjugateResult(best, np.array(lam), attained, int(depth))


# ---------------------------------------------------------------------------
# closed forms
# ---------------------------------------------------------------------------

def power_ball_conjugate(p, radius, psi):
    """``sup_{0<=r<=R} (psi r - r^p / p)`` for ``psi >= 0``."""
    psi = np.asarray(psi, dtype=float)
    q = p / (p - 1.0)
    if np.isinf(radius):
        return psi ** q / q
    radius = np.asarray(radius, dtype=float)
    inner = psi <= radius ** (p - 1.0)
    return np.where(inner, psi ** q / q, psi * radius - radius ** p / p)


def _power_ball_argmax_radius(p, radius, psi):
    r = np.asarray(psi, dtype=float) ** (1.0 / (p - 1.0))
    return np.minimum(r, radius)


def fenchel_closed_stochvol(p, Phi, rho, z):
    """Two-branch conjugate of the power penalty on the truncated
    martingale-constraint set, with ``z = (z, z')`` split in halves and

        psi = || z - rho / sqrt(1 - rho^2) z' ||,  q = p / (p - 1),
        f = psi^q / q                           if psi <= Phi^((p-1)/2),
        f = psi Phi^(1/2) - Phi^(p/2) / p       otherwise.

    This is the formula as usually stated for this model; it coincides with
    the exact conjugate (``stochvol_conjugate_exact``) only for ``rho = 0``
    with ``z`` the nu-gradient and ``z'`` the alpha-gradient. See the README
    section on the stochastic-volatility generator.
    """
    if not p > 1:
        raise DomainError("need p > 1")
    if not Phi > 0:
        raise DomainError("need Phi > 0")
    if not abs(rho) < 1:
        raise DomainError("need |rho| < 1")
    z = np.atleast_1d(np.asarray(z, dtype=float))
    n = z.shape[-1] // 2
    zz, zp = z[..., :n], z[..., n:]
    psi = np.linalg.norm(zz - rho / np.sqrt(1.0 - rho ** 2) * zp, axis=-1)
    out = power_ball_conjugate(p, np.sqrt(Phi), psi)
    return float(out) if np.ndim(out) == 0 else out


def stochvol_conjugate_exact(p, Phi, rho, z_lam):
    """Exact conjugate with ``z_lam = (z_alpha, z_nu)`` in control order.

    On the constraint subspace ``lam = (-rho c, sqrt(1-rho^2) c)`` with
    ``||lam|| = ||c||``, so ``z . lam = c . (sqrt(1-rho^2) z_nu - rho z_alpha)``.
    """
    if not abs(rho) < 1:
        raise DomainError("need |rho| < 1")
    z_lam = np.atleast_1d(np.asarray(z_lam, dtype=float))
    n = z_lam.shape[-1] // 2
    psi = np.linalg.norm(np.sqrt(1 - rho ** 2) * z_lam[..., n:] - rho * z_lam[..., :n], axis=-1)
    out = power_ball_conjugate(p, np.sqrt(Phi), psi)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# vectorized generators ``f(t, X, Z) -> (values, argmax)``
# ---------------------------------------------------------------------------

class LatticeConjugate:
    """Conjugate maximized over ``control_set``'s sampling lattice."""

    def __init__(self, control_set: ControlSet, penalty: Penalty, resolution):
        self.control_set = control_set
        self.penalty = penalty
        self.resolution = int(resolution)

    def lattice(self, t, X):
        X = np.atleast_2d(X)
        lam = self.control_set.sample(t, X, self.resolution)
        return lam, self.penalty(t, X[:, None, :], lam)

    def __call__(self, t, X, Z):
        lam, g = self.lattice(t, X)
        obj = np.einsum("nmd,nd->nm", lam, Z) - g
        k = np.argmax(obj, axis=1)
        rows = np.arange(lam.shape[0])
        return obj[rows, k], lam[rows, k]

    def drift_bound(self, t, X):
        return self.control_set.radius(t, X)


class ZeroConjugate:
    """Generator of the uncontrolled problem (Lambda = {0}, g = 0)."""

    def __init__(self, dim):
        self.dim = int(dim)

    def __call__(self, t, X, Z):
        n = np.atleast_2d(X).shape[0]
        return np.zeros(n), np.zeros((n, self.dim))

    def drift_bound(self, t, X):
        return np.zeros(np.atleast_2d(X).shape[0])


class BallConjugate:
    """``f(z) = K ||z||``: ball of radius K, zero penalty."""

    def __init__(self, radius):
        self.K = float(radius)

    def __call__(self, t, X, Z):
        Z = np.atleast_2d(Z)
        norm = np.linalg.norm(Z, axis=-1)
        with np.errstate(invalid="ignore", divide="ignore"):
            direction = np.where(norm[:, None] > 0, Z / np.where(norm > 0, norm, 1)[:, None], 0.0)
        return self.K * norm, self.K * direction

    def drift_bound(self, t, X):
        return np.full(np.atleast_2d(X).shape[0], self.K)


class PowerConjugate:
    """``g = ||lam||^p / p`` on the ball of radius ``radius`` (may be inf)."""

    def __init__(self, p, radius=np.inf):
        self.p = float(p)
        self.radius = float(radius)

    def __call__(self, t, X, Z):
        Z = np.atleast_2d(Z)
        psi = np.linalg.norm(Z, axis=-1)
        val = power_ball_conjugate(self.p, self.radius, psi)
        r = _power_ball_argmax_radius(self.p, self.radius, psi)
        with np.errstate(invalid="ignore", divide="ignore"):
            direction = np.where(psi[:, None] > 0, Z / np.where(psi > 0, psi, 1)[:, None], 0.0)
        return val, r[:, None] * direction

    def drift_bound(self, t, X):
        return np.full(np.atleast_2d(X).shape[0], self.radius)


class SubspacePowerConjugate:
    """Exact conjugate of ``||lam||^p / p`` on a ``LinearConstraintSet``."""

    def __init__(self, control_set, p):
        self.control_set = control_set
        self.p = float(p)

    def __call__(self, t, X, Z):
        cs = self.control_set
        X = np.atleast_2d(X)
        coef = cs.coefficients(t, X, Z)  # projection of z onto the subspace basis
        psi = np.linalg.norm(coef, axis=-1)
        R = cs.radius(t, X)
        val = power_ball_conjugate(self.p, R, psi)
        r = _power_ball_argmax_radius(self.p, R, psi)
        with np.errstate(invalid="ignore", divide="ignore"):
            direction = np.where(psi[:, None] > 0, coef / np.where(psi > 0, psi, 1)[:, None], 0.0)
        return val, cs.from_coefficients(t, X, r[:, None] * direction)

    def drift_bound(self, t, X):
        return self.control_set.radius(t, X)


def closed_form_generator(control_set, penalty):
    """Closed-form generator for the shipped (set, penalty) pairs, or None."""
    from .model import LinearConstraintSet, PowerPenalty, QuadraticPenalty, ZeroPenalty

    if isinstance(control_set, PointSet):
        return ZeroConjugate(control_set.dim) if isinstance(penalty, ZeroPenalty) else None
    if isinstance(control_set, BallSet):
        if isinstance(penalty, ZeroPenalty):
            return BallConjugate(control_set.K)
        if isinstance(penalty, PowerPenalty):
            return PowerConjugate(penalty.p, control_set.K)
        if isinstance(penalty, QuadraticPenalty) and np.allclose(
                penalty.Q, np.eye(control_set.dim)):
            return PowerConjugate(2.0, control_set.K)
    if isinstance(control_set, LinearConstraintSet) and isinstance(penalty, PowerPenalty):
        return SubspacePowerConjugate(control_set, penalty.p)
    return None


# ---------------------------------------------------------------------------
# growth hypothesis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GrowthReport:
    C_g: float
    m: int
    max_ratio: float
    worst_time: float
    worst_state: np.ndarray
    worst_control: np.ndarray
    passed: bool


def check_Hg(g: Penalty, control_set: ControlSet, sample_nodes, C_g=None, m=None,
             resolution=20, raise_on_fail=True) -> GrowthReport:
    """Verify ``|g(t,x,lam)| <= C_g (1 + ||x||^m)`` on sampled nodes.

    ``sample_nodes`` is a sequence of ``(t, x)`` pairs. The certificate
    defaults to the one declared on the penalty.
    """
    nodes = list(sample_nodes)
    if not nodes:
        raise ValueError("need at least one sample node")
    if C_g is None or m is None:
        if g.growth is None:
            raise ValueError("penalty declares no growth certificate; pass C_g and m")
        C_g, m = g.growth
    worst = (-1.0, None, None, None)
    for t, x in nodes:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        lam = control_set_sample(control_set, t, x, resolution)
        vals = np.abs(g(t, x, lam))
        bound = C_g * (1.0 + np.linalg.norm(x) ** m)
        if bound > 0:
            ratio = vals / bound
        else:
            ratio = np.where(vals > 0, np.inf, 0.0)
        k = int(np.argmax(ratio))
        if ratio[k] > worst[0]:
            worst = (float(ratio[k]), t, x, lam[k])
    report = GrowthReport(float(C_g), int(m), worst[0], worst[1], worst[2], worst[3],
                          worst[0] <= 1.0 + 1e-12)
    if raise_on_fail and not report.passed:
        raise GrowthViolation(
            f"|g| / C_g(1+|x|^m) = {report.max_ratio:.4g} at t={report.worst_time}, "
            f"x={report.worst_state}, lam={report.worst_control}")
    return report
