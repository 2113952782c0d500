"""Problem-definition types: grids, diffusions, control sets and penalties.

All arrays are vectorized over a leading batch of states. A state batch ``X``
has shape ``(..., n)``; a control batch ``lam`` has shape ``(..., d)`` and
broadcasts against ``X[..., None, :]`` where a lattice axis is present.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np

from .errors import (
    ConfigError,
    EllipticityFailure,
    NonFinite,
    SigmaBoundViolation,
    UnsupportedVariant,
)

MEMBERSHIP_TOL = 1e-10


def _as_tuple(value, n=None, cast=float):
    if np.ndim(value) == 0:
        if n is None:
            return (cast(value),)
        return tuple(cast(value) for _ in range(n))
    return tuple(cast(v) for v in value)


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    """Space-time grid on a truncated state box.

    ``nx`` is the number of nodes per state axis; ``control_resolution`` the
    number of intervals per control axis used by lattice sampling.
    """

    t0: float
    t1: float
    nt: int
    state_lo: tuple
    state_hi: tuple
    nx: tuple
    control_resolution: int = 10

    def __post_init__(self):
        lo = _as_tuple(self.state_lo)
        hi = _as_tuple(self.state_hi)
        nx = _as_tuple(self.nx, len(lo), int)
        object.__setattr__(self, "state_lo", lo)
        object.__setattr__(self, "state_hi", hi)
        object.__setattr__(self, "nx", nx)
        object.__setattr__(self, "t0", float(self.t0))
        object.__setattr__(self, "t1", float(self.t1))
        object.__setattr__(self, "nt", int(self.nt))
        if not self.t0 < self.t1:
            raise ConfigError("t0 must be smaller than t1", "grid.t1")
        if self.nt < 1:
            raise ConfigError("nt must be at least 1", "grid.nt")
        if len(hi) != len(lo) or len(nx) != len(lo):
            raise ConfigError("state_lo, state_hi and nx disagree in length", "grid")
        if any(a >= b for a, b in zip(lo, hi)):
            raise ConfigError("state_lo must be below state_hi", "grid.state_hi")
        if any(k < 3 for k in nx):
            raise ConfigError("need at least 3 nodes per axis", "grid.nx")
        if self.control_resolution < 1:
            raise ConfigError("control_resolution must be >= 1", "grid.control_resolution")

    @classmethod
    def around(cls, center, horizon, sigma_bound, nt, nx, *, t0=0.0, n_sd=6.0,
               drift_bound=0.0, control_resolution=10):
        """Box of ``n_sd`` uncontrolled standard deviations around ``center``,
        widened by the distance a drift of size ``drift_bound`` covers."""
        center = np.atleast_1d(np.asarray(center, dtype=float))
        half = n_sd * sigma_bound * math.sqrt(horizon) + drift_bound * horizon
        return cls(t0, t0 + horizon, nt, tuple(center - half), tuple(center + half),
                   nx, control_resolution)

    @property
    def dim(self) -> int:
        return len(self.nx)

    @property
    def shape(self) -> tuple:
        return self.nx

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.nx))

    @property
    def dt(self) -> float:
        return (self.t1 - self.t0) / self.nt

    @cached_property
    def times(self) -> np.ndarray:
        return np.linspace(self.t0, self.t1, self.nt + 1)

    @cached_property
    def lo(self) -> np.ndarray:
        return np.array(self.state_lo)

    @cached_property
    def hi(self) -> np.ndarray:
        return np.array(self.state_hi)

    @cached_property
    def spacing(self) -> np.ndarray:
        return (self.hi - self.lo) / (np.array(self.nx) - 1)

    @cached_property
    def axes(self) -> tuple:
        return tuple(np.linspace(a, b, k) for a, b, k in zip(self.state_lo, self.state_hi, self.nx))

    @cached_property
    def nodes(self) -> np.ndarray:
        """Flattened node coordinates, C order, shape ``(n_nodes, dim)``."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def inner_mask(self, fraction=0.5) -> np.ndarray:
        """Nodes within ``fraction`` of the half-width around the box center."""
        center = 0.5 * (self.lo + self.hi)
        half = 0.5 * (self.hi - self.lo) * fraction
        return np.all(np.abs(self.nodes - center) <= half * (1 + 1e-12), axis=-1)

    def boundary_layer_mask(self, width=1) -> np.ndarray:
        """Nodes within ``width`` cells of the box edge."""
        idx = np.stack(np.unravel_index(np.arange(self.n_nodes), self.nx), axis=-1)
        nx = np.array(self.nx)
        return np.any((idx < width) | (idx > nx - 1 - width), axis=-1)

    def time_index(self, s, tol=1e-9) -> int:
        """Index of grid time ``s``; raises ``GridMismatch`` off the grid."""
        from .errors import GridMismatch

        k = int(round((s - self.t0) / self.dt))
        if k < 0 or k > self.nt or abs(self.times[k] - s) > tol * max(1.0, abs(s)):
            raise GridMismatch(f"time {s} is not a grid time")
        return k

    def refine(self, levels=1) -> "GridSpec":
        f = 2 ** int(levels)
        return GridSpec(self.t0, self.t1, self.nt * f, self.state_lo, self.state_hi,
                        tuple((k - 1) * f + 1 for k in self.nx), self.control_resolution)

    def sub(self, i0, i1) -> "GridSpec":
        """Same state lattice restricted to times ``times[i0] .. times[i1]``."""
        return GridSpec(self.times[i0], self.times[i1], i1 - i0, self.state_lo,
                        self.state_hi, self.nx, self.control_resolution)

    def same_lattice(self, other) -> bool:
        return (self.nx == other.nx and np.allclose(self.lo, other.lo)
                and np.allclose(self.hi, other.hi) and self.nt == other.nt
                and math.isclose(self.t0, other.t0) and math.isclose(self.t1, other.t1))

    # -- interpolation -----------------------------------------------------

    def interp_weights(self, points, boundary="clamp"):
        """Multilinear interpolation stencil for ``points`` of shape (..., dim).

        Returns flat node indices and weights, both of shape
        ``(..., 2**dim)``. With ``boundary="clamp"`` points outside the box
        take the value of the nearest boundary point (weights stay in
        [0, 1]); ``"linear"`` extrapolates from the edge cell.
        """
        points = np.asarray(points, dtype=float)
        nx = np.array(self.nx)
        pos = (points - self.lo) / self.spacing
        if boundary == "clamp":
            pos = np.clip(pos, 0.0, nx - 1)
        elif boundary != "linear":
            raise UnsupportedVariant(f"unknown boundary mode {boundary!r}")
        base = np.clip(np.floor(pos).astype(np.int64), 0, nx - 2)
        frac = pos - base
        strides = np.array([int(np.prod(nx[k + 1:])) for k in range(self.dim)], dtype=np.int64)
        idx = []
        wts = []
        for corner in itertools.product((0, 1), repeat=self.dim):
            c = np.array(corner)
            idx.append(((base + c) * strides).sum(axis=-1))
            wts.append(np.prod(np.where(c == 1, frac, 1.0 - frac), axis=-1))
        return np.stack(idx, axis=-1), np.stack(wts, axis=-1)

    def interpolate(self, values, points, boundary="clamp"):
        values = np.asarray(values)
        idx, w = self.interp_weights(points, boundary)
        return (values[idx] * w).sum(axis=-1)

    def to_dict(self):
        return {"t0": self.t0, "t1": self.t1, "nt": self.nt, "state_lo": list(self.state_lo),
                "state_hi": list(self.state_hi), "nx": list(self.nx),
                "control_resolution": self.control_resolution}

    @classmethod
    def from_dict(cls, d):
        return cls(d["t0"], d["t1"], d["nt"], d["state_lo"], d["state_hi"], d["nx"],
                   d.get("control_resolution", 10))


# ---------------------------------------------------------------------------
# Diffusion coefficients
# ---------------------------------------------------------------------------

class ConstantSigma:
    def __init__(self, matrix):
        self.matrix = np.atleast_2d(np.asarray(matrix, dtype=float))

    def __call__(self, t, x):
        x = np.asarray(x)
        return np.broadcast_to(self.matrix, x.shape[:-1] + self.matrix.shape)

    def to_dict(self):
        return {"kind": "constant", "value": self.matrix.tolist()}


class DiagonalAffineSigma:
    """Diagonal volatility ``clip(intercept + slope @ x, lower, upper)``."""

    def __init__(self, intercept, slope, lower, upper):
        self.intercept = np.atleast_1d(np.asarray(intercept, dtype=float))
        n = self.intercept.size
        self.slope = np.asarray(slope, dtype=float).reshape(n, n)
        self.lower = np.broadcast_to(np.asarray(lower, dtype=float), (n,)).copy()
        self.upper = np.broadcast_to(np.asarray(upper, dtype=float), (n,)).copy()
        if np.any(self.lower <= 0) or np.any(self.upper < self.lower):
            raise ConfigError("need 0 < lower <= upper", "diffusion.sigma")

    def __call__(self, t, x):
        diag = np.clip(self.intercept + np.asarray(x) @ self.slope.T, self.lower, self.upper)
        return diag[..., :, None] * np.eye(diag.shape[-1])

    def to_dict(self):
        return {"kind": "diagonal_affine", "intercept": self.intercept.tolist(),
                "slope": self.slope.tolist(), "lower": self.lower.tolist(),
                "upper": self.upper.tolist()}


class TableSigma:
    """Volatility matrices tabulated on a uniform state lattice, interpolated
    multilinearly and held constant outside the table."""

    def __init__(self, lo, hi, values):
        values = np.asarray(values, dtype=float)
        n = values.shape[-1]
        shape = values.shape[:-2]
        self.grid = GridSpec(0.0, 1.0, 1, lo, hi, shape)
        self.values = values.reshape(-1, n, n)

    def __call__(self, t, x):
        idx, w = self.grid.interp_weights(x)
        return np.einsum("...c,...cij->...ij", w, self.values[idx])

    def to_dict(self):
        return {"kind": "table", "lo": list(self.grid.state_lo), "hi": list(self.grid.state_hi),
                "values": self.values.reshape(self.grid.nx + self.values.shape[-2:]).tolist()}


@dataclass(frozen=True, eq=False)
class DiffusionSpec:
    """Uncontrolled diffusion ``dX = drift dt + sigma dW``.

    ``sigma_bound`` is the declared bound A on the operator norm of sigma,
    so that ``||a|| <= A**2``. ``drift`` is an optional fixed drift that is
    added to the controlled drift ``sigma @ mu``.
    """

    dim: int
    sigma: Callable
    sigma_bound: float
    drift: Callable | None = None
    name: str = ""

    def eval_sigma(self, t, x):
        s = np.asarray(self.sigma(t, np.asarray(x, dtype=float)), dtype=float)
        if not np.all(np.isfinite(s)):
            raise NonFinite("sigma has non-finite entries")
        return s

    def eval_drift(self, t, x):
        x = np.asarray(x, dtype=float)
        if self.drift is None:
            return np.zeros(x.shape)
        return np.broadcast_to(np.asarray(self.drift(t, x), dtype=float), x.shape)

    def validate(self, t, nodes, check_bound=True):
        """Check finiteness, strict ellipticity and the declared bound at
        ``nodes``; returns ``(min_eig, max_eig)``."""
        a = eval_a(self, t, nodes)
        eig = np.linalg.eigvalsh(a)
        if np.any(eig[..., 0] <= 0):
            k = int(np.argmin(eig[..., 0]))
            raise EllipticityFailure(f"a is not positive definite at {np.asarray(nodes)[k]}")
        if check_bound and np.max(eig) > self.sigma_bound ** 2 * (1 + 1e-12):
            raise SigmaBoundViolation(
                f"||a|| = {np.max(eig):.6g} exceeds A^2 = {self.sigma_bound ** 2:.6g}")
        return float(np.min(eig)), float(np.max(eig))


def eval_a(spec: DiffusionSpec, t, x) -> np.ndarray:
    """Diffusion matrix ``a = sigma sigma^T`` (symmetrized)."""
    s = spec.eval_sigma(t, x)
    a = s @ np.swapaxes(s, -1, -2)
    return 0.5 * (a + np.swapaxes(a, -1, -2))


# ---------------------------------------------------------------------------
# Control sets
# ---------------------------------------------------------------------------

def _axis_lattice(resolution):
    pts = np.linspace(-1.0, 1.0, resolution + 1)
    return np.unique(np.concatenate([pts, [0.0]]))


def _unit_lattice(dim, resolution, ball):
    """Lattice in [-1,1]^dim (or the unit ball), with 0 first."""
    axis = _axis_lattice(resolution)
    pts = np.array(list(itertools.product(axis, repeat=dim)))
    if ball:
        extremes = np.concatenate([np.eye(dim), -np.eye(dim)])
        pts = pts[np.linalg.norm(pts, axis=-1) <= 1 + 1e-12]
        pts = np.unique(np.concatenate([pts, extremes]), axis=0)
    nonzero = pts[np.any(pts != 0, axis=-1)]
    return np.concatenate([np.zeros((1, dim)), nonzero])


def _radial_clip(lam, radius):
    norm = np.linalg.norm(lam, axis=-1)
    radius = np.asarray(radius, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(norm > radius, radius / np.where(norm > 0, norm, 1.0), 1.0)
    return lam * scale[..., None]


class ControlSet:
    """Closed convex state-dependent control set containing 0."""

    dim: int
    variant: str = ""

    def sample(self, t, X, resolution) -> np.ndarray:
        """Lattice of controls for each state; shape ``(N, M, dim)``.

        The first lattice entry is always the zero control.
        """
        raise NotImplementedError

    def contains(self, t, X, lam, tol=MEMBERSHIP_TOL):
        raise NotImplementedError

    def project(self, t, X, lam):
        raise NotImplementedError

    def radius(self, t, X):
        """Upper bound on ``||lam||`` over the set at each state."""
        raise NotImplementedError

    def to_dict(self):
        raise NotImplementedError


class PointSet(ControlSet):
    variant = "point"

    def __init__(self, dim):
        self.dim = int(dim)

    def sample(self, t, X, resolution):
        X = np.atleast_2d(X)
        return np.zeros((X.shape[0], 1, self.dim))

    def contains(self, t, X, lam, tol=MEMBERSHIP_TOL):
        return np.linalg.norm(lam, axis=-1) <= tol

    def project(self, t, X, lam):
        return np.zeros_like(np.asarray(lam, dtype=float))

    def radius(self, t, X):
        return np.zeros(np.asarray(X).shape[:-1])

    def to_dict(self):
        return {"kind": "point", "dim": self.dim}


class BallSet(ControlSet):
    variant = "ball"

    def __init__(self, dim, radius):
        self.dim = int(dim)
        self.K = float(radius)
        if self.K < 0:
            raise ConfigError("ball radius must be nonnegative", "controls.radius")

    def sample(self, t, X, resolution):
        X = np.atleast_2d(X)
        lat = self.K * _unit_lattice(self.dim, resolution, ball=True)
        return np.broadcast_to(lat, (X.shape[0],) + lat.shape)

    def contains(self, t, X, lam, tol=MEMBERSHIP_TOL):
        return np.linalg.norm(lam, axis=-1) <= self.K + tol

    def project(self, t, X, lam):
        return _radial_clip(np.asarray(lam, dtype=float), self.K)

    def radius(self, t, X):
        return np.full(np.asarray(X).shape[:-1], self.K)

    def to_dict(self):
        return {"kind": "ball", "dim": self.dim, "radius": self.K}


class BoxSet(ControlSet):
    variant = "box"

    def __init__(self, lower, upper):
        self.lower = np.atleast_1d(np.asarray(lower, dtype=float))
        self.upper = np.atleast_1d(np.asarray(upper, dtype=float))
        self.dim = self.lower.size
        if np.any(self.lower > 0) or np.any(self.upper < 0):
            raise ConfigError("box must contain 0", "controls")

    def sample(self, t, X, resolution):
        X = np.atleast_2d(X)
        axes = []
        for lo, hi in zip(self.lower, self.upper):
            axes.append(np.unique(np.concatenate([np.linspace(lo, hi, resolution + 1), [0.0]])))
        pts = np.array(list(itertools.product(*axes)))
        pts = np.concatenate([np.zeros((1, self.dim)), pts[np.any(pts != 0, axis=-1)]])
        return np.broadcast_to(pts, (X.shape[0],) + pts.shape)

    def contains(self, t, X, lam, tol=MEMBERSHIP_TOL):
        lam = np.asarray(lam)
        return np.all((lam >= self.lower - tol) & (lam <= self.upper + tol), axis=-1)

    def project(self, t, X, lam):
        return np.clip(np.asarray(lam, dtype=float), self.lower, self.upper)

    def radius(self, t, X):
        r = np.linalg.norm(np.maximum(np.abs(self.lower), np.abs(self.upper)))
        return np.full(np.asarray(X).shape[:-1], r)

    def to_dict(self):
        return {"kind": "box", "lower": self.lower.tolist(), "upper": self.upper.tolist()}


class LinearConstraintSet(ControlSet):
    """Controls ``(alpha, nu)`` in R^{2n} with
    ``alpha * sqrt(1 - rho^2) + nu * rho = 0`` componentwise and
    ``||(alpha, nu)||^2 <= Phi(x)``.

    ``Phi(x) = phi`` when ``phi_growth`` is false, ``phi * (1 + ||x||)``
    otherwise. The constraint subspace is n-dimensional with orthonormal
    basis ``(-rho e_i, sqrt(1 - rho^2) e_i)``; lattices are built on the
    coefficients in that basis. ``extra_levels`` lists further (smaller)
    ``phi`` constants whose lattices are merged into this one, which keeps
    lattices nested across a sweep of truncation constants.
    """

    variant = "linear_constraint"

    def __init__(self, n, rho, phi, phi_growth=False, extra_levels=()):
        self.n = int(n)
        self.dim = 2 * self.n
        self.rho = rho
        self.phi = float(phi)
        self.phi_growth = bool(phi_growth)
        self.extra_levels = tuple(float(c) for c in extra_levels)
        if self.phi <= 0:
            raise ConfigError("phi must be positive", "controls.phi")
        if not callable(rho) and not abs(float(rho)) < 1:
            raise ConfigError("need |rho| < 1", "controls.rho")

    def rho_at(self, t, X):
        X = np.asarray(X, dtype=float)
        if callable(self.rho):
            r = np.asarray(self.rho(t, X), dtype=float)
        else:
            r = np.full(X.shape[:-1], float(self.rho))
        return np.broadcast_to(r, X.shape[:-1])

    def phi_at(self, t, X, level=None):
        X = np.asarray(X, dtype=float)
        c = self.phi if level is None else level
        if self.phi_growth:
            return c * (1.0 + np.linalg.norm(X, axis=-1))
        return np.full(X.shape[:-1], c)

    def radius(self, t, X):
        return np.sqrt(self.phi_at(t, X))

    def basis(self, t, X):
        """Per-state coefficients ``(a, b)`` with ``lam = (a c, b c)``."""
        rho = self.rho_at(t, X)
        return -rho, np.sqrt(1.0 - rho ** 2)

    def from_coefficients(self, t, X, c):
        a, b = self.basis(t, X)
        a = a.reshape(a.shape + (1,) * (np.ndim(c) - 1 - a.ndim))
        b = b.reshape(b.shape + (1,) * (np.ndim(c) - 1 - b.ndim))
        return np.concatenate([a[..., None] * c, b[..., None] * c], axis=-1)

    def coefficients(self, t, X, lam):
        lam = np.asarray(lam, dtype=float)
        a, b = self.basis(t, X)
        a = a.reshape(a.shape + (1,) * (lam.ndim - 1 - a.ndim))
        b = b.reshape(b.shape + (1,) * (lam.ndim - 1 - b.ndim))
        return a[..., None] * lam[..., :self.n] + b[..., None] * lam[..., self.n:]

    def sample(self, t, X, resolution):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        unit = _unit_lattice(self.n, resolution, ball=True)[1:]
        levels = (self.phi,) + tuple(c for c in self.extra_levels if c != self.phi)
        blocks = [np.zeros((X.shape[0], 1, self.n))]
        for level in levels:
            r = np.sqrt(self.phi_at(t, X, level))
            blocks.append(r[:, None, None] * unit[None])
        c = np.concatenate(blocks, axis=1)
        return self.from_coefficients(t, X, c)

    def residual(self, t, X, lam):
        lam = np.asarray(lam, dtype=float)
        rho = self.rho_at(t, X)
        rho = rho.reshape(rho.shape + (1,) * (lam.ndim - 1 - rho.ndim))[..., None]
        res = lam[..., :self.n] * np.sqrt(1 - rho ** 2) + lam[..., self.n:] * rho
        return np.max(np.abs(res), axis=-1)

    def contains(self, t, X, lam, tol=MEMBERSHIP_TOL):
        lam = np.asarray(lam, dtype=float)
        phi = self.phi_at(t, X)
        phi = phi.reshape(phi.shape + (1,) * (lam.ndim - 1 - phi.ndim))
        return (self.residual(t, X, lam) <= tol) & (np.sum(lam ** 2, axis=-1) <= phi + tol)

    def project(self, t, X, lam):
        c = self.coefficients(t, X, lam)
        r = self.radius(t, X)
        r = r.reshape(r.shape + (1,) * (c.ndim - 1 - r.ndim))
        return self.from_coefficients(t, X, _radial_clip(c, r))

    def to_dict(self):
        if callable(self.rho):
            raise UnsupportedVariant("state-dependent rho is not serializable")
        return {"kind": "linear_constraint", "n": self.n, "rho": float(self.rho),
                "phi": self.phi, "phi_growth": self.phi_growth,
                "extra_levels": list(self.extra_levels)}


class GrowthTruncatedSet(ControlSet):
    """``inner`` intersected with the ball of radius ``C (1 + ||x||)``."""

    variant = "growth_truncated"

    def __init__(self, inner: ControlSet, C):
        self.inner = inner
        self.C = float(C)
        self.dim = inner.dim
        if self.C <= 0:
            raise ConfigError("growth constant must be positive", "controls.C")

    def growth_radius(self, X):
        return self.C * (1.0 + np.linalg.norm(np.asarray(X, dtype=float), axis=-1))

    def radius(self, t, X):
        return np.minimum(self.inner.radius(t, X), self.growth_radius(X))

    def sample(self, t, X, resolution):
        X = np.atleast_2d(X)
        lam = self.inner.sample(t, X, resolution)
        return _radial_clip(lam, self.growth_radius(X)[:, None])

    def contains(self, t, X, lam, tol=MEMBERSHIP_TOL):
        lam = np.asarray(lam)
        r = self.growth_radius(X)
        r = r.reshape(r.shape + (1,) * (lam.ndim - 1 - r.ndim))
        return self.inner.contains(t, X, lam, tol) & (np.linalg.norm(lam, axis=-1) <= r + tol)

    def project(self, t, X, lam):
        lam = np.asarray(lam, dtype=float)
        r = self.growth_radius(X)
        r = r.reshape(r.shape + (1,) * (lam.ndim - 1 - r.ndim))
        inner = self.inner
        if isinstance(inner, (PointSet, BallSet, LinearConstraintSet)):
            # both sets are balls within the same subspace
            return _radial_clip(inner.project(t, X, lam), r)
        # Dykstra's alternating projections onto inner and the ball
        x = lam
        p = np.zeros_like(lam)
        q = np.zeros_like(lam)
        for _ in range(500):
            y = inner.project(t, X, x + p)
            p = x + p - y
            x_new = _radial_clip(y + q, r)
            q = y + q - x_new
            if np.max(np.abs(x_new - x)) < 1e-15:
                x = x_new
                break
            x = x_new
        return x

    def to_dict(self):
        return {"kind": "growth_truncated", "C": self.C, "inner": self.inner.to_dict()}


def control_set_sample(spec: ControlSet, t, x, resolution) -> np.ndarray:
    """Finite lattice of controls in ``spec`` at a single state, ``(M, d)``."""
    if resolution < 1:
        raise ConfigError("resolution must be >= 1", "resolution")
    if not isinstance(spec, ControlSet):
        raise UnsupportedVariant(f"not a control set: {spec!r}")
    return np.array(spec.sample(t, np.atleast_2d(np.asarray(x, dtype=float)), resolution)[0])


def project_to_control_set(spec: ControlSet, t, x, lam) -> np.ndarray:
    """Euclidean projection of ``lam`` onto the control set at ``(t, x)``."""
    return spec.project(t, np.asarray(x, dtype=float), np.asarray(lam, dtype=float))


# ---------------------------------------------------------------------------
# Penalties
# ---------------------------------------------------------------------------

class Penalty:
    """Integrand g(t, x, lam), finite on the control set.

    ``growth`` is the declared polynomial-growth certificate ``(C_g, m)``:
    ``sup_{lam in Lambda(t,x)} |g| <= C_g (1 + ||x||^m)``.
    """

    variant = ""
    normalized = False  # g >= 0 and g(t, x, 0) = 0

    def __init__(self, growth=None):
        self.growth = None if growth is None else (float(growth[0]), int(growth[1]))

    def __call__(self, t, X, lam):
        raise NotImplementedError

    def value_at_zero(self, t, X):
        X = np.asarray(X, dtype=float)
        return self(t, X, np.zeros(X.shape[:-1] + (self.control_dim(X),)))

    def control_dim(self, X):
        return np.asarray(X).shape[-1]

    def to_dict(self):
        raise NotImplementedError

    def _growth_dict(self):
        return {} if self.growth is None else {"growth": list(self.growth)}


class ZeroPenalty(Penalty):
    variant = "zero"
    normalized = True

    def __init__(self, growth=(0.0, 0)):
        super().__init__(growth)

    def __call__(self, t, X, lam):
        return np.zeros(np.asarray(lam).shape[:-1])

    def value_at_zero(self, t, X):
        return np.zeros(np.asarray(X).shape[:-1])

    def to_dict(self):
        return {"kind": "zero", **self._growth_dict()}


class ConstantPenalty(Penalty):
    variant = "constant"

    def __init__(self, c, growth=None):
        self.c = float(c)
        super().__init__(growth if growth is not None else (abs(self.c), 0))
        self.normalized = self.c == 0.0

    def __call__(self, t, X, lam):
        return np.full(np.asarray(lam).shape[:-1], self.c)

    def value_at_zero(self, t, X):
        return np.full(np.asarray(X).shape[:-1], self.c)

    def to_dict(self):
        return {"kind": "constant", "c": self.c, **self._growth_dict()}


class PowerPenalty(Penalty):
    """``g = ||lam||^p / p``."""

    variant = "power"
    normalized = True

    def __init__(self, p, growth=None):
        self.p = float(p)
        if not self.p > 1:
            raise ConfigError("power penalty needs p > 1", "penalty.p")
        super().__init__(growth)

    def __call__(self, t, X, lam):
        return np.linalg.norm(lam, axis=-1) ** self.p / self.p

    def value_at_zero(self, t, X):
        return np.zeros(np.asarray(X).shape[:-1])

    def to_dict(self):
        return {"kind": "power", "p": self.p, **self._growth_dict()}


class QuadraticPenalty(Penalty):
    """``g = lam^T Q lam / 2`` with Q symmetric positive semidefinite."""

    variant = "quadratic"
    normalized = True

    def __init__(self, matrix, growth=None):
        Q = np.atleast_2d(np.asarray(matrix, dtype=float))
        self.Q = 0.5 * (Q + Q.T)
        if np.min(np.linalg.eigvalsh(self.Q)) < -1e-12:
            raise ConfigError("quadratic penalty matrix must be PSD", "penalty.matrix")
        super().__init__(growth)

    def __call__(self, t, X, lam):
        lam = np.asarray(lam, dtype=float)
        return 0.5 * np.einsum("...i,ij,...j->...", lam, self.Q, lam)

    def value_at_zero(self, t, X):
        return np.zeros(np.asarray(X).shape[:-1])

    def to_dict(self):
        return {"kind": "quadratic", "matrix": self.Q.tolist(), **self._growth_dict()}


class TablePenalty(Penalty):
    """Radial penalty ``g = interp(||lam||; radii, values)``, held constant
    beyond the last radius."""

    variant = "table"

    def __init__(self, radii, values, growth=None):
        self.radii = np.asarray(radii, dtype=float)
        self.values = np.asarray(values, dtype=float)
        if self.radii.ndim != 1 or self.radii.shape != self.values.shape:
            raise ConfigError("radii and values must be matching 1-d arrays", "penalty")
        if np.any(np.diff(self.radii) <= 0) or self.radii[0] != 0:
            raise ConfigError("radii must start at 0 and increase", "penalty.radii")
        super().__init__(growth if growth is not None else (float(np.max(np.abs(self.values))), 0))
        self.normalized = bool(self.values[0] == 0 and np.all(self.values >= 0))

    def __call__(self, t, X, lam):
        return np.interp(np.linalg.norm(lam, axis=-1), self.radii, self.values)

    def value_at_zero(self, t, X):
        return np.full(np.asarray(X).shape[:-1], self.values[0])

    def to_dict(self):
        return {"kind": "table", "radii": self.radii.tolist(), "values": self.values.tolist(),
                **self._growth_dict()}


# ---------------------------------------------------------------------------
# dict round trips
# ---------------------------------------------------------------------------

def sigma_from_dict(d, dim):
    kind = d.get("kind")
    if kind == "constant":
        value = np.asarray(d["value"], dtype=float)
        if value.ndim == 0:
            value = value * np.eye(dim)
        elif value.ndim == 1:
            value = np.diag(value)
        return ConstantSigma(value)
    if kind == "diagonal_affine":
        return DiagonalAffineSigma(d["intercept"], d.get("slope", np.zeros((dim, dim))),
                                   d["lower"], d["upper"])
    if kind == "table":
        return TableSigma(d["lo"], d["hi"], d["values"])
    raise UnsupportedVariant(f"unknown sigma kind {kind!r}")


def diffusion_from_dict(d, name=""):
    dim = int(d["dim"])
    sigma = sigma_from_dict(d["sigma"], dim)
    drift = None
    if d.get("drift") is not None:
        b = np.asarray(d["drift"], dtype=float)
        drift = lambda t, x, b=b: np.broadcast_to(b, np.shape(x))  # noqa: E731
    return DiffusionSpec(dim, sigma, float(d["sigma_bound"]), drift, name)


def diffusion_to_dict(spec: DiffusionSpec):
    out = {"dim": spec.dim, "sigma": spec.sigma.to_dict(), "sigma_bound": spec.sigma_bound}
    return out


def control_set_from_dict(d):
    kind = d.get("kind")
    if kind == "point":
        return PointSet(d["dim"])
    if kind == "ball":
        return BallSet(d["dim"], d["radius"])
    if kind == "box":
        return BoxSet(d["lower"], d["upper"])
    if kind == "linear_constraint":
        return LinearConstraintSet(d.get("n", 1), d["rho"], d["phi"], d.get("phi_growth", False),
                                   d.get("extra_levels", ()))
    if kind == "growth_truncated":
        return GrowthTruncatedSet(control_set_from_dict(d["inner"]), d["C"])
    raise UnsupportedVariant(f"unknown control set kind {kind!r}")


def penalty_from_dict(d):
    kind = d.get("kind")
    growth = d.get("growth")
    if kind == "zero":
        return ZeroPenalty()
    if kind == "constant":
        return ConstantPenalty(d["c"], growth)
    if kind == "power":
        return PowerPenalty(d["p"], growth)
    if kind == "quadratic":
        return QuadraticPenalty(d["matrix"], growth)
    if kind == "table":
        return TablePenalty(d["radii"], d["values"], growth)
    raise UnsupportedVariant(f"unknown penalty kind {kind!r}")


def sample_states(grid: GridSpec, n=200, seed=0, inflate=1.0) -> np.ndarray:
    """Random states in the grid box inflated by ``inflate`` cells."""
    rng = np.random.default_rng(seed)
    lo = grid.lo - inflate * grid.spacing
    hi = grid.hi + inflate * grid.spacing
    return lo + (hi - lo) * rng.random((n, grid.dim))


__all__ = [
    "GridSpec", "DiffusionSpec", "ConstantSigma", "DiagonalAffineSigma", "TableSigma",
    "eval_a", "ControlSet", "PointSet", "BallSet", "BoxSet", "LinearConstraintSet",
    "GrowthTruncatedSet", "control_set_sample", "project_to_control_set", "Penalty",
    "ZeroPenalty", "ConstantPenalty", "PowerPenalty", "QuadraticPenalty", "TablePenalty",
    "sample_states", "MEMBERSHIP_TOL",
]
