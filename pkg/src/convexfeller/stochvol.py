"""Bid and ask prices in a stochastic-volatility market.

State ``(S, Y)`` with ``n = 1``:

    dS = sigma (sqrt(1 - rho^2) dW1 + rho dW2),   dY = alpha du + gamma dW2,

so ``Sigma = [[sigma sqrt(1 - rho^2), sigma rho], [0, gamma]]`` and
``a = [[sigma^2, rho sigma gamma], [rho sigma gamma, gamma^2]]``. A control
``lam = (a_, nu)`` adds the drift ``Sigma lam``; the S-drift vanishes exactly
on ``a_ sqrt(1 - rho^2) + nu rho = 0``, the martingale-measure controls.
They are truncated to ``||lam||^2 <= Phi(s, y) = C (1 + ||(s, y)||)`` and
penalized by ``||lam||^p / p``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .controls import ClippedAffineSelector, constant_control
from .errors import ConfigError, EllipticityFailure, OffDomain
from .model import DiffusionSpec, GridSpec, LinearConstraintSet, PowerPenalty, ZeroPenalty
from .procedure import ControlProblem, PayoffSpec, ProcedureEngine, backward_induction


def _const(c):
    c = float(c)
    return lambda t, X: np.full(np.asarray(X).shape[:-1], c)


@dataclass(frozen=True, eq=False)
class MarketSpec:
    """Coefficient fields ``(t, X) -> (N,)`` with ``X = (S, Y)`` rows.

    ``bounds`` holds the caps ``(sigma_max, gamma_max)`` used for the
    diffusion's declared bound.
    """

    sigma_f: object
    gamma_f: object
    rho_f: object
    alpha_f: object
    phi_C: float = 1.0
    p: float = 2.0
    n: int = 1
    rho_max: float = 0.99
    bounds: tuple = (1.0, 1.0)
    name: str = ""
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n != 1:
            raise ConfigError("only n = 1 (a single asset) is supported", "market.n")
        if not self.p > 1:
            raise ConfigError("need p > 1", "market.p")
        if not self.phi_C > 0:
            raise ConfigError("need C > 0", "market.phi_C")
        if not 0 <= self.rho_max < 1:
            raise ConfigError("need 0 <= rho_max < 1", "market.rho_max")

    def fields(self, t, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return (np.asarray(self.sigma_f(t, X), float), np.asarray(self.gamma_f(t, X), float),
                np.asarray(self.rho_f(t, X), float), np.asarray(self.alpha_f(t, X), float))

    def to_dict(self):
        return {"name": self.name, "phi_C": self.phi_C, "p": self.p, **self.params}


def decoupled_market(sigma0=20.0, gamma0=0.5, rho=0.0, kappa=0.0, theta=0.0, phi_C=1.0, p=2.0):
    """Constant (absolute) volatility for S, independent of Y, constant
    correlation and mean-reverting ``alpha = kappa (theta - y)``."""
    params = dict(kind="decoupled", sigma0=sigma0, gamma0=gamma0, rho=rho, kappa=kappa,
                  theta=theta)
    return MarketSpec(_const(sigma0), _const(gamma0), _const(rho),
                      lambda t, X: kappa * (theta - np.asarray(X)[..., 1]),
                      phi_C, p, rho_max=abs(rho), bounds=(sigma0, gamma0),
                      name="decoupled", params=params)


def hull_white_market(sigma0=0.2, gamma0=0.5, rho=-0.3, kappa=1.0, theta=0.0,
                      sigma_cap=(2.0, 60.0), alpha_cap=2.0, phi_C=1.0, p=2.0):
    """``sigma = clip(sigma0 s exp(y / 2))`` with a mean-reverting log-variance
    factor ``y``; the clipping keeps the coefficients bounded."""
    lo, hi = sigma_cap

    def sigma_f(t, X):
        X = np.asarray(X)
        return np.clip(sigma0 * X[..., 0] * np.exp(X[..., 1] / 2), lo, hi)

    def alpha_f(t, X):
        return np.clip(kappa * (theta - np.asarray(X)[..., 1]), -alpha_cap, alpha_cap)

    params = dict(kind="hull_white", sigma0=sigma0, gamma0=gamma0, rho=rho, kappa=kappa,
                  theta=theta, sigma_cap=list(sigma_cap), alpha_cap=alpha_cap)
    return MarketSpec(sigma_f, _const(gamma0), _const(rho), alpha_f, phi_C, p,
                      rho_max=abs(rho), bounds=(hi, gamma0), name="hull_white", params=params)


def market_from_dict(d):
    d = dict(d)
    kind = d.pop("kind", "decoupled")
    d.pop("name", None)
    if kind == "decoupled":
        return decoupled_market(**d)
    if kind == "hull_white":
        if "sigma_cap" in d:
            d["sigma_cap"] = tuple(d["sigma_cap"])
        return hull_white_market(**d)
    raise ConfigError(f"unknown market kind {kind!r}", "market.kind")


class JointSigma:
    """``Sigma(t, s, y)`` assembled from the market fields."""

    def __init__(self, mkt: MarketSpec):
        self.mkt = mkt

    def __call__(self, t, X):
        X = np.asarray(X, dtype=float)
        s, g, r, _ = self.mkt.fields(t, X.reshape(-1, 2))
        out = np.zeros((s.size, 2, 2))
        out[:, 0, 0] = s * np.sqrt(1 - r ** 2)
        out[:, 0, 1] = s * r
        out[:, 1, 1] = g
        return out.reshape(X.shape[:-1] + (2, 2))

    def to_dict(self):
        return {"kind": "market", **self.mkt.to_dict()}


def build_joint_diffusion(mkt: MarketSpec, check_nodes=None, t=0.0) -> DiffusionSpec:
    """Two-dimensional diffusion with ``a = Sigma Sigma^T`` and the fixed
    Y-drift ``alpha``. Ellipticity is checked at ``check_nodes``."""

    def drift(t, X):
        X = np.asarray(X, dtype=float)
        out = np.zeros(X.shape)
        out[..., 1] = mkt.alpha_f(t, X)
        return out

    A = math.hypot(*mkt.bounds)
    diff = DiffusionSpec(2, JointSigma(mkt), A, drift, f"stochvol-{mkt.name}")
    if check_nodes is not None:
        nodes = np.atleast_2d(check_nodes)
        _, _, r, _ = mkt.fields(t, nodes)
        if np.any(np.abs(r) > mkt.rho_max + 1e-12) or np.any(np.abs(r) >= 1):
            raise EllipticityFailure("|rho| exceeds rho_max")
        diff.validate(t, nodes)
    return diff


def martingale_control_set(mkt: MarketSpec, C=None, extra_levels=()) -> LinearConstraintSet:
    """Controls with zero S-drift, ``||lam||^2 <= C (1 + ||(s, y)||)``."""
    C = mkt.phi_C if C is None else C
    rho = mkt.params.get("rho", mkt.rho_f)  # a plain number when constant
    return LinearConstraintSet(mkt.n, rho, C, phi_growth=True, extra_levels=extra_levels)


def selector_path(mkt: MarketSpec, points, lam0, base, truncate=False, tol=1e-10):
    """Continuous selection through ``lam0`` in ``Lambda(base)``:

        nu_k = nu sqrt(1 - rho_k^2) / sqrt(1 - rho_0^2),
        a_k  = -nu rho_k / sqrt(1 - rho_0^2),

    which keeps ``||lam_k|| = ||lam0||``. With ``truncate`` the values are
    scaled by ``min(1, sqrt(Phi_k / Phi_0))`` to stay in the truncated set.
    ``points`` and ``base`` are ``(t, s, y)`` triples.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    base = np.asarray(base, dtype=float)
    lam0 = np.asarray(lam0, dtype=float)
    cs = martingale_control_set(mkt)
    bX = base[None, 1:]
    if cs.residual(base[0], bX, lam0[None])[0] > tol or (
            truncate and not cs.contains(base[0], bX, lam0[None])[0]):
        raise OffDomain(f"{lam0} is not in the control set at {base}")
    rho0 = float(mkt.rho_f(base[0], bX)[0])
    nu = lam0[1]
    out = np.empty((pts.shape[0], 2))
    for k, (t, s, y) in enumerate(pts):
        rk = float(mkt.rho_f(t, np.array([[s, y]]))[0])
        out[k] = (-nu * rk / math.sqrt(1 - rho0 ** 2), nu * math.sqrt(1 - rk ** 2) / math.sqrt(1 - rho0 ** 2))
        if truncate:
            phik = float(cs.phi_at(t, np.array([[s, y]]))[0])
            phi0 = float(cs.phi_at(base[0], bX)[0])
            out[k] *= min(1.0, math.sqrt(phik / phi0))
    return out


# ---------------------------------------------------------------------------
# pricing
# ---------------------------------------------------------------------------

def market_grid(mkt: MarketSpec, s0, y0, horizon, nt, nx, n_sd=6.0, t0=0.0,
                control_resolution=10):
    """Box of ``n_sd`` standard deviations per axis at the base point, with
    the Y range widened by the largest drift the controls can add."""
    sig, gam, _, _ = (float(v[0]) for v in mkt.fields(t0, [[s0, y0]]))
    half_s = n_sd * sig * math.sqrt(horizon)
    corner = math.hypot(abs(s0) + half_s, abs(y0) + n_sd * gam * math.sqrt(horizon))
    radius = math.sqrt(mkt.phi_C * (1 + corner))
    half_y = n_sd * gam * math.sqrt(horizon) + horizon * gam * radius
    nx = (nx, nx) if np.ndim(nx) == 0 else tuple(nx)
    return GridSpec(t0, t0 + horizon, nt, (s0 - half_s, y0 - half_y), (s0 + half_s, y0 + half_y),
                    nx, control_resolution)


@dataclass(frozen=True)
class PriceQuote:
    ask: float
    bid: float
    surrep: float
    surrep_bid: float
    control_summary: dict

    def check(self, tol=1e-9):
        """Ordering ``surrep_bid <= bid <= ask <= surrep``."""
        return (self.bid <= self.ask + tol and self.ask <= self.surrep + tol
                and self.surrep_bid <= self.bid + tol)


def pricing_problem(mkt: MarketSpec, grid: GridSpec, C=None, extra_levels=(), penalty=True,
                    resolution=None):
    diff = build_joint_diffusion(mkt, grid.nodes, grid.t0)
    cs = martingale_control_set(mkt, C, extra_levels)
    g = PowerPenalty(mkt.p) if penalty else ZeroPenalty()
    return ControlProblem(diff, cs, g, resolution=resolution)


def _summary(vf, y):
    lam = vf.argmax[0]
    k = int(np.argmin(np.linalg.norm(vf.grid.nodes - np.asarray(y), axis=-1)))
    norms = np.linalg.norm(lam, axis=-1)
    return {"lam_at_y": lam[k].tolist(), "mean_norm": float(norms.mean()),
            "max_norm": float(norms.max()), "active_fraction": float(np.mean(norms > 0))}


def price_bid_ask(mkt: MarketSpec, payoff: PayoffSpec, grid: GridSpec, y, C=None,
                  surrep_C=None, resolution=None, return_fields=False):
    """Ask ``Pi(xi)``, bid ``-Pi(-xi)`` and the zero-penalty prices at ``y``.

    The zero-penalty (surreplication) runs use ``surrep_C`` (default
    ``100 C``) with the ask lattice merged in, so ``ask <= surrep`` holds
    node-wise.
    """
    C = mkt.phi_C if C is None else C
    surrep_C = 100.0 * C if surrep_C is None else surrep_C
    prob = pricing_problem(mkt, grid, C, resolution=resolution)
    sprob = pricing_problem(mkt, grid, surrep_C, extra_levels=(C,), penalty=False,
                            resolution=resolution)
    ask_f = backward_induction(prob, payoff, grid)
    bid_f = backward_induction(prob, payoff.negate(), grid)
    sup_f = backward_induction(sprob, payoff, grid)
    sbid_f = backward_induction(sprob, payoff.negate(), grid)
    y = np.atleast_2d(np.asarray(y, dtype=float))
    quote = PriceQuote(float(ask_f.at(grid.t0, y)[0]), float(-bid_f.at(grid.t0, y)[0]),
                       float(sup_f.at(grid.t0, y)[0]), float(-sbid_f.at(grid.t0, y)[0]),
                       _summary(ask_f, y[0]))
    if return_fields:
        return quote, {"ask": ask_f, "bid": bid_f, "surrep": sup_f, "surrep_bid": sbid_f}
    return quote


def capped_call(strike, cap):
    return PayoffSpec.call(strike, cap=cap, coord=0)


def bachelier_capped_call(s0, strike, cap, vol, horizon):
    """``E[min((S_T - K)^+, cap)]`` for ``S_T ~ N(s0, vol^2 T)``."""
    sd = vol * math.sqrt(horizon)

    def call(k):
        d = (s0 - k) / sd
        return (s0 - k) * norm.cdf(d) + sd * norm.pdf(d)

    return call(strike) - call(strike + cap)


def strike_curve(mkt, grid, y, strikes, cap, C=None, resolution=None):
    """Rows ``(strike, bid, ask, surrep_bid, surrep)``."""
    rows = []
    for k in strikes:
        q = price_bid_ask(mkt, capped_call(k, cap), grid, y, C=C, resolution=resolution)
        rows.append((float(k), q.bid, q.ask, q.surrep_bid, q.surrep))
    return np.array(rows)


def c_sweep(mkt, payoff, grid, y, Cs, resolution=None):
    """Bid and ask for increasing truncation constants with nested lattices;
    rows ``(C, bid, ask)``."""
    Cs = sorted(float(c) for c in Cs)
    rows = []
    for i, c in enumerate(Cs):
        prob = pricing_problem(mkt, grid, c, extra_levels=tuple(Cs[:i]), resolution=resolution)
        ask = backward_induction(prob, payoff, grid).at(grid.t0, y)[0]
        bid = -backward_induction(prob, payoff.negate(), grid).at(grid.t0, y)[0]
        rows.append((c, float(bid), float(ask)))
    return np.array(rows)


def ask_convexity(mkt, grid, pairs, thetas=(0.25, 0.5, 0.75), C=None, resolution=None):
    """Worst node-wise excess of ``ask(th x1 + (1-th) x2)`` over the convex
    combination of asks (``<= 0`` means the panel passes)."""
    engine = ProcedureEngine(pricing_problem(mkt, grid, C, resolution=resolution), grid)
    worst = -np.inf
    for h1, h2 in pairs:
        a1, a2 = engine(h1)[0], engine(h2)[0]
        for th in thetas:
            mix = engine(th * np.asarray(h1) + (1 - th) * np.asarray(h2))[0]
            worst = max(worst, float(np.max(mix - th * a1 - (1 - th) * a2)))
    return worst


# ---------------------------------------------------------------------------
# martingale property of S under feasible controls
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DriftTest:
    max_drift: float  # largest |S-drift| of the applied controls
    z_scores: np.ndarray  # per control, worst conditional-mean z-score
    passed: bool


def random_feasible_control(mkt, grid, rng, C=None):
    cs = martingale_control_set(mkt, C)
    M = rng.normal(size=(2, 2))
    b = rng.normal(size=2)
    sel = ClippedAffineSelector(M, b, cs)
    return constant_control(sel, grid.t0, grid.t1, grid.lo, grid.hi, control_set=cs), cs


def s_martingale_test(mkt, grid, y, n_controls=10, n_paths=20000, seed=0, n_bins=5,
                      z_limit=4.0):
    """Under random feasible clipped-affine controls, the S-increments have
    zero conditional mean: checked exactly on the applied drift and
    statistically on ``S_T - S_m`` binned by ``S_m`` at the midpoint."""
    from .simulate import simulate_paths

    rng = np.random.default_rng(seed)
    diff = build_joint_diffusion(mkt, grid.nodes, grid.t0)
    km = grid.nt // 2
    max_drift = 0.0
    zs = []
    for i in range(n_controls):
        ctrl, cs = random_feasible_control(mkt, grid, rng)
        batch = simulate_paths(diff, ctrl, grid.t0, y, grid, n_paths, seed + 1 + i, absorb=False)
        for k in range(grid.nt):
            sig = diff.eval_sigma(grid.times[k], batch.states[:, k])
            drift = np.einsum("pij,pj->pi", sig, batch.controls[:, k])[:, 0]
            max_drift = max(max_drift, float(np.max(np.abs(drift))))
        inc = batch.states[:, -1, 0] - batch.states[:, km, 0]
        edges = np.quantile(batch.states[:, km, 0], np.linspace(0, 1, n_bins + 1))
        which = np.clip(np.searchsorted(edges, batch.states[:, km, 0], side="right") - 1,
                        0, n_bins - 1)
        worst = abs(inc.mean()) / (inc.std(ddof=1) / math.sqrt(n_paths))
        for b in range(n_bins):
            sel = inc[which == b]
            if sel.size > 1:
                worst = max(worst, abs(sel.mean()) / (sel.std(ddof=1) / math.sqrt(sel.size)))
        zs.append(worst)
    zs = np.array(zs)
    return DriftTest(max_drift, zs, bool(max_drift <= 1e-10 and np.all(zs <= z_limit)))
