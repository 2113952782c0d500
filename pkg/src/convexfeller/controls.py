"""Piecewise feedback controls generating the stable set of measures.

A :class:`MarkovControl` has a subdivision ``r = s_0 < ... < s_n = t``. On
each interval ``[s_i, s_{i+1})`` the paths are split into cells, each cell
being a conjunction of box conditions ``X_tau in box`` at subdivision times
``tau <= s_i``, and each cell carries a selector ``(u, x) -> lam``.
Plain controls only condition on ``X_{s_i}``; bifurcation adds conditions
on the bifurcation time, which is what keeps the class closed under
bifurcation and composition.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import IncompatiblePrefix, ModelError, OffDomain
from .model import ControlSet, GridSpec, control_set_from_dict

TIME_TOL = 1e-12


# ---------------------------------------------------------------------------
# selectors
# ---------------------------------------------------------------------------

class ConstantSelector:
    def __init__(self, value):
        self.value = np.atleast_1d(np.asarray(value, dtype=float))

    @property
    def dim(self):
        return self.value.size

    def __call__(self, u, X):
        X = np.atleast_2d(X)
        return np.broadcast_to(self.value, (X.shape[0], self.value.size)).copy()

    def to_dict(self):
        return {"kind": "constant", "value": self.value.tolist()}


class ClippedAffineSelector:
    """``lam(u, x) = proj_Lambda(matrix @ x + offset)``."""

    def __init__(self, matrix, offset, control_set: ControlSet):
        self.offset = np.atleast_1d(np.asarray(offset, dtype=float))
        self.matrix = np.asarray(matrix, dtype=float).reshape(self.offset.size, -1)
        self.control_set = control_set

    @property
    def dim(self):
        return self.offset.size

    def __call__(self, u, X):
        X = np.atleast_2d(X)
        return self.control_set.project(u, X, X @ self.matrix.T + self.offset)

    def to_dict(self):
        return {"kind": "clipped_affine", "matrix": self.matrix.tolist(),
                "offset": self.offset.tolist(), "control_set": self.control_set.to_dict()}


class TableSelector:
    """Controls tabulated on grid nodes per time slice (e.g. a recorded
    argmax policy); slice ``floor((u - t0) / dt)``, multilinear in x,
    projected back onto the control set."""

    def __init__(self, grid: GridSpec, values, control_set: ControlSet):
        self.grid = grid
        self.values = np.asarray(values, dtype=float)
        self.control_set = control_set

    @property
    def dim(self):
        return self.values.shape[-1]

    def __call__(self, u, X):
        X = np.atleast_2d(X)
        g = self.grid
        k = int(np.clip(math.floor((u - g.t0) / g.dt + 1e-9), 0, self.values.shape[0] - 1))
        idx, w = g.interp_weights(X)
        lam = np.einsum("pc,pcd->pd", w, self.values[k][idx])
        return self.control_set.project(u, X, lam)

    def to_dict(self):
        return {"kind": "table", "grid": self.grid.to_dict(), "values": self.values.tolist(),
                "control_set": self.control_set.to_dict()}


def selector_from_dict(d):
    kind = d["kind"]
    if kind == "constant":
        return ConstantSelector(d["value"])
    if kind == "clipped_affine":
        return ClippedAffineSelector(d["matrix"], d["offset"],
                                     control_set_from_dict(d["control_set"]))
    if kind == "table":
        return TableSelector(GridSpec.from_dict(d["grid"]), d["values"],
                             control_set_from_dict(d["control_set"]))
    raise ValueError(f"unknown selector kind {kind!r}")


# ---------------------------------------------------------------------------
# cells and controls
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Cell:
    """Paths with ``X_tau in [lo, hi)`` for every condition ``(tau, lo, hi)``.

    Upper faces lying on the truncated box's upper face are closed.
    """

    conditions: tuple
    selector: object

    def member(self, history, box_lo, box_hi):
        mask = None
        for tau, lo, hi in self.conditions:
            x = np.clip(history(tau), box_lo, box_hi)
            upper = (x < hi) | ((np.asarray(hi) >= box_hi) & (x <= hi))
            inside = np.all((x >= lo) & upper, axis=-1)
            mask = inside if mask is None else mask & inside
        return mask

    def to_dict(self):
        return {"conditions": [[tau, list(lo), list(hi)] for tau, lo, hi in self.conditions],
                "selector": self.selector.to_dict()}


def _cell_from_dict(d):
    conds = tuple((float(tau), tuple(lo), tuple(hi)) for tau, lo, hi in d["conditions"])
    return Cell(conds, selector_from_dict(d["selector"]))


@dataclass(frozen=True, eq=False)
class MarkovControl:
    subdivision: tuple
    pieces: tuple
    box_lo: tuple
    box_hi: tuple
    control_id: str = ""

    @property
    def r(self):
        return self.subdivision[0]

    @property
    def t(self):
        return self.subdivision[-1]

    @property
    def dim(self):
        return self.pieces[0][0].selector.dim

    def interval_index(self, u):
        s = self.subdivision
        i = int(np.searchsorted(s, u + TIME_TOL, side="right")) - 1
        return min(max(i, 0), len(s) - 2)

    def anchor_times(self):
        return sorted({c[0] for piece in self.pieces for cell in piece for c in cell.conditions})

    def evaluate(self, u, X, history):
        """Control values at time ``u`` for states ``X``; ``history(tau)``
        returns the states at an earlier subdivision time ``tau``."""
        X = np.atleast_2d(X)
        lo, hi = np.array(self.box_lo), np.array(self.box_hi)
        i = self.interval_index(u)
        out = np.zeros((X.shape[0], self.dim))
        done = np.zeros(X.shape[0], dtype=bool)
        for cell in self.pieces[i]:
            mask = cell.member(history, lo, hi) & ~done
            if np.any(mask):
                out[mask] = cell.selector(u, X[mask])
                done |= mask
        if not np.all(done):
            raise ValueError("control cells do not cover all paths")
        return out

    def validate(self):
        """Check that every interval's cells partition the path space and
        only condition on times already observed."""
        lo, hi = np.array(self.box_lo), np.array(self.box_hi)
        s = self.subdivision
        if any(b <= a for a, b in zip(s, s[1:])):
            raise ValueError("subdivision must be increasing")
        for i, piece in enumerate(self.pieces):
            taus = sorted({c[0] for cell in piece for c in cell.conditions})
            if any(tau > s[i] + TIME_TOL for tau in taus):
                raise ValueError(f"interval {i} conditions on a future time")
            # elementary boxes from all breakpoints, one per (tau, axis)
            axes = []
            for tau in taus:
                for k in range(lo.size):
                    pts = {lo[k], hi[k]}
                    for cell in piece:
                        for ctau, clo, chi in cell.conditions:
                            if ctau == tau:
                                pts.update((min(max(clo[k], lo[k]), hi[k]),
                                            min(max(chi[k], lo[k]), hi[k])))
                    pts = np.array(sorted(pts))
                    axes.append(0.5 * (pts[:-1] + pts[1:]))
            mids = np.array(list(itertools.product(*axes))) if axes else np.zeros((1, 0))
            counts = np.zeros(mids.shape[0], dtype=int)
            for cell in piece:
                def history(tau, mids=mids):
                    j = taus.index(tau)
                    return mids[:, j * lo.size:(j + 1) * lo.size]
                m = cell.member(history, lo, hi) if cell.conditions else np.ones(len(mids), bool)
                counts += m
            if np.any(counts != 1):
                raise ValueError(f"cells of interval {i} do not partition the state box")
        return True

    def to_dict(self):
        return {"subdivision": list(self.subdivision),
                "pieces": [[c.to_dict() for c in piece] for piece in self.pieces],
                "box_lo": list(self.box_lo), "box_hi": list(self.box_hi),
                "control_id": self.control_id}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        pieces = tuple(tuple(_cell_from_dict(c) for c in piece) for piece in d["pieces"])
        return cls(tuple(d["subdivision"]), pieces, tuple(d["box_lo"]), tuple(d["box_hi"]),
                   d.get("control_id", ""))

    def same_as(self, other):
        return self.to_json() == other.to_json()


def _fits_structure(ctrl):
    return json.dumps(ctrl.to_dict()["pieces"], sort_keys=True)


def constant_control(selector, r, t, box_lo, box_hi, control_set=None, check_states=None,
                     control_id=None):
    """Single interval, single cell control using ``selector`` throughout.

    With ``control_set`` given, membership is sampled at ``check_states``
    (default: a coarse lattice of the box) and ``OffDomain`` raised on
    failure.
    """
    box_lo = tuple(float(v) for v in np.atleast_1d(box_lo))
    box_hi = tuple(float(v) for v in np.atleast_1d(box_hi))
    if control_set is not None:
        if check_states is None:
            axes = [np.linspace(a, b, 9) for a, b in zip(box_lo, box_hi)]
            check_states = np.array(list(itertools.product(*axes)))
        for u in np.linspace(r, t, 5):
            lam = selector(u, check_states)
            ok = control_set.contains(u, check_states, lam)
            if not np.all(ok):
                k = int(np.argmin(ok))
                raise OffDomain(f"selector value {lam[k]} not in the control set at "
                                f"t={u}, x={check_states[k]}")
    cell = Cell(((float(r), box_lo, box_hi),), selector)
    if control_id is None:
        try:
            text = json.dumps(selector.to_dict(), sort_keys=True)
        except ModelError:  # selectors over state-dependent sets have no JSON form
            text = repr(id(selector))
        digest = hashlib.sha1(text.encode()).hexdigest()
        control_id = f"{type(selector).__name__}:{digest[:10]}"
    return MarkovControl((float(r), float(t)), ((cell,),), box_lo, box_hi, control_id)


def zero_control(dim, r, t, box_lo, box_hi):
    return constant_control(ConstantSelector(np.zeros(dim)), r, t, box_lo, box_hi,
                            control_id="zero")


def refine(ctrl: MarkovControl, times) -> MarkovControl:
    """Insert subdivision points; new intervals copy the enclosing one's
    cells (whose conditions stay on earlier times, so behavior is unchanged)."""
    new = sorted(set(ctrl.subdivision) | {float(s) for s in times
                                          if ctrl.r - TIME_TOL < s < ctrl.t + TIME_TOL})
    new = [s for k, s in enumerate(new) if k == 0 or s - new[k - 1] > TIME_TOL]
    pieces = []
    for a in new[:-1]:
        pieces.append(ctrl.pieces[ctrl.interval_index(a)])
    return MarkovControl(tuple(new), tuple(pieces), ctrl.box_lo, ctrl.box_hi, ctrl.control_id)


def _box_complement(lo, hi, rlo, rhi):
    """Axis-aligned boxes partitioning [lo, hi] minus [rlo, rhi)."""
    out = []
    cur_lo, cur_hi = list(lo), list(hi)
    for k in range(len(lo)):
        if rlo[k] > cur_lo[k]:
            b_hi = list(cur_hi)
            b_hi[k] = rlo[k]
            out.append((tuple(cur_lo), tuple(b_hi)))
        if rhi[k] < cur_hi[k]:
            b_lo = list(cur_lo)
            b_lo[k] = rhi[k]
            out.append((tuple(b_lo), tuple(cur_hi)))
        cur_lo[k], cur_hi[k] = rlo[k], rhi[k]
    return out


def _common(a: MarkovControl, b: MarkovControl, s):
    if not (math.isclose(a.r, b.r) and math.isclose(a.t, b.t)):
        raise IncompatiblePrefix("controls live on different horizons")
    times = set(a.subdivision) | set(b.subdivision) | {float(s)}
    return refine(a, times), refine(b, times)


def bifurcate(ctrl_a: MarkovControl, ctrl_b: MarkovControl, s, region_lo, region_hi):
    """Control following ``ctrl_a`` up to ``s`` and afterwards ``ctrl_a`` on
    ``{X_s in region}`` and ``ctrl_b`` elsewhere."""
    if _fits_structure(ctrl_a) == _fits_structure(ctrl_b):
        _common(ctrl_a, ctrl_b, s)
        return ctrl_a
    a, b = _common(ctrl_a, ctrl_b, s)
    box_lo, box_hi = np.array(a.box_lo), np.array(a.box_hi)
    rlo = np.maximum(np.atleast_1d(region_lo), box_lo)
    rhi = np.minimum(np.atleast_1d(region_hi), box_hi)
    k_s = a.subdivision.index(min(a.subdivision, key=lambda v: abs(v - s)))
    for i in range(k_s):
        if json.dumps([c.to_dict() for c in a.pieces[i]], sort_keys=True) != json.dumps(
                [c.to_dict() for c in b.pieces[i]], sort_keys=True):
            raise IncompatiblePrefix(f"controls differ on interval {i} before s={s}")
    empty = bool(np.any(rlo >= rhi))
    whole = (not empty) and np.all(rlo <= box_lo) and np.all(rhi >= box_hi)
    if whole:
        return ctrl_a
    s = a.subdivision[k_s]
    pieces = list(a.pieces[:k_s])
    for i in range(k_s, len(a.pieces)):
        if empty:
            pieces.append(b.pieces[i])
            continue
        cells = [Cell(c.conditions + ((s, tuple(rlo), tuple(rhi)),), c.selector)
                 for c in a.pieces[i]]
        for clo, chi in _box_complement(tuple(box_lo), tuple(box_hi), tuple(rlo), tuple(rhi)):
            cells += [Cell(c.conditions + ((s, clo, chi),), c.selector) for c in b.pieces[i]]
        pieces.append(tuple(cells))
    return MarkovControl(a.subdivision, tuple(pieces), a.box_lo, a.box_hi,
                         f"bifurcate({a.control_id},{b.control_id},{s})")


def compose(ctrl_a: MarkovControl, ctrl_b: MarkovControl, s):
    """Pasting at ``s``: ``ctrl_b`` on ``[r, s]``, ``ctrl_a`` afterwards."""
    if _fits_structure(ctrl_a) == _fits_structure(ctrl_b):
        _common(ctrl_a, ctrl_b, s)
        return ctrl_a
    a, b = _common(ctrl_a, ctrl_b, s)
    k_s = a.subdivision.index(min(a.subdivision, key=lambda v: abs(v - s)))
    if k_s == 0:
        return ctrl_a
    if k_s == len(a.subdivision) - 1:
        return ctrl_b
    pieces = tuple(b.pieces[:k_s]) + tuple(a.pieces[k_s:])
    return MarkovControl(a.subdivision, pieces, a.box_lo, a.box_hi,
                         f"compose({a.control_id},{b.control_id},{a.subdivision[k_s]})")


# ---------------------------------------------------------------------------
# the discrete feedback class
# ---------------------------------------------------------------------------

class FeedbackControlLattice:
    """Lazily enumerated per-node control choices of the backward induction.

    Iterating yields ``(time_index, node_index, choices)``; a feedback
    control picks one choice per pair, so ``count`` multiplies across pairs.
    """

    def __init__(self, control_set: ControlSet, grid: GridSpec, time_indices=None,
                 node_indices=None):
        self.control_set = control_set
        self.grid = grid
        self.time_indices = list(range(grid.nt)) if time_indices is None else list(time_indices)
        self.node_indices = (list(range(grid.n_nodes)) if node_indices is None
                             else list(node_indices))

    def __iter__(self):
        g = self.grid
        for i in self.time_indices:
            lattice = self.control_set.sample(g.times[i], g.nodes[self.node_indices],
                                              g.control_resolution)
            for j, node in enumerate(self.node_indices):
                yield i, node, lattice[j]

    @property
    def count(self) -> int:
        total = 1
        for _, _, choices in self:
            total *= len(choices)
        return total


def enumerate_feedback_controls(control_set, grid, time_indices=None, node_indices=None):
    return FeedbackControlLattice(control_set, grid, time_indices, node_indices)
