"""Interval branch-and-prune falsification of the barrier conditions.

Three violation families are searched independently:
  - safe-sign:  a point of the safe region where h < 0,
  - unsafe-sign: a point of the avoid disk where h >= 0,
  - lie: a point of X where, for every candidate input, the lifted
    barrier-rate expression grad_z h . psi(z, u) + lam*h falls below beta.

Boxes are pruned with sound interval enclosures (naive propagation
tightened by a mean-value form built from interval Jacobians); boxes
below the width threshold are point-checked at their center, and a
concrete violation with positive margin becomes a counterexample.
All set membership tests live on the first two state coordinates
(planar obstacle geometry).
"""

from __future__ import annotations

import heapq
import time
from dataclasses import dataclass, field

import numpy as np

from . import netcore


class ResourceError(RuntimeError):
    pass


class ClassifyError(ValueError):
    pass


@dataclass
class IntervalBox:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if np.any(self.lo > self.hi):
            raise ValueError("box has lo > hi")

    @property
    def width(self):
        return float(np.max(self.hi - self.lo))

    @property
    def center(self):
        return 0.5 * (self.lo + self.hi)


@dataclass
class SafetySpec:
    """Geometry and constants for the safety problem.

    The avoid set is disk(center, radius) on the first two state dims
    (intersected with X); the safe set is X minus the inflated disk
    disk(center, radius + safe_margin).
    """

    X: np.ndarray                # (n, 2) box
    obstacle_center: np.ndarray  # (2,)
    obstacle_radius: float
    safe_margin: float
    U_c: np.ndarray              # (R, m) finite candidate inputs
    lam: float
    beta: float
    delta_sat: float
    delta_box: float

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.obstacle_center = np.asarray(self.obstacle_center, dtype=float)
        self.U_c = np.atleast_2d(np.asarray(self.U_c, dtype=float))
        if self.lam <= 0:
            raise ValueError("lam must be positive")


@dataclass
class Counterexample:
    point: np.ndarray
    clause: str                  # "safe_sign" | "unsafe_sign" | "lie"
    margin: float


@dataclass
class FalsifyResult:
    status: str                  # "unsat" | "sat"
    counterexamples: list
    boxes_explored: dict
    wall_time: float = 0.0

    def report(self):
        return {
            "status": self.status,
            "counterexamples": [
                {"clause": c.clause, "point": [float(v) for v in c.point],
                 "margin": float(c.margin)}
                for c in self.counterexamples],
            "boxes_explored": dict(self.boxes_explored),
            "wall_time_s": self.wall_time,
        }


# ---------------------------------------------------------------------------
# interval primitives (all batched over axis 0)

def _iaffine(lo, hi, W, b):
    c = 0.5 * (lo + hi)
    r = 0.5 * (hi - lo)
    yc = c @ W.T + (b if b is not None else 0.0)
    yr = r @ np.abs(W).T
    return yc - yr, yc + yr


def _iforward_full(net, lo, hi):
    """Interval forward pass; returns output interval and per-hidden-layer
    post-activation intervals (used for Jacobian enclosures)."""
    acts = []
    last = net.n_layers - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        lo, hi = _iaffine(lo, hi, W, b)
        if i != last:
            lo, hi = np.tanh(lo), np.tanh(hi)
            acts.append((lo, hi))
    return lo, hi, acts


def interval_forward(net, box):
    """Sound enclosure of net(x) over the box.  Returns (lo, hi) vectors."""
    lo, hi, _ = _iforward_full(net, box.lo[None, :], box.hi[None, :])
    return lo[0], hi[0]


def _tanh_deriv_interval(alo, ahi):
    """Interval of 1 - a^2 for a = tanh(s) in [alo, ahi]."""
    amax2 = np.maximum(alo ** 2, ahi ** 2)
    amin2 = np.where(alo * ahi > 0, np.minimum(alo ** 2, ahi ** 2), 0.0)
    return 1.0 - amax2, 1.0 - amin2


def _ijac(net, acts, batch):
    """Interval enclosure of the net Jacobian, shape (B, out, in)."""
    W = net.weights[-1]
    Jlo = np.broadcast_to(W, (batch,) + W.shape).copy()
    Jhi = Jlo.copy()
    for i in range(net.n_layers - 2, -1, -1):
        dlo, dhi = _tanh_deriv_interval(*acts[i])
        # scale columns by the (nonnegative) activation-derivative interval
        p1, p2 = Jlo * dlo[:, None, :], Jlo * dhi[:, None, :]
        q1, q2 = Jhi * dlo[:, None, :], Jhi * dhi[:, None, :]
        Jlo2 = np.minimum(p1, p2)
        Jhi2 = np.maximum(q1, q2)
        W = net.weights[i]
        c = 0.5 * (Jlo2 + Jhi2)
        r = 0.5 * (Jhi2 - Jlo2)
        Jc = c @ W
        Jr = r @ np.abs(W)
        Jlo, Jhi = Jc - Jr, Jc + Jr
    return Jlo, Jhi


def _imatmul(Alo, Ahi, Blo, Bhi):
    """Interval matrix product (batched), center-radius form."""
    Ac, Ar = 0.5 * (Alo + Ahi), 0.5 * (Ahi - Alo)
    Bc, Br = 0.5 * (Blo + Bhi), 0.5 * (Bhi - Blo)
    C = Ac @ Bc
    R = np.abs(Ac) @ Br + Ar @ np.abs(Bc) + Ar @ Br
    return C - R, C + R


def _idot(glo, ghi, plo, phi):
    """Interval dot product of row intervals (B, N) with (B, N)."""
    cands = np.stack([glo * plo, glo * phi, ghi * plo, ghi * phi])
    return cands.min(axis=0).sum(axis=1), cands.max(axis=0).sum(axis=1)


def _ipsi(A, zlo, zhi):
    """Exact matrix times interval vector."""
    c = 0.5 * (zlo + zhi)
    r = 0.5 * (zhi - zlo)
    pc = c @ A.T
    pr = r @ np.abs(A).T
    return pc - pr, pc + pr


# ---------------------------------------------------------------------------
# composite enclosures

def _enclose_h(encoder, cbf_net, lo, hi):
    """Enclosure of h(Phi(x)) over boxes, with mean-value refinement.

    Returns (hlo, hhi, zlo, zhi, z_acts) for reuse by the lie clause.
    """
    B = lo.shape[0]
    zlo, zhi, enc_acts = _iforward_full(encoder, lo, hi)
    hlo, hhi, h_acts = _iforward_full(cbf_net, zlo, zhi)
    # mean-value form around the box center
    Je_lo, Je_hi = _ijac(encoder, enc_acts, B)
    Jh_lo, Jh_hi = _ijac(cbf_net, h_acts, B)
    Jlo, Jhi = _imatmul(Jh_lo, Jh_hi, Je_lo, Je_hi)      # (B, 1, n)
    c = 0.5 * (lo + hi)
    r = 0.5 * (hi - lo)
    hc = netcore.forward(cbf_net, netcore.forward(encoder, c))
    slack = (np.maximum(np.abs(Jlo), np.abs(Jhi))[:, 0, :] * r).sum(axis=1)
    hlo = np.maximum(hlo[:, 0], hc[:, 0] - slack)
    hhi = np.minimum(hhi[:, 0], hc[:, 0] + slack)
    return hlo, hhi, zlo, zhi, h_acts


def interval_lie(model, encoder, cbf_net, box, u, lam):
    """Sound enclosure of grad_z h . psi(z, u) + lam*h over the box."""
    lo, hi = box.lo[None, :], box.hi[None, :]
    hlo, hhi, zlo, zhi, h_acts = _enclose_h(encoder, cbf_net, lo, hi)
    elo, ehi = _lie_interval_given_z(model, cbf_net, zlo, zhi, h_acts,
                                     hlo, hhi, np.atleast_1d(u), lam)
    return float(elo[0]), float(ehi[0])


def _lie_interval_given_z(model, cbf_net, zlo, zhi, h_acts, hlo, hhi, u, lam):
    A = model.drift_input_matrix(u, continuous=True)
    plo, phi = _ipsi(A, zlo, zhi)
    Jh_lo, Jh_hi = _ijac(cbf_net, h_acts, zlo.shape[0])
    dlo, dhi = _idot(Jh_lo[:, 0, :], Jh_hi[:, 0, :], plo, phi)
    return dlo + lam * hlo, dhi + lam * hhi


# ---------------------------------------------------------------------------
# exact point evaluation

def eval_h(encoder, cbf_net, x):
    out = netcore.forward(cbf_net, netcore.forward(encoder, np.asarray(x, dtype=float)))
    return float(out[0])


def eval_lie(model, encoder, cbf_net, x, u, lam):
    z = netcore.forward(encoder, np.asarray(x, dtype=float))
    grad_h = netcore.input_jacobian(cbf_net, z)[0]
    psi = model.drift_input_matrix(np.atleast_1d(u), continuous=True) @ z
    h = float(netcore.forward(cbf_net, z)[0])
    return float(grad_h @ psi + lam * h)


def violation_margin(clause, model, encoder, cbf_net, safety, x):
    """Concrete violation margin at a point (positive = real violation)."""
    if clause == "safe_sign":
        return -eval_h(encoder, cbf_net, x)
    if clause == "unsafe_sign":
        return eval_h(encoder, cbf_net, x)
    if clause == "lie":
        worst = min(safety.beta - eval_lie(model, encoder, cbf_net, x, u, safety.lam)
                    for u in safety.U_c)
        return worst
    raise ValueError(f"unknown clause {clause}")


# ---------------------------------------------------------------------------
# branch and prune

def _disk_dist2_interval(lo, hi, center):
    """Interval of (x-cx)^2 + (y-cy)^2 over the xy-projection of boxes."""
    dlo = lo[:, :2] - center
    dhi = hi[:, :2] - center
    sq_hi = np.maximum(dlo ** 2, dhi ** 2)
    sq_lo = np.where(dlo * dhi > 0, np.minimum(dlo ** 2, dhi ** 2), 0.0)
    return sq_lo.sum(axis=1), sq_hi.sum(axis=1)


class _ClauseSearch:
    """Best-first branch-and-prune for one violation family."""

    def __init__(self, clause, model, encoder, cbf_net, safety):
        self.clause = clause
        self.model = model
        self.encoder = encoder
        self.cbf_net = cbf_net
        self.safety = safety
        self.heap = []
        self.counter = 0
        self.explored = 0

    def push(self, lo, hi, priority):
        heapq.heappush(self.heap, (-priority, self.counter, lo, hi))
        self.counter += 1

    def initial_box(self):
        s = self.safety
        lo, hi = s.X[:, 0].copy(), s.X[:, 1].copy()
        if self.clause == "unsafe_sign":
            # only the obstacle's bounding box can contain a violation
            lo[:2] = np.maximum(lo[:2], s.obstacle_center - s.obstacle_radius)
            hi[:2] = np.minimum(hi[:2], s.obstacle_center + s.obstacle_radius)
            if np.any(lo > hi):
                return None
        return lo, hi

    def enclose(self, lo, hi):
        """Vectorized over a batch: returns (alive_mask, priority).

        priority is an upper bound on the violation margin; boxes with
        priority <= 0 are pruned as certified violation-free.
        """
        s = self.safety
        hlo, hhi, zlo, zhi, h_acts = _enclose_h(self.encoder, self.cbf_net, lo, hi)
        if self.clause == "safe_sign":
            d2lo, d2hi = _disk_dist2_interval(lo, hi, s.obstacle_center)
            inside_inflated = d2hi < (s.obstacle_radius + s.safe_margin) ** 2
            prio = -hlo
            prio[inside_inflated] = 0.0   # box disjoint from the safe set
            return prio > 0.0, prio
        if self.clause == "unsafe_sign":
            d2lo, d2hi = _disk_dist2_interval(lo, hi, s.obstacle_center)
            outside = d2lo > s.obstacle_radius ** 2
            # violation is h >= 0; a strictly-negative upper bound prunes
            alive = ~outside & (hhi >= 0.0)
            return alive, hhi
        # lie clause: violation iff E_u < beta for every u in U_c
        best_lo = np.full(lo.shape[0], -np.inf)
        margin_hi = np.full(lo.shape[0], np.inf)
        for u in s.U_c:
            elo, ehi = _lie_interval_given_z(self.model, self.cbf_net, zlo, zhi,
                                             h_acts, hlo, hhi, u, s.lam)
            best_lo = np.maximum(best_lo, elo)
            margin_hi = np.minimum(margin_hi, s.beta - elo)
        alive = best_lo < s.beta
        return alive, margin_hi

    def point_check(self, x):
        s = self.safety
        if self.clause == "safe_sign":
            d2 = np.sum((x[:2] - s.obstacle_center) ** 2)
            if d2 < (s.obstacle_radius + s.safe_margin) ** 2:
                return None
        elif self.clause == "unsafe_sign":
            d2 = np.sum((x[:2] - s.obstacle_center) ** 2)
            if d2 > s.obstacle_radius ** 2:
                return None
        m = violation_margin(self.clause, self.model, self.encoder,
                             self.cbf_net, s, x)
        if m > 0.0:
            return Counterexample(point=x.copy(), clause=self.clause, margin=m)
        return None

    def run(self, max_cex, max_boxes, batch=512):
        init = self.initial_box()
        found = []
        if init is None:
            return found
        lo0, hi0 = init
        alive, prio = self.enclose(lo0[None, :], hi0[None, :])
        if alive[0]:
            self.push(lo0, hi0, float(prio[0]))
        while self.heap and len(found) < max_cex:
            los, his = [], []
            while self.heap and len(los) < batch:
                _, _, lo, hi = heapq.heappop(self.heap)
                los.append(lo)
                his.append(hi)
            self.explored += len(los)
            if self.explored > max_boxes:
                raise ResourceError(
                    f"{self.clause}: box budget exceeded ({self.explored})")
            # point-check small boxes first (in pop order, deterministic)
            widths = np.array([np.max(h - l) for l, h in zip(los, his)])
            small = widths < self.safety.delta_box
            for i in np.nonzero(small)[0]:
                cex = self.point_check(0.5 * (los[i] + his[i]))
                if cex is not None:
                    found.append(cex)
                    if len(found) >= max_cex:
                        return found
            big = np.nonzero(~small)[0]
            if big.size == 0:
                continue
            # split the widest dimension of every surviving big box
            children_lo, children_hi = [], []
            for i in big:
                lo, hi = los[i], his[i]
                d = int(np.argmax(hi - lo))
                mid = 0.5 * (lo[d] + hi[d])
                l1, h1 = lo.copy(), hi.copy()
                h1[d] = mid
                l2, h2 = lo.copy(), hi.copy()
                l2[d] = mid
                children_lo.extend([l1, l2])
                children_hi.extend([h1, h2])
            clo = np.array(children_lo)
            chi = np.array(children_hi)
            alive, prio = self.enclose(clo, chi)
            for j in np.nonzero(alive)[0]:
                self.push(clo[j], chi[j], float(prio[j]))
        return found


def falsify(model, encoder, cbf_net, safety, max_cex_per_clause=4,
            max_boxes=int(1e7)):
    """Search all three violation families; Unsat iff none yields a point."""
    t0 = time.perf_counter()
    all_cex = []
    explored = {}
    for clause in ("safe_sign", "unsafe_sign", "lie"):
        search = _ClauseSearch(clause, model, encoder, cbf_net, safety)
        all_cex.extend(search.run(max_cex_per_clause, max_boxes))
        explored[clause] = search.explored
    status = "unsat" if not all_cex else "sat"
    return FalsifyResult(status=status, counterexamples=all_cex,
                         boxes_explored=explored,
                         wall_time=time.perf_counter() - t0)


def classify(cex, safety):
    """Turn a counterexample into dataset-append directives.

    Returns (kind, payload): kind "safe" with a state, "unsafe" with a
    state, or "interior" with a list of (state, input) pairs covering U_c.
    """
    x = np.asarray(cex.point, dtype=float)
    d2 = float(np.sum((x[:2] - safety.obstacle_center) ** 2))
    if cex.clause == "safe_sign":
        if d2 < (safety.obstacle_radius + safety.safe_margin) ** 2:
            raise ClassifyError("safe-sign counterexample inside inflated disk")
        return "safe", x
    if cex.clause == "unsafe_sign":
        if d2 > safety.obstacle_radius ** 2:
            raise ClassifyError("unsafe-sign counterexample outside disk")
        return "unsafe", x
    if cex.clause == "lie":
        return "interior", [(x.copy(), np.atleast_1d(u).copy()) for u in safety.U_c]
    raise ClassifyError(f"unknown clause {cex.clause}")
