"""Losses, training epochs and the learner/falsifier outer loop.

An epoch refits the bilinear matrices on the current encoder outputs,
then takes one full-batch descent step on the weighted total loss
(dynamics + reconstruction + barrier) with the matrices held fixed,
and finally re-normalizes the encoder spectrum.  The outer loop
alternates training with falsification, folding counterexamples back
into the labeled point sets until the falsifier returns Unsat or the
round budget runs out.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import falsifier as fals
from . import koopman, netcore


@dataclass
class LossWeights:
    dyn: float
    recons: float
    barr: float

    def __post_init__(self):
        if self.dyn < 0 or self.recons < 0 or self.barr < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.dyn == 0 and self.recons == 0 and self.barr == 0:
            raise ValueError("at least one loss weight must be positive")


@dataclass
class TrainState:
    encoder: netcore.FeedforwardNet
    decoder: netcore.FeedforwardNet
    cbf_net: netcore.FeedforwardNet
    model: koopman.BilinearModel
    dataset: object
    weights: LossWeights
    lam: float
    K_phi: float
    optimizer: netcore.OptimizerState
    sign_margin: float = 0.05   # hinge margin on the safe/unsafe sign terms
    lie_margin: float = 0.0     # hinge threshold on the rate term
    rate_weight: float = 1.0    # extra emphasis on the rate hinge family
    # Lipschitz cap for the barrier network; None leaves it free.  An
    # unconstrained barrier head learns gradients of norm ~100 in the
    # lifted space, which lets percent-level model error swing the rate
    # expression by more than the class-K term -- the filter then acts on
    # noise.  Capping the head keeps the certificate meaningful under the
    # identified model's error.
    cbf_lip: object = None
    # candidate input set for the rate term; when given, each interior
    # point is scored at its best candidate (the certificate clause is
    # existential in u), otherwise at the input stored with the point
    candidate_inputs: object = None
    ridge: float = 1e-8
    epoch: int = 0
    loss_history: list = field(default_factory=list)

    def all_params(self):
        return (self.encoder.params() + self.decoder.params()
                + self.cbf_net.params())


@dataclass
class CegisReport:
    rounds: int
    counterexamples_per_round: list
    final_status: str            # "Verified" | "MaxRoundsExceeded"
    loss_history: list


def _zeros_like_params(net):
    return ([np.zeros_like(W) for W in net.weights],
            [np.zeros_like(b) for b in net.biases])


def _acc(dst, src):
    for d, s in zip(dst, src):
        d += s


# ---------------------------------------------------------------------------
# loss evaluation (pure; used both for reporting and as gradient oracles)

def loss_dyn(state):
    """Squared prediction error of the discrete lifted model on all
    within-trajectory snapshot pairs."""
    ds = state.dataset
    i_now, i_next = ds.snapshot_pairs()
    if i_now.size == 0:
        return 0.0
    z = netcore.forward(state.encoder, ds.states)
    r = _dyn_residuals(state.model, z, ds.inputs, i_now, i_next)
    return float(np.sum(r ** 2))


def _dyn_residuals(model, z, inputs, i_now, i_next):
    z_now, u = z[i_now], inputs[i_now]
    pred = z_now @ model.Kd.T
    for j, Dj in enumerate(model.D):
        pred += u[:, [j]] * (z_now @ Dj.T)
    return z[i_next] - pred


def loss_recons(state):
    ds = state.dataset
    xhat = netcore.forward(state.decoder, netcore.forward(state.encoder, ds.states))
    return float(np.sum((ds.states - xhat) ** 2))


def _barrier_terms(state, margin=None, lie_margin=None):
    """Per-category hinge sums (safe, unsafe, interior) without weights."""
    ds = state.dataset
    m = state.sign_margin if margin is None else margin
    lm = state.lie_margin if lie_margin is None else lie_margin
    t_safe = t_unsafe = t_lie = 0.0
    if ds.labeled_safe:
        h = _h_of_x(state, np.array(ds.labeled_safe))
        t_safe = float(np.sum(np.maximum(0.0, m - h)))
    if ds.labeled_unsafe:
        h = _h_of_x(state, np.array(ds.labeled_unsafe))
        t_unsafe = float(np.sum(np.maximum(0.0, h + m)))
    if ds.labeled_interior:
        xs, us = _interior_points(state)
        E = _lie_values(state, xs, us)
        t_lie = float(np.sum(np.maximum(0.0, lm - E)))
    return t_safe, t_unsafe, t_lie


def _interior_points(state):
    """Interior states and the inputs the rate hinge is scored at."""
    xs = np.array([p for p, _ in state.dataset.labeled_interior])
    us = np.array([u for _, u in state.dataset.labeled_interior])
    if state.candidate_inputs is None:
        return xs, us
    cand = np.atleast_2d(np.asarray(state.candidate_inputs, dtype=float))
    E = np.stack([_lie_values(state, xs, np.tile(u, (len(xs), 1)))
                  for u in cand])
    return xs, cand[np.argmax(E, axis=0)]


def _h_of_x(state, xs):
    return netcore.forward(state.cbf_net, netcore.forward(state.encoder, xs))[:, 0]


def _lie_values(state, xs, us):
    """grad_z h . psi(z, u) + lam*h at labeled interior points."""
    z = netcore.forward(state.encoder, xs)
    v = _psi_batch(state.model, z, us)
    _, tang, _ = netcore.jvp(state.cbf_net, z, v)
    h = netcore.forward(state.cbf_net, z)[:, 0]
    return tang[:, 0] + state.lam * h


def _psi_batch(model, z, us):
    v = z @ model.K.T
    for j, Cj in enumerate(model.C):
        v += us[:, [j]] * (z @ Cj.T)
    return v


def loss_barr(state, safety=None):
    """Mean hinge violation over the three labeled categories.

    Each category is averaged over its own point count (the categories
    are grown independently by the falsifier, so their sizes differ).
    Reports the raw hinge values; the training step adds its margins on
    top of these.
    """
    ds = state.dataset
    t_safe, t_unsafe, t_lie = _barrier_terms(state, margin=0.0, lie_margin=0.0)
    total = 0.0
    if ds.labeled_safe:
        total += t_safe / len(ds.labeled_safe)
    if ds.labeled_unsafe:
        total += t_unsafe / len(ds.labeled_unsafe)
    if ds.labeled_interior:
        total += t_lie / len(ds.labeled_interior)
    return total


def total_loss(state):
    ld, lr, lb = loss_dyn(state), loss_recons(state), loss_barr(state)
    return (state.weights.dyn * ld + state.weights.recons * lr
            + state.weights.barr * lb, ld, lr, lb)


# ---------------------------------------------------------------------------
# gradients

def _loss_and_grads(state):
    """Total loss plus analytic gradients for all three networks."""
    ds = state.dataset
    w = state.weights
    enc, dec, cbf = state.encoder, state.decoder, state.cbf_net
    gW_enc, gb_enc = _zeros_like_params(enc)
    gW_dec, gb_dec = _zeros_like_params(dec)
    gW_cbf, gb_cbf = _zeros_like_params(cbf)

    # dynamics + reconstruction share the encoder pass over the snapshots
    z, enc_acts = netcore.forward_cached(enc, ds.states)
    G = np.zeros_like(z)  # upstream gradient at the encoder output

    i_now, i_next = ds.snapshot_pairs()
    ld = 0.0
    if i_now.size:
        r = _dyn_residuals(state.model, z, ds.inputs, i_now, i_next)
        ld = float(np.sum(r ** 2))
        back = r @ state.model.Kd
        for j, Dj in enumerate(state.model.D):
            back += ds.inputs[i_now][:, [j]] * (r @ Dj)
        np.add.at(G, i_next, w.dyn * 2.0 * r)
        np.add.at(G, i_now, -w.dyn * 2.0 * back)

    xhat, dec_acts = netcore.forward_cached(dec, z)
    e = ds.states - xhat
    lr = float(np.sum(e ** 2))
    dW, db, g_in = netcore.grad_params(dec, dec_acts, -w.recons * 2.0 * e)
    _acc(gW_dec, dW)
    _acc(gb_dec, db)
    G += g_in

    dW, db, _ = netcore.grad_params(enc, enc_acts, G)
    _acc(gW_enc, dW)
    _acc(gb_enc, db)

    # barrier terms
    lb = 0.0
    if ds.labeled_safe:
        lb += _sign_term_grads(state, np.array(ds.labeled_safe), +1.0,
                               gW_enc, gb_enc, gW_cbf, gb_cbf)
    if ds.labeled_unsafe:
        lb += _sign_term_grads(state, np.array(ds.labeled_unsafe), -1.0,
                               gW_enc, gb_enc, gW_cbf, gb_cbf)
    if ds.labeled_interior:
        lb += _lie_term_grads(state, gW_enc, gb_enc, gW_cbf, gb_cbf)

    total = w.dyn * ld + w.recons * lr + w.barr * lb
    grads = []
    for gw, gb in ((gW_enc, gb_enc), (gW_dec, gb_dec), (gW_cbf, gb_cbf)):
        for Wg, bg in zip(gw, gb):
            grads.append(Wg)
            grads.append(bg)
    return total, ld, lr, lb, grads


def _sign_term_grads(state, xs, sign, gW_enc, gb_enc, gW_cbf, gb_cbf):
    """Hinge max(0, m - sign*h) averaged over xs; accumulates gradients."""
    w3 = state.weights.barr / len(xs)
    z, enc_acts = netcore.forward_cached(state.encoder, xs)
    h, h_acts = netcore.forward_cached(state.cbf_net, z)
    viol = state.sign_margin - sign * h[:, 0]
    active = viol > 0.0
    term = float(np.sum(viol[active])) / len(xs)
    coeff = np.where(active, -sign * w3, 0.0)[:, None]
    dW, db, g_z = netcore.grad_params(state.cbf_net, h_acts, coeff)
    _acc(gW_cbf, dW)
    _acc(gb_cbf, db)
    dW, db, _ = netcore.grad_params(state.encoder, enc_acts, g_z)
    _acc(gW_enc, dW)
    _acc(gb_enc, db)
    return term


def _lie_term_grads(state, gW_enc, gb_enc, gW_cbf, gb_cbf):
    """Hinge max(0, lie_margin - E); exact gradients through the
    directional derivative (second-order in the barrier net)."""
    ds = state.dataset
    xs, us = _interior_points(state)
    w3 = state.weights.barr * state.rate_weight / len(xs)
    z, enc_acts = netcore.forward_cached(state.encoder, xs)
    v = _psi_batch(state.model, z, us)
    _, tang, cache = netcore.jvp(state.cbf_net, z, v)
    h_acts = cache[0]
    h = h_acts[-1]
    E = tang[:, 0] + state.lam * h[:, 0]
    viol = state.lie_margin - E
    active = viol > 0.0
    term = state.rate_weight * float(np.sum(viol[active])) / len(xs)
    coeff = np.where(active, -w3, 0.0)[:, None]
    # directional part: d/dtheta of grad_z h . v
    dW, db, g_z1, g_v = netcore.directional_grads(state.cbf_net, cache, coeff)
    _acc(gW_cbf, dW)
    _acc(gb_cbf, db)
    # lam*h part through the same primal activations
    dW, db, g_z2 = netcore.grad_params(state.cbf_net, h_acts, state.lam * coeff)
    _acc(gW_cbf, dW)
    _acc(gb_cbf, db)
    # chain the v = psi(z, u) dependence back into z
    g_z = g_z1 + g_z2 + g_v @ state.model.K
    for j, Cj in enumerate(state.model.C):
        g_z += us[:, [j]] * (g_v @ Cj)
    dW, db, _ = netcore.grad_params(state.encoder, enc_acts, g_z)
    _acc(gW_enc, dW)
    _acc(gb_enc, db)
    return term


# ---------------------------------------------------------------------------
# training loop

def refit_model(state):
    """EDMD refit of the bilinear matrices on current encoder outputs."""
    ds = state.dataset
    i_now, i_next = ds.snapshot_pairs()
    z = netcore.forward(state.encoder, ds.states)
    Kd, D = koopman.edmd_fit(z[i_now], ds.inputs[i_now], z[i_next],
                             ridge=state.ridge)
    state.model = koopman.BilinearModel(N=Kd.shape[0], m=len(D), Kd=Kd,
                                        D=D, dt=ds.dt)


def train_epoch(state, safety=None):
    """Refit matrices, one full-batch descent step, re-normalize encoder."""
    refit_model(state)
    total, ld, lr, lb, grads = _loss_and_grads(state)
    if not np.isfinite(total):
        raise RuntimeError(f"non-finite loss at epoch {state.epoch}: "
                           f"dyn={ld} recons={lr} barr={lb}")
    state.optimizer.step(state.all_params(), grads)
    netcore.spectral_normalize(state.encoder, state.K_phi)
    if state.cbf_lip is not None:
        netcore.spectral_normalize(state.cbf_net, state.cbf_lip)
    state.epoch += 1
    state.loss_history.append((total, ld, lr, lb))
    return total, ld, lr, lb


def train_until_plateau(state, safety=None, epoch_cap=2000,
                        plateau_window=50, plateau_tol=1e-4):
    """Run epochs until the relative loss change stalls or the cap hits."""
    start = len(state.loss_history)
    for _ in range(epoch_cap):
        train_epoch(state, safety)
        n = len(state.loss_history) - start
        if n > plateau_window:
            prev = state.loss_history[-1 - plateau_window][0]
            now = state.loss_history[-1][0]
            if abs(prev - now) < plateau_tol * max(abs(prev), 1e-12):
                break
    return state


def seed_labels(dataset, safety, n_safe, n_unsafe, n_interior, rng,
                unsafe_pad=0.0):
    """Initial labeled point sets sampled from the safety geometry.

    Half of the safe and interior points are concentrated in an annulus
    around the avoid disk; the barrier's level set lives there and uniform
    draws over X leave it badly undersampled.  ``unsafe_pad`` inflates the
    disk the negative-sign labels are drawn from: training against the
    padded disk keeps the zero level set clear of the true boundary, which
    the filter needs because the plant's turn radius is not zero.  The
    verifier still checks the sign conditions against the true geometry.
    """
    X = safety.X
    n = X.shape[0]
    ir = safety.obstacle_radius + safety.safe_margin
    c = safety.obstacle_center

    def draw(count, keep):
        out = []
        while len(out) < count:
            x = rng.uniform(X[:, 0], X[:, 1])
            if keep(x):
                out.append(x)
        return out

    def ring_point(r_lo, r_hi):
        while True:
            r = np.sqrt(rng.uniform(r_lo ** 2, r_hi ** 2))
            ang = rng.uniform(-np.pi, np.pi)
            x = rng.uniform(X[:, 0], X[:, 1])
            x[:2] = c + r * np.array([np.cos(ang), np.sin(ang)])
            if np.all(x[:2] >= X[:2, 0]) and np.all(x[:2] <= X[:2, 1]):
                return x

    def keep_safe(x):
        return np.sum((x[:2] - c) ** 2) >= ir ** 2

    dataset.labeled_safe.extend(draw(n_safe - n_safe // 2, keep_safe))
    for k in range(n_safe // 2):
        # alternate between the whole annulus and its inner edge, where the
        # sign clause is tightest
        r_hi = ir + (0.25 if k % 2 else 1.0)
        dataset.labeled_safe.append(ring_point(ir, r_hi))
    # sample the (padded) avoid disk through its bounding box for efficiency
    r_pad = safety.obstacle_radius + unsafe_pad
    bb = X.copy()
    bb[:2, 0] = np.maximum(bb[:2, 0], c - r_pad)
    bb[:2, 1] = np.minimum(bb[:2, 1], c + r_pad)

    def draw_unsafe(count):
        out = []
        while len(out) < count:
            x = rng.uniform(bb[:, 0], bb[:, 1])
            if np.sum((x[:2] - c) ** 2) <= r_pad ** 2:
                out.append(x)
        return out

    dataset.labeled_unsafe.extend(draw_unsafe(n_unsafe))
    for k in range(n_interior):
        if k % 2:
            x = ring_point(0.2 * safety.obstacle_radius, ir + 1.0)
        else:
            x = rng.uniform(X[:, 0], X[:, 1])
        u = safety.U_c[rng.integers(len(safety.U_c))]
        dataset.labeled_interior.append((x, np.atleast_1d(u).copy()))


def pretrain_barrier(state, safety, epochs=1500, n_points=2000, rng=None,
                     depth_cap=1.0):
    """Least-squares warm start of the barrier head on radial signed distance.

    Fits cbf_net(encoder(x)) to clip(dist(x) - r0, -cap, cap) with r0 just
    outside the avoid disk.  Only the avoid-region geometry enters -- no
    plant knowledge -- and only the barrier head is trained; the encoder
    stays at its initialization.  Starting the hinge phase from a steep,
    correctly-signed barrier avoids the flat local optima that random
    heads fall into.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    X = safety.X
    xs = rng.uniform(X[:, 0], X[:, 1], size=(n_points, X.shape[0]))
    # concentrate half the fit points around the avoid disk, where the
    # target has all its structure
    half = n_points // 2
    r_ring = np.sqrt(rng.uniform(0.0, (safety.obstacle_radius + 1.2) ** 2,
                                 size=half))
    ang = rng.uniform(-np.pi, np.pi, size=half)
    xs[:half, 0] = np.clip(safety.obstacle_center[0] + r_ring * np.cos(ang),
                           X[0, 0], X[0, 1])
    xs[:half, 1] = np.clip(safety.obstacle_center[1] + r_ring * np.sin(ang),
                           X[1, 0], X[1, 1])
    d = np.hypot(*(xs[:, :2] - safety.obstacle_center).T)
    r0 = safety.obstacle_radius + 0.5 * safety.safe_margin
    target = np.clip(d - r0, -depth_cap, depth_cap)[:, None]
    opt = netcore.OptimizerState(lr=state.optimizer.lr)
    params = state.encoder.params() + state.cbf_net.params()
    for _ in range(epochs):
        z, enc_acts = netcore.forward_cached(state.encoder, xs)
        h, acts = netcore.forward_cached(state.cbf_net, z)
        e = h - target
        dW, db, g_z = netcore.grad_params(state.cbf_net, acts,
                                          2.0 * e / n_points)
        dWe, dbe, _ = netcore.grad_params(state.encoder, enc_acts, g_z)
        grads = []
        for Wg, bg in zip(dWe, dbe):
            grads.append(Wg)
            grads.append(bg)
        for Wg, bg in zip(dW, db):
            grads.append(Wg)
            grads.append(bg)
        opt.step(params, grads)
        netcore.spectral_normalize(state.encoder, state.K_phi)
    z = netcore.forward(state.encoder, xs)
    return float(np.mean((netcore.forward(state.cbf_net, z) - target) ** 2))


def _jitter_in_region(x, keep, rng, count=10, scale=0.08):
    """Gaussian neighbors of a counterexample, rejected against its region.

    A single folded point carries almost no weight under per-category mean
    normalization; a small local cloud makes the round actually move the
    network there instead of re-finding the same violation next round.
    """
    out = []
    tries = 0
    while len(out) < count and tries < 50 * count:
        y = x + rng.normal(scale=scale, size=x.shape)
        tries += 1
        if keep(y):
            out.append(y)
    return out


def cegis(state, safety, falsifier_cfg=None, max_rounds=10, epoch_cap=2000,
          interior_resample=0, rng=None, log=None):
    """Alternate training and falsification until Unsat or round budget."""
    if max_rounds < 1:
        raise ValueError("max_rounds must be >= 1")
    cfg = dict(max_cex_per_clause=4, max_boxes=int(1e7))
    cfg.update(falsifier_cfg or {})
    rng = rng if rng is not None else np.random.default_rng(0)
    cex_per_round = []
    status = "MaxRoundsExceeded"
    for rnd in range(max_rounds):
        if interior_resample and rnd > 0:
            for _ in range(interior_resample):
                x = rng.uniform(safety.X[:, 0], safety.X[:, 1])
                u = safety.U_c[rng.integers(len(safety.U_c))]
                state.dataset.labeled_interior.append((x, np.atleast_1d(u).copy()))
        train_until_plateau(state, safety, epoch_cap=epoch_cap)
        result = fals.falsify(state.model, state.encoder, state.cbf_net,
                              safety, **cfg)
        cex_per_round.append(result.counterexamples)
        if log is not None:
            log(rnd, state, result)
        if result.status == "unsat":
            status = "Verified"
            break
        X = safety.X
        c = safety.obstacle_center
        ir = safety.obstacle_radius + safety.safe_margin

        def in_X(y):
            return bool(np.all(y >= X[:, 0]) and np.all(y <= X[:, 1]))

        for cex in result.counterexamples:
            kind, payload = fals.classify(cex, safety)
            if kind == "safe":
                keep = lambda y: in_X(y) and np.sum((y[:2] - c) ** 2) >= ir ** 2
                state.dataset.labeled_safe.append(payload)
                state.dataset.labeled_safe.extend(
                    _jitter_in_region(payload, keep, rng))
            elif kind == "unsafe":
                keep = lambda y: (in_X(y) and np.sum((y[:2] - c) ** 2)
                                  <= safety.obstacle_radius ** 2)
                state.dataset.labeled_unsafe.append(payload)
                state.dataset.labeled_unsafe.extend(
                    _jitter_in_region(payload, keep, rng))
            else:
                state.dataset.labeled_interior.extend(payload)
                for xj in _jitter_in_region(payload[0][0], in_X, rng, count=2):
                    for u in safety.U_c:
                        state.dataset.labeled_interior.append(
                            (xj, np.atleast_1d(u).copy()))
    return CegisReport(rounds=len(cex_per_round),
                       counterexamples_per_round=cex_per_round,
                       final_status=status,
                       loss_history=list(state.loss_history))
