"""Safety filtering: CBF-QP over the lifted bilinear model, the nominal
heading controller, the certified-rate constant beta, and closed-loop
rollouts against the opaque plant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import koopman, netcore, plant as plant_mod


class ConfigError(ValueError):
    pass


class InfeasibleError(RuntimeError):
    def __init__(self, msg, margin, fallback_u):
        super().__init__(msg)
        self.margin = margin
        self.fallback_u = fallback_u


class DomainExitError(RuntimeError):
    def __init__(self, msg, trajectory):
        super().__init__(msg)
        self.trajectory = trajectory


def alpha(y, lam):
    """Linear class-K-infinity rate function lam*y."""
    if lam <= 0:
        raise ConfigError("lam must be positive")
    return lam * y


@dataclass
class BetaInputs:
    K_phi: float      # encoder Lipschitz bound
    K_F: float        # plant Lipschitz constant
    K_psi: float      # lifted vector field Lipschitz bound
    delta_fill: float # fill distance of the dataset in X x U
    tau: float        # max data-point norm
    mu: float         # max lifted-model mismatch on data
    M: float          # bound on the barrier gradient norm


def compute_beta(inputs, headroom=0.01):
    """Certified-rate constant from the model-mismatch bound, with headroom."""
    b = inputs.M * (inputs.K_phi * inputs.K_F * inputs.delta_fill
                    + 2.0 * inputs.K_phi * inputs.K_F * inputs.tau
                    + inputs.mu + inputs.K_psi * inputs.delta_fill)
    return b * (1.0 + headroom)


def estimate_beta_inputs(encoder, cbf_net, model, dataset, K_phi, K_F,
                         X, U, sample_count=2000, seed=0):
    """Measure the constants feeding compute_beta from a trained instance.

    mu uses the finite-difference surrogate (z_{k+1}-z_k)/dt in place of
    the exact lifted flow derivative, which carries O(dt) error.
    """
    if len(dataset) == 0:
        raise ConfigError("empty dataset")
    rng = np.random.default_rng(seed)
    # M: product of barrier-net layer spectral norms
    M = 1.0
    for W in cbf_net.weights:
        M *= netcore.spectral_norm(W)
    # tau: largest stacked (x, u) norm over the data
    xu = np.concatenate([dataset.states, dataset.inputs], axis=1)
    tau = float(np.max(np.linalg.norm(xu, axis=1)))
    # mu surrogate over within-trajectory snapshot pairs
    i_now, i_next = dataset.snapshot_pairs()
    z = netcore.forward(encoder, dataset.states)
    mu = 0.0
    for k_now, k_next in zip(i_now, i_next):
        zdot_fd = (z[k_next] - z[k_now]) / dataset.dt
        psi = koopman.psi_continuous(model, z[k_now], dataset.inputs[k_now])
        mu = max(mu, float(np.linalg.norm(zdot_fd - psi)))
    # fill distance: worst nearest-data distance over uniform draws in X x U
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    draws_x = rng.uniform(X[:, 0], X[:, 1], size=(sample_count, X.shape[0]))
    draws_u = rng.uniform(U[:, 0], U[:, 1], size=(sample_count, U.shape[0]))
    draws = np.concatenate([draws_x, draws_u], axis=1)
    delta_fill = 0.0
    chunk = 256
    for i in range(0, sample_count, chunk):
        d = np.linalg.norm(draws[i:i + chunk, None, :] - xu[None, :, :], axis=2)
        delta_fill = max(delta_fill, float(np.max(d.min(axis=1))))
    # K_psi bound from model matrix norms and sampled lifted-state radius
    u_hat = np.max(np.abs(U), axis=1)
    z_hat = float(np.max(np.linalg.norm(z, axis=1)))
    Cn = [np.linalg.norm(Ci, 2) for Ci in model.C]
    K_psi = (np.linalg.norm(model.K, 2) + float(np.dot(u_hat, Cn))) * K_phi \
        + z_hat * float(np.sqrt(np.sum(np.square(Cn))))
    return BetaInputs(K_phi=K_phi, K_F=K_F, K_psi=float(K_psi),
                      delta_fill=delta_fill, tau=tau, mu=mu, M=float(M))


def nominal_controller(x, goal, gain, input_box):
    """Proportional heading regulator toward the goal, clipped to U.

    Heading is measured from the +y axis, matching the plant convention.
    """
    bearing = np.arctan2(goal[0] - x[0], goal[1] - x[1])
    err = bearing - x[2]
    err = (err + np.pi) % (2.0 * np.pi) - np.pi
    u = np.atleast_1d(gain * err)
    return np.clip(u, input_box[:, 0], input_box[:, 1])


@dataclass
class QpProblem:
    u_nom: np.ndarray   # (m,)
    a: np.ndarray       # (m,) constraint row: a.u + b >= 0
    b: float
    U: np.ndarray       # (m, 2) box


def cbf_qp(qp):
    """Exact minimizer of ||u - u_nom||^2 over {u in U : a.u + b >= 0}.

    The KKT solution has the form clip(u_nom + t*a) with t >= 0 the
    half-space multiplier; a.clip(u_nom + t*a) is nondecreasing in t, so
    a bisection on t is exact up to machine precision.
    """
    a = np.asarray(qp.a, dtype=float)
    b = float(qp.b)
    lo, hi = qp.U[:, 0], qp.U[:, 1]
    u0 = np.clip(qp.u_nom, lo, hi)
    if a @ u0 + b >= 0.0:
        return u0
    # best achievable constraint value over the box
    u_best = np.where(a >= 0, hi, lo)
    best_val = a @ u_best + b
    if best_val < 0.0:
        raise InfeasibleError("CBF-QP infeasible", margin=best_val,
                              fallback_u=u_best)
    g = lambda t: a @ np.clip(qp.u_nom + t * a, lo, hi) + b
    t_hi = 1.0
    while g(t_hi) < 0.0:
        t_hi *= 2.0
        if t_hi > 1e12:
            return u_best
    t_lo = 0.0
    for _ in range(200):
        t_mid = 0.5 * (t_lo + t_hi)
        if g(t_mid) >= 0.0:
            t_hi = t_mid
        else:
            t_lo = t_mid
    return np.clip(qp.u_nom + t_hi * a, lo, hi)


def build_qp(model, encoder, cbf_net, x, u_nom, lam, input_box):
    """Assemble the lifted CBF constraint a.u + b >= 0 at a state."""
    z = netcore.forward(encoder, x)
    grad_h = netcore.input_jacobian(cbf_net, z)[0]
    h = float(netcore.forward(cbf_net, z)[0])
    a = np.array([float(grad_h @ (Ci @ z)) for Ci in model.C])
    b = float(grad_h @ (model.K @ z)) + alpha(h, lam)
    return QpProblem(u_nom=np.atleast_1d(u_nom), a=a, b=b,
                     U=np.asarray(input_box, dtype=float)), z, h, grad_h


@dataclass
class Trajectory:
    states: np.ndarray
    inputs: np.ndarray
    h_values: np.ndarray
    margins: np.ndarray     # lifted constraint value at the applied input
    qp_status: list         # "ok" | "infeasible" per step
    reached_goal: bool


def safe_rollout(plant, model, encoder, cbf_net, safety, x_init, goal,
                 max_steps, dt, nominal_gain=2.0, tol_goal=0.1):
    """Closed-loop run of the QP filter against the true plant."""
    x = np.asarray(x_init, dtype=float).copy()
    goal = np.asarray(goal, dtype=float)
    states, inputs, hvals, margins, status = [x.copy()], [], [], [], []
    reached = False
    for _ in range(max_steps):
        if np.linalg.norm(x[:2] - goal[:2]) < tol_goal:
            reached = True
            break
        u_nom = nominal_controller(x, goal, nominal_gain, plant.input_box)
        qp, z, h, grad_h = build_qp(model, encoder, cbf_net, x, u_nom,
                                    safety.lam, plant.input_box)
        try:
            u = cbf_qp(qp)
            status.append("ok")
        except InfeasibleError as e:
            u = e.fallback_u
            status.append("infeasible")
        margins.append(float(qp.a @ u + qp.b))
        hvals.append(h)
        inputs.append(u.copy())
        x = plant_mod.rk4_step(plant, x, u, dt)
        states.append(x.copy())
        if not (np.all(x >= plant.state_box[:, 0])
                and np.all(x <= plant.state_box[:, 1])):
            traj = Trajectory(np.array(states), np.array(inputs),
                              np.array(hvals), np.array(margins), status, False)
            raise DomainExitError("state left X during rollout", traj)
    return Trajectory(np.array(states),
                      np.array(inputs) if inputs else np.zeros((0, plant.m)),
                      np.array(hvals), np.array(margins), status, reached)
