"""Lifted bilinear model: encoder/decoder wrappers, EDMD fit, rollouts.

Discrete matrices (Kd, D_i) come from a ridge-regularized least-squares
fit on encoded snapshot pairs; the continuous generator (K, C_i) is
recovered algebraically as K = (Kd - I)/dt and C_i = D_i/dt.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import netcore


class FitError(RuntimeError):
    pass


class InstabilityError(RuntimeError):
    pass


@dataclass
class BilinearModel:
    N: int
    m: int
    Kd: np.ndarray       # (N, N) discrete drift
    D: list              # m matrices (N, N), discrete input coupling
    dt: float

    @property
    def K(self):
        return (self.Kd - np.eye(self.N)) / self.dt

    @property
    def C(self):
        return [Di / self.dt for Di in self.D]

    def drift_input_matrix(self, u, continuous=True):
        """K + sum_i u_i C_i (or the discrete Kd/D analogue)."""
        A = self.K.copy() if continuous else self.Kd.copy()
        mats = self.C if continuous else self.D
        for ui, Mi in zip(np.atleast_1d(u), mats):
            A += ui * Mi
        return A


def lift(encoder, x):
    return netcore.forward(encoder, x)


def decode(decoder, z):
    return netcore.forward(decoder, z)


def edmd_fit(z_now, u_now, z_next, ridge=1e-8):
    """Least-squares fit of z_next ~ Kd z + sum_i u_i D_i z.

    z_now/z_next are (P, N) encoded snapshot pairs (within-trajectory
    only), u_now is (P, m).  Solves the normal equations of the stacked
    regression with features (1, u) kron z, with a ridge term on the
    Gram matrix.  Returns (Kd, [D_1..D_m]).
    """
    z_now = np.asarray(z_now, dtype=float)
    z_next = np.asarray(z_next, dtype=float)
    u_now = np.asarray(u_now, dtype=float)
    if u_now.ndim == 1:
        u_now = u_now[:, None]
    P, N = z_now.shape
    m = u_now.shape[1]
    # features: columns of eta are (1, u_k) kron z_k -> rows [z; u_1 z; ...]
    feats = [z_now] + [u_now[:, [j]] * z_now for j in range(m)]
    eta = np.concatenate(feats, axis=1)                  # (P, N*(m+1))
    gram = eta.T @ eta
    if ridge > 0:
        gram = gram + ridge * np.eye(gram.shape[0])
    cross = eta.T @ z_next                               # (N*(m+1), N)
    try:
        sol = np.linalg.solve(gram, cross)
    except np.linalg.LinAlgError as e:
        raise FitError(f"rank-deficient snapshot matrix: {e}") from e
    if not np.all(np.isfinite(sol)):
        raise FitError("rank-deficient snapshot matrix (singular gram)")
    blocks = [sol[i * N:(i + 1) * N, :].T for i in range(m + 1)]
    return blocks[0], blocks[1:]


def psi_continuous(model, z, u):
    """Continuous-time lifted vector field K z + sum_i u_i C_i z."""
    return model.drift_input_matrix(u, continuous=True) @ np.asarray(z, dtype=float)


def bilinear_step(model, z, u):
    """One discrete step Kd z + sum_i u_i D_i z."""
    return model.drift_input_matrix(u, continuous=False) @ np.asarray(z, dtype=float)


def rollout(model, encoder, decoder, x0, input_sequence):
    """Roll the lifted model forward and decode every step.

    Returns (predicted_states, lifted_states); predicted_states has
    len(input_sequence)+1 rows.
    """
    z = lift(encoder, np.asarray(x0, dtype=float))
    zs = [z]
    for u in input_sequence:
        z = bilinear_step(model, z, u)
        if np.linalg.norm(z) > 1e6:
            raise InstabilityError("lifted state diverged during rollout")
        zs.append(z)
    zs = np.array(zs)
    xs = decode(decoder, zs)
    return xs, zs
