"""Ground-truth dynamics oracle, RK4 stepping and dataset generation.

The plant is treated as opaque everywhere else: learning code only ever
sees the Dataset produced here.  The differential-drive vehicle uses the
heading-from-north convention (xdot = r sin(theta), ydot = r cos(theta)).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


class ConfigError(ValueError):
    pass


class IntegrationError(RuntimeError):
    pass


@dataclass
class PlantModel:
    n: int
    m: int
    vector_field: object          # callable (x, u) -> xdot
    state_box: np.ndarray         # (n, 2) [lo, hi]
    input_box: np.ndarray         # (m, 2)
    lipschitz_K_F: float
    params: dict = field(default_factory=dict)


@dataclass
class Dataset:
    """Snapshot data plus the labeled point sets grown by CEGIS."""

    states: np.ndarray            # (Nd, n)
    inputs: np.ndarray            # (Nd, m)
    traj_ids: np.ndarray          # (Nd,) int
    step_idx: np.ndarray          # (Nd,) int
    dt: float
    labeled_safe: list = field(default_factory=list)      # states
    labeled_unsafe: list = field(default_factory=list)    # states
    labeled_interior: list = field(default_factory=list)  # (state, input)

    def __len__(self):
        return self.states.shape[0]

    def snapshot_pairs(self):
        """Indices (k, k+1) of consecutive snapshots within one trajectory."""
        idx = np.arange(len(self) - 1)
        ok = (self.traj_ids[:-1] == self.traj_ids[1:]) & \
             (self.step_idx[:-1] + 1 == self.step_idx[1:])
        return idx[ok], idx[ok] + 1


def diffdrive_field(x, u, r=0.1, L_w=0.1):
    """Differential-drive kinematics, heading measured from the +y axis."""
    theta = x[2]
    return np.array([r * np.sin(theta), r * np.cos(theta), (r / L_w) * u[0]])


def make_diffdrive(state_box, input_box, r=0.1, L_w=0.1, lipschitz_K_F=None):
    if lipschitz_K_F is None:
        # sup-norm Jacobian bound: d(xdot,ydot)/dtheta has norm r, dthetadot/du = r/L_w
        lipschitz_K_F = float(np.sqrt(r ** 2 + (r / L_w) ** 2))
    field_fn = lambda x, u: diffdrive_field(x, u, r=r, L_w=L_w)
    return PlantModel(n=3, m=1, vector_field=field_fn,
                      state_box=np.asarray(state_box, dtype=float),
                      input_box=np.asarray(input_box, dtype=float),
                      lipschitz_K_F=lipschitz_K_F,
                      params={"r": r, "L_w": L_w})


def rk4_step(plant, x, u, dt):
    """Classical RK4 with zero-order hold on u."""
    if dt <= 0:
        raise ConfigError("dt must be positive")
    f = plant.vector_field
    k1 = f(x, u)
    k2 = f(x + 0.5 * dt * k1, u)
    k3 = f(x + 0.5 * dt * k2, u)
    k4 = f(x + dt * k3, u)
    x_next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(x_next)):
        raise IntegrationError("non-finite state in RK4 step")
    return x_next


def _in_box(x, box):
    return bool(np.all(x >= box[:, 0]) and np.all(x <= box[:, 1]))


def generate_dataset(plant, n_traj, steps_per_traj, dt, init_sampler,
                     input_sampler, seed):
    """Roll out seeded trajectories; truncate any that leave the state box."""
    if n_traj < 1 or steps_per_traj < 1:
        raise ConfigError("trajectory counts must be >= 1")
    rng = np.random.default_rng(seed)
    states, inputs, tids, steps = [], [], [], []
    for t in range(n_traj):
        x = np.asarray(init_sampler(rng), dtype=float)
        if not _in_box(x, plant.state_box):
            raise ConfigError("initial sampler produced a state outside X")
        for k in range(steps_per_traj):
            u = np.atleast_1d(np.asarray(input_sampler(rng), dtype=float))
            states.append(x.copy())
            inputs.append(u.copy())
            tids.append(t)
            steps.append(k)
            x = rk4_step(plant, x, u, dt)
            if not _in_box(x, plant.state_box):
                break  # truncate rather than clip
    return Dataset(states=np.array(states), inputs=np.array(inputs),
                   traj_ids=np.array(tids, dtype=int),
                   step_idx=np.array(steps, dtype=int), dt=dt)


def save_dataset_csv(dataset, path):
    n = dataset.states.shape[1]
    m = dataset.inputs.shape[1]
    header = ["traj", "step"] + [f"x{i}" for i in range(n)] + \
             [f"u{i}" for i in range(m)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k in range(len(dataset)):
            row = [int(dataset.traj_ids[k]), int(dataset.step_idx[k])]
            row += [f"{v:.17g}" for v in dataset.states[k]]
            row += [f"{v:.17g}" for v in dataset.inputs[k]]
            w.writerow(row)


def load_dataset_csv(path, dt):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    n = sum(1 for h in header if h.startswith("x"))
    m = sum(1 for h in header if h.startswith("u"))
    states, inputs, tids, steps = [], [], [], []
    for row in rows[1:]:
        tids.append(int(row[0]))
        steps.append(int(row[1]))
        states.append([float(v) for v in row[2:2 + n]])
        inputs.append([float(v) for v in row[2 + n:2 + n + m]])
    tids = np.array(tids, dtype=int)
    steps = np.array(steps, dtype=int)
    same = tids[:-1] == tids[1:]
    if np.any(same & (steps[1:] != steps[:-1] + 1)):
        raise ConfigError("non-monotone step indices in dataset CSV")
    return Dataset(states=np.array(states), inputs=np.array(inputs),
                   traj_ids=tids, step_idx=steps, dt=dt)
