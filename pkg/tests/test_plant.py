import numpy as np
import pytest

from koopcbf import plant


BOX = np.array([[-5.0, 5.0], [-5.0, 5.0], [-np.pi, np.pi]])
UBOX = np.array([[-1.0, 1.0]])


def diffdrive():
    return plant.make_diffdrive(BOX, UBOX, r=0.1, L_w=0.1)


# ---------------------------------------------------------------- field

def test_field_at_origin():
    xdot = plant.diffdrive_field(np.zeros(3), np.zeros(1))
    assert np.allclose(xdot, [0.0, 0.1, 0.0])


def test_field_heading_east():
    xdot = plant.diffdrive_field(np.array([0.0, 0.0, np.pi / 2]), np.zeros(1))
    assert xdot[0] == pytest.approx(0.1)
    assert xdot[1] == pytest.approx(0.0, abs=1e-15)


def test_field_turn_rate():
    xdot = plant.diffdrive_field(np.zeros(3), np.array([1.0]))
    assert xdot[2] == pytest.approx(1.0)   # r/L_w = 1


# ---------------------------------------------------------------- rk4

def test_rk4_constant_field():
    p = diffdrive()
    x1 = plant.rk4_step(p, np.zeros(3), np.zeros(1), 0.01)
    assert np.allclose(x1, [0.0, 0.001, 0.0], atol=1e-15)


def test_rk4_circular_arc():
    # closed form with omega=1: theta(t)=t, x(t)=0.1*(1-cos t), y=0.1 sin t
    p = diffdrive()
    x1 = plant.rk4_step(p, np.zeros(3), np.array([1.0]), 0.1)
    assert x1[2] == pytest.approx(0.1, abs=1e-12)
    assert x1[0] == pytest.approx(0.1 * (1 - np.cos(0.1)), abs=1e-9)
    assert x1[1] == pytest.approx(0.1 * np.sin(0.1), abs=1e-9)


def test_rk4_linear_decay():
    p = plant.PlantModel(n=1, m=1, vector_field=lambda x, u: -x,
                         state_box=np.array([[-2.0, 2.0]]),
                         input_box=UBOX, lipschitz_K_F=1.0)
    x1 = plant.rk4_step(p, np.array([1.0]), np.zeros(1), 0.1)
    assert x1[0] == pytest.approx(np.exp(-0.1), abs=1e-7)


def test_rk4_order_on_linear_system():
    A = np.array([[0.0, 1.0], [-2.0, -0.3]])
    p = plant.PlantModel(n=2, m=0, vector_field=lambda x, u: A @ x,
                         state_box=np.array([[-10, 10], [-10, 10]]),
                         input_box=np.zeros((0, 2)), lipschitz_K_F=2.0)
    from scipy.linalg import expm
    x0 = np.array([1.0, 0.5])

    def err(dt):
        exact = expm(A * dt) @ x0
        return np.linalg.norm(plant.rk4_step(p, x0, np.zeros(0), dt) - exact)

    ratio = err(0.2) / err(0.1)
    assert 20.0 < ratio < 45.0   # ~2^5 for a 4th-order one-step error


def test_rk4_bad_dt():
    with pytest.raises(plant.ConfigError):
        plant.rk4_step(diffdrive(), np.zeros(3), np.zeros(1), 0.0)


# ---------------------------------------------------------------- dataset

def make_dataset(seed=0, n_traj=1, steps=5):
    p = diffdrive()
    init = lambda rng: rng.uniform([-3.5, -3.5, -0.5], [-1.5, -1.5, 0.5])
    inp = lambda rng: rng.uniform(-1, 1, size=1)
    return plant.generate_dataset(p, n_traj, steps, 0.1, init, inp, seed)


def test_dataset_bookkeeping():
    ds = make_dataset()
    assert len(ds) == 5
    assert np.all(ds.traj_ids == 0)
    assert np.all(ds.step_idx == np.arange(5))


def test_dataset_deterministic():
    a, b = make_dataset(seed=7), make_dataset(seed=7)
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.inputs, b.inputs)


def test_dataset_states_in_box():
    ds = make_dataset(seed=3, n_traj=20, steps=50)
    assert np.all(ds.states[:, 1] >= -5.0) and np.all(ds.states[:, 1] <= 5.0)


def test_dataset_resimulation_consistency():
    p = diffdrive()
    ds = make_dataset(seed=5, n_traj=3, steps=20)
    i_now, i_next = ds.snapshot_pairs()
    for k_now, k_next in zip(i_now[:20], i_next[:20]):
        x1 = plant.rk4_step(p, ds.states[k_now], ds.inputs[k_now], ds.dt)
        assert np.array_equal(x1, ds.states[k_next])


def test_dataset_init_outside_box():
    p = diffdrive()
    init = lambda rng: np.array([10.0, 0.0, 0.0])
    with pytest.raises(plant.ConfigError):
        plant.generate_dataset(p, 1, 2, 0.1, init, lambda rng: np.zeros(1), 0)


def test_dataset_csv_roundtrip(tmp_path):
    ds = make_dataset(seed=9, n_traj=3, steps=7)
    path = tmp_path / "d.csv"
    plant.save_dataset_csv(ds, path)
    ds2 = plant.load_dataset_csv(path, ds.dt)
    assert np.array_equal(ds.states, ds2.states)
    assert np.array_equal(ds.inputs, ds2.inputs)
    assert np.array_equal(ds.traj_ids, ds2.traj_ids)
