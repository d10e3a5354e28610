import numpy as np
import pytest

from koopcbf import falsifier, koopman, netcore


def linear_net(W, b=None):
    W = np.asarray(W, dtype=float)
    b = np.zeros(W.shape[0]) if b is None else np.asarray(b, dtype=float)
    return netcore.FeedforwardNet([W], [b])


def planted_instance(h_offset=0.35):
    """Hand-built instance where the barrier conditions provably hold.

    Narrow planar domain with the avoid disk poking in from the left.
    Encoder is the affine lift z = (x1, x2, 1); the barrier is the
    half-plane h = x1 + h_offset.  One candidate input drives the
    constant lifted direction (5, 0, 0), so the rate condition holds
    with a wide margin everywhere.
    """
    encoder = linear_net([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]], [0.0, 0.0, 1.0])
    cbf_net = linear_net([[1.0, 0.0, h_offset]])
    N = 3
    Kd = np.eye(N)
    C1 = np.array([[0.0, 0.0, 5.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    dt = 0.1
    model = koopman.BilinearModel(N=N, m=1, Kd=Kd, D=[C1 * dt], dt=dt)
    safety = falsifier.SafetySpec(
        X=np.array([[-1.0, 1.0], [-0.2, 0.2]]),
        obstacle_center=[-1.5, 0.0], obstacle_radius=1.0, safe_margin=0.2,
        U_c=np.array([[1.0], [-1.0]]), lam=1.0, beta=0.5,
        delta_sat=1e-3, delta_box=0.02)
    return encoder, cbf_net, model, safety


@pytest.fixture
def planted():
    return planted_instance()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
