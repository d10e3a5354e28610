"""Acceptance gate: one test per shipped guarantee, pinned tolerances.

Each test prints a single PASS line on success (run with -s or check the
verbose test report); a failure means the corresponding guarantee does
not hold on this machine.
"""

import json
import time

import numpy as np
import pytest

from koopcbf import cbf_train as ct, cli, falsifier as fl, koopman as km, \
    netcore as nc, plant as pl, safectrl as sc

from conftest import linear_net, planted_instance


def _rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.abs(b), 1e-6)


# criterion 1 ----------------------------------------------------------------

def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    worst = 0.0
    eps = 1e-6
    for _ in range(100):
        dims = [int(rng.integers(1, 5)) for _ in range(rng.integers(2, 4))]
        dims = [int(rng.integers(2, 5))] + dims + [int(rng.integers(1, 4))]
        net = nc.init_net(dims, rng)
        x = rng.standard_normal(dims[0])
        out_grad = rng.standard_normal((1, dims[-1]))

        # parameter gradients of out_grad . f(x)
        _, acts = nc.forward_cached(net, x[None, :])
        dW, db, _ = nc.grad_params(net, acts, out_grad)
        params = net.params()
        grads = []
        for Wg, bg in zip(dW, db):
            grads.append(Wg)
            grads.append(bg)
        for p, g in zip(params, grads):
            fp, fg = p.reshape(-1), g.reshape(-1)
            for i in rng.choice(fp.size, size=min(3, fp.size), replace=False):
                old = fp[i]
                fp[i] = old + eps
                up = float(out_grad[0] @ nc.forward(net, x))
                fp[i] = old - eps
                dn = float(out_grad[0] @ nc.forward(net, x))
                fp[i] = old
                worst = max(worst, _rel_err(fg[i], (up - dn) / (2 * eps)))

        # input Jacobian
        J = nc.input_jacobian(net, x)
        for i in range(dims[0]):
            xp, xm = x.copy(), x.copy()
            xp[i] += eps
            xm[i] -= eps
            fd = (nc.forward(net, xp) - nc.forward(net, xm)) / (2 * eps)
            worst = max(worst, float(np.max(_rel_err(J[:, i], fd))))
    elapsed = time.perf_counter() - t0
    assert worst < 1e-5, f"max gradient rel. error {worst:.3e}"
    assert elapsed < 10.0, f"gradient suite took {elapsed:.1f}s"
    print(f"\nACCEPTANCE 1 PASS gradient suite: max rel err {worst:.2e}, "
          f"{elapsed:.1f}s")


# criterion 2 ----------------------------------------------------------------

def test_criterion_2_spectral_normalization():
    rng = np.random.default_rng(22)
    for K_phi in (0.5, 1.0, 4.0):
        net = nc.init_net([3, 16, 16, 5], rng)
        nc.spectral_normalize(net, K_phi)
        target = K_phi ** (1.0 / net.n_layers)
        for W in net.weights:
            assert abs(nc.spectral_norm(W) - target) < 1e-6
        xa = rng.uniform(-2, 2, size=(1000, 3))
        xb = xa + rng.normal(scale=0.5, size=(1000, 3))
        num = np.linalg.norm(nc.forward(net, xa) - nc.forward(net, xb), axis=1)
        den = np.linalg.norm(xa - xb, axis=1)
        assert np.all(num <= K_phi * 1.001 * den)
    print("\nACCEPTANCE 2 PASS spectral normalization: per-layer sigma and "
          "empirical Lipschitz within bounds for K in {0.5, 1, 4}")


# criterion 3 ----------------------------------------------------------------

def test_criterion_3_edmd_exactness():
    # x1' = mu*x1, x2' = lc*(x2 - x1^2) + x2*u, lifting (x1, x2, x1^2);
    # the Euler-discretized system is exactly bilinear in this lifting
    t0 = time.perf_counter()
    mu, lc, dt = -0.3, -0.8, 0.01
    rng = np.random.default_rng(33)

    def euler_step(x, u):
        return np.array([x[0] + dt * mu * x[0],
                         x[1] + dt * (lc * (x[1] - x[0] ** 2) + x[1] * u)])

    lift = lambda x: np.array([x[0], x[1], x[0] ** 2])
    z_now, u_now, z_next = [], [], []
    for _ in range(40):
        x = rng.uniform(-1, 1, 2)
        for _ in range(25):
            u = float(rng.uniform(-1, 1))
            xn = euler_step(x, u)
            z_now.append(lift(x))
            u_now.append([u])
            z_next.append(lift(xn))
            x = xn
    Kd, D = km.edmd_fit(np.array(z_now), np.array(u_now), np.array(z_next))

    a = 1 + dt * mu
    Kd_true = np.array([[a, 0, 0],
                        [0, 1 + dt * lc, -dt * lc],
                        [0, 0, a * a]])
    D_true = np.zeros((3, 3))
    D_true[1, 1] = dt
    err = np.linalg.norm(Kd - Kd_true) + np.linalg.norm(D[0] - D_true)
    assert err < 1e-6, f"EDMD recovery error {err:.3e}"

    # 20-step rollout against the simulator
    model = km.BilinearModel(N=3, m=1, Kd=Kd, D=D, dt=dt)
    x = np.array([0.7, -0.4])
    us = rng.uniform(-1, 1, size=(20, 1))
    z = lift(x)
    worst = 0.0
    for u in us:
        z = km.bilinear_step(model, z, u)
        x = euler_step(x, float(u[0]))
        worst = max(worst, float(np.max(np.abs(z[:2] - x))))
    elapsed = time.perf_counter() - t0
    assert worst < 1e-5, f"rollout error {worst:.3e}"
    assert elapsed < 30.0
    print(f"\nACCEPTANCE 3 PASS EDMD exactness: matrix err {err:.2e}, "
          f"20-step rollout err {worst:.2e}")


# criterion 4 ----------------------------------------------------------------

def _grid_best(qp, pts=201):
    grids = [np.linspace(lo, hi, pts) for lo, hi in qp.U]
    mesh = np.stack(np.meshgrid(*grids, indexing="ij"),
                    axis=-1).reshape(-1, len(qp.U))
    feas = mesh @ qp.a + qp.b >= -1e-9
    if not feas.any():
        return None
    cand = mesh[feas]
    return float(np.min(np.sum((cand - qp.u_nom) ** 2, axis=1)))


def test_criterion_4_qp_oracle():
    rng = np.random.default_rng(44)
    checked = 0
    for k in range(1000):
        m = 1 + k % 2
        qp = sc.QpProblem(u_nom=rng.uniform(-1.5, 1.5, m),
                          a=rng.standard_normal(m),
                          b=float(rng.uniform(-1.5, 1.5)),
                          U=np.tile([-1.0, 1.0], (m, 1)))
        try:
            u = sc.cbf_qp(qp)
        except sc.InfeasibleError:
            # best box corner must itself be infeasible
            u_best = np.where(qp.a >= 0, qp.U[:, 1], qp.U[:, 0])
            assert qp.a @ u_best + qp.b < 0
            continue
        assert qp.a @ u + qp.b >= -1e-9, "feasibility violation"
        ref = _grid_best(qp)
        assert ref is not None
        cost = float(np.sum((u - qp.u_nom) ** 2))
        assert cost <= ref + 1e-4, f"objective gap {cost - ref:.3e}"
        checked += 1
    assert checked > 700
    print(f"\nACCEPTANCE 4 PASS QP oracle: {checked} feasible instances "
          "within 1e-4 of grid optimum, no feasibility violation > 1e-9")


# criterion 5 ----------------------------------------------------------------

def test_criterion_5_falsifier_soundness():
    enc, cbf, model, safety = planted_instance()
    rng = np.random.default_rng(55)

    # (a) corrupted instances always yield true counterexamples
    for trial in range(100):
        shift = (0.4 + rng.uniform(0, 0.5)) * (1 if trial % 2 else -1)
        bad = nc.FeedforwardNet(
            [cbf.weights[0] + 0.05 * rng.standard_normal((1, 3))],
            [cbf.biases[0] + shift])
        result = fl.falsify(model, enc, bad, safety)
        assert result.status == "sat", f"trial {trial}: no counterexample"
        for c in result.counterexamples:
            m = fl.violation_margin(c.clause, model, enc, bad, safety, c.point)
            assert m > 0.0, f"trial {trial}: non-violating counterexample"

    # (b) planted analytically-valid instance is certified
    result = fl.falsify(model, enc, cbf, safety)
    assert result.status == "unsat"

    # (c) stability under box-width refinement
    for db in (0.1, 0.05, 0.01):
        safety.delta_box = db
        assert fl.falsify(model, enc, cbf, safety).status == "unsat"
    print("\nACCEPTANCE 5 PASS falsifier: 100/100 corrupted instances "
          "falsified with positive margins; planted instance Unsat, stable "
          "under refinement 0.1 -> 0.01")


# criterion 6 ----------------------------------------------------------------

def test_criterion_6_end_to_end(tmp_path):
    t0 = time.perf_counter()
    cfg = cli.ExperimentConfig().validate()
    summary = cli.run_experiment(cfg, str(tmp_path / "exp"))
    elapsed = time.perf_counter() - t0
    roll = summary["rollouts"]
    assert roll["n_rollouts"] == 50
    min_dist = float(roll["min_obstacle_distance"])
    assert min_dist >= 1.0, f"min obstacle distance {min_dist:.4f}"
    assert roll["goal_reached"] >= 45, f"goal reached {roll['goal_reached']}/50"
    margin = float(roll["min_constraint_margin"])
    assert margin >= -1e-9, f"constraint margin {margin:.3e} at accepted step"
    assert elapsed < 1800.0, f"end-to-end run took {elapsed:.0f}s"
    print(f"\nACCEPTANCE 6 PASS end-to-end: min obstacle dist {min_dist:.3f}, "
          f"goal {roll['goal_reached']}/50, margin {margin:.2e}, "
          f"{elapsed:.0f}s")


# criterion 7 ----------------------------------------------------------------

def test_criterion_7_monte_carlo_shadow(planted):
    enc, cbf, model, safety = planted
    ds = pl.Dataset(states=np.zeros((1, 2)), inputs=np.zeros((1, 1)),
                    traj_ids=np.array([0]), step_idx=np.array([0]), dt=0.1)
    st = ct.TrainState(encoder=enc, decoder=linear_net(np.eye(3)[:2]),
                       cbf_net=cbf, model=model, dataset=ds,
                       weights=ct.LossWeights(1, 1, 1), lam=safety.lam,
                       K_phi=4.0, optimizer=nc.OptimizerState())
    report = ct.cegis(st, safety, epoch_cap=0, max_rounds=3)
    assert report.final_status == "Verified"

    rng = np.random.default_rng(77)
    xs = rng.uniform(safety.X[:, 0], safety.X[:, 1], size=(100_000, 2))
    z = nc.forward(enc, xs)
    h = nc.forward(cbf, z)[:, 0]
    d2 = np.sum((xs - safety.obstacle_center) ** 2, axis=1)
    in_safe = d2 >= (safety.obstacle_radius + safety.safe_margin) ** 2
    in_unsafe = d2 <= safety.obstacle_radius ** 2
    worst = max(
        float(np.max(-h[in_safe], initial=-np.inf)),
        float(np.max(h[in_unsafe], initial=-np.inf)))
    best_E = np.full(len(xs), -np.inf)
    for u in safety.U_c:
        v = z @ model.K.T + u[0] * (z @ model.C[0].T)
        _, tang, _ = nc.jvp(cbf, z, v)
        best_E = np.maximum(best_E, tang[:, 0] + safety.lam * h)
    worst = max(worst, float(np.max(safety.beta - best_E)))
    assert worst <= safety.delta_sat, \
        f"clause violation with margin {worst:.3e} > delta_sat"
    print(f"\nACCEPTANCE 7 PASS Monte-Carlo shadow: worst clause margin "
          f"{worst:.3e} <= {safety.delta_sat} over 100000 points")


# criterion 8 ----------------------------------------------------------------

def test_criterion_8_determinism(tmp_path):
    cfg = cli.ExperimentConfig(
        n_traj=5, steps_per_traj=10,
        encoder_hidden=[8], decoder_hidden=[8], cbf_hidden=[8],
        epoch_cap=25, max_rounds=1,
        n_safe=60, n_unsafe=30, n_interior=60, interior_resample=0,
        n_candidate_inputs=3, delta_box=0.5, max_cex_per_clause=2,
        n_rollouts=2, max_steps=200).validate()
    blobs = []
    for name in ("first", "second"):
        outdir = tmp_path / name
        cli.run_experiment(cfg, str(outdir))
        blobs.append((outdir / "summary.json").read_bytes())
    assert blobs[0] == blobs[1], "summary reports differ between runs"
    print("\nACCEPTANCE 8 PASS determinism: byte-identical summary reports "
          "on two consecutive runs")
