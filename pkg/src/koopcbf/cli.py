"""Configuration, persistence, and experiment orchestration.

Verbs: gen-data, train, verify, simulate, plot, run.  Configs are JSON
with strict validation (unknown keys and duplicates rejected); all
artifacts embed the config hash so runs are traceable and re-plottable
offline.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field, fields, asdict

import numpy as np

from . import cbf_train, falsifier, koopman, netcore, plant, safectrl

BUILD_TAG = "koopcbf-0.1.0"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # plant
    wheel_radius: float = 0.1
    wheel_sep: float = 0.1
    lipschitz_K_F: float = 0.0          # 0 -> derived from the vector field
    xy_bound: float = 5.0
    theta_preset: str = "wide"          # "wide" [-pi,pi] | "narrow" [-0.2,0.2]
    input_lo: float = -1.0
    input_hi: float = 1.0
    # data
    dt_data: float = 0.1
    n_traj: int = 200
    steps_per_traj: int = 50
    data_init: str = "domain"           # "domain" | "start-square"
    data_margin: float = 0.9            # fraction of X used for domain inits
    init_center: list = field(default_factory=lambda: [-2.5, -2.5])
    init_side: float = 2.0
    init_theta: list = field(default_factory=lambda: [0.285, 1.285])
    # model / nets
    lifted_dim: int = 5
    encoder_hidden: list = field(default_factory=lambda: [32, 32])
    decoder_hidden: list = field(default_factory=lambda: [32, 32])
    cbf_hidden: list = field(default_factory=lambda: [16, 16])
    K_phi: float = 8.0
    cbf_lip: float = 0.0            # 0 disables the barrier-net Lipschitz cap
    ridge: float = 1e-8
    # training
    learning_rate: float = 1e-3
    loss_w_dyn: float = 2.0
    loss_w_recons: float = 0.05
    loss_w_barr: float = 1.0
    sign_margin: float = 0.05
    lie_margin: float = 0.15            # train the rate term past beta
    rate_weight: float = 1.0            # emphasis on the rate hinge family
    barrier_pretrain_epochs: int = 1500
    epoch_cap: int = 2000
    max_rounds: int = 10
    n_safe: int = 1500
    n_unsafe: int = 800
    n_interior: int = 1500
    interior_resample: int = 100
    # safety / falsifier
    n_candidate_inputs: int = 10
    lam: float = 1.0
    beta: float = 0.1
    delta_box: float = 0.1
    delta_sat: float = 1e-3
    safe_margin: float = 0.6
    unsafe_pad: float = 0.45           # inflate the unsafe-label disk for training
    obstacle_center: list = field(default_factory=lambda: [0.0, 0.0])
    obstacle_radius: float = 1.0
    max_cex_per_clause: int = 8
    max_boxes: int = 10_000_000
    # control
    dt_ctrl: float = 0.02
    goal: list = field(default_factory=lambda: [2.5, 2.5])
    n_rollouts: int = 50
    max_steps: int = 8000
    tol_goal: float = 0.1
    nominal_gain: float = 2.0
    # seeds
    seed_data: int = 0
    seed_nets: int = 1
    seed_labels: int = 2
    seed_rollout: int = 3
    seed_cegis: int = 4

    def validate(self):
        if self.lam <= 0:
            raise ConfigError("lam must be positive")
        if self.beta <= 0:
            raise ConfigError("beta must be positive")
        if self.K_phi <= 0:
            raise ConfigError("K_phi must be positive")
        for name in ("dt_data", "dt_ctrl", "delta_box", "delta_sat",
                     "obstacle_radius", "wheel_radius", "wheel_sep"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.unsafe_pad < self.safe_margin:
            raise ConfigError("unsafe_pad must lie in [0, safe_margin)")
        if self.theta_preset not in ("wide", "narrow"):
            raise ConfigError("theta_preset must be 'wide' or 'narrow'")
        if self.data_init not in ("domain", "start-square"):
            raise ConfigError("data_init must be 'domain' or 'start-square'")
        if self.input_lo >= self.input_hi:
            raise ConfigError("input box is empty")
        if min(self.loss_w_dyn, self.loss_w_recons, self.loss_w_barr) < 0:
            raise ConfigError("loss weights must be nonnegative")
        return self

    @property
    def theta_range(self):
        return (-np.pi, np.pi) if self.theta_preset == "wide" else (-0.2, 0.2)

    def state_box(self):
        tl, th = self.theta_range
        return np.array([[-self.xy_bound, self.xy_bound],
                         [-self.xy_bound, self.xy_bound], [tl, th]])

    def input_box(self):
        return np.array([[self.input_lo, self.input_hi]])

    def hash(self):
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _reject_duplicates(pairs):
    seen = {}
    for k, v in pairs:
        if k in seen:
            raise ConfigError(f"duplicate key: {k}")
        seen[k] = v
    return seen


def load_config(path):
    try:
        with open(path) as fh:
            raw = json.load(fh, object_pairs_hook=_reject_duplicates)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}: {e.msg}") from e
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return ExperimentConfig(**raw).validate()


# ---------------------------------------------------------------------------
# checkpoint persistence (versioned text, 17-significant-digit decimals)

def _fmt(x):
    return f"{float(x):.17g}"


def _write_matrix(fh, name, M):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    fh.write(f"{name} {M.shape[0]} {M.shape[1]}\n")
    for row in M:
        fh.write(" ".join(_fmt(v) for v in row) + "\n")


def _write_net(fh, name, net):
    fh.write(f"net {name} {net.n_layers}\n")
    for W, b in zip(net.weights, net.biases):
        _write_matrix(fh, "W", W)
        _write_matrix(fh, "b", b[None, :])


def save_checkpoint(path, encoder, decoder, cbf_net, model, safety, config,
                    status="untrained", rounds=0):
    with open(path, "w") as fh:
        fh.write(f"koopcbf-checkpoint v{CHECKPOINT_VERSION}\n")
        fh.write(f"build {BUILD_TAG}\n")
        fh.write(f"config_hash {config.hash()}\n")
        fh.write(f"status {status} {rounds}\n")
        _write_net(fh, "encoder", encoder)
        _write_net(fh, "decoder", decoder)
        _write_net(fh, "cbf", cbf_net)
        fh.write(f"model {model.N} {model.m} {_fmt(model.dt)}\n")
        _write_matrix(fh, "Kd", model.Kd)
        for i, Di in enumerate(model.D):
            _write_matrix(fh, f"D{i}", Di)
        fh.write("safety\n")
        fh.write(f"lam {_fmt(safety.lam)}\n")
        fh.write(f"beta {_fmt(safety.beta)}\n")
        fh.write(f"delta_sat {_fmt(safety.delta_sat)}\n")
        fh.write(f"delta_box {_fmt(safety.delta_box)}\n")
        fh.write(f"safe_margin {_fmt(safety.safe_margin)}\n")
        fh.write("obstacle " + " ".join(_fmt(v) for v in safety.obstacle_center)
                 + f" {_fmt(safety.obstacle_radius)}\n")
        _write_matrix(fh, "X", safety.X)
        _write_matrix(fh, "U_c", safety.U_c)


class _Lines:
    def __init__(self, text):
        self.lines = text.splitlines()
        self.i = 0

    def next(self):
        if self.i >= len(self.lines):
            raise CheckpointError("truncated checkpoint file")
        line = self.lines[self.i]
        self.i += 1
        return line


def _read_matrix(lx, expect=None):
    head = lx.next().split()
    if expect is not None and head[0] != expect:
        raise CheckpointError(f"expected {expect}, got {head[0]}")
    rows, cols = int(head[1]), int(head[2])
    M = np.empty((rows, cols))
    for r in range(rows):
        vals = lx.next().split()
        if len(vals) != cols:
            raise CheckpointError("matrix row length mismatch")
        M[r] = [float(v) for v in vals]
    return M


def _read_net(lx):
    head = lx.next().split()
    if head[0] != "net":
        raise CheckpointError(f"expected net section, got {head[0]}")
    n_layers = int(head[2])
    weights, biases = [], []
    for _ in range(n_layers):
        weights.append(_read_matrix(lx, "W"))
        biases.append(_read_matrix(lx, "b")[0])
    return netcore.FeedforwardNet(weights, biases)


def load_checkpoint(path):
    with open(path) as fh:
        lx = _Lines(fh.read())
    head = lx.next().split()
    if len(head) != 2 or head[0] != "koopcbf-checkpoint":
        raise CheckpointError("not a koopcbf checkpoint")
    if head[1] != f"v{CHECKPOINT_VERSION}":
        raise CheckpointError(f"unsupported checkpoint version {head[1]}")
    lx.next()                                  # build tag
    config_hash = lx.next().split()[1]
    st = lx.next().split()
    status, rounds = st[1], int(st[2])
    encoder = _read_net(lx)
    decoder = _read_net(lx)
    cbf_net = _read_net(lx)
    mh = lx.next().split()
    N, m, dt = int(mh[1]), int(mh[2]), float(mh[3])
    Kd = _read_matrix(lx, "Kd")
    D = [_read_matrix(lx, f"D{i}") for i in range(m)]
    model = koopman.BilinearModel(N=N, m=m, Kd=Kd, D=D, dt=dt)
    if lx.next() != "safety":
        raise CheckpointError("missing safety section")
    vals = {}
    for key in ("lam", "beta", "delta_sat", "delta_box", "safe_margin"):
        parts = lx.next().split()
        vals[key] = float(parts[1])
    ob = lx.next().split()
    X = _read_matrix(lx, "X")
    U_c = _read_matrix(lx, "U_c")
    safety = falsifier.SafetySpec(
        X=X, obstacle_center=[float(ob[1]), float(ob[2])],
        obstacle_radius=float(ob[3]), safe_margin=vals["safe_margin"],
        U_c=U_c, lam=vals["lam"], beta=vals["beta"],
        delta_sat=vals["delta_sat"], delta_box=vals["delta_box"])
    return {"encoder": encoder, "decoder": decoder, "cbf_net": cbf_net,
            "model": model, "safety": safety, "status": status,
            "rounds": rounds, "config_hash": config_hash}


# ---------------------------------------------------------------------------
# experiment stages

def build_plant(config):
    return plant.make_diffdrive(
        config.state_box(), config.input_box(),
        r=config.wheel_radius, L_w=config.wheel_sep,
        lipschitz_K_F=config.lipschitz_K_F or None)


def build_safety(config):
    # evenly spaced candidate inputs including both extremes, so the
    # certificate is exercised at the turn rates the filter relies on
    U_c = np.linspace(config.input_lo, config.input_hi,
                      config.n_candidate_inputs)[:, None]
    return falsifier.SafetySpec(
        X=config.state_box(), obstacle_center=config.obstacle_center,
        obstacle_radius=config.obstacle_radius,
        safe_margin=config.safe_margin, U_c=U_c, lam=config.lam,
        beta=config.beta, delta_sat=config.delta_sat,
        delta_box=config.delta_box)


def _init_sampler(config):
    cx, cy = config.init_center
    half = config.init_side / 2.0
    tlo, thi = config.init_theta

    def sample(rng):
        return np.array([rng.uniform(cx - half, cx + half),
                         rng.uniform(cy - half, cy + half),
                         rng.uniform(tlo, thi)])
    return sample


def _data_sampler(config):
    """Initial states for identification data.

    "domain" spreads trajectory starts over a shrunk copy of X so the
    model sees the whole workspace; "start-square" restricts them to the
    rollout init region (trajectories then barely leave it, since the
    platform covers ~0.05 m per snapshot interval).
    """
    if config.data_init == "start-square":
        return _init_sampler(config)
    box = config.state_box() * config.data_margin
    c = np.asarray(config.obstacle_center, dtype=float)
    r_lo = 0.9 * config.obstacle_radius
    r_hi = config.obstacle_radius + config.safe_margin + 0.7

    def sample(rng):
        # alternate whole-workspace starts with starts in the annulus
        # around the avoid disk, where the filter binds and model error
        # costs the most
        if rng.integers(2):
            r = np.sqrt(rng.uniform(r_lo ** 2, r_hi ** 2))
            ang = rng.uniform(-np.pi, np.pi)
            x = rng.uniform(box[:, 0], box[:, 1])
            x[:2] = np.clip(c + r * np.array([np.cos(ang), np.sin(ang)]),
                            box[:2, 0], box[:2, 1])
            return x
        return rng.uniform(box[:, 0], box[:, 1])
    return sample


def gen_data(config):
    p = build_plant(config)
    sampler = _data_sampler(config)
    input_sampler = lambda rng: rng.uniform(config.input_lo, config.input_hi,
                                            size=1)
    return plant.generate_dataset(p, config.n_traj, config.steps_per_traj,
                                  config.dt_data, sampler, input_sampler,
                                  config.seed_data)


def build_train_state(config, dataset):
    rng = np.random.default_rng(config.seed_nets)
    n, N = 3, config.lifted_dim
    encoder = netcore.init_net([n] + list(config.encoder_hidden) + [N], rng)
    decoder = netcore.init_net([N] + list(config.decoder_hidden) + [n], rng)
    cbf_net = netcore.init_net([N] + list(config.cbf_hidden) + [1], rng)
    netcore.spectral_normalize(encoder, config.K_phi)
    model = koopman.BilinearModel(N=N, m=1, Kd=np.eye(N),
                                  D=[np.zeros((N, N))], dt=config.dt_data)
    weights = cbf_train.LossWeights(config.loss_w_dyn, config.loss_w_recons,
                                    config.loss_w_barr)
    opt = netcore.OptimizerState(lr=config.learning_rate)
    return cbf_train.TrainState(
        encoder=encoder, decoder=decoder, cbf_net=cbf_net, model=model,
        dataset=dataset, weights=weights, lam=config.lam, K_phi=config.K_phi,
        optimizer=opt, sign_margin=config.sign_margin,
        lie_margin=config.lie_margin, rate_weight=config.rate_weight,
        cbf_lip=(config.cbf_lip or None), ridge=config.ridge)


def run_training(config, dataset, outdir=None, progress=None):
    safety = build_safety(config)
    state = build_train_state(config, dataset)
    state.candidate_inputs = safety.U_c
    rng = np.random.default_rng(config.seed_labels + 1)
    if config.barrier_pretrain_epochs:
        cbf_train.pretrain_barrier(state, safety,
                                   epochs=config.barrier_pretrain_epochs,
                                   rng=rng)
    cbf_train.seed_labels(dataset, safety, config.n_safe, config.n_unsafe,
                          config.n_interior, rng, unsafe_pad=config.unsafe_pad)
    log_rows = []

    def log(rnd, st, result):
        tot, ld, lr, lb = st.loss_history[-1]
        log_rows.append([rnd, st.epoch, tot, ld, lr, lb,
                         len(result.counterexamples)])
        if progress is not None:
            progress(rnd, st, result)

    report = cbf_train.cegis(
        state, safety,
        falsifier_cfg={"max_cex_per_clause": config.max_cex_per_clause,
                       "max_boxes": config.max_boxes},
        max_rounds=config.max_rounds, epoch_cap=config.epoch_cap,
        interior_resample=config.interior_resample,
        rng=np.random.default_rng(config.seed_cegis), log=log)
    if outdir is not None:
        with open(os.path.join(outdir, "training_log.csv"), "w",
                  newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "epoch", "loss_total", "loss_dyn",
                        "loss_recons", "loss_barr", "counterexamples"])
            for row in log_rows:
                w.writerow(row)
    return state, safety, report


def save_trajectory_csv(path, traj, dt):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "t", "x", "y", "theta", "u", "h", "margin",
                    "qp_status"])
        for k in range(len(traj.inputs)):
            w.writerow([k, _fmt(k * dt), _fmt(traj.states[k][0]),
                        _fmt(traj.states[k][1]), _fmt(traj.states[k][2]),
                        _fmt(traj.inputs[k][0]), _fmt(traj.h_values[k]),
                        _fmt(traj.margins[k]), traj.qp_status[k]])
        k = len(traj.inputs)
        w.writerow([k, _fmt(k * dt), _fmt(traj.states[k][0]),
                    _fmt(traj.states[k][1]), _fmt(traj.states[k][2]),
                    "", "", "", "terminal"])


def run_rollouts(config, ckpt, outdir=None):
    p = build_plant(config)
    sampler = _init_sampler(config)
    rng = np.random.default_rng(config.seed_rollout)
    results = []
    for i in range(config.n_rollouts):
        x0 = sampler(rng)
        try:
            traj = safectrl.safe_rollout(
                p, ckpt["model"], ckpt["encoder"], ckpt["cbf_net"],
                ckpt["safety"], x0, config.goal, config.max_steps,
                config.dt_ctrl, nominal_gain=config.nominal_gain,
                tol_goal=config.tol_goal)
        except safectrl.DomainExitError as e:
            traj = e.trajectory     # keep the partial run for the summary
        results.append(traj)
        if outdir is not None:
            save_trajectory_csv(os.path.join(outdir, f"traj_{i:03d}.csv"),
                                traj, config.dt_ctrl)
    return results


def rollout_summary(config, trajectories):
    c = np.asarray(config.obstacle_center)
    min_dists, reached, min_margin = [], 0, np.inf
    for traj in trajectories:
        d = np.linalg.norm(traj.states[:, :2] - c, axis=1)
        min_dists.append(float(np.min(d)))
        if traj.reached_goal:
            reached += 1
        ok_margins = [m for m, s in zip(traj.margins, traj.qp_status)
                      if s == "ok"]
        if ok_margins:
            min_margin = min(min_margin, min(ok_margins))
    return {
        "n_rollouts": len(trajectories),
        "goal_reached": reached,
        "min_obstacle_distance": _fmt(min(min_dists)) if min_dists else None,
        "min_constraint_margin": _fmt(min_margin) if np.isfinite(min_margin)
        else None,
        "infeasible_steps": int(sum(s == "infeasible" for t in trajectories
                                    for s in t.qp_status)),
    }


def plot_trajectories_svg(traj_files, out_path, config):
    """Standalone SVG: trajectory polylines, obstacle disk, goal marker."""
    bound = config.xy_bound
    size = 600
    scale = size / (2 * bound)

    def to_px(x, y):
        return (x + bound) * scale, (bound - y) * scale

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" '
             f'height="{size}" viewBox="0 0 {size} {size}">',
             f'<!-- config {config.hash()} build {BUILD_TAG} -->',
             f'<rect width="{size}" height="{size}" fill="white" '
             'stroke="black"/>']
    cx, cy = to_px(*config.obstacle_center)
    parts.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" '
                 f'r="{config.obstacle_radius * scale:.2f}" fill="#d66" '
                 'fill-opacity="0.5" stroke="#a00"/>')
    gx, gy = to_px(*config.goal)
    parts.append(f'<circle cx="{gx:.2f}" cy="{gy:.2f}" r="5" fill="#0a0"/>')
    for path in traj_files:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        pts = " ".join("{:.2f},{:.2f}".format(*to_px(float(r[2]), float(r[3])))
                       for r in rows)
        parts.append(f'<polyline points="{pts}" fill="none" stroke="#36c" '
                     'stroke-width="1"/>')
    parts.append("</svg>")
    with open(out_path, "w") as fh:
        fh.write("\n".join(parts) + "\n")


def run_experiment(config, outdir):
    """Full pipeline: data -> cegis -> beta -> rollouts -> artifacts."""
    os.makedirs(outdir, exist_ok=True)
    dataset = gen_data(config)
    plant.save_dataset_csv(dataset, os.path.join(outdir, "dataset.csv"))
    state, safety, report = run_training(config, dataset, outdir=outdir)
    p = build_plant(config)
    beta_in = safectrl.estimate_beta_inputs(
        state.encoder, state.cbf_net, state.model, dataset, config.K_phi,
        p.lipschitz_K_F, config.state_box(), config.input_box(),
        seed=config.seed_labels)
    beta_bound = safectrl.compute_beta(beta_in)
    ckpt_path = os.path.join(outdir, "checkpoint.txt")
    save_checkpoint(ckpt_path, state.encoder, state.decoder, state.cbf_net,
                    state.model, safety, config,
                    status=report.final_status, rounds=report.rounds)
    result = falsifier.falsify(state.model, state.encoder, state.cbf_net,
                               safety, max_cex_per_clause=1,
                               max_boxes=config.max_boxes)
    with open(os.path.join(outdir, "falsifier_report.json"), "w") as fh:
        rep = result.report()
        rep.pop("wall_time_s")
        rep["config_hash"] = config.hash()
        json.dump(rep, fh, indent=1, sort_keys=True)
    ckpt = load_checkpoint(ckpt_path)
    trajectories = run_rollouts(config, ckpt, outdir=outdir)
    summary = {
        "build": BUILD_TAG,
        "config_hash": config.hash(),
        "cegis_status": report.final_status,
        "cegis_rounds": report.rounds,
        "verify_status": result.status,
        "beta_bound": _fmt(beta_bound),
        "beta_used": _fmt(config.beta),
        "beta_inputs": {k: _fmt(v) for k, v in asdict(beta_in).items()},
        "rollouts": rollout_summary(config, trajectories),
    }
    with open(os.path.join(outdir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    traj_files = sorted(
        os.path.join(outdir, f) for f in os.listdir(outdir)
        if f.startswith("traj_") and f.endswith(".csv"))
    plot_trajectories_svg(traj_files, os.path.join(outdir, "trajectories.svg"),
                          config)
    return summary


# ---------------------------------------------------------------------------
# entry point

def _load_cfg_arg(args):
    if getattr(args, "config", None):
        return load_config(args.config)
    return ExperimentConfig().validate()


def main(argv=None):
    ap = argparse.ArgumentParser(prog="koopcbf")
    sub = ap.add_subparsers(dest="cmd", required=True)

    sp = sub.add_parser("gen-data", help="generate a snapshot dataset CSV")
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("train", help="run CEGIS training, write checkpoint")
    sp.add_argument("--config")
    sp.add_argument("--data")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("verify", help="falsify a checkpoint")
    sp.add_argument("--ckpt", required=True)

    sp = sub.add_parser("simulate", help="run safe rollouts from a checkpoint")
    sp.add_argument("--config")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--n", type=int, default=50)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("plot", help="plot trajectory CSVs to SVG")
    sp.add_argument("--config")
    sp.add_argument("--in", dest="indir", required=True)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("run", help="full experiment pipeline")
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)

    args = ap.parse_args(argv)
    try:
        cfg = _load_cfg_arg(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2

    try:
        if args.cmd == "gen-data":
            dataset = gen_data(cfg)
            plant.save_dataset_csv(dataset, args.out)
        elif args.cmd == "train":
            if args.data:
                dataset = plant.load_dataset_csv(args.data, cfg.dt_data)
            else:
                dataset = gen_data(cfg)
            state, safety, report = run_training(cfg, dataset)
            save_checkpoint(args.out, state.encoder, state.decoder,
                            state.cbf_net, state.model, safety, cfg,
                            status=report.final_status, rounds=report.rounds)
            print(f"status: {report.final_status} after {report.rounds} rounds")
        elif args.cmd == "verify":
            ckpt = load_checkpoint(args.ckpt)
            result = falsifier.falsify(ckpt["model"], ckpt["encoder"],
                                       ckpt["cbf_net"], ckpt["safety"],
                                       max_cex_per_clause=1)
            print(json.dumps(result.report(), indent=1, sort_keys=True))
            if result.status != "unsat":
                return 3
        elif args.cmd == "simulate":
            ckpt = load_checkpoint(args.ckpt)
            cfg.n_rollouts = args.n
            os.makedirs(args.out, exist_ok=True)
            trajectories = run_rollouts(cfg, ckpt, outdir=args.out)
            print(json.dumps(rollout_summary(cfg, trajectories), indent=1,
                             sort_keys=True))
        elif args.cmd == "plot":
            traj_files = sorted(
                os.path.join(args.indir, f) for f in os.listdir(args.indir)
                if f.startswith("traj_") and f.endswith(".csv"))
            plot_trajectories_svg(traj_files, args.out, cfg)
        elif args.cmd == "run":
            summary = run_experiment(cfg, args.out)
            print(json.dumps(summary, indent=1, sort_keys=True))
    except (ConfigError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure after partial artifacts
        print(f"runtime error: {e}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
