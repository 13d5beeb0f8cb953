"""Full-batch training: per-epoch rollouts, loss accumulation, Adam then L-BFGS.

The epoch structure follows the recursive rollout exactly: for every training
trajectory the latent state starts at zero, the initial snapshot is decoded and
scored, then each snapshot interval is integrated with explicit Euler and the
decoded state at the interval end is scored.  All trajectories contribute to a
single loss before one optimizer step.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .data import apply_scaling, compute_scaling, split_dataset
from .decoder import DecoderConfig, decode
from .dynamics import DynNetConfig, rollout_batch
from .errors import ConfigurationError, DivergenceError, StorageError, ValidationError


@dataclass
class TrainConfig:
    latent_dim: int = 3
    dt: float = 1e-2
    lambda_reg: float = 1e-5
    lr: float = 1e-3
    epochs_adam: int = 1500
    epochs_lbfgs: int = 100
    loss_kind: str = "mse"              # or "mse_plus_direction"
    direction_eps: float = 1e-4
    direction_weight: float = 1e-1
    seed: int = 0
    ratio_mu: float = 0.75
    ratio_t: float = 0.75
    dyn_hidden: tuple = (50, 80, 100, 80, 50)
    fc_hidden: tuple = (200,)
    n_hc: int = 2
    n_conv: int = 2
    conv_kind: str = "mean_aggregation"
    n_kernels: int = 4
    include_t: bool = True
    include_mu: bool = True

    def __post_init__(self):
        if self.lambda_reg < 0:
            raise ConfigurationError("lambda_reg must be nonnegative")
        if self.dt <= 0:
            raise ConfigurationError("dt must be positive")
        if self.loss_kind not in ("mse", "mse_plus_direction"):
            raise ConfigurationError(f"unknown loss kind {self.loss_kind!r}")


@dataclass
class Checkpoint:
    dyn_config: DynNetConfig
    dec_config: DecoderConfig
    params: ad.ParamVector
    scaling: object
    mesh_hash: str
    train_config: TrainConfig
    train_sim_ids: list
    train_time_cutoff: int
    epoch: int = 0
    loss_history: list = field(default_factory=list)
    mesh: object = None     # MeshGraph; re-attached after load_checkpoint


def build_params(dyn_config, dec_config, seed=0):
    layout = dyn_config.blocks("dyn") + dec_config.blocks("dec")
    params = ad.ParamVector(layout)
    params.initialize(np.random.default_rng(seed))
    return params


def direction_penalty(u_h, u_sim, eps):
    """Mean over nodes of one minus the eps-regularized cosine similarity.

    Operates on the channel vectors at each node; eps keeps zero vectors from
    producing division by zero (a doubly-zero node contributes 1).
    """
    def node_norm(x):
        if isinstance(x, ad.Var):
            return _sqrt((x * x).sum(axis=-1, keepdims=True))
        return np.sqrt(np.sum(x * x, axis=-1, keepdims=True))

    dot = (u_h * u_sim).sum(axis=-1, keepdims=True) if isinstance(u_sim, ad.Var) else np.sum(
        u_h * u_sim, axis=-1, keepdims=True
    )
    denom = (node_norm(u_h) + eps) * (node_norm(u_sim) + eps)
    cos = dot / denom
    return (1.0 - cos).mean()


def _sqrt(x):
    if isinstance(x, ad.Var):
        y = np.sqrt(x.value)
        out = ad.Var(y, x.tape, (x,))
        out._backward = lambda g: (g * 0.5 / np.maximum(y, 1e-300),)
        return out
    return np.sqrt(x)


def loss_total(u_h, u_sim, params_flat, config):
    """Loss for one snapshot pair: data misfit plus L1 regularization.

    u_h, u_sim: (N_h, d_u) or a batch thereof; the misfit is the mean squared
    error over nodes and channels (mean over the batch axis too, so a batch of
    B pairs scores B times this value when accumulated pairwise).
    """
    u_h_arr = u_h.value if isinstance(u_h, ad.Var) else np.asarray(u_h)
    u_sim_arr = u_sim.value if isinstance(u_sim, ad.Var) else np.asarray(u_sim)
    if u_h_arr.shape != u_sim_arr.shape:
        raise ValidationError("field shapes disagree in the loss")
    diff = u_h - u_sim if isinstance(u_sim, ad.Var) else np.asarray(u_h) - np.asarray(u_sim)
    err = (diff * diff).mean()
    if config.loss_kind == "mse_plus_direction":
        err = err + config.direction_weight * direction_penalty(u_h, u_sim, config.direction_eps)
    reg = ad.l1_norm(params_flat)
    return err + config.lambda_reg * reg


def _epoch_forward(dyn_cfg, dec_cfg, params, graph, agg, pseudo, times, mu_values,
                  targets, config):
    """One full-batch epoch forward pass; returns (tape, loss, err, reg) nodes.

    targets: (B, K+1, N_h, d_u) scaled snapshots for the training trajectories.
    The accumulated loss matches summing the per-pair loss over every snapshot
    of every trajectory, regularization term included once per pair.
    """
    tape = ad.Tape()
    flat = ad.Var(params.data, tape)
    batch, n_snap = targets.shape[0], targets.shape[1]
    states, _ = rollout_batch(dyn_cfg, params, times, mu_values, config.dt, flat=flat)
    stacked = ad.concat(states, axis=0)                      # (n_snap*B, n)
    t_in = np.repeat(times[:n_snap], batch)
    mu_in = np.concatenate([mu_values[:, k] for k in range(n_snap)], axis=0)
    u_sim = decode(dec_cfg, params, t_in, stacked, mu_in, graph, flat=flat,
                   agg_matrix=agg, pseudo=pseudo)
    target = np.concatenate([targets[:, k] for k in range(n_snap)], axis=0)
    diff = u_sim - target
    n_pairs = batch * n_snap
    err = (diff * diff).sum() * (1.0 / (target.shape[-1] * target.shape[-2]))
    if config.loss_kind == "mse_plus_direction":
        err = err + (config.direction_weight * n_pairs) * direction_penalty(
            target, u_sim, config.direction_eps
        )
    reg = ad.l1_norm(flat)
    loss = err + (config.lambda_reg * n_pairs) * reg
    return tape, flat, loss, err, reg


class AdamState:
    """Standard first/second-moment state with bias correction."""

    def __init__(self, size, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps


def adam_step(params, grads, state, lr):
    state.t += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1 - state.beta2) * grads**2
    m_hat = state.m / (1 - state.beta1**state.t)
    v_hat = state.v / (1 - state.beta2**state.t)
    params -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


class LbfgsMemory:
    """Curvature pairs for the two-loop recursion."""

    def __init__(self, m=10):
        self.m = m
        self.s = []
        self.y = []

    def push(self, s, y):
        if float(s @ y) > 1e-12:
            self.s.append(s)
            self.y.append(y)
            if len(self.s) > self.m:
                self.s.pop(0)
                self.y.pop(0)

    def direction(self, grad):
        q = grad.copy()
        alphas = []
        for s, y in zip(reversed(self.s), reversed(self.y)):
            rho = 1.0 / (y @ s)
            a = rho * (s @ q)
            alphas.append((a, rho, s, y))
            q -= a * y
        if self.s:
            gamma = (self.s[-1] @ self.y[-1]) / (self.y[-1] @ self.y[-1])
            q *= gamma
        for a, rho, s, y in reversed(alphas):
            b = rho * (y @ q)
            q += (a - b) * s
        return -q


def lbfgs_step(params, loss_and_grad, memory, armijo_c=1e-4, max_halvings=20):
    """One quasi-Newton step with backtracking Armijo line search.

    loss_and_grad(p) -> (f, g).  The step is accepted only if the loss
    decreases sufficiently; otherwise the step is halved up to max_halvings
    times and then skipped.  Returns (params, f_new, g_new, accepted).
    """
    f0, g0 = loss_and_grad(params)
    if not np.any(g0):
        return params, f0, g0, False
    d = memory.direction(g0)
    slope = float(g0 @ d)
    if slope >= 0:
        d = -g0
        slope = float(g0 @ d)
    step = 1.0
    for _ in range(max_halvings + 1):
        trial = params + step * d
        f_trial, g_trial = loss_and_grad(trial)
        if np.isfinite(f_trial) and f_trial <= f0 + armijo_c * step * slope:
            memory.push(trial - params, g_trial - g0)
            return trial, f_trial, g_trial, True
        step *= 0.5
    return params, f0, g0, False


def train(dataset, config, split=None, progress=None):
    """Run the full training procedure and return (Checkpoint, loss history).

    The dataset is scaled from training statistics only.  Adam runs
    config.epochs_adam full-batch epochs, then L-BFGS refines for
    config.epochs_lbfgs epochs on the same loss.
    """
    if split is None:
        split = split_dataset(dataset, config.ratio_mu, config.ratio_t, config.seed)
    scaling = compute_scaling(dataset, split)
    graph = dataset.mesh
    d_mu = dataset.signals[0].d_mu
    dyn_cfg = DynNetConfig(
        latent_dim=config.latent_dim, d_mu=d_mu, include_t=config.include_t,
        include_mu=config.include_mu, hidden_sizes=tuple(config.dyn_hidden),
    )
    dec_cfg = DecoderConfig(
        latent_dim=config.latent_dim, d_mu=d_mu, num_nodes=graph.num_nodes,
        d_u=dataset.d_u, include_t=config.include_t, include_mu=config.include_mu,
        fc_hidden=tuple(config.fc_hidden), n_hc=config.n_hc, n_conv=config.n_conv,
        conv_kind=config.conv_kind, n_kernels=config.n_kernels, dim=graph.dim,
    )
    params = build_params(dyn_cfg, dec_cfg, seed=config.seed)

    tsel = split.train_time_indices()
    ids = np.asarray(split.train_sim_ids)
    times = dataset.times[tsel]
    scaled = apply_scaling(dataset.fields_u, scaling)
    targets = scaled[np.ix_(ids, tsel)]
    mu_values = np.stack([dataset.signals[i].values[tsel] for i in ids])

    agg = graph.mean_aggregation_matrix() if config.conv_kind == "mean_aggregation" else None
    pseudo = None
    if config.conv_kind == "gaussian_mixture":
        from .mesh import compute_pseudo_coords

        pseudo = compute_pseudo_coords(graph)

    history = []
    state = AdamState(params.size)

    def run_epoch(p_data):
        params.data[:] = p_data
        tape, flat, loss, err, reg = _epoch_forward(
            dyn_cfg, dec_cfg, params, graph, agg, pseudo, times, mu_values, targets, config
        )
        return tape, flat, loss, err, reg

    epoch = 0
    for _ in range(config.epochs_adam):
        tape, flat, loss, err, reg = run_epoch(params.data)
        if not np.isfinite(loss.value):
            raise DivergenceError(f"non-finite loss at epoch {epoch}")
        ad.backward(tape, loss)
        history.append((epoch, float(loss.value), float(err.value), float(reg.value)))
        adam_step(params.data, flat.grad, state, config.lr)
        if progress is not None:
            progress(epoch, float(loss.value))
        epoch += 1

    memory = LbfgsMemory(m=10)

    def loss_and_grad(p):
        tape, flat, loss, err, reg = run_epoch(p)
        ad.backward(tape, loss)
        loss_and_grad.last = (float(loss.value), float(err.value), float(reg.value))
        return float(loss.value), flat.grad.copy()

    p = params.data.copy()
    for _ in range(config.epochs_lbfgs):
        p, f_new, _, accepted = lbfgs_step(p, loss_and_grad, memory)
        if not np.isfinite(f_new):
            raise DivergenceError(f"non-finite loss at epoch {epoch}")
        _, err_v, reg_v = loss_and_grad.last
        history.append((epoch, f_new, err_v, reg_v))
        if progress is not None:
            progress(epoch, f_new)
        epoch += 1
    params.data[:] = p

    ckpt = Checkpoint(
        dyn_config=dyn_cfg, dec_config=dec_cfg, params=params, scaling=scaling,
        mesh_hash=graph.content_hash(), train_config=config,
        train_sim_ids=[int(i) for i in ids], train_time_cutoff=int(split.train_time_cutoff),
        epoch=epoch, loss_history=history, mesh=graph,
    )
    return ckpt, history


# -- checkpoint serialization -------------------------------------------


def save_checkpoint(ckpt, path):
    os.makedirs(path, exist_ok=True)
    meta = {
        "format": "graphrom-checkpoint",
        "version": 1,
        "mesh_hash": ckpt.mesh_hash,
        "epoch": ckpt.epoch,
        "dyn_config": asdict(ckpt.dyn_config),
        "dec_config": asdict(ckpt.dec_config),
        "train_config": asdict(ckpt.train_config),
        "train_sim_ids": ckpt.train_sim_ids,
        "train_time_cutoff": ckpt.train_time_cutoff,
        "layout": [[name, list(shape)] for name, shape, _, _ in ckpt.params.layout],
        "scaling": {
            "alpha1": ckpt.scaling.alpha1.tolist(),
            "alpha2": ckpt.scaling.alpha2.tolist(),
        },
        "loss_history": ckpt.loss_history,
    }
    with open(os.path.join(path, "model.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh)
    with open(os.path.join(path, "weights.f64"), "wb") as fh:
        fh.write(ckpt.params.data.astype("<f8").tobytes())


def load_checkpoint(path, expected_mesh_hash=None):
    from .data import ScalingParams

    with open(os.path.join(path, "model.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("format") != "graphrom-checkpoint" or meta.get("version") != 1:
        raise StorageError("unrecognized checkpoint format")
    if expected_mesh_hash is not None and meta["mesh_hash"] != expected_mesh_hash:
        raise StorageError("checkpoint mesh hash does not match the provided mesh")
    dyn_cfg = DynNetConfig(**{**meta["dyn_config"],
                              "hidden_sizes": tuple(meta["dyn_config"]["hidden_sizes"])})
    dec_raw = dict(meta["dec_config"])
    dec_raw["fc_hidden"] = tuple(dec_raw["fc_hidden"])
    dec_cfg = DecoderConfig(**dec_raw)
    tc_raw = dict(meta["train_config"])
    tc_raw["dyn_hidden"] = tuple(tc_raw["dyn_hidden"])
    tc_raw["fc_hidden"] = tuple(tc_raw["fc_hidden"])
    train_cfg = TrainConfig(**tc_raw)
    layout = [(name, tuple(shape)) for name, shape in meta["layout"]]
    params = ad.ParamVector(layout)
    with open(os.path.join(path, "weights.f64"), "rb") as fh:
        blob = fh.read()
    if len(blob) != 8 * params.size:
        raise StorageError(
            f"weights.f64 holds {len(blob) // 8} values, layout declares {params.size} "
            f"(first block {layout[0][0]})"
        )
    params.data[:] = np.frombuffer(blob, dtype="<f8")
    scaling = ScalingParams(
        alpha1=np.asarray(meta["scaling"]["alpha1"], dtype=np.float64),
        alpha2=np.asarray(meta["scaling"]["alpha2"], dtype=np.float64),
    )
    return Checkpoint(
        dyn_config=dyn_cfg, dec_config=dec_cfg, params=params, scaling=scaling,
        mesh_hash=meta["mesh_hash"], train_config=train_cfg,
        train_sim_ids=meta["train_sim_ids"], train_time_cutoff=meta["train_time_cutoff"],
        epoch=meta["epoch"], loss_history=[tuple(h) for h in meta["loss_history"]],
    )


def write_loss_history(history, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss_total", "loss_err", "loss_reg"])
        for row in history:
            writer.writerow(row)
