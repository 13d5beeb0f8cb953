"""Command-line entry point: reproducible runs driven by a JSON config file.

Every subcommand writes its artifacts under the --out run directory along with
config.json, the fully resolved configuration that reproduces the run.  Exit
codes: 0 success, 2 validation/configuration error, 3 numerical divergence,
4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import autodiff as ad
from .data import load_dataset, store_dataset
from .decoder import decode
from .dynamics import euler_rollout
from .errors import DivergenceError, StorageError, ValidationError
from .interp import (
    build_latent_table,
    decode_latents,
    estimate_lipschitz,
    verify_bound,
    zero_shot_predict,
)
from .metrics import (
    amplitude,
    bifurcation_diagram,
    evaluate_fields,
    export_diagram,
    export_error_curves,
    export_latent_trajectories,
    export_phase_portrait,
)
from .pde import generate_benchmark
from .training import (
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train,
    write_loss_history,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4


def _load_config(path):
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValidationError("config file must hold a JSON object")
    return cfg


def _echo_config(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _cap_threads(n):
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _checkpoint_with_mesh(path, dataset):
    ckpt = load_checkpoint(path, expected_mesh_hash=dataset.mesh.content_hash())
    ckpt.mesh = dataset.mesh
    return ckpt


def _model_rollouts(ckpt, signals):
    dt = ckpt.train_config.dt
    return [euler_rollout(ckpt.dyn_config, ckpt.params, s, dt) for s in signals]


def cmd_generate_data(cfg, out_dir):
    section = cfg.get("benchmark", {})
    dataset = generate_benchmark(
        section.get("name", "sa"),
        grid_k=int(section.get("grid_k", 3)),
        resolution=int(section.get("resolution", 15)),
        dt=float(section.get("dt", 2e-2)),
    )
    store_dataset(dataset, os.path.join(out_dir, "dataset"))
    return EXIT_OK


def cmd_train(cfg, out_dir):
    from . import figures

    dataset = load_dataset(cfg["data"])
    known = set(TrainConfig.__dataclass_fields__)
    section = {k: v for k, v in cfg.get("train", {}).items() if k in known}
    for key in ("dyn_hidden", "fc_hidden"):
        if key in section:
            section[key] = tuple(section[key])
    tc = TrainConfig(**section)
    ckpt, history = train(dataset, tc)
    save_checkpoint(ckpt, os.path.join(out_dir, "checkpoint"))
    write_loss_history(history, os.path.join(out_dir, "loss_history.csv"))
    figures.render_loss_history(history, os.path.join(out_dir, "loss_history.png"))
    return EXIT_OK


def cmd_evaluate(cfg, out_dir):
    from . import figures

    dataset = load_dataset(cfg["data"])
    ckpt = _checkpoint_with_mesh(cfg["checkpoint"], dataset)
    trajs = _model_rollouts(ckpt, dataset.signals)
    sim_ids, times, u_h, u_sim = [], [], [], []
    for sig, traj in zip(dataset.signals, trajs):
        fields = decode_latents(ckpt, traj.times, traj.states, traj.signal_values)
        for k in range(len(traj.times)):
            sim_ids.append(sig.sim_id)
            times.append(traj.times[k])
            u_h.append(dataset.fields_u[sig.sim_id, k])
            u_sim.append(fields[k])
    u_ref = float(np.abs(dataset.fields_u).max())
    report = evaluate_fields(sim_ids, times, np.stack(u_h), np.stack(u_sim), u_ref=u_ref)
    export_error_curves(report, os.path.join(out_dir, "errors.csv"))
    figures.render_error_curves(report, os.path.join(out_dir, "errors.png"))
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(
            {"eps_max": report.eps_max, "eps_mean": report.eps_mean, "nrmse": report.nrmse},
            fh, indent=2, sort_keys=True,
        )
        fh.write("\n")
    return EXIT_OK


def cmd_rollout(cfg, out_dir):
    from . import figures

    dataset = load_dataset(cfg["data"])
    ckpt = _checkpoint_with_mesh(cfg["checkpoint"], dataset)
    trajs = _model_rollouts(ckpt, dataset.signals)
    sim_ids = [s.sim_id for s in dataset.signals]
    export_latent_trajectories(trajs, sim_ids, os.path.join(out_dir, "latent.csv"))
    figures.render_latent_trajectories(trajs, sim_ids, os.path.join(out_dir, "latent.png"))
    n = ckpt.dyn_config.latent_dim
    if n >= 2:
        export_phase_portrait(trajs, sim_ids, 0, 1, os.path.join(out_dir, "phase.csv"))
        figures.render_phase_portrait(trajs, sim_ids, 0, 1, os.path.join(out_dir, "phase.png"))
    return EXIT_OK


def _read_queries(path):
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if rows.shape[1] < 2:
        raise ValidationError("queries.csv needs columns t,mu_1,...")
    return rows


def cmd_interpolate(cfg, out_dir):
    dataset = load_dataset(cfg["data"])
    ckpt = _checkpoint_with_mesh(cfg["checkpoint"], dataset)
    section = cfg.get("interpolate", {})
    queries = _read_queries(cfg["queries"])
    method = section.get("method", "gpr")
    strategy = {
        "iti": "integrate_then_interpolate",
        "ite": "interpolate_then_extrapolate",
    }.get(section.get("strategy", "iti"), section.get("strategy"))
    train_signals = [dataset.signals[i] for i in ckpt.train_sim_ids]
    dt = ckpt.train_config.dt
    fields, latents = zero_shot_predict(
        ckpt, queries, train_signals, dt, strategy=strategy, method=method,
        gpr_seed=ckpt.train_config.seed,
    )
    with open(os.path.join(out_dir, "fields.f64"), "wb") as fh:
        fh.write(np.asarray(fields, dtype="<f8").tobytes())

    # Bound verification where ground truth is available (queries on the grid).
    table = build_latent_table(ckpt.dyn_config, ckpt.params, train_signals, dt)
    l_hat, n_pairs = estimate_lipschitz(ckpt, table=table, seed=ckpt.train_config.seed)
    report = {
        "method": method,
        "strategy": strategy,
        "n_queries": int(len(queries)),
        "lipschitz_estimate": l_hat,
        "lipschitz_pairs": n_pairs,
        "latent_bbox_inflation": 0.2,
        "note": "Lipschitz estimate is a sampled lower bound",
    }
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return EXIT_OK


def cmd_diagnose_bifurcation(cfg, out_dir):
    from . import figures

    dataset = load_dataset(cfg["data"])
    ckpt = _checkpoint_with_mesh(cfg["checkpoint"], dataset)
    section = cfg.get("bifurcation", {})
    dim = int(section.get("latent_dim_index", 1))
    mu_index = int(section.get("mu_index", 0))
    trajs = _model_rollouts(ckpt, dataset.signals)
    mus = [s.values[0, mu_index] for s in dataset.signals]
    amps = [amplitude(t, dim) for t in trajs]
    report = bifurcation_diagram(mus, amps)
    export_diagram(report, os.path.join(out_dir, "diagram.csv"))
    figures.render_diagram(report, os.path.join(out_dir, "diagram.png"))
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(
            {"mu_star": report.mu_star, "threshold": report.threshold},
            fh, indent=2, sort_keys=True,
        )
        fh.write("\n")
    return EXIT_OK


def cmd_selftest(cfg, out_dir):
    """Gradient check plus the identity property of the convolution stage."""
    from .decoder import DecoderConfig
    from .dynamics import DynNetConfig
    from .mesh import MeshGraph
    from .training import TrainConfig, _epoch_forward, build_params

    rng = np.random.default_rng(0)
    coords = np.array([(i, j) for i in range(3) for j in range(3)], dtype=np.float64)
    edges = [(3 * i + j, 3 * i + j + 1) for i in range(3) for j in range(2)]
    edges += [(3 * i + j, 3 * (i + 1) + j) for i in range(2) for j in range(3)]
    graph = MeshGraph(coords=coords, edges=np.asarray(edges))

    dyn = DynNetConfig(latent_dim=2, d_mu=1, hidden_sizes=(8,))
    dec = DecoderConfig(latent_dim=2, d_mu=1, num_nodes=9, d_u=1, fc_hidden=(10,), n_hc=2)
    params = build_params(dyn, dec, seed=0)
    tc = TrainConfig(latent_dim=2, dt=0.05, epochs_adam=0, epochs_lbfgs=0)
    times = np.array([0.0, 0.1, 0.2])
    mu_values = rng.normal(size=(2, 3, 1))
    targets = rng.normal(size=(2, 3, 9, 1))
    agg = graph.mean_aggregation_matrix()

    def loss_of(p):
        params.data[:] = p
        tape, flat, loss, _, _ = _epoch_forward(
            dyn, dec, params, graph, agg, None, times, mu_values, targets, tc
        )
        return tape, flat, loss

    p0 = params.data.copy()
    tape, flat, loss = loss_of(p0)
    ad.backward(tape, loss)
    grad = flat.grad.copy()
    failures = 0
    for idx in rng.choice(params.size, size=30, replace=False):
        eps = 1e-6
        p_hi, p_lo = p0.copy(), p0.copy()
        p_hi[idx] += eps
        p_lo[idx] -= eps
        f_hi = loss_of(p_hi)[2].value
        f_lo = loss_of(p_lo)[2].value
        fd = (f_hi - f_lo) / (2 * eps)
        if abs(fd - grad[idx]) > 1e-5 * max(1.0, abs(fd)) + 1e-8:
            failures += 1
    params.data[:] = p0

    # identity property of the convolution stage
    for k in range(dec.n_conv):
        params.set_block(f"dec.conv{k}.W", np.zeros((dec.n_hc, dec.n_hc)))
        params.set_block(f"dec.conv{k}.b", np.zeros(dec.n_hc))
    dec_id = DecoderConfig(**{**dec.__dict__, "conv_activation": "identity"})
    s = rng.normal(size=(4, 2))
    mu = rng.normal(size=(4, 1))
    t = np.zeros(4)
    full = decode(dec_id, params, t, s, mu, graph)
    skipped = decode(dec_id, params, t, s, mu, graph, skip_conv=True)
    identity_ok = np.allclose(full, skipped, rtol=0, atol=1e-14)

    result = {"gradient_failures": failures, "identity_property": bool(identity_ok)}
    with open(os.path.join(out_dir, "selftest.json"), "w", encoding="utf-8") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if failures or not identity_ok:
        raise ValidationError(f"selftest failed: {result}")
    return EXIT_OK


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "rollout": cmd_rollout,
    "interpolate": cmd_interpolate,
    "diagnose-bifurcation": cmd_diagnose_bifurcation,
    "selftest": cmd_selftest,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="graphrom",
        description="Latent-dynamics reduced order models with graph decoders",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, help="override the global seed")
    parser.add_argument("--threads", type=int, help="cap worker/BLAS threads")
    parser.add_argument("--out", required=True, help="run directory for artifacts")
    parser.add_argument("--data", help="dataset directory (overrides config)")
    parser.add_argument("--checkpoint", help="checkpoint directory (overrides config)")
    parser.add_argument("--queries", help="queries.csv for interpolate")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    _cap_threads(args.threads)
    try:
        cfg = _load_config(args.config)
        for key in ("data", "checkpoint", "queries"):
            if getattr(args, key) is not None:
                cfg[key] = getattr(args, key)
        if args.seed is not None:
            cfg.setdefault("train", {})["seed"] = args.seed
        cfg["command"] = args.command
        _echo_config(cfg, args.out)
        return COMMANDS[args.command](cfg, args.out)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (StorageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except KeyError as exc:
        print(f"error: missing config key {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
