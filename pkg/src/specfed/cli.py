"""``specfed`` command line: gen, train, fuse-eval, rl, verify-bounds, report."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config

log = logging.getLogger("specfed")


def _threads() -> int | None:
    v = os.environ.get("SPECFED_THREADS")
    return int(v) if v else None


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.specgen.seed = args.seed
    return cfg


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n")


def _model_path(out: Path, tag: str, k: int | None = None) -> Path:
    return out / (f"model_{tag}.spnn" if k is None else f"model_{tag}_uav{k}.spnn")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------
def cmd_gen(args) -> int:
    from .specgen import generate_dataset

    cfg = _config(args)
    out = Path(args.out)
    paths = generate_dataset(cfg.specgen, out, threads=_threads())
    _write_json(out / "generation.json", cfg.specgen.to_dict())
    print(f"wrote {len(paths)} dataset file(s) to {out}")
    return 0


def _regime_tag(regime: str, agg: str) -> str:
    return f"fl_{agg}" if regime == "fl" else regime


def cmd_train(args) -> int:
    from .federation import FederatedConfig, LocalConfig, run_centralized, run_federated, run_local, write_round_log
    from .nn import Network, save_checkpoint
    from .sensing import evaluate, predict_hard, write_metrics_csv
    from .specgen import read_dataset_dir

    cfg = _config(args)
    tr = cfg.training
    regime = args.regime or tr.regime
    agg = args.agg or tr.agg
    if args.rounds is not None:
        tr.rounds = args.rounds
    if args.epochs is not None:
        tr.epochs = args.epochs
    datasets = read_dataset_dir(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    net = Network(cfg.layers(), (2, datasets[0].J))
    tag = _regime_tag(regime, agg)
    if regime == "fl":
        fcfg = FederatedConfig(rule=agg, rounds=tr.rounds, local_epochs=tr.local_epochs, batch_size=tr.batch_size,
                               lr=tr.lr, lr_schedule=tr.lr_schedule, beta=tr.beta, L=tr.L, lr_local=tr.lr_local,
                               power_source=tr.power_source, normalize=tr.normalize, seed=cfg.seed)
        model, history = run_federated(fcfg, datasets, net)
        write_round_log(out / f"rounds_{tag}.csv", history)
        models = [model] * len(datasets)
        save_checkpoint(_model_path(out, tag), model)
        metrics = [r for ds in datasets for r in evaluate(model, ds, tag.upper(), tr.normalize)]
    else:
        lcfg = LocalConfig(epochs=tr.epochs, batch_size=tr.batch_size, lr=tr.lr, normalize=tr.normalize,
                           seed=cfg.seed)
        if regime == "cl":
            model, _, metrics = run_centralized(lcfg, datasets, net)
            models = [model] * len(datasets)
            save_checkpoint(_model_path(out, tag), model)
        else:
            models, _, metrics = run_local(lcfg, datasets, net)
            for ds, m in zip(datasets, models):
                save_checkpoint(_model_path(out, tag, ds.uav_id), m)
    write_metrics_csv(out / f"metrics_{tag}.csv", metrics)
    # raw eval predictions so summaries can be recomputed independently
    dump = {}
    for ds, m in zip(datasets, models):
        ev = ds.eval
        dump[f"uav{ds.uav_id}_pred"] = predict_hard(m, ev.iq, tr.normalize)
        dump[f"uav{ds.uav_id}_label"] = ev.labels
        dump[f"uav{ds.uav_id}_snr"] = ev.snr_db
        dump[f"uav{ds.uav_id}_slot"] = ev.slots
    np.savez_compressed(out / f"predictions_{tag}.npz", **dump)
    for r in metrics:
        row = r.row()
        print(f"{tag:12s} uav{row['uav']} snr {row['snr_db']:6.1f} dB  F1 {row['f1']:.4f}")
    return 0


def _load_models(out: Path, tag: str, K: int):
    from .nn import load_checkpoint

    shared = _model_path(out, tag)
    if shared.exists():
        m = load_checkpoint(shared)
        return [m] * K
    paths = [_model_path(out, tag, k) for k in range(K)]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise FileNotFoundError(f"no checkpoint for regime {tag!r} (looked for {shared} and {missing[0]})")
    return [load_checkpoint(p) for p in paths]


def cmd_fuse_eval(args) -> int:
    from .fusion import fusion_trace, write_fusion_trace
    from .report import fusion_table, write_fusion_csv
    from .sensing import predict_hard
    from .specgen import read_dataset_dir

    cfg = _config(args)
    n = args.n or cfg.fusion.n
    datasets = read_dataset_dir(args.data)
    out = Path(args.out)
    tag = args.regime_tag
    models = _load_models(Path(args.models), tag, len(datasets))
    evs = [ds.eval for ds in datasets]
    for ev in evs[1:]:
        if not (np.array_equal(ev.slots, evs[0].slots) and np.array_equal(ev.snr_db, evs[0].snr_db)):
            raise ValueError("UAV eval splits are not aligned slot by slot")
    preds = np.stack([predict_hard(m, ev.iq, cfg.training.normalize) for m, ev in zip(models, evs)], axis=1)
    labels = evs[0].labels
    rows = fusion_table(preds, labels, evs[0].snr_db, n, datasets[0].snr_levels, tag)
    out.mkdir(parents=True, exist_ok=True)
    write_fusion_csv(out / f"fusion_{tag}.csv", rows)
    # chronological trace at the lowest SNR level
    snr0 = datasets[0].snr_levels[0]
    sel = evs[0].snr_db == snr0
    write_fusion_trace(out / f"fusion_trace_{tag}.csv", fusion_trace(preds[sel], labels[sel], n))
    for r in rows:
        print(f"{tag:12s} {r['source']:6s} snr {r['snr_db']:6.1f} dB  F1 {r['f1']:.4f}")
    return 0


def cmd_rl(args) -> int:
    from .scheduling import (DqnConfig, MdpEnv, NoisyObserver, SensingObserver, TruthObserver, episode_means,
                             train_dqn, train_tabular)
    from .scheduling import write_episode_log
    from .rng import substream
    from .specgen.occupancy import OccupancyProcess, default_transition_matrices

    cfg = _config(args)
    rl = cfg.rl
    agent = args.agent or rl.agent
    uavs = args.uavs or rl.uavs
    episodes = args.episodes or rl.episodes
    M = args.M if args.M is not None else rl.M
    observation = args.observation or rl.observation
    process = OccupancyProcess(default_transition_matrices(M), B=1)
    if observation == "truth":
        observer = TruthObserver()
    elif observation == "fused":
        observer = NoisyObserver(n=cfg.fusion.n)
    else:
        # run the trained sensing models on freshly synthesized captures
        from .specgen.dataset import build_channel

        g = cfg.specgen
        models = _load_models(Path(args.models), args.regime_tag, g.K)
        observer = SensingObserver(models, g.plan, build_channel(g), rl.sensing_snr_db, cfg.fusion.n, g.J,
                                   g.cp_len, cfg.training.normalize)
        process = OccupancyProcess(g.matrices(), B=g.B)
        M = g.M
    env = MdpEnv(process, num_uavs=uavs, observer=observer, rng=substream(cfg.seed, "rl", "env"))
    if agent == "tabular":
        if uavs != 1:
            raise ConfigError("rl.uavs: the tabular agent schedules one UAV")
        _, steps = train_tabular(env, episodes, rl.steps, rl.alpha, rl.gamma, substream(cfg.seed, "rl", "agent"),
                                 rl.eps_start, rl.eps_end, rl.eps_fraction)
    else:
        dcfg = DqnConfig(variant=agent, episodes=episodes, steps=rl.steps, gamma=rl.gamma, lr=rl.lr,
                         batch_size=rl.batch_size, replay=rl.replay, warmup=rl.warmup, rho=rl.rho,
                         target_period=rl.target_period,
                         eps_start=rl.eps_start, eps_end=rl.eps_end, eps_fraction=rl.eps_fraction,
                         seed=cfg.seed)
        _, steps = train_dqn(env, dcfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tag = f"{agent}_u{uavs}"
    write_episode_log(out / f"episodes_{tag}.csv", steps)
    u = episode_means(steps, "utility")
    g = episode_means(steps, "genie")
    tail = min(500, len(u))
    summary = {"agent": agent, "uavs": uavs, "episodes": episodes, "M": M, "observation": observation,
               "mean_utility_final": float(u[-tail:].mean()), "mean_genie_final": float(g[-tail:].mean()),
               "ratio_to_genie": float(u[-tail:].mean() / g[-tail:].mean()) if g[-tail:].mean() > 0 else 0.0}
    _write_json(out / f"rl_{tag}.json", summary)
    print(f"{tag}: utility/genie over final {tail} episodes = {summary['ratio_to_genie']:.3f}")
    return 0


def cmd_verify_bounds(args) -> int:
    from .report import run_bound_checks

    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    verdicts = run_bound_checks(out, seed=cfg.seed, T=args.T, replicates=args.replicates)
    _write_json(out / "bounds.json", verdicts)
    ok = True
    for name, v in verdicts.items():
        print(f"{name:10s} {'PASS' if v['passed'] else 'FAIL'}  {v['detail']}")
        ok &= bool(v["passed"])
    return 0 if ok else 1


def cmd_report(args) -> int:
    from .report import build_report

    summary = build_report(Path(args.dir))
    _write_json(Path(args.dir) / "summary.json", summary)
    for line in summary["lines"]:
        print(line)
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="specfed", description="Collaborative spectrum sensing and scheduling")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default=None):
        sp.add_argument("--config", help="JSON experiment configuration")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        if out_default is not None:
            sp.add_argument("--out", default=out_default)

    sp = sub.add_parser("gen", help="generate per-UAV I/Q datasets")
    common(sp, "runs/default/data")
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train", help="train sensing models (CL, LL or FL)")
    common(sp, "runs/default/models")
    sp.add_argument("--data", default="runs/default/data")
    sp.add_argument("--regime", choices=["cl", "ll", "fl"])
    sp.add_argument("--agg", choices=["fedavg", "pwfedavg"])
    sp.add_argument("--rounds", type=int)
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("fuse-eval", help="evaluate n-out-of-K fusion of trained models")
    common(sp, "runs/default/fusion")
    sp.add_argument("--data", default="runs/default/data")
    sp.add_argument("--models", default="runs/default/models")
    sp.add_argument("--regime-tag", default="fl_pwfedavg", help="cl, ll, fl_fedavg or fl_pwfedavg")
    sp.add_argument("--n", type=int)
    sp.set_defaults(func=cmd_fuse_eval)

    sp = sub.add_parser("rl", help="train a scheduling agent")
    common(sp, "runs/default/rl")
    sp.add_argument("--agent", choices=["tabular", "dqn", "ddqn", "ddqn-soft"])
    sp.add_argument("--uavs", type=int, choices=[1, 2])
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--M", type=int)
    sp.add_argument("--observation", choices=["fused", "truth", "sensing"])
    sp.add_argument("--models", default="runs/default/models", help="checkpoints for observation = sensing")
    sp.add_argument("--regime-tag", default="fl_pwfedavg")
    sp.set_defaults(func=cmd_rl)

    sp = sub.add_parser("verify-bounds", help="check the convergence lemmas and theorem on quadratics")
    common(sp, "runs/default/bounds")
    sp.add_argument("--T", type=int, default=100_000)
    sp.add_argument("--replicates", type=int, default=1000)
    sp.set_defaults(func=cmd_verify_bounds)

    sp = sub.add_parser("report", help="summarize artifacts under a run directory")
    sp.add_argument("--dir", default="runs/default")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"specfed: config error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as exc:
        print(f"specfed: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
