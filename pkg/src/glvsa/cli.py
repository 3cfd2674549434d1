"""Command-line entry point: ``glvsa <subcommand> [flags]`` or ``python -m glvsa``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .ablation import ABLATIONS, format_table, run_ablation
from .config import ConfigError, TrainConfig, load_config
from .dataset import goal_coverage, load_dataset, save_dataset
from .trainer import (SHIFT_LEVELS, build_expert_store, default_output_dir, emit_metrics, eval_zeroshot,
                      load_checkpoint, save_checkpoint, shift_for, train_offline)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    cfg.validate()
    return cfg


def _out(args) -> Path:
    return Path(args.out) if args.out else default_output_dir()


def _checkpoint(args) -> Path:
    return Path(args.checkpoint) if args.checkpoint else _out(args) / "final.ckpt"


def _levels(shift: str):
    return SHIFT_LEVELS if shift == "all" else (shift,)


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    if args.data_seed is not None:
        cfg = cfg.replace(data_seed=args.data_seed)
    if args.n is not None:
        cfg = cfg.replace(n_expert=args.n)
    store = build_expert_store(cfg)
    path = Path(args.path) if args.path else _out(args) / "expert.data"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(store, path)
    print(f"wrote {len(store)} trajectories to {path} (coverage {goal_coverage(store, cfg.coverage_bin)})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    store = load_dataset(args.data) if args.data else None
    out = _out(args)
    res = train_offline(cfg, store=store, out_dir=out)
    save_checkpoint(res.bundle, out / "final.ckpt")
    emit_metrics(res.metrics, out / "metrics.csv")
    last = res.metrics[-1] if res.metrics else None
    if last is not None:
        print(f"final total loss {last.loss_total:.4f}")
    print("coverage " + " ".join(str(c) for c in res.coverage))
    print(f"checkpoint {out / 'final.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    bundle = load_checkpoint(_checkpoint(args))
    episodes = bundle.cfg.eval_episodes if args.episodes is None else args.episodes
    seed = bundle.cfg.eval_seed if args.seed is None else args.seed
    for lv in _levels(args.shift):
        print(eval_zeroshot(bundle, shift_for(bundle.cfg, bundle.spec, lv), episodes, seed))
    return EXIT_OK


def cmd_finetune(args) -> int:
    from .policy import finetune_fewshot

    bundle = load_checkpoint(_checkpoint(args))
    cfg = bundle.cfg
    shift = shift_for(cfg, bundle.spec, args.shift)
    shots = cfg.n_shots if args.shots is None else args.shots
    seed = cfg.seed if args.seed is None else args.seed
    episodes = cfg.eval_episodes if args.episodes is None else args.episodes
    before = eval_zeroshot(bundle, shift, episodes, cfg.eval_seed)
    res = finetune_fewshot(bundle, shift, shots, seed)
    after = eval_zeroshot(res.bundle, shift, episodes, cfg.eval_seed)
    out = _out(args)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"finetuned_{args.shift}.ckpt"
    save_checkpoint(res.bundle, path)
    print(f"zero-shot  {before}")
    print(f"{shots}-shot    {after}")
    print(f"checkpoint {path}")
    return EXIT_OK


def cmd_coverage(args) -> int:
    bin_size = args.bin
    if args.data:
        paths = [Path(p) for p in args.data]
    else:
        run = Path(args.run) if args.run else _out(args)
        paths = sorted(run.glob("iter*.data"), key=lambda p: int(p.stem[4:]))
        if not paths:
            print(f"no dataset snapshots in {run}", file=sys.stderr)
            return EXIT_ERROR
    print("dataset,trajectories,synthetic,coverage")
    for p in paths:
        store = load_dataset(p)
        print(f"{p.name},{len(store)},{store.counts()['synthetic']},{goal_coverage(store, bin_size)}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    values = [int(v) for v in args.values.split(",")] if args.values else None
    if values is not None and args.name != "h-sweep":
        raise ConfigError("--values only applies to h-sweep")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    levels = _levels(args.shift)
    rows = run_ablation(cfg, args.name, values, seeds, _out(args) / f"ablate_{args.name}",
                        args.episodes, levels)
    sys.stdout.write(format_table(rows))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="glvsa", description="Skill-step latent world model for offline goal-conditioned RL")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    def common(sp, seed=True):
        sp.add_argument("--config", help="TOML config file")
        sp.add_argument("--out", help="output directory (default: $GLVSA_OUTPUT_DIR or ./runs)")
        if seed:
            sp.add_argument("--seed", type=int)

    g = sub.add_parser("gen-data", help="generate the expert dataset")
    common(g)
    g.add_argument("--data-seed", type=int)
    g.add_argument("--n", type=int, help="number of expert trajectories")
    g.add_argument("--path", help="dataset file (default: OUT/expert.data)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="offline training with model-guided rollouts")
    common(t)
    t.add_argument("--data", help="dataset file from gen-data")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="zero-shot evaluation")
    common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--shift", choices=(*SHIFT_LEVELS, "all"), default="all")
    e.add_argument("--episodes", type=int)
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("finetune", help="few-shot adaptation on a shifted goal region")
    common(f)
    f.add_argument("--checkpoint")
    f.add_argument("--shift", choices=SHIFT_LEVELS, default="large")
    f.add_argument("--shots", type=int)
    f.add_argument("--episodes", type=int)
    f.set_defaults(func=cmd_finetune)

    c = sub.add_parser("coverage", help="goal-coverage series of a run")
    common(c, seed=False)
    c.add_argument("--run", help="run directory holding iter*.data snapshots")
    c.add_argument("--data", nargs="+", help="explicit dataset files")
    c.add_argument("--bin", type=float, default=0.25)
    c.set_defaults(func=cmd_coverage)

    a = sub.add_parser("ablate", help="train and score an ablation")
    common(a)
    a.add_argument("--name", choices=ABLATIONS, required=True)
    a.add_argument("--values", help="comma-separated H values for h-sweep")
    a.add_argument("--seeds", help="comma-separated seeds (default: --seed)")
    a.add_argument("--shift", choices=(*SHIFT_LEVELS, "all"), default="all")
    a.add_argument("--episodes", type=int)
    a.set_defaults(func=cmd_ablate)
    return p


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the usage message
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, OSError, ValueError, RuntimeError) as exc:
        print(f"glvsa {args.command}: {exc}", file=sys.stderr)
        return EXIT_ERROR


def main() -> None:
    sys.exit(cli_main())
