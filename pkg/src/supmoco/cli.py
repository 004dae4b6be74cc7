"""Command-line entry point: ``supmoco {generate,train,eval,analyze,report}``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .analysis import analyze, write_report
from .config import ConfigError, ExperimentConfig, parse_config, write_config
from .data import load_dataset, save_dataset
from .experiments import STREAM_DATA, STREAM_RETRIEVAL, make_dataset, random_params
from .fewshot import average_rank, evaluate, read_results, write_results
from .numcore import ContractError, DegenerateVectorError, seeded_rng
from .trainer import CheckpointError, Trainer, TrainingDiverged, load_checkpoint, save_checkpoint, write_history


class CommandError(RuntimeError):
    """A prerequisite is missing or an input is unusable."""


def _out(cfg: ExperimentConfig, out: Path, name: str) -> Path:
    return out / getattr(cfg.paths, name)


def _require(path: Path, what: str, hint: str) -> Path:
    if not path.is_file():
        raise CommandError(f"{what} not found at {path} ({hint})")
    return path


def _dataset(cfg: ExperimentConfig, out: Path):
    path = _require(_out(cfg, out, "dataset"), "dataset", "run 'generate' first")
    return load_dataset(path, cfg.data.split_fractions, seeded_rng(cfg.seed, STREAM_DATA))


def _checkpoint(cfg: ExperimentConfig, out: Path):
    path = _require(_out(cfg, out, "checkpoint"), "checkpoint", "run 'train' first")
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise CommandError(str(exc)) from None


def cmd_generate(cfg: ExperimentConfig, out: Path, args) -> list[Path]:
    ds = make_dataset(cfg.data, cfg.seed, cfg.labels)
    path = _out(cfg, out, "dataset")
    save_dataset(ds, path)
    return [path]


def cmd_train(cfg: ExperimentConfig, out: Path, args) -> list[Path]:
    ds = _dataset(cfg, out)
    trainer = Trainer(ds, cfg.train_config(), cfg.encoder_config(), cfg.aug)
    trainer.run()
    ckpt, hist = _out(cfg, out, "checkpoint"), _out(cfg, out, "history")
    save_checkpoint(ckpt, trainer.checkpoint())
    write_history(trainer.history, hist)
    return [ckpt, hist]


def cmd_eval(cfg: ExperimentConfig, out: Path, args) -> list[Path]:
    ckpt = _checkpoint(cfg, out)
    ds = _dataset(cfg, out)
    results = evaluate(ckpt.query_params(), ds, cfg.episode, cfg.finetune, seed=cfg.seed, workers=cfg.workers)
    path = _out(cfg, out, "results")
    write_results(results, path)
    for name, r in results.items():
        print(f"{name}: {100 * r.mean:.2f} +- {100 * r.ci:.2f}")
    return [path]


def cmd_analyze(cfg: ExperimentConfig, out: Path, args) -> list[Path]:
    ds = _dataset(cfg, out)
    if args.random_init:
        params = random_params(cfg.seed, cfg.encoder_config())
    else:
        params = _checkpoint(cfg, out).query_params()
    report = analyze(params, ds, cfg.retrieval, seeded_rng(cfg.seed, STREAM_RETRIEVAL), cfg.workers)
    path = _out(cfg, out, "collapse")
    write_report(report, path)
    for k, v in report.summary().items():
        print(f"{k}: {v:.4f}")
    return [path]


def _named_input(spec: str) -> tuple[str, Path]:
    name, sep, path = spec.partition("=")
    if sep:
        return name, Path(path)
    p = Path(spec)
    return (p.parent.name or p.stem) if p.stem == "results" else p.stem, p


def cmd_report(cfg: ExperimentConfig, out: Path, args) -> list[Path]:
    if not args.inputs:
        raise CommandError("report needs at least one [NAME=]PATH results file")
    table: dict[str, dict[str, float]] = {}
    cis: dict[str, dict[str, float]] = {}
    for spec in args.inputs:
        name, path = _named_input(spec)
        if name in table:
            raise CommandError(f"duplicate algorithm name {name!r}")
        _require(path, "results file", spec)
        try:
            res = read_results(path)
        except ValueError as exc:
            raise CommandError(str(exc)) from None
        table[name] = {d: r.mean for d, r in res.items()}
        cis[name] = {d: r.ci for d, r in res.items()}
    try:
        ranks = average_rank(table)
    except ContractError as exc:
        raise CommandError(str(exc)) from None
    datasets = list(next(iter(table.values())))
    lines = ["dataset,algorithm,mean,ci95"]
    for d in datasets:
        lines += [f"{d},{a},{table[a][d]!r},{cis[a][d]!r}" for a in table]
    lines += ["# average rank", "algorithm,average_rank"]
    lines += [f"{a},{r!r}" for a, r in ranks.items()]
    path = _out(cfg, out, "report")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    width = max(len(d) for d in [*datasets, "average rank"])
    print(" " * width + "".join(f"  {a:>16}" for a in table))
    for d in datasets:
        cells = "".join(f"  {f'{100 * table[a][d]:.2f} +- {100 * cis[a][d]:.2f}':>16}" for a in table)
        print(f"{d:<{width}}{cells}")
    print(f"{'average rank':<{width}}" + "".join(f"  {ranks[a]:>16.2f}" for a in table))
    return [path]


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key (repeatable)")
    common.add_argument("--seed", type=int, help="top-level seed (overrides config)")
    common.add_argument("--out", type=Path, default=Path("."), help="directory for all artifacts")

    parser = argparse.ArgumentParser(prog="supmoco", description="Supervised momentum-contrast desk laboratory.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    sub.add_parser("train", parents=[common], help="train an encoder, write checkpoint and history")
    sub.add_parser("eval", parents=[common], help="few-shot evaluation of a checkpoint")
    p = sub.add_parser("analyze", parents=[common], help="nearest-neighbour collapse report")
    p.add_argument("--random-init", action="store_true", help="analyze the untrained encoder instead")
    p = sub.add_parser("report", parents=[common], help="compare results files by average rank")
    p.add_argument("inputs", nargs="*", metavar="[NAME=]PATH")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config, args.set, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out: Path = args.out
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_config(cfg, _out(cfg, out, "config"))
        written = COMMANDS[args.command](cfg, out, args)
    except (CommandError, TrainingDiverged, ContractError, DegenerateVectorError, OSError) as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return 1
    missing = [p for p in written if not Path(p).is_file()]
    if missing:
        print(f"{args.command}: artifacts not written: {', '.join(map(str, missing))}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
