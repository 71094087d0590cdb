"""Command-line entry point.

Subcommands: stats, train-mtdt, transfer, adapt, eval, gradcheck, pipeline.
Exit codes: 0 ok, 1 usage, 2 config, 3 runtime failure, 4 check failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_CHECK = 4


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _build_parser() -> _Parser:
    parser = _Parser(prog="mtda", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, doc in [
        ("stats", "extract per-domain feature statistics"),
        ("train-mtdt", "train the domain transfer network"),
        ("transfer", "restyle the source set toward every target"),
        ("adapt", "self-train the task network with region selection"),
        ("eval", "evaluate the task network per target domain"),
        ("gradcheck", "finite-difference check of every differentiable op"),
        ("pipeline", "run all phases end to end"),
    ]:
        p = sub.add_parser(name, help=doc)
        if name != "gradcheck":
            p.add_argument("--config", type=str, default=None, help="key=value config file")
            p.add_argument("--seed", type=int, default=None, help="override config seed")
            p.add_argument("--out", type=str, default=None, help="override output dir")
            p.add_argument("--dump-images", action="store_true", help="write PPM previews")
            p.add_argument("--no-bars-source", action="store_true",
                           help="train restyled images with unfiltered source labels")
            p.add_argument("--no-bars-target", action="store_true",
                           help="drop the pseudo-label training term")
    return parser


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    if args.dump_images:
        cfg.dump_images = True
    if args.no_bars_source:
        cfg.bars_source = False
    if args.no_bars_target:
        cfg.bars_target = False
    return cfg.validate()


def _cmd_gradcheck() -> int:
    from .gradcheck import REL_TOLERANCE, run_all

    results = run_all()
    failed = [r for r in results if not r.passed]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"[gradcheck] {r.op:<24} probes={r.probes:<3} "
              f"max_rel_err={r.max_rel_err:.3e}  {status}")
    print(f"[gradcheck] tolerance {REL_TOLERANCE:g}: "
          f"{len(results) - len(failed)}/{len(results)} ops passed")
    return EXIT_OK if not failed else EXIT_CHECK


def _cmd_phase(command: str, cfg: ExperimentConfig) -> int:
    from . import pipeline as pl

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if command == "pipeline":
        record = pl.run_pipeline(cfg)
        for name, value in record.final_miou.items():
            print(f"[pipeline] {name}: mIoU {value:.2f}")
        print(f"[pipeline] record: {out_dir / 'run_record.json'}")
        return EXIT_OK

    data = pl.build_datasets(cfg)
    if command == "stats":
        model, _, _ = pl.init_models(cfg)
        _, metrics = pl.phase_stats(cfg, model, data, out_dir)
        for name in cfg.targets:
            print(f"[stats] wrote {pl.stats_path(out_dir, name)} ({metrics[name]['n']} updates)")
        return EXIT_OK
    if command == "train-mtdt":
        model, disc, pnet = pl.init_models(cfg)
        try:
            stats_list = pl.load_stats(cfg, out_dir)
        except FileNotFoundError:
            stats_list, _ = pl.phase_stats(cfg, model, data, out_dir)
        metrics = pl.phase_mtdt(cfg, model, disc, pnet, data, stats_list, out_dir)
        print(f"[train-mtdt] {metrics['iterations']} iterations, "
              f"checkpoint {out_dir / 'mtdt_model.bin'}")
        return EXIT_OK
    if command == "transfer":
        model, _ = pl.load_mtdt(cfg, out_dir)
        stats_list = pl.load_stats(cfg, out_dir)
        transferred = pl.phase_transfer(cfg, model, data, stats_list, out_dir)
        for name, scenes in zip(cfg.targets, transferred):
            print(f"[transfer] {name}: {len(scenes)} scenes -> {out_dir / 'transfers' / name}")
        return EXIT_OK
    if command == "adapt":
        transferred = pl.load_transferred(cfg, out_dir)
        _, metrics = pl.phase_adapt(cfg, data, transferred, out_dir)
        print(f"[adapt] {metrics['iterations']} iterations, "
              f"skipped {metrics['skipped_steps']}, checkpoint {out_dir / 'task_model.bin'}")
        return EXIT_OK
    if command == "eval":
        from .rng import SplitMix64
        from .taskseg import TaskNet
        from .tensorio import read_archive

        path = out_dir / "task_model.bin"
        if not path.is_file():
            raise FileNotFoundError(f"missing task checkpoint {path}; run 'adapt' first")
        net = TaskNet(cfg.num_classes, SplitMix64(cfg.seed).derive("task-net"))
        net.params.load_state_arrays(read_archive(path))
        results = pl.phase_eval(cfg, net, data, out_dir)
        for name, res in results.items():
            print(f"[eval] {name}: mIoU {res['miou']:.2f}")
        return EXIT_OK
    raise AssertionError(f"unhandled command {command}")


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "gradcheck":
        return _cmd_gradcheck()
    try:
        cfg = _load_cfg(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return _cmd_phase(args.command, cfg)
    except Exception as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
