"""Command-line entry point: ``organloc {gen-phantoms,train,eval,rollout}``.

Exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 training diverged,
5 checkpoint does not match the configuration.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path

from organloc import config as cfgmod
from organloc.errors import (
    Divergence,
    MagicMismatch,
    NonFiniteGradient,
    ShapeMismatch,
    TruncatedFile,
    UnknownOrgan,
)
from organloc.evaluator import evaluate, export_trace, rollout
from organloc.geometry import iou
from organloc.phantom import generate_dataset, load_labeled, load_manifest
from organloc.qnet import load_checkpoint, save_checkpoint
from organloc.trainer import train

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_CHECKPOINT = 0, 2, 3, 4, 5

log = logging.getLogger("organloc")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _sha(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _config(args) -> cfgmod.Config:
    overrides = cfgmod.parse_assignments(args.set or [])
    cfg = cfgmod.load(args.config, overrides)
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise cfgmod.ConfigError("seed: must be an unsigned 64-bit integer")
        cfg = cfgmod.with_seed(cfg, args.seed)
    print("# effective config")
    print(cfg.dump(), end="")
    return cfg


def _load_volumes(manifest):
    path = Path(manifest)
    if not path.is_file():
        raise CliError(EXIT_IO, f"manifest not found: {path}")
    return load_manifest(path)


def _load_net(path, grid):
    if not Path(path).is_file():
        raise CliError(EXIT_IO, f"checkpoint not found: {path}")
    return load_checkpoint(path, grid)


def cmd_gen_phantoms(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    paths = generate_dataset(cfg.seed, cfg.n_train, cfg.n_test, cfg.phantom, out)
    print(f"train manifest: {paths.train_manifest}")
    print(f"test manifest: {paths.test_manifest}")
    print(f"dataset sha256: {paths.digest()}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    volumes = _load_volumes(args.manifest)
    _check_organ(volumes, args.organ)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / f"agent_organ{args.organ}.qnt"
    result = train(volumes, args.organ, cfg.train, cfg.env)
    save_checkpoint(result.net, ckpt)
    log_path = out / f"train_log_organ{args.organ}.csv"
    result.log.write_csv(log_path)
    summary = result.log.epoch_summary()
    if summary:
        s = summary[-1]
        print(f"final epoch {s['epoch']}: mean_reward={s['mean_reward']:.4f} "
              f"final_iou={s['final_iou']:.4f} loss={s['loss']:.4g} epsilon={s['epsilon']:.3f}")
    else:
        print("no epochs run")
    print(f"checkpoint: {ckpt} sha256 {_sha(ckpt)}")
    print(f"training log: {log_path} sha256 {_sha(log_path)}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    volumes = _load_volumes(args.manifest)
    _check_organ(volumes, args.organ)
    if args.oracle:
        net = None
    elif not args.checkpoint:
        raise cfgmod.ConfigError("eval needs --checkpoint unless --oracle is given")
    else:
        net = _load_net(args.checkpoint, cfg.env.grid)
    report = evaluate(net, volumes, args.organ, cfg.env, oracle=args.oracle)
    print(report.to_table(), end="")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"eval_report_organ{args.organ}.csv"
    csv_path.write_text(report.to_csv(), encoding="utf-8")
    print(f"report: {csv_path} sha256 {_sha(csv_path)}")
    return EXIT_OK


def cmd_rollout(args) -> int:
    cfg = _config(args)
    vol_path = Path(args.volume)
    truth_path = Path(args.truth) if args.truth else vol_path.with_suffix(".txt")
    for p in (vol_path, truth_path):
        if not p.is_file():
            raise CliError(EXIT_IO, f"file not found: {p}")
    labeled = load_labeled(vol_path, truth_path)
    _check_organ([labeled], args.organ)
    net = _load_net(args.checkpoint, cfg.env.grid)
    trace, pred = rollout(net, labeled, args.organ, cfg.env)
    trace_path = Path(args.trace) if args.trace else Path(args.out) / f"{vol_path.stem}_organ{args.organ}_trace.csv"
    trace_path.parent.mkdir(parents=True, exist_ok=True)
    export_trace(trace, trace_path)
    print(f"termination: {trace.termination.value} after {len(trace) - 1} steps")
    print("predicted box: " + " ".join(f"{v:.4f}" for v in pred.as_tuple()))
    print(f"iou: {iou(pred, labeled.box(args.organ)):.6f}")
    print(f"trace: {trace_path}")
    return EXIT_OK


def _check_organ(volumes, organ_id):
    for k, lv in enumerate(volumes):
        if organ_id not in lv.organ_ids:
            raise CliError(EXIT_CONFIG, f"organ {organ_id} is not labeled in volume #{k} (has {lv.organ_ids})")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="overrides the config seed (u64)")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="organloc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-phantoms", parents=[common], help="generate a seeded phantom dataset")
    p.set_defaults(func=cmd_gen_phantoms)

    p = sub.add_parser("train", parents=[common], help="train one agent for an organ")
    p.add_argument("--manifest", required=True)
    p.add_argument("--organ", type=int, default=1)
    p.add_argument("--checkpoint", help="checkpoint path (default <out>/agent_organ<ID>.qnt)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate an agent on a test manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--organ", type=int, default=1)
    p.add_argument("--checkpoint")
    p.add_argument("--oracle", action="store_true", help="predict the truth boxes (harness self-test)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rollout", parents=[common], help="run and export a single greedy episode")
    p.add_argument("--volume", required=True)
    p.add_argument("--truth", help="truth sidecar (default: volume path with .txt suffix)")
    p.add_argument("--organ", type=int, default=1)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--trace", help="trace CSV path")
    p.set_defaults(func=cmd_rollout)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (cfgmod.ConfigError, UnknownOrgan) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ShapeMismatch as exc:
        print(f"checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (Divergence, NonFiniteGradient) as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, MagicMismatch, TruncatedFile) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
