"""Command-line entry point: ``crosscount {train,eval,gradcheck,synth,export-density}``.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import train as tr
from .datagen import SceneSpec
from .errors import CrossCountError, NumericalError
from .model import NetworkConfig

log = logging.getLogger("crosscount")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2

NETWORK_FLAGS = [f.name for f in fields(NetworkConfig)]
TRAIN_FLAGS = [f.name for f in fields(tr.TrainConfig) if f.name != "network"]
SCENE_FLAGS = [f.name for f in fields(SceneSpec)]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageExit(f"{self.prog}: {message}")


class _UsageExit(Exception):
    pass


def _add_network_flags(p):
    g = p.add_argument_group("network")
    for name in NETWORK_FLAGS:
        # the network seed is --net-seed so that --seed can stay the run seed
        flag = "net-seed" if name == "seed" else name.replace("_", "-")
        g.add_argument(f"--{flag}", dest=f"net.{name}", metavar="V")


def _collect(args, prefix: str) -> dict[str, str]:
    return {k[len(prefix):]: v for k, v in vars(args).items() if k.startswith(prefix) and v is not None}


def _config_file(path) -> dict[str, str]:
    return tr.read_kv(path) if path else {}


def _network_config(args, file_kv: dict[str, str]) -> NetworkConfig:
    kv = {k.split(".", 1)[1]: v for k, v in file_kv.items() if k.startswith("network.")}
    kv.update(_collect(args, "net."))
    return NetworkConfig.from_dict(kv)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crosscount", description="Multimodal crowd counting with information "
                                                    "aggregation-distribution blocks.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--config", help="key=value file; network keys are prefixed with 'network.'")
    for name in TRAIN_FLAGS:
        p.add_argument(f"--{name.replace('_', '-')}", dest=f"tc.{name}", metavar="V")
    _add_network_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--csv", default="metrics.csv")
    p.add_argument("--pgm-dir")
    p.add_argument("--split")
    p.add_argument("--config", help="expected network config (key=value file) to verify against")

    p = sub.add_parser("gradcheck", help="finite-difference check of a network's gradients")
    p.add_argument("--config")
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--size", type=int, nargs=2, default=(24, 24), metavar=("H", "W"))
    p.add_argument("--seed", type=int, default=0)
    _add_network_flags(p)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("out_dir")
    p.add_argument("-n", "--n-scenes", type=int, required=True)
    p.add_argument("--spec", help="key=value scene spec file")
    p.add_argument("--dark-fraction", type=float, default=0.5)
    p.add_argument("--val-fraction", type=float, default=0.0)
    p.add_argument("--no-shift", action="store_true", help="use the fixed --shift for every scene instead of a random one")
    g = p.add_argument_group("scene")
    for name in SCENE_FLAGS:
        g.add_argument(f"--{name.replace('_', '-')}", dest=f"scene.{name}", metavar="V")

    p = sub.add_parser("export-density", help="write a predicted density map as PGM")
    p.add_argument("checkpoint")
    p.add_argument("scene", help="dataset directory, optionally suffixed with :scene_name")
    p.add_argument("out")
    return parser


def cmd_train(args) -> int:
    file_kv = _config_file(args.config)
    kv = {k: v for k, v in file_kv.items() if not k.startswith("network.")}
    kv.update(_collect(args, "tc."))
    if "seed" in kv and "network.seed" not in file_kv and getattr(args, "net.seed") is None:
        file_kv = {**file_kv, "network.seed": kv["seed"]}
    net = _network_config(args, file_kv)
    kv.update({f"network.{k}": v for k, v in net.to_dict().items()})
    cfg = tr.TrainConfig.from_dict(kv)
    rec = tr.train(cfg)
    for i, loss in enumerate(rec.epoch_losses):
        print(f"epoch {i} loss {loss:.6g}")
    if rec.validation is not None:
        print(rec.validation)
    for path in rec.checkpoints:
        print(f"checkpoint {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    expected = None
    if args.config:
        kv = _config_file(args.config)
        expected = NetworkConfig.from_dict({k.split(".", 1)[1] if k.startswith("network.") else k: v
                                            for k, v in kv.items()})
    rep = tr.evaluate(args.checkpoint, args.dataset, expected, split=args.split, csv_path=args.csv,
                      pgm_dir=args.pgm_dir)
    print(rep)
    print(f"metrics written to {args.csv}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    file_kv = _config_file(args.config)
    if getattr(args, "net.seed") is None and "network.seed" not in file_kv:
        file_kv["network.seed"] = str(args.seed)
    net = _network_config(args, file_kv)
    rep = tr.gradcheck(net, args.samples, height=args.size[0], width=args.size[1], seed=args.seed)
    print(rep)
    return EXIT_OK if rep.passed else EXIT_NUMERICAL


def cmd_synth(args) -> int:
    kv = _config_file(args.spec)
    kv.update(_collect(args, "scene."))
    spec = SceneSpec.from_dict(kv)
    scenes = tr.synth(spec, args.n_scenes, args.out_dir, dark_fraction=args.dark_fraction,
                      val_fraction=args.val_fraction, random_shift=not args.no_shift)
    print(f"wrote {len(scenes)} scenes to {args.out_dir}")
    return EXIT_OK


def cmd_export(args) -> int:
    count = tr.export_density(args.checkpoint, args.scene, args.out)
    print(f"count {count:.4f} -> {args.out}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck, "synth": cmd_synth,
            "export-density": cmd_export}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageExit as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        # single BLAS thread keeps every reduction order, and so every result, reproducible
        with threadpool_limits(1):
            return COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (CrossCountError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
