"""Command-line interface: ``mrlf {prep,synth,train,eval,ablate}``.

Configuration precedence is flags > ``--config`` JSON file > preset defaults.
Exit codes: 0 success, 1 validation / usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint
from .data import DatasetError, load_and_validate, write_dataset
from .synth import SynthConfig, synth_generate
from .train import (ConfigError, TrainConfig, ablate, evaluate, format_table,
                    load_prepared, prepare_data, train)

VALIDATION_ERRORS = (ConfigError, DatasetError, CheckpointError, FileNotFoundError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _parse_value(text: str, default):
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes"):
            return True
        if text.lower() in ("0", "false", "no"):
            return False
        raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")
    if isinstance(default, tuple):
        items = [t for t in text.split(",") if t]
        kind = type(default[0]) if default else str
        return tuple(kind(t) for t in items)
    if default is None:
        return float(text)
    return type(default)(text)


def _add_dataclass_flags(parser, cls, skip=()):
    group = parser.add_argument_group(f"{cls.__name__} overrides")
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        default = f.default

        def conv(text, _d=default):
            return _parse_value(text, _d)

        conv.__name__ = type(default).__name__
        group.add_argument("--" + f.name.replace("_", "-"), dest=f"cfg_{f.name}", type=conv,
                           default=None, metavar=f.name.upper())


def _overrides(args, cls) -> dict:
    return {f.name: getattr(args, f"cfg_{f.name}") for f in dataclasses.fields(cls)
            if getattr(args, f"cfg_{f.name}", None) is not None}


def _train_config(args) -> TrainConfig:
    base = TrainConfig.desk().to_dict() if args.preset == "desk" else TrainConfig().to_dict()
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            base.update(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    base.update(_overrides(args, TrainConfig))
    if args.seed is not None:
        base["seed"] = args.seed
    try:
        return TrainConfig.from_dict(base)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _common(p):
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--preset", choices=("paper", "desk"), default="paper",
                   help="defaults before --config and flags are applied")
    p.add_argument("--seed", type=int)
    _add_dataclass_flags(p, TrainConfig, skip=("seed",))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mrlf", description="Multi-modal post location inference")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prep", help="filter, split and build vocabularies")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--name", default="synthetic")
    p.add_argument("--seed", type=int)
    _add_dataclass_flags(p, SynthConfig, skip=("seed",))

    p = sub.add_parser("train", help="train and write checkpoint.bin + metrics.csv")
    p.add_argument("--data", required=True, help="raw manifest JSON or prep output directory")
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", help="write metrics JSON here")
    _common(p)

    p = sub.add_parser("ablate", help="train and compare variants")
    p.add_argument("--data", required=True, help="raw manifest JSON")
    p.add_argument("--variants", required=True,
                   help="comma-separated, e.g. full,drop-text,drop-image,fusion-late")
    p.add_argument("--out", required=True)
    _common(p)
    return parser


def _require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def cmd_prep(args) -> None:
    cfg = _train_config(args)
    manifest = _require(args.manifest, "manifest")
    posts, table = load_and_validate(manifest)
    data = prepare_data(posts, table, cfg)
    out = Path(args.out)
    kept = data.train + data.val + data.test
    name = json.loads(manifest.read_text()).get("name", "dataset")
    write_dataset(out, kept, data.locations, name=name, write_features=False,
                  image_root=manifest.parent)
    data.vocab.save(out / "vocab.json")
    (out / "splits.json").write_text(json.dumps(data.split.to_dict()))
    (out / "prep_config.json").write_text(json.dumps(cfg.to_dict(), indent=1))
    print(f"kept {len(kept)} posts over {len(data.locations)} locations "
          f"(train {len(data.train)}, val {len(data.val)}, test {len(data.test)})")


def cmd_synth(args) -> None:
    fields = _overrides(args, SynthConfig)
    if args.seed is not None:
        fields["seed"] = args.seed
    cfg = SynthConfig(**fields)
    posts, table = synth_generate(cfg)
    path = write_dataset(args.out, posts, table, name=args.name)
    print(f"wrote {len(posts)} posts to {path}")


def cmd_train(args) -> None:
    cfg = _train_config(args)
    _require(args.data, "dataset")
    result = train(cfg, args.data, args.out,
                   on_epoch=lambda r: print(f"epoch {r['epoch']}: train_loss {r['train_loss']:.4f} "
                                            f"val_loss {r['val_loss']:.4f} val_acc {r['val_acc']:.4f} "
                                            f"val_mean_km {r['val_mean_km']:.4f} lr {r['lr']:.3g}"))
    print(f"best epoch {result.best_epoch}; wrote {result.checkpoint_path}")


def cmd_eval(args) -> None:
    cfg = _train_config(args)
    ckpt = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    data = load_prepared(_require(args.data, "dataset"), cfg)
    metrics = evaluate(ckpt, data.posts(args.split), data.locations, cfg.mean_mode)
    summary = {"split": args.split, **metrics.to_dict()}
    if args.out:
        Path(args.out).write_text(json.dumps(summary, indent=1))
    print(json.dumps({k: summary[k] for k in ("split", "accuracy", "mean_km", "loss", "n")}))


def cmd_ablate(args) -> None:
    cfg = _train_config(args)
    posts, table = load_and_validate(_require(args.data, "manifest"))
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    rows = ablate(cfg, variants, posts, table, args.out)
    print(format_table(rows))


COMMANDS = {"prep": cmd_prep, "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, argparse.ArgumentTypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
