"""Command-line entry point: ``dompat <command> [options]``.

Commands: synth, train, finetune, find-pattern, eval, trace, transfer, export.

Every option can also come from a TOML file (``--config run.toml``) holding one
flat table per command, e.g. ``[find-pattern]`` with ``xi = 8``. Flags win over
the file. The seed falls back to ``$DOMPAT_SEED`` and then 0.

Exit codes: 0 success, 1 configuration error, 2 I/O error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import warnings
from typing import Any, Callable, NamedTuple, Sequence

from . import __version__
from ._binio import FormatError
from .data import PROXY_KINDS, TASK_KINDS, DataFormatError, load_dataset, split, synth_proxy, \
    synth_task, write_cifar_binary, write_idx
from .evaluation import aggregate_trace, emit_report, evaluate
from .nn import SpecError, build_model, load_model, load_spec, model_fingerprint, save_model
from .pattern import FindConfig, FingerprintWarning, export_png, find_pattern, load_pattern, \
    save_pattern
from .train import TrainConfig, accuracy, fine_tune_head, fit
from .transfer import BackboneMismatchError, evaluate_transfer

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
REQUIRED = object()


class ConfigError(ValueError):
    """Bad or missing configuration; maps to exit code 1."""


class Opt(NamedTuple):
    name: str
    type: Callable[[Any], Any]
    default: Any
    help: str


def _flag(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ks(v) -> tuple[int, ...]:
    if isinstance(v, (list, tuple)):
        ks = tuple(int(k) for k in v)
    else:
        ks = tuple(int(k) for k in str(v).split(",") if k.strip())
    if not ks or any(k < 1 for k in ks):
        raise ValueError("topk needs positive integers")
    return tuple(sorted(set(ks)))


def _shape(v) -> tuple[int, int, int]:
    dims = tuple(int(d) for d in (v if isinstance(v, (list, tuple)) else str(v).split(",")))
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError("shape must be C,H,W")
    return dims


_EVAL_COMMON = [
    Opt("model", str, REQUIRED, "model file (DPFM)"),
    Opt("pattern", str, REQUIRED, "pattern file (DPAT)"),
    Opt("data", str, REQUIRED, "test images (.bin CIFAR batches or IDX)"),
    Opt("labels", str, None, "IDX label file"),
    Opt("clamp", _flag, None, "clip delta + x to [0, 255] (default: as found)"),
]

SUMMARIES = {
    "synth": "write a synthetic dataset",
    "train": "train a classifier",
    "finetune": "retrain only the head on a new task",
    "find-pattern": "search for a dominant pattern",
    "eval": "write an evaluation report for a pattern",
    "trace": "per-ReLU SSIM trace as CSV",
    "transfer": "evaluate a pattern against a fine-tuned model",
    "export": "write a pattern as PNG",
}

COMMANDS: dict[str, list[Opt]] = {
    "synth": [
        Opt("kind", str, "gratings", f"one of {TASK_KINDS + PROXY_KINDS}"),
        Opt("n", int, 5000, "number of images"),
        Opt("shape", _shape, (3, 32, 32), "C,H,W"),
        Opt("noise", float, 6.0, "pixel noise std for labeled kinds"),
        Opt("out", str, REQUIRED, "output file: .bin (CIFAR) or IDX images"),
        Opt("labels_out", str, None, "IDX label file to write"),
    ],
    "train": [
        Opt("spec", str, "reference", "model spec JSON, or 'reference'"),
        Opt("data", str, REQUIRED, "training images"),
        Opt("labels", str, None, "IDX label file"),
        Opt("test", str, None, "held-out images; default: split --data"),
        Opt("test_labels", str, None, "IDX label file for --test"),
        Opt("train_fraction", float, 0.8, "train share when splitting --data"),
        Opt("epochs", int, 10, "training epochs"),
        Opt("batch", int, 32, "batch size"),
        Opt("lr", float, 1e-3, "learning rate"),
        Opt("optimizer", str, "adam", "adam or sgd"),
        Opt("out", str, REQUIRED, "output model file"),
    ],
    "finetune": [
        Opt("model", str, REQUIRED, "pre-trained model file"),
        Opt("data", str, REQUIRED, "new-task training images"),
        Opt("labels", str, None, "IDX label file"),
        Opt("epochs", int, 5, "head training epochs"),
        Opt("batch", int, 32, "batch size"),
        Opt("lr", float, 1e-3, "learning rate"),
        Opt("optimizer", str, "adam", "adam or sgd"),
        Opt("out", str, REQUIRED, "output model file"),
    ],
    "find-pattern": [
        Opt("model", str, REQUIRED, "model file"),
        Opt("data", str, REQUIRED, "images to optimize over (labels ignored)"),
        Opt("labels", str, None, "IDX label file (ignored)"),
        Opt("loss", str, "cos", "cos, ed or kld"),
        Opt("xi", float, 10.0, "l-infinity bound"),
        Opt("batch", int, 32, "batch size"),
        Opt("epochs", int, 10, "passes over --data"),
        Opt("lr", float, 0.01, "Adam learning rate (unit pixel range)"),
        Opt("clamp", _flag, False, "clip delta + x to [0, 255] during search"),
        Opt("out", str, REQUIRED, "output pattern file"),
    ],
    "eval": _EVAL_COMMON + [
        Opt("topk", _ks, (1, 3, 5), "comma-separated k values"),
        Opt("format", str, None, "json or csv (default: from --out)"),
        Opt("out", str, REQUIRED, "report file"),
    ],
    "trace": _EVAL_COMMON + [
        Opt("window", int, 7, "SSIM window"),
        Opt("out", str, REQUIRED, "trace CSV"),
    ],
    "transfer": [
        Opt("model", str, REQUIRED, "original model file"),
        Opt("tuned", str, REQUIRED, "head-fine-tuned model file"),
        Opt("pattern", str, REQUIRED, "pattern found on --model"),
        Opt("data", str, REQUIRED, "new-task test images"),
        Opt("labels", str, None, "IDX label file"),
        Opt("clamp", _flag, None, "clip delta + x to [0, 255]"),
        Opt("topk", _ks, (1, 3, 5), "comma-separated k values"),
        Opt("out", str, REQUIRED, "report file (JSON)"),
    ],
    "export": [
        Opt("pattern", str, REQUIRED, "pattern file"),
        Opt("out", str, REQUIRED, "PNG file"),
    ],
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dompat", description="Find and evaluate dominant patterns.")
    parser.add_argument("--version", action="version", version=f"dompat {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name, help=SUMMARIES[name], description=SUMMARIES[name])
        p.add_argument("--config", default=None, help="TOML file with a [%s] table" % name)
        p.add_argument("--seed", type=int, default=None, help="seed (fallback: $DOMPAT_SEED, then 0)")
        p.add_argument("--workers", type=int, default=None, help="threads for batched inference")
        for o in opts:
            flag = "--" + o.name.replace("_", "-")
            p.add_argument(flag, dest=o.name, default=None, help=o.help)
    return parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _read_table(path: str | None, command: str) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    table = doc.get(command, doc.get(command.replace("-", "_"), {}))
    if not isinstance(table, dict):
        raise ConfigError(f"{path}: [{command}] must be a table")
    return {k.replace("-", "_"): v for k, v in table.items()}


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Effective config: defaults, then the TOML table, then explicit flags."""
    opts = {o.name: o for o in COMMANDS[command]}
    table = _read_table(args.config, command)
    extra = set(table) - set(opts) - {"seed", "workers"}
    if extra:
        raise ConfigError(f"unknown option(s) in [{command}]: {', '.join(sorted(extra))}")
    cfg: dict[str, Any] = {}
    for name, o in opts.items():
        raw = getattr(args, name)
        if raw is None:
            raw = table.get(name, o.default)
        if raw is REQUIRED:
            raise ConfigError(f"missing required option --{name.replace('_', '-')}")
        try:
            cfg[name] = None if raw is None else o.type(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"--{name.replace('_', '-')}: {exc}") from None
    seed = args.seed if args.seed is not None else table.get("seed", os.environ.get("DOMPAT_SEED", 0))
    workers = args.workers if args.workers is not None else table.get("workers", 1)
    try:
        cfg["seed"], cfg["workers"] = int(seed), int(workers)
    except (TypeError, ValueError):
        raise ConfigError(f"seed and workers must be integers, got {seed!r}, {workers!r}") from None
    if cfg["workers"] < 1:
        raise ConfigError("--workers must be >= 1")
    return cfg


def _meta(command: str, cfg: dict) -> dict:
    config = {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(cfg.items())}
    return {"tool": "dompat", "version": __version__, "command": command, "config": config}


def _data(path: str, labels: str | None):
    return load_dataset(path, labels)


def _echo(pairs: Sequence[tuple[str, Any]]) -> None:
    print(" ".join(f"{k}={v:g}" if isinstance(v, float) else f"{k}={v}" for k, v in pairs))


# ---------------------------------------------------------------- commands

def cmd_synth(cfg: dict) -> None:
    kind, shape = cfg["kind"], cfg["shape"]
    if kind in TASK_KINDS:
        ds = synth_task(kind, cfg["n"], shape, cfg["seed"], noise=cfg["noise"])
    elif kind in PROXY_KINDS:
        ds = synth_proxy(kind, cfg["n"], shape, cfg["seed"])
    else:
        raise ConfigError(f"--kind must be one of {TASK_KINDS + PROXY_KINDS}")
    if cfg["out"].endswith(".bin"):
        write_cifar_binary(ds, cfg["out"])
    else:
        write_idx(ds, cfg["out"], cfg["labels_out"])
    print(f"wrote {len(ds)} images to {cfg['out']}")


def _train_cfg(cfg: dict) -> TrainConfig:
    return TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch"], lr=cfg["lr"],
                       optimizer=cfg["optimizer"], seed=cfg["seed"])


def cmd_train(cfg: dict) -> None:
    spec = load_spec(cfg["spec"])
    tcfg = _train_cfg(cfg)
    data = _data(cfg["data"], cfg["labels"])
    if cfg["test"] is not None:
        train_set, test_set = data, _data(cfg["test"], cfg["test_labels"])
    else:
        train_set, test_set = split(data, cfg["train_fraction"], cfg["seed"])
    _echo([("epochs", tcfg.epochs), ("b", tcfg.batch_size), ("lr", tcfg.lr),
           ("optimizer", tcfg.optimizer), ("seed", tcfg.seed)])
    model = build_model(spec, tcfg.seed)
    history = fit(model, train_set, tcfg)
    save_model(model, cfg["out"])
    if history:
        print(f"final_loss={history[-1]:.6f}")
    print(f"accuracy={accuracy(model, test_set):.6f}")


def cmd_finetune(cfg: dict) -> None:
    model = load_model(cfg["model"])
    tuned = fine_tune_head(model, _data(cfg["data"], cfg["labels"]), _train_cfg(cfg))
    save_model(tuned, cfg["out"])
    print(f"wrote {cfg['out']} (head retrained, backbone frozen)")


def cmd_find_pattern(cfg: dict) -> None:
    model = load_model(cfg["model"])
    fcfg = FindConfig(loss_kind=cfg["loss"], xi=cfg["xi"], batch_size=cfg["batch"],
                      epochs=cfg["epochs"], lr=cfg["lr"], seed=cfg["seed"], clamp_sum=cfg["clamp"])
    _echo([("loss", fcfg.loss_kind), ("xi", fcfg.xi), ("b", fcfg.batch_size), ("m", fcfg.epochs),
           ("lr", fcfg.lr), ("seed", fcfg.seed)])
    pattern = find_pattern(model, _data(cfg["data"], cfg["labels"]).unlabeled(), fcfg)
    save_pattern(pattern, cfg["out"])
    print(f"dominant_class={pattern.dominant_class}")
    print(f"confidence={pattern.confidence:.6f}")
    if pattern.loss_history:
        print(f"final_loss={pattern.loss_history[-1]:.6f}")


def _warn_to_stderr(fn: Callable[[], Any]):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", FingerprintWarning)
        out = fn()
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    return out


def cmd_eval(cfg: dict) -> None:
    model, pattern = load_model(cfg["model"]), load_pattern(cfg["pattern"])
    test = _data(cfg["data"], cfg["labels"])
    report = _warn_to_stderr(lambda: evaluate(model, pattern, test, cfg["topk"], cfg["clamp"],
                                              cfg["workers"]))
    fmt = cfg["format"] or ("csv" if cfg["out"].endswith(".csv") else "json")
    emit_report(report, cfg["out"], fmt, _meta("eval", cfg))
    print(f"fooling_rate={report.fooling_rate:.6f}")
    print(f"dominance_ratio={report.dominance_ratio:.6f}")


def cmd_trace(cfg: dict) -> None:
    model, pattern = load_model(cfg["model"]), load_pattern(cfg["pattern"])
    test = _data(cfg["data"], cfg["labels"])
    trace = aggregate_trace(model, pattern, test, cfg["window"], clamp=cfg["clamp"])
    emit_report(trace, cfg["out"], "csv")
    emit_report(trace, cfg["out"] + ".json", "json", _meta("trace", cfg))
    print(f"layers={len(trace.layer_indices)} trend={trace.trend():.6f}")


def cmd_transfer(cfg: dict) -> None:
    original, tuned = load_model(cfg["model"]), load_model(cfg["tuned"])
    pattern, test = load_pattern(cfg["pattern"]), _data(cfg["data"], cfg["labels"])
    if pattern.model_fingerprint != model_fingerprint(original):
        print("warning: pattern was not found on --model", file=sys.stderr)
    report = evaluate_transfer(pattern, tuned, original, test, cfg["topk"], cfg["clamp"],
                               cfg["workers"])
    emit_report(report, cfg["out"], "json", _meta("transfer", cfg))
    if not report.within_cap:
        print("warning: fooling rate exceeds the cap; predictions moved to non-dominant classes",
              file=sys.stderr)
    print(f"dominance_ratio={report.dominance_ratio:.6f}")
    print(f"backbone_cos_loss={report.backbone_cos_loss:.6f}")


def cmd_export(cfg: dict) -> None:
    export_png(load_pattern(cfg["pattern"]), cfg["out"])
    print(f"wrote {cfg['out']}")


HANDLERS = {
    "synth": cmd_synth, "train": cmd_train, "finetune": cmd_finetune,
    "find-pattern": cmd_find_pattern, "eval": cmd_eval, "trace": cmd_trace,
    "transfer": cmd_transfer, "export": cmd_export,
}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve(args.command, args)
        HANDLERS[args.command](cfg)
    except BackboneMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: no such file: {exc.filename or exc}", file=sys.stderr)
        return EXIT_IO
    except (OSError, FormatError, DataFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, SpecError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
