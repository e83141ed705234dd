"""Command-line front end: generate, train, eval, flops, verify.

Every command resolves its JSON config (schema defaults, then ``--profile``,
then ``--config``, then ``--seed``), runs, and writes a manifest next to its
main output listing the resolved config, its hash and every file written.

Exit codes: 0 success, 1 usage or config error, 2 runtime or numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from .channel import ArrayConfig, ChannelConfig
from .checkpoint import load_training_state, save_model
from .complexity import count_params_flops
from .formats import Dataset, FormatError, read_dataset, write_dataset
from .harness import (
    ESTIMATORS,
    SCENARIOS,
    SNR_GRID,
    ExperimentConfig,
    SnrPolicy,
    TrainConfig,
    TrainingDiverged,
    config_hash,
    generate_dataset,
    history_csv,
    init_model,
    near_field_range,
    run_experiment,
    train,
)
from .models import MatCenetConfig, XlcnetConfig, build_model

log = logging.getLogger("xlmimo")

SCHEMA_VERSION = 1
REQUIRED = object()


class ConfigError(ValueError):
    pass


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config schemas: key -> (kind, default); REQUIRED marks keys without default

_COMMON = {"schema_version": ("int", SCHEMA_VERSION), "seed": ("int", 0)}

SCHEMAS = {
    "generate": {
        **_COMMON,
        "M": ("int", REQUIRED),
        "lam": ("float", 0.01),
        "L": ("int", 6),
        "L0": ("int", 1),
        "r_range": ("range?", None),
        "n_samples": ("int", REQUIRED),
        # null = noiseless, number = fixed SNR, [lo, hi] = uniform per sample
        "snr_db": ("snr", [-10.0, 20.0]),
        "split": ("str", "train"),
    },
    "train": {
        **_COMMON,
        "model": ("str", REQUIRED),
        "M": ("int", REQUIRED),
        "lam": ("float", 0.01),
        "F": ("int", 32),
        "n_heads": ("int", 4),
        "ffn_hidden": ("int?", None),
        "n_encoders": ("int", 2),
        "n_conv_blocks": ("int?", None),
        "n_train": ("int", 9000),
        "n_val": ("int", 1000),
        "batch_size": ("int", 128),
        "n_epochs": ("int", 200),
        "learning_rate": ("float", 1e-3),
        "train_L": ("int", 6),
        "train_L0": ("int", 1),
        "snr_low_db": ("float", -10.0),
        "snr_high_db": ("float", 20.0),
        "dtype": ("str", "float32"),
    },
    "eval": {
        **_COMMON,
        "scenario": ("str", REQUIRED),
        "M": ("int", REQUIRED),
        "estimators": ("strlist", REQUIRED),
        "lam": ("float", 0.01),
        "L": ("int", 6),
        "L0": ("int", 1),
        "snr_grid": ("floatlist", list(SNR_GRID)),
        "sweep_snr_db": ("float", 10.0),
        "n_test": ("int", 10000),
        "r_range": ("range?", None),
        "n_cov": ("int", 10000),
        "omp_angles": ("int?", None),
        "omp_rings": ("int", 7),
        "checkpoints": ("strdict", {}),
    },
    "flops": {
        **_COMMON,
        "models": ("strlist", ["matcenet", "xlcnet"]),
        "M": ("int", 256),
        "F": ("int", 64),
        "n_heads": ("int", 4),
        "ffn_hidden": ("int?", None),
        "n_encoders": ("int", 2),
        "xlcnet_F": ("int", 64),
    },
}

# desk: the scaled-down acceptance profile; "paper": the full-size setup
PROFILES = {
    "desk": {
        "generate": {"M": 64, "n_samples": 2000},
        "train": {"model": "matcenet", "M": 64, "F": 32, "n_heads": 4, "n_train": 2000, "n_val": 500,
                  "batch_size": 32, "n_epochs": 30},
        "eval": {"scenario": "hybrid", "M": 64, "estimators": ["ls", "lmmse", "hyomp"], "n_test": 2000},
        "flops": {"M": 64, "F": 32},
    },
    "paper": {
        "generate": {"M": 256, "n_samples": 9000},
        "train": {"model": "matcenet", "M": 256, "F": 64, "n_heads": 4, "n_train": 9000, "n_val": 1000,
                  "batch_size": 128, "n_epochs": 200},
        "eval": {"scenario": "hybrid", "M": 256, "estimators": ["ls", "lmmse", "hyomp"], "n_test": 10000},
        "flops": {"M": 256, "F": 64},
    },
}


# complexity figures refer to the full-size networks unless asked otherwise
DEFAULT_PROFILE = {"flops": "paper"}


def _line_of(text: str, key: str) -> str:
    needle = json.dumps(key)
    for no, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return f" (line {no})"
    return ""


def _coerce(kind: str, key: str, value):
    def bad(what):
        return ConfigError(f"config key {key!r}: expected {what}, got {value!r}")

    def is_num(v):
        return isinstance(v, (int, float)) and not isinstance(v, bool)

    optional = kind.endswith("?")
    base = kind.rstrip("?")
    if value is None and optional:
        return None
    if base == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise bad("an integer")
        return value
    if base == "float":
        if not is_num(value):
            raise bad("a number")
        return float(value)
    if base == "str":
        if not isinstance(value, str):
            raise bad("a string")
        return value
    if base == "range":
        if not (isinstance(value, list) and len(value) == 2 and all(is_num(v) for v in value)
                and 0 < value[0] <= value[1]):
            raise bad("[low, high] with 0 < low <= high")
        return [float(v) for v in value]
    if base == "snr":
        if value is None:
            return None
        if is_num(value):
            return float(value)
        if isinstance(value, list) and len(value) == 2 and all(is_num(v) for v in value) and value[0] <= value[1]:
            return [float(v) for v in value]
        raise bad("null, a number or [low, high]")
    if base == "floatlist":
        if not (isinstance(value, list) and all(is_num(v) for v in value)):
            raise bad("a list of numbers")
        return [float(v) for v in value]
    if base == "strlist":
        if not (isinstance(value, list) and all(isinstance(v, str) for v in value)):
            raise bad("a list of strings")
        return list(value)
    if base == "strdict":
        if not (isinstance(value, dict) and all(isinstance(v, str) for v in value.values())):
            raise bad("an object of strings")
        return dict(value)
    raise AssertionError(kind)


def resolve_config(command: str, text: str | None = None, profile: str | None = None,
                   seed: int | None = None, source: str = "<config>") -> dict:
    """Materialise every key of ``command``'s schema; raises ConfigError."""
    schema = SCHEMAS[command]
    if text is None and profile is None:
        profile = DEFAULT_PROFILE.get(command, "desk")
    given = {}
    if text is not None:
        try:
            given = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}")
        if not isinstance(given, dict):
            raise ConfigError(f"{source}: top level must be a JSON object")
        for key in given:
            if key not in schema:
                raise ConfigError(f"{source}: unknown key {key!r}{_line_of(text, key)}")
    merged = dict(PROFILES[profile][command]) if profile else {}
    merged.update(given)
    if seed is not None:
        merged["seed"] = seed
    out = {}
    for key, (kind, default) in schema.items():
        if key in merged:
            try:
                out[key] = _coerce(kind, key, merged[key])
            except ConfigError as exc:
                where = _line_of(text, key) if text and key in given else ""
                raise ConfigError(f"{source}: {exc}{where}") from None
        elif default is REQUIRED:
            raise ConfigError(f"{source}: missing required key {key!r}")
        else:
            out[key] = json.loads(json.dumps(default))
    if out["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"{source}: unsupported schema_version {out['schema_version']}")
    if out["seed"] < 0 or out["seed"] >= 2**64:
        raise ConfigError(f"{source}: seed must fit in an unsigned 64-bit integer")
    return out


# ---------------------------------------------------------------------------
# config -> library objects


def _array(cfg) -> ArrayConfig:
    try:
        return ArrayConfig(cfg["M"], cfg["lam"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _snr_policy(value) -> SnrPolicy:
    if value is None:
        return SnrPolicy.none()
    if isinstance(value, float):
        return SnrPolicy.fixed(value)
    return SnrPolicy.uniform(*value)


def model_config(cfg: dict):
    try:
        if cfg["model"] == "matcenet":
            kw = {} if cfg["n_conv_blocks"] is None else {"n_conv_blocks": cfg["n_conv_blocks"]}
            return MatCenetConfig(M=cfg["M"], F=cfg["F"], n_heads=cfg["n_heads"], ffn_hidden=cfg["ffn_hidden"],
                                  n_encoders=cfg["n_encoders"], **kw)
        if cfg["model"] == "xlcnet":
            kw = {} if cfg["n_conv_blocks"] is None else {"n_conv_blocks": cfg["n_conv_blocks"]}
            return XlcnetConfig(M=cfg["M"], F=cfg["F"], **kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    raise ConfigError(f"unknown model {cfg['model']!r}; choose matcenet or xlcnet")


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(n_train=cfg["n_train"], n_val=cfg["n_val"], batch_size=cfg["batch_size"],
                           n_epochs=cfg["n_epochs"], learning_rate=cfg["learning_rate"],
                           train_L=cfg["train_L"], train_L0=cfg["train_L0"], snr_low_db=cfg["snr_low_db"],
                           snr_high_db=cfg["snr_high_db"], seed=cfg["seed"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def experiment_config(cfg: dict) -> ExperimentConfig:
    kw = {k: cfg[k] for k in ("scenario", "M", "lam", "L", "L0", "sweep_snr_db", "n_test", "n_cov",
                              "omp_angles", "omp_rings", "seed")}
    try:
        return ExperimentConfig(snr_grid=tuple(cfg["snr_grid"]), estimators=tuple(cfg["estimators"]),
                                r_range=tuple(cfg["r_range"]) if cfg["r_range"] else None,
                                checkpoints=dict(cfg["checkpoints"]), **kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# commands


def _manifest_path(out: str) -> str:
    return out + ".manifest.json"


def write_manifest(command: str, cfg: dict, artifacts: list[str], t0: float, out: str, **extra) -> str:
    path = _manifest_path(out)
    manifest = {
        "command": command,
        "config": cfg,
        "config_hash": extra.pop("hash", None) or config_hash(cfg),
        "seed": cfg["seed"],
        "artifacts": [os.fspath(a) for a in artifacts] + [path],
        "version": __version__,
        "wall_seconds": round(time.perf_counter() - t0, 3),
        **extra,
    }
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _require_out(args):
    if not args.out:
        raise UsageError(f"{args.command}: --out PATH is required")
    return args.out


def cmd_generate(args, cfg: dict) -> int:
    out = _require_out(args)
    array = _array(cfg)
    r_range = tuple(cfg["r_range"]) if cfg["r_range"] else near_field_range(array)
    try:
        ccfg = ChannelConfig(array, cfg["L"], cfg["L0"], r_range=r_range)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg["n_samples"] <= 0:
        raise ConfigError("n_samples must be positive")
    t0 = time.perf_counter()
    ds = generate_dataset(ccfg, _snr_policy(cfg["snr_db"]), cfg["n_samples"], cfg["seed"], cfg["split"])
    write_dataset(out, ds)
    write_manifest("generate", cfg, [out], t0, out, r_range=list(r_range))
    log.info("wrote %d samples (M=%d) to %s", len(ds), ds.M, out)
    return 0


def _training_sets(args, cfg, tcfg):
    from .harness import make_training_sets

    sets = None
    if args.dataset is None or args.val is None:
        sets = make_training_sets(cfg["M"], tcfg, cfg["lam"])
    train_set = read_dataset(args.dataset) if args.dataset else sets[0]
    val_set = read_dataset(args.val) if args.val else sets[1]
    for name, ds in (("training", train_set), ("validation", val_set)):
        if ds.M != cfg["M"]:
            raise ConfigError(f"{name} dataset has M={ds.M} but the model config has M={cfg['M']}")
    return train_set, val_set


def cmd_train(args, cfg: dict) -> int:
    out = _require_out(args)
    mcfg = model_config(cfg)
    tcfg = train_config(cfg)
    dtype = {"float32": np.float32, "float64": np.float64}.get(cfg["dtype"])
    if dtype is None:
        raise ConfigError(f"dtype must be float32 or float64, got {cfg['dtype']!r}")
    train_set, val_set = _training_sets(args, cfg, tcfg)
    log_path = os.path.splitext(out)[0] + ".log.csv"
    t0 = time.perf_counter()

    optimizer, start = None, 0
    if args.resume and os.path.exists(out):
        model, start, optimizer = load_training_state(out, cfg["learning_rate"], dtype)
        if model.cfg != mcfg:
            raise ConfigError(f"{out}: checkpoint architecture {model.cfg.descriptor()!r} "
                              f"differs from config {mcfg.descriptor()!r}")
    else:
        model = init_model(mcfg, cfg["seed"], dtype)
    resuming = start > 0 and os.path.exists(log_path)
    if start:
        # n_epochs is the total, so a resumed run stops where a fresh one would
        if start >= tcfg.n_epochs:
            log.warning("%s is already at epoch %d of %d; nothing to do", out, start, tcfg.n_epochs)
            return 0
        tcfg = dataclasses.replace(tcfg, n_epochs=tcfg.n_epochs - start)

    wall = not args.deterministic
    log_file = open(log_path, "a" if resuming else "w")
    if not resuming:
        log_file.write(history_csv([], wall))

    def on_epoch(rec):
        # keep the log current so a diverged run leaves its history behind
        log_file.write(history_csv([rec], wall).split("\n", 1)[1])
        log_file.flush()
        log.info("epoch %d  loss %.4f  val %.3f dB", rec.epoch, rec.train_loss, rec.val_nmse_db)

    try:
        result = train(model, train_set, val_set, tcfg, optimizer=optimizer, start_epoch=start, on_epoch=on_epoch)
    finally:
        log_file.close()
    save_model(out, model, result.last_epoch, result.optimizer)
    write_manifest("train", cfg, [out, log_path], t0, out, descriptor=mcfg.descriptor(),
                   best_epoch=result.best_epoch, best_val_nmse_db=result.best_val_nmse_db,
                   init_val_nmse_db=result.init_val_nmse_db, start_epoch=start,
                   datasets={"train": args.dataset or "generated", "val": args.val or "generated"},
                   train_snr_policy=f"uniform per sample on [{cfg['snr_low_db']}, {cfg['snr_high_db']}] dB",
                   deterministic=bool(args.deterministic))
    return 0


def cmd_eval(args, cfg: dict) -> int:
    for spec in args.checkpoint or []:
        name, sep, path = spec.partition("=")
        if not sep or not name or not path:
            raise UsageError(f"--checkpoint expects NAME=PATH, got {spec!r}")
        cfg["checkpoints"][name] = path
    for name in cfg["checkpoints"]:
        if name not in ("xlcnet", "matcenet"):
            raise ConfigError(f"checkpoint name must be xlcnet or matcenet, got {name!r}")
    exp = experiment_config(cfg)
    for name in ("xlcnet", "matcenet"):
        path = exp.checkpoints.get(name)
        if name in exp.estimators and (path is None or not os.path.exists(path)):
            raise ConfigError(f"estimator {name!r} needs an existing checkpoint, got {path!r}")
    t0 = time.perf_counter()
    report = run_experiment(exp)
    text = report.to_csv()
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
        write_manifest("eval", cfg, [args.out], t0, args.out, hash=report.config_hash,
                       experiment=exp.to_dict(), notes=report.metadata)
    else:
        sys.stdout.write(text)
    return 0


def cmd_flops(args, cfg: dict) -> int:
    reports = []
    for name in cfg["models"]:
        if name == "matcenet":
            mcfg = model_config({**cfg, "model": "matcenet", "n_conv_blocks": None})
        elif name == "xlcnet":
            mcfg = model_config({**cfg, "model": "xlcnet", "F": cfg["xlcnet_F"], "n_conv_blocks": None})
        else:
            raise ConfigError(f"unknown model {name!r}; choose matcenet or xlcnet")
        reports.append(count_params_flops(build_model(mcfg, np.random.default_rng(0), np.float32)))
    if not reports:
        raise ConfigError("models list is empty")
    lines = ["model,layer,kind,params,macs,flops"]
    for rep in reports:
        lines += [f"{rep.model},{row}" for row in rep.to_csv().splitlines()[1:]]
    text = "\n".join(lines) + "\n"
    notes = [f"{rep.model}: {a}" for rep in reports for a in rep.assumptions]
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
        write_manifest("flops", cfg, [args.out], time.perf_counter(), args.out, assumptions=notes)
    else:
        sys.stdout.write(text)
    for rep in reports:
        sys.stderr.write(f"{rep.model}: {rep.total_params} params, {rep.total_macs} MACs, "
                         f"{rep.total_flops} FLOPs\n")
    for note in notes:
        sys.stderr.write(f"  note: {note}\n")
    return 0


def cmd_verify(args, cfg: dict) -> int:
    from .verify import SUITES, run_verify

    suites = args.suite or list(SUITES)
    for s in suites:
        if s not in SUITES:
            raise UsageError(f"unknown suite {s!r}; choose from {', '.join(SUITES)}")
    checks = run_verify(suites)
    for c in checks:
        print(c.line())
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return 2 if failed else 0


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "flops": cmd_flops,
            "verify": cmd_verify}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config; unknown keys are errors")
    common.add_argument("--seed", type=int, metavar="U64", help="master seed (overrides the config)")
    common.add_argument("--out", metavar="PATH", help="main output file")
    common.add_argument("--deterministic", action="store_true",
                        help="serial, byte-reproducible outputs (no wall-clock columns)")
    common.add_argument("--profile", choices=sorted(PROFILES), help="preset defaults under the config")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="xlmimo", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"xlmimo {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("generate", parents=[common], help="write an XLCE dataset")
    p = sub.add_parser("train", parents=[common], help="train a network, write an XLNW checkpoint")
    p.add_argument("--dataset", metavar="PATH", help="XLCE training set (default: generated from config)")
    p.add_argument("--val", metavar="PATH", help="XLCE validation set (default: generated from config)")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint at --out")
    p = sub.add_parser("eval", parents=[common], help="NMSE experiment, write results CSV")
    p.add_argument("--checkpoint", action="append", metavar="NAME=PATH",
                   help=f"network checkpoint; NAME in xlcnet, matcenet (estimators: {', '.join(ESTIMATORS)}; "
                        f"scenarios: {', '.join(SCENARIOS)})")
    sub.add_parser("flops", parents=[common], help="parameter and MAC counts per layer")
    p = sub.add_parser("verify", parents=[common], help="run the built-in oracle and gradient checks")
    p.add_argument("--suite", action="append", metavar="NAME", help="restrict to a suite (repeatable)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        text = None
        if args.config:
            try:
                with open(args.config) as f:
                    text = f.read()
            except OSError as exc:
                raise ConfigError(f"cannot read config {args.config!r}: {exc.strerror}") from None
        if args.command == "verify":
            cfg = {}
        else:
            cfg = resolve_config(args.command, text, args.profile, args.seed, args.config or "<profile>")
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, UsageError, FormatError) as exc:
        print(f"xlmimo {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(f"xlmimo {args.command}: training diverged: {exc}", file=sys.stderr)
        return 2
    except (OSError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"xlmimo {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
