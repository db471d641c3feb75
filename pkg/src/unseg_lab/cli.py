"""Command-line entry point: ``unseg-lab <subcommand> [options]``.

Config precedence is CLI flag > ``--config`` file > built-in default. The
resolved configuration is written to ``run.json`` in every output directory;
passing that file back through ``--config`` reproduces the run.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid config.
Failures print one JSON line on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import torch

from . import __version__

log = logging.getLogger("unseg_lab")

EXIT_RUNTIME, EXIT_USAGE, EXIT_CONFIG = 1, 2, 3
HOME_ENV = "UNSEG_LAB_HOME"


class ConfigError(ValueError):
    pass


def artifact_home() -> Path:
    return Path(os.environ.get(HOME_ENV, "unseg_runs"))


def set_deterministic(seed: int, deterministic: bool) -> None:
    import random

    import numpy as np

    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


# defaults per subcommand; every key may also come from --config or a flag
DEFAULTS = {
    "gen-data": {"kind": "semantic", "n_train": 2000, "n_val": 500, "size": 64, "num_classes": 9,
                 "prompt_kind": "mask"},
    "train-generator": {"data": None, "resume": False, "bilevel": {}},
    "protect": {"plan": None, "generator": None},
    "train-victim": {"data": None, "val_data": None, "arch": "conv_fcn", "epochs": 12, "batch_size": 32,
                     "lr": 1e-3, "eval_every": 1, "defense": "none"},
    "evaluate": {"model": None, "data": None, "split": "val"},
    "sweep": {"experiment": {}},
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--deterministic", action="store_true", default=None)
    p.add_argument("--config", type=Path, default=None, help="JSON config file (or a previous run.json)")
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unseg-lab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic IIS or semantic corpus")
    _common(p)
    p.add_argument("--kind", choices=("iis", "semantic"))
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--prompt-kind", choices=("point", "box", "mask"))

    p = sub.add_parser("train-generator", help="bilevel training of the noise generator")
    _common(p)
    p.add_argument("--data", type=Path, help="IIS dataset directory")
    p.add_argument("--resume", action="store_true", default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one bilevel config key (JSON value)")

    p = sub.add_parser("protect", help="make a dataset unlearnable")
    _common(p)
    p.add_argument("--plan", type=Path)
    p.add_argument("--generator", type=Path)

    p = sub.add_parser("train-victim", help="train one victim model and report clean val mIoU")
    _common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--val-data", type=Path, help="dataset providing the clean val split (default: --data)")
    p.add_argument("--arch", choices=("conv_fcn", "token_seg"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--defense", choices=("none", "gaussian", "jpeg"))

    p = sub.add_parser("evaluate", help="evaluate a victim checkpoint")
    _common(p)
    p.add_argument("--model", type=Path)
    p.add_argument("--data", type=Path)
    p.add_argument("--split")

    p = sub.add_parser("sweep", help="run an experiment matrix")
    _common(p)
    return parser


def _load_config_file(path: Path | None, command: str) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text("utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    if "subcommand" in doc and "config" in doc:  # a previous run.json
        if doc["subcommand"] != command:
            raise ConfigError(f"run.json is for {doc['subcommand']!r}, not {command!r}")
        return doc["config"]
    return doc


def resolve_config(args: argparse.Namespace) -> dict:
    command = args.command
    cfg = json.loads(json.dumps(DEFAULTS[command]))
    cfg.update({"seed": 0, "deterministic": False, "workers": 1, "out": None})
    file_cfg = _load_config_file(args.config, command)
    if command == "sweep" and "experiment" not in file_cfg:
        file_cfg = {"experiment": file_cfg} if file_cfg else {}
    unknown = set(file_cfg) - set(cfg)
    if unknown:
        raise ConfigError(f"unknown config keys for {command}: {sorted(unknown)}")
    cfg.update(file_cfg)
    for key, val in vars(args).items():
        if key in ("command", "config", "verbose", "set") or val is None:
            continue
        cfg[key] = str(val) if isinstance(val, Path) else val
    if command == "train-generator":
        bil = dict(cfg.get("bilevel") or {})
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            try:
                bil[k] = json.loads(v)
            except json.JSONDecodeError:
                bil[k] = v
        cfg["bilevel"] = bil
    return cfg


def _run_dir(cfg: dict, command: str) -> Path:
    from .evalharness import config_digest

    if cfg.get("out"):
        out = Path(cfg["out"])
        if command == "sweep":
            stamp = time.strftime("%Y%m%d-%H%M%S")
            out = out / f"{stamp}-{config_digest(cfg['experiment'])}"
        return out
    stamp = time.strftime("%Y%m%d-%H%M%S")
    return artifact_home() / command / f"{stamp}-{config_digest(cfg)}"


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if not cfg.get(k)]
    if missing:
        raise ConfigError(f"missing required setting(s): {', '.join(missing)}")


def _write_run_json(out: Path, command: str, cfg: dict) -> None:
    from .data import atomic_write_bytes

    doc = {"subcommand": command, "version": __version__, "config": cfg}
    atomic_write_bytes(out / "run.json", json.dumps(doc, indent=2, sort_keys=True).encode("utf-8"))


# ------------------------------------------------------------- subcommands


def prepare(command: str, cfg: dict):
    """Validate config and build the objects a subcommand needs (errors here exit 3)."""
    if command == "gen-data":
        if cfg["kind"] not in ("iis", "semantic"):
            raise ConfigError(f"unknown dataset kind {cfg['kind']!r}")
        for k in ("n_train", "n_val", "size", "num_classes"):
            if not isinstance(cfg[k], int):
                raise ConfigError(f"{k} must be an integer")
        return None
    if command == "train-generator":
        from .bilevel import BilevelConfig

        _require(cfg, "data")
        bil = dict(cfg["bilevel"])
        bil.setdefault("seed", cfg["seed"])
        try:
            return BilevelConfig.from_dict(bil)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
    if command == "protect":
        from .protect import ProtectionPlan

        _require(cfg, "plan")
        try:
            plan = ProtectionPlan.load(cfg["plan"])
        except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid plan: {exc}") from exc
        if plan.method == "unseg" and not cfg.get("generator"):
            raise ConfigError("method 'unseg' requires --generator")
        return plan
    if command == "train-victim":
        from .evalharness import VictimTrainConfig

        _require(cfg, "data")
        try:
            return VictimTrainConfig(arch=cfg["arch"], epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                                     lr=cfg["lr"], seed=cfg["seed"], eval_every=cfg["eval_every"],
                                     defense=cfg["defense"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
    if command == "evaluate":
        _require(cfg, "model", "data")
        return None
    if command == "sweep":
        from .evalharness import ExperimentSpec

        if not cfg["experiment"]:
            raise ConfigError("sweep needs an experiment description via --config")
        base = Path(cfg["config"]).parent if cfg.get("config") else None
        try:
            return ExperimentSpec.from_json(cfg["experiment"], base)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid experiment: {exc}") from exc
    raise ConfigError(f"unknown subcommand {command!r}")


def execute(command: str, cfg: dict, obj, out: Path) -> dict:
    if command == "gen-data":
        from .datagen import gen_downstream_dataset, gen_iis_dataset

        if cfg["kind"] == "iis":
            m = gen_iis_dataset(cfg["seed"], cfg["n_train"], cfg["n_val"], cfg["size"], out,
                                prompt_kind=cfg["prompt_kind"], workers=cfg["workers"])
        else:
            m = gen_downstream_dataset(cfg["seed"], cfg["n_train"], cfg["n_val"], cfg["size"],
                                       cfg["num_classes"], out, workers=cfg["workers"])
        return {"manifest": str(m.root / "manifest.json"), "digest": m.digest(), "records": len(m.records)}
    if command == "train-generator":
        from .bilevel import IISTensors, run_bilevel
        from .data import DatasetManifest

        data = IISTensors.from_manifest(DatasetManifest.load(cfg["data"]))
        res = run_bilevel(obj, data, out, resume=bool(cfg["resume"]))
        return {"generator": str(res.checkpoint), "wall_clock": round(res.log.wall_clock, 1)}
    if command == "protect":
        from .protect import protect_dataset
        from .segmodel import load_checkpoint

        gen = load_checkpoint(cfg["generator"])[0] if cfg.get("generator") else None
        m = protect_dataset(obj, out, generator=gen)
        return {"manifest": str(m.root / "manifest.json"), "digest": m.digest()}
    if command == "train-victim":
        from .data import DatasetManifest
        from .evalharness import train_victim
        from .segmodel import save_checkpoint

        ds = DatasetManifest.load(cfg["data"])
        val = DatasetManifest.load(cfg["val_data"]) if cfg.get("val_data") else None
        model, report = train_victim(ds, obj, val=val)
        save_checkpoint(out / "victim.ckpt", model, seed=cfg["seed"], step=report.best_epoch)
        (out / "report.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True))
        return {"miou": report.miou, "best_epoch": report.best_epoch}
    if command == "evaluate":
        from .data import DatasetManifest
        from .evalharness import evaluate_victim
        from .segmodel import load_checkpoint

        model, _ = load_checkpoint(cfg["model"])
        m, per = evaluate_victim(model, DatasetManifest.load(cfg["data"]), cfg["split"])
        doc = {"miou": m, "per_class_iou": [None if v != v else float(v) for v in per]}
        (out / "metrics.json").write_text(json.dumps(doc, indent=2))
        return doc
    if command == "sweep":
        from .evalharness import run_experiment

        reports = run_experiment(obj, out, workers=cfg["workers"])
        return {"cells": len(reports), "csv": str(out / "consolidated.csv")}
    raise ConfigError(f"unknown subcommand {command!r}")


def _fail(code: int, exc: BaseException) -> int:
    print(json.dumps({"error": str(exc), "type": type(exc).__name__, "exit_code": code}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        obj = prepare(args.command, cfg)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    set_deterministic(cfg["seed"], cfg["deterministic"])
    out = _run_dir(cfg, args.command)
    try:
        out.mkdir(parents=True, exist_ok=True)
        _write_run_json(out, args.command, cfg)
        result = execute(args.command, cfg, obj, out)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.debug("failure", exc_info=True)
        return _fail(EXIT_RUNTIME, exc)
    print(json.dumps({"ok": True, "out": str(out), **result}, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
