"""Command-line entry point.

Subcommands: split, synth, train, eval, analyze. Every option can also be
supplied through a flat JSON config file (--config); explicit flags win
over config-file values, which win over defaults. The effective
configuration is echoed to resolved-config.json in the output directory.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import data as data_mod
from . import evaluation, propensity, trainer
from .embedding import load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, NumericalError

log = logging.getLogger(__name__)

DEFAULT_OUT_DIR = "debias-cf-out"

_SPLIT_DEFAULTS = {
    "data": None,
    "test_frac": 0.1,
    "valid_frac": 0.1,
    "seed": 0,
    "sampling": "per_item",
    "lenient": False,
    "out_dir": DEFAULT_OUT_DIR,
}

_SYNTH_DEFAULTS = {
    "m": 200,
    "n": 300,
    "skew": 1.0,
    "seed": 0,
    "test_frac": 0.1,
    "valid_frac": 0.1,
    "sampling": "per_item",
    "out_dir": DEFAULT_OUT_DIR,
}

_TRAIN_DEFAULTS = {
    "data_dir": DEFAULT_OUT_DIR,
    "objective": "directau",
    "d": 64,
    "gamma": 1.0,
    "lambda_rel": 1.0,
    "mu": 0.1,
    "lr": 1e-3,
    "weight_decay": 0.0,
    "batch_size": 1024,
    "epochs": 100,
    "seed": 0,
    "eval_every": 10,
    "scoring": "dot",
    "init_scale": 0.01,
    "pop_exponent": 0.5,
    "propensity_grad_through": False,
    "alternating": False,
    "dump_propensities": False,
    "out_dir": DEFAULT_OUT_DIR,
}

_EVAL_DEFAULTS = {
    "run_dir": DEFAULT_OUT_DIR,
    "data_dir": DEFAULT_OUT_DIR,
    "k": 20,
    "scoring": "dot",
    "mask_validation": True,
    "per_user": False,
    "out": None,
    "out_dir": None,  # defaults to run_dir
}

_ANALYZE_DEFAULTS = {
    "run_dir": DEFAULT_OUT_DIR,
    "data_dir": DEFAULT_OUT_DIR,
    "ratio": 0.2,
    "pairs": "train",
    "world": None,
    "out": None,
    "out_dir": None,  # defaults to run_dir
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # argparse exits with code 2 on usage errors; we reserve 2 for data
        # errors, so surface usage problems as ConfigError instead.
        raise ConfigError(message)


def _add_options(parser: argparse.ArgumentParser, defaults: dict) -> None:
    for key, default in defaults.items():
        flag = "--" + key.replace("_", "-")
        if isinstance(default, bool):
            group = parser.add_mutually_exclusive_group()
            group.add_argument(flag, dest=key, action="store_true",
                               default=argparse.SUPPRESS)
            group.add_argument("--no-" + key.replace("_", "-"), dest=key,
                               action="store_false", default=argparse.SUPPRESS)
        else:
            typ = str if default is None else type(default)
            parser.add_argument(flag, dest=key, type=typ,
                                default=argparse.SUPPRESS)
    parser.add_argument("--config", dest="config", type=str,
                        default=argparse.SUPPRESS)
    parser.add_argument("--quiet", dest="quiet", action="store_true",
                        default=argparse.SUPPRESS)


def _effective_config(defaults: dict, ns: argparse.Namespace) -> dict:
    values = vars(ns).copy()
    values.pop("command", None)
    quiet = values.pop("quiet", False)
    config_path = values.pop("config", None)
    effective = dict(defaults)
    if config_path:
        try:
            with open(config_path, "r", encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except FileNotFoundError:
            raise DataError(f"config file not found: {config_path}")
        except json.JSONDecodeError as exc:
            raise DataError(f"config file {config_path} is not valid JSON: {exc}")
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a flat JSON object")
        for key, val in file_cfg.items():
            if key not in defaults:
                raise ConfigError(f"unknown config key {key!r}")
            effective[key] = val
    effective.update(values)
    effective["quiet"] = quiet
    return effective


def _write_resolved(cfg: dict, command: str, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot = {"command": command, **cfg}
    with open(out_dir / "resolved-config.json", "w", encoding="utf-8") as fh:
        json.dump(snapshot, fh, indent=2, sort_keys=True)


def _emit_report(payload: dict, out: str | None) -> None:
    text = json.dumps(payload, indent=2)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _cmd_split(cfg: dict) -> int:
    if not cfg["data"]:
        raise ConfigError("split requires --data")
    interactions = data_mod.load_interactions(cfg["data"], lenient=cfg["lenient"])
    bundle = data_mod.split_unbiased_protocol(
        interactions, cfg["test_frac"], cfg["valid_frac"], cfg["seed"],
        sampling=cfg["sampling"],
    )
    out_dir = Path(cfg["out_dir"])
    data_mod.save_split(
        bundle, out_dir, seed=cfg["seed"],
        fractions={"test": cfg["test_frac"], "valid": cfg["valid_frac"]},
    )
    _write_resolved(cfg, "split", out_dir)
    log.info(
        "split: %d train / %d validation / %d test pairs",
        len(bundle.train), len(bundle.validation), len(bundle.test),
    )
    return 0


def _cmd_synth(cfg: dict) -> int:
    world = data_mod.generate_synthetic_world(
        cfg["m"], cfg["n"], cfg["skew"], cfg["seed"]
    )
    clicks = data_mod.sample_clicks(world, cfg["seed"])
    bundle = data_mod.split_unbiased_protocol(
        clicks, cfg["test_frac"], cfg["valid_frac"], cfg["seed"],
        sampling=cfg["sampling"],
    )
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    data_mod.save_world(world, out_dir / "world.bin")
    data_mod.save_split(
        bundle, out_dir, seed=cfg["seed"],
        fractions={"test": cfg["test_frac"], "valid": cfg["valid_frac"]},
    )
    _write_resolved(cfg, "synth", out_dir)
    log.info(
        "synth: %d clicks over %dx%d, split %d/%d/%d",
        len(clicks), cfg["m"], cfg["n"],
        len(bundle.train), len(bundle.validation), len(bundle.test),
    )
    return 0


def _train_config(cfg: dict) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        objective=cfg["objective"],
        d=cfg["d"],
        gamma=cfg["gamma"],
        lambda_rel=cfg["lambda_rel"],
        mu=cfg["mu"],
        lr=cfg["lr"],
        weight_decay=cfg["weight_decay"],
        batch_size=cfg["batch_size"],
        epochs=cfg["epochs"],
        seed=cfg["seed"],
        eval_every=cfg["eval_every"],
        scoring=cfg["scoring"],
        propensity_grad_through=cfg["propensity_grad_through"],
        init_scale=cfg["init_scale"],
        pop_exponent=cfg["pop_exponent"],
        alternating=cfg["alternating"],
    ).validate()


def _cmd_train(cfg: dict) -> int:
    tcfg = _train_config(cfg)
    bundle = data_mod.load_split(cfg["data_dir"])
    world = None
    if tcfg.objective == "ipw_align_oracle":
        world_path = Path(cfg["data_dir"]) / "world.bin"
        if not world_path.exists():
            raise DataError(f"objective ipw_align_oracle needs {world_path}")
        world = data_mod.load_world(world_path)
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_resolved(cfg, "train", out_dir)

    result = trainer.train(bundle, tcfg, world=world, quiet=cfg["quiet"])
    save_checkpoint(result.best_model, result.best_projections,
                    out_dir / "checkpoint.bin")
    with open(out_dir / "train-log.jsonl", "w", encoding="utf-8") as fh:
        for record in result.history:
            fh.write(json.dumps(record) + "\n")
    if cfg["dump_propensities"]:
        est = propensity.learned_propensities(
            result.best_model, result.best_projections, bundle.train.pairs,
            mu=tcfg.mu,
        )
        with open(out_dir / "propensities.tsv", "w", encoding="utf-8") as fh:
            for (u, i), w in zip(bundle.train.pairs, est.values):
                fh.write(f"{u}\t{i}\t{w:.8f}\n")
    log.info(
        "train: objective=%s best_epoch=%s best_val_ndcg20=%s",
        tcfg.objective, result.best_epoch,
        "n/a" if result.best_val_ndcg is None else f"{result.best_val_ndcg:.4f}",
    )
    return 0


def _cmd_eval(cfg: dict) -> int:
    run_dir = Path(cfg["run_dir"])
    model, _ = load_checkpoint(run_dir / "checkpoint.bin")
    bundle = data_mod.load_split(cfg["data_dir"])
    mask_extra = bundle.validation if cfg["mask_validation"] else None
    report = evaluation.evaluate_topk(
        model, bundle.train, bundle.test, k=cfg["k"], scoring=cfg["scoring"],
        mask_extra=mask_extra, per_user=cfg["per_user"],
    )
    out_dir = Path(cfg["out_dir"] or run_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict()
    payload.pop("per_user", None)
    with open(out_dir / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
    if cfg["per_user"] and report.per_user is not None:
        with open(out_dir / "per-user.tsv", "w", encoding="utf-8") as fh:
            for user, recall, ndcg in report.per_user:
                fh.write(f"{user}\t{recall:.8f}\t{ndcg:.8f}\n")
    _write_resolved(cfg, "eval", out_dir)
    _emit_report(payload, cfg["out"])
    return 0


def _cmd_analyze(cfg: dict) -> int:
    run_dir = Path(cfg["run_dir"])
    model, _ = load_checkpoint(run_dir / "checkpoint.bin")
    bundle = data_mod.load_split(cfg["data_dir"])
    pair_sets = {
        "train": bundle.train,
        "validation": bundle.validation,
        "test": bundle.test,
    }
    if cfg["pairs"] not in pair_sets:
        raise ConfigError(f"unknown pair set {cfg['pairs']!r}")
    report = evaluation.group_alignment(
        model,
        pair_sets[cfg["pairs"]],
        bundle.train.user_counts(),
        bundle.train.item_counts(),
        ratio=cfg["ratio"],
    )
    payload = report.to_dict()
    payload["pairs"] = cfg["pairs"]
    if cfg["world"]:
        from .losses import ideal_alignment_loss

        world = data_mod.load_world(cfg["world"])
        payload["ideal_align"] = ideal_alignment_loss(
            model, world, pair_sets[cfg["pairs"]]
        )
    out_dir = Path(cfg["out_dir"] or run_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "group-alignment.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
    _write_resolved(cfg, "analyze", out_dir)
    _emit_report(payload, cfg["out"])
    return 0


_COMMANDS = {
    "split": (_SPLIT_DEFAULTS, _cmd_split),
    "synth": (_SYNTH_DEFAULTS, _cmd_synth),
    "train": (_TRAIN_DEFAULTS, _cmd_train),
    "eval": (_EVAL_DEFAULTS, _cmd_eval),
    "analyze": (_ANALYZE_DEFAULTS, _cmd_analyze),
}


def build_parser() -> _Parser:
    parser = _Parser(prog="debias-cf", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name, (defaults, _) in _COMMANDS.items():
        child = sub.add_parser(name, add_help=True)
        child.error = parser.error  # type: ignore[method-assign]
        _add_options(child, defaults)
    return parser


def run(argv) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    if not getattr(ns, "command", None):
        raise ConfigError("a subcommand is required (split|synth|train|eval|analyze)")
    defaults, handler = _COMMANDS[ns.command]
    cfg = _effective_config(defaults, ns)
    logging.basicConfig(
        level=logging.WARNING if cfg["quiet"] else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    return handler(cfg)


def main(argv=None) -> int:
    try:
        return run(sys.argv[1:] if argv is None else argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1


if __name__ == "__main__":
    sys.exit(main())
