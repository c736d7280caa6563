"""Command-line entry point: ``lastadv {train,eval,landscape,transfer,gradmap}``.

Runs are driven by an INI file plus flat ``--key=value`` overrides.  Key
names are unique across sections, so an override never needs the section.
Every run writes ``manifest.json`` with the fully resolved configuration.

Exit codes: 0 ok, 2 config error, 3 io error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import re
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__, seeding
from .attack import AttackConfig, AttackError, fgsm, pgd
from .data import DataFormatError, Dataset, GeometryError, load_cifar_binary, load_idx, synth_blobs
from .evaluator import (input_gradient_map, landscape_grid, robust_evaluation, sample_at,
                        standard_accuracy, transfer_matrix)
from .net import FORMAT_VERSION, Checkpoint, CheckpointError, NetworkSpec, load_checkpoint, save_checkpoint
from .objective import SDConfig
from .trainer import MetricsRecord, Scheduler, TrainConfig, train

logger = logging.getLogger("lastadv")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
METRICS_FORMAT = 1

DEFAULTS: dict[str, dict[str, str]] = {
    "run": {
        "seed": "0",
        "out_dir": "run",
        "threads": "1",
        "record_wall_time": "false",
    },
    "data": {
        "dataset": "blobs",            # blobs | idx | cifar
        "train_images": "",
        "train_labels": "",
        "test_images": "",
        "test_labels": "",
        "train_files": "",             # comma-separated CIFAR batch files
        "test_files": "",
        "num_classes": "10",
        "blob_dim": "784",
        "blob_margin": "1.0",
        "blob_per_class": "100",
        "blob_test_per_class": "20",
        "blob_seed": "0",              # test split uses blob_seed + 1
        "train_limit": "0",            # 0 keeps every example
        "test_limit": "0",
    },
    "model": {
        "hidden": "256",
    },
    "train": {
        "mode": "LAST",
        "epochs": "10",
        "scheduler": "constant",
        "lr": "0.05",
        "milestones": "100,150",
        "lr_factor": "0.1",
        "gamma": "0.8",
        "momentum": "0.9",
        "weight_decay": "5e-4",
        "batch_size": "128",
        "proxy_step": "optimizer",
        "swa_start": "0",
        "swa_eval": "average",
    },
    "attack": {
        "epsilon": "0.1",
        "alpha": "",                   # blank: 1.25 * epsilon for one step, epsilon / 4 otherwise
        "steps": "1",
        "restarts": "1",
        "init": "uniform",
        "pixel_min": "0",
        "pixel_max": "1",
    },
    "sd": {
        "sd": "false",
        "mu": "0.95",
        "tau": "6.0",
        "detach_clean": "true",
        "tau_squared": "false",
    },
    "eval": {
        "eval_attacks": "",            # e.g. "pgd-10@8/255; pgd-50x10@8/255"; blank: PGD-10 at epsilon
        "eval_batch_size": "256",
        "checkpoint": "",
        "checkpoints": "",             # comma-separated, for transfer
        "standard_checkpoint": "",
        "sample_index": "0",
        "landscape_extent": "0.25",
        "landscape_resolution": "21",
    },
}

KEY_SECTION = {key: section for section, keys in DEFAULTS.items() for key in keys}


class ConfigError(ValueError):
    pass


class RunAborted(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# config parsing

def read_config(path: str | None, overrides: list[str]) -> dict[str, dict[str, str]]:
    resolved = {section: dict(keys) for section, keys in DEFAULTS.items()}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as f:
                parser.read_file(f)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        for section in parser.sections():
            if section not in DEFAULTS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, value in parser.items(section):
                if key not in DEFAULTS[section]:
                    hint = f" (it belongs in [{KEY_SECTION[key]}])" if key in KEY_SECTION else ""
                    raise ConfigError(f"unknown key {key!r} in [{section}]{hint}")
                resolved[section][key] = value.strip()
    for item in overrides:
        m = re.fullmatch(r"--([A-Za-z0-9_\-]+)=(.*)", item, re.S)
        if m is None:
            raise ConfigError(f"override {item!r} is not of the form --key=value")
        key = m.group(1).replace("-", "_")
        if key not in KEY_SECTION:
            raise ConfigError(f"unknown key {key!r}")
        resolved[KEY_SECTION[key]][key] = m.group(2).strip()
    return resolved


def parse_number(text: str, name: str) -> float:
    """Float or fraction such as ``8/255``."""
    try:
        return float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"{name}: cannot parse {text!r} as a number") from exc


def parse_int(text: str, name: str) -> int:
    try:
        return int(text.strip())
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {text!r} as an integer") from exc


def parse_bool(text: str, name: str) -> bool:
    states = configparser.ConfigParser.BOOLEAN_STATES
    if text.strip().lower() not in states:
        raise ConfigError(f"{name}: cannot parse {text!r} as a boolean")
    return states[text.strip().lower()]


def parse_int_list(text: str, name: str) -> tuple[int, ...]:
    parts = [p for p in re.split(r"[,\s]+", text.strip()) if p]
    return tuple(parse_int(p, name) for p in parts)


_ATTACK_RE = re.compile(r"(fgsm|pgd)(?:-(\d+))?(?:x(\d+))?@(.+)", re.I)


def parse_attack(text: str, pixel_box) -> AttackConfig:
    """``fgsm@eps``, ``pgd-K@eps`` or ``pgd-KxR@eps`` (eps may be a fraction)."""
    m = _ATTACK_RE.fullmatch(text.strip())
    if m is None:
        raise ConfigError(f"cannot parse attack {text!r}; expected e.g. pgd-10@8/255")
    kind, steps, restarts, eps = m.group(1).lower(), m.group(2), m.group(3), m.group(4)
    eps = parse_number(eps, "attack epsilon")
    restarts = int(restarts) if restarts else 1
    try:
        if kind == "fgsm":
            if steps not in (None, "1"):
                raise ConfigError(f"fgsm takes a single step: {text!r}")
            base = fgsm(eps, pixel_box=pixel_box)
            return AttackConfig(eps, base.alpha, 1, restarts, base.init, pixel_box)
        return pgd(eps, int(steps) if steps else 10, restarts, pixel_box=pixel_box)
    except AttackError as exc:
        raise ConfigError(f"attack {text!r}: {exc}") from exc


def _pixel_box(cfg) -> tuple[float, float]:
    a = cfg["attack"]
    return parse_number(a["pixel_min"], "pixel_min"), parse_number(a["pixel_max"], "pixel_max")


def build_train_attack(cfg) -> AttackConfig:
    a = cfg["attack"]
    eps = parse_number(a["epsilon"], "epsilon")
    steps = parse_int(a["steps"], "steps")
    alpha = parse_number(a["alpha"], "alpha") if a["alpha"] else None
    if alpha is None:
        alpha = 1.25 * eps if steps == 1 else eps / 4
    try:
        return AttackConfig(eps, max(alpha, 1e-12), steps, parse_int(a["restarts"], "restarts"),
                            a["init"], _pixel_box(cfg))
    except AttackError as exc:
        raise ConfigError(str(exc)) from exc


def build_eval_attacks(cfg) -> list[AttackConfig]:
    text = cfg["eval"]["eval_attacks"]
    box = _pixel_box(cfg)
    if not text.strip():
        eps = parse_number(cfg["attack"]["epsilon"], "epsilon")
        return [pgd(eps, 10, 1, pixel_box=box)]
    return [parse_attack(part, box) for part in text.split(";") if part.strip()]


def build_train_config(cfg) -> TrainConfig:
    t, s = cfg["train"], cfg["sd"]
    sd = None
    try:
        if parse_bool(s["sd"], "sd"):
            sd = SDConfig(parse_number(s["mu"], "mu"), parse_number(s["tau"], "tau"),
                          parse_bool(s["detach_clean"], "detach_clean"),
                          parse_bool(s["tau_squared"], "tau_squared"))
        scheduler = Scheduler(t["scheduler"], parse_number(t["lr"], "lr"),
                              parse_int_list(t["milestones"], "milestones"),
                              parse_number(t["lr_factor"], "lr_factor"))
        return TrainConfig(
            mode=t["mode"], epochs=parse_int(t["epochs"], "epochs"), scheduler=scheduler,
            gamma=parse_number(t["gamma"], "gamma"), attack=build_train_attack(cfg),
            eval_attack=build_eval_attacks(cfg)[0], sd=sd,
            momentum=parse_number(t["momentum"], "momentum"),
            weight_decay=parse_number(t["weight_decay"], "weight_decay"),
            batch_size=parse_int(t["batch_size"], "batch_size"), proxy_step=t["proxy_step"],
            swa_start=parse_int(t["swa_start"], "swa_start"), swa_eval=t["swa_eval"],
            eval_batch_size=parse_int(cfg["eval"]["eval_batch_size"], "eval_batch_size"),
            eval_workers=_threads(cfg), seed=parse_int(cfg["run"]["seed"], "seed"))
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _threads(cfg) -> int:
    n = parse_int(cfg["run"]["threads"], "threads")
    if n < 1:
        raise ConfigError("threads must be at least 1")
    return n


# ---------------------------------------------------------------------------
# data

def _limit(ds: Dataset, text: str, name: str) -> Dataset:
    n = parse_int(text, name)
    return ds if n <= 0 or n >= len(ds) else ds.subset(np.arange(n))


def _require(d, *keys):
    for k in keys:
        if not d[k]:
            raise ConfigError(f"{k} must be set for dataset={d['dataset']}")


def load_split(cfg, split: str) -> Dataset:
    d = cfg["data"]
    kind = d["dataset"]
    try:
        if kind == "blobs":
            per_class = d["blob_per_class"] if split == "train" else d["blob_test_per_class"]
            seed = parse_int(d["blob_seed"], "blob_seed") + (0 if split == "train" else 1)
            ds = synth_blobs(parse_int(d["num_classes"], "num_classes"), parse_int(per_class, "per_class"),
                             parse_int(d["blob_dim"], "blob_dim"), parse_number(d["blob_margin"], "blob_margin"),
                             seed, split)
        elif kind == "idx":
            _require(d, f"{split}_images", f"{split}_labels")
            ds = load_idx(d[f"{split}_images"], d[f"{split}_labels"],
                          parse_int(d["num_classes"], "num_classes"), split)
        elif kind == "cifar":
            _require(d, f"{split}_files")
            ds = load_cifar_binary([p.strip() for p in d[f"{split}_files"].split(",") if p.strip()], split)
        else:
            raise ConfigError(f"unknown dataset {kind!r} (blobs, idx or cifar)")
    except GeometryError as exc:
        raise ConfigError(str(exc)) from exc
    return _limit(ds, d[f"{split}_limit"], f"{split}_limit")


def build_spec(cfg, data: Dataset) -> NetworkSpec:
    try:
        return NetworkSpec(data.dim, parse_int_list(cfg["model"]["hidden"], "hidden"), data.num_classes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _load_model(path: str, data: Dataset) -> Checkpoint:
    if not path:
        raise ConfigError("checkpoint must be set")
    ckpt = load_checkpoint(path)
    if ckpt.spec.input_dim != data.dim or ckpt.spec.num_classes != data.num_classes:
        raise CheckpointError(f"{path}: network expects {ckpt.spec.input_dim} inputs / "
                              f"{ckpt.spec.num_classes} classes, data has {data.dim} / {data.num_classes}")
    return ckpt


# ---------------------------------------------------------------------------
# outputs

def _out_dir(cfg) -> Path:
    out = Path(cfg["run"]["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, command: str, cfg, extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "seed": parse_int(cfg["run"]["seed"], "seed"),
        "config": cfg,
        "versions": {"package": __version__, "checkpoint_format": FORMAT_VERSION,
                     "metrics_format": METRICS_FORMAT},
        **(extra or {}),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _eval_seed(cfg) -> int:
    return seeding.derive_seed(parse_int(cfg["run"]["seed"], "seed"), "eval")


# ---------------------------------------------------------------------------
# subcommands

def cmd_train(cfg) -> int:
    train_cfg = build_train_config(cfg)
    with_time = parse_bool(cfg["run"]["record_wall_time"], "record_wall_time")
    train_set, test_set = load_split(cfg, "train"), load_split(cfg, "test")
    spec = build_spec(cfg, train_set)
    out = _out_dir(cfg)
    metrics_path, jsonl_path = out / "metrics.csv", out / "metrics.jsonl"
    with open(metrics_path, "w") as csv_f, open(jsonl_path, "w") as jsonl_f:
        csv_f.write(MetricsRecord.CSV_HEADER + "\n")

        def on_epoch(rec: MetricsRecord):
            csv_f.write(rec.csv_row(with_time) + "\n")
            row = rec.as_dict()
            if not with_time:
                row.pop("seconds")
            jsonl_f.write(json.dumps(row, sort_keys=True) + "\n")
            csv_f.flush()
            jsonl_f.flush()

        result = train(train_cfg, spec, train_set, test_set, on_epoch=on_epoch)
    save_checkpoint(out / "final.ckpt", result.final)
    save_checkpoint(out / "best.ckpt", result.best)
    write_manifest(out, "train", cfg, {"spec": spec.to_dict(), "flags": result.flags,
                                       "aborted": result.aborted, "diagnostic": result.diagnostic})
    for rec in result.metrics:
        print(f"epoch {rec.epoch}: SA {rec.test_standard_accuracy:.2f} RA {rec.test_robust_accuracy:.2f}")
    if result.flags:
        print("flags: " + ", ".join(result.flags))
    if result.aborted:
        raise RunAborted(result.diagnostic)
    return EXIT_OK


def cmd_eval(cfg) -> int:
    attacks = build_eval_attacks(cfg)
    test_set = load_split(cfg, "test")
    ckpt = _load_model(cfg["eval"]["checkpoint"], test_set)
    batch_size = parse_int(cfg["eval"]["eval_batch_size"], "eval_batch_size")
    sa = standard_accuracy(ckpt.spec, ckpt.params, test_set, batch_size)
    out = _out_dir(cfg)
    lines = ["attack,epsilon,steps,restarts,sa,ra,robust_loss"]
    for attack in attacks:
        res = robust_evaluation(ckpt.spec, ckpt.params, test_set, attack, _eval_seed(cfg), batch_size, _threads(cfg))
        lines.append(f"{attack.label},{attack.epsilon:.10g},{attack.steps},{attack.restarts},"
                     f"{sa:.4f},{res.accuracy:.4f},{res.loss:.10g}")
        print(f"{attack.label}: SA {sa:.2f} RA {res.accuracy:.2f}")
    (out / "eval.csv").write_text("\n".join(lines) + "\n")
    write_manifest(out, "eval", cfg)
    return EXIT_OK


def cmd_landscape(cfg) -> int:
    test_set = load_split(cfg, "test")
    ckpt = _load_model(cfg["eval"]["checkpoint"], test_set)
    index = parse_int(cfg["eval"]["sample_index"], "sample_index")
    sample = sample_at(test_set, index)
    seed = seeding.derive_seed(parse_int(cfg["run"]["seed"], "seed"), "landscape", index)
    try:
        grid = landscape_grid(ckpt.spec, ckpt.params, sample,
                              parse_number(cfg["eval"]["landscape_extent"], "landscape_extent"),
                              parse_int(cfg["eval"]["landscape_resolution"], "landscape_resolution"),
                              seed, index)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = _out_dir(cfg)
    grid.write(out / "landscape.csv", out / "landscape.json")
    write_manifest(out, "landscape", cfg, {"gap": grid.gap})
    print(f"loss gap {grid.gap:.6g}")
    return EXIT_OK


def cmd_transfer(cfg) -> int:
    test_set = load_split(cfg, "test")
    paths = [p.strip() for p in cfg["eval"]["checkpoints"].split(",") if p.strip()]
    if not paths:
        raise ConfigError("checkpoints must list at least one model")
    models = []
    for p in paths:
        ckpt = _load_model(p, test_set)
        models.append((Path(p).stem, ckpt.spec, ckpt.params))
    standard = None
    if cfg["eval"]["standard_checkpoint"]:
        ckpt = _load_model(cfg["eval"]["standard_checkpoint"], test_set)
        standard = ("standard", ckpt.spec, ckpt.params)
    attack = build_eval_attacks(cfg)[0]
    matrix = transfer_matrix(models, test_set, attack, _eval_seed(cfg), standard,
                             parse_int(cfg["eval"]["eval_batch_size"], "eval_batch_size"))
    out = _out_dir(cfg)
    matrix.to_csv(out / "transfer.csv")
    write_manifest(out, "transfer", cfg, {"attack": attack.label})
    return EXIT_OK


def cmd_gradmap(cfg) -> int:
    test_set = load_split(cfg, "test")
    ckpt = _load_model(cfg["eval"]["checkpoint"], test_set)
    index = parse_int(cfg["eval"]["sample_index"], "sample_index")
    u, label = sample_at(test_set, index)
    maps = input_gradient_map(ckpt.spec, ckpt.params, u, label, test_set.channels)
    out = _out_dir(cfg)
    files = []
    for c, channel in enumerate(maps):
        grid = channel.reshape(test_set.layout[1:]) if test_set.layout else channel.reshape(1, -1)
        name = f"gradmap_c{c}.csv"
        np.savetxt(out / name, grid, delimiter=",", fmt="%.10g")
        files.append(name)
    write_manifest(out, "gradmap", cfg, {"sample_index": index, "label": label, "files": files})
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "landscape": cmd_landscape,
    "transfer": cmd_transfer,
    "gradmap": cmd_gradmap,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lastadv",
        description="Adversarial training with a proxy-guided update rule.",
        epilog="Any config key can be overridden with --key=value, e.g. --epochs=3 --epsilon=8/255.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", "-c", help="INI config file")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, overrides = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = read_config(args.config, overrides)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IndexError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, DataFormatError, CheckpointError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except RunAborted as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
