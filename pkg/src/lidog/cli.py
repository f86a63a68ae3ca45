"""Command-line front end: ``lidog {gen-synth,train,eval,experiment,export-bev}``.

Configuration is a YAML file with one section per config object. Command-line
flags override the file. Every random stream is derived from ``--seed``.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional

import yaml

from .augment import AugmentConfig
from .bev import BevProjectionConfig, project_labels, write_pgm
from .core import load_scan
from .errors import LidogError
from .eval import (
    ExperimentSpec,
    evaluate,
    miou,
    per_class_iou,
    run_experiment,
    split_train_val,
    write_report,
)
from .net.checkpoint import load_checkpoint, save_checkpoint
from .net.model import ModelConfig
from .synth import DOMAIN_A, DOMAIN_B, SceneSpec, SensorSpec, generate_domain
from .train import TrainConfig, prepare_sample, train, write_loss_log
from .voxel import voxelize

# section name -> (dataclass, keys the CLI manages itself)
SECTIONS = {
    "model": (ModelConfig, ()),
    "train": (TrainConfig, ("seed", "augment")),
    "augment": (AugmentConfig, ("seed",)),
    "bev": (BevProjectionConfig, ()),
    "scene": (SceneSpec, ("seed",)),
}
PLAIN_SECTIONS = {
    "data": {"sources": [], "targets": [], "val_fraction": 0.2},
    "experiment": {"variants": ["lidog", "no_bev"], "bev_area": None, "bev_resolution": 1.0},
    "synth": {"n_scans": 200, "scene_seed_base": 0, "domains": {"A": "DOMAIN_A", "B": "DOMAIN_B"}},
    "eval": {"checkpoint": None},
    "export": {"voxel_size": 0.05, "format": "native"},
}
TOP_LEVEL = {"seed": 0, "workers": 1, "out": "out"}
SENSOR_KEYS = [f.name for f in dataclasses.fields(SensorSpec)]
SENSOR_PRESETS = {"DOMAIN_A": DOMAIN_A, "DOMAIN_B": DOMAIN_B}


def config_keys() -> List[str]:
    keys = list(TOP_LEVEL)
    for name, (cls, managed) in SECTIONS.items():
        keys += [f"{name}.{f.name}" for f in dataclasses.fields(cls) if f.name not in managed]
    for name, defaults in PLAIN_SECTIONS.items():
        keys += [f"{name}.{k}" for k in defaults]
    keys += [f"synth.domains.<name>.{k}" for k in SENSOR_KEYS]
    return keys


class ConfigError(LidogError, ValueError):
    pass


def _tupled(v):
    return tuple(_tupled(x) for x in v) if isinstance(v, list) else v


def _build(cls, section: str, values: dict, managed=(), **extra):
    allowed = {f.name for f in dataclasses.fields(cls)} - set(managed)
    for k in values:
        if k not in allowed:
            raise ConfigError(f"unknown config key '{section}.{k}'")
    return cls(**{k: _tupled(v) for k, v in values.items()}, **extra)


def _sensor(name, value) -> SensorSpec:
    if isinstance(value, str):
        if value not in SENSOR_PRESETS:
            raise ConfigError(f"unknown sensor preset '{value}' for domain '{name}'")
        return SENSOR_PRESETS[value]
    if not isinstance(value, dict):
        raise ConfigError(f"domain '{name}' must be a preset name or a sensor mapping")
    return _build(SensorSpec, f"synth.domains.{name}", value)


@dataclasses.dataclass
class CliConfig:
    seed: int
    workers: int
    out: str
    model: ModelConfig
    train: TrainConfig
    bev: BevProjectionConfig
    scene: SceneSpec
    data: dict
    experiment: dict
    synth: dict
    eval: dict
    export: dict


def load_config(path: Optional[str], args=None) -> CliConfig:
    raw = {}
    if path:
        with open(path) as f:
            raw = yaml.safe_load(f) or {}
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a mapping")
    for k in raw:
        if k not in TOP_LEVEL and k not in SECTIONS and k not in PLAIN_SECTIONS:
            raise ConfigError(f"unknown config key '{k}'")
    top = {k: raw.get(k, v) for k, v in TOP_LEVEL.items()}
    plain = {}
    for name, defaults in PLAIN_SECTIONS.items():
        sec = raw.get(name) or {}
        for k in sec:
            if k not in defaults:
                raise ConfigError(f"unknown config key '{name}.{k}'")
        plain[name] = {**defaults, **sec}
    sec = {name: dict(raw.get(name) or {}) for name in SECTIONS}

    if args is not None:
        if getattr(args, "seed", None) is not None:
            top["seed"] = args.seed
        if getattr(args, "workers", None) is not None:
            top["workers"] = args.workers
        if getattr(args, "out", None) is not None:
            top["out"] = args.out
        if getattr(args, "bev_area", None) is not None:
            plain["experiment"]["bev_area"] = args.bev_area
        if getattr(args, "bev_res", None) is not None:
            plain["experiment"]["bev_resolution"] = args.bev_res
        variants = None
        if getattr(args, "no_bev", False):
            variants = ["no_bev"]
        if getattr(args, "double_head", False):
            variants = (variants or []) + ["double_head"]
        if variants:
            plain["experiment"]["variants"] = variants
            if "lidog" not in variants:
                sec["model"]["use_bev"] = False
            if "double_head" in variants and "no_bev" not in variants:
                sec["model"]["double_head"] = True

    seed = int(top["seed"])
    augment = _build(AugmentConfig, "augment", sec["augment"], ("seed",), seed=seed)
    return CliConfig(
        seed=seed,
        workers=max(1, int(top["workers"])),
        out=str(top["out"]),
        model=_build(ModelConfig, "model", sec["model"]),
        train=_build(TrainConfig, "train", sec["train"], ("seed", "augment"), seed=seed, augment=augment),
        bev=_build(BevProjectionConfig, "bev", sec["bev"]),
        scene=_build(SceneSpec, "scene", sec["scene"], ("seed",)),
        **plain,
    )


def _projection(cfg: CliConfig) -> BevProjectionConfig:
    bev = cfg.bev
    if cfg.experiment["bev_area"] is not None:
        bev = bev.with_area(float(cfg.experiment["bev_area"]))
    return bev.with_resolution(float(cfg.experiment["bev_resolution"]))


def _load_datasets(paths, workers):
    from .eval import load_dataset

    for p in paths:
        if not os.path.isdir(p):
            raise ConfigError(f"dataset path does not exist: {p}")
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return dict(zip(paths, pool.map(load_dataset, paths)))


def cmd_gen_synth(cfg: CliConfig) -> int:
    syn = cfg.synth
    base = int(syn["scene_seed_base"]) + cfg.seed
    for name, value in syn["domains"].items():
        out = os.path.join(cfg.out, str(name))
        generate_domain(int(syn["n_scans"]), base, _sensor(name, value), out, cfg.scene)
        print(f"wrote {syn['n_scans']} scans to {out}")
    return 0


def cmd_train(cfg: CliConfig) -> int:
    sources = cfg.data["sources"]
    if not sources:
        raise ConfigError("data.sources is empty")
    data = _load_datasets(sources, cfg.workers)
    train_sets = [split_train_val(data[p], cfg.data["val_fraction"])[0] for p in sources]
    os.makedirs(cfg.out, exist_ok=True)
    result = train(
        cfg.model,
        train_sets,
        cfg.train,
        _projection(cfg) if cfg.model.use_bev else None,
        log_path=os.path.join(cfg.out, "loss.csv"),
    )
    path = os.path.join(cfg.out, "model.ckpt")
    save_checkpoint(path, result.params, cfg.model)
    print(f"checkpoint: {path}")
    return 0


def cmd_eval(cfg: CliConfig) -> int:
    ckpt = cfg.eval["checkpoint"] or os.path.join(cfg.out, "model.ckpt")
    if not os.path.exists(ckpt):
        raise ConfigError(f"checkpoint does not exist: {ckpt}")
    params, model_cfg = load_checkpoint(ckpt)
    paths = list(cfg.data["targets"]) or list(cfg.data["sources"])
    data = _load_datasets(paths, cfg.workers)
    print("split".ljust(20) + "miou")
    for p in paths:
        samples = [prepare_sample(c, cfg.train.voxel_size, model_cfg.n_levels, cfg.train.count_cap) for c in data[p]]
        cm = evaluate(params, model_cfg, samples)
        m = miou(cm)
        print(os.path.basename(os.path.normpath(p)).ljust(20) + ("-" if m is None else f"{m:.2f}"))
        print("  " + " ".join("-" if v is None else f"{v:.1f}" for v in per_class_iou(cm)))
    return 0


def cmd_experiment(cfg: CliConfig) -> int:
    spec = ExperimentSpec(
        sources=list(cfg.data["sources"]),
        targets=list(cfg.data["targets"]),
        model=cfg.model,
        train=cfg.train,
        bev=cfg.bev,
        variants=tuple(cfg.experiment["variants"]),
        bev_area=cfg.experiment["bev_area"],
        bev_resolution=float(cfg.experiment["bev_resolution"]),
        val_fraction=float(cfg.data["val_fraction"]),
    )
    data = _load_datasets(spec.sources + spec.targets, cfg.workers)
    report = run_experiment(spec, data)
    path = write_report(report, cfg.out)
    for variant, blob in report.checkpoints.items():
        with open(os.path.join(cfg.out, f"{variant}.ckpt"), "wb") as f:
            f.write(blob)
    for variant, rows in report.logs.items():
        write_loss_log(rows, os.path.join(cfg.out, f"{variant}_loss.csv"))
    print(report.table())
    print(f"report: {path}")
    return 0


def cmd_export_bev(cfg: CliConfig, scan: str, image: str) -> int:
    if not os.path.exists(scan):
        raise ConfigError(f"scan does not exist: {scan}")
    cloud = load_scan(scan, cfg.export["format"])
    if cloud.labels is None:
        raise ConfigError(f"scan has no labels: {scan}")
    grid = voxelize(cloud, float(cfg.export["voxel_size"]))
    write_pgm(project_labels(grid, _projection(cfg)), image)
    print(f"wrote {image}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    epilog = "config keys:\n" + "\n".join(f"  {k}" for k in config_keys())
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML config file")
    common.add_argument("--seed", type=int, metavar="U64", help="root seed for every random stream")
    common.add_argument("--workers", type=int, metavar="N", help="data loading threads")
    common.add_argument("--no-bev", action="store_true", help="train without the BEV branch")
    common.add_argument("--double-head", action="store_true", help="add the double-head 3D variant")
    common.add_argument("--bev-area", type=float, metavar="METERS", help="side of the square BEV area")
    common.add_argument("--bev-res", type=float, choices=(0.5, 0.75, 1.0), help="BEV raster size fraction")
    common.add_argument("--out", metavar="DIR", help="output directory")

    p = argparse.ArgumentParser(
        prog="lidog", description=__doc__, epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter
    )
    sub = p.add_subparsers(dest="command", required=True)
    kw = dict(parents=[common], epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub.add_parser("gen-synth", help="simulate labeled scans for each configured sensor", **kw)
    sub.add_parser("train", help="train on the source datasets", **kw)
    sub.add_parser("eval", help="score a checkpoint on datasets", **kw)
    sub.add_parser("experiment", help="train variants and write the cross-domain report", **kw)
    ex = sub.add_parser("export-bev", help="write the BEV label raster of a scan as PGM", **kw)
    ex.add_argument("scan", help="labeled scan file")
    ex.add_argument("image", help="output .pgm path")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args)
        if args.command == "gen-synth":
            return cmd_gen_synth(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "experiment":
            return cmd_experiment(cfg)
        return cmd_export_bev(cfg, args.scan, args.image)
    except (LidogError, OSError, yaml.YAMLError) as exc:
        print(f"lidog: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
