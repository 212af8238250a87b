"""Command-line entry point: ``crossmodal gen-data | toydata | pretrain | eval``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .datasets import (build_eval_pairs, generate_toy_dataset, load_store, object_complete, process_object,
                       split_per_class, write_manifest, write_object)
from .encoders import EncoderConfig, load_checkpoint, save_checkpoint
from .errors import ConfigError, CrossModalError
from .evalkit import (append_csv_row, cross_modality_accuracy, object_image_features, pair_distance_stats,
                      point_features, recognition_probe, retrieval_topk, segmentation_metrics, write_report)
from .mesh_io import read_off, write_off
from .objectives import LossConfig
from .render import RenderConfig
from .trainer import FinetuneConfig, ProbeConfig, TrainConfig, finetune_segmentation, part_mask, predict_parts, pretrain

log = logging.getLogger("crossmodal")

TOY_CLASSES = "sphere,box,cylinder"

# key -> (parser, toy default, full default)
KEYS = {
    "profile": (str, "toy", "full"),
    "seed": (int, 0, 0),
    "data": (str, "data", "data"),
    "out": (str, "runs", "runs"),
    "input": (str, "", ""),
    "classes": (str, "", ""),  # empty: every class in --input, or the toy set
    "per_class": (int, 100, 100),
    "views": (int, 8, 180),
    "width": (int, 32, 224),
    "height": (int, 32, 224),
    "points": (int, 256, 2048),
    "test_fraction": (float, 0.2, 0.2),
    "workers": (int, 0, 0),
    "iters": (int, 2000, 120000),
    "batch_size": (int, 16, 32),
    "lr": (float, 0.001, 0.001),
    "checkpoint_every": (int, 500, 10000),
    "margin": (float, 1.0, 1.0),
    "beta": (float, 1.0, 1.0),
    "deterministic": (bool, True, True),
    "checkpoint": (str, "", ""),
    "test_views": (int, 1, 1),
    "regime": (str, "unfrozen", "unfrozen"),
    "fraction": (float, 1.0, 1.0),
    "epochs": (int, 20, 20),
    "pair_seed": (int, 99, 99),
}


def _parse_bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _convert(key: str, value):
    kind = KEYS[key][0]
    try:
        return _parse_bool(value) if kind is bool else kind(value)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


def read_config_file(path: str | Path) -> dict:
    """Plain ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in KEYS:
            raise ConfigError(f"{path}:{n}: unknown key {key!r}")
        out[key] = _convert(key, value)
    return out


def resolve_config(args: argparse.Namespace) -> dict:
    """Profile defaults, then the config file, then explicit flags. Seed falls back to CROSSMODAL_SEED."""
    from_file = read_config_file(args.config) if getattr(args, "config", None) else {}
    flags = {k: v for k, v in vars(args).items() if k in KEYS and v is not None}
    profile = flags.get("profile", from_file.get("profile", "toy"))
    if profile not in ("toy", "full"):
        raise ConfigError(f"profile must be toy or full, got {profile!r}")
    cfg = {k: spec[1 if profile == "toy" else 2] for k, spec in KEYS.items()}
    cfg.update(from_file)
    if "seed" not in flags and "seed" not in from_file and os.environ.get("CROSSMODAL_SEED"):
        cfg["seed"] = _convert("seed", os.environ["CROSSMODAL_SEED"])
    cfg.update(flags)
    cfg["profile"] = profile
    return cfg


def write_config(cfg: dict, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("".join(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n"
                                  for k, v in sorted(cfg.items())))


def _render_cfg(cfg: dict) -> RenderConfig:
    return RenderConfig(width=cfg["width"], height=cfg["height"], view_count=cfg["views"])


def _encoder_cfg(cfg: dict) -> EncoderConfig:
    return EncoderConfig.toy() if cfg["profile"] == "toy" else EncoderConfig()


def _toy_classes(cfg: dict) -> list[str]:
    return [c for c in (cfg["classes"] or TOY_CLASSES).split(",") if c]


def _workers(cfg: dict) -> int:
    return cfg["workers"] or os.cpu_count() or 1


# ------------------------------------------------------------------ gen-data

def _gen_one(job):
    root, oid, source, cls, render_cfg, n_points, seed = job
    root = Path(root)
    if object_complete(root, oid, render_cfg.view_count, False):
        return oid, "skipped", None
    try:
        mesh = read_off(source, label=cls) if isinstance(source, (str, Path)) else source
        views, cams, cloud, parts = process_object(mesh, render_cfg, n_points, np.random.default_rng(seed))
    except (CrossModalError, UnicodeDecodeError, OSError) as exc:
        return oid, "failed", str(exc)
    write_object(root, oid, views, cams, cloud, parts)
    return oid, "done", None


def _gen_jobs(cfg: dict):
    """(object id, mesh or OFF path, class, split) for every object to generate."""
    rng = np.random.default_rng(cfg["seed"])
    if cfg["input"]:
        root = Path(cfg["input"])
        if not root.is_dir():
            raise ConfigError(f"input directory {root} does not exist")
        wanted = [c for c in cfg["classes"].split(",") if c]
        items = []
        for cls_dir in sorted(p for p in root.iterdir() if p.is_dir()):
            if wanted and cls_dir.name not in wanted:
                continue
            for split in ("train", "test"):
                for path in sorted((cls_dir / split).glob("*.off")):
                    items.append((f"{cls_dir.name}_{split}_{path.stem}", path, cls_dir.name, split))
        return items
    ds = generate_toy_dataset(_toy_classes(cfg), cfg["per_class"], rng)
    splits = split_per_class([m.label for m in ds.meshes], cfg["test_fraction"], rng)
    return [(name, m, m.label, s) for name, m, s in zip(ds.names, ds.meshes, splits)]


def cmd_gen_data(cfg: dict) -> int:
    root = Path(cfg["data"])
    root.mkdir(parents=True, exist_ok=True)
    items = _gen_jobs(cfg)
    seeds = np.random.SeedSequence(cfg["seed"]).generate_state(len(items), np.uint64)
    render_cfg = _render_cfg(cfg)
    jobs = [(str(root), oid, src, cls, render_cfg, cfg["points"], int(s))
            for (oid, src, cls, _), s in zip(items, seeds)]
    workers = min(_workers(cfg), max(1, len(jobs)))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_gen_one, jobs, chunksize=4))
    else:
        results = [_gen_one(j) for j in jobs]
    status = {oid: (s, err) for oid, s, err in results}
    for oid, (s, err) in status.items():
        if s == "failed":
            log.warning("skipping %s: %s", oid, err)
    kept = [it for it in items if status[it[0]][0] != "failed"]
    with_parts = all((root / "parts" / f"{oid}.seg").exists() for oid, *_ in kept) and bool(kept)
    write_manifest(root, [k[0] for k in kept], [k[2] for k in kept], [k[3] for k in kept],
                   cfg["views"], with_parts)
    write_config(cfg, root / "config.txt")
    counts = {s: sum(1 for v in status.values() if v[0] == s) for s in ("done", "skipped", "failed")}
    print(f"objects: {len(kept)}  generated: {counts['done']}  already complete: {counts['skipped']}  "
          f"failed: {counts['failed']}")
    return 0


def cmd_toydata(cfg: dict) -> int:
    """Write toy meshes as OFF files in a ``<class>/<split>/<name>.off`` tree."""
    rng = np.random.default_rng(cfg["seed"])
    ds = generate_toy_dataset(_toy_classes(cfg), cfg["per_class"], rng)
    splits = split_per_class([m.label for m in ds.meshes], cfg["test_fraction"], rng)
    root = Path(cfg["out"])
    for name, mesh, split in zip(ds.names, ds.meshes, splits):
        d = root / mesh.label / split
        d.mkdir(parents=True, exist_ok=True)
        write_off(mesh, d / f"{name}.off")
    print(f"wrote {len(ds.meshes)} meshes under {root}")
    return 0


# ------------------------------------------------------------------ pretrain and eval

def _load_data(cfg: dict):
    root = Path(cfg["data"])
    if not (root / "manifest.csv").exists():
        raise ConfigError(f"no generated dataset at {root}; run gen-data first")
    echo = root / "config.txt"
    size = dict(width=cfg["width"], height=cfg["height"])
    if echo.exists():
        gen = read_config_file(echo)
        size = dict(width=gen.get("width", size["width"]), height=gen.get("height", size["height"]))
    return load_store(root, **size)


def cmd_pretrain(cfg: dict) -> int:
    store = _load_data(cfg)
    out = Path(cfg["out"])
    write_config(cfg, out / "config.txt")
    base = TrainConfig.toy() if cfg["profile"] == "toy" else TrainConfig()
    train_cfg = TrainConfig(**{**base.__dict__, "total_iterations": cfg["iters"], "batch_size": cfg["batch_size"],
                               "lr0": cfg["lr"], "seed": cfg["seed"], "deterministic": cfg["deterministic"],
                               "checkpoint_every": cfg["checkpoint_every"]})
    loss_cfg = LossConfig(margin=cfg["margin"], cross_weight=cfg["beta"])
    _, trace = pretrain(store, _encoder_cfg(cfg), train_cfg, loss_cfg, out_dir=out)
    print(f"trained {len(trace)} iterations; final l_self {trace[-1][3]:.4f}; outputs in {out}")
    return 0


def _checkpoint(cfg: dict, required: bool = True):
    if not cfg["checkpoint"]:
        if required:
            raise ConfigError("--checkpoint is required")
        return None
    return load_checkpoint(cfg["checkpoint"], _encoder_cfg(cfg))


def cmd_eval(protocol: str, cfg: dict) -> int:
    store = _load_data(cfg)
    out = Path(cfg["out"])
    tr, te = store.indices("train"), store.indices("test")
    y = store.labels
    metrics: dict = {"protocol": protocol, "seed": cfg["seed"]}
    if protocol == "probe":
        params = _checkpoint(cfg)
        v = cfg["test_views"]
        probe_cfg = ProbeConfig(seed=cfg["seed"])
        metrics["views"] = v
        metrics["accuracy_2d"] = recognition_probe(object_image_features(params, store, tr, v), y[tr],
                                                   object_image_features(params, store, te, v), y[te], probe_cfg)
        metrics["accuracy_3d"] = recognition_probe(point_features(params, store.clouds[tr]), y[tr],
                                                   point_features(params, store.clouds[te]), y[te], probe_cfg)
        name = f"probe_v{v}"
    elif protocol == "retrieve":
        params = _checkpoint(cfg)
        gallery = len(te) - 1
        ks = tuple(k for k in (1, 5, 10, 20, 50) if k <= gallery)
        metrics["top_k"] = retrieval_topk(point_features(params, store.clouds[te]), None, y[te], ks=ks)
        name = "retrieve"
    elif protocol == "pairs":
        params = _checkpoint(cfg)
        rng = np.random.default_rng(cfg["pair_seed"])
        metrics["cross_modality_accuracy"] = cross_modality_accuracy(params, store,
                                                                     build_eval_pairs(store, "2D-3D", rng))
        metrics["pair_distance"] = pair_distance_stats(params, store, build_eval_pairs(store, "2D-2D", rng))
        name = "pairs"
    elif protocol == "segment":
        if store.parts is None:
            raise ConfigError("segmentation needs per-point part labels in the dataset")
        regime = cfg["regime"]
        base = _checkpoint(cfg, required=regime != "scratch")
        ft = FinetuneConfig(epochs=cfg["epochs"], fraction=cfg["fraction"], seed=cfg["seed"])
        tuned, _ = finetune_segmentation(base, store, regime, ft, enc_cfg=_encoder_cfg(cfg))
        cats = [store.classes[i] for i in te]
        preds = predict_parts(tuned, store.clouds[te], part_mask(cats, tuned.num_parts))
        metrics.update(regime=regime, fraction=cfg["fraction"],
                       segmentation=segmentation_metrics(preds, store.parts[te], cats))
        save_checkpoint(tuned, out / f"segment_{regime}_{cfg['fraction']:g}.ckpt")
        name = f"segment_{regime}_{cfg['fraction']:g}"
    else:
        raise ConfigError(f"unknown protocol {protocol!r}")
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / f"{name}.config.txt")
    write_report(metrics, out / f"{name}.json")
    append_csv_row(metrics, out / f"{name}.csv")
    print((out / f"{name}.json").read_text(), end="")
    return 0


# ------------------------------------------------------------------ parser

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--profile", choices=("toy", "full"))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crossmodal", description="Cross-modal self-supervised 3D features")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render views and sample clouds for a mesh corpus")
    _common(g)
    g.add_argument("--toy", action="store_true", help="generate toy shapes instead of reading --input")
    g.add_argument("--input", help="directory laid out as <class>/<split>/*.off")
    g.add_argument("--data", help="dataset output directory")
    g.add_argument("--classes")
    g.add_argument("--per-class", dest="per_class", type=int)
    g.add_argument("--views", type=int)
    g.add_argument("--width", type=int)
    g.add_argument("--height", type=int)
    g.add_argument("--points", type=int)
    g.add_argument("--test-fraction", dest="test_fraction", type=float)
    g.add_argument("--workers", type=int, help="parallel processes (default: all cores)")

    t = sub.add_parser("toydata", help="write toy meshes as OFF files")
    _common(t)
    t.add_argument("--classes")
    t.add_argument("--per-class", dest="per_class", type=int)
    t.add_argument("--test-fraction", dest="test_fraction", type=float)

    p = sub.add_parser("pretrain", help="joint cross-modal pretraining")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--iters", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--margin", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--deterministic", dest="deterministic", action="store_const", const=True)
    p.add_argument("--no-deterministic", dest="deterministic", action="store_const", const=False)

    e = sub.add_parser("eval", help="run an evaluation protocol")
    e.add_argument("protocol", choices=("probe", "retrieve", "pairs", "segment"))
    _common(e)
    e.add_argument("--data")
    e.add_argument("--checkpoint")
    e.add_argument("--views", dest="test_views", type=int)
    e.add_argument("--regime", choices=("frozen", "unfrozen", "scratch"))
    e.add_argument("--fraction", type=float)
    e.add_argument("--epochs", type=int)
    e.add_argument("--pair-seed", dest="pair_seed", type=int)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "gen-data":
            if not args.toy and not cfg["input"]:
                raise ConfigError("gen-data needs --toy or --input")
            if args.toy:
                cfg["input"] = ""
            return cmd_gen_data(cfg)
        if args.command == "toydata":
            return cmd_toydata(cfg)
        if args.command == "pretrain":
            return cmd_pretrain(cfg)
        return cmd_eval(args.protocol, cfg)
    except ConfigError as exc:
        parser.exit(2, f"crossmodal: error: {exc}\n")
    except CrossModalError as exc:
        print(f"crossmodal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
