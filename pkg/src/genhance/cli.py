"""Operator entry point.

Subcommands drive the full pipeline from JSON config files; flags only
override scalar fields (``--set key=value`` with dotted paths). Every run
writes a manifest with the resolved config hash so reruns are reproducible.
Exit codes: 0 success, 2 configuration error, 3 divergence, 4 incompatible
checkpoint.
"""

import argparse
import csv
import hashlib
import itertools
import json
import os
import sys

import numpy as np

from . import __version__
from .corruption import CorruptionConfig
from .data import generate_shapes, load_image_folder, save_manifest
from .errors import (
    CheckpointError,
    ConfigurationError,
    DivergenceError,
    IncompatibleCheckpointError,
)
from .evaluation import (
    FinetuneConfig,
    ProbeConfig,
    finetune,
    linear_probe,
    make_corruption_stream,
    revdet_metrics,
)
from .panels import render_corruption_panels
from .tokenizer import TokenizerConfig, load_tokenizer, save_tokenizer, train_tokenizer
from .training import TrainConfig, load_generator, load_enhancer, pretrain
from .backbones import MiniResNet, MiniResNetConfig, ViTConfig, VisionTransformer

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_INCOMPATIBLE = 4


def _coerce(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config, pairs):
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigurationError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        node = config
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"--set path {key!r} crosses a scalar")
        node[parts[-1]] = _coerce(value)
    return config


def load_config(path, overrides=None):
    if path:
        with open(path, "r", encoding="utf-8") as f:
            config = json.load(f)
    else:
        config = {}
    return apply_overrides(config, overrides)


def config_hash(config):
    return hashlib.sha256(
        json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


def prepare_out_dir(out, force):
    if os.path.exists(out) and os.listdir(out) and not force:
        raise ConfigurationError(f"output directory {out!r} is not empty; pass --force")
    os.makedirs(out, exist_ok=True)
    return out


def write_manifest(out, command, config, config_path, seed):
    manifest = {
        "command": command,
        "config_path": config_path,
        "config_hash": config_hash(config),
        "seed": seed,
        "out_dir": os.path.abspath(out),
        "version": __version__,
    }
    with open(os.path.join(out, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def build_datasets(data_cfg, seed):
    kind = data_cfg.get("kind", "shapes")
    if kind == "folder":
        size = data_cfg.get("size")
        train = load_image_folder(data_cfg["train_root"], size=size, split="train")
        val = load_image_folder(data_cfg["val_root"], size=size, split="val")
        return train, val
    size = data_cfg.get("size", 32)
    classes = data_cfg.get("num_classes", 4)
    train = generate_shapes(
        seed, data_cfg.get("train_count", 5000), size, classes, split="train"
    )
    val = generate_shapes(seed, data_cfg.get("val_count", 1000), size, classes, split="val")
    return train, val


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=float)
        f.write("\n")


def cmd_tokenizer_train(args):
    config = load_config(args.config, args.set)
    out = prepare_out_dir(args.out, args.force)
    seed = args.seed if args.seed is not None else config.get("seed", 0)
    write_manifest(out, "tokenizer-train", config, args.config, seed)
    train_ds, val_ds = build_datasets(config.get("data", {}), seed)
    tok_cfg = TokenizerConfig(**{**config.get("tokenizer", {}), "seed": seed})
    tok, report = train_tokenizer(train_ds, tok_cfg, val_ds=val_ds, log=print)
    tok.freeze()
    save_tokenizer(tok, os.path.join(out, "tokenizer.ckpt"))
    save_manifest(train_ds, os.path.join(out, "dataset_manifest.json"))
    _write_json(os.path.join(out, "report.json"), report)
    print(f"tokenizer: val PSNR {report.get('val_psnr', float('nan')):.2f} dB, "
          f"dead codes {report['dead_code_fraction']:.3f}")
    return EXIT_OK


def cmd_pretrain(args):
    config = load_config(args.config, args.set)
    out = prepare_out_dir(args.out, args.force)
    seed = args.seed if args.seed is not None else config.get("seed", 0)
    write_manifest(out, "pretrain", config, args.config, seed)
    tok = load_tokenizer(config["tokenizer_ckpt"])
    tok.freeze()
    train_ds, val_ds = build_datasets(config.get("data", {}), seed)
    cfg = TrainConfig(**{**config.get("train", {}), "seed": seed})
    state, report = pretrain(cfg, train_ds, tok, out_dir=out, val_ds=val_ds, log=print)
    if cfg.objective == "revdet":
        stream = make_corruption_stream(
            state.bundle.generator, tok, val_ds, cfg.corruption(), seed=seed
        )
        report["revdet_val"] = revdet_metrics(state.bundle.enhancer, state.bundle.head, stream)
    _write_json(os.path.join(out, "report.json"), report)
    print(f"pretrain: {report['steps']} steps, final mim "
          f"{report['final']['mim_loss']:.4f}, enh {report['final']['enhancer_loss']:.4f}")
    return EXIT_OK


def _load_backbone(config, seed):
    """Either a pre-trained enhancer checkpoint or a fresh random-init model."""
    import torch

    from .training import derive_seed

    if "enhancer_ckpt" in config:
        model, head, meta = load_enhancer(config["enhancer_ckpt"])
        return model, head, meta
    arch = config.get("arch", "vit")
    torch.manual_seed(derive_seed(seed, 0))
    model_cfg = config.get("model", {})
    if arch == "vit":
        model = VisionTransformer(ViTConfig(**model_cfg))
    else:
        model = MiniResNet(MiniResNetConfig(**model_cfg))
    return model, None, {"arch": arch, "random_init": True}


def cmd_probe(args):
    config = load_config(args.config, args.set)
    out = prepare_out_dir(args.out, args.force)
    seed = args.seed if args.seed is not None else config.get("seed", 0)
    write_manifest(out, "probe", config, args.config, seed)
    model, _, meta = _load_backbone(config, seed)
    train_ds, val_ds = build_datasets(config.get("data", {}), seed)
    probe_cfg = ProbeConfig(**{**config.get("probe", {}), "seed": seed})
    result = linear_probe(model, train_ds, val_ds, probe_cfg)
    payload = {"top1": result.top1, "per_class": list(result.per_class),
               "probe": result.config, "backbone": meta}
    _write_json(os.path.join(out, "probe.json"), payload)
    print(f"probe top-1: {result.top1:.4f}")
    return EXIT_OK


def cmd_finetune(args):
    config = load_config(args.config, args.set)
    out = prepare_out_dir(args.out, args.force)
    seed = args.seed if args.seed is not None else config.get("seed", 0)
    write_manifest(out, "finetune", config, args.config, seed)
    model, _, meta = _load_backbone(config, seed)
    train_ds, val_ds = build_datasets(config.get("data", {}), seed)
    ft_cfg = FinetuneConfig(**{**config.get("finetune", {}), "seed": seed})
    result = finetune(model, train_ds, val_ds, ft_cfg)
    payload = {"top1": result.top1, "per_class": list(result.per_class),
               "finetune": result.config, "backbone": meta}
    _write_json(os.path.join(out, "finetune.json"), payload)
    print(f"finetune top-1: {result.top1:.4f}")
    return EXIT_OK


def cmd_visualize(args):
    config = load_config(args.config, args.set)
    out = prepare_out_dir(args.out, args.force)
    seed = args.seed if args.seed is not None else config.get("seed", 0)
    write_manifest(out, "visualize", config, args.config, seed)
    tok = load_tokenizer(config["tokenizer_ckpt"])
    tok.freeze()
    gen = load_generator(config["generator_ckpt"])
    if gen.vocab_size != tok.vocab_size or gen.cfg.patch != tok.downsample:
        raise IncompatibleCheckpointError(
            f"generator (V={gen.vocab_size}, patch={gen.cfg.patch}) does not match "
            f"tokenizer (V={tok.vocab_size}, f={tok.downsample})"
        )
    if "images_root" in config:
        ds = load_image_folder(config["images_root"], size=config.get("size"))
    else:
        _, ds = build_datasets(config.get("data", {}), seed)
    count = config.get("count", 4)
    corruption = CorruptionConfig(**config.get("corruption", {}))
    paths = render_corruption_panels(
        gen, tok, ds.images[:count], corruption,
        n_variants=config.get("n_variants", 4), out_dir=out, seed=seed,
    )
    print(f"wrote {len(paths)} panels to {out}")
    return EXIT_OK


def _matrix_cells(axes):
    keys = sorted(axes)
    for combo in itertools.product(*(axes[k] for k in keys)):
        yield dict(zip(keys, combo))


def cmd_ablate(args):
    config = load_config(args.config, args.set)
    out = prepare_out_dir(args.out, args.force)
    seed = args.seed if args.seed is not None else config.get("seed", 0)
    write_manifest(out, "ablate", config, args.config, seed)
    tok = load_tokenizer(config["tokenizer_ckpt"])
    tok.freeze()
    train_ds, val_ds = build_datasets(config.get("data", {}), seed)
    base = dict(config.get("train", {}))
    axes = config.get("axes", {})
    rows = []
    seen = set()
    for cell in _matrix_cells(axes):
        cell_id = json.dumps(cell, sort_keys=True)
        if cell_id in seen:
            print(f"skipping duplicate cell {cell_id}")
            continue
        seen.add(cell_id)
        name = "_".join(f"{k}-{v}" for k, v in sorted(cell.items()))
        run_dir = os.path.join(out, name)
        os.makedirs(run_dir, exist_ok=True)
        cfg = TrainConfig(**{**base, **cell, "seed": seed})
        row = {"cell": name, **cell}
        try:
            state, report = pretrain(cfg, train_ds, tok, out_dir=run_dir, val_ds=val_ds)
            row["status"] = "ok"
            row["final_mim"] = report["final"]["mim_loss"]
            row["final_enh"] = report["final"]["enhancer_loss"]
            if cfg.objective == "revdet":
                stream = make_corruption_stream(
                    state.bundle.generator, tok, val_ds, cfg.corruption(), seed=seed
                )
                row["auc"] = revdet_metrics(
                    state.bundle.enhancer, state.bundle.head, stream
                )["auc"]
        except DivergenceError as exc:
            row["status"] = "diverged"
            row["detail"] = str(exc)
        write_manifest(run_dir, "ablate-cell", {**base, **cell}, args.config, seed)
        rows.append(row)
        print(f"cell {name}: {row['status']}")
    columns = sorted({k for row in rows for k in row})
    with open(os.path.join(out, "results.csv"), "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="genhance",
        description="Corrupted-image pre-training: tokenizer, generator + enhancer, probes.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "tokenizer-train": cmd_tokenizer_train,
        "pretrain": cmd_pretrain,
        "probe": cmd_probe,
        "finetune": cmd_finetune,
        "visualize": cmd_visualize,
        "ablate": cmd_ablate,
    }
    for name, fn in commands.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--set", action="append", metavar="K=V",
                       help="override a scalar config field (dotted path)")
        p.add_argument("--force", action="store_true",
                       help="allow writing into a non-empty output directory")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except IncompatibleCheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigurationError, FileNotFoundError, KeyError, CheckpointError) as exc:
        print(f"error: {exc!r}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
