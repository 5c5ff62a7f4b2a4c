"""Joint generator + enhancer pre-training.

One AdamW instance optimizes the union of generator, enhancer and head
parameters (shared-stem tensors appear once). The masked-token loss trains the
generator; the enhancer loss sees the corrupted image as a constant, so no
enhancer gradient reaches generator-only parameters. All randomness is derived
from (seed, epoch, step), which makes resume-from-checkpoint reproduce the
uninterrupted run bit-exactly.
"""

import csv
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from . import checkpoint as ckpt
from .backbones import (
    DetectHead,
    GeneratorConfig,
    MiniResNet,
    MiniResNetConfig,
    PixelHead,
    ViTConfig,
    VisionTransformer,
    build_backbone_pair,
    enhancer_positions,
    grid_shape,
)
from .corruption import CorruptionConfig, batched_mim_loss, corrupt_batch
from .data import augment_batch, iterate_batches
from .errors import ConfigurationError, DivergenceError
from .objectives import normalize_target, respix_loss, revdet_loss

METRIC_COLUMNS = ("step", "lr", "mim_loss", "enhancer_loss", "flag_fraction")


@dataclass
class TrainConfig:
    objective: str = "revdet"  # respix | revdet
    enhancer_arch: str = "vit"  # vit | resnet
    epochs: int = 30
    batch_size: int = 64
    peak_lr: float = 1.5e-3
    min_lr: float = 1e-5
    warmup_epochs: float = 1.0
    betas: tuple = (0.9, 0.98)
    weight_decay: float = 0.05
    grad_clip: float = 3.0
    enhancer_loss_weight: float = None  # default: 10 for respix, 1 for revdet
    share_layers: int = 2
    seed: int = 0
    # corruption
    mask_strategy: str = "random"
    ratio_min: float = 0.5
    ratio_max: float = 0.6
    sampling: str = "softmax"
    temperature: float = 1.0
    # respix target
    norm_scheme: str = "sliding"
    norm_window: int = 8
    norm_eps: float = 1e-6
    l1_weight: float = 1.0
    l2_weight: float = 1.0
    # augmentation
    crop_scale_min: float = 0.6
    crop_scale_max: float = 1.0
    flip_prob: float = 0.5
    # architecture
    image_size: int = 32
    enhancer_dim: int = 192
    enhancer_depth: int = 8
    enhancer_heads: int = 3
    mlp_ratio: float = 4.0
    generator_depth: int = 4
    generator_dim: int = None  # None: enhancer width (ViT) or 384 (CNN)
    generator_heads: int = None
    resnet_widths: tuple = (32, 64, 128)
    resnet_blocks: tuple = (2, 2, 2)
    # policy
    reference_batch: int = None  # linear lr scaling when set
    divergence_factor: float = 10.0
    divergence_patience: int = 100
    checkpoint_every: int = 0  # epochs between checkpoints; 0 = final only
    panel_images: int = 2

    def __post_init__(self):
        if self.objective not in ("respix", "revdet"):
            raise ConfigurationError(f"unknown objective {self.objective!r}")
        if self.enhancer_arch not in ("vit", "resnet"):
            raise ConfigurationError(f"unknown enhancer arch {self.enhancer_arch!r}")
        if self.enhancer_arch == "resnet" and self.share_layers:
            raise ConfigurationError("weight sharing is only defined for ViT enhancers")
        if self.peak_lr <= 0 or self.min_lr < 0:
            raise ConfigurationError("learning rates must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if isinstance(self.betas, list):
            self.betas = tuple(self.betas)
        if isinstance(self.resnet_widths, list):
            self.resnet_widths = tuple(self.resnet_widths)
        if isinstance(self.resnet_blocks, list):
            self.resnet_blocks = tuple(self.resnet_blocks)

    @property
    def loss_weight(self):
        if self.enhancer_loss_weight is not None:
            return float(self.enhancer_loss_weight)
        return 10.0 if self.objective == "respix" else 1.0

    @property
    def effective_peak_lr(self):
        if self.reference_batch:
            return self.peak_lr * self.batch_size / self.reference_batch
        return self.peak_lr

    def corruption(self):
        return CorruptionConfig(
            strategy=self.mask_strategy,
            ratio_min=self.ratio_min,
            ratio_max=self.ratio_max,
            sampling=self.sampling,
            temperature=self.temperature,
        )


def derive_seed(*parts):
    return int(np.random.SeedSequence(parts).generate_state(1, np.uint64)[0] % (2**63))


def lr_at(cfg: TrainConfig, step, steps_per_epoch):
    """Learning rate at a global step: linear warmup to the peak, cosine to the floor."""
    if step < 0:
        raise ConfigurationError("step must be >= 0")
    peak = cfg.effective_peak_lr
    warmup = cfg.warmup_epochs * steps_per_epoch
    total = cfg.epochs * steps_per_epoch
    if warmup > 0 and step < warmup:
        return peak * step / warmup
    if total <= warmup:
        return peak
    t = min(1.0, (step - warmup) / (total - warmup))
    return cfg.min_lr + 0.5 * (peak - cfg.min_lr) * (1.0 + math.cos(math.pi * t))


@dataclass
class ModelBundle:
    generator: object
    enhancer: object
    head: object
    stem: object
    tokenizer: object

    def modules(self):
        return {"generator": self.generator, "enhancer": self.enhancer, "head": self.head}

    def named_trainable(self):
        """(name, param) over the union of trainable tensors, shared ones once."""
        seen = set()
        for prefix, module in self.modules().items():
            for name, p in module.named_parameters():
                if id(p) in seen:
                    continue
                seen.add(id(p))
                yield f"{prefix}.{name}", p

    def trainable_parameters(self):
        return [p for _, p in self.named_trainable()]

    def generator_only_parameters(self):
        """Generator parameters that are not aliased into the enhancer."""
        enh_ids = {id(p) for p in self.enhancer.parameters()}
        return [p for p in self.generator.parameters() if id(p) not in enh_ids]


def build_bundle(cfg: TrainConfig, tokenizer):
    torch.manual_seed(derive_seed(cfg.seed, 0))
    patch = tokenizer.downsample
    if cfg.enhancer_arch == "vit":
        enh_cfg = ViTConfig(
            image_size=cfg.image_size,
            patch=patch,
            dim=cfg.enhancer_dim,
            depth=cfg.enhancer_depth,
            heads=cfg.enhancer_heads,
            mlp_ratio=cfg.mlp_ratio,
        )
        enhancer = VisionTransformer(enh_cfg)
        gen_dim = cfg.generator_dim or cfg.enhancer_dim
        gen_heads = cfg.generator_heads or cfg.enhancer_heads
    else:
        enhancer = MiniResNet(
            MiniResNetConfig(
                image_size=cfg.image_size,
                stage_widths=cfg.resnet_widths,
                blocks_per_stage=cfg.resnet_blocks,
                token_stride=patch,
            )
        )
        gen_dim = cfg.generator_dim or 384
        gen_heads = cfg.generator_heads or max(1, gen_dim // 64)
    gen_cfg = GeneratorConfig(
        image_size=cfg.image_size,
        patch=patch,
        dim=gen_dim,
        depth=cfg.generator_depth,
        heads=gen_heads,
        mlp_ratio=cfg.mlp_ratio,
        vocab_size=tokenizer.vocab_size,
    )
    generator, stem = build_backbone_pair(gen_cfg, enhancer, cfg.share_layers)
    feat_dim = cfg.enhancer_dim if cfg.enhancer_arch == "vit" else cfg.resnet_widths[-1]
    head = PixelHead(feat_dim, patch) if cfg.objective == "respix" else DetectHead(feat_dim)
    return ModelBundle(generator=generator, enhancer=enhancer, head=head, stem=stem, tokenizer=tokenizer)


def optimizer_param_groups(bundle: ModelBundle, weight_decay):
    """Two groups: weight-decayed matrices, and undecayed biases/norms/embeddings."""
    decay, no_decay = [], []
    for name, p in bundle.named_trainable():
        bare = name.rsplit(".", 1)[-1]
        if p.ndim <= 1 or bare in ("cls_token", "pos_embed", "mask_embedding"):
            no_decay.append(p)
        else:
            decay.append(p)
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


def build_optimizer(bundle: ModelBundle, cfg: TrainConfig):
    return torch.optim.AdamW(
        optimizer_param_groups(bundle, cfg.weight_decay),
        lr=cfg.effective_peak_lr,
        betas=cfg.betas,
        weight_decay=cfg.weight_decay,
    )


@dataclass
class TrainState:
    cfg: TrainConfig
    bundle: ModelBundle
    optimizer: object
    steps_per_epoch: int
    step: int = 0
    epoch: int = 0
    history: list = field(default_factory=list)
    initial_losses: dict = field(default_factory=dict)
    divergence_streak: int = 0

    def train_mode(self):
        for m in self.bundle.modules().values():
            m.train()

    def eval_mode(self):
        for m in self.bundle.modules().values():
            m.eval()


def build_train_state(cfg: TrainConfig, tokenizer, dataset_size):
    if not tokenizer.frozen:
        raise ConfigurationError("tokenizer must be frozen before pre-training")
    bundle = build_bundle(cfg, tokenizer)
    optimizer = build_optimizer(bundle, cfg)
    steps_per_epoch = max(1, math.ceil(dataset_size / cfg.batch_size))
    return TrainState(cfg=cfg, bundle=bundle, optimizer=optimizer, steps_per_epoch=steps_per_epoch)


def enhancer_loss_for_batch(state: TrainState, images, batch):
    """The pretext loss of the enhancer on the (constant) corrupted images."""
    cfg = state.cfg
    feats = enhancer_positions(state.bundle.enhancer, batch["corrupted_images"])
    gh, gw = grid_shape(state.bundle.enhancer)
    if cfg.objective == "respix":
        pred = state.bundle.head.assemble(state.bundle.head(feats), gh, gw)
        target = normalize_target(images, cfg.norm_scheme, cfg.norm_window, cfg.norm_eps)
        return respix_loss(pred, target.values, cfg.l1_weight, cfg.l2_weight)
    logits = state.bundle.head(feats)
    return revdet_loss(logits, batch["flags"].to(logits.dtype))


def joint_step(state: TrainState, images):
    """One synchronized update of generator + enhancer (+ shared stem)."""
    cfg = state.cfg
    rng = np.random.default_rng((cfg.seed, 2, state.step))
    batch = corrupt_batch(
        state.bundle.generator, state.bundle.tokenizer, images, cfg.corruption(), rng
    )
    mim = batched_mim_loss(batch["logits"], batch["golden"], batch["mask"])
    enh = enhancer_loss_for_batch(state, images, batch)
    total = mim + cfg.loss_weight * enh
    if not torch.isfinite(total):
        _raise_divergence(state, "non-finite loss")
    lr = lr_at(cfg, state.step, state.steps_per_epoch)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    grad_norm = torch.nn.utils.clip_grad_norm_(
        state.bundle.trainable_parameters(), cfg.grad_clip
    )
    state.optimizer.step()
    metrics = {
        "step": state.step,
        "lr": lr,
        "mim_loss": float(mim.detach()),
        "enhancer_loss": float(enh.detach()),
        "flag_fraction": float(batch["flags"].float().mean()),
        "grad_norm": float(grad_norm),
    }
    state.history.append(metrics)
    state.step += 1
    _check_divergence(state, metrics)
    return metrics


def _check_divergence(state: TrainState, metrics):
    cfg = state.cfg
    if not state.initial_losses:
        state.initial_losses = {
            "mim_loss": metrics["mim_loss"],
            "enhancer_loss": metrics["enhancer_loss"],
        }
        return
    bad = any(
        metrics[key] > cfg.divergence_factor * max(state.initial_losses[key], 1e-8)
        for key in state.initial_losses
    )
    state.divergence_streak = state.divergence_streak + 1 if bad else 0
    if state.divergence_streak >= cfg.divergence_patience:
        _raise_divergence(
            state,
            f"loss exceeded {cfg.divergence_factor}x its initial value for "
            f"{cfg.divergence_patience} consecutive steps",
        )


def _raise_divergence(state: TrainState, reason):
    dump_path = getattr(state, "dump_path", None)
    if dump_path:
        try:
            save_checkpoint(state, dump_path)
        except Exception:
            dump_path = None
    raise DivergenceError(f"training diverged at step {state.step}: {reason}", dump_path)


def moving_average(values, window):
    out = []
    acc = 0.0
    for i, v in enumerate(values):
        acc += v
        if i >= window:
            acc -= values[i - window]
        out.append(acc / min(i + 1, window))
    return out


def training_curves(history):
    """Start/end moving averages for each loss; the acceptance decrease check."""
    if not history:
        return {}
    window = max(5, len(history) // 10)
    curves = {}
    for key in ("mim_loss", "enhancer_loss"):
        series = [row[key] for row in history]
        ma = moving_average(series, window)
        curves[key] = {"start": ma[min(window, len(ma)) - 1], "end": ma[-1], "window": window}
    return curves


def append_metrics_csv(path, rows, write_header=False):
    mode = "w" if write_header else "a"
    with open(path, mode, newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        if write_header:
            writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in METRIC_COLUMNS])


def pretrain(cfg: TrainConfig, train_ds, tokenizer, out_dir=None, val_ds=None, log=None):
    """Run the full pre-training schedule; returns (state, report).

    Writes metrics.csv, periodic/final checkpoints, the stand-alone enhancer
    weights, and a few corruption sample panels when ``out_dir`` is given.
    Raises DivergenceError (after dumping state) when the loss runs away.
    """
    if len(train_ds) == 0:
        raise ConfigurationError("cannot pretrain on an empty dataset")
    state = build_train_state(cfg, tokenizer, len(train_ds))
    checksum_before = tokenizer.parameter_checksum()
    metrics_path = os.path.join(out_dir, "metrics.csv") if out_dir else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        state.dump_path = os.path.join(out_dir, "divergence_dump.ckpt")
        append_metrics_csv(metrics_path, [], write_header=True)
    state.train_mode()
    for epoch in range(cfg.epochs):
        state.epoch = epoch
        written = 0
        for batch_idx, (images, _) in enumerate(
            iterate_batches(train_ds, cfg.batch_size, cfg.seed, epoch)
        ):
            aug_rng = np.random.default_rng((cfg.seed, 1, epoch, batch_idx))
            images = augment_batch(
                images, aug_rng, (cfg.crop_scale_min, cfg.crop_scale_max),
                cfg.image_size, cfg.flip_prob,
            )
            joint_step(state, images)
            written += 1
        if metrics_path:
            append_metrics_csv(metrics_path, state.history[-written:])
        if out_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(state, os.path.join(out_dir, f"state_epoch{epoch + 1}.ckpt"))
        if log:
            last = state.history[-1]
            log(
                f"epoch {epoch}: mim {last['mim_loss']:.4f} "
                f"enh {last['enhancer_loss']:.4f} lr {last['lr']:.2e}"
            )
    checksum_after = tokenizer.parameter_checksum()
    if checksum_before != checksum_after:
        raise RuntimeError("frozen tokenizer parameters changed during pre-training")
    report = {
        "steps": state.step,
        "curves": training_curves(state.history),
        "final": state.history[-1] if state.history else None,
        "tokenizer_checksum": checksum_after,
    }
    if out_dir:
        save_checkpoint(state, os.path.join(out_dir, "state_final.ckpt"))
        save_enhancer(state, os.path.join(out_dir, "enhancer.ckpt"))
        save_generator(state, os.path.join(out_dir, "generator.ckpt"))
        if cfg.panel_images and val_ds is not None and len(val_ds):
            from .panels import render_corruption_panels

            state.eval_mode()
            render_corruption_panels(
                state.bundle.generator,
                tokenizer,
                val_ds.images[: cfg.panel_images],
                cfg.corruption(),
                n_variants=4,
                out_dir=os.path.join(out_dir, "panels"),
                seed=cfg.seed,
            )
    return state, report


def _cfg_to_json(cfg: TrainConfig):
    d = asdict(cfg)
    d["betas"] = list(cfg.betas)
    d["resnet_widths"] = list(cfg.resnet_widths)
    d["resnet_blocks"] = list(cfg.resnet_blocks)
    return d


def save_checkpoint(state: TrainState, path):
    tensors = {}
    for name, p in state.bundle.named_trainable():
        tensors[f"param.{name}"] = p.detach()
    # BatchNorm running stats and the like
    for prefix, module in state.bundle.modules().items():
        for name, buf in module.named_buffers():
            tensors[f"buffer.{prefix}.{name}"] = buf
    steps = {}
    for gi, group in enumerate(state.optimizer.param_groups):
        for pi, p in enumerate(group["params"]):
            opt_state = state.optimizer.state.get(p)
            if not opt_state:
                continue
            tensors[f"opt.g{gi}.p{pi}.exp_avg"] = opt_state["exp_avg"]
            tensors[f"opt.g{gi}.p{pi}.exp_avg_sq"] = opt_state["exp_avg_sq"]
            steps[f"g{gi}.p{pi}"] = float(opt_state["step"])
    if state.history:
        hist = torch.tensor(
            [[row[c] for c in METRIC_COLUMNS] for row in state.history], dtype=torch.float64
        )
        tensors["history"] = hist
    ckpt.save_container(
        path,
        kind="train_state",
        config=_cfg_to_json(state.cfg),
        tensors=tensors,
        extra={
            "step": state.step,
            "epoch": state.epoch,
            "steps_per_epoch": state.steps_per_epoch,
            "opt_steps": steps,
            "initial_losses": state.initial_losses,
            "tokenizer_checksum": state.bundle.tokenizer.parameter_checksum(),
        },
    )


def load_checkpoint(path, tokenizer):
    header, tensors = ckpt.load_container(path, expect_kind="train_state")
    cfg = TrainConfig(**header["config"])
    state = build_train_state(cfg, tokenizer, header["extra"]["steps_per_epoch"] * cfg.batch_size)
    state.steps_per_epoch = header["extra"]["steps_per_epoch"]
    for name, p in state.bundle.named_trainable():
        with torch.no_grad():
            p.copy_(tensors[f"param.{name}"])
    for prefix, module in state.bundle.modules().items():
        for name, buf in module.named_buffers():
            with torch.no_grad():
                buf.copy_(tensors[f"buffer.{prefix}.{name}"])
    opt_steps = header["extra"]["opt_steps"]
    for gi, group in enumerate(state.optimizer.param_groups):
        for pi, p in enumerate(group["params"]):
            key = f"g{gi}.p{pi}"
            if key not in opt_steps:
                continue
            state.optimizer.state[p] = {
                "step": torch.tensor(opt_steps[key]),
                "exp_avg": tensors[f"opt.g{gi}.p{pi}.exp_avg"].clone(),
                "exp_avg_sq": tensors[f"opt.g{gi}.p{pi}.exp_avg_sq"].clone(),
            }
    state.step = header["extra"]["step"]
    state.epoch = header["extra"]["epoch"]
    state.initial_losses = header["extra"]["initial_losses"]
    if "history" in tensors:
        hist = tensors["history"]
        state.history = [
            {c: (int(row[i]) if c == "step" else float(row[i])) for i, c in enumerate(METRIC_COLUMNS)}
            for row in hist.tolist()
        ]
    expected = header["extra"].get("tokenizer_checksum")
    if expected and expected != tokenizer.parameter_checksum():
        raise ConfigurationError("checkpoint was trained against a different tokenizer")
    return state


def save_enhancer(state: TrainState, path):
    """The final artifact: enhancer weights alone plus its architecture config."""
    cfg = state.cfg
    meta = {
        "arch": cfg.enhancer_arch,
        "image_size": cfg.image_size,
        "patch": state.bundle.tokenizer.downsample,
        "dim": cfg.enhancer_dim,
        "depth": cfg.enhancer_depth,
        "heads": cfg.enhancer_heads,
        "mlp_ratio": cfg.mlp_ratio,
        "resnet_widths": list(cfg.resnet_widths),
        "resnet_blocks": list(cfg.resnet_blocks),
        "objective": cfg.objective,
        "vocab_size": state.bundle.tokenizer.vocab_size,
    }
    tensors = ckpt.state_dict_tensors(state.bundle.enhancer, prefix="enhancer.")
    tensors.update(ckpt.state_dict_tensors(state.bundle.head, prefix="head."))
    ckpt.save_container(path, kind="enhancer", config=meta, tensors=tensors)


def load_enhancer(path):
    """Rebuild (enhancer, head, meta) from a stand-alone enhancer checkpoint."""
    header, tensors = ckpt.load_container(path, expect_kind="enhancer")
    meta = header["config"]
    if meta["arch"] == "vit":
        model = VisionTransformer(
            ViTConfig(
                image_size=meta["image_size"],
                patch=meta["patch"],
                dim=meta["dim"],
                depth=meta["depth"],
                heads=meta["heads"],
                mlp_ratio=meta["mlp_ratio"],
            )
        )
        feat_dim = meta["dim"]
    else:
        model = MiniResNet(
            MiniResNetConfig(
                image_size=meta["image_size"],
                stage_widths=tuple(meta["resnet_widths"]),
                blocks_per_stage=tuple(meta["resnet_blocks"]),
                token_stride=meta["patch"],
            )
        )
        feat_dim = meta["resnet_widths"][-1]
    head = PixelHead(feat_dim, meta["patch"]) if meta["objective"] == "respix" else DetectHead(feat_dim)
    ckpt.load_state_into(model, tensors, prefix="enhancer.")
    ckpt.load_state_into(head, tensors, prefix="head.")
    return model, head, meta


def save_generator(state: TrainState, path):
    cfg = state.bundle.generator.cfg
    meta = {
        "image_size": cfg.image_size,
        "patch": cfg.patch,
        "dim": cfg.dim,
        "depth": cfg.depth,
        "heads": cfg.heads,
        "mlp_ratio": cfg.mlp_ratio,
        "vocab_size": cfg.vocab_size,
    }
    ckpt.save_container(
        path, kind="generator", config=meta,
        tensors=ckpt.state_dict_tensors(state.bundle.generator),
    )


def load_generator(path):
    from .backbones import MaskedTokenGenerator

    header, tensors = ckpt.load_container(path, expect_kind="generator")
    gen = MaskedTokenGenerator(GeneratorConfig(**header["config"]))
    ckpt.load_state_into(gen, tensors)
    return gen
