"""Representation quality measurements: linear probe, simplified fine-tune, detection metrics."""

from dataclasses import dataclass, asdict

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import roc_auc_score

from .backbones import MiniResNet, VisionTransformer, enhancer_positions, pooled_features
from .corruption import corrupt_batch
from .data import iterate_batches
from .errors import ConfigurationError
from .training import derive_seed


@dataclass
class ProbeConfig:
    pooling: str = "mean"  # mean | cls
    c: float = 1.0
    max_iter: int = 1000
    batch_size: int = 256
    seed: int = 0


@dataclass
class ProbeResult:
    top1: float
    per_class: tuple
    config: dict
    seed: int


@dataclass
class FinetuneConfig:
    epochs: int = 5
    batch_size: int = 64
    peak_lr: float = 1e-3
    layer_decay: float = 0.8
    weight_decay: float = 0.05
    seed: int = 0


def _same_split(a, b):
    return a is b or (a.split == b.split and a.seed == b.seed and len(a) == len(b))


@torch.no_grad()
def extract_features(model, ds, pooling="mean", batch_size=256):
    model.eval()
    feats = []
    for images, _ in iterate_batches(ds, batch_size):
        feats.append(pooled_features(model, images, pooling))
    return torch.cat(feats).numpy(), ds.labels.numpy()


def linear_probe(model, ds_train, ds_val, cfg: ProbeConfig = None):
    """Fit one linear classifier on frozen pooled features; score on the val split.

    Features are standardized by the train split's mean/std before fitting so
    the solver conditioning does not depend on the backbone's output scale.
    """
    cfg = cfg or ProbeConfig()
    if _same_split(ds_train, ds_val):
        raise ConfigurationError("probe train and val splits must be disjoint")
    x_train, y_train = extract_features(model, ds_train, cfg.pooling, cfg.batch_size)
    x_val, y_val = extract_features(model, ds_val, cfg.pooling, cfg.batch_size)
    mu = x_train.mean(axis=0)
    sigma = x_train.std(axis=0) + 1e-8
    x_train = (x_train - mu) / sigma
    x_val = (x_val - mu) / sigma
    clf = LogisticRegression(C=cfg.c, max_iter=cfg.max_iter, random_state=cfg.seed)
    clf.fit(x_train, y_train)
    pred = clf.predict(x_val)
    per_class = []
    for label in range(ds_val.num_classes):
        sel = y_val == label
        per_class.append(float((pred[sel] == label).mean()) if sel.any() else float("nan"))
    return ProbeResult(
        top1=float((pred == y_val).mean()),
        per_class=tuple(per_class),
        config=asdict(cfg),
        seed=cfg.seed,
    )


def layer_lr_factors(depth, decay):
    """Multiplier per depth index 0..depth; index depth (the top) gets 1.0."""
    return [decay ** (depth - i) for i in range(depth + 1)]


def finetune_param_groups(model, head, peak_lr, decay, weight_decay):
    """Layer-wise lr decay groups: embeddings lowest, classifier head at the peak."""
    if isinstance(model, VisionTransformer):
        depth = len(model.blocks)
        factors = layer_lr_factors(depth, decay)
        groups = [
            {
                "params": list(model.patch_embed.parameters())
                + [model.cls_token, model.pos_embed],
                "lr": peak_lr * factors[0],
                "weight_decay": weight_decay,
            }
        ]
        for i, blk in enumerate(model.blocks):
            groups.append(
                {"params": list(blk.parameters()), "lr": peak_lr * factors[i + 1],
                 "weight_decay": weight_decay}
            )
        groups.append(
            {"params": list(model.norm.parameters()) + list(head.parameters()),
             "lr": peak_lr, "weight_decay": weight_decay}
        )
        return groups
    if isinstance(model, MiniResNet):
        depth = len(model.stages)
        factors = layer_lr_factors(depth, decay)
        groups = [
            {"params": list(model.stem.parameters()), "lr": peak_lr * factors[0],
             "weight_decay": weight_decay}
        ]
        for i, stage in enumerate(model.stages):
            groups.append(
                {"params": list(stage.parameters()), "lr": peak_lr * factors[i + 1],
                 "weight_decay": weight_decay}
            )
        groups.append({"params": list(head.parameters()), "lr": peak_lr,
                       "weight_decay": weight_decay})
        return groups
    raise ConfigurationError("unknown backbone family for fine-tuning")


def finetune(model, ds_train, ds_val, cfg: FinetuneConfig = None):
    """End-to-end fine-tune with layer-wise lr decay; simplified recipe (plain
    cross-entropy, crop/flip-free). Returns the val-split ProbeResult."""
    cfg = cfg or FinetuneConfig()
    if _same_split(ds_train, ds_val):
        raise ConfigurationError("fine-tune train and val splits must be disjoint")
    torch.manual_seed(derive_seed(cfg.seed, 4))
    head = torch.nn.Linear(model.cfg.dim, ds_train.num_classes)
    groups = finetune_param_groups(model, head, cfg.peak_lr, cfg.layer_decay, cfg.weight_decay)
    opt = torch.optim.AdamW(groups, lr=cfg.peak_lr, weight_decay=cfg.weight_decay)
    model.train()
    for epoch in range(cfg.epochs):
        for images, labels in iterate_batches(ds_train, cfg.batch_size, cfg.seed, epoch):
            logits = head(pooled_features(model, images, "mean"))
            loss = torch.nn.functional.cross_entropy(logits, labels)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    model.eval()
    correct = 0
    per_class_hits = np.zeros(ds_val.num_classes)
    per_class_total = np.zeros(ds_val.num_classes)
    with torch.no_grad():
        for images, labels in iterate_batches(ds_val, cfg.batch_size):
            pred = head(pooled_features(model, images, "mean")).argmax(dim=1)
            correct += int((pred == labels).sum())
            for label in range(ds_val.num_classes):
                sel = labels == label
                per_class_total[label] += int(sel.sum())
                per_class_hits[label] += int((pred[sel] == label).sum())
    per_class = tuple(
        float(h / t) if t else float("nan") for h, t in zip(per_class_hits, per_class_total)
    )
    return ProbeResult(
        top1=correct / len(ds_val), per_class=per_class, config=asdict(cfg), seed=cfg.seed
    )


def make_corruption_stream(gen, tok, ds, corruption_cfg, batch_size=64, seed=0):
    """Held-out corrupted batches: yields (corrupted images, flags (B, n))."""
    gen.eval()
    for batch_idx, (images, _) in enumerate(iterate_batches(ds, batch_size)):
        rng = np.random.default_rng((seed, 5, batch_idx))
        with torch.no_grad():
            batch = corrupt_batch(gen, tok, images, corruption_cfg, rng)
        yield batch["corrupted_images"], batch["flags"]


def revdet_metrics(model, head, stream):
    """ROC-AUC / accuracy@0.5 / positive fraction of per-position logits vs flags.

    Batches with a single class still contribute; the AUC is computed once over
    the aggregated positions.
    """
    model.eval()
    head.eval()
    all_logits, all_flags = [], []
    with torch.no_grad():
        for corrupted, flags in stream:
            logits = head(enhancer_positions(model, corrupted))
            all_logits.append(logits.reshape(-1))
            all_flags.append(flags.reshape(-1))
    logits = torch.cat(all_logits).numpy()
    flags = torch.cat(all_flags).to(torch.int64).numpy()
    if flags.min() == flags.max():
        auc = float("nan")
    else:
        auc = float(roc_auc_score(flags, logits))
    accuracy = float(((logits > 0).astype(np.int64) == flags).mean())
    return {"auc": auc, "accuracy_at_0.5": accuracy, "flag_fraction": float(flags.mean())}
