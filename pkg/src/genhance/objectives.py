"""Enhancer pretext losses and pixel-target normalization schemes.

Three reconstruction targets are supported: raw pixels, per-patch
(non-overlapping window) standardization, and per-pixel sliding-window
standardization. Window statistics are computed per channel in float64 using
the identity (x*count - sum) / count for the centered value, which keeps
constant inputs mapping to exact zeros even at the clipped borders.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigurationError

NORM_SCHEMES = ("none", "nonoverlap", "sliding")


@dataclass
class NormalizedTarget:
    values: torch.Tensor
    scheme: str
    window: int
    eps: float


def _box_sums(x, window):
    """Clipped box-filter sums and cell counts over the trailing two dims.

    For even windows the box spans [i - (w-1)//2, i + w//2], i.e. one extra
    row/column below/right of the center.
    """
    lo = (window - 1) // 2
    hi = window // 2
    *lead, h, w = x.shape
    ones = torch.ones(h, w, dtype=x.dtype)

    def box(t):
        c = t.cumsum(-2).cumsum(-1)
        c = F.pad(c, (1, 0, 1, 0))
        top = (torch.arange(h) - lo).clamp(min=0)
        bot = (torch.arange(h) + hi + 1).clamp(max=h)
        left = (torch.arange(w) - lo).clamp(min=0)
        right = (torch.arange(w) + hi + 1).clamp(max=w)
        tl = c[..., top, :][..., :, left]
        tr = c[..., top, :][..., :, right]
        bl = c[..., bot, :][..., :, left]
        br = c[..., bot, :][..., :, right]
        return br - bl - tr + tl

    return box(x), box(x * x), box(ones)


def sliding_window_normalize(img, window=8, eps=1e-6):
    """Standardize each pixel by its local window's per-channel mean and std.

    Windows are clipped (shrunken) at the borders rather than padded. Output
    dtype follows the input; statistics are always accumulated in float64.
    """
    if window < 1:
        raise ConfigurationError("window must be >= 1")
    if eps <= 0:
        raise ConfigurationError("eps must be > 0")
    x = img.to(torch.float64)
    s, sq, cnt = _box_sums(x, window)
    num = x * cnt - s
    var_num = (sq * cnt - s * s).clamp(min=0.0)
    std = torch.sqrt(var_num) / cnt
    values = num / (cnt * (std + eps))
    return NormalizedTarget(values.to(img.dtype), "sliding", window, eps)


def nonoverlap_normalize(img, patch=8, eps=1e-6):
    """Standardize each pixel by its non-overlapping patch's per-channel stats."""
    if eps <= 0:
        raise ConfigurationError("eps must be > 0")
    *lead, h, w = img.shape
    if h % patch or w % patch:
        raise ConfigurationError(f"dims {(h, w)} not divisible by patch {patch}")
    x = img.to(torch.float64)
    gh, gw = h // patch, w // patch
    tiles = x.reshape(*lead, gh, patch, gw, patch)
    m = patch * patch
    s = tiles.sum(dim=(-3, -1), keepdim=True)
    sq = (tiles * tiles).sum(dim=(-3, -1), keepdim=True)
    num = tiles * m - s
    var_num = (sq * m - s * s).clamp(min=0.0)
    std = torch.sqrt(var_num) / m
    values = (num / (m * (std + eps))).reshape(*lead, h, w)
    return NormalizedTarget(values.to(img.dtype), "nonoverlap", patch, eps)


def normalize_target(img, scheme="sliding", window=8, eps=1e-6):
    if scheme == "none":
        return NormalizedTarget(img, "none", 0, eps)
    if scheme == "nonoverlap":
        return nonoverlap_normalize(img, patch=window, eps=eps)
    if scheme == "sliding":
        return sliding_window_normalize(img, window=window, eps=eps)
    raise ConfigurationError(f"unknown normalization scheme {scheme!r}; use one of {NORM_SCHEMES}")


def respix_loss(pred, target, l1_weight=1.0, l2_weight=1.0):
    """Pixel-regression loss over all positions: l1 + l2 terms, mean reduction."""
    values = target.values if isinstance(target, NormalizedTarget) else target
    if pred.shape != values.shape:
        raise ConfigurationError(f"shape mismatch {tuple(pred.shape)} vs {tuple(values.shape)}")
    diff = pred - values
    return l1_weight * diff.abs().mean() + l2_weight * diff.pow(2).mean()


def revdet_loss(logits, flags):
    """Mean binary cross-entropy with logits over all positions."""
    if logits.shape != flags.shape:
        raise ConfigurationError(f"shape mismatch {tuple(logits.shape)} vs {tuple(flags.shape)}")
    return F.binary_cross_entropy_with_logits(logits, flags.to(logits.dtype))
