"""Corruption visualizer: original | masked overlay | sampled variants, one row per image."""

import os

import numpy as np
import torch

from .corruption import corrupt_variants, sample_mask
from .data import save_image


def masked_overlay(image, mask, grid_h, grid_w):
    """Dim the masked grid cells toward gray so the mask is visible."""
    c, h, w = image.shape
    cell_h, cell_w = h // grid_h, w // grid_w
    keep = (~mask.bool_tensor()).reshape(grid_h, grid_w).to(image.dtype)
    keep = keep.repeat_interleave(cell_h, 0).repeat_interleave(cell_w, 1)
    return image * keep + (0.5 + 0.2 * (image - 0.5)) * (1 - keep)


def compose_row(panels, pad=2):
    """Concatenate equally sized panels horizontally with white separators."""
    c, h, _ = panels[0].shape
    sep = torch.ones(c, h, pad)
    row = []
    for i, p in enumerate(panels):
        if i:
            row.append(sep)
        row.append(p)
    return torch.cat(row, dim=2)


def render_corruption_panels(gen, tok, images, corruption_cfg, n_variants, out_dir, seed=0):
    """Write one PNG per input image; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    gen.eval()
    for i, image in enumerate(images):
        rng = np.random.default_rng((seed, 3, i))
        golden_h, golden_w = tok.encode_tokens(image).shape
        mask = sample_mask(corruption_cfg, golden_h, golden_w, rng)
        panels = [image, masked_overlay(image, mask, golden_h, golden_w)]
        for _, decoded in corrupt_variants(gen, tok, image, mask, n_variants, rng):
            panels.append(decoded)
        path = os.path.join(out_dir, f"panel_{i:03d}.png")
        save_image(compose_row(panels), path)
        paths.append(path)
    return paths
