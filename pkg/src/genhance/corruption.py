"""Image corruption via masked-token prediction and stochastic replacement.

Pipeline for one image: encode golden tokens with the frozen tokenizer, mask a
random subset of patch embeddings, let the generator predict token logits at
the masked positions, sample replacement ids, splice them over the golden grid,
decode the spliced grid back to pixels. Positions are row-major over the token
grid, and the patch grid is aligned one-to-one with the token grid (patch size
equals the tokenizer downsample factor).
"""

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError, MaskGenerationError

SAMPLING_STRATEGIES = ("softmax", "argmax", "uniform")


@dataclass(frozen=True)
class MaskSet:
    """k distinct masked positions out of a length-n row-major sequence."""

    n: int
    positions: tuple

    def __post_init__(self):
        pos = tuple(sorted(int(p) for p in self.positions))
        object.__setattr__(self, "positions", pos)
        if len(set(pos)) != len(pos):
            raise ConfigurationError("mask positions must be distinct")
        if pos and (pos[0] < 0 or pos[-1] >= self.n):
            raise ConfigurationError(f"mask positions out of range [0, {self.n})")

    @property
    def k(self):
        return len(self.positions)

    def index_tensor(self):
        return torch.tensor(self.positions, dtype=torch.long)

    def bool_tensor(self):
        out = torch.zeros(self.n, dtype=torch.bool)
        if self.positions:
            out[self.index_tensor()] = True
        return out


@dataclass
class GeneratorOutput:
    """Vocabulary logits for the masked positions, ordered by ascending position."""

    logits: torch.Tensor  # (k, V)

    def __post_init__(self):
        if self.logits.ndim != 2:
            raise ConfigurationError("generator logits must be (k, V)")
        if not torch.isfinite(self.logits).all():
            raise ConfigurationError("generator logits must be finite")


@dataclass
class CorruptionSample:
    """One full corruption record, aligned on the token grid."""

    original: torch.Tensor  # (3, H, W)
    mask: MaskSet
    golden: torch.Tensor  # (h, w) int64
    sampled: torch.Tensor  # (k,) int64
    corrupted_tokens: torch.Tensor  # (h, w) int64
    corrupted_image: torch.Tensor  # (3, H, W)
    flags: torch.Tensor  # (h, w) bool

    def validate(self):
        keep = ~self.mask.bool_tensor().reshape(self.golden.shape)
        if not torch.equal(self.corrupted_tokens[keep], self.golden[keep]):
            raise AssertionError("corrupted tokens differ from golden off-mask")
        if self.flags[keep].any():
            raise AssertionError("flags set off-mask")
        if not torch.equal(self.flags, self.corrupted_tokens != self.golden):
            raise AssertionError("flags inconsistent with token difference")
        return self


@dataclass
class CorruptionConfig:
    strategy: str = "random"  # random | blockwise
    ratio_min: float = 0.5
    ratio_max: float = 0.6
    sampling: str = "softmax"  # softmax | argmax | uniform
    temperature: float = 1.0

    def __post_init__(self):
        if self.strategy not in ("random", "blockwise"):
            raise ConfigurationError(f"unknown masking strategy {self.strategy!r}")
        if self.sampling not in SAMPLING_STRATEGIES:
            raise ConfigurationError(f"unknown sampling strategy {self.sampling!r}")
        if not (0 <= self.ratio_min <= self.ratio_max <= 1):
            raise ConfigurationError("need 0 <= ratio_min <= ratio_max <= 1")
        if self.sampling == "softmax" and self.temperature <= 0:
            raise ConfigurationError("softmax temperature must be > 0")


def draw_mask_count(n, ratio_min, ratio_max, rng):
    """k drawn uniformly from the integer range [ceil(ratio_min*n), ceil(ratio_max*n)]."""
    k_lo = math.ceil(ratio_min * n)
    k_hi = max(k_lo, math.ceil(ratio_max * n))
    return int(rng.integers(k_lo, k_hi + 1))


def sample_mask_random(n, k, rng):
    """Uniformly random k-subset of positions."""
    if k < 0 or k > n:
        raise ConfigurationError(f"need 0 <= k <= n, got k={k}, n={n}")
    positions = rng.choice(n, size=k, replace=False) if k else np.empty(0, dtype=np.int64)
    return MaskSet(n=n, positions=tuple(int(p) for p in positions))


_MIN_BLOCK = 4
_LOG_ASPECT = (math.log(0.3), math.log(1 / 0.3))


def sample_mask_blockwise(h, w, target_ratio, rng, max_iters=None):
    """Union of random rectangles grown until the target cell count is reached.

    Blocks have at least 4 cells and aspect ratio within [0.3, 1/0.3]. A block
    proposal is rejected while it would add more new cells than still needed
    plus 3, so the achieved count lands in [ceil(target*n), ceil(target*n)+3].
    """
    n = h * w
    if n < 16:
        raise ConfigurationError("blockwise masking needs a grid of at least 16 cells")
    if not (0 < target_ratio < 1):
        raise ConfigurationError("target_ratio must be in (0, 1)")
    need = math.ceil(target_ratio * n)
    max_iters = max_iters or 50 * n
    masked = np.zeros((h, w), dtype=bool)
    count = 0
    iters = 0
    while count < need:
        iters += 1
        if iters > max_iters:
            raise MaskGenerationError(
                f"could not reach ratio {target_ratio} on {h}x{w} in {max_iters} iterations"
            )
        remaining = need - count
        area = int(rng.integers(_MIN_BLOCK, max(_MIN_BLOCK, min(n // 4, need // 2)) + 1))
        aspect = math.exp(rng.uniform(*_LOG_ASPECT))
        bh = min(h, max(1, int(round(math.sqrt(area * aspect)))))
        bw = min(w, max(1, int(round(math.sqrt(area / aspect)))))
        if bh * bw < _MIN_BLOCK:
            continue
        top = int(rng.integers(0, h - bh + 1))
        left = int(rng.integers(0, w - bw + 1))
        block = masked[top : top + bh, left : left + bw]
        new = int(bh * bw - block.sum())
        if new == 0 or new > remaining + 3:
            continue
        block[:] = True
        count += new
    positions = np.flatnonzero(masked.reshape(-1))
    return MaskSet(n=n, positions=tuple(int(p) for p in positions))


def sample_mask(cfg: CorruptionConfig, grid_h, grid_w, rng):
    n = grid_h * grid_w
    if cfg.strategy == "blockwise":
        ratio = rng.uniform(cfg.ratio_min, cfg.ratio_max)
        return sample_mask_blockwise(grid_h, grid_w, ratio, rng)
    k = draw_mask_count(n, cfg.ratio_min, cfg.ratio_max, rng)
    return sample_mask_random(n, k, rng)


def apply_mask(embeddings, mask: MaskSet, mask_embedding):
    """Replace rows at masked positions with the learned mask embedding."""
    if embeddings.shape[0] != mask.n:
        raise ConfigurationError(f"embeddings rows {embeddings.shape[0]} != mask.n {mask.n}")
    out = embeddings.clone()
    if mask.k:
        out[mask.index_tensor()] = mask_embedding.to(embeddings.dtype)
    return out


def generator_predict(gen, masked_seq, mask: MaskSet):
    """Logits for the masked positions only (ascending position order)."""
    logits = gen.predict_logits(masked_seq.unsqueeze(0)).squeeze(0)
    return GeneratorOutput(logits=logits[mask.index_tensor()])


def mim_loss(out: GeneratorOutput, golden, mask: MaskSet):
    """Mean cross-entropy between masked-position logits and golden ids."""
    if mask.k == 0:
        raise ConfigurationError("mim loss is undefined for an empty mask")
    golden_flat = golden.reshape(-1)
    if golden_flat.shape[0] != mask.n:
        raise ConfigurationError("golden grid size does not match mask.n")
    if out.logits.shape[0] != mask.k:
        raise ConfigurationError("logit rows do not match mask size")
    targets = golden_flat[mask.index_tensor()]
    return torch.nn.functional.cross_entropy(out.logits, targets)


def _argmax_lowest(logits):
    # torch.argmax picks the first maximum, but make the tie rule explicit
    v = logits.shape[-1]
    top = logits.max(dim=-1, keepdim=True).values
    idx = torch.arange(v, device=logits.device).expand_as(logits)
    return torch.where(logits == top, idx, v).min(dim=-1).values


def sample_replacements(out: GeneratorOutput, strategy="softmax", temperature=1.0, rng=None):
    """Draw one replacement id per masked position.

    softmax: categorical draw from softmax(logits / temperature) per row.
    argmax: row-wise argmax, ties to the lowest id. uniform: ignore logits.
    rng is a torch.Generator (required for the stochastic strategies).
    """
    logits = out.logits
    if not torch.isfinite(logits).all():
        raise ConfigurationError("non-finite logits")
    k, v = logits.shape
    if strategy == "argmax":
        return _argmax_lowest(logits)
    if k == 0:
        return torch.empty(0, dtype=torch.long)
    if strategy == "uniform":
        return torch.randint(v, (k,), generator=rng)
    if strategy == "softmax":
        if temperature <= 0:
            raise ConfigurationError("softmax temperature must be > 0")
        probs = torch.softmax(logits.detach().to(torch.float64) / temperature, dim=-1)
        return torch.multinomial(probs, 1, generator=rng).squeeze(1)
    raise ConfigurationError(f"unknown sampling strategy {strategy!r}")


def compose_corrupted(golden, mask: MaskSet, sampled):
    """Splice sampled ids over the golden grid at the masked positions."""
    sampled = torch.as_tensor(sampled, dtype=torch.long)
    if sampled.shape[0] != mask.k:
        raise ConfigurationError(f"sampled length {sampled.shape[0]} != mask k {mask.k}")
    flat = golden.reshape(-1).clone()
    if flat.shape[0] != mask.n:
        raise ConfigurationError("golden grid size does not match mask.n")
    if mask.k:
        flat[mask.index_tensor()] = sampled
    return flat.reshape(golden.shape)


def replacement_flags(golden, corrupted):
    """Boolean grid: 1 where the corrupted id differs from the golden id."""
    if golden.shape != corrupted.shape:
        raise ConfigurationError(f"shape mismatch {tuple(golden.shape)} vs {tuple(corrupted.shape)}")
    return golden != corrupted


def _torch_gen_from(rng):
    g = torch.Generator()
    g.manual_seed(int(rng.integers(0, 2**63 - 1)))
    return g


def corrupt(gen, tok, image, cfg: CorruptionConfig, rng):
    """Full single-image corruption record. ``rng`` is a numpy Generator."""
    if gen.vocab_size != tok.vocab_size:
        raise ConfigurationError(
            f"generator vocab {gen.vocab_size} != tokenizer vocab {tok.vocab_size}"
        )
    if not tok.frozen:
        raise ConfigurationError("tokenizer must be frozen before corruption")
    golden = tok.encode_tokens(image)
    h, w = golden.shape
    mask = sample_mask(cfg, h, w, rng)
    tgen = _torch_gen_from(rng)
    with torch.no_grad():
        emb = gen.embed_patches(image.unsqueeze(0)).squeeze(0)
        masked = apply_mask(emb, mask, gen.mask_embedding)
        out = generator_predict(gen, masked, mask)
    sampled = sample_replacements(out, cfg.sampling, cfg.temperature, tgen)
    corrupted_tokens = compose_corrupted(golden, mask, sampled)
    corrupted_image = tok.decode_tokens(corrupted_tokens).detach()
    return CorruptionSample(
        original=image,
        mask=mask,
        golden=golden,
        sampled=sampled,
        corrupted_tokens=corrupted_tokens,
        corrupted_image=corrupted_image,
        flags=replacement_flags(golden, corrupted_tokens),
    )


def corrupt_variants(gen, tok, image, mask: MaskSet, n_variants, rng):
    """Repeated sampling with one fixed mask (for visual panels)."""
    golden = tok.encode_tokens(image)
    tgen = _torch_gen_from(rng)
    with torch.no_grad():
        emb = gen.embed_patches(image.unsqueeze(0)).squeeze(0)
        out = generator_predict(gen, apply_mask(emb, mask, gen.mask_embedding), mask)
    variants = []
    for _ in range(n_variants):
        sampled = sample_replacements(out, "softmax", 1.0, tgen)
        tokens = compose_corrupted(golden, mask, sampled)
        variants.append((tokens, tok.decode_tokens(tokens)))
    return variants


def corrupt_batch(gen, tok, images, cfg: CorruptionConfig, rng):
    """Batched corruption used by the training loop.

    Returns a dict with golden ids, the boolean position mask, full-sequence
    generator logits (differentiable), corrupted token grids, detached
    corrupted images, and flags. The generator forward runs with gradients so
    the masked-prediction loss can train it; the sampled ids and the decoded
    corrupted image never carry gradients back.
    """
    if gen.vocab_size != tok.vocab_size:
        raise ConfigurationError("generator/tokenizer vocabulary mismatch")
    if not tok.frozen:
        raise ConfigurationError("tokenizer must be frozen before corruption")
    b = images.shape[0]
    golden = tok.encode_tokens(images)
    h, w = golden.shape[-2:]
    n = h * w
    mask_bool = torch.zeros(b, n, dtype=torch.bool)
    for i in range(b):
        mask_bool[i] = sample_mask(cfg, h, w, rng).bool_tensor()
    tgen = _torch_gen_from(rng)
    emb = gen.embed_patches(images)
    emb = torch.where(mask_bool.unsqueeze(-1), gen.mask_embedding.to(emb.dtype), emb)
    logits = gen.predict_logits(emb)  # (B, n, V)
    flat_logits = logits[mask_bool]  # (sum_k, V)
    sampled = sample_replacements(
        GeneratorOutput(logits=flat_logits.detach()), cfg.sampling, cfg.temperature, tgen
    )
    corrupted_tokens = golden.reshape(b, n).clone()
    corrupted_tokens[mask_bool] = sampled
    corrupted_tokens = corrupted_tokens.reshape(b, h, w)
    corrupted_images = tok.decode_tokens(corrupted_tokens).detach()
    return {
        "golden": golden,
        "mask": mask_bool,
        "logits": logits,
        "corrupted_tokens": corrupted_tokens,
        "corrupted_images": corrupted_images,
        "flags": (corrupted_tokens != golden).reshape(b, n),
    }


def batched_mim_loss(logits, golden, mask_bool):
    """Cross-entropy over all masked positions of a batch."""
    if not mask_bool.any():
        raise ConfigurationError("mim loss is undefined with no masked positions")
    b, n, v = logits.shape
    targets = golden.reshape(b, n)[mask_bool]
    return torch.nn.functional.cross_entropy(logits[mask_bool], targets)


def corrupt_random_erase(image, ratio, rng, fill=None):
    """Erase rectangular pixel blocks to a constant fill (the dataset mean).

    Returns (erased image, boolean pixel mask). ``fill`` defaults to the
    image's own per-channel mean when no dataset statistic is supplied.
    """
    if not (0 < ratio < 1):
        raise ConfigurationError("ratio must be in (0, 1)")
    c, h, w = image.shape
    if fill is None:
        fill_t = image.mean(dim=(1, 2))
    else:
        fill_t = torch.as_tensor(fill, dtype=image.dtype).reshape(-1)
        if fill_t.numel() == 1:
            fill_t = fill_t.expand(c).clone()
    need = math.floor(ratio * h * w)
    masked = np.zeros((h, w), dtype=bool)
    if need == 0:
        return image.clone(), torch.from_numpy(masked)
    count = 0
    iters = 0
    max_iters = 20000
    while count < need:
        iters += 1
        if iters > max_iters:
            raise MaskGenerationError("random erase could not reach the target ratio")
        remaining = need - count
        # block areas shrink as the target nears so the final count lands exactly
        area_hi = max(1, min(need // 4, remaining))
        area_lo = min(max(1, need // 20), area_hi)
        area = int(rng.integers(area_lo, area_hi + 1))
        aspect = math.exp(rng.uniform(*_LOG_ASPECT))
        bh = min(h, max(1, int(round(math.sqrt(area * aspect)))))
        bw = min(w, max(1, int(round(math.sqrt(area / aspect)))))
        top = int(rng.integers(0, h - bh + 1))
        left = int(rng.integers(0, w - bw + 1))
        block = masked[top : top + bh, left : left + bw]
        new = int(bh * bw - block.sum())
        if new == 0 or new > remaining:
            continue
        block[:] = True
        count += new
    pixel_mask = torch.from_numpy(masked)
    out = image.clone()
    out[:, pixel_mask] = fill_t.unsqueeze(1)
    return out, pixel_mask
