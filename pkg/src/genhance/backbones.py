"""Network architectures: ViT enhancer, small masked-token generator, mini ResNet.

The generator is a shallow transformer over patch embeddings with a learned
mask embedding and a token-vocabulary head. When weight sharing is enabled the
generator and a ViT enhancer reference the *same* patch-embedding module and
the same first L transformer blocks (parameter identity, not copies).
No dropout, stochastic depth or layer scaling anywhere.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError


@dataclass
class ViTConfig:
    image_size: int = 32
    patch: int = 8
    dim: int = 192
    depth: int = 8
    heads: int = 3
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigurationError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.depth < 1:
            raise ConfigurationError("depth must be >= 1")
        if self.image_size % self.patch:
            raise ConfigurationError("image_size must be divisible by patch")

    @property
    def grid(self):
        return self.image_size // self.patch

    @property
    def num_patches(self):
        return self.grid * self.grid


@dataclass
class GeneratorConfig(ViTConfig):
    depth: int = 4
    vocab_size: int = 512


@dataclass
class MiniResNetConfig:
    image_size: int = 32
    stage_widths: tuple = (32, 64, 128)
    blocks_per_stage: tuple = (2, 2, 2)
    token_stride: int = 8

    def __post_init__(self):
        if len(self.stage_widths) != len(self.blocks_per_stage):
            raise ConfigurationError("stage_widths and blocks_per_stage must align")

    @property
    def native_stride(self):
        return 2 ** len(self.stage_widths)

    @property
    def dim(self):
        return self.stage_widths[-1]


class PatchEmbed(nn.Module):
    """Linear embedding of flattened non-overlapping patches."""

    def __init__(self, patch, dim):
        super().__init__()
        self.patch = patch
        self.proj = nn.Linear(patch * patch * 3, dim)

    def forward(self, images):
        p = self.patch
        b, c, h, w = images.shape
        if h % p or w % p:
            raise ConfigurationError(f"image dims {(h, w)} not divisible by patch {p}")
        x = images.reshape(b, c, h // p, p, w // p, p)
        x = x.permute(0, 2, 4, 1, 3, 5).reshape(b, (h // p) * (w // p), c * p * p)
        return self.proj(x)


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        x = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(x)


class Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio=4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


def _init_transformer(module):
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class VisionTransformer(nn.Module):
    """ViT with a class token and learned 1-D absolute position embeddings.

    ``patch_embed`` and ``shared_blocks`` may be pre-built modules, in which
    case they are used by reference (weight sharing).
    """

    def __init__(self, cfg: ViTConfig, patch_embed=None, shared_blocks=()):
        super().__init__()
        self.cfg = cfg
        if patch_embed is not None and patch_embed.proj.out_features != cfg.dim:
            raise ConfigurationError("shared patch embedding width mismatch")
        self.patch_embed = patch_embed if patch_embed is not None else PatchEmbed(cfg.patch, cfg.dim)
        if len(shared_blocks) > cfg.depth:
            raise ConfigurationError("more shared blocks than depth")
        own = [Block(cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth - len(shared_blocks))]
        self.blocks = nn.ModuleList(list(shared_blocks) + own)
        self.num_shared = len(shared_blocks)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_patches + 1, cfg.dim))
        self.norm = nn.LayerNorm(cfg.dim)
        self.apply(_init_transformer)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def forward_embeddings(self, emb):
        """Run the trunk on an already patch-embedded (B, n, dim) sequence."""
        b = emb.shape[0]
        cls = self.cls_token.expand(b, -1, -1)
        x = torch.cat([cls, emb], dim=1) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)

    def forward(self, images):
        """(B, 3, H, W) -> (cls_features (B, dim), patch_features (B, n, dim))."""
        x = self.forward_embeddings(self.patch_embed(images))
        return x[:, 0], x[:, 1:]


def vit_forward(model, image):
    """Single-image convenience: returns (cls_feature (dim,), patch_features (n, dim))."""
    cls, patches = model(image.unsqueeze(0))
    return cls.squeeze(0), patches.squeeze(0)


class MaskedTokenGenerator(nn.Module):
    """Small transformer that predicts visual-token ids at masked positions."""

    def __init__(self, cfg: GeneratorConfig, patch_embed=None, shared_blocks=()):
        super().__init__()
        self.cfg = cfg
        self.trunk = VisionTransformer(cfg, patch_embed=patch_embed, shared_blocks=shared_blocks)
        self.mask_embedding = nn.Parameter(torch.zeros(cfg.dim))
        self.head = nn.Linear(cfg.dim, cfg.vocab_size)
        nn.init.trunc_normal_(self.mask_embedding, std=0.02)
        _init_transformer(self.head)

    @property
    def vocab_size(self):
        return self.cfg.vocab_size

    def embed_patches(self, images):
        return self.trunk.patch_embed(images)

    def predict_logits(self, masked_emb):
        """(B, n, dim) masked embedding sequence -> (B, n, V) logits."""
        x = self.trunk.forward_embeddings(masked_emb)
        return self.head(x[:, 1:])


class BasicBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), nn.BatchNorm2d(out_ch)
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class MiniResNet(nn.Module):
    """Small residual CNN producing one feature vector per token-grid cell.

    Each stage halves the resolution; if the native stride differs from the
    token stride the feature map is average-pooled onto the token grid.
    """

    def __init__(self, cfg: MiniResNetConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.token_stride > cfg.native_stride:
            if cfg.token_stride % cfg.native_stride:
                raise ConfigurationError("token stride not a multiple of the native stride")
            self.align_pool = cfg.token_stride // cfg.native_stride
        elif cfg.token_stride == cfg.native_stride:
            self.align_pool = 1
        else:
            raise ConfigurationError(
                f"native stride {cfg.native_stride} is coarser than token stride "
                f"{cfg.token_stride}; no alignment pool can recover the token grid"
            )
        width0 = cfg.stage_widths[0]
        self.stem = nn.Sequential(
            nn.Conv2d(3, width0, 3, padding=1, bias=False), nn.BatchNorm2d(width0), nn.ReLU()
        )
        stages = []
        in_ch = width0
        for width, blocks in zip(cfg.stage_widths, cfg.blocks_per_stage):
            layers = [BasicBlock(in_ch, width, stride=2)]
            layers += [BasicBlock(width, width) for _ in range(blocks - 1)]
            stages.append(nn.Sequential(*layers))
            in_ch = width
        self.stages = nn.Sequential(*stages)

    def forward(self, images):
        """(B, 3, H, W) -> (B, dim, H/f, W/f) grid features aligned to the token grid."""
        if images.shape[-1] % self.cfg.native_stride or images.shape[-2] % self.cfg.native_stride:
            raise ConfigurationError("image dims not divisible by the network stride")
        x = self.stages(self.stem(images))
        if self.align_pool > 1:
            x = F.avg_pool2d(x, self.align_pool)
        return x


def resnet_forward(model, image):
    """Single-image convenience: (3, H, W) -> (h, w, dim) grid features."""
    out = model(image.unsqueeze(0)).squeeze(0)
    return out.permute(1, 2, 0)


class PixelHead(nn.Module):
    """Per-position linear map to a patch of pixels."""

    def __init__(self, dim, patch):
        super().__init__()
        self.patch = patch
        self.proj = nn.Linear(dim, patch * patch * 3)

    def forward(self, features):
        return self.proj(features)

    def assemble(self, predictions, grid_h, grid_w):
        """(B, n, patch*patch*3) -> (B, 3, H, W) image-plane prediction."""
        b = predictions.shape[0]
        p = self.patch
        x = predictions.reshape(b, grid_h, grid_w, 3, p, p)
        x = x.permute(0, 3, 1, 4, 2, 5).reshape(b, 3, grid_h * p, grid_w * p)
        return x


class DetectHead(nn.Module):
    """Per-position linear map to a single replaced/kept logit."""

    def __init__(self, dim):
        super().__init__()
        self.proj = nn.Linear(dim, 1)

    def forward(self, features):
        return self.proj(features).squeeze(-1)


@dataclass
class SharedStem:
    """References (not copies) to the modules aliased between the two models."""

    patch_embed: PatchEmbed
    blocks: tuple
    num_layers: int

    def parameter_ids(self):
        ids = {id(p) for p in self.patch_embed.parameters()}
        for blk in self.blocks:
            ids |= {id(p) for p in blk.parameters()}
        return ids

    def parameter_count(self):
        seen = {}
        for p in self.patch_embed.parameters():
            seen[id(p)] = p.numel()
        for blk in self.blocks:
            for p in blk.parameters():
                seen[id(p)] = p.numel()
        return sum(seen.values())


def build_shared_stem(enhancer: VisionTransformer, num_layers: int):
    if num_layers < 0 or num_layers > len(enhancer.blocks):
        raise ConfigurationError("shared layer count out of range")
    return SharedStem(
        patch_embed=enhancer.patch_embed,
        blocks=tuple(enhancer.blocks[:num_layers]),
        num_layers=num_layers,
    )


def build_backbone_pair(gen_cfg: GeneratorConfig, enhancer, share_layers=0):
    """Construct the generator, optionally sharing the enhancer's stem.

    enhancer: a VisionTransformer or MiniResNet built beforehand. Sharing is
    only defined for ViT enhancers; L > 0 with a CNN is a configuration error.
    Returns (generator, shared_stem_or_None).
    """
    if share_layers:
        if not isinstance(enhancer, VisionTransformer):
            raise ConfigurationError("weight sharing requires a ViT enhancer")
        if enhancer.cfg.dim != gen_cfg.dim or enhancer.cfg.patch != gen_cfg.patch:
            raise ConfigurationError("weight sharing requires matching width and patch size")
        if share_layers > min(gen_cfg.depth, enhancer.cfg.depth):
            raise ConfigurationError("share_layers exceeds one of the depths")
        stem = build_shared_stem(enhancer, share_layers)
        gen = MaskedTokenGenerator(gen_cfg, patch_embed=stem.patch_embed, shared_blocks=stem.blocks)
        return gen, stem
    return MaskedTokenGenerator(gen_cfg), None


def enhancer_positions(model, images):
    """Per-token-position features for either enhancer family: (B, n, dim)."""
    if isinstance(model, VisionTransformer):
        _, patches = model(images)
        return patches
    grid = model(images)
    b, d, h, w = grid.shape
    return grid.permute(0, 2, 3, 1).reshape(b, h * w, d)


def pooled_features(model, images, pooling="mean"):
    """Probe features: mean over positions, or the class token for ViTs."""
    if pooling == "cls":
        if not isinstance(model, VisionTransformer):
            raise ConfigurationError("cls pooling is only defined for ViT backbones")
        cls, _ = model(images)
        return cls
    return enhancer_positions(model, images).mean(dim=1)


def feature_dim(model):
    return model.cfg.dim


def grid_shape(model):
    if isinstance(model, VisionTransformer):
        g = model.cfg.grid
        return g, g
    g = model.cfg.image_size // model.cfg.token_stride
    return g, g
