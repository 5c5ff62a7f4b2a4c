"""Discrete image tokenizer: conv encoder, vector-quantized codebook, per-cell decoder.

Trained once on the toy corpus, then frozen for the whole pre-training phase.
The decoder is strictly per-cell (1x1 convs + pixel shuffle), so every grid
cell decodes independently of its neighbours; the encoder does use spatial
context. Nearest-codebook lookup breaks ties toward the lowest index, which
keeps encoding fully deterministic.
"""

import math
import struct
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt
from .data import iterate_batches
from .errors import ConfigurationError, FrozenParameterError

TOKEN_GRID_HEADER = struct.Struct("<HHI")  # h, w, vocab_size -> 8 bytes


@dataclass
class TokenizerConfig:
    downsample: int = 8
    vocab_size: int = 512
    code_dim: int = 64
    hidden: int = 96
    epochs: int = 8
    batch_size: int = 64
    lr: float = 2e-3
    commitment_weight: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ConfigurationError("vocab_size must be >= 2")
        if self.vocab_size > 65536:
            raise ConfigurationError("vocab_size must fit in uint16 token grids")
        if self.downsample < 1 or (self.downsample & (self.downsample - 1)) != 0:
            raise ConfigurationError("downsample must be a power of two")


class ConvEncoder(nn.Module):
    def __init__(self, hidden, code_dim, downsample):
        super().__init__()
        layers = []
        ch = 3
        n_down = int(math.log2(downsample))
        for i in range(n_down):
            out = min(hidden * (2**i), 4 * hidden)
            layers += [nn.Conv2d(ch, out, 4, stride=2, padding=1), nn.GELU()]
            ch = out
        layers += [nn.Conv2d(ch, ch, 3, padding=1), nn.GELU(), nn.Conv2d(ch, code_dim, 1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class GridDecoder(nn.Module):
    """One replicate-padded 3x3 conv over the code grid, then per-cell upsampling.

    Replicate padding keeps a uniform code grid exactly uniform, so an
    all-same-id grid decodes to bit-identical cells at every position.
    """

    def __init__(self, hidden, code_dim, downsample):
        super().__init__()
        width = 4 * hidden
        self.net = nn.Sequential(
            nn.Conv2d(code_dim, width, 3, padding=1, padding_mode="replicate"),
            nn.GELU(),
            nn.Conv2d(width, width, 1),
            nn.GELU(),
            nn.Conv2d(width, downsample * downsample * 3, 1),
            nn.PixelShuffle(downsample),
        )

    def forward(self, codes):
        return torch.sigmoid(self.net(codes))


def nearest_code(features, codebook):
    """Indices of nearest codebook rows; ties resolve to the lowest index.

    features: (M, D); codebook: (V, D). torch.argmin returns the first minimum,
    which implements the lowest-index rule.
    """
    d = (
        features.pow(2).sum(1, keepdim=True)
        - 2 * features @ codebook.t()
        + codebook.pow(2).sum(1)
    )
    return torch.argmin(d, dim=1)


class ImageTokenizer(nn.Module):
    def __init__(self, config: TokenizerConfig):
        super().__init__()
        self.config = config
        self.encoder = ConvEncoder(config.hidden, config.code_dim, config.downsample)
        self.decoder = GridDecoder(config.hidden, config.code_dim, config.downsample)
        self.codebook = nn.Parameter(torch.empty(config.vocab_size, config.code_dim))
        nn.init.uniform_(self.codebook, -1.0 / config.vocab_size, 1.0 / config.vocab_size)
        self._frozen = False

    @property
    def downsample(self):
        return self.config.downsample

    @property
    def vocab_size(self):
        return self.config.vocab_size

    @property
    def frozen(self):
        return self._frozen

    def assert_mutable(self, what="update parameters"):
        if self._frozen:
            raise FrozenParameterError(f"tokenizer is frozen; cannot {what}")

    def freeze(self):
        """Idempotent; after this no training op may touch the parameters."""
        self._frozen = True
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def _check_dims(self, images):
        f = self.config.downsample
        if images.shape[-1] % f or images.shape[-2] % f:
            raise ConfigurationError(
                f"image dims {tuple(images.shape[-2:])} not divisible by downsample {f}"
            )

    def encode_features(self, images):
        self._check_dims(images)
        return self.encoder(images)

    @torch.no_grad()
    def encode_tokens(self, images):
        """(B, 3, H, W) -> (B, H/f, W/f) int64 token grid. Deterministic."""
        squeeze = images.ndim == 3
        if squeeze:
            images = images.unsqueeze(0)
        feats = self.encode_features(images)
        b, d, h, w = feats.shape
        flat = feats.permute(0, 2, 3, 1).reshape(-1, d)
        ids = nearest_code(flat, self.codebook).reshape(b, h, w)
        return ids.squeeze(0) if squeeze else ids

    @torch.no_grad()
    def decode_tokens(self, ids):
        """(B, h, w) int grid -> (B, 3, h*f, w*f) image in [0, 1]. Deterministic."""
        squeeze = ids.ndim == 2
        if squeeze:
            ids = ids.unsqueeze(0)
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise ConfigurationError("token id out of range")
        codes = self.codebook[ids].permute(0, 3, 1, 2)
        out = self.decoder(codes)
        return out.squeeze(0) if squeeze else out

    def forward(self, images):
        """Training pass: returns (reconstruction, vq_loss, ids)."""
        self.assert_mutable("run a training forward")
        feats = self.encode_features(images)
        b, d, h, w = feats.shape
        flat = feats.permute(0, 2, 3, 1).reshape(-1, d)
        ids = nearest_code(flat, self.codebook)
        quant = self.codebook[ids]
        codebook_loss = F.mse_loss(quant, flat.detach())
        commit_loss = F.mse_loss(flat, quant.detach())
        # straight-through: gradients of the decoder flow into the encoder
        quant_st = flat + (quant - flat).detach()
        codes = quant_st.reshape(b, h, w, d).permute(0, 3, 1, 2)
        recon = self.decoder(codes)
        vq_loss = codebook_loss + self.config.commitment_weight * commit_loss
        return recon, vq_loss, ids.reshape(b, h, w)

    def parameter_checksum(self):
        return ckpt.checksum_of(self)


def psnr(a, b):
    mse = F.mse_loss(a, b).item()
    if mse == 0:
        return float("inf")
    return -10.0 * math.log10(mse)


def train_tokenizer(ds, config: TokenizerConfig, val_ds=None, log=None, tok=None):
    """Train the tokenizer on a dataset; returns (tokenizer, report).

    The returned model is NOT frozen; call ``freeze()`` before handing it to
    pre-training. Passing an existing ``tok`` continues training it (and is a
    hard error when that model is frozen). The report carries the loss
    history, held-out PSNR and a dead-code warning when at least half of the
    codebook went unused.
    """
    if len(ds) == 0:
        raise ConfigurationError("cannot train a tokenizer on an empty dataset")
    torch.manual_seed(config.seed)
    initialized = tok is not None
    if tok is None:
        tok = ImageTokenizer(config)
    tok.assert_mutable("train")
    opt = torch.optim.Adam(tok.parameters(), lr=config.lr)
    history = []
    rng = np.random.default_rng((config.seed, 17))
    usage = torch.zeros(config.vocab_size, dtype=torch.long)
    for epoch in range(config.epochs):
        # cosine decay keeps late epochs from churning the codebook
        lr = config.lr * 0.5 * (1 + math.cos(math.pi * epoch / max(1, config.epochs)))
        for group in opt.param_groups:
            group["lr"] = max(lr, config.lr * 0.05)
        usage = torch.zeros(config.vocab_size, dtype=torch.long)
        for images, _ in iterate_batches(ds, config.batch_size, config.seed, epoch):
            if not initialized:
                # seed the codebook from real encoder outputs to avoid dead codes
                with torch.no_grad():
                    feats = tok.encode_features(images)
                    flat = feats.permute(0, 2, 3, 1).reshape(-1, feats.shape[1])
                    pick = rng.choice(len(flat), size=config.vocab_size, replace=len(flat) < config.vocab_size)
                    tok.codebook.copy_(flat[torch.from_numpy(pick)])
                initialized = True
            recon, vq_loss, ids = tok(images)
            loss = F.mse_loss(recon, images) + vq_loss
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.append(float(loss.detach()))
            usage += torch.bincount(ids.reshape(-1), minlength=config.vocab_size)
        dead = (usage == 0).nonzero().flatten()
        if len(dead) and epoch < config.epochs - 2:
            # revive dead codes near random live encoder outputs; the final
            # epochs run without revival so the codebook settles
            with torch.no_grad():
                images, _ = next(iterate_batches(ds, config.batch_size, config.seed + 1, epoch))
                feats = tok.encode_features(images).permute(0, 2, 3, 1).reshape(-1, config.code_dim)
                pick = rng.choice(len(feats), size=len(dead), replace=len(feats) < len(dead))
                tok.codebook[dead] = feats[torch.from_numpy(pick)]
        if log:
            log(f"tokenizer epoch {epoch}: loss {history[-1]:.4f}, dead codes {len(dead)}")
    usage_p = usage.double() / max(1, int(usage.sum()))
    nonzero = usage_p[usage_p > 0]
    entropy = float(-(nonzero * nonzero.log()).sum()) if len(nonzero) else 0.0
    dead_fraction = float((usage == 0).double().mean())
    report = {
        "loss_history": history,
        "final_loss": history[-1] if history else None,
        "dead_code_fraction": dead_fraction,
        "codebook_entropy": entropy,
        "warnings": (["codebook collapse: >=50% dead codes"] if dead_fraction >= 0.5 else []),
    }
    if val_ds is not None and len(val_ds):
        tok.eval()
        with torch.no_grad():
            recon = tok.decode_tokens(tok.encode_tokens(val_ds.images))
        report["val_psnr"] = psnr(recon, val_ds.images)
        tok.train()
    return tok, report


def save_tokenizer(tok, path):
    cfg = asdict(tok.config)
    ckpt.save_container(
        path,
        kind="tokenizer",
        config=cfg,
        tensors=ckpt.state_dict_tensors(tok),
        extra={"frozen": tok.frozen},
    )


def load_tokenizer(path):
    header, tensors = ckpt.load_container(path, expect_kind="tokenizer")
    tok = ImageTokenizer(TokenizerConfig(**header["config"]))
    ckpt.load_state_into(tok, tensors)
    if header["extra"].get("frozen"):
        tok.freeze()
    return tok


def save_token_grid(ids, vocab_size):
    """Serialize a (h, w) grid as the 8-byte header (h, w, V) + row-major uint16 ids."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2:
        raise ConfigurationError("token grid must be 2-D")
    if ids.min() < 0 or ids.max() >= vocab_size:
        raise ConfigurationError("token id out of range for vocab")
    h, w = ids.shape
    return TOKEN_GRID_HEADER.pack(h, w, vocab_size) + ids.astype("<u2").tobytes()


def load_token_grid(blob):
    h, w, vocab = TOKEN_GRID_HEADER.unpack(blob[: TOKEN_GRID_HEADER.size])
    ids = np.frombuffer(blob[TOKEN_GRID_HEADER.size :], dtype="<u2", count=h * w)
    return torch.from_numpy(ids.astype(np.int64).reshape(h, w)), int(vocab)
