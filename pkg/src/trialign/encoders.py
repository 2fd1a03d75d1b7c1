"""Three-encoder model: video patch transformer, text transformer, and a
fusion transformer over the concatenated token sequences.

All pooled outputs are unit-norm projections into one shared space, so a
dot product between any two of them is a cosine similarity.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .masking import VideoMaskSpec
from .substrate import Rng, l2_normalize


@dataclass
class ModelConfig:
    dim: int = 64
    heads: int = 4
    video_layers: int = 2
    text_layers: int = 2
    fusion_layers: int = 2
    ff_mult: int = 4
    frames: int = 4
    image_size: int = 32
    patch: int = 8
    channels: int = 3
    vocab_size: int = 64
    max_text_len: int = 12
    pad_id: int = 0
    cls_id: int = 1
    mask_id: int = 2

    @property
    def grid(self) -> int:
        if self.image_size % self.patch:
            raise ValueError("image_size must be divisible by patch")
        return self.image_size // self.patch

    @property
    def spatial_size(self) -> int:
        return self.grid * self.grid

    @property
    def num_patches(self) -> int:
        return self.frames * self.spatial_size


class Block(nn.Module):
    """Pre-norm transformer block with multi-head self-attention."""

    def __init__(self, dim: int, heads: int, ff_mult: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, ff_mult * dim),
            nn.GELU(),
            nn.Linear(ff_mult * dim, dim),
        )

    def forward(self, x, key_padding_mask=None):
        h = self.ln1(x)
        attn_out, _ = self.attn(
            h, h, h, key_padding_mask=key_padding_mask, need_weights=False
        )
        x = x + attn_out
        x = x + self.mlp(self.ln2(x))
        return x


class VideoEncoder(nn.Module):
    """Space-time patch transformer over F frames of H x W pixels."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        patch_dim = cfg.patch * cfg.patch * cfg.channels
        self.patch_embed = nn.Linear(patch_dim, cfg.dim)
        self.pos = nn.Parameter(torch.zeros(cfg.num_patches, cfg.dim))
        self.mask_token = nn.Parameter(torch.zeros(cfg.dim))
        self.blocks = nn.ModuleList(
            Block(cfg.dim, cfg.heads, cfg.ff_mult) for _ in range(cfg.video_layers)
        )
        self.ln = nn.LayerNorm(cfg.dim)
        self.proj = nn.Linear(cfg.dim, cfg.dim)
        nn.init.normal_(self.pos, std=0.02)
        nn.init.normal_(self.mask_token, std=0.02)

    def patchify(self, clip: torch.Tensor) -> torch.Tensor:
        """(B,F,H,W,C) -> (B, K, P*P*C), frame-major then row-major grid."""
        cfg = self.cfg
        b, f, h, w, c = clip.shape
        if (f, h, w, c) != (cfg.frames, cfg.image_size, cfg.image_size, cfg.channels):
            raise ValueError(
                f"clip shape {(f, h, w, c)} does not match configured geometry "
                f"{(cfg.frames, cfg.image_size, cfg.image_size, cfg.channels)}"
            )
        p, g = cfg.patch, cfg.grid
        x = clip.reshape(b, f, g, p, g, p, c)
        x = x.permute(0, 1, 2, 4, 3, 5, 6)  # b, f, gy, gx, p, p, c
        return x.reshape(b, cfg.num_patches, p * p * c)

    def forward(self, clip: torch.Tensor, mask=None):
        """``mask`` may be one VideoMaskSpec for the whole batch or a
        sequence with one spec per row."""
        cfg = self.cfg
        tokens = self.patch_embed(self.patchify(clip))
        if mask is not None:
            specs = [mask] * clip.shape[0] if isinstance(mask, VideoMaskSpec) else mask
            if len(specs) != clip.shape[0]:
                raise ValueError("one mask spec required per batch row")
            tokens = tokens.clone()
            for row, spec in enumerate(specs):
                idx = spec.patch_indices(cfg.frames)
                bad = [i for i in idx if not (0 <= i < cfg.num_patches)]
                if bad:
                    raise ValueError(f"mask indices out of range: {bad[:4]}")
                tokens[row, idx, :] = self.mask_token.to(tokens.dtype)
        x = tokens + self.pos
        for blk in self.blocks:
            x = blk(x)
        x = self.ln(x)
        pooled = l2_normalize(self.proj(x.mean(dim=1)))
        return x, pooled


class TextEncoder(nn.Module):
    """Bidirectional token transformer; pools the [CLS] output."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_embed = nn.Embedding(cfg.vocab_size, cfg.dim)
        self.pos = nn.Parameter(torch.zeros(cfg.max_text_len, cfg.dim))
        self.blocks = nn.ModuleList(
            Block(cfg.dim, cfg.heads, cfg.ff_mult) for _ in range(cfg.text_layers)
        )
        self.ln = nn.LayerNorm(cfg.dim)
        self.proj = nn.Linear(cfg.dim, cfg.dim)
        nn.init.normal_(self.pos, std=0.02)

    def forward(self, token_ids: torch.Tensor):
        cfg = self.cfg
        if token_ids.dim() != 2:
            raise ValueError("token_ids must be (B, L)")
        if token_ids.shape[1] > cfg.max_text_len:
            raise ValueError("text longer than configured maximum")
        if int(token_ids.max()) >= cfg.vocab_size or int(token_ids.min()) < 0:
            raise ValueError("unknown token id")
        pad_mask = token_ids == cfg.pad_id  # True where ignored
        x = self.tok_embed(token_ids) + self.pos[: token_ids.shape[1]]
        for blk in self.blocks:
            x = blk(x, key_padding_mask=pad_mask)
        x = self.ln(x)
        pooled = l2_normalize(self.proj(x[:, 0, :]))
        return x, pooled, pad_mask


class FusionEncoder(nn.Module):
    """Transformer over [video tokens | text tokens]; pools the [CLS] slot."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.type_embed = nn.Parameter(torch.zeros(2, cfg.dim))
        self.blocks = nn.ModuleList(
            Block(cfg.dim, cfg.heads, cfg.ff_mult) for _ in range(cfg.fusion_layers)
        )
        self.ln = nn.LayerNorm(cfg.dim)
        self.proj = nn.Linear(cfg.dim, cfg.dim)
        nn.init.normal_(self.type_embed, std=0.02)

    def forward(self, video_tokens, text_tokens, text_pad_mask):
        if video_tokens.shape[-1] != text_tokens.shape[-1]:
            raise ValueError("video/text embedding dims differ")
        k = video_tokens.shape[1]
        x = torch.cat(
            [
                video_tokens + self.type_embed[0],
                text_tokens + self.type_embed[1],
            ],
            dim=1,
        )
        pad = torch.cat(
            [
                torch.zeros(
                    video_tokens.shape[0], k, dtype=torch.bool, device=x.device
                ),
                text_pad_mask,
            ],
            dim=1,
        )
        for blk in self.blocks:
            x = blk(x, key_padding_mask=pad)
        x = self.ln(x)
        pooled = l2_normalize(self.proj(x[:, k, :]))  # text [CLS] slot
        return x, pooled


@dataclass
class ForwardCounters:
    """Exact encoder-call bookkeeping for the efficiency probe."""

    uni_forwards: int = 0
    fusion_forwards: int = 0
    dot_products: int = 0

    def reset(self):
        self.uni_forwards = 0
        self.fusion_forwards = 0
        self.dot_products = 0


class TriModalModel(nn.Module):
    """Video encoder + text encoder + fusion encoder + MLM head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.video = VideoEncoder(cfg)
        self.text = TextEncoder(cfg)
        self.fusion = FusionEncoder(cfg)
        self.mlm_head = nn.Linear(cfg.dim, cfg.vocab_size)
        self.counters = ForwardCounters()

    def encode_video(self, clip, mask: VideoMaskSpec | None = None):
        self.counters.uni_forwards += clip.shape[0]
        return self.video(clip, mask)

    def encode_text(self, token_ids):
        self.counters.uni_forwards += token_ids.shape[0]
        return self.text(token_ids)

    def fuse(self, video_tokens, text_tokens, text_pad_mask):
        self.counters.fusion_forwards += video_tokens.shape[0]
        return self.fusion(video_tokens, text_tokens, text_pad_mask)

    def mlm_logits(self, fused_tokens, text_positions: torch.Tensor):
        """Vocabulary logits at given text token positions of the fused
        sequence; ``text_positions`` is (n, 2) of (batch row, text index)."""
        k = self.cfg.num_patches
        rows = text_positions[:, 0]
        cols = k + text_positions[:, 1]
        return self.mlm_head(fused_tokens[rows, cols, :])


def init_model(cfg: ModelConfig, seed: int = 0) -> TriModalModel:
    """Deterministically initialized model."""
    gen = Rng(seed, stream=(9, 9, 9)).torch_generator()
    torch.manual_seed(int(gen.initial_seed()))
    return TriModalModel(cfg)
