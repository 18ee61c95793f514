"""Neural building blocks: balanced ConvNeXt, rate-point embedding, cross-attention.

All blocks condition on a rate-multiplier embedding vector so a single set of
weights covers the whole rate range. Residual output projections are
zero-initialized, which makes every block an identity map at construction;
training moves them off the identity smoothly.
"""

import math
import warnings

import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import DimensionError, DomainError

#: Rate-multiplier range the models are trained over; values outside are
#: accepted but are extrapolation.
LAMBDA_MIN = 64.0
LAMBDA_MAX = 8192.0

ATTN_HEADS = 4


def dc_hc_split(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Split a feature map into its per-channel spatial mean and the residual.

    Returns (dc, hc) with dc broadcast over space and dc + hc == x exactly.
    """
    dc = x.mean(dim=(-2, -1), keepdim=True).expand_as(x)
    hc = x - dc
    return dc, hc


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel dimension of a (B, C, H, W) tensor."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        u = x.mean(1, keepdim=True)
        s = (x - u).pow(2).mean(1, keepdim=True)
        x = (x - u) / torch.sqrt(s + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


class LambdaEmbedding(nn.Module):
    """Deterministic embedding of the scalar rate-distortion multiplier.

    log2 of the multiplier is expanded with sin/cos at ``dim/2`` log-spaced
    frequencies, then passed through a two-layer perceptron with GELU. The
    log2 domain equalizes sensitivity across the two-decade training range.
    """

    def __init__(self, dim: int = 256):
        super().__init__()
        if dim % 2:
            raise DimensionError("embedding dim must be even")
        half = dim // 2
        # Periods from ~0.5 to ~64 in log2-lambda units.
        freqs = torch.exp(torch.linspace(math.log(2 * math.pi / 64), math.log(4 * math.pi), half))
        self.register_buffer("freqs", freqs)
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, dim))
        self.dim = dim

    def forward(self, lam: float) -> torch.Tensor:
        if lam <= 0:
            raise DomainError(f"rate multiplier must be positive, got {lam}")
        if not LAMBDA_MIN <= lam <= LAMBDA_MAX:
            warnings.warn(
                f"rate multiplier {lam} outside trained range "
                f"[{LAMBDA_MIN:g}, {LAMBDA_MAX:g}]; extrapolating",
                stacklevel=2,
            )
        t = self.freqs * math.log2(lam)
        enc = torch.cat((torch.sin(t), torch.cos(t)))
        return self.mlp(enc)


class BConvNeXt(nn.Module):
    """ConvNeXt block with learnable mean/residual balancing and rate conditioning.

    After the depthwise 7x7 conv, the per-channel spatial mean (dc) and the
    remainder (hc) are recombined as alpha*dc + beta*hc; alpha = beta = 1 keeps
    the block neutral. The embedding vector produces a per-channel scale
    (applied after LayerNorm, initialized to 1) before the usual 4x pointwise
    expansion / GELU / projection and the residual add.
    """

    def __init__(self, channels: int, d_lambda: int, expansion: int = 4):
        super().__init__()
        self.channels = channels
        self.dwconv = nn.Conv2d(channels, channels, 7, padding=3, groups=channels)
        self.alpha = nn.Parameter(torch.ones(channels))
        self.beta = nn.Parameter(torch.ones(channels))
        self.norm = ChannelLayerNorm(channels)
        self.cond = nn.Linear(d_lambda, channels)
        self.pw1 = nn.Conv2d(channels, expansion * channels, 1)
        self.pw2 = nn.Conv2d(expansion * channels, channels, 1)
        # Conditioning scale starts at exactly 1 and the residual branch at
        # exactly 0, so a fresh block is the identity map.
        nn.init.zeros_(self.cond.weight)
        nn.init.zeros_(self.cond.bias)
        nn.init.zeros_(self.pw2.weight)
        nn.init.zeros_(self.pw2.bias)

    def forward(self, x: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.channels:
            raise DimensionError(f"expected {self.channels} channels, got {x.shape[1]}")
        y = self.dwconv(x)
        dc, hc = dc_hc_split(y)
        f = self.alpha[:, None, None] * dc + self.beta[:, None, None] * hc
        f = self.norm(f)
        scale = 1.0 + self.cond(F.gelu(e))
        f = f * scale[:, None, None]
        f = self.pw2(F.gelu(self.pw1(f)))
        return x + f


class CrossAttention(nn.Module):
    """Fuses a half-resolution feature map into a full-resolution one.

    Queries come from the high-resolution tokens; keys and values from the
    low-resolution tokens after a depthwise-conv positional signal is added.
    The attended output is projected and added residually, so the output keeps
    the high-resolution shape. The output projection is zero-initialized.
    """

    def __init__(self, c_high: int, c_low: int, heads: int = ATTN_HEADS):
        super().__init__()
        if c_high % heads:
            raise DimensionError(f"channels {c_high} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = c_high // heads
        self.cpe = nn.Conv2d(c_low, c_low, 3, padding=1, groups=c_low)
        self.to_q = nn.Conv2d(c_high, c_high, 1)
        self.to_k = nn.Conv2d(c_low, c_high, 1)
        self.to_v = nn.Conv2d(c_low, c_high, 1)
        self.proj = nn.Conv2d(c_high, c_high, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def _tokens(self, t: torch.Tensor) -> torch.Tensor:
        b, c, h, w = t.shape
        return t.reshape(b, self.heads, self.head_dim, h * w).transpose(-2, -1)

    def forward(
        self,
        f_high: torch.Tensor,
        f_low: torch.Tensor,
        return_weights: bool = False,
    ):
        if (f_low.shape[-2] * 2, f_low.shape[-1] * 2) != tuple(f_high.shape[-2:]):
            raise DimensionError(
                f"low-res dims {tuple(f_low.shape[-2:])} are not half of "
                f"high-res dims {tuple(f_high.shape[-2:])}"
            )
        kv = f_low + self.cpe(f_low)
        q = self._tokens(self.to_q(f_high))
        k = self._tokens(self.to_k(kv))
        v = self._tokens(self.to_v(kv))
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        out = (attn @ v).transpose(-2, -1).reshape(f_high.shape)
        out = f_high + self.proj(out)
        if return_weights:
            return out, attn
        return out
