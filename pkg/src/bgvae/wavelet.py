"""Orthonormal 2-D Haar transform and the learned wavelet down/up sampling layers.

The Haar pair is used as an exactly invertible, energy-preserving resampler:
``dwt2d`` halves the resolution and quadruples the channels, ``idwt2d`` is its
inverse (and, the transform being orthogonal, also its transpose). Subbands
are stored channel-blocked in the fixed order (LL, HL, LH, HH); checkpoint
weights depend on this ordering.
"""

import torch
from torch import nn

from .exceptions import DimensionError

#: Fixed subband order of the channel blocks produced by :func:`dwt2d`.
SUBBAND_ORDER = ("LL", "HL", "LH", "HH")


def dwt2d(x: torch.Tensor) -> torch.Tensor:
    """Orthonormal Haar analysis of a (B, C, H, W) tensor.

    Each 2x2 block [[a, b], [c, d]] maps to
    LL=(a+b+c+d)/2, HL=(a-b+c-d)/2, LH=(a+b-c-d)/2, HH=(a-b-c+d)/2,
    so the per-block 4x4 matrix is orthogonal and energy is preserved.
    Returns (B, 4C, H/2, W/2) with subbands channel-blocked in SUBBAND_ORDER.
    """
    if x.dim() != 4:
        raise DimensionError(f"expected 4-D input, got {x.dim()}-D")
    if x.shape[-2] % 2 or x.shape[-1] % 2:
        raise DimensionError(f"spatial dims must be even, got {tuple(x.shape[-2:])}")
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    ll = (a + b + c + d) * 0.5
    hl = (a - b + c - d) * 0.5
    lh = (a + b - c - d) * 0.5
    hh = (a - b - c + d) * 0.5
    return torch.cat((ll, hl, lh, hh), dim=1)


def idwt2d(s: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`dwt2d`; (B, 4C, H, W) -> (B, C, 2H, 2W)."""
    if s.dim() != 4:
        raise DimensionError(f"expected 4-D input, got {s.dim()}-D")
    if s.shape[1] % 4:
        raise DimensionError(f"channel count must be divisible by 4, got {s.shape[1]}")
    ll, hl, lh, hh = s.chunk(4, dim=1)
    bsz, c, h, w = ll.shape
    out = s.new_zeros((bsz, c, 2 * h, 2 * w))
    out[..., 0::2, 0::2] = (ll + hl + lh + hh) * 0.5
    out[..., 0::2, 1::2] = (ll - hl + lh - hh) * 0.5
    out[..., 1::2, 0::2] = (ll + hl - lh - hh) * 0.5
    out[..., 1::2, 1::2] = (ll - hl - lh + hh) * 0.5
    return out


class WaveletDown(nn.Module):
    """Haar analysis followed by a bias-free 1x1 mixing conv (4*c_in -> c_out).

    Keeping the mixing map linear (no bias) preserves the transform's
    linearity invariants; biases live in the adjacent blocks.
    """

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.mix = nn.Conv2d(4 * c_in, c_out, kernel_size=1, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.mix(dwt2d(x))


class WaveletUp(nn.Module):
    """Bias-free 1x1 expansion conv (c_in -> 4*c_out) followed by Haar synthesis."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.expand = nn.Conv2d(c_in, 4 * c_out, kernel_size=1, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return idwt2d(self.expand(x))
