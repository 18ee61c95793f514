"""Latent variable block: posterior/prior branches, sampling, quantization, rates.

Two variants share one skeleton. The deployable codec ("student") uses a
width-1 uniform posterior around the predicted mean and a Gaussian-convolved-
uniform prior, so test time reduces to integer residual quantization plus
entropy coding. The bound-estimating model ("teacher") predicts a Gaussian
posterior and uses a plain Gaussian prior, so its rate is a closed-form KL.
"""

import math
from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from .blocks import BConvNeXt
from .exceptions import DimensionError, DomainError, SymbolRangeError, VariantError

#: Half-width of the integer symbol alphabet; residuals are clamped to
#: [-N_MAX, N_MAX] and tail mass is folded into the extreme symbols.
N_MAX = 64

#: Lower clamp on the prior scale; prevents degenerate probability tables.
SIGMA_MIN = 0.11

#: Density floor inside the training-rate log, for numerical stability.
DENSITY_FLOOR = 2.0 ** -16

LOG2_E = math.log2(math.e)


@dataclass
class PosteriorParams:
    """Posterior branch output; ``sigma`` is present only for the teacher."""

    mu: torch.Tensor
    sigma: Optional[torch.Tensor] = None

    @property
    def is_teacher(self) -> bool:
        return self.sigma is not None


@dataclass
class PriorParams:
    """Prior branch output; ``sigma_hat`` is clamped to at least SIGMA_MIN."""

    mu_hat: torch.Tensor
    sigma_hat: torch.Tensor


@dataclass
class LatentRecord:
    """Per-latent bundle produced by one block pass."""

    index: int
    z: torch.Tensor
    prior: PriorParams
    symbols: Optional[torch.Tensor] = None
    rate_bits: Optional[torch.Tensor] = None


class _LowerBound(torch.autograd.Function):
    """clamp-from-below that still passes gradients pushing the input upward."""

    @staticmethod
    def forward(ctx, x, bound):
        ctx.save_for_backward(x)
        ctx.bound = bound
        return x.clamp_min(bound)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        passthrough = (x >= ctx.bound) | (grad < 0)
        return grad * passthrough, None


def lower_bound(x: torch.Tensor, bound: float) -> torch.Tensor:
    return _LowerBound.apply(x, bound)


def round_half_away(x: torch.Tensor) -> torch.Tensor:
    """Round to nearest integer with halves away from zero (0.5 -> 1, -0.5 -> -1)."""
    return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)


def _std_normal_cdf(x: torch.Tensor) -> torch.Tensor:
    return torch.special.ndtr(x)


def posterior_sample_train(post: PosteriorParams, noise: torch.Tensor) -> torch.Tensor:
    """Training-time draw z = mu + u with u ~ U(-1/2, 1/2)."""
    if post.is_teacher:
        raise VariantError("uniform posterior sampling is a student-variant operation")
    return post.mu + noise


def quantize_test(post: PosteriorParams, prior: PriorParams):
    """Test-time scalar quantization of the posterior mean against the prior mean.

    Returns (symbols, z_hat) with symbols = round(mu - mu_hat) using
    half-away-from-zero rounding and z_hat = mu_hat + symbols.
    """
    if post.is_teacher:
        raise VariantError("scalar quantization is a student-variant operation")
    symbols = round_half_away(post.mu - prior.mu_hat)
    z_hat = prior.mu_hat + symbols
    return symbols.to(torch.int64), z_hat


def pmf_table(sigma_hat: torch.Tensor) -> torch.Tensor:
    """Discrete symbol probabilities P(n) = Phi((n+1/2)/s) - Phi((n-1/2)/s).

    Output has one trailing axis of length 2*N_MAX + 1 covering
    n = -N_MAX..N_MAX. Tail mass beyond the extremes is folded into the end
    symbols and the table is renormalized, so each row sums to 1. The table is
    built for |n| >= 0 and mirrored, making it exactly symmetric.
    """
    s = sigma_hat[..., None]
    n = torch.arange(1, N_MAX, dtype=sigma_hat.dtype, device=sigma_hat.device)
    upper = _std_normal_cdf((n + 0.5) / s)
    lower = _std_normal_cdf((n - 0.5) / s)
    body = upper - lower
    center = _std_normal_cdf(0.5 / s) - _std_normal_cdf(-0.5 / s)
    # Extreme symbol absorbs its own mass plus the entire tail.
    edge = 1.0 - _std_normal_cdf((N_MAX - 0.5) / s)
    pmf = torch.cat((edge, body.flip(-1), center, body, edge), dim=-1)
    return pmf / pmf.sum(dim=-1, keepdim=True)


def pmf_eval(prior: PriorParams, n: int) -> torch.Tensor:
    """Probability of integer symbol ``n`` under each element's prior."""
    if abs(n) > N_MAX:
        raise SymbolRangeError(f"symbol {n} outside [-{N_MAX}, {N_MAX}]")
    return pmf_table(prior.sigma_hat)[..., n + N_MAX]


def rate_train_student(prior: PriorParams, z: torch.Tensor) -> torch.Tensor:
    """Differentiable coding cost, in bits, of z under the student prior.

    Evaluates -log2 of the Gaussian-convolved-uniform density at z, summed
    over all elements. The density is floored at 2**-16 before the log.
    """
    # Work in the left tail of the CDF for numerical stability; the density is
    # symmetric in (z - mu_hat) so this is exact.
    values = -(z - prior.mu_hat).abs()
    upper = _std_normal_cdf((values + 0.5) / prior.sigma_hat)
    lower = _std_normal_cdf((values - 0.5) / prior.sigma_hat)
    likelihood = torch.clamp(upper - lower, min=DENSITY_FLOOR)
    return -torch.log2(likelihood).sum()


def kl_teacher(post: PosteriorParams, prior: PriorParams) -> torch.Tensor:
    """Closed-form Gaussian KL between posterior and prior, in bits, summed."""
    if not post.is_teacher:
        raise VariantError("closed-form KL requires a Gaussian (teacher) posterior")
    if (post.sigma <= 0).any():
        raise DomainError("posterior sigma must be strictly positive")
    var_ratio = (post.sigma / prior.sigma_hat) ** 2
    sq = ((post.mu - prior.mu_hat) / prior.sigma_hat) ** 2
    kl_nats = 0.5 * (var_ratio + sq - 1.0) - torch.log(post.sigma / prior.sigma_hat)
    return kl_nats.sum() * LOG2_E


class LatentBlock(nn.Module):
    """One stochastic layer of the hierarchy.

    The prior branch is a single conv on the decoder feature (so the decode
    side can run without the encoder); the posterior branch fuses decoder and
    encoder features through two convs around three conditioned B-ConvNeXt
    blocks. The sampled/quantized latent is embedded by a conv and added back
    to the decoder feature.
    """

    def __init__(self, width: int, z_channels: int, d_lambda: int, variant: str):
        super().__init__()
        if variant not in ("student", "teacher"):
            raise VariantError(f"unknown variant {variant!r}")
        self.variant = variant
        self.z_channels = z_channels
        self.prior_conv = nn.Conv2d(width, 2 * z_channels, 3, padding=1)
        post_out = z_channels if variant == "student" else 2 * z_channels
        self.post_in = nn.Conv2d(2 * width, width, 1)
        self.post_blocks = nn.ModuleList(BConvNeXt(width, d_lambda) for _ in range(3))
        self.post_out = nn.Conv2d(width, post_out, 3, padding=1)
        self.z_embed = nn.Conv2d(z_channels, width, 3, padding=1)

    def prior_params(self, dec: torch.Tensor) -> PriorParams:
        mu_hat, raw_scale = self.prior_conv(dec).chunk(2, dim=1)
        sigma_hat = lower_bound(torch.exp(raw_scale), SIGMA_MIN)
        return PriorParams(mu_hat, sigma_hat)

    def posterior_params(
        self, dec: torch.Tensor, enc: torch.Tensor, e: torch.Tensor
    ) -> PosteriorParams:
        if enc.shape[-2:] != dec.shape[-2:]:
            raise DimensionError(
                f"encoder feature {tuple(enc.shape[-2:])} not aligned with "
                f"decoder feature {tuple(dec.shape[-2:])}"
            )
        h = self.post_in(torch.cat((dec, enc), dim=1))
        for blk in self.post_blocks:
            h = blk(h, e)
        out = self.post_out(h)
        if self.variant == "student":
            return PosteriorParams(out)
        mu, raw_scale = out.chunk(2, dim=1)
        return PosteriorParams(mu, lower_bound(torch.exp(raw_scale), 1e-6))

    def forward(
        self,
        dec: torch.Tensor,
        enc: Optional[torch.Tensor],
        e: torch.Tensor,
        mode: str,
        index: int = 0,
        noise_gen: Optional[torch.Generator] = None,
        symbols: Optional[torch.Tensor] = None,
        prior: Optional[PriorParams] = None,
    ):
        if prior is None:
            prior = self.prior_params(dec)
        if mode == "train":
            if self.variant != "student":
                raise VariantError("train mode requires the student variant")
            post = self.posterior_params(dec, enc, e)
            u = torch.rand(post.mu.shape, generator=noise_gen, dtype=dec.dtype) - 0.5
            z = posterior_sample_train(post, u)
            record = LatentRecord(index, z, prior, rate_bits=rate_train_student(prior, z))
        elif mode == "teacher":
            if self.variant != "teacher":
                raise VariantError("teacher mode requires the teacher variant")
            post = self.posterior_params(dec, enc, e)
            eps = torch.randn(post.mu.shape, generator=noise_gen, dtype=dec.dtype)
            z = post.mu + post.sigma * eps
            record = LatentRecord(index, z, prior, rate_bits=kl_teacher(post, prior))
        elif mode == "test":
            if self.variant != "student":
                raise VariantError("test mode requires the student variant")
            post = self.posterior_params(dec, enc, e)
            syms, _ = quantize_test(post, prior)
            syms = syms.clamp(-N_MAX, N_MAX)
            z = prior.mu_hat + syms.to(dec.dtype)
            record = LatentRecord(index, z, prior, symbols=syms)
        elif mode == "decode":
            if self.variant != "student":
                raise VariantError("decode mode requires the student variant")
            if symbols is None:
                raise ValueError("decode mode needs the decoded symbols")
            z = prior.mu_hat + symbols.to(dec.dtype)
            record = LatentRecord(index, z, prior, symbols=symbols)
        else:
            raise ValueError(f"unknown mode {mode!r}")
        return dec + self.z_embed(z), record
