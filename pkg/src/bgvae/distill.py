"""Bound-guided training: affinity alignment, losses, and the training loop.

The bound-estimating teacher is pre-trained with the same recipe, then frozen;
the student minimizes its own rate-distortion loss plus feature-affinity and
reconstruction-supervision terms that pull it toward the teacher's behavior.
Student feature taps pass through small trainable adapter blocks (two
conditioned ConvNeXt blocks whose outputs are averaged) before comparison;
the adapters are discarded at inference.
"""

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .blocks import BConvNeXt, LAMBDA_MAX, LAMBDA_MIN
from .config import ArchConfig, TrainConfig
from .data import ImageFolder
from .exceptions import ConfigError, DimensionError
from .model import BgVae, CodecOutput, load_checkpoint, save_checkpoint

#: Loss-term weights; both are 1.
W_FEATURE = 1.0
W_RS = 1.0

AFFINITY_EPS = 1e-8

ALL_TAPS = ("F1", "F2", "F3", "F4", "F5", "F6", "F7", "F8")

#: Channel width of each tap, as an index into ArchConfig.stage_widths.
TAP_STAGE = {"F1": 3, "F2": 2, "F3": 1, "F4": 0, "F5": 0, "F6": 1, "F7": 2, "F8": 3}

METRIC_COLUMNS = ("step", "l_lambda", "l_feature_sum", "l_rs", "total", "lambda", "grad_norm")


def affinity(f: torch.Tensor) -> torch.Tensor:
    """Pixel-by-pixel cosine-similarity matrix of a (B, C, H, W) feature map.

    Channel vectors are normalized per pixel, so the (B, P, P) output captures
    spatial relationships only; it is symmetric PSD with unit diagonal
    wherever the channel vector is far from zero.
    """
    b, c, h, w = f.shape
    flat = f.reshape(b, c, h * w)
    normed = flat / (flat.pow(2).sum(dim=1, keepdim=True).sqrt() + AFFINITY_EPS)
    return normed.transpose(1, 2) @ normed


def loss_feature(a_b: torch.Tensor, a_p: torch.Tensor) -> torch.Tensor:
    """Elementwise L1 plus (1 - cosine similarity) between affinity matrices."""
    if a_b.shape != a_p.shape:
        raise DimensionError(f"shape mismatch: {tuple(a_b.shape)} vs {tuple(a_p.shape)}")
    l1 = (a_b - a_p).abs().mean()
    vb, vp = a_b.flatten(), a_p.flatten()
    cos = (vb * vp).sum() / (vb.norm() * vp.norm() + 1e-12)
    return l1 + (1.0 - cos)


def loss_rs(xhat_b: torch.Tensor, xhat_p: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between teacher and student reconstructions."""
    if xhat_b.shape != xhat_p.shape:
        raise DimensionError(
            f"shape mismatch: {tuple(xhat_b.shape)} vs {tuple(xhat_p.shape)}"
        )
    return (xhat_b - xhat_p).abs().mean()


@dataclass
class LossReport:
    """All loss terms of one step; ``total`` keeps the autograd graph."""

    l_lambda: torch.Tensor
    l_feature: tuple
    l_rs: torch.Tensor
    total: torch.Tensor
    lambda_used: float

    @property
    def l_feature_sum(self) -> float:
        return sum(v.detach().item() for v in self.l_feature)


class TapAdapters(nn.Module):
    """Per-tap ensemble of two conditioned ConvNeXt blocks, outputs averaged."""

    def __init__(self, arch: ArchConfig, taps=ALL_TAPS):
        super().__init__()
        self.blocks = nn.ModuleDict(
            {
                tap: nn.ModuleList(
                    BConvNeXt(arch.stage_widths[TAP_STAGE[tap]], arch.d_lambda)
                    for _ in range(2)
                )
                for tap in taps
            }
        )

    def forward(self, tap: str, f: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
        b1, b2 = self.blocks[tap]
        return (b1(f, e) + b2(f, e)) * 0.5


def rd_loss(out: CodecOutput, x: torch.Tensor, lam: float) -> torch.Tensor:
    """Rate-distortion Lagrangian: bits per pixel plus lam times MSE."""
    pixels = x.shape[0] * x.shape[-2] * x.shape[-1]
    return out.total_rate_bits / pixels + lam * F.mse_loss(out.reconstruction, x)


def loss_total(
    student_out: CodecOutput,
    teacher_out: Optional[CodecOutput],
    x: torch.Tensor,
    lam: float,
    adapters: Optional[TapAdapters] = None,
    embedding: Optional[torch.Tensor] = None,
    taps=ALL_TAPS,
    feature_mode: str = "affinity",
) -> LossReport:
    """Assemble the training loss; guidance terms are skipped without a teacher."""
    if not LAMBDA_MIN <= lam <= LAMBDA_MAX:
        import warnings

        warnings.warn(
            f"rate multiplier {lam} outside [{LAMBDA_MIN:g}, {LAMBDA_MAX:g}]",
            stacklevel=2,
        )
    l_lambda = rd_loss(student_out, x, lam)
    feats = []
    l_rec = torch.zeros((), dtype=x.dtype)
    if teacher_out is not None:
        for tap in taps:
            fs = student_out.features[tap]
            if adapters is not None:
                fs = adapters(tap, fs, embedding)
            ft = teacher_out.features[tap].detach()
            if feature_mode == "affinity":
                feats.append(loss_feature(affinity(ft), affinity(fs)))
            else:
                feats.append(F.mse_loss(fs, ft))
        l_rec = loss_rs(teacher_out.reconstruction.detach(), student_out.reconstruction)
    total = l_lambda + W_FEATURE * sum(feats, torch.zeros((), dtype=x.dtype)) + W_RS * l_rec
    return LossReport(l_lambda, tuple(feats), l_rec, total, float(lam))


def sample_lambda(rng: np.random.Generator) -> float:
    """Log-uniform draw from the training range [64, 8192]."""
    return float(np.exp(rng.uniform(np.log(LAMBDA_MIN), np.log(LAMBDA_MAX))))


class EmaTracker:
    """Exponential moving average of the model parameters.

    The effective decay warms up as min(decay, (1 + t) / (10 + t)) so short
    runs average recent weights instead of staying pinned to the random
    initialization; long runs converge to the configured decay.
    """

    def __init__(self, model: nn.Module, decay: float):
        self.decay = decay
        self.updates = 0
        self.shadow = {k: v.detach().clone() for k, v in model.state_dict().items()}

    @torch.no_grad()
    def update(self, model: nn.Module) -> None:
        self.updates += 1
        decay = min(self.decay, (1.0 + self.updates) / (10.0 + self.updates))
        for name, param in model.named_parameters():
            self.shadow[name].mul_(decay).add_(param, alpha=1.0 - decay)

    def state_dict(self) -> dict:
        return {k: v.clone() for k, v in self.shadow.items()}


def _lr_at(step: int, total: int, base: float, cosine_tail: float) -> float:
    if cosine_tail <= 0.0:
        return base
    tail_start = int(total * (1.0 - cosine_tail))
    if step < tail_start or total <= tail_start:
        return base
    progress = (step - tail_start) / (total - tail_start)
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


def _global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(p.grad.pow(2).sum())
    return math.sqrt(total)


def train(config: TrainConfig, teacher_ckpt=None, out_dir=".") -> dict:
    """Run one training job and save checkpoint plus per-step metrics CSV.

    Returns paths of the written artifacts. With ``guidance`` enabled a
    teacher checkpoint is required; its EMA weights are loaded and frozen.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if config.guidance and config.variant != "student":
        raise ConfigError("guidance only applies to student training")
    if config.guidance and teacher_ckpt is None:
        raise ConfigError("bound-guided training needs a teacher checkpoint")

    torch.manual_seed(config.seed)
    arch = config.arch_config()
    model = BgVae(arch)
    model.train()

    teacher = None
    adapters = None
    if config.guidance:
        teacher, _ = load_checkpoint(teacher_ckpt, use_ema=True)
        if teacher.variant != "teacher":
            raise ConfigError(f"{teacher_ckpt} is not a teacher checkpoint")
        teacher.requires_grad_(False)
        teacher.eval()
        torch.manual_seed(config.seed + 10)
        adapters = TapAdapters(arch, config.taps)

    dataset = ImageFolder(config.dataset)
    data_rng = np.random.default_rng(config.seed + 1)
    lam_rng = np.random.default_rng(config.seed + 2)
    noise_gen = torch.Generator().manual_seed(config.seed + 3)
    teacher_gen = torch.Generator().manual_seed(config.seed + 4)

    params = list(model.parameters())
    if adapters is not None:
        params += list(adapters.parameters())
    opt = torch.optim.Adam(params, lr=config.lr)
    ema = EmaTracker(model, config.ema_decay)

    metrics_path = out_dir / "metrics.csv"
    ckpt_path = out_dir / "checkpoint.pt"
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for step in range(config.iterations):
            lr = _lr_at(step, config.iterations, config.lr, config.cosine_tail)
            for group in opt.param_groups:
                group["lr"] = lr
            lam = (
                config.lambda_value
                if config.lambda_mode == "fixed"
                else sample_lambda(lam_rng)
            )
            x = dataset.sample_batch(data_rng, config.batch_size, config.crop_size)
            out = model.forward_train(x, lam, noise_gen=noise_gen)
            if teacher is not None:
                with torch.no_grad():
                    t_out = teacher.forward_train(x, lam, noise_gen=teacher_gen)
                report = loss_total(
                    out,
                    t_out,
                    x,
                    lam,
                    adapters=adapters,
                    embedding=model.embed(lam),
                    taps=config.taps,
                    feature_mode=config.feature_loss,
                )
            else:
                report = loss_total(out, None, x, lam)
            opt.zero_grad()
            report.total.backward()
            nn.utils.clip_grad_norm_(params, config.grad_clip)
            grad_norm = _global_grad_norm(params)
            opt.step()
            ema.update(model)
            writer.writerow(
                [
                    step,
                    report.l_lambda.detach().item(),
                    report.l_feature_sum,
                    report.l_rs.detach().item(),
                    report.total.detach().item(),
                    report.lambda_used,
                    grad_norm,
                ]
            )
    save_checkpoint(model, ckpt_path, ema_state=ema.state_dict(), step=config.iterations)
    return {"checkpoint": str(ckpt_path), "metrics": str(metrics_path)}
