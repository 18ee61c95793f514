"""Full hierarchical VAE codec: encoder, latent hierarchy, decoder, file I/O.

The encoder runs top-down (stride-4 stem, conditioned ConvNeXt stages, three
wavelet downsamples); the decoder runs bottom-up from a learned constant,
interleaving latent blocks, wavelet upsamples and cross-attention onto the
previous stage, and finishes with a 1x1 conv plus 4x pixel shuffle. Student
and teacher share this skeleton and differ only inside the latent blocks.

Decoding reads nothing from the encoder: the decode pass reconstructs from
prior parameters and coded symbols alone, which is what makes the bitstream
decodable. Compression and decompression share the same decoder code path, so
within one process the two reconstructions agree bit-exactly.
"""

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .blocks import BConvNeXt, CrossAttention, LambdaEmbedding
from .config import NUM_STAGES, TOTAL_DOWNSAMPLE, ArchConfig
from .entropy import Bitstream, RansDecoder, RansEncoder, build_tables, table_rate_bits
from .exceptions import DimensionError, FormatError, VariantError, VersionError
from .latent import LatentBlock, LatentRecord
from .wavelet import WaveletDown, WaveletUp

CHECKPOINT_VERSION = 1


@dataclass
class CodecOutput:
    """One full forward pass: reconstruction, latent records, rate, feature taps.

    ``features`` holds F1..F4 (outputs of the stem and the three wavelet
    downsamples) and F5..F8 (inputs of the three wavelet upsamples and of the
    final expansion).
    """

    reconstruction: torch.Tensor
    records: list[LatentRecord]
    total_rate_bits: torch.Tensor
    features: dict[str, torch.Tensor]


def pad_to_multiple(x: torch.Tensor, multiple: int = TOTAL_DOWNSAMPLE) -> torch.Tensor:
    """Replicate-pad bottom/right so both spatial dims divide ``multiple``."""
    h, w = x.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return x
    return F.pad(x, (0, pw, 0, ph), mode="replicate")


class BgVae(nn.Module):
    """Variable-rate hierarchical VAE codec (student or teacher variant)."""

    def __init__(self, config: ArchConfig):
        super().__init__()
        self.config = config
        w = config.stage_widths  # index 0 = lowest resolution
        self.embed = LambdaEmbedding(config.d_lambda)

        self.stem = nn.Conv2d(3, w[-1], kernel_size=4, stride=4)
        self.enc_blocks = nn.ModuleList(
            nn.ModuleList(
                BConvNeXt(w[s], config.d_lambda) for _ in range(config.enc_blocks_per_stage)
            )
            for s in range(NUM_STAGES)
        )
        # downs[i] moves from stage 3-i down to stage 2-i's resolution.
        self.downs = nn.ModuleList(
            WaveletDown(w[s], w[s - 1]) for s in range(NUM_STAGES - 1, 0, -1)
        )

        self.start = nn.Parameter(torch.zeros(w[0]))
        self.latent_blocks = nn.ModuleList(
            nn.ModuleList(
                LatentBlock(w[s], config.latent_channels[s], config.d_lambda, config.variant)
                for _ in range(config.latents_per_stage[s])
            )
            for s in range(NUM_STAGES)
        )
        self.ups = nn.ModuleList(WaveletUp(w[s], w[s + 1]) for s in range(NUM_STAGES - 1))
        self.attns = nn.ModuleList(
            CrossAttention(w[s + 1], w[s]) for s in range(NUM_STAGES - 1)
        )
        self.head = nn.Conv2d(w[-1], 3 * 16, kernel_size=1)
        self.shuffle = nn.PixelShuffle(4)

    @property
    def variant(self) -> str:
        return self.config.variant

    def _encode(self, x: torch.Tensor, e: torch.Tensor):
        taps = {}
        enc: list[Optional[torch.Tensor]] = [None] * NUM_STAGES
        f = self.stem(x)
        taps["F1"] = f
        for s in range(NUM_STAGES - 1, -1, -1):
            for blk in self.enc_blocks[s]:
                f = blk(f, e)
            enc[s] = f
            if s > 0:
                f = self.downs[NUM_STAGES - 1 - s](f)
                taps[f"F{NUM_STAGES + 1 - s}"] = f
        return enc, taps

    def _decode_pass(
        self,
        batch: int,
        spatial: tuple[int, int],
        e: torch.Tensor,
        mode: str,
        enc=None,
        noise_gen=None,
        rans: Optional[RansDecoder] = None,
        dtype=torch.float32,
    ):
        h32, w32 = spatial[0] // TOTAL_DOWNSAMPLE, spatial[1] // TOTAL_DOWNSAMPLE
        f = self.start.to(dtype)[None, :, None, None].expand(batch, -1, h32, w32)
        records: list[LatentRecord] = []
        taps = {}
        index = 0
        for s in range(NUM_STAGES):
            if s > 0:
                f_low = f
                taps[f"F{4 + s}"] = f_low
                f = self.ups[s - 1](f)
                f = self.attns[s - 1](f, f_low)
            for blk in self.latent_blocks[s]:
                index += 1
                if mode == "decode":
                    prior = blk.prior_params(f)
                    cdfs = build_tables(prior.sigma_hat.flatten())
                    syms = rans.pull(cdfs)
                    symbols = torch.from_numpy(syms).reshape(prior.mu_hat.shape)
                    f, rec = blk(f, None, e, "decode", index, symbols=symbols, prior=prior)
                    rec.rate_bits = torch.tensor(table_rate_bits(syms, cdfs))
                else:
                    f, rec = blk(f, enc[s], e, mode, index, noise_gen=noise_gen)
                records.append(rec)
        taps["F8"] = f
        recon = self.shuffle(self.head(f))
        return recon, records, taps

    def forward_train(
        self, x: torch.Tensor, lam: float, noise_gen: Optional[torch.Generator] = None
    ) -> CodecOutput:
        """Differentiable pass: sampled latents, train-mode (or teacher KL) rates."""
        if x.dim() != 4 or x.shape[1] != 3:
            raise DimensionError(f"expected (B, 3, H, W) input, got {tuple(x.shape)}")
        if x.shape[-2] % TOTAL_DOWNSAMPLE or x.shape[-1] % TOTAL_DOWNSAMPLE:
            raise DimensionError(
                f"spatial dims must be multiples of {TOTAL_DOWNSAMPLE}, got {tuple(x.shape[-2:])}"
            )
        e = self.embed(lam)
        enc, taps_e = self._encode(x, e)
        mode = "train" if self.variant == "student" else "teacher"
        recon, records, taps_d = self._decode_pass(
            x.shape[0], x.shape[-2:], e, mode, enc=enc, noise_gen=noise_gen, dtype=x.dtype
        )
        total = torch.stack([rec.rate_bits for rec in records]).sum()
        return CodecOutput(recon, records, total, {**taps_e, **taps_d})

    def _test_pass(self, x: torch.Tensor, lam: float):
        """Quantized pass on a padded input; rates come from the coding tables."""
        if self.variant != "student":
            raise VariantError("quantized inference requires the student variant")
        e = self.embed(lam)
        enc, taps_e = self._encode(x, e)
        recon, records, taps_d = self._decode_pass(
            x.shape[0], x.shape[-2:], e, "test", enc=enc, dtype=x.dtype
        )
        coded = []
        for rec in records:
            cdfs = build_tables(rec.prior.sigma_hat.flatten())
            syms = rec.symbols.flatten().numpy()
            rec.rate_bits = torch.tensor(table_rate_bits(syms, cdfs))
            coded.append((syms, cdfs))
        return recon, records, {**taps_e, **taps_d}, coded

    @torch.no_grad()
    def forward_test(self, x: torch.Tensor, lam: float) -> CodecOutput:
        """Deterministic quantized pass; pads internally and crops the output."""
        h, w = x.shape[-2:]
        recon, records, taps, _ = self._test_pass(pad_to_multiple(x), lam)
        recon = recon[..., :h, :w].clamp(0.0, 1.0)
        total = torch.stack([rec.rate_bits for rec in records]).sum()
        return CodecOutput(recon, records, total, taps)

    @torch.no_grad()
    def compress(self, x: torch.Tensor, lam: float) -> Bitstream:
        """Encode one image (B=1) into a bitstream."""
        if x.dim() == 3:
            x = x[None]
        if x.shape[0] != 1:
            raise DimensionError("compress handles one image at a time")
        h, w = x.shape[-2:]
        if h > 0xFFFF or w > 0xFFFF:
            raise FormatError("image dimensions exceed the 16-bit header fields")
        _, _, _, coded = self._test_pass(pad_to_multiple(x), lam)
        enc = RansEncoder()
        for syms, cdfs in coded:
            enc.push(syms, cdfs)
        return Bitstream(lam=float(lam), width=w, height=h, payload=enc.flush())

    @torch.no_grad()
    def decompress(self, stream: Bitstream) -> torch.Tensor:
        """Reconstruct an image from a bitstream; no encoder state is touched."""
        if self.variant != "student":
            raise VariantError("decompression requires the student variant")
        h, w = stream.height, stream.width
        hp = h + (-h) % TOTAL_DOWNSAMPLE
        wp = w + (-w) % TOTAL_DOWNSAMPLE
        e = self.embed(stream.lam)
        rans = RansDecoder(stream.payload)
        recon, _, _ = self._decode_pass(1, (hp, wp), e, "decode", rans=rans)
        return recon[..., :h, :w].clamp(0.0, 1.0)


def save_checkpoint(
    model: BgVae,
    path,
    ema_state: Optional[dict] = None,
    step: int = 0,
) -> None:
    """Self-describing checkpoint: version, architecture dict, weight arrays."""
    payload = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "arch": model.config.to_dict(),
        "state_dict": model.state_dict(),
        "ema_state_dict": ema_state,
        "step": step,
    }
    torch.save(payload, path)


def load_checkpoint(path, use_ema: bool = False) -> tuple[BgVae, dict]:
    """Rebuild a model from a checkpoint; set ``use_ema`` to load EMA weights."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("checkpoint_version")
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint version {version} unsupported")
    config = ArchConfig.from_dict(payload["arch"])
    model = BgVae(config)
    state = payload["state_dict"]
    if use_ema and payload.get("ema_state_dict"):
        state = payload["ema_state_dict"]
    model.load_state_dict(state)
    model.eval()
    return model, payload
