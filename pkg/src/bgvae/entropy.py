"""Entropy coding: integer frequency tables, rANS coder, bitstream container.

Tables are 16-bit quantizations of the discrete symbol probabilities from
:mod:`bgvae.latent`; the same tables drive both the coder and rate accounting.
The coder is a 64-bit-state rANS with 32-bit renormalization words. Symbols
are encoded in reverse so the decoder runs forward and can be fed tables
incrementally (each latent's tables depend on previously decoded latents).

Container layout (little-endian): 4-byte magic "BGVC", 1-byte version,
float32 rate multiplier, uint16 width, uint16 height, then the payload.
"""

import struct
from dataclasses import dataclass

import numpy as np
import torch

from .exceptions import CodingError, DecodeError, FormatError
from .latent import N_MAX, pmf_table

PRECISION = 16
TOTAL_FREQ = 1 << PRECISION
NUM_SYMBOLS = 2 * N_MAX + 1

MAGIC = b"BGVC"
FORMAT_VERSION = 1
HEADER_STRUCT = struct.Struct("<4sBfHH")
HEADER_SIZE = HEADER_STRUCT.size  # 13 bytes

_RANS_L = 1 << 31
_MASK_32 = (1 << 32) - 1


def _quantize_freqs(pmf: np.ndarray) -> np.ndarray:
    """Turn probability rows into integer frequencies summing to TOTAL_FREQ.

    Every symbol keeps frequency >= 1. Rounding/flooring slack is settled by
    spreading the difference uniformly over the eligible symbols (largest
    remainders first for deficits, round-robin over frequencies > 1 for
    excess), which keeps the peak probability within quantization slack of its
    real value and preserves the tables' symmetry to within one count.
    """
    scaled = pmf * TOTAL_FREQ
    freqs = np.maximum(1, np.round(scaled).astype(np.int64))
    out = np.empty_like(freqs)
    for i in range(freqs.shape[0]):
        row = freqs[i]
        diff = TOTAL_FREQ - int(row.sum())
        if diff > 0:
            remainder = scaled[i] - np.floor(scaled[i])
            order = np.argsort(-remainder, kind="stable")
            row[order[:diff]] += 1
        elif diff < 0:
            need = -diff
            while need > 0:
                eligible = np.flatnonzero(row > 1)
                bulk = min(need // len(eligible), int(row[eligible].min()) - 1)
                if bulk > 0:
                    row[eligible] -= bulk
                    need -= bulk * len(eligible)
                else:
                    order = eligible[np.argsort(-row[eligible], kind="stable")]
                    row[order[:need]] -= 1
                    need = 0
        out[i] = row
    return out


@dataclass
class CodingTable:
    """Cumulative 16-bit frequencies for one symbol alphabet.

    ``cdf`` has NUM_SYMBOLS + 1 entries, starts at 0 and ends at TOTAL_FREQ;
    index s covers integer symbol s - N_MAX.
    """

    cdf: np.ndarray

    def freq(self, n: int) -> int:
        idx = n + N_MAX
        return int(self.cdf[idx + 1] - self.cdf[idx])


def build_tables(sigma_hat: torch.Tensor) -> np.ndarray:
    """Vectorized table construction: (k,) scales -> (k, NUM_SYMBOLS + 1) cdfs."""
    pmf = pmf_table(sigma_hat.detach().to(torch.float64)).cpu().numpy()
    pmf = pmf.reshape(-1, NUM_SYMBOLS)
    freqs = _quantize_freqs(pmf)
    cdfs = np.zeros((freqs.shape[0], NUM_SYMBOLS + 1), dtype=np.int64)
    np.cumsum(freqs, axis=1, out=cdfs[:, 1:])
    return cdfs


def build_table(sigma_hat: float) -> CodingTable:
    """Coding table for a single prior scale."""
    return CodingTable(build_tables(torch.tensor([sigma_hat]))[0])


def table_rate_bits(symbols: np.ndarray, cdfs: np.ndarray) -> float:
    """Exact coding cost the tables charge for the given symbols, in bits."""
    idx = symbols + N_MAX
    rows = np.arange(len(symbols))
    freqs = cdfs[rows, idx + 1] - cdfs[rows, idx]
    return float(-np.log2(freqs / TOTAL_FREQ).sum())


class RansEncoder:
    """Collects (symbol, table) pairs and emits the payload in one shot."""

    def __init__(self):
        self._symbols: list[np.ndarray] = []
        self._cdfs: list[np.ndarray] = []

    def push(self, symbols: np.ndarray, cdfs: np.ndarray) -> None:
        symbols = np.asarray(symbols, dtype=np.int64)
        if symbols.size and (symbols.min() < -N_MAX or symbols.max() > N_MAX):
            raise CodingError("symbol outside the coding alphabet")
        if len(symbols) != len(cdfs):
            raise CodingError("one table required per symbol")
        self._symbols.append(symbols)
        self._cdfs.append(cdfs)

    def flush(self) -> bytes:
        symbols = np.concatenate(self._symbols) if self._symbols else np.empty(0, np.int64)
        cdfs = np.concatenate(self._cdfs) if self._cdfs else np.empty((0, NUM_SYMBOLS + 1))
        idx = symbols + N_MAX
        rows = np.arange(len(symbols))
        starts = cdfs[rows, idx].tolist()
        freqs = (cdfs[rows, idx + 1] - cdfs[rows, idx]).tolist()

        state = _RANS_L
        words = []
        for i in range(len(symbols) - 1, -1, -1):
            freq = freqs[i]
            limit = ((_RANS_L >> PRECISION) << 32) * freq
            if state >= limit:
                words.append(state & _MASK_32)
                state >>= 32
            state = ((state // freq) << PRECISION) + (state % freq) + starts[i]
        head = struct.pack("<Q", state)
        if not words:
            return head
        body = np.array(words[::-1], dtype="<u4").tobytes()
        return head + body


class RansDecoder:
    """Streaming decoder; feed it table chunks in the original encode order."""

    def __init__(self, payload: bytes):
        if len(payload) < 8:
            raise DecodeError("payload truncated before coder state")
        if (len(payload) - 8) % 4:
            raise DecodeError("payload length is not word-aligned")
        (self._state,) = struct.unpack_from("<Q", payload)
        self._words = np.frombuffer(payload, dtype="<u4", offset=8)
        self._pos = 0

    def pull(self, cdfs: np.ndarray) -> np.ndarray:
        out = np.empty(len(cdfs), dtype=np.int64)
        state = self._state
        for i in range(len(cdfs)):
            cdf = cdfs[i]
            slot = state & (TOTAL_FREQ - 1)
            s = int(np.searchsorted(cdf, slot, side="right")) - 1
            start = int(cdf[s])
            freq = int(cdf[s + 1]) - start
            state = freq * (state >> PRECISION) + slot - start
            if state < _RANS_L:
                if self._pos >= len(self._words):
                    raise DecodeError("payload exhausted mid-stream")
                state = (state << 32) | int(self._words[self._pos])
                self._pos += 1
            out[i] = s - N_MAX
        self._state = state
        return out


def encode_symbols(symbols: np.ndarray, cdfs: np.ndarray) -> bytes:
    """One-shot encode of a symbol sequence with per-symbol tables."""
    enc = RansEncoder()
    enc.push(symbols, cdfs)
    return enc.flush()


def decode_symbols(payload: bytes, cdfs: np.ndarray) -> np.ndarray:
    """One-shot decode; ``cdfs`` must match the encode-side tables exactly."""
    return RansDecoder(payload).pull(cdfs)


@dataclass
class Bitstream:
    """A coded image: 13-byte header plus range-coded payload."""

    lam: float
    width: int
    height: int
    payload: bytes
    version: int = FORMAT_VERSION

    def to_bytes(self) -> bytes:
        header = HEADER_STRUCT.pack(MAGIC, self.version, self.lam, self.width, self.height)
        return header + self.payload

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Bitstream":
        if len(raw) < HEADER_SIZE:
            raise FormatError(f"bitstream shorter than the {HEADER_SIZE}-byte header")
        magic, version, lam, width, height = HEADER_STRUCT.unpack_from(raw)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported bitstream version {version}")
        return cls(lam, width, height, raw[HEADER_SIZE:], version)

    @property
    def bpp(self) -> float:
        return len(self.payload) * 8 / (self.width * self.height)
