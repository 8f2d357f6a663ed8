"""WAV ingestion and log-mel filterbank (FBank) features."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import (
    CodecError,
    ConfigError,
    FFTSizeError,
    ResolutionError,
    SignalTooShortError,
    WavParseError,
)

TARGET_RATE = 16000
FBK_MAGIC = b"FBK1"
_FBK_HEADER = struct.Struct("<4sIII")

_PCM = 0x0001
_IEEE_FLOAT = 0x0003
_EXTENSIBLE = 0xFFFE


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def seconds(self) -> float:
        return len(self) / self.sample_rate


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------


def _read_chunk_header(buf: bytes, offset: int) -> tuple[bytes, int]:
    if offset + 8 > len(buf):
        raise WavParseError("truncated chunk header", offset)
    cid, size = struct.unpack_from("<4sI", buf, offset)
    return cid, size


def parse_wav(buf: bytes) -> Waveform:
    """Decode an in-memory RIFF/WAVE file (16-bit PCM or 32-bit float)."""
    if len(buf) < 12 or buf[0:4] != b"RIFF":
        raise WavParseError("missing RIFF magic", 0)
    if buf[8:12] != b"WAVE":
        raise WavParseError("missing WAVE form type", 8)

    fmt = None
    payload = None
    offset = 12
    while offset < len(buf):
        cid, size = _read_chunk_header(buf, offset)
        body = offset + 8
        if body + size > len(buf):
            raise WavParseError(f"chunk {cid!r} overruns file ({size} bytes declared)", offset)
        if cid == b"fmt ":
            if size < 16:
                raise WavParseError("fmt chunk shorter than 16 bytes", offset)
            tag, channels, rate, _, block_align, bits = struct.unpack_from("<HHIIHH", buf, body)
            if tag == _EXTENSIBLE:
                if size < 40:
                    raise WavParseError("extensible fmt chunk shorter than 40 bytes", offset)
                tag = struct.unpack_from("<H", buf, body + 24)[0]
            fmt = (tag, channels, rate, block_align, bits, offset)
        elif cid == b"data":
            if fmt is None:
                raise WavParseError("data chunk before fmt chunk", offset)
            payload = buf[body : body + size]
            break
        offset = body + size + (size & 1)
    if fmt is None:
        raise WavParseError("no fmt chunk", offset)
    if payload is None:
        raise WavParseError("no data chunk", offset)

    tag, channels, rate, block_align, bits, fmt_offset = fmt
    if channels < 1 or rate < 1:
        raise WavParseError(f"invalid fmt: channels={channels} rate={rate}", fmt_offset)
    if tag == _PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif tag == _IEEE_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise CodecError(f"unsupported WAV encoding: format tag {tag:#06x}, {bits} bits")

    n_frames = len(payload) // (dtype.itemsize * channels)
    raw = np.frombuffer(payload, dtype=dtype, count=n_frames * channels)
    samples = raw.astype(np.float64).reshape(n_frames, channels) * scale
    return Waveform(samples.mean(axis=1), rate)


def resample(w: Waveform, rate: int) -> Waveform:
    """Linear-interpolation resampling."""
    if w.sample_rate == rate:
        return w
    n_out = int(round(len(w) * rate / w.sample_rate))
    t = np.arange(n_out) * (w.sample_rate / rate)
    return Waveform(np.interp(t, np.arange(len(w)), w.samples), rate)


def load_wav(path, target_rate: int | None = TARGET_RATE) -> Waveform:
    """Read a WAV file as mono float samples in [-1, 1].

    Stereo is averaged to mono and, unless ``target_rate`` is None, the
    signal is resampled to ``target_rate``.
    """
    w = parse_wav(Path(path).read_bytes())
    return w if target_rate is None else resample(w, target_rate)


def wav_bytes(w: Waveform, encoding: str = "pcm16") -> bytes:
    if encoding == "pcm16":
        data = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2").tobytes()
        tag, bits = _PCM, 16
    elif encoding == "float32":
        data = w.samples.astype("<f4").tobytes()
        tag, bits = _IEEE_FLOAT, 32
    else:
        raise CodecError(f"cannot write encoding {encoding!r}")
    block = bits // 8
    fmt = struct.pack("<HHIIHH", tag, 1, w.sample_rate, w.sample_rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(data)) + data + (b"\0" if len(data) & 1 else b"")
    return b"RIFF" + struct.pack("<I", len(body)) + body


def save_wav(path, w: Waveform, encoding: str = "pcm16") -> None:
    Path(path).write_bytes(wav_bytes(w, encoding))


# ---------------------------------------------------------------------------
# Framing and spectra
# ---------------------------------------------------------------------------


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@dataclass(frozen=True)
class FbankConfig:
    n_mels: int = 80
    frame_len_ms: float = 25.0
    frame_shift_ms: float = 10.0
    n_fft: int = 512
    sample_rate: int = TARGET_RATE
    max_seconds: float = 30.0
    normalize: bool = False
    log_floor: float = 1e-10

    def __post_init__(self):
        if not _is_pow2(self.n_fft):
            raise ConfigError(f"n_fft must be a power of two, got {self.n_fft}")
        if self.n_fft < self.frame_len:
            raise ConfigError(f"n_fft={self.n_fft} shorter than frame length {self.frame_len}")
        if self.n_mels < 2:
            raise ConfigError("n_mels must be at least 2")
        if self.frame_shift < 1:
            raise ConfigError("frame shift must be at least one sample")

    @property
    def frame_len(self) -> int:
        return int(round(self.frame_len_ms * self.sample_rate / 1000.0))

    @property
    def frame_shift(self) -> int:
        return int(round(self.frame_shift_ms * self.sample_rate / 1000.0))

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def truncate(w: Waveform, max_seconds: float = 30.0) -> Waveform:
    limit = int(max_seconds * w.sample_rate)
    return w if len(w) <= limit else Waveform(w.samples[:limit], w.sample_rate)


def n_frames(n_samples: int, frame_len: int, frame_shift: int) -> int:
    if n_samples < frame_len:
        return 0
    return 1 + (n_samples - frame_len) // frame_shift


def frame_signal(w: Waveform, cfg: FbankConfig) -> np.ndarray:
    """Hamming-windowed frames zero-padded to ``n_fft``: ``[frames, n_fft]``.

    Trailing samples that do not fill a whole frame are dropped.
    """
    flen, shift = cfg.frame_len, cfg.frame_shift
    if len(w) < flen:
        raise SignalTooShortError(f"signal of {len(w)} samples is shorter than one {flen}-sample frame")
    frames = np.lib.stride_tricks.sliding_window_view(w.samples, flen)[::shift]
    out = np.zeros((frames.shape[0], cfg.n_fft))
    out[:, :flen] = frames * np.hamming(flen)
    return out


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft(x: np.ndarray) -> np.ndarray:
    """Iterative radix-2 decimation-in-time FFT along the last axis."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    if not _is_pow2(n):
        raise FFTSizeError(f"FFT length must be a power of two, got {n}")
    lead = x.shape[:-1]
    a = x[..., _bit_reverse(n)]
    size = 2
    while size <= n:
        half = size // 2
        twiddle = np.exp(-2j * np.pi * np.arange(half) / size)
        blocks = a.reshape(*lead, n // size, size)
        even = blocks[..., :half]
        odd = blocks[..., half:] * twiddle
        a = np.concatenate([even + odd, even - odd], axis=-1).reshape(*lead, n)
        size *= 2
    return a


def dft(x: np.ndarray) -> np.ndarray:
    """Direct O(N^2) DFT; reference for :func:`fft`."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    k = np.arange(n)
    return x @ np.exp(-2j * np.pi * np.outer(k, k) / n).T


def fft_power_spectrum(frame: np.ndarray) -> np.ndarray:
    """|X[k]|^2 for bins 0..n/2 (works on a batch of frames too)."""
    spec = fft(frame)
    n = spec.shape[-1]
    return (spec.real**2 + spec.imag**2)[..., : n // 2 + 1]


# ---------------------------------------------------------------------------
# Mel filterbank
# ---------------------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers(cfg: FbankConfig) -> np.ndarray:
    """Hz edges of the filters: ``n_mels + 2`` points uniform in mel."""
    nyquist = cfg.sample_rate / 2.0
    return mel_to_hz(np.linspace(0.0, hz_to_mel(nyquist), cfg.n_mels + 2))


def _triangle_cdf(f: np.ndarray, lo: float, mid: float, hi: float) -> np.ndarray:
    """Integral of a unit-peak triangle on [lo, hi] from -inf to f."""
    f = np.clip(f, lo, hi)
    rising = (np.minimum(f, mid) - lo) ** 2 / (2.0 * (mid - lo))
    falling = np.where(f > mid, (hi - mid) / 2.0 - (hi - f) ** 2 / (2.0 * (hi - mid)), 0.0)
    return rising + falling


def mel_filterbank(cfg: FbankConfig) -> np.ndarray:
    """Triangular mel filters as a ``[n_mels, n_fft/2 + 1]`` weight matrix.

    Each weight is the mean height of a unit-peak triangle over the
    frequency span of one FFT bin, so a row times the bin width sums to
    the triangle's area and no filter falls between bins.
    """
    n_bins = cfg.n_fft // 2 + 1
    if cfg.n_mels > cfg.n_fft // 2:
        raise ResolutionError(f"{cfg.n_mels} mel filters cannot be resolved by {n_bins} FFT bins")
    width = cfg.sample_rate / cfg.n_fft
    edges = (np.arange(n_bins + 1) - 0.5) * width
    hz = mel_centers(cfg)
    fb = np.empty((cfg.n_mels, n_bins))
    for j in range(cfg.n_mels):
        cdf = _triangle_cdf(edges, hz[j], hz[j + 1], hz[j + 2])
        fb[j] = np.diff(cdf) / width
    if np.any(fb.max(axis=1) <= 0.0):
        raise ResolutionError("empty mel filter at this FFT resolution")
    return fb


# ---------------------------------------------------------------------------
# FBank
# ---------------------------------------------------------------------------


@dataclass
class FbankMatrix:
    values: np.ndarray
    fingerprint: str
    sample_rate: int = TARGET_RATE

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_mels(self) -> int:
        return self.values.shape[1]


_filterbank_cache: dict[FbankConfig, np.ndarray] = {}


def linear_mel_energies(w: Waveform, cfg: FbankConfig) -> np.ndarray:
    """Filterbank energies before the log: ``[frames, n_mels]``."""
    if w.sample_rate != cfg.sample_rate:
        w = resample(w, cfg.sample_rate)
    frames = frame_signal(truncate(w, cfg.max_seconds), cfg)
    fb = _filterbank_cache.get(cfg)
    if fb is None:
        fb = _filterbank_cache[cfg] = mel_filterbank(cfg)
    return fft_power_spectrum(frames) @ fb.T


def fbank(w: Waveform, cfg: FbankConfig) -> FbankMatrix:
    """truncate -> frame -> power spectrum -> mel filters -> natural log."""
    values = np.log(linear_mel_energies(w, cfg) + cfg.log_floor)
    if cfg.normalize:
        std = values.std(axis=0)
        values = (values - values.mean(axis=0)) / np.where(std > 0, std, 1.0)
    return FbankMatrix(values, cfg.fingerprint(), cfg.sample_rate)


def write_fbk(path, m: FbankMatrix) -> None:
    header = _FBK_HEADER.pack(FBK_MAGIC, m.n_frames, m.n_mels, m.sample_rate)
    Path(path).write_bytes(header + np.ascontiguousarray(m.values, dtype="<f8").tobytes())


def read_fbk(path, fingerprint: str = "") -> FbankMatrix:
    buf = Path(path).read_bytes()
    if len(buf) < _FBK_HEADER.size:
        raise WavParseError("truncated FBK1 header", 0)
    magic, frames, mels, rate = _FBK_HEADER.unpack_from(buf, 0)
    if magic != FBK_MAGIC:
        raise WavParseError(f"bad FBK magic {magic!r}", 0)
    expected = _FBK_HEADER.size + 8 * frames * mels
    if len(buf) != expected:
        raise WavParseError(f"FBK1 body is {len(buf)} bytes, expected {expected}", _FBK_HEADER.size)
    values = np.frombuffer(buf, dtype="<f8", offset=_FBK_HEADER.size).reshape(frames, mels).copy()
    return FbankMatrix(values, fingerprint, rate)


def expected_frames(seconds: float, cfg: FbankConfig) -> int:
    n = min(int(round(seconds * cfg.sample_rate)), int(cfg.max_seconds * cfg.sample_rate))
    return n_frames(n, cfg.frame_len, cfg.frame_shift)

