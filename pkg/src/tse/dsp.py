"""STFT analysis/synthesis, log-Mel features, and 16-bit PCM WAV I/O."""

from __future__ import annotations

import wave
from dataclasses import dataclass, field

import numpy as np

from . import autodiff


class ColaError(ValueError):
    """Window/hop pair does not satisfy constant overlap-add."""


class WavFormatError(ValueError):
    """WAV file is not 16-bit PCM mono."""


WINDOWS = ("sqrt-hann", "hann")

# int16 samples map to i / PCM_SCALE; a power of two keeps grid-aligned
# sums and file round trips exact in float64
PCM_SCALE = 32768.0
LOG_MEL_FLOOR = 1e-10


@dataclass(frozen=True)
class StftConfig:
    fft_size: int
    frame_length: int
    frame_shift: int
    window: str = "sqrt-hann"
    sample_rate: int = 16000

    def __post_init__(self):
        if not (0 < self.frame_shift <= self.frame_length <= self.fft_size):
            raise ValueError(
                f"need 0 < frame_shift <= frame_length <= fft_size, got "
                f"shift={self.frame_shift} length={self.frame_length} fft={self.fft_size}")
        if self.fft_size % 2 != 0:
            raise ValueError("fft_size must be even")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.window not in WINDOWS:
            raise ValueError(f"window must be one of {WINDOWS}")

    @property
    def num_bins(self) -> int:
        return self.fft_size // 2 + 1

    def window_values(self) -> np.ndarray:
        # periodic windows; sqrt-hann squares back to hann, which sums to a
        # constant at 50% overlap
        n = np.arange(self.frame_length)
        hann = 0.5 * (1.0 - np.cos(2.0 * np.pi * n / self.frame_length))
        if self.window == "hann":
            return hann
        return np.sqrt(hann)

    def num_frames(self, num_samples: int) -> int:
        if num_samples < self.frame_length:
            raise ValueError(
                f"signal of {num_samples} samples is shorter than one "
                f"frame ({self.frame_length})")
        return 1 + (num_samples - self.frame_length) // self.frame_shift


@dataclass
class Spectrogram:
    """One-sided complex spectrogram, shape (fft_size/2 + 1, num_frames)."""

    bins: np.ndarray
    config: StftConfig = field(repr=False)

    def __post_init__(self):
        if self.bins.ndim != 2 or self.bins.shape[0] != self.config.num_bins:
            raise ValueError(
                f"expected {self.config.num_bins} bins, got shape {self.bins.shape}")

    @property
    def num_frames(self) -> int:
        return self.bins.shape[1]

    def magnitude(self) -> np.ndarray:
        return np.abs(self.bins)


def frame_signal(signal: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Slice a waveform into (frame_length, num_frames); tail that does not
    fill a whole frame is dropped."""
    signal = np.asarray(signal, dtype=np.float64)
    n_frames = cfg.num_frames(signal.size)
    idx = np.arange(cfg.frame_length)[:, None] + cfg.frame_shift * np.arange(n_frames)[None, :]
    return signal[idx]


def stft(signal: np.ndarray, cfg: StftConfig) -> Spectrogram:
    """Windowed one-sided STFT; frames are zero-padded up to fft_size."""
    frames = frame_signal(signal, cfg) * cfg.window_values()[:, None]
    bins = np.fft.rfft(frames, n=cfg.fft_size, axis=0)
    return Spectrogram(bins, cfg)


def _cola_constant(cfg: StftConfig) -> float:
    """Constant value of sum_l w^2(n - l*hop), or raise ColaError."""
    w2 = cfg.window_values() ** 2
    span = cfg.frame_length * 4
    cover = np.zeros(span + cfg.frame_length)
    for start in range(0, span, cfg.frame_shift):
        cover[start:start + cfg.frame_length] += w2
    interior = cover[cfg.frame_length:span - cfg.frame_length]
    level = interior.mean()
    if level <= 0 or np.max(np.abs(interior - level)) > 1e-8 * level:
        raise ColaError(
            f"window={cfg.window!r} length={cfg.frame_length} "
            f"shift={cfg.frame_shift} does not satisfy constant overlap-add")
    return float(level)


def istft_length(cfg: StftConfig, num_frames: int) -> int:
    return cfg.frame_length + (num_frames - 1) * cfg.frame_shift


def interior_slice(cfg: StftConfig, num_frames: int) -> slice:
    """Region of the istft output where overlap-add coverage is complete."""
    edge = cfg.frame_length - cfg.frame_shift
    return slice(edge, istft_length(cfg, num_frames) - edge)


def istft(spec: Spectrogram) -> np.ndarray:
    """Overlap-add synthesis with synthesis window = analysis window.

    Requires the config to satisfy the COLA condition (sqrt-hann at 50%
    overlap does). Inverts stft exactly on the fully-overlapped interior.
    """
    cfg = spec.config
    level = _cola_constant(cfg)
    frames = np.fft.irfft(spec.bins, n=cfg.fft_size, axis=0)[:cfg.frame_length]
    frames = frames * cfg.window_values()[:, None]
    out = np.zeros(istft_length(cfg, spec.num_frames))
    for l in range(spec.num_frames):
        start = l * cfg.frame_shift
        out[start:start + cfg.frame_length] += frames[:, l]
    return out / level


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, cfg: StftConfig) -> np.ndarray:
    """Triangular HTK-scale filterbank, (n_mels, num_bins), spanning 0..Nyquist."""
    if n_mels < 1:
        raise ValueError("n_mels must be >= 1")
    nyquist = cfg.sample_rate / 2.0
    edges_hz = mel_to_hz(np.linspace(0.0, hz_to_mel(nyquist), n_mels + 2))
    bin_hz = np.arange(cfg.num_bins) * cfg.sample_rate / cfg.fft_size
    fb = np.zeros((n_mels, cfg.num_bins))
    for m in range(n_mels):
        lo, mid, hi = edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]
        rise = (bin_hz - lo) / max(mid - lo, 1e-12)
        fall = (hi - bin_hz) / max(hi - mid, 1e-12)
        fb[m] = np.clip(np.minimum(rise, fall), 0.0, None)
    return fb


def log_mel(signal: np.ndarray, cfg: StftConfig, n_mels: int) -> autodiff.Tensor:
    """log(mel_filterbank @ |STFT|^2 + floor), shape (n_mels, num_frames)."""
    power = np.abs(stft(signal, cfg).bins) ** 2
    fb = mel_filterbank(n_mels, cfg)
    return autodiff.constant(np.log(fb @ power + LOG_MEL_FLOOR))


def read_wav(path) -> tuple[int, np.ndarray]:
    """Read a 16-bit PCM mono WAV file; returns (sample_rate, float64 in [-1, 1])."""
    try:
        with wave.open(str(path), "rb") as w:
            channels = w.getnchannels()
            width = w.getsampwidth()
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as exc:
        raise WavFormatError(f"{path}: not a readable WAV file ({exc})") from exc
    if width != 2:
        raise WavFormatError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    if channels != 1:
        raise WavFormatError(f"{path}: expected mono, got {channels} channels")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / PCM_SCALE
    return rate, samples


def write_wav(path, rate: int, signal: np.ndarray):
    """Write float samples in [-1, 1] as 16-bit PCM mono."""
    ints = np.round(np.clip(np.asarray(signal), -1.0, 1.0 - 1.0 / PCM_SCALE) * PCM_SCALE)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(rate))
        w.writeframes(ints.astype("<i2").tobytes())
