"""STFT analysis/synthesis, mask resynthesis and WAV I/O.

Conventions: 512-point FFT, hop 256, sqrt-Hann analysis and synthesis
windows (their product is a periodic Hann, which overlap-adds to one at
50 % overlap), and the signal is zero-padded by ``fft_size // 2`` on both
sides so frame ``t`` is centred on sample ``t * hop``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from dpcss.tensor import ShapeError, Tensor

SAMPLE_RATE = 16000
FFT_SIZE = 512
HOP = 256


class ConfigurationError(ValueError):
    pass


class WavFormatError(IOError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.ndim != 1:
            raise ValueError(f"waveform must be mono 1-D, got shape {self.samples.shape}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class Spectrogram:
    """One-sided complex STFT, ``values`` is [frames, fft_size // 2 + 1]."""

    values: np.ndarray
    fft_size: int = FFT_SIZE
    hop: int = HOP
    n_samples: int | None = None
    sample_rate: int = SAMPLE_RATE
    window: str = "sqrt-hann"

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def bins(self) -> int:
        return self.values.shape[1]

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.values)

    @property
    def phase(self) -> np.ndarray:
        return np.angle(self.values)

    def with_values(self, values: np.ndarray) -> "Spectrogram":
        return Spectrogram(values, self.fft_size, self.hop, self.n_samples, self.sample_rate, self.window)


def sqrt_hann(n: int) -> np.ndarray:
    return np.sqrt(0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n))


def num_frames(n_samples: int, hop: int = HOP) -> int:
    return n_samples // hop + 1


def stft(w: Waveform | np.ndarray, fft_size: int = FFT_SIZE, hop: int = HOP) -> Spectrogram:
    if isinstance(w, Waveform):
        x, sr = w.samples, w.sample_rate
    else:
        x, sr = np.asarray(w, dtype=np.float64), SAMPLE_RATE
    if x.size < 1:
        raise ValueError("stft of an empty signal")
    if fft_size % 2 or hop <= 0:
        raise ConfigurationError(f"need even fft_size and positive hop, got {fft_size}/{hop}")
    half = fft_size // 2
    padded = np.pad(x, (half, half))
    n_frames = num_frames(len(x), hop)
    idx = hop * np.arange(n_frames)[:, None] + np.arange(fft_size)[None, :]
    frames = padded[idx] * sqrt_hann(fft_size)
    return Spectrogram(np.fft.rfft(frames, axis=-1), fft_size, hop, len(x), sr)


def _overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    """Overlap-add frames [..., T, N] into [..., (T - 1) * hop + N]."""
    *lead, n_frames, n = frames.shape
    out = np.zeros((*lead, (n_frames - 1) * hop + n))
    for t in range(n_frames):
        out[..., t * hop:t * hop + n] += frames[..., t, :]
    return out


def istft(s: Spectrogram, length: int | None = None) -> Waveform:
    """Weighted overlap-add synthesis, normalised by the squared-window envelope."""
    n = s.fft_size
    if s.values.ndim != 2 or s.values.shape[1] != n // 2 + 1:
        raise ConfigurationError(f"spectrogram with {s.values.shape[-1]} bins does not match fft_size {n}")
    win = sqrt_hann(n)
    frames = np.fft.irfft(s.values, n=n, axis=-1) * win
    y = _overlap_add(frames, s.hop)
    env = _overlap_add(np.broadcast_to(win * win, frames.shape), s.hop)
    nz = env > 1e-10
    y[nz] /= env[nz]
    half = n // 2
    if length is None:
        length = s.n_samples if s.n_samples is not None else (s.frames - 1) * s.hop
    y = y[half:half + length]
    if len(y) < length:
        y = np.pad(y, (0, length - len(y)))
    return Waveform(y, s.sample_rate)


def masked_resynthesis(mix_spec: Spectrogram, mask) -> Waveform:
    """istft of ``mask * |mix|`` with the mixture phase."""
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    if m.shape != mix_spec.values.shape:
        raise ShapeError(f"mask shape {m.shape} != spectrogram shape {mix_spec.values.shape}")
    if np.any(m < 0):
        raise ValueError("masks must be non-negative")
    return istft(mix_spec.with_values(m * mix_spec.values))


# -- window-level synthesis used by the training objective --------------------
def window_synthesis(values: np.ndarray, fft_size: int = FFT_SIZE, hop: int = HOP) -> np.ndarray:
    """Plain (unnormalised) weighted overlap-add of [..., K, F] spectra.

    Returns [..., (K - 1) * hop + fft_size] samples.  Estimates and references
    must both pass through this so their window edges taper identically.
    """
    frames = np.fft.irfft(values, n=fft_size, axis=-1) * sqrt_hann(fft_size)
    return _overlap_add(frames, hop)


def masked_window_synthesis(mask: Tensor, mix: np.ndarray, fft_size: int = FFT_SIZE,
                            hop: int = HOP) -> Tensor:
    """Differentiable ``window_synthesis(mask * mix)`` with respect to a real mask.

    For one frame, d x[m] / d mask_k = (c_k / N) Re(mix_k e^{2 pi i k m / N}),
    c_k = 1 at DC/Nyquist and 2 elsewhere, so the mask gradient is
    (c_k / N) Re(mix_k conj(rfft(window * g_frame)_k)).
    """
    if mask.shape != mix.shape:
        raise ShapeError(f"mask shape {mask.shape} != mixture window shape {mix.shape}")
    win = sqrt_hann(fft_size)
    k_frames = mask.shape[-2]
    out = window_synthesis(mask.data * mix, fft_size, hop)
    scale = np.full(fft_size // 2 + 1, 2.0 / fft_size)
    scale[0] = scale[-1] = 1.0 / fft_size
    idx = hop * np.arange(k_frames)[:, None] + np.arange(fft_size)[None, :]

    def backward(g):
        gframes = g[..., idx] * win
        spec = np.fft.rfft(gframes, axis=-1)
        return ((mix * spec.conj()).real * scale,)

    return Tensor.record(out, (mask,), backward)


# -- WAV I/O -------------------------------------------------------------------
def read_wav(path) -> Waveform:
    """Read a mono 16 kHz WAV stored as 16-bit PCM or 32-bit float."""
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except (ValueError, OSError) as exc:
        raise WavFormatError(f"{path}: cannot parse WAV ({exc})") from exc
    if data.ndim != 1:
        raise WavFormatError(f"{path}: {data.shape[1]} channels; only mono is supported")
    if rate != SAMPLE_RATE:
        raise WavFormatError(f"{path}: sample rate {rate} Hz; only {SAMPLE_RATE} Hz is supported (no resampling)")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise WavFormatError(f"{path}: sample format {data.dtype} unsupported (need 16-bit PCM or 32-bit float)")
    return Waveform(samples, rate)


def write_wav(path, w: Waveform, fmt: str = "float32") -> None:
    if w.sample_rate != SAMPLE_RATE:
        raise WavFormatError(f"refusing to write {w.sample_rate} Hz audio; expected {SAMPLE_RATE} Hz")
    if fmt == "float32":
        data = w.samples.astype(np.float32)
    elif fmt == "pcm16":
        data = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise WavFormatError(f"unknown WAV sample format {fmt!r}")
    wavfile.write(Path(path), w.sample_rate, data)
