"""Waveform loading, log-mel features, SpecAugment and patch extraction."""

from __future__ import annotations

import wave
from dataclasses import dataclass

import numpy as np
from scipy.signal import get_window

from slap.errors import InputError, UnsupportedFormatError, WavFormatError

SAMPLE_RATE = 16000
WIN_LENGTH = 400  # 25 ms
HOP_LENGTH = 160  # 10 ms
N_FFT = 512
N_MELS = 64
PATCH = 16
LOG_FLOOR_ENERGY = 1e-10
LOG_FLOOR = float(np.log(LOG_FLOOR_ENERGY))


@dataclass
class Waveform:
    samples: np.ndarray  # float32, mono, [-1, 1]
    sample_rate: int = SAMPLE_RATE

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelSpec:
    frames: np.ndarray  # (T, n_mels) float32 log-mel

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]


@dataclass
class PatchSeq:
    patches: np.ndarray  # (n_time * n_freq, PATCH * PATCH)
    coords: np.ndarray  # (n_time * n_freq, 2) integer (t_idx, f_idx)
    n_time: int
    n_freq: int

    def __len__(self):
        return self.patches.shape[0]


def num_frames(n_samples: int) -> int:
    if n_samples < WIN_LENGTH:
        raise InputError(f"waveform has {n_samples} samples, need at least {WIN_LENGTH}")
    return 1 + (n_samples - WIN_LENGTH) // HOP_LENGTH


def resample_linear(x: np.ndarray, sr_in: int, sr_out: int = SAMPLE_RATE) -> np.ndarray:
    if sr_in == sr_out:
        return x
    n_out = int(round(len(x) * sr_out / sr_in))
    positions = np.arange(n_out, dtype=np.float64) * (sr_in / sr_out)
    return np.interp(positions, np.arange(len(x), dtype=np.float64), x)


def load_wav(path) -> Waveform:
    """Read a PCM16 WAV file as a 16 kHz mono float waveform.

    Stereo channels are averaged; other rates are linearly resampled.
    """
    try:
        with wave.open(str(path), "rb") as f:
            n_channels = f.getnchannels()
            width = f.getsampwidth()
            rate = f.getframerate()
            raw = f.readframes(f.getnframes())
    except wave.Error as e:
        if "unknown format" in str(e):
            raise UnsupportedFormatError(f"{path}: {e}") from e
        raise WavFormatError(f"{path}: {e}") from e
    except EOFError as e:
        raise WavFormatError(f"{path}: truncated header") from e
    if width != 2:
        raise UnsupportedFormatError(f"{path}: only 16-bit PCM is supported, got {8 * width}-bit")
    if n_channels < 1 or rate <= 0:
        raise WavFormatError(f"{path}: bad channel count or sample rate")
    pcm = np.frombuffer(raw, dtype="<i2")
    pcm = pcm[: len(pcm) - len(pcm) % n_channels].reshape(-1, n_channels)
    x = pcm.astype(np.float64) / 32768.0
    x = x.mean(axis=1) if n_channels > 1 else x[:, 0]
    x = resample_linear(x, rate)
    return Waveform(np.clip(x, -1.0, 1.0).astype(np.float32), SAMPLE_RATE)


def save_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(np.asarray(w.samples, dtype=np.float64) * 32768.0), -32768, 32767)
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.astype("<i2").tobytes())


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels=N_MELS, n_fft=N_FFT, sr=SAMPLE_RATE, fmin=0.0, fmax=None):
    """Triangular HTK-mel filters, shape (n_mels, n_fft // 2 + 1)."""
    fmax = sr / 2 if fmax is None else fmax
    bin_hz = np.linspace(0.0, sr / 2, n_fft // 2 + 1)
    edges = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bin_hz[None, :] - lo) / (mid - lo)
    down = (hi - bin_hz[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


_FILTERBANK = mel_filterbank()
_WINDOW = get_window("hann", WIN_LENGTH, fftbins=True)


def mel_spectrogram(w: Waveform) -> MelSpec:
    x = np.asarray(w.samples, dtype=np.float64)
    T = num_frames(len(x))
    frames = np.lib.stride_tricks.sliding_window_view(x, WIN_LENGTH)[::HOP_LENGTH][:T]
    spec = np.fft.rfft(frames * _WINDOW, n=N_FFT, axis=-1)
    power = spec.real**2 + spec.imag**2
    energy = power @ _FILTERBANK.T
    return MelSpec(np.log(np.maximum(energy, LOG_FLOOR_ENERGY)).astype(np.float32))


def mask_bins(m: MelSpec, start: int, stop: int) -> MelSpec:
    out = m.frames.copy()
    out[:, max(0, start) : min(m.n_mels, stop)] = LOG_FLOOR
    return MelSpec(out)


def mask_frames(m: MelSpec, start: int, stop: int) -> MelSpec:
    out = m.frames.copy()
    out[max(0, start) : min(m.n_frames, stop), :] = LOG_FLOOR
    return MelSpec(out)


def spec_augment(
    m: MelSpec,
    rng: np.random.Generator,
    n_freq_masks: int = 2,
    max_freq_width: int = 8,
    n_time_masks: int = 2,
    max_time_width: int = 32,
) -> MelSpec:
    """Fill random frequency bands and time spans with the log floor."""
    out = m
    for _ in range(n_freq_masks):
        width = int(rng.integers(0, max_freq_width + 1))
        start = int(rng.integers(0, max(1, m.n_mels - width + 1)))
        if width:
            out = mask_bins(out, start, start + width)
    for _ in range(n_time_masks):
        width = int(rng.integers(0, max_time_width + 1))
        start = int(rng.integers(0, max(1, m.n_frames - width + 1)))
        if width:
            out = mask_frames(out, start, start + width)
    return out


def patchify(m: MelSpec) -> PatchSeq:
    """Cut a spectrogram into 16x16 blocks ordered time-major, then frequency.

    Trailing frames that do not fill a whole block are dropped.
    """
    if m.n_mels != N_MELS:
        raise InputError(f"expected {N_MELS} mel bins, got {m.n_mels}")
    n_time = m.n_frames // PATCH
    if n_time == 0:
        raise InputError(f"clip has {m.n_frames} frames, shorter than one {PATCH}-frame patch")
    n_freq = m.n_mels // PATCH
    blocks = m.frames[: n_time * PATCH].reshape(n_time, PATCH, n_freq, PATCH)
    patches = blocks.transpose(0, 2, 1, 3).reshape(n_time * n_freq, PATCH * PATCH)
    t_idx, f_idx = np.divmod(np.arange(n_time * n_freq), n_freq)
    coords = np.stack([t_idx, f_idx], axis=1).astype(np.int64)
    return PatchSeq(np.ascontiguousarray(patches), coords, n_time, n_freq)


def unpatchify(p: PatchSeq) -> MelSpec:
    blocks = p.patches.reshape(p.n_time, p.n_freq, PATCH, PATCH).transpose(0, 2, 1, 3)
    return MelSpec(np.ascontiguousarray(blocks.reshape(p.n_time * PATCH, p.n_freq * PATCH)))


def wav_to_patches(path) -> PatchSeq:
    return patchify(mel_spectrogram(load_wav(path)))
