"""Waveform <-> log-mel conversion and a Griffin-Lim vocoder."""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window

from .kernels import overlap_add

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate_hz: int = 16000
    n_fft: int = 1024
    win_length: int = 800
    hop_length: int = 200
    n_mels: int = 80
    fmin_hz: float = 0.0
    fmax_hz: float = 8000.0
    log_floor: float = 1e-5

    def __post_init__(self):
        if not (0 < self.hop_length <= self.win_length <= self.n_fft):
            raise ValueError("need 0 < hop_length <= win_length <= n_fft")
        if not (0 <= self.fmin_hz < self.fmax_hz <= self.sample_rate_hz / 2):
            raise ValueError("need 0 <= fmin < fmax <= sample_rate / 2")
        if self.n_mels < 1 or self.log_floor <= 0:
            raise ValueError("n_mels and log_floor must be positive")

    @property
    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:16]

    @property
    def n_freqs(self) -> int:
        return self.n_fft // 2 + 1


@dataclass
class MelSpectrogram:
    """Log-mel amplitude, one row per frame: ``frames`` has shape ``(m, n_mels)``."""

    frames: np.ndarray
    config_hash: str

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"mel must be (m >= 1, n_mels), got {self.frames.shape}")

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class MelStats:
    mean: np.ndarray
    std: np.ndarray


# ---------------------------------------------------------------------------
# filterbank / STFT
# ---------------------------------------------------------------------------


def _hz_to_mel(f):
    # slaney: linear below 1 kHz, logarithmic above
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(f >= min_log_hz, min_log_mel + np.log(np.maximum(f, 1e-12) / min_log_hz) / logstep, f / f_sp)


def _mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


def mel_filterbank(config: FeatureConfig) -> np.ndarray:
    """Slaney-normalised triangular filters, shape ``(n_mels, n_freqs)``."""
    fft_freqs = np.linspace(0, config.sample_rate_hz / 2, config.n_freqs)
    mel_pts = np.linspace(_hz_to_mel(config.fmin_hz), _hz_to_mel(config.fmax_hz), config.n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    fdiff = np.diff(hz_pts)
    ramps = hz_pts[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    enorm = 2.0 / (hz_pts[2:] - hz_pts[:-2])
    return weights * enorm[:, None]


def mel_bin_centers_hz(config: FeatureConfig) -> np.ndarray:
    mel_pts = np.linspace(_hz_to_mel(config.fmin_hz), _hz_to_mel(config.fmax_hz), config.n_mels + 2)
    return _mel_to_hz(mel_pts[1:-1])


def _window(config: FeatureConfig) -> np.ndarray:
    win = get_window("hann", config.win_length, fftbins=True)
    left = (config.n_fft - config.win_length) // 2
    out = np.zeros(config.n_fft)
    out[left : left + config.win_length] = win
    return out


def stft(wave: np.ndarray, config: FeatureConfig) -> np.ndarray:
    """Centred, zero-padded STFT. Returns ``(frames, n_freqs)`` complex.

    Frame count is ``len(wave) // hop + 1``.
    """
    pad = config.n_fft // 2
    x = np.pad(np.asarray(wave, dtype=np.float64), (pad, pad))
    n_frames = len(wave) // config.hop_length + 1
    idx = np.arange(n_frames)[:, None] * config.hop_length + np.arange(config.n_fft)[None, :]
    return np.fft.rfft(x[idx] * _window(config), axis=1)


def istft(spec: np.ndarray, config: FeatureConfig, length: int) -> np.ndarray:
    """Least-squares inverse of :func:`stft` (overlap-add / window power)."""
    win = _window(config)
    frames = np.fft.irfft(spec, n=config.n_fft, axis=1) * win
    pad = config.n_fft // 2
    total = length + 2 * pad
    num = overlap_add(frames, config.hop_length, total)
    den = overlap_add(np.broadcast_to(win**2, frames.shape), config.hop_length, total)
    out = np.where(den > 1e-10, num / np.maximum(den, 1e-10), 0.0)
    return out[pad : pad + length]


def _check_wave(wave) -> np.ndarray:
    wave = np.asarray(wave, dtype=np.float64)
    if wave.ndim != 1 or wave.size == 0:
        raise ValueError("wave must be a non-empty 1-D array")
    if not np.all(np.isfinite(wave)):
        raise ValueError("wave contains non-finite samples")
    return wave


def wave_to_mel(wave, config: FeatureConfig) -> MelSpectrogram:
    wave = _check_wave(wave)
    mag = np.abs(stft(wave, config))
    mel = mag @ mel_filterbank(config).T
    frames = np.log(np.maximum(mel, config.log_floor))
    return MelSpectrogram(frames.astype(np.float32), config.config_hash)


def _bin_weights(config: FeatureConfig) -> np.ndarray:
    # one-sided spectrum: interior bins stand for a conjugate pair
    w = np.full(config.n_freqs, 2.0)
    w[0] = 1.0
    if config.n_fft % 2 == 0:
        w[-1] = 1.0
    return w


def spectral_convergence(target_mag: np.ndarray, wave: np.ndarray, config: FeatureConfig) -> float:
    """``||S - |STFT(x)|||_F / ||S||_F`` over the full (two-sided) spectrum."""
    est = np.abs(stft(wave, config))
    n = min(len(est), len(target_mag))
    w = _bin_weights(config)
    num = np.sum(w * (target_mag[:n] - est[:n]) ** 2)
    den = np.sum(w * target_mag[:n] ** 2)
    return float(np.sqrt(num / max(den, 1e-24)))


def mel_to_linear(mel: MelSpectrogram, config: FeatureConfig) -> np.ndarray:
    """Non-negative linear magnitude via the filterbank pseudo-inverse."""
    amp = np.exp(np.asarray(mel.frames, dtype=np.float64))
    return np.maximum(amp @ np.linalg.pinv(mel_filterbank(config)).T, 0.0)


def griffin_lim(mag: np.ndarray, config: FeatureConfig, n_iter: int, seed: int = 0, return_history=False):
    """Plain Griffin-Lim (no momentum, so the magnitude error never increases)."""
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    length = (mag.shape[0] - 1) * config.hop_length
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(mag.shape))
    history = []
    wave = istft(mag * phase, config, length)
    for _ in range(n_iter):
        spec = stft(wave, config)
        phase = np.exp(1j * np.angle(spec))
        wave = istft(mag * phase, config, length)
        if return_history:
            history.append(spectral_convergence(mag, wave, config))
    if return_history:
        return wave, history
    return wave


def mel_to_wave(mel: MelSpectrogram, config: FeatureConfig, gl_iters: int = 32, seed: int = 0) -> np.ndarray:
    frames = np.asarray(mel.frames)
    if not np.all(np.isfinite(frames)):
        raise ValueError("mel contains non-finite values")
    if gl_iters < 1:
        raise ValueError("gl_iters must be >= 1")
    mag = mel_to_linear(mel, config)
    if not np.any(mag > 0):
        return np.zeros((mag.shape[0] - 1) * config.hop_length)
    return griffin_lim(mag, config, gl_iters, seed=seed)


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------


def compute_stats(mels, min_std: float = 1e-3) -> MelStats:
    """Per-bin mean/std over every frame of ``mels``; std floored at ``min_std``."""
    allf = np.concatenate([np.asarray(m.frames, dtype=np.float64) for m in mels], axis=0)
    return MelStats(allf.mean(axis=0), np.maximum(allf.std(axis=0), min_std))


def _check_stats(stats: MelStats):
    if np.any(np.asarray(stats.std) <= 0):
        raise ValueError("std entries must be positive")


def normalize_mel(mel: MelSpectrogram, stats: MelStats) -> MelSpectrogram:
    _check_stats(stats)
    return MelSpectrogram((mel.frames - stats.mean) / stats.std, mel.config_hash)


def denormalize_mel(mel: MelSpectrogram, stats: MelStats) -> MelSpectrogram:
    _check_stats(stats)
    return MelSpectrogram(mel.frames * stats.std + stats.mean, mel.config_hash)


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def read_wav(path, target_sr: int = 16000) -> np.ndarray:
    """Mono float64 in [-1, 1]; stereo is averaged, other rates linearly resampled."""
    sr, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    else:
        x = data.astype(np.float64)
    if x.ndim == 2:
        x = x.mean(axis=1)
    if sr != target_sr and len(x) > 1:
        n_out = int(round(len(x) * target_sr / sr))
        x = np.interp(np.arange(n_out) * (sr / target_sr), np.arange(len(x)), x)
    return x


def write_wav(path, wave: np.ndarray, sample_rate: int = 16000):
    pcm = np.clip(np.rint(np.asarray(wave, dtype=np.float64) * 32768.0), -32768, 32767).astype(np.int16)
    wavfile.write(str(path), sample_rate, pcm)


def save_mel(path, mel: MelSpectrogram, **extra):
    with open(path, "wb") as fh:
        np.savez(fh, mel=np.asarray(mel.frames), config_hash=np.array(mel.config_hash), **extra)


def load_mel(path) -> MelSpectrogram:
    with np.load(Path(path)) as z:
        return MelSpectrogram(z["mel"], str(z["config_hash"]))
