"""Waveform loading and time-frequency features.

Two input representations are produced from 16 kHz mono audio:

* ``spectrogram257`` -- magnitude of a 512-point FFT over 25 ms Hamming
  windows with a 10 ms hop (257 bins), fed to the ResNet trunk.
* ``fbank40`` -- 40 log mel filterbank energies over the same frames,
  fed to the VGG trunk.

Frames are never padded, so ``n_frames = (n_samples - 400) // 160 + 1``
(198 frames for a 2 s crop). Per-bin mean/variance normalisation is a
separate step (:func:`mvn`) so it can be applied either to a crop or to a
whole utterance.
"""

from __future__ import annotations

import hashlib
import json
import wave
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
WIN_LENGTH = 400
HOP_LENGTH = 160
N_FFT = 512
N_MELS = 40
SEGMENT_S = 2.0

FEATURE_DIMS = {"spectrogram257": N_FFT // 2 + 1, "fbank40": N_MELS}


class AudioError(ValueError):
    pass


@dataclass(frozen=True)
class DspConfig:
    sample_rate: int = SAMPLE_RATE
    win_length: int = WIN_LENGTH
    hop_length: int = HOP_LENGTH
    n_fft: int = N_FFT
    n_mels: int = N_MELS
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-10
    # False: MVN over each 2 s crop; True: MVN over the full utterance, then crop.
    utterance_mvn: bool = False

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:12]


@dataclass
class FeatureSegment:
    values: np.ndarray  # [F, T]
    feature_kind: str
    sample_rate_hz: int = SAMPLE_RATE
    frame_shift_s: float = HOP_LENGTH / SAMPLE_RATE
    frame_len_s: float = WIN_LENGTH / SAMPLE_RATE

    @property
    def shape(self):
        return self.values.shape


def load_waveform(path, mono: str = "error", sample_rate: int = SAMPLE_RATE):
    """Read a PCM16 WAV file as float64 samples in [-1, 1].

    ``mono`` controls multi-channel input: ``"error"`` rejects it,
    ``"average"`` downmixes by averaging the channels. Files at another
    sample rate are resampled with a polyphase filter.
    """
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError, OSError) as exc:
        raise AudioError(f"cannot read audio file {path}: {exc}") from exc
    if width != 2:
        raise AudioError(f"{path}: unsupported sample width {8 * width} bits (need PCM16)")

    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if n_channels > 1:
        if mono != "average":
            raise AudioError(f"{path}: {n_channels} channels, expected mono")
        samples = samples.reshape(-1, n_channels).mean(axis=1)
    if rate != sample_rate:
        from math import gcd

        from scipy.signal import resample_poly

        g = gcd(rate, sample_rate)
        samples = resample_poly(samples, sample_rate // g, rate // g)
        samples = np.clip(samples, -1.0, 1.0)
    return samples, sample_rate


def write_waveform(path, samples, sample_rate: int = SAMPLE_RATE) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


def n_frames(n_samples: int, cfg: DspConfig = DspConfig()) -> int:
    if n_samples < cfg.win_length:
        return 0
    return (n_samples - cfg.win_length) // cfg.hop_length + 1


def _frames(samples, cfg: DspConfig):
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1:
        raise AudioError(f"expected a 1-D signal, got shape {samples.shape}")
    t = n_frames(len(samples), cfg)
    if t == 0:
        raise AudioError(
            f"signal of {len(samples)} samples is shorter than one {cfg.win_length}-sample window"
        )
    view = np.lib.stride_tricks.sliding_window_view(samples, cfg.win_length)
    return view[:: cfg.hop_length][:t]


def _magnitude(samples, cfg: DspConfig):
    frames = _frames(samples, cfg) * np.hamming(cfg.win_length)
    return np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=1)).T  # [F, T]


def spectrogram(samples, cfg: DspConfig = DspConfig()) -> FeatureSegment:
    """257-bin magnitude spectrogram (not normalised)."""
    return FeatureSegment(_magnitude(samples, cfg), "spectrogram257", cfg.sample_rate)


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: DspConfig = DspConfig()) -> np.ndarray:
    """Triangular filters, shape [n_mels, n_fft // 2 + 1], peak value 1."""
    n_bins = cfg.n_fft // 2 + 1
    bin_hz = np.arange(n_bins) * cfg.sample_rate / cfg.n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_hz - lo) / (mid - lo)
    falling = (hi - bin_hz) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


_FBANK_CACHE: dict = {}


def fbank(samples, cfg: DspConfig = DspConfig()) -> FeatureSegment:
    """40 log mel energies over the power spectrum (not normalised)."""
    key = (cfg.n_fft, cfg.n_mels, cfg.sample_rate, cfg.fmin, cfg.fmax)
    if key not in _FBANK_CACHE:
        _FBANK_CACHE[key] = mel_filterbank(cfg)
    power = _magnitude(samples, cfg) ** 2
    energies = _FBANK_CACHE[key] @ power
    return FeatureSegment(np.log(np.maximum(energies, cfg.log_floor)), "fbank40", cfg.sample_rate)


def extract(samples, feature_kind: str, cfg: DspConfig = DspConfig()) -> FeatureSegment:
    if feature_kind == "spectrogram257":
        return spectrogram(samples, cfg)
    if feature_kind == "fbank40":
        return fbank(samples, cfg)
    raise ValueError(f"unknown feature kind {feature_kind!r}")


def mvn(seg, eps: float = 1e-12):
    """Standardise every frequency bin (row) over time.

    Population standard deviation. A row whose spread is within ``eps`` of
    its magnitude is treated as constant and mapped to zeros. Accepts
    either a :class:`FeatureSegment` or a bare ``[F, T]`` array and returns
    the same kind.
    """
    values = seg.values if isinstance(seg, FeatureSegment) else np.asarray(seg, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] < 2:
        raise ValueError(f"mvn needs a [F, T] matrix with T >= 2, got {values.shape}")
    mean = values.mean(axis=1, keepdims=True)
    centred = values - mean
    std = np.sqrt((centred**2).mean(axis=1, keepdims=True))
    spread = values.max(axis=1, keepdims=True) - values.min(axis=1, keepdims=True)
    constant = spread <= eps * np.maximum(1.0, np.abs(mean))
    out = np.where(constant, 0.0, centred / np.where(constant, 1.0, std))
    if isinstance(seg, FeatureSegment):
        return FeatureSegment(out, seg.feature_kind, seg.sample_rate_hz)
    return out


def crop(samples, offset_s: float, length_s: float = SEGMENT_S, sample_rate: int = SAMPLE_RATE):
    """Exact-length waveform slice starting at ``offset_s`` seconds."""
    start = int(round(offset_s * sample_rate))
    length = int(round(length_s * sample_rate))
    if offset_s < 0 or start + length > len(samples):
        raise ValueError(
            f"crop [{offset_s:.3f}s, +{length_s:.3f}s) outside signal of "
            f"{len(samples) / sample_rate:.3f}s"
        )
    return samples[start : start + length]


def crop_offsets(duration_s: float, n: int = 10, length_s: float = SEGMENT_S) -> np.ndarray:
    """Evenly spaced offsets for ``n`` crops covering the whole utterance."""
    if duration_s < length_s:
        raise ValueError(f"utterance of {duration_s:.3f}s shorter than {length_s}s crop")
    return np.linspace(0.0, duration_s - length_s, n)


def crop_features(full, offset_s: float, length_s: float = SEGMENT_S, cfg: DspConfig = DspConfig()):
    """Frames of a waveform crop, sliced from precomputed full-utterance features.

    Because frames are unpadded, the features of a crop starting on a hop
    boundary are exactly a column slice of the full-utterance features. The
    offset is snapped to the nearest hop.
    """
    values = full.values if isinstance(full, FeatureSegment) else full
    start = int(round(offset_s * cfg.sample_rate / cfg.hop_length))
    width = n_frames(int(round(length_s * cfg.sample_rate)), cfg)
    if start < 0 or start + width > values.shape[1]:
        raise ValueError(f"crop at {offset_s:.3f}s needs frames {start}..{start + width}, have {values.shape[1]}")
    return values[:, start : start + width]
