"""Deterministic toy corpus: synthetic speakers recorded in synthetic environments.

Each speaker is a harmonic source with its own pitch and a small inventory
of formant patterns ("vowels") that it strings together into syllables.
Each video of a speaker is recorded through one environment: an FIR
channel drawn from a shared pool of prototypes (plus per-video jitter) and
a coloured noise floor at 15-25 dB SNR. The on-disk layout is
``speaker/video/utterance.wav`` so the result can be scanned like
VoxCeleb.

All randomness is derived from ``(seed, speaker, video, utterance)``, so
files can be generated in any order or in parallel with identical output.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import signal

from . import dsp
from .corpus import Manifest, scan_corpus

log = logging.getLogger(__name__)

SPEC_FILE = "synth_spec.json"
_VIDEO_ALPHABET = np.array(list("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_-"))

# Stream tags for np.random.default_rng([seed, TAG, ...]).
_SPEAKER, _VIDEO, _UTT, _POOL, _NAMES = range(5)


@dataclass(frozen=True)
class SynthSpec:
    n_speakers: int = 20
    n_envs_per_speaker: int = 4
    utts_per_env: int = 30
    utt_len_s: float = 3.0
    sample_rate: int = dsp.SAMPLE_RATE
    seed: int = 0
    n_prototypes: int = 6
    snr_db: tuple = (15.0, 25.0)
    f0_base_hz: float = 90.0
    f0_step_hz: float = 9.0

    def validate(self) -> None:
        if self.n_speakers < 1 or self.utts_per_env < 1:
            raise ValueError("need at least one speaker and one utterance per environment")
        if self.n_envs_per_speaker < 2:
            raise ValueError("n_envs_per_speaker must be >= 2 so every speaker has a negative video")
        if self.utt_len_s < 2.5:
            raise ValueError("utt_len_s must be >= 2.5")
        if not 4 <= self.n_prototypes <= 8:
            raise ValueError("n_prototypes must be in 4..8")
        if self.f0_step_hz < 8.0:
            raise ValueError("f0_step_hz must be >= 8 Hz")
        lo, hi = self.snr_db
        if not lo <= hi:
            raise ValueError("snr_db must be (low, high)")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "snr_db" in d:
            d["snr_db"] = tuple(d["snr_db"])
        return cls(**d)


@dataclass
class Voice:
    f0: float
    vowels: np.ndarray  # [n_vowels, 3] formant centre frequencies (Hz)
    bandwidths: np.ndarray  # [3]
    tilt: float  # spectral slope, dB per octave


@dataclass
class Environment:
    fir: np.ndarray
    noise_fir: np.ndarray
    snr_db: float
    prototype: int


def _rng(spec: SynthSpec, *keys):
    return np.random.default_rng([spec.seed, *keys])


def make_voice(spec: SynthSpec, speaker: int) -> Voice:
    rng = _rng(spec, _SPEAKER, speaker)
    f0 = spec.f0_base_hz + spec.f0_step_hz * speaker + rng.uniform(-0.5, 0.5)
    n_vowels = 4
    f1 = rng.uniform(300, 850, n_vowels)
    f2 = rng.uniform(900, 2300, n_vowels)
    f3 = rng.uniform(2400, 3400, n_vowels)
    vowels = np.stack([f1, f2, f3], axis=1)
    bandwidths = rng.uniform([60, 80, 120], [110, 160, 220])
    return Voice(f0=f0, vowels=vowels, bandwidths=bandwidths, tilt=rng.uniform(-9.0, -4.0))


def _prototype_gains(spec: SynthSpec):
    """Shared pool of channel magnitude responses on a fixed frequency grid."""
    rng = _rng(spec, _POOL)
    grid = np.linspace(0.0, 1.0, 33)  # fraction of Nyquist
    protos = []
    for k in range(spec.n_prototypes):
        kind = k % 4
        if kind == 0:  # lowpass, telephone-ish
            cut = rng.uniform(0.35, 0.6)
            g = 1.0 / (1.0 + (grid / cut) ** 8)
        elif kind == 1:  # highpass / thin laptop mic
            cut = rng.uniform(0.05, 0.15)
            g = 1.0 / (1.0 + (cut / np.maximum(grid, 1e-3)) ** 4)
        elif kind == 2:  # resonant room / band emphasis
            centre = rng.uniform(0.15, 0.5)
            g = 0.4 + 1.6 * np.exp(-((grid - centre) / 0.08) ** 2)
        else:  # tilted, muffled
            g = 10.0 ** (rng.uniform(-1.2, -0.6) * grid)
        protos.append(g)
    noise = []
    for k in range(spec.n_prototypes):
        colour = rng.uniform(-1.5, 0.5)  # log10 gain across the band
        bump = rng.uniform(0.1, 0.9)
        noise.append(10.0 ** (colour * grid) + 1.5 * np.exp(-((grid - bump) / 0.1) ** 2))
    return grid, protos, noise


def make_environment(spec: SynthSpec, speaker: int, video: int) -> Environment:
    grid, protos, noise = _prototype_gains(spec)
    order = _rng(spec, _VIDEO, speaker).permutation(spec.n_prototypes)
    proto = int(order[video % spec.n_prototypes])
    rng = _rng(spec, _VIDEO, speaker, video)
    jitter = np.exp(rng.normal(0.0, 0.15, grid.size))
    fir = signal.firwin2(65, grid, protos[proto] * jitter)
    noise_fir = signal.firwin2(65, grid, noise[proto] * np.exp(rng.normal(0.0, 0.15, grid.size)))
    snr = rng.uniform(*spec.snr_db)
    return Environment(fir=fir, noise_fir=noise_fir, snr_db=float(snr), prototype=proto)


def _envelope(freqs, formants, bandwidths, tilt):
    amp = np.zeros_like(freqs)
    for fc, bw in zip(formants, bandwidths):
        amp += 1.0 / (1.0 + ((freqs - fc) / (bw / 2.0)) ** 2)
    octaves = np.log2(np.maximum(freqs, 50.0) / 100.0)
    return (amp + 0.02) * 10.0 ** (tilt * octaves / 20.0)


def synth_source(voice: Voice, n_samples: int, sr: int, rng) -> np.ndarray:
    """Dry speech-like signal: voiced syllables separated by short pauses."""
    out = np.zeros(n_samples)
    f0_utt = voice.f0 * (1.0 + rng.normal(0.0, 0.015))
    formant_scale = 1.0 + rng.normal(0.0, 0.03)
    pos = int(rng.uniform(0.0, 0.1) * sr)
    nyquist = sr / 2.0
    while pos < n_samples:
        dur = int(rng.uniform(0.12, 0.3) * sr)
        if rng.random() < 0.22:
            pos += dur // 2  # pause
            continue
        end = min(pos + dur, n_samples)
        m = end - pos
        t = np.arange(m) / sr
        vowel = voice.vowels[rng.integers(len(voice.vowels))] * formant_scale
        slope = rng.uniform(-0.08, 0.08)
        f0 = f0_utt * (1.0 + slope * t / max(t[-1], 1e-3))
        phase = 2.0 * np.pi * np.cumsum(f0) / sr
        n_harm = int(0.95 * nyquist / (f0_utt * 1.1))
        k = np.arange(1, n_harm + 1)
        amps = _envelope(k * f0_utt, vowel, voice.bandwidths, voice.tilt)
        amps[k * f0.max() >= 0.95 * nyquist] = 0.0
        syll = np.sin(np.outer(phase, k) + rng.uniform(0, 2 * np.pi, n_harm)) @ amps
        ramp = min(int(0.015 * sr), m // 2)
        win = np.ones(m)
        if ramp > 0:
            win[:ramp] = np.linspace(0.0, 1.0, ramp)
            win[m - ramp :] = np.linspace(1.0, 0.0, ramp)
        out[pos:end] += syll * win * rng.uniform(0.6, 1.0)
        pos = end + int(rng.uniform(0.0, 0.05) * sr)
    return out


def record(dry: np.ndarray, env: Environment, rng) -> np.ndarray:
    """Pass a dry signal through an environment's channel and add its noise."""
    wet = signal.lfilter(env.fir, [1.0], dry)
    noise = signal.lfilter(env.noise_fir, [1.0], rng.standard_normal(len(dry)))
    p_sig = np.mean(wet**2)
    p_noise = np.mean(noise**2)
    if p_sig > 0 and p_noise > 0:
        noise *= np.sqrt(p_sig / (p_noise * 10.0 ** (env.snr_db / 10.0)))
    return wet + noise


def render_utterance(spec: SynthSpec, speaker: int, video: int, utt: int, voice=None, env=None):
    voice = voice or make_voice(spec, speaker)
    env = env or make_environment(spec, speaker, video)
    rng = _rng(spec, _UTT, speaker, video, utt)
    n = int(round(spec.utt_len_s * spec.sample_rate))
    y = record(synth_source(voice, n, spec.sample_rate, rng), env, rng)
    peak = np.max(np.abs(y))
    return y * (0.5 / peak) if peak > 0 else y


def speaker_name(i: int) -> str:
    return f"id{10001 + i}"


def video_names(spec: SynthSpec, speaker: int):
    rng = _rng(spec, _NAMES, speaker)
    names = []
    while len(names) < spec.n_envs_per_speaker:
        name = "".join(rng.choice(_VIDEO_ALPHABET, 11))
        if name not in names:
            names.append(name)
    return names


def generate(spec: SynthSpec, out_dir, workers: int = 1) -> Manifest:
    """Write the corpus under ``out_dir`` and return its manifest."""
    spec.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = []
    for s in range(spec.n_speakers):
        voice = make_voice(spec, s)
        for v, vname in enumerate(video_names(spec, s)):
            env = make_environment(spec, s, v)
            vdir = out_dir / speaker_name(s) / vname
            vdir.mkdir(parents=True, exist_ok=True)
            for u in range(spec.utts_per_env):
                jobs.append((s, v, u, voice, env, vdir / f"{u + 1:05d}.wav"))

    def _write(job):
        s, v, u, voice, env, path = job
        dsp.write_waveform(path, render_utterance(spec, s, v, u, voice, env), spec.sample_rate)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(_write, jobs))
    else:
        for job in jobs:
            _write(job)
    (out_dir / SPEC_FILE).write_text(json.dumps(asdict(spec), indent=2, sort_keys=True) + "\n")
    log.info("wrote %d utterances to %s", len(jobs), out_dir)
    return scan_corpus(out_dir)


def read_spec(corpus_root) -> SynthSpec:
    return SynthSpec.from_dict(json.loads((Path(corpus_root) / SPEC_FILE).read_text()))


def env_separability(manifest: Manifest, folds: int = 5, seed: int = 0) -> float:
    """Mean within-speaker accuracy of a linear classifier predicting the video.

    Features are the per-bin means of the un-normalised 40-d log filterbank,
    i.e. exactly the information a channel leaves behind. Used as a sanity
    check that the environments carry detectable signal.
    """
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import cross_val_score
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    scores = []
    for spk in manifest.speakers:
        utts = [u for u in manifest.utterances if u.speaker_id == spk]
        x = np.stack([dsp.fbank(dsp.load_waveform(u.path)[0]).values.mean(axis=1) for u in utts])
        y = np.array([u.video_id for u in utts])
        clf = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000))
        n_folds = min(folds, min(np.unique(y, return_counts=True)[1]))
        scores.append(cross_val_score(clf, x, y, cv=n_folds).mean())
    return float(np.mean(scores))
