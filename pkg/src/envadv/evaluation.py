"""Identification accuracy, 10-crop pair scoring, EER and the environment probe.

Scores are distances: lower means more similar. A trial is accepted as a
target when its score is at or below the decision threshold.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import signal

from .features import FeatureBank

N_CROPS = 10


class _eval_mode:
    """Put a model in eval mode under no_grad, restoring its previous mode."""

    def __init__(self, model):
        self.model = model

    def __enter__(self):
        self.was_training = self.model.training
        self.no_grad = torch.no_grad()
        self.no_grad.__enter__()
        self.model.eval()
        return self.model

    def __exit__(self, *exc):
        self.model.train(self.was_training)
        self.no_grad.__exit__(*exc)


def _batched(model_fn, crops, batch_size):
    outs = [model_fn(torch.from_numpy(crops[i : i + batch_size]).unsqueeze(1)) for i in range(0, len(crops), batch_size)]
    return [torch.cat(o).double().numpy() for o in zip(*outs)]


@dataclass
class CropOutputs:
    """Per-utterance outputs over evenly spaced crops.

    ``logits`` are averaged over crops; ``speaker`` and ``verif`` hold the
    ``[n_crops, D]`` pooled and verification-head embeddings (``verif`` is
    ``speaker`` when the model has no verification head).
    """

    logits: dict
    speaker: dict
    verif: dict


def crop_outputs(model, bank: FeatureBank, utt_ids, n_crops=N_CROPS, batch_size=128) -> CropOutputs:
    short = [u for u in utt_ids if bank.manifest.by_id[u].duration_s < 2.0]
    if short:
        raise ValueError(f"utterances shorter than 2 s cannot be scored: {short[:5]}")
    uniq = list(dict.fromkeys(utt_ids))
    if not uniq:
        return CropOutputs({}, {}, {})
    crops = np.concatenate([bank.crops(u, n_crops) for u in uniq])

    def fn(x):
        logits, s = model(x)
        v = model.verif_head(s) if model.verif_head is not None else s
        return logits, s, v

    with _eval_mode(model):
        logits, s, v = _batched(fn, crops, batch_size)
    logits = logits.reshape(len(uniq), n_crops, -1).mean(axis=1)
    s = s.reshape(len(uniq), n_crops, -1)
    v = v.reshape(len(uniq), n_crops, -1)
    return CropOutputs(
        {u: logits[i] for i, u in enumerate(uniq)},
        {u: s[i] for i, u in enumerate(uniq)},
        {u: v[i] for i, u in enumerate(uniq)},
    )


def topk_accuracy(logits, labels, ks=(1, 5)):
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    order = np.argsort(-logits, axis=1, kind="stable")
    out = []
    for k in ks:
        out.append(float(np.mean(np.any(order[:, :k] == labels[:, None], axis=1))) if len(labels) else 0.0)
    return tuple(out)


def eval_identification(model, bank: FeatureBank, test_manifest, label_of=None, n_crops=N_CROPS, outputs=None):
    """Top-1 / top-5 closed-set accuracy; returns ``(top1, top5, n_skipped)``.

    Logits are averaged over ``n_crops`` evenly spaced 2 s crops before
    ranking. Utterances shorter than one crop are skipped. ``label_of``
    maps speaker id to class index and defaults to the test manifest's own
    (lexicographic) mapping, which matches training when the dev and test
    speaker sets are identical.
    """
    label_of = label_of or test_manifest.label_of
    ids = [u.utt_id for u in test_manifest.utterances]
    kept = [u for u in ids if test_manifest.by_id[u].duration_s >= 2.0]
    outputs = outputs or crop_outputs(model, bank, kept, n_crops)
    logits = np.stack([outputs.logits[u] for u in kept]) if kept else np.zeros((0, 1))
    labels = np.array([label_of[test_manifest.by_id[u].speaker_id] for u in kept], dtype=int)
    top1, top5 = topk_accuracy(logits, labels)
    return top1, top5, len(ids) - len(kept)


def crop_embeddings(model, bank: FeatureBank, utt_ids, n_crops=N_CROPS, use_verif_head=True):
    """``{utt_id: [n_crops, D]}`` embeddings from evenly spaced crops."""
    out = crop_outputs(model, bank, utt_ids, n_crops)
    return out.verif if use_verif_head else out.speaker


def pair_distance(emb_a, emb_b, metric="euclidean_l2norm") -> float:
    """Mean over all crop-to-crop distances between two utterances."""
    a = np.asarray(emb_a, dtype=np.float64)
    b = np.asarray(emb_b, dtype=np.float64)
    if metric in ("euclidean_l2norm", "cosine"):
        a = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
        b = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    if metric == "cosine":
        d = 1.0 - a @ b.T
    elif metric in ("euclidean", "euclidean_l2norm"):
        d = np.sqrt(np.maximum((a**2).sum(1)[:, None] + (b**2).sum(1)[None, :] - 2.0 * a @ b.T, 0.0))
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return float(d.mean())


def score_pair(model, bank: FeatureBank, utt_a, utt_b, metric="euclidean_l2norm", use_verif_head=True) -> float:
    emb = crop_embeddings(model, bank, [utt_a, utt_b], use_verif_head=use_verif_head)
    return pair_distance(emb[utt_a], emb[utt_b], metric)


def score_trials(model, bank: FeatureBank, trials, metric="euclidean_l2norm", use_verif_head=True,
                 embeddings=None) -> np.ndarray:
    """Distance for every trial; ``embeddings`` may supply precomputed crop embeddings."""
    if embeddings is None:
        ids = [u for _, a, b in trials.pairs for u in (a, b)]
        embeddings = crop_embeddings(model, bank, ids, use_verif_head=use_verif_head)
    emb = embeddings
    return np.array([pair_distance(emb[a], emb[b], metric) for _, a, b in trials.pairs])


def operating_points(labels, scores):
    """False-accept and false-reject rates at every distinct threshold.

    The first point is the threshold below every score (nothing accepted).
    """
    labels = np.asarray(labels, dtype=int)
    scores = np.asarray(scores, dtype=np.float64)
    n_tgt = int(labels.sum())
    n_non = len(labels) - n_tgt
    if n_tgt == 0 or n_non == 0:
        raise ValueError("EER needs both target and non-target trials")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    order = np.argsort(scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tgt_le = np.cumsum(y)[last]
    non_le = np.cumsum(1 - y)[last]
    far = np.r_[0.0, non_le / n_non]
    frr = np.r_[1.0, 1.0 - tgt_le / n_tgt]
    return far, frr, np.r_[-np.inf, s[last]]


def eer_from_rates(far, frr) -> float:
    diff = np.asarray(far) - np.asarray(frr)
    k = int(np.argmax(diff >= 0))
    if k == 0:
        return float(far[0])
    t = -diff[k - 1] / (diff[k] - diff[k - 1])
    return float(far[k - 1] + t * (far[k] - far[k - 1]))


def compute_eer(labels, scores) -> float:
    """Equal error rate with linear interpolation between the two operating
    points that bracket FAR = FRR."""
    far, frr, _ = operating_points(labels, scores)
    return eer_from_rates(far, frr)


# -- score files ---------------------------------------------------------------


def write_scores(path, labels, scores) -> None:
    Path(path).write_text(
        "".join(f"{i} {int(lab)} {float(s):.17g}\n" for i, (lab, s) in enumerate(zip(labels, scores)))
    )


def read_scores(path):
    rows = [line.split() for line in Path(path).read_text().splitlines() if line.strip()]
    rows.sort(key=lambda r: int(r[0]))
    return np.array([int(r[1]) for r in rows]), np.array([float(r[2]) for r in rows])


@dataclass
class EvalReport:
    task: str
    top1: float = float("nan")
    top5: float = float("nan")
    eer: float = float("nan")
    n_trials: int = 0
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    def kv_lines(self):
        fields = {"task": self.task, "top1": self.top1, "top5": self.top5, "eer": self.eer,
                  "n_trials": self.n_trials, "config_hash": self.config_hash, **self.extra}
        return " ".join(f"{k}={_fmt(v)}" for k, v in fields.items())

    def table(self):
        rows = [("task", self.task), ("top-1", _pct(self.top1)), ("top-5", _pct(self.top5)),
                ("EER", _pct(self.eer)), ("trials", str(self.n_trials))]
        rows += [(k, _fmt(v)) for k, v in self.extra.items()]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def _pct(v):
    return "-" if v != v else f"{100 * v:.2f}%"


# -- environment probe and channel perturbation --------------------------------


def eval_env_probe(model, bank: FeatureBank, trials, metric="euclidean_l2norm", use_verif_head=False,
                   embeddings=None) -> float:
    """EER of predicting same-video membership from speaker-embedding distances.

    Higher means less environment information in the embedding.
    """
    scores = score_trials(model, bank, trials, metric, use_verif_head=use_verif_head, embeddings=embeddings)
    return compute_eer(trials.labels, scores)


@dataclass
class PerturbSpec:
    """Fixed FIR channel plus white noise at a given SNR, applied to test audio.

    ``fir`` gives explicit taps; otherwise ``lowpass_hz`` designs a
    windowed-sinc lowpass. ``snr_db = inf`` adds no noise.
    """

    lowpass_hz: float | None = None
    fir: tuple | None = None
    snr_db: float = float("inf")
    seed: int = 0
    numtaps: int = 101

    def taps(self, sample_rate=16000):
        if self.fir is not None:
            return np.asarray(self.fir, dtype=np.float64)
        if self.lowpass_hz is not None:
            return signal.firwin(self.numtaps, self.lowpass_hz, fs=sample_rate)
        return np.array([1.0])

    def __call__(self, samples, utt):
        taps = self.taps()
        y = samples if (len(taps) == 1 and taps[0] == 1.0) else signal.lfilter(taps, [1.0], samples)
        if np.isfinite(self.snr_db):
            rng = np.random.default_rng([self.seed, zlib.crc32(utt.utt_id.encode())])
            p = np.mean(y**2)
            y = y + rng.standard_normal(len(y)) * np.sqrt(p / 10.0 ** (self.snr_db / 10.0))
        return y


def channel_perturb_eval(model, manifest, trials, perturb: PerturbSpec, feature_kind=None, dsp_cfg=None,
                         clean_bank=None, metric="euclidean_l2norm", clean_embeddings=None):
    """Verification EER on clean and perturbed test audio.

    Returns ``(clean_eer, perturbed_eer)``.
    """
    from . import dsp

    feature_kind = feature_kind or model.cfg.feature_kind
    dsp_cfg = dsp_cfg or dsp.DspConfig()
    clean_bank = clean_bank or FeatureBank(manifest, feature_kind, dsp_cfg)
    noisy_bank = FeatureBank(manifest, feature_kind, dsp_cfg, transform=perturb)
    clean = compute_eer(trials.labels, score_trials(model, clean_bank, trials, metric, embeddings=clean_embeddings))
    noisy = compute_eer(trials.labels, score_trials(model, noisy_bank, trials, metric))
    return clean, noisy
