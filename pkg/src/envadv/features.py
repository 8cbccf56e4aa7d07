"""Feature access for training and evaluation.

A :class:`FeatureBank` computes each utterance's un-normalised features
once and serves fixed-length crops from them. Since frames are unpadded and
crops start on the 10 ms hop grid, a crop sliced from the full-utterance
features is identical to extracting features from the cropped waveform.
"""

from __future__ import annotations

import os
import threading
from pathlib import Path

import numpy as np
import torch

from . import dsp

CACHE_ENV = "ENVADV_CACHE_DIR"


class FeatureBank:
    def __init__(self, manifest, feature_kind, cfg: dsp.DspConfig = dsp.DspConfig(), cache_dir=None,
                 transform=None, memory=True):
        """``transform(samples, utt)`` is applied to each waveform before
        feature extraction (used for channel perturbation). The disk cache is
        disabled when a transform is set."""
        self.manifest = manifest
        self.feature_kind = feature_kind
        self.cfg = cfg
        self.transform = transform
        if cache_dir is None:
            cache_dir = os.environ.get(CACHE_ENV)
        self.cache_dir = Path(cache_dir) / cfg.hash() if cache_dir and transform is None else None
        self.memory = memory
        self._mem = {}
        self._lock = threading.Lock()

    def _cache_path(self, utt_id):
        return self.cache_dir / f"{utt_id.replace('/', '__')}.{self.feature_kind}.npy"

    def full(self, utt_id) -> np.ndarray:
        """Un-normalised ``[F, T]`` features of the whole utterance (float32)."""
        hit = self._mem.get(utt_id)
        if hit is not None:
            return hit
        feats = None
        if self.cache_dir is not None and self._cache_path(utt_id).exists():
            feats = np.load(self._cache_path(utt_id))
        if feats is None:
            utt = self.manifest.by_id[utt_id]
            samples, _ = dsp.load_waveform(utt.path)
            if self.transform is not None:
                samples = self.transform(samples, utt)
            feats = dsp.extract(samples, self.feature_kind, self.cfg).values.astype(np.float32)
            if self.cache_dir is not None:
                self.cache_dir.mkdir(parents=True, exist_ok=True)
                tmp = self._cache_path(utt_id).with_suffix(f".{threading.get_ident()}.tmp.npy")
                np.save(tmp, feats)
                os.replace(tmp, self._cache_path(utt_id))
        if self.memory:
            with self._lock:
                self._mem[utt_id] = feats
        return feats

    def segment(self, utt_id, offset_s, length_s=dsp.SEGMENT_S) -> np.ndarray:
        """MVN-normalised crop, ``[F, T]`` float32."""
        full = self.full(utt_id)
        if self.cfg.utterance_mvn:
            full = dsp.mvn(full.astype(np.float64))
            return dsp.crop_features(full, offset_s, length_s, self.cfg).astype(np.float32)
        seg = dsp.crop_features(full, offset_s, length_s, self.cfg)
        return dsp.mvn(seg.astype(np.float64)).astype(np.float32)

    def crops(self, utt_id, n=10, length_s=dsp.SEGMENT_S) -> np.ndarray:
        utt = self.manifest.by_id[utt_id]
        duration = self.full(utt_id).shape[1]  # frames; offsets are clipped onto them below
        offsets = dsp.crop_offsets(utt.duration_s, n, length_s)
        max_start = (duration - dsp.n_frames(int(round(length_s * self.cfg.sample_rate)), self.cfg)) * (
            self.cfg.hop_length / self.cfg.sample_rate
        )
        return np.stack([self.segment(utt_id, min(o, max_start), length_s) for o in offsets])


def triplet_tensor(bank: FeatureBank, triplets, length_s=dsp.SEGMENT_S):
    """Stack a triplet batch as ``[3N, 1, F, T]``: anchors, then positives, then negatives."""
    slots = [t.anchor for t in triplets] + [t.positive for t in triplets] + [t.negative for t in triplets]
    x = np.stack([bank.segment(u, o, length_s) for u, o in slots])
    return torch.from_numpy(x).unsqueeze(1)
