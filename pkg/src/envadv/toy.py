"""Desk-scale adversarial experiment on the synthetic corpus.

Trains a half-width VGG-M-40 with a given confusion weight and reports
identification accuracy, environment-probe EER and verification EER on
clean and channel-perturbed test audio. Shared by the acceptance tests and
the demo scripts.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from . import corpus, evaluation
from .features import FeatureBank
from .nets import TrunkConfig
from .synthgen import SynthSpec
from .trainer import TrainConfig, train

TOY_SPEC = SynthSpec(n_speakers=20, n_envs_per_speaker=4, utts_per_env=30, utt_len_s=3.0, seed=7)
TEST_FRACTION = 0.1
SPLIT_SEED = 0
PERTURB = evaluation.PerturbSpec(lowpass_hz=2500.0, snr_db=10.0)
N_PROBE_TRIALS = 400
N_VERIF_TRIALS = 600


def toy_trunk() -> TrunkConfig:
    return TrunkConfig(arch="vggm40", pool="tap", width=0.5, env_normalize=True)


def toy_train_config(seed: int, alpha: float, **kw) -> TrainConfig:
    base = dict(lr0=0.01, max_epochs=15, patience_epochs=15, n_speakers_per_batch=16, steps_per_epoch=10,
                val_crops=3, seed=seed, alpha=alpha)
    base.update(kw)
    return TrainConfig(**base)


def prepare(manifest: corpus.Manifest) -> corpus.Manifest:
    return corpus.make_splits(manifest, "iden", seed=SPLIT_SEED, test_fraction=TEST_FRACTION)


@dataclass
class ToyResult:
    seed: int
    alpha: float
    top1: float
    top5: float
    env_eer: float
    clean_eer: float
    perturbed_eer: float
    train_s: float
    eval_s: float
    metrics_log: list = field(repr=False, default_factory=list)

    @property
    def degradation(self) -> float:
        return self.perturbed_eer - self.clean_eer


def run(split: corpus.Manifest, seed: int, alpha: float, bank: FeatureBank | None = None, **train_kw) -> ToyResult:
    """Train one toy model on an iden-split manifest and evaluate it."""
    bank = bank or FeatureBank(split, "fbank40")
    t0 = time.perf_counter()
    model, _ = train(split, toy_trunk(), toy_train_config(seed, alpha, **train_kw), bank=bank)
    t1 = time.perf_counter()

    test = split.subset("test_iden")
    probe = corpus.build_env_probe_trials(test, N_PROBE_TRIALS, seed=0)
    verif = corpus.build_verif_trials(test, N_VERIF_TRIALS, seed=0)
    outputs = evaluation.crop_outputs(model, bank, [u.utt_id for u in test])
    top1, top5, _ = evaluation.eval_identification(model, bank, test, split.subset("dev_iden").label_of,
                                                   outputs=outputs)
    env_eer = evaluation.eval_env_probe(model, bank, probe, embeddings=outputs.speaker)
    clean, perturbed = evaluation.channel_perturb_eval(model, split, verif, PERTURB, clean_bank=bank,
                                                       clean_embeddings=outputs.verif)
    t2 = time.perf_counter()
    return ToyResult(seed, alpha, top1, top5, env_eer, clean, perturbed, t1 - t0, t2 - t1,
                     list(model.metrics_log))
