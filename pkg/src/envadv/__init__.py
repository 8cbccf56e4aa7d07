"""Environment-adversarial training of speaker embeddings."""

from .corpus import Manifest, make_splits, sample_triplet_batch, scan_corpus
from .dsp import DspConfig, extract, fbank, mvn, spectrogram
from .evaluation import EvalReport, PerturbSpec, channel_perturb_eval, compute_eer, eval_env_probe, eval_identification
from .features import FeatureBank
from .losses import LossConfig, confusion_loss, contrastive_loss, env_triplet_loss, speaker_phase_loss
from .nets import SpeakerModel, TrunkConfig
from .synthgen import SynthSpec, generate
from .trainer import TrainConfig, VerifConfig, train, train_verif_head

__all__ = [
    "DspConfig", "EvalReport", "FeatureBank", "LossConfig", "Manifest", "PerturbSpec", "SpeakerModel",
    "SynthSpec", "TrainConfig", "TrunkConfig", "VerifConfig", "channel_perturb_eval", "compute_eer",
    "confusion_loss", "contrastive_loss", "env_triplet_loss", "eval_env_probe", "eval_identification",
    "extract", "fbank", "generate", "make_splits", "mvn", "sample_triplet_batch", "scan_corpus",
    "speaker_phase_loss", "spectrogram", "train", "train_verif_head",
]
