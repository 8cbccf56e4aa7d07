"""Two-phase environment-adversarial training.

Every minibatch of speaker triplets is used twice:

1. environment phase -- the environment network learns, with a triplet
   loss on its outputs, to tell same-video pairs from cross-video pairs.
   Only its parameters move.
2. speaker phase -- trunk and speaker classifier minimise cross-entropy
   plus ``alpha`` times the confusion loss computed through the (frozen)
   environment network. Only trunk and classifier parameters move.

Batch-norm running statistics follow the same ownership: the trunk's are
updated only by the speaker phase, the environment network's only by the
environment phase.
"""

from __future__ import annotations

import contextlib
import logging
import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import corpus, dsp
from .checkpoint import load_checkpoint, save_checkpoint
from .evaluation import eval_identification
from .features import FeatureBank, triplet_tensor
from .losses import LossConfig, contrastive_loss, env_triplet_loss, speaker_phase_loss
from .nets import SpeakerModel, TrunkConfig, parameter_checksum

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    lr_decay_per_epoch: float = 0.95
    max_epochs: int = 100
    patience_epochs: int = 10
    n_speakers_per_batch: int = 64
    alpha: float = 0.0
    margin: float = 0.3
    seed: int = 0
    env_lr: float | None = None  # defaults to lr0; follows the same decay
    momentum: float = 0.9
    weight_decay: float = 0.0
    steps_per_epoch: int | None = None  # default: one pass over the training segments
    val_fraction: float = 0.05
    val_crops: int = 10
    seg_len_s: float = 2.0
    phase_order: str = "env_first"
    env_phase: bool = True
    workers: int = 0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.lr_decay_per_epoch <= 1:
            raise ValueError("lr_decay_per_epoch must be in (0, 1]")
        if self.patience_epochs > self.max_epochs:
            raise ValueError("patience_epochs must not exceed max_epochs")
        if self.phase_order not in ("env_first", "speaker_first"):
            raise ValueError(f"unknown phase_order {self.phase_order!r}")

    def lr_at(self, epoch: int) -> float:
        return self.lr0 * self.lr_decay_per_epoch**epoch

    def env_lr_at(self, epoch: int) -> float:
        return (self.env_lr if self.env_lr is not None else self.lr0) * self.lr_decay_per_epoch**epoch


@dataclass
class TrainState:
    epoch: int = -1
    best_val_metric: float = float("-inf")
    best_epoch: int = -1
    epochs_since_improve: int = 0
    step: int = 0
    history: list = field(default_factory=list)


@contextlib.contextmanager
def frozen_bn(*modules):
    """Batch norm keeps using batch statistics but stops updating its running buffers."""
    bns = [m for mod in modules for m in mod.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    saved = [m.track_running_stats for m in bns]
    for m in bns:
        m.track_running_stats = False
    try:
        yield
    finally:
        for m, s in zip(bns, saved):
            m.track_running_stats = s


@contextlib.contextmanager
def requires_grad(params, flag):
    params = list(params)
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(flag)
    try:
        yield
    finally:
        for p, s in zip(params, saved):
            p.requires_grad_(s)


def make_optimizers(model: SpeakerModel, cfg: TrainConfig):
    speaker = torch.optim.SGD(
        model.trunk_parameters() + list(model.speaker_head.parameters()),
        lr=cfg.lr_at(0), momentum=cfg.momentum, weight_decay=cfg.weight_decay,
    )
    env = torch.optim.SGD(model.env_net.parameters(), lr=cfg.env_lr_at(0), momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    return {"speaker": speaker, "env": env}


def set_lr(opt, lr):
    for g in opt.param_groups:
        g["lr"] = lr


def env_phase(model: SpeakerModel, s, n, optimizer, margin) -> float:
    """Update only the environment network from detached speaker embeddings."""
    model.env_net.train()
    e = model.env_net(s.detach())
    loss = env_triplet_loss(*e.split(n), margin=margin)
    if not torch.isfinite(loss):
        raise TrainingAborted(f"non-finite environment loss {loss.item()}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return loss.item()


def speaker_phase(model: SpeakerModel, logits, s, labels, n, optimizer, alpha):
    """Update trunk and speaker head; gradients pass through the frozen env net."""
    model.env_net.train()
    with frozen_bn(model.env_net), requires_grad(model.env_net.parameters(), False):
        e = model.env_net(s)
        total, ce, kl = speaker_phase_loss(logits, labels, *e.split(n), alpha=alpha)
        if not torch.isfinite(total):
            raise TrainingAborted(f"non-finite speaker loss {total.item()}")
        optimizer.zero_grad(set_to_none=True)
        total.backward()
    optimizer.step()
    return total.item(), ce.item(), kl.item()


def train_step(model: SpeakerModel, x, labels, optimizers, loss_cfg: LossConfig, phase_order="env_first",
               run_env_phase=True, batch_ids=None, probe=None):
    """One adversarial step on a triplet batch ``x`` laid out as [anchors; positives; negatives].

    The trunk runs forward once in training mode; the environment phase
    consumes a detached copy of the pooled embeddings, so it cannot reach
    trunk parameters. ``probe(name)`` is called after each phase (used by
    tests to checksum parameters).
    """
    n = x.shape[0] // 3
    model.trunk.train()
    model.pool.train()
    model.speaker_head.train()
    try:
        logits, s = model(x)
        l_e = float("nan")
        if run_env_phase and phase_order == "env_first":
            l_e = env_phase(model, s, n, optimizers["env"], loss_cfg.margin_m)
            probe and probe("env")
        l_s, ce, kl = speaker_phase(model, logits, s, labels, n, optimizers["speaker"], loss_cfg.alpha)
        probe and probe("speaker")
        if run_env_phase and phase_order == "speaker_first":
            with torch.no_grad(), frozen_bn(model.trunk, model.pool):
                s = model.embed(x)
            l_e = env_phase(model, s, n, optimizers["env"], loss_cfg.margin_m)
            probe and probe("env")
    except (TrainingAborted, ValueError) as exc:
        raise TrainingAborted(f"{exc}; batch utterances: {batch_ids}") from exc
    return {"L_e": l_e, "L_s": l_s, "CE": ce, "KL": kl}


def split_validation(dev: corpus.Manifest, fraction: float, seed: int):
    """Carve a speaker-stratified validation subset out of the dev utterances."""
    rng = np.random.default_rng([seed, 7919])
    val = set()
    for spk in dev.speakers:
        ids = [u.utt_id for u in dev.utterances if u.speaker_id == spk]
        k = int(round(fraction * len(ids)))
        if 0 < k < len(ids):
            val.update(rng.choice(ids, size=k, replace=False).tolist())
    train = corpus.Manifest(u for u in dev.utterances if u.utt_id not in val)
    valm = corpus.Manifest(u for u in dev.utterances if u.utt_id in val)
    return train, valm


def dev_manifest(manifest: corpus.Manifest) -> corpus.Manifest:
    dev = manifest.subset("dev_iden", "dev_verif")
    if not len(dev):
        raise corpus.CorpusError("manifest has no dev split (run make_splits first)")
    return dev


class _BatchSource:
    """Deterministic batches: the content of step ``k`` of epoch ``e`` depends only
    on ``(seed, e, k)``, so prefetch workers cannot change it."""

    def __init__(self, train_m, bank, cfg: TrainConfig):
        self.train_m, self.bank, self.cfg = train_m, bank, cfg
        self.label_of = train_m.label_of  # same speakers as dev, so same indices

    def make(self, epoch, step):
        rng = np.random.default_rng([self.cfg.seed, epoch, step])
        triplets = corpus.sample_triplet_batch(self.train_m, self.cfg.n_speakers_per_batch, self.cfg.seg_len_s, rng)
        x = triplet_tensor(self.bank, triplets, self.cfg.seg_len_s)
        spk = torch.tensor([self.label_of[t.speaker_id] for t in triplets])
        ids = [t.anchor[0] for t in triplets]
        return x, spk.repeat(3), ids

    def epoch(self, epoch, n_steps):
        if self.cfg.workers <= 1:
            for k in range(n_steps):
                yield self.make(epoch, k)
            return
        depth = 2 * self.cfg.workers
        with ThreadPoolExecutor(self.cfg.workers) as pool:
            pending = deque(pool.submit(self.make, epoch, k) for k in range(min(n_steps, depth)))
            nxt = len(pending)
            while pending:
                batch = pending.popleft().result()
                if nxt < n_steps:
                    pending.append(pool.submit(self.make, epoch, nxt))
                    nxt += 1
                yield batch


def _fmt_metrics(d):
    return " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in d.items())


def train(manifest: corpus.Manifest, trunk_cfg: TrunkConfig, cfg: TrainConfig, loss_cfg: LossConfig | None = None,
          dsp_cfg: dsp.DspConfig = dsp.DspConfig(), out_dir=None, resume=False, bank=None, config_dict=None,
          echo=None):
    """Epoch loop with exponential learning-rate decay and early stopping.

    Returns ``(model, state)`` where ``model`` holds the best-validation
    parameters. With ``out_dir`` set, ``last.pt``, ``best.pt`` and
    ``metrics.log`` are written there and ``resume=True`` continues from
    ``last.pt``.
    """
    loss_cfg = loss_cfg or LossConfig(margin_m=cfg.margin, alpha=cfg.alpha)
    dev = dev_manifest(manifest)
    train_m, val_m = split_validation(dev, cfg.val_fraction, cfg.seed)
    trunk_cfg.n_speakers = len(dev.speakers)
    if train_m.speakers != dev.speakers:
        raise corpus.CorpusError("validation split removed every utterance of some speaker")
    bank = bank or FeatureBank(manifest, trunk_cfg.feature_kind, dsp_cfg)

    torch.manual_seed(cfg.seed)
    model = SpeakerModel(trunk_cfg)
    optimizers = make_optimizers(model, cfg)
    state = TrainState()
    out_dir = Path(out_dir) if out_dir else None
    log_lines = []
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        if resume and (out_dir / "last.pt").exists():
            model, blob = load_checkpoint(out_dir / "last.pt")
            optimizers = make_optimizers(model, cfg)
            for k, o in optimizers.items():
                o.load_state_dict(blob["optimizers"][k])
            state = TrainState(**blob["state"])
            log.info("resumed from epoch %d", state.epoch)
            if (out_dir / "metrics.log").exists():
                log_lines = (out_dir / "metrics.log").read_text().splitlines()
    hparams = {"trunk": trunk_cfg.to_dict(), "train": asdict(cfg), "loss": asdict(loss_cfg), "dsp": asdict(dsp_cfg),
               **(config_dict or {})}

    eligible = [s for s, v in train_m.eligible_videos(cfg.seg_len_s).items() if len(v) >= 2]
    if not eligible:
        raise corpus.CorpusError("no multi-video speakers available for triplet sampling")
    n_steps = cfg.steps_per_epoch or max(1, math.ceil(len(train_m) / (3 * cfg.n_speakers_per_batch)))
    source = _BatchSource(train_m, bank, cfg)
    val_ids = val_m if len(val_m) else None
    best_params = {k: v.clone() for k, v in model.state_dict().items()}
    if out_dir and (out_dir / "best.pt").exists() and resume:
        best_params = load_checkpoint(out_dir / "best.pt")[0].state_dict()

    def emit(line):
        log_lines.append(line)
        if out_dir:
            with open(out_dir / "metrics.log", "a") as fh:
                fh.write(line + "\n")
        if echo:
            echo(line)

    for epoch in range(state.epoch + 1, cfg.max_epochs):
        lr, env_lr = cfg.lr_at(epoch), cfg.env_lr_at(epoch)
        set_lr(optimizers["speaker"], lr)
        set_lr(optimizers["env"], env_lr)
        sums = {"L_e": 0.0, "L_s": 0.0, "CE": 0.0, "KL": 0.0}
        for k, (x, labels, ids) in enumerate(source.epoch(epoch, n_steps)):
            m = train_step(model, x, labels, optimizers, loss_cfg, cfg.phase_order, cfg.env_phase, ids)
            state.step += 1
            for key in sums:
                sums[key] += m[key]
            emit(_fmt_metrics({"step": state.step, "epoch": epoch, **m, "lr": lr}))
        means = {k: v / n_steps for k, v in sums.items()}
        if val_ids is not None:
            top1, _, _ = eval_identification(model, bank, val_m, dev.label_of, cfg.val_crops)
        else:
            top1 = float("nan")
        state.epoch = epoch
        improved = val_ids is not None and top1 > state.best_val_metric
        if improved or val_ids is None:
            state.best_val_metric = top1 if val_ids is not None else state.best_val_metric
            state.best_epoch = epoch
            state.epochs_since_improve = 0
            best_params = {k: v.detach().clone() for k, v in model.state_dict().items()}
        else:
            state.epochs_since_improve += 1
        record = {"epoch": epoch, **{f"mean_{k}": v for k, v in means.items()}, "lr": lr, "val_top1": top1}
        state.history.append(record)
        emit(_fmt_metrics(record))
        if out_dir:
            save_checkpoint(out_dir / "last.pt", model, dsp_cfg.hash(), optimizers, epoch, state.best_val_metric,
                            asdict(state), hparams)
            if state.best_epoch == epoch:
                save_checkpoint(out_dir / "best.pt", model, dsp_cfg.hash(), None, epoch, state.best_val_metric,
                                asdict(state), hparams)
        if state.epochs_since_improve >= cfg.patience_epochs:
            log.info("early stop at epoch %d (best %d)", epoch, state.best_epoch)
            break

    model.load_state_dict(best_params)
    model.eval()
    state.history = list(state.history)
    model.metrics_log = log_lines
    return model, state


def should_stop(val_history, patience):
    """Replay the early-stopping rule over a list of per-epoch validation
    metrics (higher is better). Returns ``(stop_epoch, best_epoch)``; the
    stop epoch is ``None`` when training would run to the end."""
    best, best_epoch, since = float("-inf"), -1, 0
    for epoch, v in enumerate(val_history):
        if v > best:
            best, best_epoch, since = v, epoch, 0
        else:
            since += 1
        if since >= patience:
            return epoch, best_epoch
    return None, best_epoch


# -- verification head ---------------------------------------------------------


@dataclass
class VerifConfig:
    pairs_per_batch: int = 32
    epochs: int = 30
    lr: float = 1e-4
    momentum: float = 0.9
    margin: float = 1.0
    hard_negatives: int | None = None  # K; defaults to pairs_per_batch
    pool_size: int | None = None  # candidate negatives per batch; default all cross-speaker pairs
    steps_per_epoch: int | None = None
    seed: int = 0
    seg_len_s: float = 2.0


def mine_hard_negatives(emb, speaker_ids, k, candidates=None):
    """The ``k`` closest different-speaker pairs among ``candidates``
    (default: every pair of rows), as an index array ``[k', 2]``."""
    emb = torch.as_tensor(emb)
    spk = np.asarray(speaker_ids)
    if candidates is None:
        i, j = np.triu_indices(len(spk), k=1)
        candidates = np.stack([i, j], axis=1)
    candidates = np.asarray(candidates).reshape(-1, 2)
    candidates = candidates[spk[candidates[:, 0]] != spk[candidates[:, 1]]]
    if len(candidates) == 0 or k <= 0:
        return candidates[:0]
    d = (emb[candidates[:, 0]] - emb[candidates[:, 1]]).pow(2).sum(-1).detach().numpy()
    order = np.argsort(d, kind="stable")[:k]
    return candidates[order]


def train_verif_head(model: SpeakerModel, manifest: corpus.Manifest, cfg: VerifConfig = VerifConfig(),
                     bank=None, dsp_cfg: dsp.DspConfig = dsp.DspConfig(), echo=None):
    """Replace the classifier with a 512-d linear head trained by contrastive loss.

    Each batch holds one positive pair (two crops of the same speaker) for
    ``pairs_per_batch`` speakers; negatives are the hardest cross-speaker
    pairs within the batch. The trunk is frozen (eval mode, no gradients)
    and its checksum is verified afterwards.
    """
    dev = dev_manifest(manifest) if any(u.split.startswith("dev") for u in manifest) else manifest
    bank = bank or FeatureBank(manifest, model.cfg.feature_kind, dsp_cfg)
    before = parameter_checksum(model.trunk_modules())
    head = model.add_verif_head()
    opt = torch.optim.SGD(head.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    k = cfg.pairs_per_batch if cfg.hard_negatives is None else cfg.hard_negatives
    pool = dev.eligible_videos(cfg.seg_len_s)
    speakers = sorted(pool)
    n_spk = min(cfg.pairs_per_batch, len(speakers))
    if n_spk < 2:
        raise corpus.CorpusError("verification head training needs at least two speakers")
    utts_of = {s: [u for us in v.values() for u in us] for s, v in pool.items()}
    n_steps = cfg.steps_per_epoch or max(1, math.ceil(len(dev) / (2 * n_spk)))
    history = []
    for p in model.trunk_parameters():
        p.requires_grad_(False)
    model.trunk.eval()
    model.pool.eval()
    try:
        for epoch in range(cfg.epochs):
            total = 0.0
            for step in range(n_steps):
                rng = np.random.default_rng([cfg.seed, epoch, step, 1])
                chosen = [speakers[i] for i in rng.choice(len(speakers), n_spk, replace=False)]
                slots = []
                for spk in chosen:
                    for _ in range(2):
                        u = utts_of[spk][rng.integers(len(utts_of[spk]))]
                        slots.append((u.utt_id, corpus._offset(rng, u.duration_s, cfg.seg_len_s)))
                x = torch.from_numpy(np.stack([bank.segment(u, o, cfg.seg_len_s) for u, o in slots])).unsqueeze(1)
                with torch.no_grad():
                    s = model.embed(x)
                v = head(s)
                spk_ids = np.repeat(np.arange(n_spk), 2)
                pos = np.stack([np.arange(0, 2 * n_spk, 2), np.arange(1, 2 * n_spk, 2)], axis=1)
                cands = None
                if cfg.pool_size:
                    i, j = np.triu_indices(2 * n_spk, k=1)
                    all_pairs = np.stack([i, j], axis=1)
                    all_pairs = all_pairs[spk_ids[i] != spk_ids[j]]
                    cands = all_pairs[rng.choice(len(all_pairs), min(cfg.pool_size, len(all_pairs)), replace=False)]
                neg = mine_hard_negatives(v, spk_ids, k, cands)
                pairs = np.concatenate([pos, neg])
                same = np.r_[np.ones(len(pos)), np.zeros(len(neg))]
                loss = contrastive_loss(v[pairs[:, 0]], v[pairs[:, 1]], same, cfg.margin)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                with torch.no_grad():
                    pos_d = (v[pos[:, 0]] - v[pos[:, 1]]).pow(2).sum(-1).mean().item()
                history.append({"epoch": epoch, "step": step, "loss": loss.item(), "pos_dist": pos_d})
                total += loss.item()
            if echo:
                echo(_fmt_metrics({"verif_epoch": epoch, "loss": total / n_steps}))
    finally:
        for p in model.trunk_parameters():
            p.requires_grad_(True)
    after = parameter_checksum(model.trunk_modules())
    if before != after:
        raise TrainingAborted("trunk parameters changed during verification-head training")
    model.eval()
    return model, history
