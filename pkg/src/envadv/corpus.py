"""Corpus manifests, dev/test splits, triplet batches and trial lists.

Audio is expected in the VoxCeleb layout ``<speaker>/<video>/<utterance>.wav``;
speaker and video identity are read from the path. The video identity is
the free environment label used by the adversarial training.
"""

from __future__ import annotations

import logging
import wave
from collections import defaultdict
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SPLITS = ("dev_iden", "test_iden", "dev_verif", "test_verif")
UNSPLIT = "-"
AUDIO_SUFFIXES = (".wav",)
MANIFEST_FIELDS = ("utt_id", "speaker_id", "video_id", "path", "duration_s", "split")

# Fraction of utterances held out for identification test (7,972 of 148,610)
# and of speakers held out for verification test (40 of 1,251).
IDEN_TEST_FRACTION = 7972 / 148610
VERIF_TEST_FRACTION = 40 / 1251


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class UtteranceRef:
    utt_id: str
    speaker_id: str
    video_id: str
    path: str
    duration_s: float
    split: str = UNSPLIT

    @property
    def name(self) -> str:
        return self.utt_id.rsplit("/", 1)[-1]

    @property
    def rel_path(self) -> str:
        return self.utt_id + Path(self.path).suffix


@dataclass(frozen=True)
class TripletSpec:
    """Anchor and positive share a video; the negative comes from another video.

    Each slot is ``(utt_id, crop_offset_s)``.
    """

    speaker_id: str
    anchor: tuple
    positive: tuple
    negative: tuple


@dataclass
class TrialList:
    pairs: list  # (label, utt_a, utt_b)
    kind: str = "speaker_verif"

    def __len__(self):
        return len(self.pairs)

    @property
    def labels(self) -> np.ndarray:
        return np.array([p[0] for p in self.pairs], dtype=int)


class Manifest:
    """Immutable list of utterances plus the speaker label mapping.

    ``speakers`` is sorted lexicographically, so label indices depend only
    on the set of speakers present.
    """

    def __init__(self, utterances):
        self.utterances = tuple(utterances)
        ids = [u.utt_id for u in self.utterances]
        if len(set(ids)) != len(ids):
            raise CorpusError("duplicate utt_id in manifest")
        self.speakers = tuple(sorted({u.speaker_id for u in self.utterances}))

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def __eq__(self, other):
        return isinstance(other, Manifest) and self.utterances == other.utterances

    def __repr__(self):
        return f"Manifest({len(self)} utterances, {len(self.speakers)} speakers)"

    @cached_property
    def by_id(self) -> dict:
        return {u.utt_id: u for u in self.utterances}

    @cached_property
    def label_of(self) -> dict:
        return {s: i for i, s in enumerate(self.speakers)}

    def subset(self, *splits) -> "Manifest":
        return Manifest(u for u in self.utterances if u.split in splits)

    def with_speakers(self, speakers) -> "Manifest":
        keep = set(speakers)
        return Manifest(u for u in self.utterances if u.speaker_id in keep)

    @cached_property
    def videos(self) -> dict:
        """speaker -> video -> list of utterances at least one segment long."""
        index = defaultdict(lambda: defaultdict(list))
        for u in self.utterances:
            index[u.speaker_id][u.video_id].append(u)
        return {s: dict(v) for s, v in index.items()}

    def eligible_videos(self, seg_len_s: float) -> dict:
        out = {}
        for spk, vids in self.videos.items():
            kept = {v: [u for u in us if u.duration_s >= seg_len_s] for v, us in vids.items()}
            kept = {v: us for v, us in kept.items() if us}
            if kept:
                out[spk] = kept
        return out

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        lines = ["# " + "\t".join(MANIFEST_FIELDS)]
        for u in self.utterances:
            lines.append("\t".join([u.utt_id, u.speaker_id, u.video_id, u.path, repr(u.duration_s), u.split]))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Manifest":
        utts = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != len(MANIFEST_FIELDS):
                raise CorpusError(f"{path}:{lineno}: expected {len(MANIFEST_FIELDS)} fields, got {len(fields)}")
            utt_id, spk, vid, p, dur, split = fields
            utts.append(UtteranceRef(utt_id, spk, vid, p, float(dur), split))
        return cls(utts)


def _duration(path: Path) -> float:
    with wave.open(str(path), "rb") as wf:
        return wf.getnframes() / float(wf.getframerate())


def scan_corpus(root, layout: str = "speaker/video/utterance") -> Manifest:
    """Build a manifest from every audio file found under ``root``.

    Files that cannot be read, or that sit at the wrong depth, are skipped
    and counted in a warning.
    """
    if layout != "speaker/video/utterance":
        raise CorpusError(f"unsupported layout {layout!r}")
    root = Path(root)
    if not root.is_dir():
        raise CorpusError(f"corpus root {root} does not exist")
    utts, skipped = [], 0
    for path in sorted(p for p in root.rglob("*") if p.suffix.lower() in AUDIO_SUFFIXES):
        rel = path.relative_to(root)
        if len(rel.parts) != 3:
            skipped += 1
            continue
        try:
            duration = _duration(path)
        except (wave.Error, EOFError, OSError):
            skipped += 1
            continue
        spk, vid, name = rel.parts
        utt_id = f"{spk}/{vid}/{Path(name).stem}"
        utts.append(UtteranceRef(utt_id, spk, vid, str(path), duration))
    if skipped:
        log.warning("skipped %d unreadable or misplaced files under %s", skipped, root)
    if not utts:
        raise CorpusError(f"empty corpus: no audio under {root}")
    return Manifest(utts)


def read_split_file(path) -> dict:
    """Parse an official identification split file (``<set> <relpath>`` per line).

    Returns ``utt_id -> set number`` (1 train, 2 validation, 3 test).
    """
    out = {}
    for line in Path(path).read_text().split("\n"):
        if line.strip():
            code, rel = line.split()
            out[str(Path(rel).with_suffix(""))] = int(code)
    return out


def make_splits(
    manifest: Manifest,
    task: str,
    seed: int = 0,
    test_fraction: float | None = None,
    split_file=None,
    test_speakers=None,
) -> Manifest:
    """Assign every utterance to a dev or test split.

    ``iden``: test utterances are unseen utterances of training speakers;
    speakers with fewer than two utterances are dropped. ``verif``: test
    speakers are disjoint from dev speakers.

    Official material is used when given: ``split_file`` (identification
    split, set 3 = test) and ``test_speakers`` (verification test speakers,
    which are also excluded from identification so that one model serves
    both tasks). Otherwise a seeded random split is drawn.
    """
    if not len(manifest):
        raise CorpusError("cannot split an empty manifest")
    rng = np.random.default_rng(seed)
    excluded = set(test_speakers or ())

    if task == "iden":
        frac = IDEN_TEST_FRACTION if test_fraction is None else test_fraction
        official = read_split_file(split_file) if split_file else None
        out, dropped = [], 0
        for spk in manifest.speakers:
            if spk in excluded:
                continue
            utts = [u for u in manifest.utterances if u.speaker_id == spk]
            if len(utts) < 2:
                dropped += 1
                continue
            if official is not None:
                test = {u.utt_id for u in utts if official.get(u.utt_id) == 3}
            else:
                test = _holdout_by_video(utts, frac, rng)
            out.extend(replace(u, split="test_iden" if u.utt_id in test else "dev_iden") for u in utts)
        if dropped:
            log.warning("excluded %d speakers with fewer than 2 utterances", dropped)
        return Manifest(out)

    if task == "verif":
        speakers = list(manifest.speakers)
        if excluded:
            test = excluded & set(speakers)
        else:
            frac = VERIF_TEST_FRACTION if test_fraction is None else test_fraction
            k = min(len(speakers) - 1, max(1, int(round(frac * len(speakers)))))
            test = set(rng.choice(speakers, size=k, replace=False).tolist())
        if not test or len(test) == len(speakers):
            raise CorpusError("verification split needs both dev and test speakers")
        return Manifest(
            replace(u, split="test_verif" if u.speaker_id in test else "dev_verif") for u in manifest.utterances
        )

    raise CorpusError(f"unknown task {task!r} (expected 'iden' or 'verif')")


def _holdout_by_video(utts, frac, rng) -> set:
    by_video = defaultdict(list)
    for u in utts:
        by_video[u.video_id].append(u.utt_id)
    test = []
    for vid in sorted(by_video):
        ids = by_video[vid]
        k = int(round(frac * len(ids)))
        if 0 < k < len(ids):
            test.extend(rng.choice(ids, size=k, replace=False).tolist())
    if not test:
        test.append(str(rng.choice([u.utt_id for u in utts])))
    return set(test)


def _offset(rng, duration_s: float, seg_len_s: float, hop_s: float = 0.01) -> float:
    # Uniform on the 10 ms frame grid of [0, duration - seg_len].
    n = int(np.floor((duration_s - seg_len_s) / hop_s + 1e-9))
    return round(int(rng.integers(0, n + 1)) * hop_s, 6)


def sample_triplet_batch(manifest: Manifest, n_speakers: int, seg_len_s: float = 2.0, rng=None) -> list:
    """Draw one triplet per speaker for ``n_speakers`` distinct speakers.

    The anchor and positive come from the same video (possibly the same
    clip), the negative from a different video of the same speaker.
    Speakers with a single usable video cannot supply a negative and are not
    sampled.
    """
    if n_speakers < 2:
        raise CorpusError("n_speakers must be >= 2")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    pool = {s: v for s, v in manifest.eligible_videos(seg_len_s).items() if len(v) >= 2}
    if not pool:
        raise CorpusError("no multi-video speakers available for triplet sampling")
    speakers = sorted(pool)
    if n_speakers > len(speakers):
        raise CorpusError(f"batch wants {n_speakers} speakers but only {len(speakers)} have 2+ videos")
    chosen = rng.choice(len(speakers), size=n_speakers, replace=False)
    batch = []
    for i in chosen:
        spk = speakers[i]
        vids = sorted(pool[spk])
        a_vid = vids[rng.integers(len(vids))]
        others = [v for v in vids if v != a_vid]
        n_vid = others[rng.integers(len(others))]
        a = pool[spk][a_vid][rng.integers(len(pool[spk][a_vid]))]
        p = pool[spk][a_vid][rng.integers(len(pool[spk][a_vid]))]
        n = pool[spk][n_vid][rng.integers(len(pool[spk][n_vid]))]
        batch.append(
            TripletSpec(
                spk,
                (a.utt_id, _offset(rng, a.duration_s, seg_len_s)),
                (p.utt_id, _offset(rng, p.duration_s, seg_len_s)),
                (n.utt_id, _offset(rng, n.duration_s, seg_len_s)),
            )
        )
    return batch


def check_triplet(manifest: Manifest, t: TripletSpec) -> None:
    a, p, n = (manifest.by_id[x[0]] for x in (t.anchor, t.positive, t.negative))
    if not (a.speaker_id == p.speaker_id == n.speaker_id == t.speaker_id):
        raise AssertionError(f"speaker mismatch in {t}")
    if a.video_id != p.video_id or a.video_id == n.video_id:
        raise AssertionError(f"video constraint violated in {t}")


def _same_speaker_pairs(manifest: Manifest, seg_len_s: float):
    same, diff = [], []
    for spk, vids in sorted(manifest.eligible_videos(seg_len_s).items()):
        utts = sorted((u for us in vids.values() for u in us), key=lambda u: u.utt_id)
        for i in range(len(utts)):
            for j in range(i + 1, len(utts)):
                pair = (utts[i].utt_id, utts[j].utt_id)
                (same if utts[i].video_id == utts[j].video_id else diff).append(pair)
    return same, diff


def build_env_probe_trials(manifest: Manifest, n_pairs: int, seed: int = 0, seg_len_s: float = 2.0) -> TrialList:
    """Same-speaker pairs, half of them from the same video (label 1).

    Pairs are drawn globally (not per speaker) without replacement.
    """
    same, diff = _same_speaker_pairs(manifest, seg_len_s)
    n_pos = n_pairs // 2
    n_neg = n_pairs - n_pos
    if n_pos > len(same) or n_neg > len(diff):
        achievable = 2 * len(same) + 1 if len(diff) > len(same) else 2 * len(diff)
        raise CorpusError(
            f"cannot draw {n_pairs} probe pairs ({len(same)} same-video, {len(diff)} "
            f"cross-video available); achievable maximum is {achievable}"
        )
    rng = np.random.default_rng(seed)
    pos = [same[i] for i in rng.choice(len(same), size=n_pos, replace=False)]
    neg = [diff[i] for i in rng.choice(len(diff), size=n_neg, replace=False)]
    pairs = [(1, a, b) for a, b in pos] + [(0, a, b) for a, b in neg]
    order = rng.permutation(len(pairs))
    return TrialList([pairs[i] for i in order], kind="env_probe")


def build_verif_trials(manifest: Manifest, n_pairs: int, seed: int = 0, seg_len_s: float = 2.0) -> TrialList:
    """Balanced speaker-verification pairs: label 1 = same speaker."""
    eligible = [u for u in manifest.utterances if u.duration_s >= seg_len_s]
    by_spk = defaultdict(list)
    for u in eligible:
        by_spk[u.speaker_id].append(u.utt_id)
    if len(by_spk) < 2:
        raise CorpusError("verification trials need at least two speakers")
    targets = [
        (ids[i], ids[j]) for _, ids in sorted(by_spk.items()) for i in range(len(ids)) for j in range(i + 1, len(ids))
    ]
    n_pos = n_pairs // 2
    n_neg = n_pairs - n_pos
    if n_pos > len(targets):
        raise CorpusError(f"only {len(targets)} same-speaker pairs available, need {n_pos}")
    rng = np.random.default_rng(seed)
    pos = [targets[i] for i in rng.choice(len(targets), size=n_pos, replace=False)]
    spk_of = {u.utt_id: u.speaker_id for u in eligible}
    ids = sorted(spk_of)
    n_possible = len(ids) * (len(ids) - 1) // 2 - len(targets)
    if n_neg > n_possible:
        raise CorpusError(f"only {n_possible} different-speaker pairs available, need {n_neg}")
    seen, neg = set(), []
    while len(neg) < n_neg:
        i, j = sorted(rng.choice(len(ids), size=2, replace=False))
        a, b = ids[i], ids[j]
        if spk_of[a] != spk_of[b] and (a, b) not in seen:
            seen.add((a, b))
            neg.append((a, b))
    pairs = [(1, a, b) for a, b in pos] + [(0, a, b) for a, b in neg]
    order = rng.permutation(len(pairs))
    return TrialList([pairs[i] for i in order], kind="speaker_verif")


def write_trials(trials: TrialList, path, manifest: Manifest) -> None:
    """VoxCeleb-style ``label rel_path_a rel_path_b`` lines."""
    rel = {u.utt_id: u.rel_path for u in manifest.utterances}
    Path(path).write_text("".join(f"{lab} {rel[a]} {rel[b]}\n" for lab, a, b in trials.pairs))


def read_trials(path, kind: str = "speaker_verif") -> TrialList:
    pairs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 3 or fields[0] not in ("0", "1"):
            raise CorpusError(f"{path}:{lineno}: expected 'label path_a path_b'")
        pairs.append((int(fields[0]), str(Path(fields[1]).with_suffix("")), str(Path(fields[2]).with_suffix(""))))
    return TrialList(pairs, kind=kind)
