"""How trials are scored and how the EER is read off the scores.

Scores are distances (lower = more similar). This walks through a toy
example with hand-made embeddings so every number can be checked by eye,
then shows the environment probe on embeddings that do or do not encode the
recording channel.
"""

import numpy as np

from envadv import corpus, evaluation
from envadv.corpus import Manifest, UtteranceRef

# Six trials, three target (label 1) and three non-target.
labels = np.array([1, 1, 1, 0, 0, 0])
scores = np.array([0.2, 0.4, 0.9, 0.5, 1.1, 1.3])
far, frr, thresholds = evaluation.operating_points(labels, scores)
print("threshold   FAR    FRR")
for th, a, r in zip(thresholds, far, frr):
    print(f"{th:9.2f} {a:6.3f} {r:6.3f}")
print(f"EER = {evaluation.compute_eer(labels, scores):.4f}  (FAR and FRR cross between 0.5 and 0.9)")

# Ten crops per utterance; the pair score is the mean of all 100 crop distances.
rng = np.random.default_rng(0)
a, b = rng.normal(size=(10, 8)), rng.normal(size=(10, 8))
print(f"\npair distance, L2-normalised: {evaluation.pair_distance(a, b):.4f}; "
      f"same utterance: {evaluation.pair_distance(a, a):.4f}")

# Environment probe: same-speaker pairs labelled by whether they share a video.
utts, leaky, clean = [], {}, {}
for v in range(5):
    channel = rng.normal(size=16) * 3
    for i in range(6):
        uid = f"spk/video{v}/{i:05d}"
        utts.append(UtteranceRef(uid, "spk", f"video{v}", "-", 3.0))
        leaky[uid] = channel + 0.3 * rng.normal(size=(10, 16))  # embedding remembers the channel
        clean[uid] = rng.normal(size=(10, 16))  # embedding ignores it
trials = corpus.build_env_probe_trials(Manifest(utts), 120, seed=0)
for name, emb in (("channel-aware", leaky), ("channel-blind", clean)):
    eer = evaluation.eval_env_probe(None, None, trials, embeddings=emb)
    print(f"env-probe EER, {name} embeddings: {100 * eer:.1f}%")
print("higher probe EER = less environment information left in the embedding")
