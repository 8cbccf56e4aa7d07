"""Train the half-width VGG-M-40 twice, without and with the confusion loss.

The α=10 model should keep its identification accuracy while its
embeddings carry less information about which video an utterance came
from: the environment-probe EER goes up. Takes about 10 minutes on one
CPU core (corpus generation included).

    python demos/02_adversarial_toy.py --corpus /tmp/toy7 --seed 0
"""

import argparse
from pathlib import Path

import torch

from envadv import corpus, synthgen, toy
from envadv.features import FeatureBank

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--corpus", default="/tmp/envadv_toy")
parser.add_argument("--seed", type=int, default=0)
parser.add_argument("--alphas", default="0,10")
args = parser.parse_args()
torch.set_num_threads(1)

root = Path(args.corpus)
if (root / synthgen.SPEC_FILE).exists() and synthgen.read_spec(root) == toy.TOY_SPEC:
    manifest = corpus.scan_corpus(root)
else:
    print(f"generating the 20 x 4 x 30 toy corpus in {root} ...")
    manifest = synthgen.generate(toy.TOY_SPEC, root)

split = toy.prepare(manifest)
bank = FeatureBank(split, "fbank40")  # shared so features are computed once

results = []
for alpha in map(float, args.alphas.split(",")):
    print(f"training alpha={alpha:g} ...", flush=True)
    r = toy.run(split, args.seed, alpha, bank=bank)
    results.append(r)
    last = dict(kv.split("=") for kv in r.metrics_log[-1].split())
    print(f"  final epoch: CE {float(last['mean_CE']):.3f}, KL {float(last['mean_KL']):.4f}, "
          f"L_e {float(last['mean_L_e']):.3f}")

print()
print(f"{'alpha':>6} {'top-1':>7} {'env EER':>8} {'verif EER':>10} {'perturbed':>10} {'degradation':>12}")
for r in results:
    print(f"{r.alpha:6g} {100 * r.top1:6.1f}% {100 * r.env_eer:7.1f}% {100 * r.clean_eer:9.1f}% "
          f"{100 * r.perturbed_eer:9.1f}% {100 * r.degradation:+11.1f}pp")
