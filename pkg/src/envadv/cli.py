"""Command-line entry point: ``envadv <subcommand> [options]``.

Subcommands: synth, prepare, make-trials, train, train-verif, eval.
Exit status is 0 only when the command fully succeeded.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import corpus, dsp, evaluation, synthgen, trainer
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .features import FeatureBank

log = logging.getLogger("envadv")

# Shortcut flags for the fields changed most often.
SHORTCUTS = {
    "alpha": "loss.alpha",
    "arch": "trunk.arch",
    "pool": "trunk.pool",
    "seed": "train.seed",
    "workers": "train.workers",
}


def _add_config_flags(p):
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--alpha", type=float, help="confusion-loss weight")
    p.add_argument("--arch", choices=["vggm40", "thin-resnet34"])
    p.add_argument("--pool", choices=["tap", "sap"])
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, help="data-loading threads")
    group = p.add_argument_group("config overrides")
    for name in RunConfig.field_names():
        group.add_argument(f"--{name}", dest=f"cfg:{name}", metavar="VALUE")


def _run_config(args) -> RunConfig:
    overrides = [(SHORTCUTS[k], str(getattr(args, k))) for k in SHORTCUTS if getattr(args, k, None) is not None]
    overrides += [(k[4:], v) for k, v in vars(args).items() if k.startswith("cfg:") and v is not None]
    return RunConfig.load(args.config, overrides)


def _manifest(path) -> corpus.Manifest:
    if not path:
        raise corpus.CorpusError("a manifest is required (--manifest or paths.manifest)")
    return corpus.Manifest.load(path)


def _echo(line):
    print(line, flush=True)


# -- subcommands ---------------------------------------------------------------


def cmd_synth(args):
    spec = synthgen.SynthSpec(
        n_speakers=args.n_speakers, n_envs_per_speaker=args.n_envs, utts_per_env=args.utts_per_env,
        utt_len_s=args.utt_len, seed=args.seed,
    )
    manifest = synthgen.generate(spec, args.out, workers=args.workers)
    print(f"wrote {len(manifest)} utterances ({len(manifest.speakers)} speakers) to {args.out}")
    if args.check:
        acc = synthgen.env_separability(manifest.with_speakers(manifest.speakers[: args.check]))
        print(f"environment separability (linear probe, {args.check} speakers): {acc:.3f}")


def cmd_prepare(args):
    manifest = corpus.scan_corpus(args.corpus_root)
    test_speakers = None
    if args.test_speakers:
        test_speakers = set(Path(args.test_speakers).read_text().split())
    manifest = corpus.make_splits(manifest, args.task, seed=args.seed, test_fraction=args.test_fraction,
                                  split_file=args.split_file, test_speakers=test_speakers)
    manifest.save(args.out)
    counts = {s: len(manifest.subset(s)) for s in corpus.SPLITS if len(manifest.subset(s))}
    print(f"wrote {len(manifest)} rows to {args.out}: " + " ".join(f"{k}={v}" for k, v in counts.items()))


def _split_of(manifest, name):
    part = manifest.subset(name)
    if not len(part):
        raise corpus.CorpusError(f"manifest has no {name!r} utterances")
    return part


def cmd_make_trials(args):
    manifest = _manifest(args.manifest)
    part = _split_of(manifest, args.split)
    if args.kind == "verif":
        trials = corpus.build_verif_trials(part, args.n, seed=args.seed)
    else:
        trials = corpus.build_env_probe_trials(part, args.n, seed=args.seed)
    corpus.write_trials(trials, args.out, manifest)
    print(f"wrote {len(trials.pairs)} {args.kind} trials to {args.out}")


def cmd_train(args):
    cfg = _run_config(args)
    built = cfg.build()
    paths = built["paths"]
    manifest = _manifest(args.manifest or paths.manifest)
    out_dir = Path(args.out or paths.out_dir or "run")
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump(out_dir / "config.yaml")
    bank = FeatureBank(manifest, built["trunk"].feature_kind, built["dsp"], cache_dir=paths.cache_dir)
    model, state = trainer.train(
        manifest, built["trunk"], built["train"], built["loss"], built["dsp"], out_dir=out_dir,
        resume=args.resume, bank=bank, config_dict={"config_hash": cfg.hash(), "run": cfg.to_dict()},
        echo=_epoch_table_printer(),
    )
    print(f"best epoch {state.best_epoch} val_top1={state.best_val_metric:.4f}; checkpoint {out_dir / 'best.pt'}")
    if args.emit_plots:
        _plot_history(state.history, out_dir / "metrics.png")


def _epoch_table_printer():
    header = False

    def echo(line):
        nonlocal header
        if not line.startswith("epoch="):
            return
        rec = dict(kv.split("=", 1) for kv in line.split())
        if not header:
            print(f"{'epoch':>5} {'L_e':>9} {'L_s':>9} {'CE':>9} {'KL':>9} {'lr':>10} {'val_top1':>9}")
            header = True
        print(f"{rec['epoch']:>5} {float(rec['mean_L_e']):9.4f} {float(rec['mean_L_s']):9.4f} "
              f"{float(rec['mean_CE']):9.4f} {float(rec['mean_KL']):9.4f} {float(rec['lr']):10.3g} "
              f"{float(rec['val_top1']):9.4f}", flush=True)

    return echo


def cmd_train_verif(args):
    cfg = _run_config(args)
    built = cfg.build()
    model, blob = load_checkpoint(args.checkpoint)
    _check_dsp(blob, built["dsp"])
    manifest = _manifest(args.manifest or built["paths"].manifest)
    bank = FeatureBank(manifest, model.cfg.feature_kind, built["dsp"], cache_dir=built["paths"].cache_dir)
    model, history = trainer.train_verif_head(model, manifest, built["verif"], bank=bank, dsp_cfg=built["dsp"],
                                              echo=_echo)
    config = {**blob.get("config", {}), "verif": cfg.to_dict()["verif"], "verif_config_hash": cfg.hash()}
    save_checkpoint(args.out, model, built["dsp"].hash(), epoch=blob["epoch"],
                    best_val_metric=blob["best_val_metric"], state=blob.get("state"), config=config)
    print(f"wrote {args.out}")


def _check_dsp(blob, dsp_cfg):
    if blob.get("dsp_hash") != dsp_cfg.hash():
        log.warning("checkpoint dsp hash %s differs from current dsp config %s", blob.get("dsp_hash"), dsp_cfg.hash())


def cmd_eval(args):
    cfg = _run_config(args)
    built = cfg.build()
    dsp_cfg = built["dsp"]
    model, blob = load_checkpoint(args.checkpoint)
    _check_dsp(blob, dsp_cfg)
    manifest = _manifest(args.manifest or built["paths"].manifest)
    bank = FeatureBank(manifest, model.cfg.feature_kind, dsp_cfg, cache_dir=built["paths"].cache_dir)
    config_hash = blob.get("config", {}).get("config_hash", "")
    report = evaluation.EvalReport(args.task, config_hash=config_hash)
    labels = scores = None

    if args.task == "iden":
        split = args.split or "test_iden"
        test = _split_of(manifest, split)
        dev_labels = corpus.Manifest(u for u in manifest if u.split.startswith("dev")).label_of or None
        report.top1, report.top5, skipped = evaluation.eval_identification(model, bank, test, dev_labels)
        report.n_trials = len(test) - skipped
        report.extra["skipped"] = skipped
    else:
        if args.trials:
            trials = corpus.read_trials(args.trials, kind="env_probe" if args.task == "env-probe" else "speaker_verif")
        else:
            part = _split_of(manifest, args.split or _default_split(manifest))
            build = corpus.build_env_probe_trials if args.task == "env-probe" else corpus.build_verif_trials
            trials = build(part, args.n_trials, seed=args.trial_seed)
        labels = trials.labels
        use_head = args.task != "env-probe" and model.verif_head is not None
        if args.task == "perturb":
            spec = evaluation.PerturbSpec(lowpass_hz=args.lowpass_hz, snr_db=args.snr_db, seed=args.trial_seed)
            noisy_bank = FeatureBank(manifest, model.cfg.feature_kind, dsp_cfg, transform=spec)
            clean = evaluation.score_trials(model, bank, trials, args.metric, use_head)
            scores = evaluation.score_trials(model, noisy_bank, trials, args.metric, use_head)
            report.extra["clean_eer"] = evaluation.compute_eer(labels, clean)
            report.eer = evaluation.compute_eer(labels, scores)
            report.extra["degradation"] = report.eer - report.extra["clean_eer"]
        else:
            scores = evaluation.score_trials(model, bank, trials, args.metric, use_head)
            report.eer = evaluation.compute_eer(labels, scores)
        report.n_trials = len(labels)
        if args.scores:
            evaluation.write_scores(args.scores, labels, scores)

    print(report.table())
    print(report.kv_lines())
    if args.report:
        Path(args.report).write_text(report.kv_lines() + "\n")
    if args.emit_plots and scores is not None:
        _plot_scores(labels, scores, Path(args.report or args.scores or "scores").with_suffix(".png"))


def _default_split(manifest):
    for name in ("test_verif", "test_iden"):
        if len(manifest.subset(name)):
            return name
    raise corpus.CorpusError("manifest has no test split")


# -- plots ---------------------------------------------------------------------


def _plot_history(history, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = [h["epoch"] for h in history]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    for ax, keys in zip(axes, (("mean_CE", "mean_L_e"), ("mean_KL",), ("val_top1",))):
        for k in keys:
            ax.plot(epochs, [h[k] for h in history], marker="o", label=k)
        ax.set_xlabel("epoch")
        ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    print(f"wrote {path}")


def _plot_scores(labels, scores, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels, scores = np.asarray(labels), np.asarray(scores)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    bins = np.linspace(scores.min(), scores.max(), 40)
    ax.hist(scores[labels == 1], bins=bins, alpha=0.6, label="target")
    ax.hist(scores[labels == 0], bins=bins, alpha=0.6, label="non-target")
    ax.set_xlabel("distance")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    print(f"wrote {path}")


# -- parser --------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="envadv", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic speaker x environment corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-speakers", type=int, default=20)
    p.add_argument("--n-envs", type=int, default=4)
    p.add_argument("--utts-per-env", type=int, default=30)
    p.add_argument("--utt-len", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--check", type=int, default=0, metavar="K",
                   help="report environment separability on the first K speakers")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="scan a corpus and assign dev/test splits")
    p.add_argument("corpus_root")
    p.add_argument("--out", required=True, help="manifest path (tab-separated)")
    p.add_argument("--task", choices=["iden", "verif"], default="iden")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-fraction", type=float)
    p.add_argument("--split-file", help="official identification split file")
    p.add_argument("--test-speakers", help="file listing verification test speakers")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("make-trials", help="write a verification or environment-probe trial list")
    p.add_argument("--manifest", required=True)
    p.add_argument("--kind", choices=["verif", "env-probe"], default="verif")
    p.add_argument("--split", default="test_iden")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_trials)

    p = sub.add_parser("train", help="adversarial speaker-embedding training")
    p.add_argument("--manifest")
    p.add_argument("--out", help="run directory for checkpoints and metrics.log")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--emit-plots", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-verif", help="train the verification head on a frozen trunk")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train_verif)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")
    p.add_argument("--task", choices=["iden", "verif", "env-probe", "perturb"], required=True)
    p.add_argument("--trials", help="trial list; built from --split when omitted")
    p.add_argument("--split")
    p.add_argument("--n-trials", type=int, default=1000)
    p.add_argument("--trial-seed", type=int, default=0)
    p.add_argument("--metric", choices=["euclidean_l2norm", "euclidean", "cosine"], default="euclidean_l2norm")
    p.add_argument("--lowpass-hz", type=float, default=2500.0)
    p.add_argument("--snr-db", type=float, default=10.0)
    p.add_argument("--scores", help="write per-trial scores here")
    p.add_argument("--report", help="write key=value report here")
    p.add_argument("--emit-plots", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)
    return parser


# Arguments naming output files (not directories) per subcommand.
_OUTPUT_FILES = {"prepare": ("out",), "make-trials": ("out",), "train-verif": ("out",), "eval": ("scores", "report")}


def main(argv=None):
    args = build_parser().parse_args(argv)
    for name in _OUTPUT_FILES.get(args.command, ()):
        if getattr(args, name, None):
            Path(getattr(args, name)).parent.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (corpus.CorpusError, dsp.AudioError, trainer.TrainingAborted, ValueError, FileNotFoundError,
            KeyError) as exc:
        print(f"envadv {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
