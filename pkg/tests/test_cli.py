import pytest

from envadv import corpus, evaluation
from envadv.checkpoint import load_checkpoint
from envadv.cli import main
from envadv.config import RunConfig

TINY = ["--arch", "vggm40", "--pool", "tap", "--trunk.width", "0.25", "--train.max_epochs", "2", "--train.patience_epochs", "2",
        "--train.steps_per_epoch", "2", "--train.n_speakers_per_batch", "3", "--train.val_fraction", "0.25",
        "--train.val_crops", "2", "--train.lr0", "0.01"]


@pytest.fixture(scope="module")
def prepared(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "corpus"), "--n-speakers", "3", "--n-envs", "2",
                 "--utts-per-env", "6", "--utt-len", "2.5", "--seed", "3"]) == 0
    assert main(["prepare", str(root / "corpus"), "--out", str(root / "m.tsv"), "--test-fraction", "0.5"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(prepared):
    out = prepared / "run0"
    assert main(["train", "--manifest", str(prepared / "m.tsv"), "--out", str(out), "--alpha", "0",
                 "--emit-plots", *TINY]) == 0
    return out


def test_prepare_rows_and_idempotent(prepared, tmp_path):
    m = corpus.Manifest.load(prepared / "m.tsv")
    assert len(m) == 3 * 2 * 6
    assert main(["prepare", str(prepared / "corpus"), "--out", str(tmp_path / "again.tsv"),
                 "--test-fraction", "0.5"]) == 0
    assert (tmp_path / "again.tsv").read_bytes() == (prepared / "m.tsv").read_bytes()


def test_prepare_missing_root(tmp_path, capsys):
    assert main(["prepare", str(tmp_path / "missing"), "--out", str(tmp_path / "m.tsv")]) == 1
    assert "error" in capsys.readouterr().err
    assert not (tmp_path / "m.tsv").exists()


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["train", "--arch", "resnet50"])
    assert exc.value.code == 2


def test_bad_config_field(prepared, capsys):
    assert main(["train", "--manifest", str(prepared / "m.tsv"), "--train.lr0", "-1"]) == 1
    assert "lr0" in capsys.readouterr().err


def test_train_outputs(trained, capsys):
    assert (trained / "best.pt").exists() and (trained / "metrics.png").exists()
    cfg = RunConfig.load(trained / "config.yaml")
    _, blob = load_checkpoint(trained / "best.pt")
    assert blob["config"]["config_hash"] == cfg.hash()
    assert blob["trunk_config"]["arch"] == "vggm40"


def test_alpha_changes_log_and_keeps_kl_column(prepared, trained, tmp_path):
    out = tmp_path / "run10"
    assert main(["train", "--manifest", str(prepared / "m.tsv"), "--out", str(out), "--alpha", "10", *TINY]) == 0
    log0 = (trained / "metrics.log").read_text()
    log10 = (out / "metrics.log").read_text()
    assert log0 != log10
    for text in (log0, log10):
        assert all(" KL=" in line for line in text.splitlines() if line.startswith("step="))


def test_arch_recorded(prepared, tmp_path):
    out = tmp_path / "res"
    assert main(["train", "--manifest", str(prepared / "m.tsv"), "--out", str(out), *TINY, "--arch", "thin-resnet34",
                 "--pool", "sap", "--train.max_epochs", "1", "--train.patience_epochs", "1",
                 "--train.steps_per_epoch", "1"]) == 0
    _, blob = load_checkpoint(out / "last.pt")
    assert blob["trunk_config"]["arch"] == "thin_resnet34"
    assert blob["trunk_config"]["pool"] == "sap"


def test_resume(prepared, trained, tmp_path):
    out = tmp_path / "cut"
    cut = [a if a != "2" or TINY[i - 1] != "--train.max_epochs" else "1" for i, a in enumerate(TINY)]
    cut = [a if a != "2" or cut[i - 1] != "--train.patience_epochs" else "1" for i, a in enumerate(cut)]
    assert main(["train", "--manifest", str(prepared / "m.tsv"), "--out", str(out), "--alpha", "0", *cut]) == 0
    assert main(["train", "--manifest", str(prepared / "m.tsv"), "--out", str(out), "--alpha", "0", "--resume",
                 *TINY]) == 0
    assert (out / "metrics.log").read_text() == (trained / "metrics.log").read_text()


def test_eval_tasks(prepared, trained, tmp_path, capsys):
    ckpt, manifest = str(trained / "best.pt"), str(prepared / "m.tsv")
    assert main(["eval", "--checkpoint", ckpt, "--manifest", manifest, "--task", "iden",
                 "--report", str(tmp_path / "iden.txt")]) == 0
    kv = dict(x.split("=") for x in (tmp_path / "iden.txt").read_text().split())
    assert 0 <= float(kv["top1"]) <= float(kv["top5"]) <= 1

    assert main(["make-trials", "--manifest", manifest, "--kind", "env-probe", "--n", "12",
                 "--out", str(tmp_path / "env.txt")]) == 0
    assert main(["eval", "--checkpoint", ckpt, "--manifest", manifest, "--task", "env-probe",
                 "--trials", str(tmp_path / "env.txt"), "--scores", str(tmp_path / "env_scores.txt"),
                 "--report", str(tmp_path / "env.rep"), "--emit-plots"]) == 0
    kv = dict(x.split("=") for x in (tmp_path / "env.rep").read_text().split())
    labels, scores = evaluation.read_scores(tmp_path / "env_scores.txt")
    assert evaluation.compute_eer(labels, scores) == pytest.approx(float(kv["eer"]), abs=1e-6)
    assert (tmp_path / "env.png").exists()

    assert main(["eval", "--checkpoint", ckpt, "--manifest", manifest, "--task", "perturb", "--n-trials", "12",
                 "--report", str(tmp_path / "p.rep")]) == 0
    kv = dict(x.split("=") for x in (tmp_path / "p.rep").read_text().split())
    assert {"clean_eer", "degradation"} <= set(kv)
    out = capsys.readouterr().out
    assert "EER" in out and "task=perturb" in out


def test_train_verif_and_eval(prepared, trained, tmp_path):
    out = tmp_path / "verif.pt"
    assert main(["train-verif", "--checkpoint", str(trained / "best.pt"), "--manifest", str(prepared / "m.tsv"),
                 "--out", str(out), "--verif.epochs", "2", "--verif.steps_per_epoch", "1",
                 "--verif.pairs_per_batch", "3"]) == 0
    model, _ = load_checkpoint(out)
    assert model.verif_head is not None
    assert main(["eval", "--checkpoint", str(out), "--manifest", str(prepared / "m.tsv"), "--task", "verif",
                 "--n-trials", "10"]) == 0


def test_dsp_mismatch_warns(prepared, trained, caplog):
    assert main(["eval", "--checkpoint", str(trained / "best.pt"), "--manifest", str(prepared / "m.tsv"),
                 "--task", "iden", "--dsp.log_floor", "1e-8"]) == 0
    assert "dsp hash" in caplog.text
