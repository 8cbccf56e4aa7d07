import os
from pathlib import Path

import numpy as np
import pytest
import torch

from envadv import corpus, dsp, synthgen
from envadv.toy import TOY_SPEC

torch.set_num_threads(1)

# Point this at a previously generated toy corpus to skip regeneration.
TOY_CORPUS_ENV = "ENVADV_TOY_CORPUS"

# PASS/FAIL lines from test_acceptance, repeated in the terminal summary.
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


def write_fake_corpus(root, layout, duration_s=3.0, seed=0):
    """``layout``: {speaker: {video: n_utts}}; files hold low-level noise."""
    rng = np.random.default_rng(seed)
    for spk, vids in layout.items():
        for vid, n in vids.items():
            d = root / spk / vid
            d.mkdir(parents=True, exist_ok=True)
            for i in range(n):
                dsp.write_waveform(d / f"{i + 1:05d}.wav", 0.01 * rng.standard_normal(int(duration_s * 16000)))
    return root


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    """The 20 speakers x 4 environments x 30 utterances synthetic corpus."""
    cached = os.environ.get(TOY_CORPUS_ENV)
    if cached and (Path(cached) / synthgen.SPEC_FILE).exists() and synthgen.read_spec(cached) == TOY_SPEC:
        return Path(cached), corpus.scan_corpus(cached)
    root = tmp_path_factory.mktemp("toy")
    manifest = synthgen.generate(TOY_SPEC, root)
    return root, manifest


@pytest.fixture
def small_corpus(tmp_path):
    layout = {f"id{10001 + s}": {f"vid{v}": 3 for v in range(3)} for s in range(4)}
    layout["id10099"] = {"only": 4}
    return write_fake_corpus(tmp_path / "small", layout)
