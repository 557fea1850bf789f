import sys

import numpy as np
import pytest

from mpinfilter.data import AudioClip, LabeledDataset
from mpinfilter.filterbank import design_bank
from mpinfilter.trainer import TrainConfig, compute_energies, train

from oracles import synthetic_clip


@pytest.fixture(scope="session")
def bank():
    return design_bank()


@pytest.fixture(scope="session")
def synth_dataset():
    """Low-band tones against high- and mid-band tones; 36 train / 12 test."""
    rng = np.random.default_rng(1234)
    kinds = ["low", "high", "low", "mid"] * 12
    clips = [AudioClip(synthetic_clip(k, rng), 16000, f"{k}{i}#0", k) for i, k in enumerate(kinds)]
    labels = np.array([int(k == "low") for k in kinds])
    split = np.array(["train"] * 36 + ["test"] * 12)
    return LabeledDataset(clips, labels, split, "low", {})


@pytest.fixture(scope="session")
def synth_energies(synth_dataset, bank):
    return compute_energies(synth_dataset.clips, bank, "mp")


@pytest.fixture(scope="session")
def synth_model(synth_dataset, bank, synth_energies):
    model, result = train(synth_dataset, bank, TrainConfig(epochs=40, seed=3), energies=synth_energies)
    return model


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acceptance.RESULTS):
        terminalreporter.write_line(acceptance.RESULTS[n])
