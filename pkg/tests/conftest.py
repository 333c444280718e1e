from __future__ import annotations

import pytest

from conceptguide.data import generate_synthetic, label_space_for, sample_episode
from conceptguide.encoders import mock_bundle

# Lines recorded by the acceptance tests, echoed in the terminal summary
# so each check's verdict is visible in a plain `pytest -v` run.
ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_dataset():
    """2 diseases x 3 concepts, 10 images each: the cheapest dataset that
    still exercises train/val/test splits."""
    samples, bank = generate_synthetic(
        k=2, e_per_disease=3, shared_fraction=0.0, images_per_disease=10, noise=0.0, seed=3
    )
    return samples, bank, label_space_for(samples, bank)


@pytest.fixture(scope="session")
def tiny_bundle(tiny_dataset):
    _, _, label_space = tiny_dataset
    bundle = mock_bundle(seed=5, d=16)
    bundle.image_encoder.bind_label_space(label_space)
    return bundle


@pytest.fixture()
def train_pools(tiny_dataset):
    samples, _, _ = tiny_dataset
    episode = sample_episode(samples, 8, 1)
    by_id = {s.image_id: s for s in samples}
    train_pool = [by_id[i] for i in episode.unique_ids()]
    val_pool = [s for s in samples if s.split == "val"]
    test_pool = [s for s in samples if s.split == "test"]
    return train_pool, val_pool, test_pool
