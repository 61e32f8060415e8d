"""Shared fixtures: synthetic source bank and small datasets."""

import numpy as np
import pytest

from bmfmvdr import scenes


@pytest.fixture(scope="session")
def source_bank(tmp_path_factory):
    root = tmp_path_factory.mktemp("sources")
    scenes.synth_source_library(root, n_speech=6, n_noise=4, seed=11)
    return root


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, source_bank):
    """A few 1 s scenes for fast training-path tests."""
    root = tmp_path_factory.mktemp("tinydata")
    train = scenes.build_dataset(6, (0.0, 10.0), 31, source_bank, root / "train",
                                 duration_s=1.0)
    val = scenes.build_dataset(3, (0.0, 10.0), 32, source_bank, root / "val",
                               duration_s=1.0)
    return {"train": train, "val": val, "root": root}
