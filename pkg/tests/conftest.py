import numpy as np
import pytest

from spinrecon import synthdata as sd


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """24-view 32x32 sequence shared by the fast trainer/CLI tests."""
    out = tmp_path_factory.mktemp("data") / "small"
    cfg = sd.GenConfig(out_dir=str(out), n_views=24, n_val=4, size=32,
                       supersample=2, seed=11)
    sd.generate_sequence(cfg)
    return str(out)


@pytest.fixture(scope="session")
def small_manifest(small_dataset):
    return sd.load_manifest(small_dataset)


@pytest.fixture(scope="session")
def desk_dataset(tmp_path_factory):
    """Desk-scale 54-view 64x64 sequence used by the acceptance suite."""
    out = tmp_path_factory.mktemp("data") / "desk"
    cfg = sd.GenConfig(out_dir=str(out), n_views=54, n_val=6, size=64,
                       supersample=2, seed=7)
    sd.generate_sequence(cfg)
    return str(out)


@pytest.fixture(scope="session")
def desk_manifest(desk_dataset):
    return sd.load_manifest(desk_dataset)
