import numpy as np
import pytest
import torch

from wgnet.data_io import SyntheticConfig, generate_synthetic
from wgnet.geometry import default_layout, enumerate_paths, select_forward_paths
from wgnet.training import BandConfig, configure_torch, prepare_dataset

configure_torch()
torch.manual_seed(0)


@pytest.fixture(scope="session")
def geometry():
    layout, catalog, plate = default_layout()
    paths = enumerate_paths(layout.n_transducers)
    fwd = select_forward_paths(paths, layout)
    return layout, catalog, plate, paths, fwd


@pytest.fixture(scope="session")
def tiny_store(tmp_path_factory):
    """Small, fast store: full 28-location catalog, 12 pristine samples, T=512."""
    cfg = SyntheticConfig(t_samples=512, noise_level=0.01, pristine_count=12)
    root = tmp_path_factory.mktemp("tiny_store")
    return generate_synthetic(cfg, seed=123, store_dir=root / "store")


@pytest.fixture(scope="session")
def tiny_dataset(tiny_store):
    return prepare_dataset(tiny_store, "A", seed=0, band_cfg=BandConfig(n_bins=16))


@pytest.fixture(scope="session")
def tiny_dataset64(tiny_store):
    return prepare_dataset(
        tiny_store, "A", seed=0, band_cfg=BandConfig(n_bins=16), dtype=torch.float64
    )


@pytest.fixture()
def rng():
    return np.random.default_rng(20240817)
