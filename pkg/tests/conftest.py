import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.function_scoped_fixture, HealthCheck.too_slow],
)
settings.load_profile("default")

from hcache.model import ModelConfig, init_model  # noqa: E402
from hcache.storage import DevicePool, StorageManager  # noqa: E402


@pytest.fixture(scope="session")
def toy_weights():
    return init_model(ModelConfig(max_seq=16384), seed=0)


@pytest.fixture(scope="session")
def small_weights():
    return init_model(ModelConfig(n_layers=4, d_hidden=64, n_heads=8, d_ffn=256,
                                  vocab_size=128), seed=3)


@pytest.fixture
def make_storage(tmp_path):
    counter = iter(range(10_000))

    def make(n_devices=1, bandwidth=None, buffer_bytes=256 * 1024 * 1024):
        root = tmp_path / f"pool{next(counter)}"
        return StorageManager(DevicePool.under(root, n_devices, bandwidth), buffer_bytes)

    return make
