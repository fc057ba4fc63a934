import numpy as np
import pytest

from progseg.core import config
from progseg.managers.model_manager import HeadSpec, ModelSpec
from progseg.managers.raster_manager import (
    CANONICAL_BANDS,
    BandId,
    LabelMask,
    MultispectralImage,
    ValueDomain,
)
from progseg.managers.synth_manager import SceneParams

RGB = [BandId.BLUE, BandId.GREEN, BandId.RED]
RGBN = RGB + [BandId.NIR]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_image(rng):
    def _make(height=16, width=16, bands=CANONICAL_BANDS, domain=ValueDomain.UNIT_NORMALIZED):
        data = rng.random((height, width, len(bands)), dtype=np.float32)
        return MultispectralImage(data=data, bands=list(bands), value_domain=domain)

    return _make


@pytest.fixture
def make_mask(rng):
    def _make(height=16, width=16):
        return LabelMask(rng.integers(0, config.N_CLASSES, size=(height, width)))

    return _make


@pytest.fixture
def small_head():
    return HeadSpec(upsample_channels=8, block_channels=(8, 8), dropout_rate=0.1)


@pytest.fixture
def rgb_spec(small_head):
    return ModelSpec(in_channels=3, head=small_head)


@pytest.fixture
def small_scene():
    """128 x 128 scenes with a few small fields; cheap enough for CPU training tests."""
    return SceneParams(size=(128, 128), n_pivots=2, n_floods=2, pivot_radius=(8, 16), flood_side=(12, 28))


@pytest.fixture(autouse=True)
def isolated_cache(tmp_path, monkeypatch):
    """Keeps RUNS_DIR / LOG_DIR inside the test's temporary directory."""
    monkeypatch.setattr(config, "CACHE_DIR", tmp_path / "cache")
    monkeypatch.setattr(config, "RUNS_DIR", tmp_path / "cache" / "runs")
    monkeypatch.setattr(config, "LOG_DIR", tmp_path / "cache" / "logs")
