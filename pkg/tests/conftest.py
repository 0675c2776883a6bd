import pytest

from obow.data import make_shapes_dataset
from obow.trainer import TrainConfig


def tiny_config(tmp_path, **kw) -> TrainConfig:
    """Small, fast configuration on 64x64 images."""
    base = dict(
        stage_widths=(4, 8), convs_per_stage=0, vocab_size=8, batch_size=4, epochs=2,
        output_dir=str(tmp_path / "run"), dtype="float64", seed=0,
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_dataset():
    return make_shapes_dataset(n_images=12, size=64, seed=3, n_classes=4)
