import dataclasses

import pytest

from floodseg.backbones import BackboneSpec
from floodseg.config import TrainingConfig
from floodseg.data import scan_dataset
from floodseg.models import ModelConfig
from floodseg.synthetic import make_synthetic_dataset

SYN_SIZE = 64
SYN_CLASSES = 4


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    make_synthetic_dataset(8, SYN_SIZE, SYN_CLASSES, 0, root, "train")
    make_synthetic_dataset(4, SYN_SIZE, SYN_CLASSES, 0, root, "val")
    make_synthetic_dataset(4, SYN_SIZE, SYN_CLASSES, 0, root, "test")
    return root


@pytest.fixture(scope="session")
def train_index(synth_root):
    return scan_dataset(synth_root, "train")


@pytest.fixture(scope="session")
def val_index(synth_root):
    return scan_dataset(synth_root, "val")


def stub_model(variant="unet_fused", size=SYN_SIZE, patch=8, **kw) -> ModelConfig:
    return ModelConfig(variant=variant, input_size=size, backbone=BackboneSpec.stub(patch_size=patch), **kw)


def small_cfg(out, epochs=2, **kw) -> TrainingConfig:
    """Tiny but complete training setup on 64 x 64 synthetic inputs."""
    model = kw.pop("model", None) or stub_model(unet_channels=(16, 32, 64), bottleneck_channels=64)
    cfg = TrainingConfig(epochs=epochs, checkpoint_dir=str(out), model=model, train_batch=4, eval_batch=4)
    return dataclasses.replace(cfg, **kw)
