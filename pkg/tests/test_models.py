import dataclasses

import pytest
import torch

from floodseg.backbones import BackboneSpec
from floodseg.errors import ContractError
from floodseg.models import (
    VARIANTS,
    EmbeddingProjector,
    ModelConfig,
    build_model,
    forward,
    project_embeddings,
)

from conftest import stub_model


def _count(model, prefixes=None):
    return sum(p.numel() for n, p in model.named_trainable_parameters()
               if prefixes is None or n.startswith(prefixes))


@pytest.mark.parametrize("variant", VARIANTS)
def test_output_is_per_pixel_distribution(variant):
    model = build_model(stub_model(variant, size=64), seed=0)
    probs = forward(model, torch.rand(2, 64, 64, 3))
    assert tuple(probs.shape) == (2, 64, 64, 10)
    assert torch.allclose(probs.sum(-1), torch.ones(2, 64, 64), atol=1e-5)
    assert (probs >= 0).all()


@pytest.mark.slow
@pytest.mark.parametrize("variant", VARIANTS)
def test_full_size_output(variant):
    cfg = ModelConfig(variant=variant, backbone=BackboneSpec.stub())
    probs = forward(build_model(cfg), torch.rand(1, 448, 448, 3))
    assert tuple(probs.shape) == (1, 448, 448, 10)
    assert (probs.sum(-1) - 1).abs().max() <= 1e-5


@pytest.mark.parametrize("variant", VARIANTS)
def test_batch_of_eight_on_meta_device(variant):
    cfg = ModelConfig(variant=variant, backbone=BackboneSpec.stub())
    with torch.device("meta"):
        model = build_model(cfg)
        out = model.eval()(torch.empty(8, 448, 448, 3))
    assert tuple(out.shape) == (8, 448, 448, 10)


def test_divisibility_checks():
    with pytest.raises(ContractError, match="p=14"):
        ModelConfig(variant="unet_fused", input_size=449)
    with pytest.raises(ContractError):
        ModelConfig(variant="deeplabv3", input_size=440)
    model = build_model(stub_model(size=64))
    with pytest.raises(ContractError):
        model(torch.rand(1, 64, 65, 3))


def test_config_validation():
    with pytest.raises(ContractError):
        ModelConfig(variant="segformer")
    with pytest.raises(ContractError):
        ModelConfig(num_classes=1)


def test_seeded_construction_is_reproducible():
    a, b = build_model(stub_model(size=64), 3), build_model(stub_model(size=64), 3)
    for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert na == nb and torch.equal(pa, pb)


@pytest.mark.parametrize("family", ["unet", "deeplabv3"])
def test_fusion_toggle_only_adds_fusion_parameters(family):
    plain = build_model(ModelConfig(variant=family, backbone=BackboneSpec.stub()))
    fused = build_model(ModelConfig(variant=family + "_fused", backbone=BackboneSpec.stub()))
    prefixes = fused.fusion_prefixes
    plain_rest = {n: p.shape for n, p in plain.named_parameters() if not n.startswith(prefixes)}
    fused_rest = {n: p.shape for n, p in fused.named_parameters() if not n.startswith(prefixes)}
    assert plain_rest == fused_rest
    # the stub backbone contributes no trainable parameters
    assert not any(n.startswith("backbone.") for n, _ in fused.named_trainable_parameters())
    assert _count(fused) > _count(plain)


def test_projector_parameter_count():
    cfg = ModelConfig(variant="unet_fused", backbone=BackboneSpec.stub())
    model = build_model(cfg)
    assert _count(model, ("projector.",)) == 384 * 512 + 512
    dl = build_model(dataclasses.replace(cfg, variant="deeplabv3_fused"))
    assert _count(dl, ("projector.",)) == 384 * 256 + 256


def test_project_embeddings_resamples():
    proj = EmbeddingProjector(384, 16)
    out = project_embeddings(proj, torch.rand(2, 32, 32, 384), (56, 56))
    assert tuple(out.shape) == (2, 56, 56, 16)
    with pytest.raises(ContractError):
        project_embeddings(proj, torch.rand(1, 4, 4, 384), (0, 4))


def test_training_leaves_backbone_untouched():
    model = build_model(stub_model(size=64))
    before = model.backbone_digest()
    opt = torch.optim.Adam(model.trainable_parameters(), lr=1e-2)
    model.train()
    loss = model(torch.rand(2, 64, 64, 3))[..., 1].mean()
    loss.backward()
    opt.step()
    assert model.backbone_digest() == before
    assert not model.backbone.training
