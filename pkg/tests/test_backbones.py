import pytest
import torch

from floodseg.backbones import (
    BackboneSpec,
    StubBackbone,
    ViTAdapter,
    assert_frozen,
    build_backbone,
    extract_patch_embeddings,
    parameter_digest,
)
from floodseg.errors import BackboneLoadError, ContractError


@pytest.fixture(scope="module")
def tiny_vit_dir(tmp_path_factory):
    """Randomly initialized ViT-S/14-shaped checkpoint (2 layers) on disk."""
    transformers = pytest.importorskip("transformers")
    cfg = transformers.Dinov2Config(hidden_size=384, num_attention_heads=6, num_hidden_layers=2, intermediate_size=512,
                                    patch_size=14, image_size=224)
    torch.manual_seed(0)
    path = tmp_path_factory.mktemp("vit")
    transformers.Dinov2Model(cfg).save_pretrained(path)
    return str(path)


def test_stub_grid_shape():
    bb = build_backbone(BackboneSpec.stub())
    grid = extract_patch_embeddings(bb, torch.rand(2, 448, 448, 3))
    assert grid.shape == (2, 32, 32, 384)
    assert grid.patch_size == 14 and grid.source == "deterministic_stub"


def test_stub_is_deterministic_and_seeded():
    x = torch.rand(1, 56, 56, 3)
    a = extract_patch_embeddings(StubBackbone(BackboneSpec.stub(seed=1)), x).data
    b = extract_patch_embeddings(StubBackbone(BackboneSpec.stub(seed=1)), x).data
    c = extract_patch_embeddings(StubBackbone(BackboneSpec.stub(seed=2)), x).data
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_stub_features_depend_on_content():
    bb = StubBackbone(BackboneSpec.stub(patch_size=8, embed_dim=32))
    x = torch.zeros(1, 16, 16, 3)
    y = x.clone()
    y[:, :8, :8] = 1.0
    gx, gy = extract_patch_embeddings(bb, x).data, extract_patch_embeddings(bb, y).data
    assert not torch.allclose(gx[0, 0, 0], gy[0, 0, 0])
    assert torch.allclose(gx[0, 1, 1], gy[0, 1, 1])


@pytest.mark.parametrize("hw", [(449, 448), (448, 449), (15, 14)])
def test_indivisible_input_names_patch_size(hw):
    bb = build_backbone(BackboneSpec.stub())
    with pytest.raises(ContractError, match="p=14"):
        extract_patch_embeddings(bb, torch.rand(1, *hw, 3))


def test_stub_parameters_are_frozen():
    bb = build_backbone(BackboneSpec.stub())
    assert all(not p.requires_grad for p in bb.parameters())
    bb.train()
    assert not bb.training


def test_unfrozen_spec_rejected():
    with pytest.raises(ContractError):
        BackboneSpec(frozen=False)
    with pytest.raises(ContractError):
        BackboneSpec(kind="resnet")


def test_digest_detects_changes():
    bb = build_backbone(BackboneSpec.stub())
    before = parameter_digest(bb)
    assert assert_frozen(before, parameter_digest(bb))
    with torch.no_grad():
        bb.projection[0, 0] += 1e-6
    assert not assert_frozen(before, parameter_digest(bb))


def test_vit_adapter_shapes_and_frozen(tiny_vit_dir):
    bb = build_backbone(BackboneSpec(weights_locator=tiny_vit_dir))
    assert isinstance(bb, ViTAdapter)
    assert all(not p.requires_grad for p in bb.parameters())
    grid = extract_patch_embeddings(bb, torch.rand(1, 448, 448, 3))
    assert grid.shape == (1, 32, 32, 384)
    assert torch.isfinite(grid.data).all()


def test_vit_adapter_drops_class_token(tiny_vit_dir):
    bb = build_backbone(BackboneSpec(weights_locator=tiny_vit_dir))
    x = torch.rand(1, 3, 28, 28)
    hidden = bb.model(pixel_values=(x - bb.mean) / bb.std).last_hidden_state
    grid = bb(x)
    assert torch.allclose(grid.reshape(1, 4, 384), hidden[:, 1:])


def test_vit_adapter_load_errors(tmp_path, tiny_vit_dir):
    with pytest.raises(BackboneLoadError):
        build_backbone(BackboneSpec(weights_locator=str(tmp_path / "missing")))
    with pytest.raises(BackboneLoadError, match="patch"):
        build_backbone(BackboneSpec(weights_locator=tiny_vit_dir, patch_size=16))
