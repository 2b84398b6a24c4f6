import dataclasses
import json
import math

import pytest
import torch

from floodseg.config import TrainingConfig, load_config, save_config
from floodseg.errors import CheckpointError, ContractError, DivergenceError
from floodseg.models import build_model
from floodseg.training import (
    ABLATION_VARIANTS,
    SchedulerState,
    ablation_loss,
    epoch_batches,
    fit,
    load_checkpoint,
    load_model,
    lr_on_plateau,
    replay_lr,
    resolve_loss,
    save_checkpoint,
)

from conftest import small_cfg, stub_model


def test_scheduler_replay_on_flat_trace():
    lrs = replay_lr([1.0] * 11, TrainingConfig())
    assert lrs[:5] == [1e-3] * 5
    assert lrs[5:10] == pytest.approx([7.5e-4] * 5)
    assert lrs[10] == pytest.approx(5.625e-4)


def test_scheduler_resets_on_strict_improvement():
    cfg = TrainingConfig(plateau_patience=2)
    lrs = replay_lr([1.0, 1.0, 0.9, 0.9, 0.9, 0.9], cfg)
    # equal loss is not an improvement; 0.9 resets the counter
    assert lrs == pytest.approx([1e-3, 1e-3, 1e-3, 1e-3, 7.5e-4, 7.5e-4])


def test_scheduler_rejects_nan():
    with pytest.raises(DivergenceError):
        lr_on_plateau(SchedulerState(1e-3), float("nan"), TrainingConfig())


def test_epoch_batches_are_seeded_permutations():
    a = epoch_batches(10, 4, 0, 1)
    assert [len(b) for b in a] == [4, 4, 2]
    assert sorted(sum(a, [])) == list(range(10))
    assert a == epoch_batches(10, 4, 0, 1)
    assert a != epoch_batches(10, 4, 0, 2)


def test_config_round_trip(tmp_path):
    cfg = small_cfg(tmp_path, seed=5)
    save_config(cfg, tmp_path / "c.json")
    assert load_config(tmp_path / "c.json") == cfg


def test_config_rejects_bad_input(tmp_path):
    (tmp_path / "bad.json").write_text("{nope")
    with pytest.raises(ContractError):
        load_config(tmp_path / "bad.json")
    with pytest.raises(ContractError):
        TrainingConfig.from_dict({"learning_rate": 0.1})
    with pytest.raises(ContractError):
        TrainingConfig(plateau_factor=1.5)


def test_checkpoint_round_trip(tmp_path):
    cfg = small_cfg(tmp_path)
    model = build_model(cfg.model, seed=1)
    path = save_checkpoint(tmp_path / "m.pt", model, cfg, 3, val_metrics={"val_miou": 0.5})
    manifest = json.loads((tmp_path / "m.pt.json").read_text())
    assert manifest["variant"] == "unet_fused" and manifest["epoch"] == 3
    assert not any(k.startswith("backbone.") for k in torch.load(path, weights_only=True)["model"])
    restored, state = load_model(path)
    assert state.epoch == 3
    x = torch.rand(1, 64, 64, 3)
    model.eval()
    with torch.no_grad():
        assert torch.equal(model(x), restored(x))


def test_checkpoint_integrity_and_compatibility(tmp_path):
    cfg = small_cfg(tmp_path)
    path = save_checkpoint(tmp_path / "m.pt", build_model(cfg.model), cfg, 1)
    other = dataclasses.replace(cfg.model, variant="unet")
    with pytest.raises(CheckpointError, match="variant"):
        load_checkpoint(path, other)
    data = bytearray(path.read_bytes())
    data[-10] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="integrity"):
        load_checkpoint(path)
    (tmp_path / "m.pt.json").unlink()
    with pytest.raises(CheckpointError, match="manifest"):
        load_checkpoint(path)


def test_zero_epochs_returns_initial_model(tmp_path, train_index):
    cfg = small_cfg(tmp_path, epochs=0)
    result = fit(cfg, train_index)
    assert len(result.history) == 0
    assert result.best_checkpoint is None and result.last_checkpoint.exists()
    ref = build_model(cfg.model, seed=cfg.seed)
    for k, v in ref.state_dict().items():
        assert torch.equal(v, result.model.state_dict()[k])


def test_fit_writes_history_and_checkpoints(tmp_path, train_index, val_index):
    result = fit(small_cfg(tmp_path, epochs=2), train_index, val_index)
    assert [r.epoch for r in result.history.records] == [1, 2]
    assert (tmp_path / "history.csv").read_text().startswith("epoch,train_loss")
    assert len(json.loads((tmp_path / "history.json").read_text())) == 2
    assert result.best_checkpoint.exists() and result.last_checkpoint.exists()
    assert result.backbone_frozen
    for rec in result.history.records:
        assert math.isfinite(rec.train_loss) and sorted(sum(rec.batches, [])) == train_index.sample_ids


def test_fit_is_reproducible(tmp_path, train_index):
    a = fit(small_cfg(tmp_path / "a", epochs=2, seed=3), train_index)
    b = fit(small_cfg(tmp_path / "b", epochs=2, seed=3), train_index)
    assert a.history.to_list() == b.history.to_list()
    c = fit(small_cfg(tmp_path / "c", epochs=1, seed=4), train_index)
    assert c.history.records[0].batches != a.history.records[0].batches


def test_resume_matches_uninterrupted_run(tmp_path, train_index):
    straight = fit(small_cfg(tmp_path / "s", epochs=3), train_index)
    fit(small_cfg(tmp_path / "r", epochs=2), train_index)
    resumed = fit(small_cfg(tmp_path / "r", epochs=3), train_index, resume=True)
    assert resumed.history.to_list() == straight.history.to_list()


def test_auto_alpha_from_counts(train_index):
    cfg = TrainingConfig(model=stub_model(), loss=dataclasses.replace(TrainingConfig().loss, alpha="auto"))
    loss = resolve_loss(cfg, train_index)
    assert len(loss.alpha) == 10 and sum(loss.alpha) == pytest.approx(1.0)
    # absent classes get the largest weights
    assert min(loss.alpha[4:]) > max(loss.alpha[:4])


def test_alpha_length_must_match_classes(train_index):
    cfg = TrainingConfig(model=stub_model(num_classes=4))
    with pytest.raises(ContractError):
        resolve_loss(cfg, train_index)


def test_ablation_mapping():
    base = TrainingConfig().loss
    maps = {v: ablation_loss(base, v, 10) for v in ABLATION_VARIANTS}
    assert maps["dice"].w == 1.0
    assert maps["focal"].w == 0.0 and maps["focal"].alpha == (0.1,) * 10
    assert maps["modified_focal"].w == 0.0 and maps["modified_focal"].alpha == base.alpha
    assert maps["dice_modified_focal"].w == 0.5 and maps["dice_modified_focal"].alpha == base.alpha
    with pytest.raises(ContractError):
        ablation_loss(base, "tversky", 10)
