"""
Tests for the training objective, schedule, loop, sweep and gradient check
"""

import csv
import itertools
import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from floorspace.dataset import HeightNormalizer, TileSet, build_tileset
from floorspace.errors import DatasetError, ShapeError, TrainingDivergedError, ValidationError
from floorspace.metrics import footprint_metrics, height_metrics
from floorspace.model import FloorspaceModel, ModelConfig
from floorspace.training import (
    TrainConfig,
    analytic_gradients,
    check_gradients,
    gradient_check,
    learning_rate,
    loss,
    random_batch,
    scheduled_learning_rates,
    sweep_task_coefficients,
    train,
    write_history_csv,
)
from tests.synthetic import make_city

CFG = TrainConfig()


def _planes(batch=2, size=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    mask = (torch.rand(batch, 1, size, size, generator=g) < 0.4).float()
    height = torch.rand(batch, 1, size, size, generator=g) * 0.3 * mask
    return mask, height, torch.ones_like(mask)


def _small_tileset(seed=2, size=64, T=16, val_ratio=0.25, **kwargs):
    city = make_city(width=size, height=size, n_buildings=24, seed=seed)
    return build_tileset(city.stack, city.labels, T, min_building_fraction=0.0, val_ratio=val_ratio,
                         seed=seed, **kwargs)


def test_default_weights():
    assert CFG.footprint_weight == 0.1
    assert CFG.height_weight == 1.0


def test_zero_logits_give_ln2():
    mask, height, valid = _planes()
    terms = loss(torch.zeros_like(mask), height, mask, height, valid, CFG)
    assert abs(terms.footprint.item() - math.log(2)) < 1e-6


def test_perfect_height_gives_zero_loss():
    mask, height, valid = _planes()
    terms = loss(None, height.clone(), mask, height, valid, CFG)
    assert terms.height.item() == 0.0
    assert terms.footprint.item() == 0.0


def _one_building_pixel(residual):
    mask = torch.zeros(1, 1, 2, 2)
    mask[0, 0, 0, 0] = 1
    target = mask * 0.2
    return target + residual * mask, mask, target


def test_smooth_l1_quadratic_branch():
    pred, mask, target = _one_building_pixel(0.5)
    terms = loss(None, pred, mask, target, torch.ones_like(mask), replace(CFG, smooth_l1_delta=1.0))
    assert terms.height.item() == pytest.approx(0.125)


def test_default_delta_is_one_metre_of_normalized_height():
    assert CFG.smooth_l1_delta == pytest.approx(HeightNormalizer().normalize(np.array(1.0)))
    pred, mask, target = _one_building_pixel(0.05)
    terms = loss(None, pred, mask, target, torch.ones_like(mask), CFG)
    assert terms.height.item() == pytest.approx(0.05 - CFG.smooth_l1_delta / 2, rel=1e-5)


def test_height_loss_ignores_background_and_invalid_pixels():
    mask, height, valid = _planes()
    pred = height.clone()
    pred[mask == 0] = 5.0
    valid[0, 0, 0, 0] = 0
    pred[0, 0, 0, 0] = 9.0
    assert loss(None, pred, mask, height, valid, CFG).height.item() == 0.0


def test_no_building_pixels_gives_zero_height_loss_with_graph():
    mask = torch.zeros(1, 1, 4, 4)
    pred = torch.randn(1, 1, 4, 4, requires_grad=True)
    terms = loss(None, pred, mask, mask, torch.ones_like(mask), CFG)
    assert terms.height.item() == 0.0
    terms.total.backward()
    assert torch.all(pred.grad == 0)


def test_loss_input_checks():
    mask, height, valid = _planes()
    with pytest.raises(ValidationError):
        loss(None, height, mask * 0.5, height, valid, CFG)
    with pytest.raises(ShapeError):
        loss(torch.zeros(2, 1, 4, 4), height, mask, height, valid, CFG)


def test_train_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(footprint_weight=0.0, height_weight=0.0)
    with pytest.raises(ValidationError):
        TrainConfig(lr_decay_epoch=10, epochs=10)
    with pytest.raises(ValidationError):
        TrainConfig(height_task_coefficient_grid=(0.1, 0.0))
    with pytest.raises(ValidationError):
        TrainConfig(augment="mixup")


def test_step_schedule():
    assert learning_rate(49, CFG) == 0.001
    assert learning_rate(50, CFG) == pytest.approx(0.0001)

    rates = scheduled_learning_rates(CFG)
    assert len(rates) == 100
    assert all(r == pytest.approx(1e-3) for r in rates[:50])
    assert all(r == pytest.approx(1e-4) for r in rates[50:])
    assert rates == pytest.approx([learning_rate(e, CFG) for e in range(100)])


def test_history_and_csv(tmp_path):
    tiles = _small_tileset()
    cfg = TrainConfig(epochs=3, lr_decay_epoch=2, batch_size=4)
    result = train(FloorspaceModel(ModelConfig(depth=1, base_channels=4)), tiles, cfg, progress=False)

    assert [r.epoch for r in result.history] == [0, 1, 2]
    assert result.history[2].lr == pytest.approx(1e-4)
    assert all(r.val_dice is not None for r in result.history)

    path = tmp_path / "history.csv"
    write_history_csv(result.history, path)
    rows = list(csv.DictReader(path.open()))
    assert len(rows) == 3
    assert set(rows[0]) >= {"epoch", "lr", "train_total", "train_fp", "train_h", "val_total", "val_dice"}


def test_single_task_history_has_null_dice(tmp_path):
    tiles = _small_tileset()
    cfg = TrainConfig(epochs=1, lr_decay_epoch=0, batch_size=4)
    result = train(FloorspaceModel(ModelConfig(depth=1, base_channels=2, head="height_only")), tiles, cfg,
                   progress=False)
    assert result.history[0].val_dice is None
    assert result.history[0].train_fp == 0.0

    write_history_csv(result.history, tmp_path / "h.csv")
    assert "null" in (tmp_path / "h.csv").read_text()


def test_training_is_deterministic():
    tiles = _small_tileset()
    cfg = TrainConfig(epochs=2, lr_decay_epoch=1, batch_size=4, augment="affine", seed=5)

    runs = []
    for _ in range(2):
        model = FloorspaceModel(ModelConfig(depth=1, base_channels=4), seed=1)
        runs.append(train(model, tiles, cfg, progress=False))
    for pa, pb in zip(runs[0].model.parameters(), runs[1].model.parameters()):
        assert torch.equal(pa, pb)
    assert runs[0].history == runs[1].history


def test_empty_train_set():
    tiles = _small_tileset()
    with pytest.raises(DatasetError):
        train(FloorspaceModel(ModelConfig(depth=1, base_channels=2)), TileSet([], tiles.val, tiles.manifest),
              TrainConfig(epochs=1, lr_decay_epoch=0), progress=False)


def test_divergence_names_epoch_and_step():
    tiles = _small_tileset()

    def poisoned(x):
        return x * float("nan")

    with pytest.raises(TrainingDivergedError, match="epoch 0 step 0"):
        train(FloorspaceModel(ModelConfig(depth=1, base_channels=2)), tiles,
              TrainConfig(epochs=2, lr_decay_epoch=1), input_transform=poisoned, progress=False)


def test_sweep_picks_highest_dice():
    tiles = _small_tileset()
    cfg = TrainConfig(epochs=1, lr_decay_epoch=0, batch_size=4, height_task_coefficient_grid=(0.1, 1.0))
    entries, best = sweep_task_coefficients(tiles, ModelConfig(depth=1, base_channels=2), cfg, progress=False)

    assert [e.coefficient for e in entries] == [0.1, 1.0]
    dices = [e.val_dice for e in entries]
    assert entries[best].val_dice == max(dices)


# Gradient check ------------------------------------------------------------

def test_one_by_one_conv_gradient_is_input():
    conv = torch.nn.Conv2d(1, 1, kernel_size=1).double()
    x = torch.randn(1, 1, 4, 4, dtype=torch.float64)
    params = {"weight": conv.weight}
    grads = analytic_gradients(lambda trace: conv(x)[0, 0, 2, 1], params)
    assert grads["weight"].item() == x[0, 0, 2, 1].item()


def test_finite_differences_on_linear_model():
    conv = torch.nn.Conv2d(3, 2, kernel_size=1).double()
    x = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    report = check_gradients(lambda trace: (conv(x) ** 2).sum(), dict(conv.named_parameters()), samples=8)
    assert report.max_rel_error < 1e-6
    assert report.groups["weight"].checked == 6
    assert report.groups["bias"].checked == 2


def test_depth2_multitask_gradients_match():
    config = ModelConfig(in_channels=6, depth=2, base_channels=8)
    model = FloorspaceModel(config, seed=0)
    report = gradient_check(model, random_batch(config, batch=2, size=16, seed=0), CFG, step=1e-3, samples=32)

    assert report.max_rel_error < 1e-3
    assert report.passed(1e-3), report.failures(1e-3)
    params = dict(model.named_parameters())
    for name, group in report.groups.items():
        assert group.checked == min(32, params[name].numel()), name
    assert next(model.parameters()).dtype == torch.float32


def test_kinked_entries_are_retried_with_smaller_steps():
    w = torch.nn.Parameter(torch.zeros(1, dtype=torch.float64))

    def objective(trace):
        if trace is not None:
            trace.append(w > 5e-4)
        return (torch.relu(w - 5e-4) + w ** 2 + 3 * w).sum()

    report = check_gradients(objective, {"w": w}, step=1e-3, samples=1)
    group = report.groups["w"]
    assert (group.checked, group.skipped, group.refined) == (1, 0, 1)
    assert group.max_rel_error < 1e-8
    assert w.item() == 0.0


def test_group_without_a_stable_entry_fails():
    conv = torch.nn.Conv2d(1, 1, kernel_size=1).double()
    x = torch.randn(1, 1, 4, 4, dtype=torch.float64)
    calls = itertools.count()

    def objective(trace):
        if trace is not None:
            trace.append(torch.tensor(next(calls)))
        return (conv(x) ** 2).sum()

    report = check_gradients(objective, dict(conv.named_parameters()), samples=4)
    assert report.groups["weight"].checked == 0
    assert report.groups["weight"].skipped == 1
    assert report.max_rel_error == 0.0
    assert not report.passed(1.0)
    assert report.failures(1.0)["weight"].startswith("only 0 of 1 entries checked")


def test_zero_height_weight_disconnects_height_head():
    config = ModelConfig(depth=1, base_channels=4)
    net = FloorspaceModel(config).double()
    x, mask, height, valid = random_batch(config, size=8)
    cfg = replace(CFG, height_weight=0.0)
    params = dict(net.named_parameters())
    grads = analytic_gradients(lambda trace: loss(*net(x), mask, height, valid, cfg).total, params)
    assert torch.all(grads["height_head.weight"] == 0)
    assert torch.any(grads["footprint_head.weight"] != 0)


def test_doubling_height_weight_doubles_height_head_gradients():
    config = ModelConfig(depth=1, base_channels=4)
    net = FloorspaceModel(config, seed=2)
    x, mask, height, valid = (t.float() for t in random_batch(config, size=8))
    params = dict(net.named_parameters())

    def grads(weight):
        cfg = replace(CFG, height_weight=weight)
        return analytic_gradients(lambda trace: loss(*net(x), mask, height, valid, cfg).total, params)

    single, double = grads(1.0), grads(2.0)
    for name in ("height_head.weight", "height_head.bias"):
        assert torch.equal(double[name], 2 * single[name])


@pytest.mark.slow
def test_overfits_small_tile_set():
    """8 tiles of 32 px; 300 full-batch steps should memorize footprint and height"""
    city = make_city(width=128, height=64, n_buildings=30, seed=6, noise=0.005)
    normalizer = HeightNormalizer()
    tiles = build_tileset(city.stack, city.labels, 32, min_building_fraction=0.0, val_ratio=0.125, seed=0,
                          normalizer=normalizer)
    everything = TileSet(train=tiles.train + tiles.val, val=[], manifest=tiles.manifest)
    assert len(everything.train) == 8

    cfg = TrainConfig(epochs=300, lr_decay_epoch=299, lr_decay_factor=1.0, batch_size=8, seed=0)
    model = FloorspaceModel(ModelConfig(depth=2, base_channels=16), seed=0)
    train(model, everything, cfg, progress=False)

    x = torch.from_numpy(np.stack([t.input for t in everything.train]))
    prob, _ = model.infer(x)
    model.eval()
    with torch.no_grad():
        _, raw_h = model(x)
    ref_mask = np.stack([t.mask for t in everything.train])
    ref_h = normalizer.denormalize(np.stack([t.height_norm for t in everything.train]))

    dice = footprint_metrics((prob[:, 0].numpy() >= 0.5).astype(np.uint8), ref_mask).dice
    mae = height_metrics(normalizer.denormalize(raw_h[:, 0].numpy()), ref_h, ref_mask).mae_m
    assert dice >= 0.95
    assert mae <= 2.0
