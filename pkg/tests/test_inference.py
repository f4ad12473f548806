"""
Tests for tiled prediction and two-stage composition
"""

import math

import numpy as np
import pytest
import torch

from floorspace.errors import ConditioningError, UnsupportedVariantError, ValidationError
from floorspace.ingest import BandStack, BandStats, standardize
from floorspace.inference import compose_two_stage, predict, predict_two_stage, prepare_stack
from floorspace.model import FloorspaceModel, ModelConfig
from floorspace.raster import Raster
from tests.synthetic import grid, make_city


def _constant_model(head="multitask", fp_bias=0.0, h_bias=0.0, in_channels=6, meta=None):
    """Zero kernels everywhere so each head outputs its bias"""
    model = FloorspaceModel(ModelConfig(in_channels=in_channels, depth=1, base_channels=2, head=head), meta=meta)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
        if model.footprint_head is not None:
            model.footprint_head.bias.fill_(fp_bias)
        if model.height_head is not None:
            model.height_head.bias.fill_(h_bias)
    return model


def _standardized(size=32, seed=0):
    return standardize(make_city(width=size, height=size, seed=seed).stack)


def test_prediction_covers_whole_mosaic():
    stack = standardize(BandStack(Raster(
        np.random.default_rng(0).standard_normal((6, 512, 512)).astype(np.float32), grid(512, 512)
    )))
    pred = predict(_constant_model(fp_bias=1.0, h_bias=0.1), stack, 256)
    for raster in (pred.probability, pred.mask, pred.height_m):
        assert (raster.height, raster.width) == (512, 512)
        assert raster.transform == stack.raster.transform


def test_partial_edge_tiles_are_padded_and_cropped():
    stack = _standardized(size=40)
    pred = predict(FloorspaceModel(ModelConfig(depth=2, base_channels=2)), stack, 16)
    assert (pred.mask.height, pred.mask.width) == (40, 40)
    assert not np.isnan(pred.probability.data).any()


def test_below_threshold_gives_no_building():
    pred = predict(_constant_model(fp_bias=math.log(0.49 / 0.51), h_bias=0.2), _standardized(), 16)
    assert np.allclose(pred.probability.data, 0.49, atol=1e-6)
    assert pred.mask.data.sum() == 0
    assert np.all(pred.height_m.data == 0)


def test_heights_in_meters_clamped_at_scale():
    pred = predict(_constant_model(fp_bias=3.0, h_bias=0.25), _standardized(), 16)
    assert np.all(pred.mask.data == 1)
    assert np.allclose(pred.height_m.data, 100.0)

    pred = predict(_constant_model(fp_bias=3.0, h_bias=7.0), _standardized(), 16)
    assert pred.height_m.data.max() == 400.0


def test_nodata_pixels_have_nan_probability():
    stack = _standardized()
    stack.raster.data[4, 5, 6] = np.nan
    pred = predict(_constant_model(fp_bias=3.0, h_bias=0.1), stack, 16)
    assert np.isnan(pred.probability.data[0, 5, 6])
    assert pred.mask.data[0, 5, 6] == 0
    assert pred.height_m.data[0, 5, 6] == 0


def test_checkpoint_stats_standardize_raw_stacks():
    city = make_city(width=32, height=32, seed=1)
    stats = standardize(city.stack).stats
    model = _constant_model(meta={"band_stats": stats.to_dict()})

    prepared = prepare_stack(city.stack, model)
    assert prepared.stats == stats
    assert prepare_stack(prepared, model) is prepared

    other = BandStats(mean=tuple(m + 1 for m in stats.mean), std=stats.std)
    with pytest.raises(ConditioningError):
        prepare_stack(standardize(city.stack, other), model)
    with pytest.raises(ConditioningError):
        prepare_stack(city.stack, _constant_model())


def test_predict_needs_multitask_model():
    with pytest.raises(ValidationError):
        predict(_constant_model(head="footprint_only"), _standardized(), 16)


def test_compose_a1_adds_probability_channel():
    stage1 = _constant_model(head="footprint_only", fp_bias=0.0)
    build, config = compose_two_stage(stage1, "A1", ModelConfig(depth=2, base_channels=3))
    assert config.in_channels == 7
    assert config.head == "height_only"
    assert (config.depth, config.base_channels) == (2, 3)

    x = torch.randn(1, 6, 16, 16)
    augmented = build(x)
    assert tuple(augmented.shape) == (1, 7, 16, 16)
    assert torch.equal(augmented[:, :6], x)
    assert torch.all(augmented[:, 6] == 0.5)


@pytest.mark.parametrize("bias, keeps", [(10.0, True), (-10.0, False)])
def test_compose_a2_clips_bands(bias, keeps):
    build, config = compose_two_stage(_constant_model(head="footprint_only", fp_bias=bias), "A2")
    assert config.in_channels == 6
    x = torch.randn(2, 6, 16, 16)
    clipped = build(x)
    if keeps:
        assert torch.equal(clipped, x)
    else:
        assert torch.all(clipped == 0)


def test_compose_rejections():
    stage1 = _constant_model(head="footprint_only")
    with pytest.raises(UnsupportedVariantError):
        compose_two_stage(stage1, "A3")
    with pytest.raises(ValidationError):
        compose_two_stage(stage1, "B1")
    with pytest.raises(ValidationError):
        compose_two_stage(_constant_model(), "A1")


def test_two_stage_prediction():
    stage1 = _constant_model(head="footprint_only", fp_bias=3.0)
    _, config = compose_two_stage(stage1, "A1")
    stage2 = FloorspaceModel(config, meta={"compose": "A1"})
    with torch.no_grad():
        for p in stage2.parameters():
            p.zero_()
        stage2.height_head.bias.fill_(0.05)

    pred = predict_two_stage(stage1, stage2, _standardized(), 16)
    assert np.all(pred.mask.data == 1)
    assert np.allclose(pred.height_m.data, 20.0)
