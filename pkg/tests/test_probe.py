import json
import os
import tracemalloc

import numpy as np
import pytest

from weightlens.bf16 import ProbeConfig, decode_bf16, encode_bf16, ulp_bf16
from weightlens.errors import DtypeError, SchemaError, ShapeError
from weightlens.geometry_masks import load_mask_archive
from weightlens.probe import check_layer_sets, export_update_masks, sparsity_bf16, update_mask
from weightlens.synthetic import (STRIPE_LAYER, bump_codes, planted_pair, random_bf16, stripe_suite,
                                  synthetic_checkpoint_pair)
from weightlens.tensor_io import LayerFilter, WeightMatrix, load_matrix, open_checkpoint, write_archive

LAYER = "model.layers.0.mlp.down_proj.weight"


@pytest.fixture
def planted(tmp_path):
    base, tuned = tmp_path / "base.safetensors", tmp_path / "tuned.safetensors"
    where = planted_pair(base, tuned, shape=(10, 10), changed=25, layer_name=LAYER)
    return open_checkpoint(base), open_checkpoint(tuned), where


# Masks

def test_update_mask_recovers_planted_changes(planted):
    h0, h1, where = planted
    mask = update_mask(load_matrix(h0, LAYER), load_matrix(h1, LAYER))
    assert mask.changed == 25
    np.testing.assert_array_equal(mask.bits, where)


def test_update_mask_is_symmetric(planted):
    h0, h1, _ = planted
    W0, W1 = load_matrix(h0, LAYER), load_matrix(h1, LAYER)
    np.testing.assert_array_equal(update_mask(W0, W1).bits, update_mask(W1, W0).bits)


def test_update_mask_shape_mismatch():
    W0 = WeightMatrix.from_float("w", np.ones((2, 2)))
    W1 = WeightMatrix.from_float("w", np.ones((2, 3)))
    with pytest.raises(ShapeError):
        update_mask(W0, W1)


def test_update_mask_dtype_mismatch():
    W0 = WeightMatrix.from_float("w", np.ones((2, 2)))
    W1 = WeightMatrix.from_float("w", np.ones((2, 2)), dtype="f32")
    with pytest.raises(DtypeError, match="cannot compare bf16 with f32"):
        update_mask(W0, W1)


def test_f32_pairs_need_explicit_mode():
    W0 = WeightMatrix.from_float("w", [[1.0, 2.0]], dtype="f32")
    W1 = WeightMatrix.from_float("w", [[1.0, 2.5]], dtype="f32")
    with pytest.raises(DtypeError, match="explicit f32 comparison"):
        update_mask(W0, W1)
    assert update_mask(W0, W1, f32_exact=True).changed == 1


def test_f16_origin_is_refused():
    W0 = WeightMatrix("w", "f32", np.ones((2, 2), dtype=np.float32), source_dtype="f16")
    W1 = WeightMatrix("w", "f32", np.ones((2, 2), dtype=np.float32), source_dtype="f16")
    with pytest.raises(DtypeError, match="f16"):
        update_mask(W0, W1, f32_exact=True)


@pytest.mark.parametrize("eta", [1e-6, 1e-3, 1.9e-3])
def test_one_ulp_is_changed_and_a_quarter_ulp_is_not(eta):
    rng = np.random.default_rng(11)
    codes = random_bf16(rng, (16, 16)) & np.uint16(0x7FFF)
    where = rng.random((16, 16)) < 0.5
    cfg = ProbeConfig(eta=eta)
    W0 = WeightMatrix("w", "bf16", codes)

    bumped = WeightMatrix("w", "bf16", bump_codes(codes, where))
    np.testing.assert_array_equal(update_mask(W0, bumped, cfg).bits, where)

    nudged = decode_bf16(codes).astype(np.float64) + np.where(where, 0.25 * ulp_bf16(codes), 0.0)
    W1 = WeightMatrix("w", "bf16", encode_bf16(nudged))
    assert update_mask(W0, W1, cfg).changed == 0


def test_identical_checkpoints_are_fully_sparse(planted):
    h0, _, _ = planted
    report = sparsity_bf16(h0, h0)
    assert report.sparsity_bf16 == 1.0
    assert report.layers[0].changed == 0


# Whole-checkpoint sparsity

def test_planted_pair_sparsity(planted):
    h0, h1, _ = planted
    report = sparsity_bf16(h0, h1, max_workers=2)
    assert report.sparsity_bf16 == pytest.approx(0.75)
    assert report.to_dict()["layers"] == [
        {"name": LAYER, "changed": 25, "total": 100, "rank": 2, "sparsity": 0.75}
    ]
    assert report.failed == {}


def test_sparsity_is_symmetric(planted):
    h0, h1, _ = planted
    assert sparsity_bf16(h0, h1).sparsity_bf16 == sparsity_bf16(h1, h0).sparsity_bf16


def test_absolute_rule_side_by_side(planted):
    h0, h1, _ = planted
    d = sparsity_bf16(h0, h1, compare_absolute=True).to_dict()
    assert "sparsity_absolute" in d
    assert d["layers"][0]["absolute_changed"] <= 100


def test_filters_control_which_layers_count(tmp_path):
    suite = stripe_suite(tmp_path, runs=1)
    h0, h1 = open_checkpoint(suite.base), open_checkpoint(suite.runs[0])

    linear = sparsity_bf16(h0, h1).to_dict()
    assert [row["name"] for row in linear["layers"]] == [STRIPE_LAYER, "model.layers.0.mlp.up_proj.weight"]
    assert "sparsity_bf16_rank2" not in linear

    everything = sparsity_bf16(h0, h1, LayerFilter.everything()).to_dict()
    assert len(everything["layers"]) == 4
    rank2 = [row for row in everything["layers"] if row["rank"] == 2]
    changed = sum(row["changed"] for row in rank2)
    total = sum(row["total"] for row in rank2)
    assert everything["sparsity_bf16_rank2"] == pytest.approx(1 - changed / total)


def test_stripe_layer_sparsity(tmp_path):
    suite = stripe_suite(tmp_path, runs=1)
    report = sparsity_bf16(open_checkpoint(suite.base), open_checkpoint(suite.runs[0]),
                           LayerFilter(include=(STRIPE_LAYER,)))
    assert report.sparsity_bf16 == pytest.approx(0.75)


def test_layer_set_mismatch(tmp_path):
    a, b = tmp_path / "a.safetensors", tmp_path / "b.safetensors"
    write_archive(a, {"x.weight": WeightMatrix.from_float("x.weight", np.ones((2, 2)))})
    write_archive(b, {"y.weight": WeightMatrix.from_float("y.weight", np.ones((2, 2)))})
    with pytest.raises(SchemaError, match="Layer sets differ"):
        check_layer_sets(open_checkpoint(a), open_checkpoint(b), LayerFilter())


def test_layer_shape_mismatch(tmp_path):
    a, b = tmp_path / "a.safetensors", tmp_path / "b.safetensors"
    write_archive(a, {"x.weight": WeightMatrix.from_float("x.weight", np.ones((2, 2)))})
    write_archive(b, {"x.weight": WeightMatrix.from_float("x.weight", np.ones((2, 3)))})
    with pytest.raises(SchemaError, match="shape"):
        check_layer_sets(open_checkpoint(a), open_checkpoint(b), LayerFilter())


def test_failed_layers_are_recorded(tmp_path):
    a, b = tmp_path / "a.safetensors", tmp_path / "b.safetensors"
    good = encode_bf16(np.ones((2, 2)))
    write_archive(a, {"good.weight": WeightMatrix("good.weight", "bf16", good),
                      "f32.weight": WeightMatrix.from_float("f32.weight", np.ones((2, 2)), dtype="f32")})
    write_archive(b, {"good.weight": WeightMatrix("good.weight", "bf16", good),
                      "f32.weight": WeightMatrix.from_float("f32.weight", np.zeros((2, 2)), dtype="f32")})
    report = sparsity_bf16(open_checkpoint(a), open_checkpoint(b), LayerFilter())

    assert [layer.name for layer in report.layers] == ["good.weight"]
    assert list(report.failed) == ["f32.weight"]
    assert report.failed["f32.weight"].startswith("DtypeError")


# Mask export

def test_export_update_masks(planted, tmp_path):
    h0, h1, where = planted
    out = tmp_path / "masks"
    manifest = export_update_masks(h0, h1, out, cfg=ProbeConfig(eta=1e-4))

    assert manifest["recipe"]["kind"] == "update"
    assert manifest["recipe"]["eta"] == 1e-4
    assert manifest["total_count"] == 25
    on_disk = json.loads((out / "manifest.json").read_text())
    assert on_disk == manifest
    assert "failed" not in on_disk

    _, masks = load_mask_archive(out)
    np.testing.assert_array_equal(masks[LAYER].bits, where)
    assert sorted(os.listdir(out)) == ["00000_model.layers.0.mlp.down_proj.weight.mask", "manifest.json"]


# Test sparsity on a generated many-layer pair, holding one layer in memory at a time
def test_generated_pair_streams_layer_by_layer(tmp_path):
    base, tuned = tmp_path / "base.safetensors", tmp_path / "tuned.safetensors"
    layers, side = 48, 64
    names = synthetic_checkpoint_pair(base, tuned, layers=layers, params=layers * side * side, update_density=0.3)
    h0, h1 = open_checkpoint(base), open_checkpoint(tuned)

    tracemalloc.start()
    try:
        report = sparsity_bf16(h0, h1, max_workers=1)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()

    assert [layer.name for layer in report.layers] == names
    assert report.sparsity_bf16 == pytest.approx(0.7, abs=0.01)
    # Both checkpoints decoded to float64 at once would take 16 bytes per weight.
    assert peak < 16 * layers * side * side / 2
