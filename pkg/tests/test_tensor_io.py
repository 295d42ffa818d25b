import json
import struct

import numpy as np
import pytest

from weightlens.bf16 import encode_bf16
from weightlens.errors import IntegrityError, NotFound, ParseError, UnsupportedDtype
from weightlens.tensor_io import (
    LayerFilter,
    WeightMatrix,
    iter_matrices,
    list_layers,
    load_matrix,
    open_checkpoint,
    read_raw,
    write_archive,
)


@pytest.fixture
def archive(tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / "model.safetensors"
    tensors = {
        "model.embed_tokens.weight": WeightMatrix.from_float("model.embed_tokens.weight", rng.standard_normal((8, 4))),
        "model.layers.0.self_attn.q_proj.weight": WeightMatrix.from_float(
            "model.layers.0.self_attn.q_proj.weight", rng.standard_normal((4, 4))),
        "model.layers.0.mlp.up_proj.weight": WeightMatrix.from_float(
            "model.layers.0.mlp.up_proj.weight", rng.standard_normal((6, 4)), dtype="f32"),
        "model.norm.weight": WeightMatrix.from_float("model.norm.weight", np.ones(4)),
        "lm_head.weight": WeightMatrix.from_float("lm_head.weight", rng.standard_normal((8, 4))),
    }
    write_archive(path, tensors, metadata={"format": "pt"})
    return path, tensors


def _write_raw(path, header, payload=b""):
    encoded = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(encoded)))
        fh.write(encoded)
        fh.write(payload)


# Reading back what was written

def test_round_trip(archive):
    path, tensors = archive
    h = open_checkpoint(path)

    assert h.metadata == {"format": "pt"}
    assert h.all_names() == tuple(tensors)
    for name, tensor in tensors.items():
        loaded = load_matrix(h, name)
        assert loaded.dtype == tensor.dtype
        np.testing.assert_array_equal(loaded.data, tensor.data)


def test_bf16_payload_stays_as_codes(archive):
    path, tensors = archive
    loaded = load_matrix(open_checkpoint(path), "model.layers.0.self_attn.q_proj.weight")
    assert loaded.is_bf16
    assert loaded.data.dtype == np.uint16
    np.testing.assert_array_equal(loaded.data, tensors["model.layers.0.self_attn.q_proj.weight"].data)


def test_total_params(archive):
    path, _ = archive
    assert open_checkpoint(path).total_params == 32 + 16 + 24 + 4 + 32


def test_read_raw_returns_stored_bytes(archive):
    path, tensors = archive
    raw = read_raw(open_checkpoint(path), "model.norm.weight")
    assert raw == tensors["model.norm.weight"].to_bytes()


# Layer selection

def test_default_filter_keeps_rank_two_tensors(archive):
    path, _ = archive
    assert list_layers(open_checkpoint(path)) == [
        "model.embed_tokens.weight",
        "model.layers.0.self_attn.q_proj.weight",
        "model.layers.0.mlp.up_proj.weight",
        "lm_head.weight",
    ]


def test_linear_only_filter(archive):
    path, _ = archive
    names = list_layers(open_checkpoint(path), LayerFilter.linear_only())
    assert names == ["model.layers.0.self_attn.q_proj.weight", "model.layers.0.mlp.up_proj.weight"]


def test_everything_filter_includes_vectors(archive):
    path, _ = archive
    assert "model.norm.weight" in list_layers(open_checkpoint(path), LayerFilter.everything())


def test_include_patterns(archive):
    path, _ = archive
    f = LayerFilter(include=("*self_attn*",))
    assert [m.layer_name for m in iter_matrices(open_checkpoint(path), f)] == [
        "model.layers.0.self_attn.q_proj.weight"
    ]


def test_invalid_min_rank():
    with pytest.raises(ValueError, match="min_rank must be 1 or 2"):
        LayerFilter(min_rank=3)


# Malformed archives

def test_missing_layer(archive):
    path, _ = archive
    with pytest.raises(NotFound):
        load_matrix(open_checkpoint(path), "model.layers.9.mlp.up_proj.weight")


def test_file_too_short(tmp_path):
    path = tmp_path / "short.safetensors"
    path.write_bytes(b"\x01\x02")
    with pytest.raises(ParseError, match="too short"):
        open_checkpoint(path)


def test_header_length_past_end(tmp_path):
    path = tmp_path / "bad.safetensors"
    path.write_bytes(struct.pack("<Q", 4096) + b"{}")
    with pytest.raises(ParseError, match="exceeds file size"):
        open_checkpoint(path)


def test_header_not_json(tmp_path):
    path = tmp_path / "bad.safetensors"
    path.write_bytes(struct.pack("<Q", 4) + b"nope")
    with pytest.raises(ParseError, match="not valid JSON"):
        open_checkpoint(path)


def test_byte_count_disagrees_with_shape(tmp_path):
    path = tmp_path / "bad.safetensors"
    _write_raw(path, {"w": {"dtype": "BF16", "shape": [2, 2], "data_offsets": [0, 6]}}, b"\x00" * 6)
    with pytest.raises(ParseError, match="needs 8"):
        open_checkpoint(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "truncated.safetensors"
    _write_raw(path, {"w": {"dtype": "BF16", "shape": [2, 2], "data_offsets": [0, 8]}}, b"\x00" * 4)
    with pytest.raises(IntegrityError):
        open_checkpoint(path)


def test_unsupported_dtype(tmp_path):
    path = tmp_path / "ints.safetensors"
    _write_raw(path, {"w": {"dtype": "I32", "shape": [2], "data_offsets": [0, 8]}}, b"\x00" * 8)
    h = open_checkpoint(path)
    with pytest.raises(UnsupportedDtype):
        load_matrix(h, "w")


@pytest.mark.parametrize("metadata", [["a", "b"], "format=pt", {"format": 1}])
def test_malformed_metadata(tmp_path, metadata):
    path = tmp_path / "meta.safetensors"
    _write_raw(path, {"__metadata__": metadata, "w": {"dtype": "BF16", "shape": [2], "data_offsets": [0, 4]}},
               b"\x00" * 4)
    with pytest.raises(ParseError, match="__metadata__"):
        open_checkpoint(path)


# Test that a failed write leaves neither the archive nor its temporary file
def test_failed_write_removes_partial_file(tmp_path):
    path = tmp_path / "broken.safetensors"
    with pytest.raises(TypeError):
        write_archive(path, {"w": ("BF16", "not bytes", [4])})
    assert list(tmp_path.iterdir()) == []


def test_f16_is_widened(tmp_path):
    path = tmp_path / "half.safetensors"
    payload = np.array([1.0, -2.0], dtype="<f2").tobytes()
    _write_raw(path, {"w": {"dtype": "F16", "shape": [2], "data_offsets": [0, 4]}}, payload)
    loaded = load_matrix(open_checkpoint(path), "w")
    assert loaded.dtype == "f32"
    assert loaded.widened
    np.testing.assert_array_equal(loaded.to_float64(), [1.0, -2.0])


def test_higher_rank_tensors_are_skipped_but_readable(tmp_path):
    path = tmp_path / "conv.safetensors"
    write_archive(path, {
        "conv.weight": ("BF16", b"\x00" * 16, (2, 2, 2)),
        "w": WeightMatrix("w", "bf16", encode_bf16(np.ones((2, 2)))),
    })
    h = open_checkpoint(path)
    assert "conv.weight" not in h
    assert read_raw(h, "conv.weight") == b"\x00" * 16
    assert h.all_names() == ("conv.weight", "w")


# Interoperability with the reference implementation of the format

def test_written_archive_loads_with_safetensors(archive):
    numpy_io = pytest.importorskip("safetensors.numpy")
    path, tensors = archive
    f32_path = path.parent / "f32.safetensors"
    values = np.arange(12, dtype=np.float32).reshape(3, 4)
    write_archive(f32_path, {"w": WeightMatrix("w", "f32", values)})

    loaded = numpy_io.load_file(str(f32_path))
    np.testing.assert_array_equal(loaded["w"], values)


def test_safetensors_file_loads_here(tmp_path):
    numpy_io = pytest.importorskip("safetensors.numpy")
    path = tmp_path / "ref.safetensors"
    values = np.linspace(-1, 1, 20, dtype=np.float32).reshape(4, 5)
    numpy_io.save_file({"layer.weight": values}, str(path))

    loaded = load_matrix(open_checkpoint(path), "layer.weight")
    assert loaded.dtype == "f32"
    np.testing.assert_array_equal(loaded.data, values)
