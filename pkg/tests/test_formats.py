import json
import struct

import numpy as np
import pytest

from conceptfuse.adapter import apply_adapter
from conceptfuse.errors import (
    BadMagic,
    FingerprintMismatch,
    MissingManifest,
    ParseError,
    ShapeInconsistent,
    TruncatedFile,
    VersionMismatch,
)
from conceptfuse.evaluation import ConceptAlignment, EvalReport
from conceptfuse.formats import (
    adapter_from_bytes,
    adapter_to_bytes,
    decode_mask,
    encode_mask,
    format_grid,
    load_adapter,
    load_dataset,
    load_mask,
    model_from_bytes,
    model_to_bytes,
    parse_grid,
    report_from_csv,
    report_to_csv,
    save_adapter,
    save_dataset,
    save_mask,
)
from conceptfuse.toy_diffusion import init_weights
from conceptfuse.tuning import ConceptDataset

from conftest import random_adapter


def assert_adapters_equal(a, b):
    assert a.base_fingerprint == b.base_fingerprint
    assert a.metadata == b.metadata
    assert list(a.lora_layers) == list(b.lora_layers)
    for name in a.lora_layers:
        x, y = a.lora_layers[name], b.lora_layers[name]
        assert x.scale == y.scale
        np.testing.assert_array_equal(x.B, y.B)
        np.testing.assert_array_equal(x.A, y.A)
    assert a.embedding.concept_name == b.embedding.concept_name
    np.testing.assert_array_equal(a.embedding.v_rand, b.embedding.v_rand)
    np.testing.assert_array_equal(a.embedding.v_class, b.embedding.v_class)


# adapter files ------------------------------------------------------------------

def test_adapter_round_trip_is_bit_exact(base, tmp_path):
    a = random_adapter(base, "<r>", seed=5, scale=0.75)
    a.metadata["note"] = "ünïcode"
    path = tmp_path / "r.edlr"
    save_adapter(a, path)
    b = load_adapter(path, base)
    assert_adapters_equal(a, b)
    assert adapter_to_bytes(b) == path.read_bytes()
    fa, fb = apply_adapter(base, a), apply_adapter(base, b)
    for name in base.layers:
        assert fa.layers[name].tobytes() == fb.layers[name].tobytes()


def test_adapter_header_is_little_endian(base):
    data = adapter_to_bytes(random_adapter(base))
    assert data[:4] == b"EDLR"
    assert struct.unpack("<H", data[4:6])[0] == 1
    assert struct.unpack("<Q", data[6:14])[0] == base.fingerprint()


def test_corrupt_magic(base):
    data = bytearray(adapter_to_bytes(random_adapter(base)))
    data[0] ^= 0xFF
    with pytest.raises(BadMagic):
        adapter_from_bytes(bytes(data))


def test_unknown_version(base):
    data = bytearray(adapter_to_bytes(random_adapter(base)))
    data[4:6] = struct.pack("<H", 7)
    with pytest.raises(VersionMismatch):
        adapter_from_bytes(bytes(data))


def test_fingerprint_mismatch(base, tmp_path):
    other = init_weights(base.config, 99, list(base.vocab))
    path = tmp_path / "a.edlr"
    save_adapter(random_adapter(base), path)
    with pytest.raises(FingerprintMismatch):
        load_adapter(path, other)
    load_adapter(path)  # no base given: no check


def test_every_truncation_is_detected(base):
    data = adapter_to_bytes(random_adapter(base, layers=["text.attn.q"]))
    for cut in range(len(data)):
        with pytest.raises((TruncatedFile, BadMagic)):
            adapter_from_bytes(data[:cut])


def test_trailing_bytes_rejected(base):
    with pytest.raises(ParseError):
        adapter_from_bytes(adapter_to_bytes(random_adapter(base)) + b"\0")


# model files --------------------------------------------------------------------

def test_model_round_trip(base):
    data = model_to_bytes(base)
    m = model_from_bytes(data)
    assert m.fingerprint() == base.fingerprint()
    assert m.config == base.config
    assert model_to_bytes(m) == data
    with pytest.raises(BadMagic):
        model_from_bytes(adapter_to_bytes(random_adapter(base)))
    with pytest.raises(TruncatedFile):
        model_from_bytes(data[:-3])


# grids and datasets ------------------------------------------------------------

def test_grid_round_trip_bit_exact():
    z = np.random.default_rng(0).uniform(-10, 10, (8, 8, 1))
    np.testing.assert_array_equal(parse_grid(format_grid(z)), z)


def test_grid_errors_carry_position():
    with pytest.raises(ParseError) as info:
        parse_grid("1,2\n3,x\n", "g.csv")
    assert (info.value.row, info.value.col) == (2, 2)
    assert "row 2" in str(info.value) and "column 2" in str(info.value)
    with pytest.raises(ParseError) as info:
        parse_grid("0,10.5\n")
    assert (info.value.row, info.value.col) == (1, 2)
    with pytest.raises(ParseError):
        parse_grid("nan\n")
    with pytest.raises(ParseError):
        parse_grid("\n\n")
    with pytest.raises(ShapeInconsistent):
        parse_grid("1,2\n3\n")


def test_dataset_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    data = ConceptDataset([rng.uniform(-1, 1, (8, 8, 1)) for _ in range(5)], "a photo of <k>", "<k>", "ring")
    save_dataset(data, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")
    assert len(back.images) == 5
    assert back.caption_template == data.caption_template
    assert (back.concept_name, back.class_token) == ("<k>", "ring")
    for x, y in zip(data.images, back.images):
        np.testing.assert_array_equal(x, y)


def write_dataset(d, grids, manifest=None):
    d.mkdir()
    for i, g in enumerate(grids):
        (d / f"g{i}.csv").write_text(g)
    if manifest is not False:
        (d / "manifest.json").write_text(json.dumps(manifest or {"concept": "<k>", "caption": "a photo of <k>"}))
    return d


def test_dataset_errors(tmp_path):
    ok = format_grid(np.zeros((8, 8, 1)))
    narrow = format_grid(np.zeros((8, 7, 1)))
    with pytest.raises(MissingManifest):
        load_dataset(write_dataset(tmp_path / "a", [ok], manifest=False))
    with pytest.raises(ShapeInconsistent, match="g1.csv"):
        load_dataset(write_dataset(tmp_path / "b", [ok, narrow]))
    with pytest.raises(ParseError):
        load_dataset(write_dataset(tmp_path / "c", [ok], {"concept": "<k>"}))
    with pytest.raises(ShapeInconsistent):
        load_dataset(write_dataset(tmp_path / "d", []))
    bad = (tmp_path / "e")
    write_dataset(bad, [ok])
    (bad / "manifest.json").write_text("{not json")
    with pytest.raises(ParseError):
        load_dataset(bad)


# masks ----------------------------------------------------------------------------

def test_mask_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    for shape in [(8, 8), (3, 5), (1, 1)]:
        m = rng.integers(0, 2, shape)
        np.testing.assert_array_equal(decode_mask(encode_mask(m)), m)
    m = np.ones((2, 2), int)
    assert encode_mask(m) == "2 2\n0 4\n"
    save_mask(m, tmp_path / "m.txt")
    np.testing.assert_array_equal(load_mask(tmp_path / "m.txt"), m)


def test_mask_errors():
    with pytest.raises(ParseError):
        decode_mask("")
    with pytest.raises(ParseError):
        decode_mask("2\n4\n")
    with pytest.raises(ParseError):
        decode_mask("2 2\n1 x\n")
    with pytest.raises(ParseError):
        decode_mask("2 2\n-1 5\n")
    with pytest.raises(ShapeInconsistent):
        decode_mask("2 2\n1 2\n")


# reports -------------------------------------------------------------------------

def test_report_csv_round_trip():
    rows = {"<a>": ConceptAlignment(0.9, 0.8, 0.8 - 0.9), "<b>": ConceptAlignment(1 / 3, 0.25, 0.25 - 1 / 3)}
    text = report_to_csv(EvalReport(rows, "gradient"))
    assert text.splitlines()[0] == "concept,alignment_single,alignment_fused,change"
    back = report_from_csv(text, "gradient")
    assert back.per_concept == rows
    assert back.mean_change == EvalReport(rows, "gradient").mean_change


def test_report_csv_errors():
    with pytest.raises(ParseError):
        report_from_csv("a,b\n")
    with pytest.raises(ParseError) as info:
        report_from_csv("concept,alignment_single,alignment_fused,change\n<a>,1,2\n")
    assert info.value.row == 2
    with pytest.raises(ParseError):
        report_from_csv("concept,alignment_single,alignment_fused,change\n<a>,1,x,2\n")
