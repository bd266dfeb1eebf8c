import json
import math
import struct
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wisca.checkpoint import (
    STORAGE,
    CheckpointFile,
    bf16_bits_to_f64,
    decode,
    encode,
    f64_to_bf16_bits,
    parse_checkpoint,
    read_checkpoint,
    serialize_checkpoint,
    write_checkpoint,
)
from wisca.errors import DTypeError, HeaderJSONError, HeaderLengthError, OffsetError

DTYPES = list(STORAGE)


def reference_decode(blob: bytes) -> dict:
    """Byte-level reader using only struct: name -> (dtype, shape, list of floats)."""
    (n,) = struct.unpack_from("<Q", blob, 0)
    header = json.loads(blob[8 : 8 + n])
    base = 8 + n
    codes = {"F64": "d", "F32": "f", "F16": "e"}
    out = {}
    for name, info in header.items():
        if name == "__metadata__":
            continue
        lo, hi = info["data_offsets"]
        raw = blob[base + lo : base + hi]
        if info["dtype"] == "BF16":
            vals = [struct.unpack("<f", struct.pack("<I", h << 16))[0] for (h,) in struct.iter_unpack("<H", raw)]
        else:
            vals = [v for (v,) in struct.iter_unpack("<" + codes[info["dtype"]], raw)]
        out[name] = (info["dtype"], tuple(info["shape"]), vals)
    return out


def round_to_format(x: float, mant_bits: int, min_exp: int, max_exp: int) -> float:
    """Exact round-to-nearest-even of ``x`` onto a binary format, via rationals.

    ``mant_bits`` counts the implicit bit; normal numbers lie in [2^min_exp, 2^max_exp).
    """
    if x == 0 or not math.isfinite(x):
        return x
    _, e = math.frexp(abs(x))  # |x| in [2^(e-1), 2^e)
    spacing = Fraction(2) ** (max(e, min_exp + 1) - mant_bits)
    q = Fraction(x) / spacing
    n = math.floor(q)
    rem = q - n
    if rem > Fraction(1, 2) or (rem == Fraction(1, 2) and n % 2):
        n += 1
    r = n * spacing
    if abs(r) >= Fraction(2) ** max_exp:
        return math.copysign(math.inf, x)
    return float(r)


def bf16_oracle(x):
    return round_to_format(x, 8, -126, 128)


def f16_oracle(x):
    return round_to_format(x, 11, -14, 16)


def hand_fixture(values=(1.0, -2.5, 0.125, 3.0)) -> bytes:
    header = b'{"w":{"data_offsets":[0,16],"dtype":"F32","shape":[2,2]}}'
    header += b" " * (-len(header) % 8)
    return struct.pack("<Q", len(header)) + header + struct.pack("<4f", *values)


def test_hand_fixture_matches_reference_decoder():
    blob = hand_fixture()
    ref = reference_decode(blob)
    cp = parse_checkpoint(blob)
    assert list(cp.tensors) == ["w"]
    entry = cp["w"]
    assert (entry.dtype, entry.shape) == ref["w"][:2] == ("F32", (2, 2))
    assert entry.to_f64().ravel().tolist() == ref["w"][2] == [1.0, -2.5, 0.125, 3.0]
    assert serialize_checkpoint(cp) == blob


def mixed_checkpoint(rng) -> CheckpointFile:
    arrays = {
        "a.f64": ("F64", rng.normal(size=(3, 4))),
        "b.f32": ("F32", rng.normal(size=(5,))),
        "c.f16": ("F16", rng.normal(size=(2, 3, 2))),
        "d.bf16": ("BF16", rng.normal(size=(7, 1))),
        "e.empty": ("F32", np.zeros((0, 3))),
    }
    return CheckpointFile.from_arrays(arrays, metadata={"format": "pt"})


def test_all_dtypes_match_reference_decoder(rng):
    cp = mixed_checkpoint(rng)
    blob = serialize_checkpoint(cp)
    ref = reference_decode(blob)
    for name, entry in cp.tensors.items():
        dtype, shape, vals = ref[name]
        assert (entry.dtype, entry.shape) == (dtype, shape)
        assert entry.to_f64().ravel().tolist() == vals


def test_round_trip_is_byte_identical(tmp_path, rng):
    path = tmp_path / "m.safetensors"
    write_checkpoint(mixed_checkpoint(rng), path)
    first = path.read_bytes()
    cp = read_checkpoint(path)
    assert cp.metadata == {"format": "pt"}
    write_checkpoint(cp, tmp_path / "again.safetensors")
    assert (tmp_path / "again.safetensors").read_bytes() == first
    assert sorted(p.name for p in tmp_path.iterdir()) == ["again.safetensors", "m.safetensors"]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(DTYPES), st.lists(st.integers(0, 4), max_size=3)), min_size=1, max_size=5), st.integers(0, 2**31))
def test_round_trip_property(specs, seed):
    rng = np.random.default_rng(seed)
    cp = CheckpointFile.from_arrays({f"t{i}": (d, rng.normal(size=tuple(s))) for i, (d, s) in enumerate(specs)})
    blob = serialize_checkpoint(cp)
    (n,) = struct.unpack_from("<Q", blob)
    assert n % 8 == 0
    assert serialize_checkpoint(parse_checkpoint(blob)) == blob


def test_header_keys_are_canonicalized():
    # same tensor, header keys in non-canonical order and with whitespace
    header = json.dumps({"w": {"shape": [2, 2], "data_offsets": [0, 16], "dtype": "F32"}}, indent=1).encode()
    data = struct.pack("<4f", 1, 2, 3, 4)
    cp = parse_checkpoint(struct.pack("<Q", len(header)) + header + data)
    assert serialize_checkpoint(cp) == hand_fixture((1, 2, 3, 4))


def test_tensors_are_ordered_by_offset():
    header = json.dumps({
        "late": {"dtype": "F32", "shape": [1], "data_offsets": [4, 8]},
        "early": {"dtype": "F32", "shape": [1], "data_offsets": [0, 4]},
    }).encode()
    cp = parse_checkpoint(struct.pack("<Q", len(header)) + header + struct.pack("<2f", 1, 2))
    assert cp.names == ["early", "late"]
    assert cp["late"].to_f64().tolist() == [2.0]


def _blob(entries: dict, data: bytes) -> bytes:
    header = json.dumps(entries).encode()
    return struct.pack("<Q", len(header)) + header + data


@pytest.mark.parametrize(
    "blob,error,needle",
    [
        (b"\x01\x02", HeaderLengthError, "too short"),
        (struct.pack("<Q", 999) + b"{}", HeaderLengthError, "exceeds"),
        (struct.pack("<Q", 3) + b"{x}", HeaderJSONError, "JSON"),
        (_blob({"t": {"dtype": "I8", "shape": [1], "data_offsets": [0, 1]}}, b"\0"), DTypeError, "'t'"),
        (_blob({"t": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]}}, b"\0" * 4), OffsetError, "'t'"),
        (_blob({"t": {"dtype": "F32", "shape": [2], "data_offsets": [0, 4]}}, b"\0" * 4), OffsetError, "'t'"),
        (
            _blob(
                {
                    "a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]},
                    "b": {"dtype": "F32", "shape": [2], "data_offsets": [4, 12]},
                },
                b"\0" * 12,
            ),
            OffsetError,
            "'b' overlaps tensor 'a'",
        ),
        (_blob({"t": {"dtype": "F32", "shape": "2", "data_offsets": [0, 8]}}, b"\0" * 8), HeaderJSONError, "'t'"),
        (_blob({"t": {"dtype": "F32", "shape": [2], "data_offsets": [0]}}, b"\0" * 8), HeaderJSONError, "'t'"),
        (_blob({"__metadata__": {"k": 1}}, b""), HeaderJSONError, "__metadata__"),
        (_blob([1, 2], b""), HeaderJSONError, "object"),
    ],
)
def test_parse_errors_are_distinct_and_named(blob, error, needle):
    with pytest.raises(error, match=None) as info:
        parse_checkpoint(blob)
    assert needle in str(info.value)


@pytest.mark.parametrize("dtype", DTYPES)
def test_scale_by_one_is_byte_identity(rng, dtype):
    cp = CheckpointFile.from_arrays({"w": (dtype, rng.normal(size=(6, 5)) * 100)})
    before = cp["w"].data
    cp.set_f64("w", cp["w"].to_f64() * 1.0)
    assert cp["w"].data == before


@pytest.mark.parametrize("dtype", ["F32", "F16", "BF16"])
@pytest.mark.parametrize("alpha", [0.3, 1.7, 1e-3, 123.456])
def test_fused_scale_unscale_is_byte_identity(rng, dtype, alpha):
    cp = CheckpointFile.from_arrays({"w": (dtype, rng.normal(size=200))})
    before = cp["w"].data
    cp.set_f64("w", cp["w"].to_f64() * alpha * (1.0 / alpha))
    assert cp["w"].data == before


@pytest.mark.parametrize("dtype", DTYPES)
@pytest.mark.parametrize("alpha", [0.3, 1.7, 1e-3, 123.456])
def test_sequential_scale_unscale_is_within_one_ulp(rng, dtype, alpha):
    # the bound holds while the intermediate stays in the normal range of the format
    smallest_normal = {"F64": 2.0**-1022, "F32": 2.0**-126, "F16": 2.0**-14, "BF16": 2.0**-126}[dtype]
    vals = rng.normal(size=300)
    vals = vals[np.abs(vals) * alpha >= smallest_normal]
    cp = CheckpointFile.from_arrays({"w": (dtype, vals)})
    orig = cp["w"].storage().copy()
    cp.set_f64("w", cp["w"].to_f64() * alpha)
    cp.set_f64("w", cp["w"].to_f64() / alpha)
    back = cp["w"].storage()
    if dtype == "BF16":
        diff = np.abs(orig.astype(np.int64) - back.astype(np.int64))
    else:
        ints = {8: np.int64, 4: np.int32, 2: np.int16}[orig.itemsize]
        diff = np.abs(orig.view(ints).astype(np.int64) - back.view(ints).astype(np.int64))
    assert diff.max() <= 1


def test_f16_half_scaling_matches_scalar_oracle(rng):
    values = rng.normal(size=500) * 30
    cp = CheckpointFile.from_arrays({"w": ("F16", values)})
    stored = cp["w"].to_f64()
    cp.set_f64("w", 0.5 * stored)
    got = cp["w"].to_f64()
    expected = [struct.unpack("<e", struct.pack("<e", 0.5 * float(v)))[0] for v in stored]
    assert got.tolist() == expected


special = [0.0, -0.0, 1.0, 1 + 2**-8, 1 + 2**-8 + 2**-30, 1 + 3 * 2**-8, 65504.0, 65520.0, 3.4e38, 3.39e38, 1e-40, 2**-133, 2**-134, 1.5 * 2**-134, -7.0625]


@pytest.mark.parametrize("x", special)
def test_bf16_specials_match_exact_rounding(x):
    got = float(bf16_bits_to_f64(f64_to_bf16_bits(np.array([x])))[0])
    want = bf16_oracle(x)
    assert got == want and math.copysign(1, got) == math.copysign(1, want)


def test_bf16_avoids_double_rounding():
    # 1 + 2^-8 + 2^-30 lies just above a bf16 tie; rounding to f32 first would erase that
    x = 1 + 2**-8 + 2**-30
    assert np.float32(x) == np.float32(1 + 2**-8)
    assert bf16_bits_to_f64(f64_to_bf16_bits(np.array([x])))[0] == 1 + 2**-7


@settings(max_examples=400)
@given(st.floats(allow_nan=False, allow_infinity=True, width=64))
def test_bf16_property(x):
    got = float(bf16_bits_to_f64(f64_to_bf16_bits(np.array([x])))[0])
    assert got == bf16_oracle(x) or (got == 0 and bf16_oracle(x) == 0)


@settings(max_examples=400)
@given(st.floats(allow_nan=False, allow_infinity=True, width=64))
def test_f16_property(x):
    got = float(decode(encode(np.array([x]), "F16"), "F16")[0])
    assert got == f16_oracle(x)


def test_nan_survives_bf16():
    bits = f64_to_bf16_bits(np.array([np.nan, -np.nan]))
    assert np.isnan(bf16_bits_to_f64(bits)).all()


@pytest.mark.parametrize("dtype", DTYPES)
def test_set_f64_is_rounded_like_numpy_scalars(dtype, rng):
    vals = rng.normal(size=50)
    stored = decode(encode(vals, dtype), dtype)
    if dtype in ("F64", "F32", "F16"):
        np.testing.assert_array_equal(stored, vals.astype(STORAGE[dtype]).astype(np.float64))


def test_cross_check_with_safetensors_library(tmp_path, rng):
    st_numpy = pytest.importorskip("safetensors.numpy")
    arrays = {"x": rng.normal(size=(3, 4)), "y": rng.normal(size=(5,)).astype(np.float32), "z": rng.normal(size=(2, 2)).astype(np.float16)}
    # library writes, we read
    st_numpy.save_file(arrays, tmp_path / "lib.safetensors", metadata={"k": "v"})
    ours = read_checkpoint(tmp_path / "lib.safetensors")
    assert ours.metadata == {"k": "v"}
    for name, arr in arrays.items():
        np.testing.assert_array_equal(ours[name].storage(), arr)
    # we write, library reads
    write_checkpoint(ours, tmp_path / "ours.safetensors")
    back = st_numpy.load_file(tmp_path / "ours.safetensors")
    for name, arr in arrays.items():
        np.testing.assert_array_equal(back[name], arr)
        assert back[name].dtype == arr.dtype


def test_set_storage_checks_shape(rng):
    cp = CheckpointFile.from_arrays({"w": ("F32", np.ones((2, 2)))})
    with pytest.raises(ValueError):
        cp.set_f64("w", np.ones(3))


def test_failed_write_leaves_nothing_behind(tmp_path):
    cp = CheckpointFile.from_arrays({"w": ("F32", np.ones(2))})
    cp.tensors["w"].data = b"\0"  # corrupt payload size
    with pytest.raises(Exception):
        write_checkpoint(cp, tmp_path / "x.safetensors")
    assert list(tmp_path.iterdir()) == []
