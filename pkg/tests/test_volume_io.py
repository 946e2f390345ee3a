import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from kitseg.exceptions import (BadMagicError, GeometryError, LabelError, MissingParameterError,
                               NameCollisionError, TruncatedError, UnknownDtypeError)
from kitseg.volume_io import (LabelVolume, PhantomSpec, Volume, checkpoint_from_bytes,
                              checkpoint_to_bytes, generate_phantom, load_checkpoint,
                              random_phantom_spec, read_volume, save_checkpoint, volume_from_bytes,
                              volume_to_bytes, write_volume)


def test_volume_round_trip(tmp_path):
    v = Volume(np.random.default_rng(0).standard_normal((3, 4, 5)), (0.7, 0.8, 2.5))
    write_volume(v, tmp_path / "a.kvl")
    back = read_volume(tmp_path / "a.kvl")
    assert back == v
    assert back.dims == (5, 4, 3)
    assert back.spacing == v.spacing


def test_label_volume_round_trip(tmp_path):
    lab = LabelVolume(np.random.default_rng(1).integers(0, 3, (4, 3, 2)), (1, 1, 3))
    write_volume(lab, tmp_path / "l.kvl")
    back = read_volume(tmp_path / "l.kvl")
    assert isinstance(back, LabelVolume)
    assert back == lab


def test_header_size_arithmetic():
    raw = volume_to_bytes(Volume(np.zeros((1, 2, 2)), (1, 1, 1)))
    assert len(raw) == 4 + 1 + 12 + 12 + 16 == 45


def test_payload_is_x_fastest():
    data = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4)  # [z, y, x]
    raw = volume_to_bytes(Volume(data, (1, 1, 1)))
    assert struct.unpack("<4sB3I", raw[:17])[2:] == (4, 3, 2)
    payload = np.frombuffer(raw[29:], dtype="<f4")
    assert payload[1] == data[0, 0, 1]
    assert payload[4] == data[0, 1, 0]
    assert payload[12] == data[1, 0, 0]


def test_volume_format_errors():
    good = volume_to_bytes(Volume(np.zeros((1, 2, 2)), (1, 1, 1)))
    with pytest.raises(BadMagicError):
        volume_from_bytes(b"XXXX" + good[4:])
    with pytest.raises(TruncatedError):
        volume_from_bytes(good[:-1])
    with pytest.raises(TruncatedError):
        volume_from_bytes(good[:10])
    with pytest.raises(UnknownDtypeError):
        volume_from_bytes(good[:4] + b"\x07" + good[5:])


def test_geometry_validation():
    with pytest.raises(GeometryError):
        Volume(np.zeros((2, 2, 2)), (1, 0, 1))
    with pytest.raises(GeometryError):
        Volume(np.zeros((2, 2)), (1, 1, 1))
    with pytest.raises(LabelError):
        LabelVolume(np.full((1, 1, 1), 3), (1, 1, 1))


def test_write_is_atomic_and_leaves_no_temp(tmp_path):
    write_volume(Volume(np.zeros((1, 1, 1)), (1, 1, 1)), tmp_path / "v.kvl")
    assert os.listdir(tmp_path) == ["v.kvl"]


_dims = st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6))
_spacing = st.tuples(*[st.floats(0.125, 10, width=32)] * 3)


@settings(max_examples=100, deadline=None)
@given(data=st.data(), dims=_dims, spacing=_spacing, labels=st.booleans())
def test_volume_round_trip_property(data, dims, spacing, labels):
    if labels:
        arr = data.draw(hnp.arrays(np.uint8, dims, elements=st.integers(0, 2)))
        v = LabelVolume(arr, spacing)
    else:
        arr = data.draw(hnp.arrays(np.float32, dims, elements=st.floats(width=32, allow_nan=False)))
        v = Volume(arr, spacing)
    raw = volume_to_bytes(v)
    back = volume_from_bytes(raw)
    assert volume_to_bytes(back) == raw
    assert back.data.tobytes() == v.data.tobytes()


# ------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    r = np.random.default_rng(3)
    params = {"enc1.kernel": r.standard_normal((4, 5, 3, 3)).astype(np.float32),
              "enc1.bias": r.standard_normal(4).astype(np.float32)}
    optim = {"m/enc1.kernel": np.zeros((4, 5, 3, 3), np.float32)}
    meta = {"epoch": 7, "val_dice": 0.91}
    save_checkpoint(params, optim, meta, tmp_path / "c.kck")
    ck = load_checkpoint(tmp_path / "c.kck", expected=list(params))
    for k in params:
        assert ck.params[k].tobytes() == params[k].tobytes()
    assert ck.optimizer_state["m/enc1.kernel"].shape == (4, 5, 3, 3)
    assert ck.meta == meta


def test_checkpoint_kernel_payload_is_36_bytes():
    raw = checkpoint_to_bytes({"k": np.zeros((3, 3), np.float32)}, meta={})
    # magic + count + name len + name + ndim + dims + payload + meta len + "{}"
    assert len(raw) == 4 + 4 + 2 + 1 + 1 + 8 + 36 + 4 + 2
    assert raw[20:56] == b"\x00" * 36


def test_checkpoint_missing_parameter_is_named():
    raw = checkpoint_to_bytes({"a": np.ones(2, np.float32)})
    with pytest.raises(MissingParameterError, match="'b'"):
        checkpoint_from_bytes(raw, expected=["a", "b"])


def test_checkpoint_errors():
    with pytest.raises(NameCollisionError):
        checkpoint_to_bytes({"optim/x": np.ones(1)}, {"x": np.ones(1)})
    raw = checkpoint_to_bytes({"a": np.ones(3, np.float32)})
    with pytest.raises(TruncatedError):
        checkpoint_from_bytes(raw[:20])
    with pytest.raises(BadMagicError):
        checkpoint_from_bytes(b"KVL1" + raw[4:])
    # a hand-built file with the same name twice
    dup = b"KCK1" + struct.pack("<I", 2) + 2 * (struct.pack("<H", 1) + b"a" + struct.pack("<BI", 1, 1)
                                               + struct.pack("<f", 1.0))
    with pytest.raises(NameCollisionError):
        checkpoint_from_bytes(dup)


_names = st.text(alphabet=st.characters(min_codepoint=33, max_codepoint=0x2FF), min_size=1, max_size=12)


@settings(max_examples=100, deadline=None)
@given(data=st.data(), names=st.lists(_names, min_size=0, max_size=5, unique=True))
def test_checkpoint_round_trip_property(data, names):
    params = {}
    for n in names:
        shape = data.draw(hnp.array_shapes(min_dims=0, max_dims=4, max_side=4))
        params[n] = data.draw(hnp.arrays(np.float32, shape, elements=st.floats(width=32)))
    raw = checkpoint_to_bytes(params, meta={"epoch": 1})
    ck = checkpoint_from_bytes(raw)
    assert set(ck.params) == set(params)
    for n in names:
        assert ck.params[n].tobytes() == params[n].tobytes()
    assert checkpoint_to_bytes(ck.params, meta=ck.meta) == raw


# ---------------------------------------------------------------- phantom

def test_phantom_noise_free_kidney_hu_in_range():
    spec = PhantomSpec(seed=1, noise_sigma=0.0, tumor=False,
                       kidney_centers=((64.0, 70.0, 45.0),), kidney_radii=((12.0, 10.0, 20.0),))
    v, lab = generate_phantom(spec)
    kid = v.data[lab.data == 1]
    assert kid.size > 0
    assert kid.min() >= spec.kidney_hu[0] and kid.max() <= spec.kidney_hu[1]
    assert not np.any(lab.data == 2)


def test_phantom_determinism():
    a = generate_phantom(random_phantom_spec(5))
    b = generate_phantom(random_phantom_spec(5))
    assert a[0] == b[0] and a[1] == b[1]
    c = generate_phantom(random_phantom_spec(6))
    assert not np.array_equal(a[0].data, c[0].data)


def test_phantom_kidney_volume_matches_ellipsoid():
    radii = (14.0, 11.0, 18.0)
    spec = PhantomSpec(dims=(64, 64, 64), spacing=(1.0, 1.0, 1.0), tumor=False, distractors=False,
                       kidney_centers=((32.0, 32.0, 32.0),), kidney_radii=(radii,))
    _, lab = generate_phantom(spec)
    expected = 4 / 3 * np.pi * np.prod(radii)
    assert abs((lab.data == 1).sum() - expected) / expected < 0.05


def test_phantom_degenerate_radii():
    with pytest.raises(GeometryError):
        generate_phantom(PhantomSpec(kidney_radii=((0.0, 10.0, 10.0), (10.0, 10.0, 10.0))))


def test_phantom_tumor_must_touch_kidney():
    with pytest.raises(GeometryError):
        generate_phantom(PhantomSpec(tumor_center=(64.0, 20.0, 10.0)))


@pytest.mark.parametrize("seed", range(8))
def test_phantom_label_geometry(seed):
    from scipy import ndimage

    spec = random_phantom_spec(seed, tumor=seed % 3 != 0)
    v, lab = generate_phantom(spec)
    assert v.same_geometry(lab)
    tumor = lab.data == 2
    if not spec.tumor:
        assert not tumor.any()
        return
    assert ndimage.label(tumor, structure=np.ones((3, 3, 3)))[1] == 1
    # the tumor meets exactly one kidney's bounding box (grown by one voxel)
    hits = 0
    x_mm = np.arange(spec.dims[0]) * spec.spacing[0]
    tz, ty, tx = np.nonzero(tumor)
    for c, r in zip(spec.kidney_centers, spec.kidney_radii):
        lo = [c[i] - r[i] - spec.spacing[i] for i in range(3)]
        hi = [c[i] + r[i] + spec.spacing[i] for i in range(3)]
        pts = np.stack([x_mm[tx], ty * spec.spacing[1], tz * spec.spacing[2]], axis=1)
        inside = np.all((pts >= lo) & (pts <= hi), axis=1)
        hits += bool(inside.any())
    assert hits == 1
    assert (v.data[lab.data == 0] < 1000).all()


def test_phantom_spec_hu_invariants():
    with pytest.raises(GeometryError):
        generate_phantom(PhantomSpec(fat_hu=-10.0))
    with pytest.raises(GeometryError):
        generate_phantom(PhantomSpec(kidney_hu=(100.0, 320.0)))
