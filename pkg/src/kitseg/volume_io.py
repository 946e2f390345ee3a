"""Volume and checkpoint binary formats, plus the procedural CT phantom.

KVL1 (little-endian)::

    magic "KVL1" | dtype u8 (0 = f32 image, 1 = u8 labels) | dims 3 x u32
    | spacing 3 x f32 | voxels, x fastest then y then z

KCK1 (little-endian)::

    magic "KCK1" | u32 entry count | entries | u32 meta length | meta JSON
    entry = u16 name length | UTF-8 name | u8 ndim | ndim x u32 dims | f32 payload

Optimizer state is stored as extra entries prefixed with ``optim/``.
"""
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .exceptions import (BadMagicError, GeometryError, LabelError, MissingParameterError,
                         NameCollisionError, TruncatedError, UnknownDtypeError)

VOLUME_MAGIC = b"KVL1"
CHECKPOINT_MAGIC = b"KCK1"
OPTIM_PREFIX = "optim/"
_HEADER = struct.Struct("<4sB3I3f")


class Volume:
    """Axial stack of HU values; ``data`` is indexed ``[z, y, x]``."""

    dtype = np.dtype(np.float32)
    dtype_code = 0

    def __init__(self, data, spacing):
        data = np.asarray(data)
        if data.ndim != 3:
            raise GeometryError(f"volume data must be 3-D, got shape {data.shape}")
        if min(data.shape) < 1:
            raise GeometryError("volume dims must all be >= 1")
        spacing = tuple(float(np.float32(s)) for s in spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise GeometryError(f"spacing must be 3 positive values, got {spacing}")
        self.data = np.ascontiguousarray(data, dtype=self.dtype)
        self.spacing = spacing

    @property
    def dims(self):
        """``(nx, ny, nz)``."""
        nz, ny, nx = self.data.shape
        return nx, ny, nz

    @property
    def shape(self):
        return self.data.shape

    def with_data(self, data, spacing=None):
        return type(self)(data, self.spacing if spacing is None else spacing)

    def same_geometry(self, other):
        return self.data.shape == other.data.shape and self.spacing == other.spacing

    def __eq__(self, other):
        return (type(self) is type(other) and self.same_geometry(other)
                and np.array_equal(self.data, other.data))

    def __repr__(self):
        return f"{type(self).__name__}(dims={self.dims}, spacing={self.spacing})"


class LabelVolume(Volume):
    """Per-voxel labels: 0 background, 1 kidney, 2 tumor."""

    dtype = np.dtype(np.uint8)
    dtype_code = 1

    def __init__(self, data, spacing):
        data = np.asarray(data)
        if data.size and (data.min() < 0 or data.max() > 2):
            raise LabelError("labels must be in {0, 1, 2}")
        super().__init__(data, spacing)


def _atomic_write(path, payload):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def volume_to_bytes(v):
    nx, ny, nz = v.dims
    header = _HEADER.pack(VOLUME_MAGIC, v.dtype_code, nx, ny, nz, *v.spacing)
    return header + v.data.astype(v.dtype.newbyteorder("<"), copy=False).tobytes()


def volume_from_bytes(raw):
    if len(raw) < 4 or raw[:4] != VOLUME_MAGIC:
        raise BadMagicError(f"not a KVL1 file (magic {bytes(raw[:4])!r})")
    if len(raw) < _HEADER.size:
        raise TruncatedError("KVL1 header truncated")
    _, code, nx, ny, nz, sx, sy, sz = _HEADER.unpack_from(raw)
    classes = {0: Volume, 1: LabelVolume}
    if code not in classes:
        raise UnknownDtypeError(f"unknown KVL1 dtype code {code}")
    cls = classes[code]
    count = nx * ny * nz
    nbytes = count * cls.dtype.itemsize
    body = raw[_HEADER.size:]
    if len(body) < nbytes:
        raise TruncatedError(f"KVL1 payload truncated: need {nbytes} bytes, have {len(body)}")
    data = np.frombuffer(body, dtype=cls.dtype.newbyteorder("<"), count=count)
    return cls(data.reshape(nz, ny, nx), (sx, sy, sz))


def write_volume(v, path):
    _atomic_write(path, volume_to_bytes(v))


def read_volume(path):
    with open(path, "rb") as fh:
        return volume_from_bytes(fh.read())


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: dict
    optimizer_state: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _entries_to_bytes(entries):
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(entries))]
    for name, arr in entries:
        encoded = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(chunks)


def checkpoint_to_bytes(params, optimizer_state=None, meta=None):
    entries, seen = [], set()
    items = list(params.items()) + [(OPTIM_PREFIX + k, v) for k, v in (optimizer_state or {}).items()]
    for name, arr in items:
        if name in seen:
            raise NameCollisionError(f"duplicate checkpoint entry {name!r}")
        seen.add(name)
        entries.append((name, arr))
    meta_raw = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    return _entries_to_bytes(entries) + struct.pack("<I", len(meta_raw)) + meta_raw


def checkpoint_from_bytes(raw, expected=None):
    view = memoryview(raw)
    if bytes(view[:4]) != CHECKPOINT_MAGIC:
        raise BadMagicError(f"not a KCK1 file (magic {bytes(view[:4])!r})")
    pos = 4

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise TruncatedError(f"KCK1 truncated while reading {what}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4, "entry count"))
    params, optim = {}, {}
    for i in range(count):
        (nlen,) = struct.unpack("<H", take(2, f"entry {i} name length"))
        name = bytes(take(nlen, f"entry {i} name")).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, f"{name} ndim"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"{name} dims"))
        size = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(take(4 * size, f"{name} payload"), dtype="<f4").reshape(dims)
        target = optim if name.startswith(OPTIM_PREFIX) else params
        key = name[len(OPTIM_PREFIX):] if target is optim else name
        if key in target:
            raise NameCollisionError(f"duplicate checkpoint entry {name!r}")
        target[key] = arr.astype(np.float32)
    meta = {}
    if pos < len(view):
        (mlen,) = struct.unpack("<I", take(4, "meta length"))
        meta = json.loads(bytes(take(mlen, "meta block")).decode("utf-8"))
    if expected is not None:
        for name in expected:
            if name not in params:
                raise MissingParameterError(f"checkpoint is missing parameter {name!r}")
    return Checkpoint(params, optim, meta)


def save_checkpoint(params, optimizer_state, meta, path):
    _atomic_write(path, checkpoint_to_bytes(params, optimizer_state, meta))


def load_checkpoint(path, expected=None):
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read(), expected)


# --------------------------------------------------------------------------
# phantom generator
# --------------------------------------------------------------------------

@dataclass
class PhantomSpec:
    """Geometry and intensities of one synthetic abdominal CT.

    Kidney centers and radii are in mm, ordered ``(x, y, z)``. ``kidney_hu``
    and ``tumor_hu`` are ranges from which one base value per structure is
    drawn.
    """

    seed: int = 0
    dims: tuple = (128, 128, 60)
    spacing: tuple = (1.0, 1.0, 1.5)
    kidney_centers: tuple = ((36.0, 74.0, 45.0), (92.0, 74.0, 45.0))
    kidney_radii: tuple = ((13.0, 11.0, 21.0), (13.0, 11.0, 21.0))
    kidney_hu: tuple = (150.0, 250.0)
    tumor: bool = True
    tumor_center: tuple = (25.0, 74.0, 45.0)
    tumor_radius: float = 9.0
    tumor_hu: tuple = (40.0, 100.0)
    tumor_kidney: int = 0
    fat_hu: float = -100.0
    noise_sigma: float = 10.0
    distractors: bool = True

    def validate(self):
        if len(self.kidney_centers) != len(self.kidney_radii):
            raise GeometryError("each kidney needs a center and radii")
        for radii in self.kidney_radii:
            if min(radii) <= 0:
                raise GeometryError(f"degenerate kidney radii {radii}")
        if self.tumor and self.tumor_radius <= 0:
            raise GeometryError(f"degenerate tumor radius {self.tumor_radius}")
        lo, hi = self.kidney_hu
        if not -30 < lo <= hi < 300:
            raise GeometryError("kidney HU range must lie inside (-30, 300)")
        if self.fat_hu >= -30:
            raise GeometryError("fat HU must be below -30")
        if self.tumor:
            if not self.kidney_centers:
                raise GeometryError("a tumor needs a kidney to sit on")
            c = np.asarray(self.kidney_centers[self.tumor_kidney])
            r = np.asarray(self.kidney_radii[self.tumor_kidney])
            # the sphere must reach the ellipsoid: center inside the ellipsoid grown by the radius
            d = np.asarray(self.tumor_center) - c
            if np.sqrt(np.sum((d / (r + self.tumor_radius)) ** 2)) > 1.0:
                raise GeometryError("tumor does not touch its kidney")


def random_phantom_spec(seed, tumor=True, dims=(128, 128, 60), spacing=(1.0, 1.0, 1.5),
                        noise_sigma=10.0):
    """Draw a plausible two-kidney (occasionally one-kidney) layout."""
    rng = np.random.default_rng([seed, 0xC7])
    fov = np.asarray(dims, dtype=float) * np.asarray(spacing, dtype=float)
    cx, cy, cz = fov / 2
    centers, radii = [], []
    sides = [-1, 1] if rng.random() > 0.1 else [int(rng.choice([-1, 1]))]
    for side in sides:
        r = (rng.uniform(10.5, 14.0), rng.uniform(9.0, 12.0), rng.uniform(16.0, 22.0))
        c = (cx + side * rng.uniform(27.0, 31.0), cy + rng.uniform(6.0, 12.0),
             cz + rng.uniform(-6.0, 6.0))
        centers.append(tuple(float(v) for v in c))
        radii.append(tuple(float(v) for v in r))
    spec = PhantomSpec(seed=seed, dims=tuple(dims), spacing=tuple(spacing),
                       kidney_centers=tuple(centers), kidney_radii=tuple(radii),
                       tumor=tumor, noise_sigma=noise_sigma)
    if tumor:
        k = int(rng.integers(len(centers)))
        u = rng.standard_normal(3)
        u[2] *= 0.5
        u /= np.linalg.norm(u)
        rt = float(rng.uniform(7.0, 10.0))
        center = np.asarray(centers[k]) + rng.uniform(0.55, 0.8) * np.asarray(radii[k]) * u
        spec.tumor_kidney = k
        spec.tumor_radius = rt
        spec.tumor_center = tuple(float(v) for v in center)
    return spec


def _grid_mm(dims, spacing):
    nx, ny, nz = dims
    sx, sy, sz = spacing
    z = (np.arange(nz) * sz)[:, None, None]
    y = (np.arange(ny) * sy)[None, :, None]
    x = (np.arange(nx) * sx)[None, None, :]
    return x, y, z


def generate_phantom(spec):
    """Render ``spec`` into an image volume (HU) and its label volume."""
    spec.validate()
    rng = np.random.default_rng([spec.seed, 0x5EED])
    x, y, z = _grid_mm(spec.dims, spec.spacing)
    nx, ny, nz = spec.dims
    fov = np.asarray(spec.dims, dtype=float) * np.asarray(spec.spacing)
    cx, cy = fov[0] / 2, fov[1] / 2
    shape = (nz, ny, nx)

    hu = np.full(shape, -1000.0)
    labels = np.zeros(shape, dtype=np.uint8)
    body = ((x - cx) / (0.46 * fov[0])) ** 2 + ((y - cy) / (0.40 * fov[1])) ** 2 <= 1.0
    body = np.broadcast_to(body, shape)
    hu[body] = spec.fat_hu
    if spec.distractors:
        psoas = (((np.abs(x - cx) - 16) / 6.0) ** 2 + ((y - cy - 18) / 9.0) ** 2) <= 1.0
        hu[np.broadcast_to(psoas, shape)] = rng.uniform(35, 55)
        liver = (((x - cx + 0.22 * fov[0]) / 22.0) ** 2 + ((y - cy + 14) / 18.0) ** 2
                 + ((z - 0.85 * fov[2]) / 30.0) ** 2) <= 1.0
        hu[liver] = rng.uniform(55, 75)
        spine = ((x - cx) / 9.0) ** 2 + ((y - cy - 22) / 9.0) ** 2 <= 1.0
        hu[np.broadcast_to(spine, shape)] = rng.uniform(400, 700)
        aorta = ((x - cx - 3) / 7.0) ** 2 + ((y - cy - 6) / 7.0) ** 2 <= 1.0
        hu[np.broadcast_to(aorta, shape)] = rng.uniform(180, 280)
        gut = (((x - cx - 0.18 * fov[0]) / 16.0) ** 2 + ((y - cy + 20) / 10.0) ** 2
               + ((z - 0.3 * fov[2]) / 20.0) ** 2) <= 1.0
        hu[gut] = rng.uniform(0, 40)

    for center, radii in zip(spec.kidney_centers, spec.kidney_radii):
        inside = (((x - center[0]) / radii[0]) ** 2 + ((y - center[1]) / radii[1]) ** 2
                  + ((z - center[2]) / radii[2]) ** 2) <= 1.0
        hu[inside] = rng.uniform(*spec.kidney_hu)
        labels[inside] = 1
    if spec.tumor:
        c = spec.tumor_center
        inside = ((x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2) <= spec.tumor_radius ** 2
        hu[inside] = rng.uniform(*spec.tumor_hu)
        labels[inside] = 2

    if spec.noise_sigma > 0:
        hu = hu + rng.standard_normal(shape) * spec.noise_sigma
    return Volume(hu, spec.spacing), LabelVolume(labels, spec.spacing)
