"""Volume standardization, 2.5D slab construction, balanced sampling, augmentation."""
from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import EmptyGroupError, LabelError, ShapeError
from .validation import check_volume
from .volume_io import LabelVolume, Volume

GROUPS = ("B", "K", "KT")
CONTEXT = 2  # slices above and below the target slice


@dataclass
class PreprocessConfig:
    thickness: float = 3.0
    hu_min: float = -30.0
    hu_max: float = 300.0
    stage1_size: int = 256

    def __post_init__(self):
        if not self.hu_min < self.hu_max:
            raise ValueError("hu_min must be below hu_max")
        if self.thickness <= 0:
            raise ValueError("thickness must be positive")
        if self.stage1_size < 16 or self.stage1_size % 2:
            raise ValueError("stage1_size must be even and >= 16")


def parse_key_values(text):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def coerce_fields(cls, values):
    """Build dataclass ``cls`` from string values, casting by field default type."""
    kwargs = {}
    known = {f.name: f for f in fields(cls)}
    for key, raw in values.items():
        if key not in known:
            raise ValueError(f"unknown config key {key!r} for {cls.__name__}")
        default = known[key].default
        if isinstance(default, bool):
            kwargs[key] = raw.lower() in ("1", "true", "yes", "on")
        elif isinstance(default, int):
            kwargs[key] = int(raw)
        elif isinstance(default, float):
            kwargs[key] = float(raw)
        elif isinstance(default, tuple):
            kwargs[key] = tuple(float(v) for v in raw.strip("[]()").split(","))
        else:
            kwargs[key] = raw
    return cls(**kwargs)


def read_config(path, cls=PreprocessConfig):
    with open(path) as fh:
        values = parse_key_values(fh.read())
    return coerce_fields(cls, values)


# --------------------------------------------------------------------------
# volume-level operations
# --------------------------------------------------------------------------

def reslice_z(v, target_thickness, nz=None):
    """Resample along z to ``target_thickness`` mm.

    Images are linearly interpolated, labels take the nearest slice. Output
    slice ``k`` sits at physical depth ``k * target_thickness``. ``nz``
    overrides the slice count (used to restore an exact original geometry).
    """
    check_volume(v)
    sx, sy, sz = v.spacing
    old_nz = v.data.shape[0]
    if nz is None:
        nz = max(1, int(round(old_nz * sz / target_thickness)))
    new_spacing = (sx, sy, target_thickness)
    if nz == old_nz and np.float32(sz) == np.float32(target_thickness):
        return v.with_data(v.data.copy(), new_spacing)
    pos = np.arange(nz) * (float(target_thickness) / sz)
    pos = np.clip(pos, 0, old_nz - 1)
    if isinstance(v, LabelVolume):
        idx = np.clip(np.floor(pos + 0.5).astype(int), 0, old_nz - 1)
        return v.with_data(v.data[idx], new_spacing)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, old_nz - 1)
    w = (pos - lo).astype(np.float32)[:, None, None]
    a, b = v.data[lo], v.data[hi]
    return v.with_data(a + w * (b - a), new_spacing)


def hu_window(v, hu_min=-30.0, hu_max=300.0):
    if not hu_min < hu_max:
        raise ValueError("hu_min must be below hu_max")
    return v.with_data(np.clip(v.data, hu_min, hu_max))


def standardize(v):
    """Zero-mean, unit-variance rescale using this volume's own statistics."""
    data = v.data.astype(np.float64)
    mean, std = data.mean(), data.std()
    if std < 1e-6:
        return v.with_data(np.zeros_like(v.data))
    out = (data - mean) / std
    # second pass removes float32 rounding drift from the mean
    out32 = out.astype(np.float32)
    out32 -= np.float32(out32.astype(np.float64).mean())
    return v.with_data(out32)


def standardized_value(v, hu, hu_min=-30.0, hu_max=300.0):
    """Where raw HU ``hu`` lands after windowing and standardization of ``v``."""
    data = np.clip(v.data.astype(np.float64), hu_min, hu_max)
    std = data.std()
    if std < 1e-6:
        return 0.0
    return float((np.clip(hu, hu_min, hu_max) - data.mean()) / std)


class VolumePreprocessor(TransformerMixin, BaseEstimator):
    """Reslice along z, bracket HU values, then standardize each volume.

    Statistics are computed per volume, so :meth:`fit` only validates the
    parameters. ``transform`` accepts one :class:`Volume` or a list of them.
    """

    def __init__(self, thickness=3.0, hu_min=-30.0, hu_max=300.0):
        self.thickness = thickness
        self.hu_min = hu_min
        self.hu_max = hu_max

    def fit(self, X=None, y=None):
        PreprocessConfig(self.thickness, self.hu_min, self.hu_max)
        self.n_features_in_ = 1
        return self

    def _one(self, v):
        v = reslice_z(v, self.thickness)
        return standardize(hu_window(v, self.hu_min, self.hu_max))

    def transform(self, X):
        if isinstance(X, Volume):
            return self._one(X)
        return [self._one(v) for v in X]

    def transform_labels(self, labels):
        if isinstance(labels, Volume):
            return reslice_z(labels, self.thickness)
        return [reslice_z(lab, self.thickness) for lab in labels]


# --------------------------------------------------------------------------
# slabs
# --------------------------------------------------------------------------

@dataclass
class Slab:
    """One 2.5D sample: five stacked slices and the central label slice."""

    input: np.ndarray
    target: np.ndarray
    group: str
    provenance: tuple = ("", 0)
    fill_value: float = 0.0
    meta: dict = field(default_factory=dict)


def stack_25d(v, z):
    """Slices ``z-2 .. z+2`` as channels, clamping indices to the volume."""
    data = v.data if isinstance(v, Volume) else np.asarray(v)
    nz = data.shape[0]
    if not 0 <= z < nz:
        raise IndexError(f"slice {z} outside 0..{nz - 1}")
    idx = np.clip(np.arange(z - CONTEXT, z + CONTEXT + 1), 0, nz - 1)
    return data[idx]


def _area_matrix(n_in, n_out):
    """Row i averages input cells overlapping ``[i, i+1) * n_in / n_out``."""
    edges = np.arange(n_out + 1) * (n_in / n_out)
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        a, b = edges[i], edges[i + 1]
        for j in range(int(np.floor(a)), min(int(np.ceil(b)), n_in)):
            m[i, j] = min(b, j + 1) - max(a, j)
    return m / m.sum(axis=1, keepdims=True)


def _nearest_index(n_in, n_out):
    return np.minimum(((np.arange(n_out) + 0.5) * n_in / n_out).astype(int), n_in - 1)


def downsample_xy(t, size, labels=False):
    """Shrink the last two axes to ``size x size``.

    Images use area averaging; labels (``labels=True``) use nearest samples.
    """
    t = np.asarray(t)
    h, w = t.shape[-2:]
    if h < size or w < size:
        raise ShapeError(f"downsample_xy cannot upsample {h}x{w} to {size}")
    if (h, w) == (size, size):
        return t.copy()
    if labels:
        return t[..., _nearest_index(h, size)[:, None], _nearest_index(w, size)[None, :]]
    a = _area_matrix(h, size).astype(np.float32)
    b = _area_matrix(w, size).astype(np.float32)
    return np.matmul(np.matmul(a, t.astype(np.float32)), b.T)


def upsample_labels_xy(t, h, w):
    """Nearest-neighbour enlargement of label maps to ``h x w``."""
    t = np.asarray(t)
    sh, sw = t.shape[-2:]
    return t[..., _nearest_index(sh, h)[:, None], _nearest_index(sw, w)[None, :]]


def classify_group(target):
    target = np.asarray(target)
    if target.size and (target.min() < 0 or target.max() > 2):
        raise LabelError("labels must be in {0, 1, 2}")
    if np.any(target == 2):
        return "KT"
    if np.any(target == 1):
        return "K"
    return "B"


def make_slab(image, labels, z, volume_id="", size=None, window=None, fill_value=0.0):
    """Build the slab centred on slice ``z``.

    ``window`` is ``(y0, x0, height, width)`` to crop in-plane first;
    ``size`` then shrinks the result for coarse (stage-1) inputs.
    """
    x = stack_25d(image, z)
    tgt = labels.data[z] if labels is not None else np.zeros(x.shape[1:], dtype=np.uint8)
    if window is not None:
        y0, x0, hh, ww = window
        x = x[:, y0:y0 + hh, x0:x0 + ww]
        tgt = tgt[y0:y0 + hh, x0:x0 + ww]
    if size is not None:
        x = downsample_xy(x, size)
        tgt = downsample_xy(tgt, size, labels=True)
    x = np.ascontiguousarray(x, dtype=np.float32)
    tgt = np.ascontiguousarray(tgt, dtype=np.uint8)
    return Slab(x, tgt, classify_group(tgt), (volume_id, int(z)), float(fill_value))


def pool_by_group(slabs):
    pool = {g: [] for g in GROUPS}
    for s in slabs:
        pool[s.group].append(s)
    return pool


# --------------------------------------------------------------------------
# balanced sampling
# --------------------------------------------------------------------------

def batch_composition(stage, batch_size, index):
    """Per-group counts of batch number ``index``.

    Stage 1 splits evenly over B/K/KT, rotating which groups take the
    remainder; stage 2 splits evenly over K/KT.
    """
    if stage == 1:
        groups = GROUPS
    elif stage == 2:
        groups = ("K", "KT")
    else:
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    n = len(groups)
    base, extra = divmod(batch_size, n)
    counts = {g: base for g in groups}
    for k in range(extra):
        counts[groups[(index + 1 + k) % n]] += 1
    return counts


class BalancedSampler:
    """Endless stream of group-balanced batches.

    Each group is drawn without replacement from a shuffled queue that is
    reshuffled once exhausted. The stream is a pure function of ``seed``.
    """

    def __init__(self, pool, stage, batch_size=32, seed=0):
        self.pool = pool
        self.stage = stage
        self.batch_size = batch_size
        self.rng = np.random.default_rng([seed, 0xBA7C])
        self.index = 0
        needed = batch_composition(stage, batch_size, 0)
        for g in needed:
            if not pool.get(g):
                raise EmptyGroupError(f"group {g} has no slabs; stage {stage} sampling needs it")
        self._queues = {g: [] for g in needed}

    def draw(self, group):
        queue = self._queues[group]
        if not queue:
            queue.extend(self.rng.permutation(len(self.pool[group])).tolist()[::-1])
        return self.pool[group][queue.pop()]

    def next_batch(self):
        counts = batch_composition(self.stage, self.batch_size, self.index)
        self.index += 1
        return [self.draw(g) for g in counts for _ in range(counts[g])]

    def __iter__(self):
        while True:
            yield self.next_batch()


def sample_batch(pool, stage, batch=32, rng_seed=0, index=0):
    """Batch number ``index`` of the seeded stream (convenience wrapper)."""
    sampler = BalancedSampler(pool, stage, batch, rng_seed)
    for _ in range(index):
        sampler.next_batch()
    return sampler.next_batch()


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------

@dataclass
class AugmentationPolicy:
    rotation: bool = False
    rotation_p: float = 1.0
    max_angle: float = 30.0
    hflip: bool = False
    hflip_p: float = 0.5
    crop_zoom: bool = False
    crop_zoom_p: float = 0.66
    crop_range: tuple = (0.75, 0.95)

    def __post_init__(self):
        for p in (self.rotation_p, self.hflip_p, self.crop_zoom_p):
            if not 0 <= p <= 1:
                raise ValueError("augmentation probabilities must be in [0, 1]")


def _affine(plane, matrix, order, cval):
    h, w = plane.shape
    c = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = c - matrix @ c
    return ndimage.affine_transform(plane, matrix, offset=offset, output_shape=(h, w),
                                    order=order, mode="constant", cval=cval)


def augment(slab, policy, rng, angle=None):
    """Randomly rotate, flip and crop-zoom a KT slab.

    Non-KT slabs come back unchanged. Returns ``None`` when the transform
    pushes every tumor pixel out of frame, so the caller draws another slab.
    ``rng`` is a seed or ``numpy.random.Generator``; ``angle`` (degrees)
    pins the rotation for testing.
    """
    if slab.group != "KT":
        return slab
    rng = np.random.default_rng(rng)
    x, tgt = slab.input, slab.target
    if policy.hflip and rng.random() < policy.hflip_p:
        x, tgt = x[..., ::-1], tgt[..., ::-1]
    matrix = np.eye(2)
    if policy.rotation and rng.random() < policy.rotation_p:
        theta = np.deg2rad(rng.uniform(-policy.max_angle, policy.max_angle) if angle is None else angle)
        cos, sin = np.cos(theta), np.sin(theta)
        matrix = np.array([[cos, -sin], [sin, cos]]) @ matrix
    if policy.crop_zoom and rng.random() < policy.crop_zoom_p:
        matrix = matrix @ (np.eye(2) * rng.uniform(*policy.crop_range))
    if not np.allclose(matrix, np.eye(2), rtol=0, atol=1e-12):
        x = np.stack([_affine(ch, matrix, 1, slab.fill_value) for ch in x])
        tgt = _affine(tgt, matrix, 0, 0)
    x = np.ascontiguousarray(x, dtype=np.float32)
    tgt = np.ascontiguousarray(tgt, dtype=np.uint8)
    if classify_group(tgt) != "KT":
        return None
    return replace(slab, input=x, target=tgt)
