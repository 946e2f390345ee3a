"""Staged inference: coarse localization, ROI extraction, ROI segmentation,
ensembling and connected-component clean-up."""
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .exceptions import GeometryError, ShapeError
from .preprocess import (CONTEXT, VolumePreprocessor, downsample_xy, reslice_z, stack_25d,
                         upsample_labels_xy)
from .validation import check_volume
from .volume_io import LabelVolume

logger = logging.getLogger(__name__)

REFERENCE_MIN_VOXELS = 5000
# typical KiTS19 voxel after 3 mm reslicing (mean in-plane spacing ~0.78 mm)
REFERENCE_VOXEL_MM3 = 0.78 * 0.78 * 3.0


def scaled_min_voxels(spacing, anatomy_scale=1.0, base=REFERENCE_MIN_VOXELS,
                      reference_voxel_mm3=REFERENCE_VOXEL_MM3):
    """Component-size threshold carrying the 5000-voxel rule to another grid.

    The threshold keeps the same physical volume, further multiplied by
    ``anatomy_scale`` when the organs themselves are scaled (phantoms).
    """
    voxel = float(np.prod(spacing))
    return max(1, int(round(base * reference_voxel_mm3 / voxel * anatomy_scale)))


@dataclass
class PipelineConfig:
    thickness: float = 3.0
    hu_min: float = -30.0
    hu_max: float = 300.0
    stage1_size: int = 256
    roi_size: int = 256
    min_voxels_stage1: int = REFERENCE_MIN_VOXELS
    min_voxels_final: int = REFERENCE_MIN_VOXELS
    ensemble: str = "mean"
    batch_size: int = 16


# --------------------------------------------------------------------------
# connected components
# --------------------------------------------------------------------------

@dataclass
class Component:
    label: int
    size: int
    bbox: tuple  # (z0, z1, y0, y1, x0, x1), inclusive


_STRUCTURES = {
    6: ndimage.generate_binary_structure(3, 1),
    18: ndimage.generate_binary_structure(3, 2),
    26: ndimage.generate_binary_structure(3, 3),
}


def label_components(mask, connectivity=26):
    """Label map and components sorted by descending size (ties: label order)."""
    mask = np.asarray(getattr(mask, "data", mask)) > 0
    if connectivity not in _STRUCTURES:
        raise ValueError("connectivity must be 6, 18 or 26")
    labels, n = ndimage.label(mask, structure=_STRUCTURES[connectivity])
    if n == 0:
        return labels, []
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    slices = ndimage.find_objects(labels)
    comps = []
    for i, sl in enumerate(slices, start=1):
        bbox = tuple(v for s in sl for v in (s.start, s.stop - 1))
        comps.append(Component(i, int(sizes[i]), bbox))
    comps.sort(key=lambda c: (-c.size, c.label))
    return labels, comps


def connected_components(mask, connectivity=26):
    return label_components(mask, connectivity)[1]


def filter_small_components(mask, min_voxels=REFERENCE_MIN_VOXELS, connectivity=26):
    """Drop foreground components with ``size <= min_voxels``; labels are kept."""
    if min_voxels < 1:
        raise ValueError("min_voxels must be >= 1")
    data = np.asarray(getattr(mask, "data", mask))
    labels, comps = label_components(data, connectivity)
    keep = np.zeros(len(comps) + 1, dtype=bool)
    for c in comps:
        keep[c.label] = c.size > min_voxels
    out = np.where(keep[labels], data, 0).astype(data.dtype)
    if isinstance(mask, LabelVolume):
        return mask.with_data(out)
    return out


# --------------------------------------------------------------------------
# ROIs
# --------------------------------------------------------------------------

@dataclass
class Roi:
    """Fixed-size in-plane window plus a slice range, in resliced coordinates."""

    kidney_index: int
    y0: int
    x0: int
    size: int
    z0: int
    z1: int

    @property
    def window(self):
        return self.y0, self.x0, self.size, self.size

    @property
    def n_slices(self):
        return self.z1 - self.z0 + 1


def _window_start(lo, hi, size, extent):
    if size > extent:
        raise GeometryError(f"ROI size {size} exceeds image extent {extent}")
    center2 = lo + hi + 1  # twice the bbox center
    start = (center2 - size) // 2
    return int(min(max(start, 0), extent - size))


def roi_from_bbox(bbox, shape, roi_size, index=0, z_pad=CONTEXT):
    z0, z1, y0, y1, x0, x1 = bbox
    nz, ny, nx = shape
    return Roi(index, _window_start(y0, y1, roi_size, ny), _window_start(x0, x1, roi_size, nx),
               roi_size, max(0, z0 - z_pad), min(nz - 1, z1 + z_pad))


def extract_rois(meta_mask, roi_size=256, max_rois=2, z_pad=CONTEXT):
    """One window per kidney candidate (the ``max_rois`` largest components)."""
    data = np.asarray(getattr(meta_mask, "data", meta_mask))
    comps = connected_components(data)[:max_rois]
    return [roi_from_bbox(c.bbox, data.shape, roi_size, i, z_pad) for i, c in enumerate(comps)]


# --------------------------------------------------------------------------
# stage predictions
# --------------------------------------------------------------------------

def stage1_labels(v, net, size, batch_size=16):
    """Per-slice 3-class argmax of the coarse network, at native in-plane size."""
    nz, ny, nx = v.shape
    X = np.stack([downsample_xy(stack_25d(v, z), size) for z in range(nz)])
    probs = net.predict_proba(X, batch_size)
    labels = argmax_high(probs)
    return upsample_labels_xy(labels, ny, nx).astype(np.uint8)


def stage1_predict(v, net, size, batch_size=16):
    """Coarse kidney localization mask: kidney and tumor merged into one class."""
    check_volume(v)
    labels = stage1_labels(v, net, size, batch_size)
    return LabelVolume((labels > 0).astype(np.uint8), v.spacing)


@dataclass
class ProbabilityVolume:
    probs: np.ndarray  # [nz, 3, S, S]
    roi: Roi = None

    def __post_init__(self):
        if self.probs.ndim != 4:
            raise ShapeError("probability volume must be [nz, classes, H, W]")


def roi_inputs(v, roi):
    nz, ny, nx = v.shape
    if (roi.y0 < 0 or roi.x0 < 0 or roi.y0 + roi.size > ny or roi.x0 + roi.size > nx
            or roi.z0 < 0 or roi.z1 >= nz or roi.z1 < roi.z0):
        raise GeometryError(f"ROI {roi} lies outside volume of shape {v.shape}")
    sl = (slice(None), slice(roi.y0, roi.y0 + roi.size), slice(roi.x0, roi.x0 + roi.size))
    return np.stack([stack_25d(v, z)[sl] for z in range(roi.z0, roi.z1 + 1)])


def stage2_predict(v, roi, nets, batch_size=16):
    X = roi_inputs(v, roi)
    return [ProbabilityVolume(net.predict_proba(X, batch_size), roi) for net in nets]


def argmax_high(probs, axis=1):
    """Argmax over ``axis`` with ties resolved toward the higher class index."""
    rev = np.flip(probs, axis=axis)
    return (probs.shape[axis] - 1 - np.argmax(rev, axis=axis)).astype(np.uint8)


def ensemble(prob_volumes, method="mean"):
    """Combine member probabilities; returns ``(labels, mean_probs)``."""
    if not prob_volumes:
        raise ValueError("ensemble needs at least one member")
    arrays = [getattr(p, "probs", p) for p in prob_volumes]
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise GeometryError(f"ensemble members disagree in geometry: {a.shape} vs {shape}")
    mean = np.mean(np.stack(arrays), axis=0, dtype=np.float64).astype(np.float32)
    if method == "mean":
        return argmax_high(mean), mean
    if method == "vote":
        k = shape[1]
        votes = sum(np.eye(k, dtype=np.int32)[argmax_high(a)] for a in arrays)
        return argmax_high(np.moveaxis(votes, -1, 1)), mean
    raise ValueError(f"unknown ensemble method {method!r}")


@dataclass
class PredictionResult:
    labels: LabelVolume
    rois: list = field(default_factory=list)
    warnings: list = field(default_factory=list)


def predict_volume(raw, stage1_net, stage2_nets, cfg=None, return_details=False):
    """Run the full chain on a raw HU volume and return labels in its geometry."""
    check_volume(raw)
    cfg = cfg or PipelineConfig()
    pre = VolumePreprocessor(cfg.thickness, cfg.hu_min, cfg.hu_max)
    v = pre.transform(raw)
    coarse = stage1_predict(v, stage1_net, cfg.stage1_size, cfg.batch_size)
    coarse = filter_small_components(coarse, cfg.min_voxels_stage1)
    rois = extract_rois(coarse, cfg.roi_size)
    warnings = []
    canvas = np.zeros(v.shape, dtype=np.uint8)
    if not rois:
        warnings.append("no kidney found")
        logger.warning("no kidney found; returning an all-background mask")
    else:
        tumor_p = np.full(v.shape, -1.0, dtype=np.float32)
        for roi in rois:
            labels, mean = ensemble(stage2_predict(v, roi, stage2_nets, cfg.batch_size), cfg.ensemble)
            sl = (slice(roi.z0, roi.z1 + 1), slice(roi.y0, roi.y0 + roi.size),
                  slice(roi.x0, roi.x0 + roi.size))
            better = mean[:, 2] > tumor_p[sl]
            canvas[sl] = np.where(better, labels, canvas[sl])
            tumor_p[sl] = np.where(better, mean[:, 2], tumor_p[sl])
        canvas = filter_small_components(canvas, cfg.min_voxels_final)
    out = reslice_z(LabelVolume(canvas, v.spacing), raw.spacing[2], nz=raw.shape[0])
    out = LabelVolume(out.data, raw.spacing)
    if return_details:
        return PredictionResult(out, rois, warnings)
    return out


def predict_stage1_only(raw, stage1_net, cfg=None):
    """3-class output of the coarse network alone, in raw geometry."""
    cfg = cfg or PipelineConfig()
    v = VolumePreprocessor(cfg.thickness, cfg.hu_min, cfg.hu_max).transform(raw)
    labels = stage1_labels(v, stage1_net, cfg.stage1_size, cfg.batch_size)
    labels = filter_small_components(labels, cfg.min_voxels_stage1)
    out = reslice_z(LabelVolume(labels, v.spacing), raw.spacing[2], nz=raw.shape[0])
    return LabelVolume(out.data, raw.spacing)
