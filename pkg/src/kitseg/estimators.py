"""scikit-learn style wrappers around the networks and the staged pipeline."""
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .evaluation import evaluate_case
from .pipeline import argmax_high, predict_stage1_only, predict_volume
from .preprocess import Slab, VolumePreprocessor, classify_group, pool_by_group
from .scale import SCALES
from .training import build_network, fit_network, preset, split_volumes, train
from .validation import check_same_geometry, check_slab_arrays, check_volume


class SlabSegmenter(ClassifierMixin, BaseEstimator):
    """Per-pixel 3-class segmenter on 2.5D slabs ``X[N,5,S,S]``.

    ``preset`` selects one of the three training configurations; the
    remaining parameters override its length and width.
    """

    def __init__(self, preset="res-unet1", base_channels=32, max_epochs=250, epoch_iterations=0,
                 max_iterations=0, batch_size=32, seed=0):
        self.preset = preset
        self.base_channels = base_channels
        self.max_epochs = max_epochs
        self.epoch_iterations = epoch_iterations
        self.max_iterations = max_iterations
        self.batch_size = batch_size
        self.seed = seed

    def _config(self):
        return preset(self.preset, base_channels=self.base_channels, max_epochs=self.max_epochs,
                      epoch_iterations=self.epoch_iterations, max_iterations=self.max_iterations,
                      batch_size=self.batch_size, seed=self.seed)

    @staticmethod
    def _slabs(X, y, volume_ids):
        ids = volume_ids if volume_ids is not None else ["train"] * len(X)
        return [Slab(X[i], y[i], classify_group(y[i]), (str(ids[i]), i), float(X[i].min()))
                for i in range(len(X))]

    def fit(self, X, y, X_val=None, y_val=None, volume_ids=None):
        """Train on slabs; validation defaults to the training slabs."""
        X, y = check_slab_arrays(X, y)
        slabs = self._slabs(X, y, volume_ids)
        if X_val is None:
            val = slabs
        else:
            X_val, y_val = check_slab_arrays(X_val, y_val)
            val = self._slabs(X_val, y_val, None)
        cfg = self._config()
        self.network_ = build_network(cfg)
        self.result_ = train(self.network_, pool_by_group(slabs), val, cfg)
        self.network_.load_state_dict(self.result_.best_state)
        self.network_.eval()
        self.classes_ = np.arange(3)
        return self

    @classmethod
    def from_network(cls, network, **params):
        est = cls(**params)
        est.network_ = network.eval()
        est.classes_ = np.arange(3)
        return est

    def predict_proba(self, X):
        check_is_fitted(self, "network_")
        return self.network_.predict_proba(check_slab_arrays(X))

    def predict(self, X):
        return argmax_high(self.predict_proba(X))

    def score(self, X, y, sample_weight=None):
        """Kidney-composite Dice over all pixels of the batch."""
        return evaluate_case(np.asarray(y), self.predict(X))[0]


class KidneyTumorSegmenter(BaseEstimator):
    """The full coarse-to-fine model on raw HU volumes.

    ``fit`` trains the stage-1 network and every stage-2 ensemble member;
    ``predict`` returns one label volume per input, in input geometry.
    """

    def __init__(self, scale="desk", stage2_presets=("res-unet2", "res-net"), ensemble="mean",
                 val_fraction=0.1, seed=0, stage1_only=False):
        self.scale = scale
        self.stage2_presets = stage2_presets
        self.ensemble = ensemble
        self.val_fraction = val_fraction
        self.seed = seed
        self.stage1_only = stage1_only

    def _scale(self):
        if self.scale not in SCALES:
            raise ValueError(f"unknown scale {self.scale!r}; choose from {sorted(SCALES)}")
        return SCALES[self.scale]

    def fit(self, volumes, labels, volume_ids=None):
        if len(volumes) != len(labels) or not volumes:
            raise ValueError("need matching, non-empty lists of volumes and labels")
        sc = self._scale()
        pre = VolumePreprocessor(thickness=sc.thickness)
        ids = list(volume_ids) if volume_ids is not None else [f"case_{i:05d}" for i in range(len(volumes))]
        cases = []
        for vid, v, lab in zip(ids, volumes, labels):
            check_volume(v)
            check_volume(lab, labels=True)
            check_same_geometry(v, lab)
            cases.append((vid, pre.transform(v), pre.transform_labels(lab)))
        tr, va = split_volumes(ids, self.val_fraction, self.seed)
        train_cases = [c for c in cases if c[0] in set(tr)]
        val_cases = [c for c in cases if c[0] in set(va)] or train_cases
        cfg = sc.train_config("res-unet1", seed=self.seed)
        self.stage1_ = fit_network(cfg, train_cases, val_cases, sc.stage1_size).network.eval()
        self.stage2_ = []
        for name in self.stage2_presets:
            cfg = sc.train_config(name, seed=self.seed)
            res = fit_network(cfg, train_cases, val_cases, sc.roi_size, jitter=sc.roi_jitter)
            self.stage2_.append(res.network.eval())
        return self

    @classmethod
    def from_networks(cls, stage1, stage2, **params):
        est = cls(**params)
        est.stage1_ = stage1.eval()
        est.stage2_ = [n.eval() for n in stage2]
        return est

    def predict(self, volumes):
        check_is_fitted(self, "stage1_")
        cfg = self._scale().pipeline_config(ensemble=self.ensemble)
        out = []
        for v in volumes:
            check_volume(v)
            if self.stage1_only:
                out.append(predict_stage1_only(v, self.stage1_, cfg))
            else:
                out.append(predict_volume(v, self.stage1_, self.stage2_, cfg))
        return out

    def score(self, volumes, labels):
        """Mean kidney-composite Dice over the given cases."""
        preds = self.predict(volumes)
        return float(np.mean([evaluate_case(g, p)[0] for g, p in zip(labels, preds)]))
