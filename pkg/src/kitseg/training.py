"""Adam training loop with weighted cross-entropy, L2 on kernels and
best-checkpoint retention, plus the three per-network presets."""
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .evaluation import evaluate_case
from .exceptions import NonFiniteError
from .networks import (InitSpec, ResNetSpec, ResUNetSpec, build_res_net, build_res_unet)
from .pipeline import connected_components, roi_from_bbox
from .preprocess import (AugmentationPolicy, BalancedSampler, GROUPS, augment, make_slab,
                         pool_by_group)

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    network: str = "res-unet1"
    stage: int = 1
    class_weights: tuple = (0.3, 1.0, 3.0)
    lr: float = 1e-4
    init_scheme: str = "truncated_normal"
    init_std: float = 0.1
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    max_epochs: int = 250
    max_iterations: int = 0  # 0 = no cap
    epoch_iterations: int = 0  # 0 = one pass over the K and KT slabs
    batch_size: int = 32
    l2_scale: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    val_fraction: float = 0.1
    base_channels: int = 32
    seed: int = 0

    @property
    def architecture(self):
        return "res-net" if self.network == "res-net" else "res-unet"


PRESETS = {
    "res-unet1": TrainConfig(network="res-unet1", class_weights=(0.3, 1.0, 3.0), lr=1e-4,
                             init_scheme="truncated_normal",
                             augmentation=AugmentationPolicy(rotation=True)),
    "res-unet2": TrainConfig(network="res-unet2", stage=2, class_weights=(0.3, 1.0, 3.0), lr=1e-4,
                             init_scheme="truncated_normal",
                             augmentation=AugmentationPolicy(rotation=True, hflip=True)),
    "res-net": TrainConfig(network="res-net", stage=2, class_weights=(0.2, 0.25, 0.55), lr=1e-3,
                           init_scheme="he_uniform",
                           augmentation=AugmentationPolicy(rotation=True, hflip=True,
                                                           crop_zoom=True)),
}


def preset(name, **overrides):
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)


def build_network(cfg):
    init = InitSpec(cfg.init_scheme, cfg.init_std, cfg.seed)
    if cfg.architecture == "res-net":
        return build_res_net(ResNetSpec(base_channels=cfg.base_channels), init)
    return build_res_unet(ResUNetSpec(base_channels=cfg.base_channels), init)


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

class AdamState:
    def __init__(self):
        self.m = {}
        self.v = {}
        self.step = 0

    def to_arrays(self):
        out = {}
        for name in self.m:
            out["m/" + name] = self.m[name]
            out["v/" + name] = self.v[name]
        return out

    @classmethod
    def from_arrays(cls, arrays, step):
        st = cls()
        for key, arr in arrays.items():
            kind, name = key.split("/", 1)
            getattr(st, kind)[name] = np.array(arr, dtype=np.float32)
        st.step = int(step)
        return st


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place Adam update of ``params`` (name -> ndarray) with bias correction."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * np.square(g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return params, state


# --------------------------------------------------------------------------
# slab construction for each stage
# --------------------------------------------------------------------------

def stage1_slabs(image, labels, size, volume_id=""):
    """Every axial slice, shrunk to ``size`` for the coarse network."""
    fill = float(image.data.min())
    return [make_slab(image, labels, z, volume_id, size=size, fill_value=fill)
            for z in range(image.shape[0])]


def stage2_slabs(image, labels, roi_size, volume_id="", jitter=0, seed=0, groups=("K", "KT")):
    """Full-resolution ROI slabs around each ground-truth kidney.

    Windows are placed like inference ROIs, shifted by up to ``jitter``
    pixels so the network tolerates imperfect coarse localization.
    """
    rng = np.random.default_rng([seed, 0x5A2])
    fill = float(image.data.min())
    slabs = []
    comps = connected_components(labels.data > 0)[:2]
    nz, ny, nx = image.shape
    for i, c in enumerate(comps):
        roi = roi_from_bbox(c.bbox, image.shape, roi_size, i)
        if jitter:
            dy, dx = rng.integers(-jitter, jitter + 1, size=2)
            roi.y0 = int(np.clip(roi.y0 + dy, 0, ny - roi_size))
            roi.x0 = int(np.clip(roi.x0 + dx, 0, nx - roi_size))
        for z in range(roi.z0, roi.z1 + 1):
            s = make_slab(image, labels, z, volume_id, window=roi.window, fill_value=fill)
            s.meta["roi"] = i
            if s.group in groups:
                slabs.append(s)
    return slabs


def slabs_to_arrays(slabs):
    X = np.stack([s.input for s in slabs]).astype(np.float32)
    y = np.stack([s.target for s in slabs]).astype(np.uint8)
    return X, y


# --------------------------------------------------------------------------
# validation and training
# --------------------------------------------------------------------------

def validate(network, slabs, batch_size=16):
    """Mean per-volume ``(dice_kidney_composite, dice_tumor)`` over ``slabs``.

    Slabs are grouped into volumes by the first field of their provenance.
    """
    if not slabs:
        raise ValueError("validation set is empty")
    X, y = slabs_to_arrays(slabs)
    pred = np.argmax(network.predict_proba(X, batch_size), axis=1)
    by_volume = {}
    for i, s in enumerate(slabs):
        by_volume.setdefault(s.provenance[0], []).append(i)
    scores = np.array([evaluate_case(y[idx], pred[idx]) for idx in by_volume.values()])
    return float(scores[:, 0].mean()), float(scores[:, 1].mean())


def epoch_batches(pool, stage, batch_size):
    """Batches needed to see every K and KT slab once under balanced sampling."""
    n_fg = len(pool.get("K", ())) + len(pool.get("KT", ()))
    fg_per_batch = batch_size * (2 / 3 if stage == 1 else 1)
    return max(1, math.ceil(n_fg / fg_per_batch))


@dataclass
class TrainResult:
    network: object
    best_state: dict
    best_epoch: int
    best_score: float
    optimizer: AdamState
    log: list
    meta: dict


def loss_on_batch(network, X, y, cfg, seed=0):
    probs = network(X, seed=seed)
    ce = T.weighted_cross_entropy(probs, y, cfg.class_weights)
    return T.add(ce, T.l2_penalty(network.kernels(), cfg.l2_scale)), ce


def train_step(network, X, y, cfg, state, lr=None):
    """One forward/backward/Adam update; returns the total loss value."""
    network.train()
    params = dict(network.named_parameters())
    for t in params.values():
        t.zero_grad()
    loss, _ = loss_on_batch(network, X, y, cfg, seed=cfg.seed)
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteError("non-finite loss")
    loss.backward()
    adam_step({n: t.data for n, t in params.items()}, {n: t.grad for n, t in params.items()},
              state, cfg.lr if lr is None else lr, cfg.beta1, cfg.beta2, cfg.eps)
    return value


def _assemble(sampler, cfg, iteration):
    batch = sampler.next_batch()
    out = []
    for pos, slab in enumerate(batch):
        for attempt in range(20):
            aug = augment(slab, cfg.augmentation, [cfg.seed, iteration, pos, attempt])
            if aug is not None:
                break
            slab = sampler.draw("KT")
        else:
            aug = slab
        out.append(aug)
    return out


def train(network, pool, val_slabs, cfg, on_epoch=None):
    """Train with balanced batches and keep the best validation checkpoint.

    ``pool`` maps group name to slab lists. The validation score is the mean
    of kidney-composite and tumor Dice; ``on_epoch`` receives each log row.
    """
    sampler = BalancedSampler(pool, cfg.stage, cfg.batch_size, cfg.seed)
    n_batches = cfg.epoch_iterations or epoch_batches(pool, cfg.stage, cfg.batch_size)
    state = AdamState()
    log = []
    best = None
    iteration = 0
    for epoch in range(1, cfg.max_epochs + 1):
        start = time.perf_counter()
        losses = []
        for _ in range(n_batches):
            batch = _assemble(sampler, cfg, iteration)
            X, y = slabs_to_arrays(batch)
            try:
                losses.append(train_step(network, X, y, cfg, state))
            except NonFiniteError as exc:
                prov = [s.provenance for s in batch]
                raise NonFiniteError(f"{exc} at epoch {epoch}, iteration {iteration}; "
                                     f"batch provenance {prov}") from exc
            iteration += 1
            if cfg.max_iterations and iteration >= cfg.max_iterations:
                break
        dk, dt = validate(network, val_slabs)
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "dice_kidney": dk, "dice_tumor": dt}
        log.append(row)
        score = (dk + dt) / 2
        if best is None or score > best[1]:
            best = (epoch, score, network.state_dict(), row)
        logger.info("epoch %d loss %.4f dice_kidney %.4f dice_tumor %.4f (%.1fs)", epoch,
                    row["loss"], dk, dt, time.perf_counter() - start)
        if on_epoch:
            on_epoch(row)
        if cfg.max_iterations and iteration >= cfg.max_iterations:
            break
    epoch, score, state_dict, row = best
    meta = {"epoch": epoch, "val_dice": score, "dice_kidney": row["dice_kidney"],
            "dice_tumor": row["dice_tumor"], "arch": network.arch, "preset": cfg.network,
            "stage": cfg.stage, "adam_step": state.step,
            "train_config": _config_record(cfg)}
    return TrainResult(network, state_dict, epoch, score, state, log, meta)


def _config_record(cfg):
    rec = asdict(cfg)
    rec["class_weights"] = list(cfg.class_weights)
    return rec


def case_slabs(cases, stage, size, jitter=0, seed=0):
    """Slabs for ``stage`` from preprocessed ``(volume_id, image, labels)`` cases.

    Stage 2 ROI windows are jittered only when ``jitter`` is nonzero, which
    callers use for training data and not for validation data.
    """
    out = []
    for i, (vid, image, labels) in enumerate(cases):
        if stage == 1:
            out += stage1_slabs(image, labels, size, vid)
        else:
            out += stage2_slabs(image, labels, size, vid, jitter=jitter, seed=seed * 100003 + i)
    return out


def fit_network(cfg, train_cases, val_cases, size, jitter=0, on_epoch=None):
    """Build slab pools, train a fresh network and load its best weights."""
    pool = pool_by_group(case_slabs(train_cases, cfg.stage, size, jitter, cfg.seed))
    val = case_slabs(val_cases, cfg.stage, size)
    logger.info("%s: pool %s, %d validation slabs", cfg.network,
                {g: len(v) for g, v in pool.items()}, len(val))
    network = build_network(cfg)
    result = train(network, pool, val, cfg, on_epoch)
    network.load_state_dict(result.best_state)
    result.meta["input_size"] = size
    return result


def log_csv(log):
    lines = ["epoch,loss,dice_kidney,dice_tumor"]
    for r in log:
        lines.append(f"{r['epoch']},{r['loss']:.6f},{r['dice_kidney']:.6f},{r['dice_tumor']:.6f}")
    return "\n".join(lines) + "\n"


def split_volumes(ids, val_fraction, seed=0):
    """Deterministic train/validation split of volume ids."""
    ids = sorted(ids)
    n_val = max(1, int(round(len(ids) * val_fraction))) if len(ids) > 1 else 0
    order = np.random.default_rng([seed, 0x5B1]).permutation(len(ids))
    val = {ids[i] for i in order[:n_val]}
    return [i for i in ids if i not in val], [i for i in ids if i in val]


__all__ = ["TrainConfig", "PRESETS", "preset", "AdamState", "adam_step", "train", "validate",
           "train_step", "stage1_slabs", "stage2_slabs", "case_slabs", "fit_network",
           "split_volumes", "log_csv", "GROUPS", "pool_by_group"]
