"""Dice overlap and per-case / per-model reports."""
import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .exceptions import GeometryError


def dice(gt_mask, pred_mask):
    """``2 |A n B| / (|A| + |B|)``; two empty masks score 1."""
    a = np.asarray(getattr(gt_mask, "data", gt_mask)).astype(bool)
    b = np.asarray(getattr(pred_mask, "data", pred_mask)).astype(bool)
    if a.shape != b.shape:
        raise GeometryError(f"dice: geometry mismatch {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def evaluate_case(gt, pred):
    """Return ``(dice_kidney_composite, dice_tumor)``.

    The composite treats kidney and tumor as one structure (labels 1 and 2);
    the tumor score uses label 2 alone.
    """
    g = np.asarray(getattr(gt, "data", gt))
    p = np.asarray(getattr(pred, "data", pred))
    if g.shape != p.shape:
        raise GeometryError(f"evaluate_case: geometry mismatch {g.shape} vs {p.shape}")
    if hasattr(gt, "spacing") and hasattr(pred, "spacing") and gt.spacing != pred.spacing:
        raise GeometryError("evaluate_case: spacing mismatch")
    return dice(g > 0, p > 0), dice(g == 2, p == 2)


@dataclass
class CaseResult:
    volume_id: str
    dice_kidney: float
    dice_tumor: float
    gt_has_tumor: bool = True


@dataclass
class DiceReport:
    """Per-volume Dice rows for one or more models."""

    rows: dict = field(default_factory=dict)  # model name -> list[CaseResult]

    def add(self, model, volume_id, gt, pred):
        dk, dt = evaluate_case(gt, pred)
        has_tumor = bool(np.any(np.asarray(getattr(gt, "data", gt)) == 2))
        result = CaseResult(volume_id, dk, dt, has_tumor)
        self.rows.setdefault(model, []).append(result)
        return result

    def summary(self, model):
        """``{column: (mean, std)}`` for one model."""
        rows = self.rows[model]
        out = {}
        for col in ("dice_kidney", "dice_tumor"):
            vals = np.array([getattr(r, col) for r in rows], dtype=np.float64)
            out[col] = (float(vals.mean()), float(vals.std()))
        return out

    def case_csv(self, model):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["volume_id", "dice_kidney", "dice_tumor"])
        for r in self.rows[model]:
            w.writerow([r.volume_id, f"{r.dice_kidney:.6f}", f"{r.dice_tumor:.6f}"])
        s = self.summary(model)
        w.writerow(["summary", _pm(*s["dice_kidney"]), _pm(*s["dice_tumor"])])
        return buf.getvalue()

    def table_csv(self):
        """One ``mean ± std`` row per model, in insertion order."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "dice_kidney", "dice_tumor"])
        for model in self.rows:
            s = self.summary(model)
            w.writerow([model, _pm(*s["dice_kidney"]), _pm(*s["dice_tumor"])])
        return buf.getvalue()


def _pm(mean, std):
    return f"{mean:.4f} ± {std:.4f}"


def read_case_csv(text):
    """Parse :meth:`DiceReport.case_csv` output back into per-volume rows."""
    rows = list(csv.reader(io.StringIO(text)))
    out = []
    for vid, dk, dt in rows[1:]:
        if vid == "summary":
            continue
        out.append((vid, float(dk), float(dt)))
    return out
