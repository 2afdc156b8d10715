"""Prediction quality metrics and correlation-plot exports.

Stresses travel as Mandel 6-vectors, but reported errors are physical:
the shear columns carry a factor sqrt(2) in Mandel convention, which is
divided out before any MPa-valued statistic.  The normalized error uses
the mean absolute Mandel deviation over the stress half-range of the
reference signal, matching the training-loss convention, so thresholds
carry over between training and evaluation.

The correlation export is a long-form table (coordinate, reference,
predicted) in MPa, one row per time step and physical component — the
raw material of a predicted-versus-reference scatter plot.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np

from .mandel import SQRT2

RESP_SCHEMA = "gsmnet-resp-v1"

COMPONENT_LABELS = ("s11", "s22", "s33", "s23", "s13", "s12")

# physical components that vanish under plane strain: s33, s23, s13
OUT_OF_PLANE = (2, 3, 4)

_MANDEL_TO_PHYS = np.array([1.0, 1.0, 1.0, 1.0 / SQRT2, 1.0 / SQRT2, 1.0 / SQRT2])


@dataclass(frozen=True)
class EvalMetrics:
    """Aggregate and per-coordinate stress errors of one prediction run."""

    mae_per_coordinate: dict  # physical components, MPa
    mae_mpa: float  # mean absolute error over physical components, MPa
    mae_norm: float  # mean absolute Mandel error over the stress half-range
    r2: float  # coefficient of determination, pooled physical components
    oop_mae_mpa: float  # out-of-plane subset (s33, s23, s13)
    oop_mae_norm: float
    oop_r2: float | None  # None when the out-of-plane reference is constant
    s_sig: float  # reference stress half-range used for normalization


def to_physical(sig_mandel):
    """Physical stress components (MPa) from Mandel rows."""
    return np.asarray(sig_mandel, dtype=np.float64) * _MANDEL_TO_PHYS


def stress_half_range(sig_mandel) -> float:
    """Half the spread of a reference stress signal over all entries."""
    sig = np.asarray(sig_mandel, dtype=np.float64)
    lo, hi = float(np.min(sig)), float(np.max(sig))
    if hi - lo <= 1e-12 * max(abs(hi), abs(lo), 1.0):
        raise ValueError("reference stress signal is constant; cannot normalize")
    return (hi - lo) / 2.0


def _r2(pred, ref) -> float:
    ss_res = float(np.sum((pred - ref) ** 2))
    ss_tot = float(np.sum((ref - np.mean(ref)) ** 2))
    if ss_tot == 0.0:
        raise ValueError("reference stress signal is constant; R^2 undefined")
    return 1.0 - ss_res / ss_tot


def _r2_or_none(pred, ref):
    ss_tot = float(np.sum((ref - np.mean(ref)) ** 2))
    if ss_tot == 0.0:
        return None
    return _r2(pred, ref)


def compute_metrics(sig_pred, sig_ref) -> EvalMetrics:
    """Error statistics of predicted vs reference Mandel stress rows.

    Accepts single sequences of shape (N, 6) or lists of such arrays
    (pooled); predictions and references must align row for row.
    """
    pred = _pool(sig_pred)
    ref = _pool(sig_ref)
    if pred.shape != ref.shape:
        raise ValueError(
            f"prediction and reference must share shape; got {pred.shape} vs {ref.shape}"
        )
    s_sig = stress_half_range(ref)
    pred_p = to_physical(pred)
    ref_p = to_physical(ref)
    abs_p = np.abs(pred_p - ref_p)
    abs_m = np.abs(pred - ref)

    per_coord = {
        label: float(np.mean(abs_p[:, i])) for i, label in enumerate(COMPONENT_LABELS)
    }
    oop = list(OUT_OF_PLANE)
    return EvalMetrics(
        mae_per_coordinate=per_coord,
        mae_mpa=float(np.mean(abs_p)),
        mae_norm=float(np.mean(abs_m) / s_sig),
        r2=_r2(pred_p, ref_p),
        oop_mae_mpa=float(np.mean(abs_p[:, oop])),
        oop_mae_norm=float(np.mean(abs_m[:, oop]) / s_sig),
        oop_r2=_r2_or_none(pred_p[:, oop], ref_p[:, oop]),
        s_sig=s_sig,
    )


def _pool(x):
    if isinstance(x, (list, tuple)):
        rows = [np.asarray(a, dtype=np.float64) for a in x]
        for a in rows:
            if a.ndim != 2 or a.shape[1] != 6:
                raise ValueError("each stress block must have shape (N, 6)")
        return np.concatenate(rows, axis=0)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 6:
        raise ValueError("stress rows must have shape (N, 6)")
    return x


def metrics_to_payload(metrics: EvalMetrics) -> dict:
    """JSON-ready form with out-of-plane subset grouped."""
    d = asdict(metrics)
    return {
        "mae_per_coordinate": d["mae_per_coordinate"],
        "mae_mpa": d["mae_mpa"],
        "mae_norm": d["mae_norm"],
        "r2": d["r2"],
        "out_of_plane": {
            "components": [COMPONENT_LABELS[i] for i in OUT_OF_PLANE],
            "mae_mpa": d["oop_mae_mpa"],
            "mae_norm": d["oop_mae_norm"],
            "r2": d["oop_r2"],
        },
        "s_sig": d["s_sig"],
    }


def correlation_rows(sig_pred, sig_ref):
    """Long-form (coordinate, reference, predicted) rows in MPa."""
    pred = to_physical(_pool(sig_pred))
    ref = to_physical(_pool(sig_ref))
    if pred.shape != ref.shape:
        raise ValueError(
            f"prediction and reference must share shape; got {pred.shape} vs {ref.shape}"
        )
    rows = []
    for n in range(ref.shape[0]):
        for i, label in enumerate(COMPONENT_LABELS):
            rows.append((label, float(ref[n, i]), float(pred[n, i])))
    return rows


def write_correlation_csv(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["coordinate", "reference", "predicted"])
        for label, ref, pred in rows:
            writer.writerow([label, repr(ref), repr(pred)])
