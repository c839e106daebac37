"""Thresholds, classification metrics and 2-D latent export."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import kpca, vae
from .errors import InputError
from .featurize import MALICIOUS, Dataset
from .records import ANOMALY, DIRECTION, HIGHER, LOWER


class UndefinedMetricError(InputError):
    pass


def _check_direction(direction):
    if direction not in (HIGHER, LOWER):
        raise InputError(f"direction must be {HIGHER!r} or {LOWER!r}")


def nearest_rank(values, p: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * N)-th smallest value."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    rank = max(1, math.ceil(round(p * len(v) / 100.0, 9)))
    return float(v[min(rank, len(v)) - 1])


def select_threshold(val_scores, p: float = 95.0, direction: str = HIGHER) -> float:
    """Threshold from benign validation scores.

    For higher-is-anomalous scores this is the p-th percentile; for
    lower-is-anomalous scores the (100 - p)-th.
    """
    _check_direction(direction)
    if len(val_scores) == 0:
        raise InputError("no validation scores to calibrate on")
    if not 0 < p < 100:
        raise InputError("percentile must lie in (0, 100)")
    return nearest_rank(val_scores, p if direction == HIGHER else 100.0 - p)


def _oriented(scores, direction):
    _check_direction(direction)
    s = np.asarray(scores, dtype=np.float64)
    return s if direction == HIGHER else -s


def roc_auc(scores, labels, direction: str = HIGHER) -> float:
    """Mann-Whitney AUC; tied positive/negative pairs earn half credit.

    ``labels`` are truthy for positives (anomalous) or the label strings.
    """
    s = _oriented(scores, direction)
    y = _as_positive(labels)
    if len(s) != len(y):
        raise InputError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    order = np.argsort(s, kind="stable")
    ranks = np.empty(len(s))
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _as_positive(labels) -> np.ndarray:
    return np.array([(lab == MALICIOUS) if isinstance(lab, str) else bool(lab) for lab in labels], dtype=bool)


@dataclass
class EvalReport:
    auc_roc: float | None
    f1: float
    precision: float
    recall: float
    tp: int
    fp: int
    tn: int
    fn: int
    threshold: float
    detector: str
    direction: str

    @property
    def confusion(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}

    def to_json(self) -> dict:
        d = asdict(self)
        for k in ("tp", "fp", "tn", "fn"):
            d.pop(k)
        d["confusion"] = self.confusion
        d["threshold"] = _json_float(self.threshold)
        return d


def _json_float(x):
    return x if math.isfinite(x) else ("inf" if x > 0 else "-inf")


def prf1(records, labels, threshold: float = math.nan, direction: str | None = None) -> EvalReport:
    """Confusion counts and precision/recall/F1 from verdicts; positives are malicious.

    AUC is filled in from the record scores when both classes are present.
    """
    records = list(records)
    labels = list(labels)
    if len(records) != len(labels):
        raise InputError(f"{len(records)} records but {len(labels)} labels")
    pred = np.array([r.verdict == ANOMALY for r in records], dtype=bool)
    y = _as_positive(labels)
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    tn = int(np.sum(~pred & ~y))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    detector = records[0].detector if records else ""
    if direction is None:
        direction = DIRECTION.get(detector, HIGHER)
    auc = None
    if 0 < y.sum() < len(y):
        auc = roc_auc([r.score for r in records], y, direction)
    return EvalReport(auc, f1, precision, recall, tp, fp, tn, fn, float(threshold), detector, direction)


def write_report(report: EvalReport, path, extra: dict | None = None) -> None:
    doc = report.to_json()
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def export_latent(model, dataset: Dataset, tags=None) -> list[tuple[str, str, float, float]]:
    """(app_id, label, z1, z2) per row; KPCA uses its projection, VAE the encoder mean."""
    if model.latent_dim != 2:
        raise InputError(f"latent export needs a 2-D latent space, model has {model.latent_dim}")
    rows = dataset.select(*tags) if tags else dataset.rows
    if not rows:
        return []
    X = np.vstack([r.values for r in rows])
    if isinstance(model, kpca.KpcaModel):
        Z = kpca.kpca_transform(model, X)
    elif isinstance(model, vae.VaeModel):
        Z, _ = vae.encode(model, X)
    else:
        raise InputError(f"unsupported model type {type(model).__name__}")
    return [(r.app_id, r.label, float(z[0]), float(z[1])) for r, z in zip(rows, Z)]


def write_latent_csv(table, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["app_id", "label", "z1", "z2"])
        for app, label, z1, z2 in table:
            w.writerow([app, label, f"{z1:.17g}", f"{z2:.17g}"])
