"""Per-datapoint detector output shared by both detectors."""
from __future__ import annotations

import csv
from dataclasses import dataclass

ANOMALY = "anomaly"
NORMAL = "normal"
KPCA = "kpca"
VAE = "vae"

# score direction per detector
HIGHER = "higher"  # larger score = more anomalous (reconstruction MSE)
LOWER = "lower"  # smaller score = more anomalous (log reconstruction probability)
DIRECTION = {KPCA: HIGHER, VAE: LOWER}


@dataclass(frozen=True)
class AnomalyRecord:
    app_id: str
    score: float
    verdict: str
    detector: str


def write_records_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["app_id", "score", "verdict"])
        for r in records:
            w.writerow([r.app_id, f"{r.score:.17g}", r.verdict])
