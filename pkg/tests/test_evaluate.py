import csv
import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spotcheck import evaluate, kpca, vae
from spotcheck.errors import InputError
from spotcheck.evaluate import UndefinedMetricError
from spotcheck.featurize import BENIGN, MALICIOUS
from spotcheck.records import ANOMALY, HIGHER, LOWER, NORMAL, AnomalyRecord


def _brute_auc(scores, positive):
    pos = [s for s, y in zip(scores, positive) if y]
    neg = [s for s, y in zip(scores, positive) if not y]
    credit = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return credit / (len(pos) * len(neg))


def test_nearest_rank_examples():
    assert evaluate.select_threshold(np.arange(1, 101), 95, HIGHER) == 95
    assert evaluate.select_threshold(np.arange(1, 101), 95, LOWER) == 5
    assert evaluate.select_threshold([3.5] * 17, 95, HIGHER) == 3.5
    assert evaluate.nearest_rank([7.0], 1) == 7.0


def test_threshold_errors():
    with pytest.raises(InputError):
        evaluate.select_threshold([], 95)
    with pytest.raises(InputError):
        evaluate.select_threshold([1.0], 100)
    with pytest.raises(InputError):
        evaluate.select_threshold([1.0], 95, "sideways")


def test_threshold_flags_about_five_percent(rng):
    val = rng.normal(size=10_000)
    fresh = rng.normal(size=10_000)
    a = evaluate.select_threshold(val, 95, HIGHER)
    assert abs(np.mean(fresh > a) - 0.05) <= 0.02
    b = evaluate.select_threshold(val, 95, LOWER)
    assert abs(np.mean(fresh < b) - 0.05) <= 0.02


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=60), st.floats(1, 98), st.floats(0.5, 1.5))
def test_threshold_monotone_in_p(values, p, dp):
    q = min(p + dp, 99.9)
    assert evaluate.select_threshold(values, p, HIGHER) <= evaluate.select_threshold(values, q, HIGHER)
    assert evaluate.select_threshold(values, p, LOWER) >= evaluate.select_threshold(values, q, LOWER)


def test_auc_matches_brute_force_with_ties(rng):
    scores = rng.integers(0, 15, size=200).astype(float)
    labels = rng.random(200) < 0.3
    assert evaluate.roc_auc(scores, labels) == _brute_auc(scores, labels)
    cont = rng.normal(size=200)
    assert evaluate.roc_auc(cont, labels) == pytest.approx(_brute_auc(cont, labels), abs=1e-15)


def test_auc_trivial_cases():
    assert evaluate.roc_auc([0, 1, 2, 3], [False, False, True, True]) == 1.0
    assert evaluate.roc_auc([5.0] * 6, [True, False] * 3) == 0.5
    assert evaluate.roc_auc([3, 2], [MALICIOUS, BENIGN]) == 1.0
    with pytest.raises(UndefinedMetricError):
        evaluate.roc_auc([1, 2], [True, True])
    with pytest.raises(InputError):
        evaluate.roc_auc([1, 2, 3], [True, False])


@settings(max_examples=60)
@given(st.lists(st.tuples(st.integers(-20, 20), st.booleans()), min_size=2, max_size=50))
def test_auc_properties(pairs):
    scores = np.array([p[0] for p in pairs], dtype=float)
    labels = np.array([p[1] for p in pairs])
    if labels.all() or not labels.any():
        return
    auc = evaluate.roc_auc(scores, labels, HIGHER)
    assert auc == _brute_auc(scores, labels)
    assert evaluate.roc_auc(scores, labels, LOWER) == pytest.approx(1.0 - auc, abs=1e-12)
    assert evaluate.roc_auc(np.exp(scores / 7.0) * 3 + 1, labels) == auc


def _recs(verdicts, scores=None):
    scores = scores if scores is not None else list(range(len(verdicts)))
    return [AnomalyRecord(f"a{i}", float(s), v, "kpca") for i, (v, s) in enumerate(zip(verdicts, scores))]


def test_prf1_examples():
    r = evaluate.prf1(_recs([ANOMALY, ANOMALY, NORMAL]), [MALICIOUS, BENIGN, BENIGN])
    assert (r.precision, r.recall, r.f1) == (0.5, 1.0, pytest.approx(2 / 3))
    assert r.confusion == {"tp": 1, "fp": 1, "tn": 1, "fn": 0}
    z = evaluate.prf1(_recs([NORMAL] * 3), [MALICIOUS, BENIGN, BENIGN])
    assert (z.precision, z.recall, z.f1) == (0.0, 0.0, 0.0)
    with pytest.raises(InputError):
        evaluate.prf1(_recs([NORMAL]), [BENIGN, BENIGN])


def test_prf1_matches_scripted_confusion(rng):
    n = 500
    verdicts = [ANOMALY if v else NORMAL for v in rng.random(n) < 0.4]
    labels = [MALICIOUS if v else BENIGN for v in rng.random(n) < 0.25]
    counts = {"tp": 0, "fp": 0, "tn": 0, "fn": 0}
    for v, lab in zip(verdicts, labels):
        key = ("t" if (v == ANOMALY) == (lab == MALICIOUS) else "f") + ("p" if v == ANOMALY else "n")
        counts[key] += 1
    r = evaluate.prf1(_recs(verdicts, rng.normal(size=n)), labels)
    assert r.confusion == counts
    assert sum(counts.values()) == n
    assert r.precision == counts["tp"] / (counts["tp"] + counts["fp"])
    assert r.recall == counts["tp"] / (counts["tp"] + counts["fn"])
    for m in (r.precision, r.recall, r.f1, r.auc_roc):
        assert 0.0 <= m <= 1.0


def test_report_json(tmp_path):
    r = evaluate.prf1(_recs([ANOMALY, NORMAL], [2.0, 1.0]), [MALICIOUS, BENIGN], threshold=math.inf)
    path = tmp_path / "r.json"
    evaluate.write_report(r, path, {"split": "test"})
    doc = json.loads(path.read_text())
    assert doc["threshold"] == "inf" and doc["auc_roc"] == 1.0 and doc["split"] == "test"
    assert doc["direction"] == HIGHER and doc["confusion"]["tp"] == 1


def test_latent_export_kpca(blob):
    model = kpca.fit_kpca(blob.matrix("train"), grid=[0.2])
    table = evaluate.export_latent(model, blob, ["train"])
    assert [t[0] for t in table] == [r.app_id for r in blob.select("train")]
    assert np.array([t[2:] for t in table]) == pytest.approx(model.latents, abs=1e-12)


def test_latent_export_vae_deterministic_and_separated(tmp_path, blob):
    topo = vae.VaeTopology(8, (16, 8), 2, vae.NLL)
    model, _ = vae.train_vae(blob.matrix("train"), None, topo, vae.TrainConfig(epochs=150, batch_size=32, lr=3e-3))
    a = evaluate.export_latent(model, blob, ["test"])
    assert a == evaluate.export_latent(model, blob, ["test"])
    z = np.array([t[2:] for t in a])
    lab = np.array([t[1] for t in a])
    assert np.linalg.norm(z[lab == BENIGN].mean(0) - z[lab == MALICIOUS].mean(0)) > 0
    path = tmp_path / "z.csv"
    evaluate.write_latent_csv(a, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["app_id", "label", "z1", "z2"] and len(rows) == len(a) + 1
    assert float(rows[1][2]) == a[0][2]


def test_latent_export_refuses_other_dims(blob):
    model = vae.init_vae(vae.VaeTopology(8, (4,), 3), 0)
    with pytest.raises(InputError, match="2-D"):
        evaluate.export_latent(model, blob)
