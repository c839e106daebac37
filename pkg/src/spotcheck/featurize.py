"""Behaviour histograms -> L1-scaled feature vectors -> labelled, split datasets."""
from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateInputError, InputError, ParseError
from .numerics import Prng

SYSCALL = "syscall"
HPROF = "hprof"
KINDS = (SYSCALL, HPROF)

BENIGN = "benign"
MALICIOUS = "malicious"
UNKNOWN = "unknown"
LABELS = (BENIGN, MALICIOUS, UNKNOWN)

TRAIN, VAL, TEST, UNSPLIT = "train", "val", "test", "-"
SPLITS = (TRAIN, VAL, TEST, UNSPLIT)


@dataclass(frozen=True)
class FeatureSchema:
    kind: str
    names: tuple[str, ...]

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"unknown schema kind {self.kind!r}")
        object.__setattr__(self, "names", tuple(self.names))
        if len(self.names) < 2:
            raise InputError("schema needs at least two features")
        if len(set(self.names)) != len(self.names):
            raise InputError("schema feature names must be unique")

    @property
    def dim(self) -> int:
        return len(self.names)

    def index(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.names)}

    def to_json(self) -> dict:
        return {"kind": self.kind, "names": list(self.names)}


def load_schema(source) -> FeatureSchema:
    """Load a schema from a JSON file, or a bundled default by kind name."""
    if isinstance(source, FeatureSchema):
        return source
    if str(source) in KINDS and not Path(str(source)).exists():
        text = resources.files("spotcheck.schemas").joinpath(f"{source}.json").read_text()
    else:
        text = Path(source).read_text()
    try:
        doc = json.loads(text)
        return FeatureSchema(doc["kind"], doc["names"])
    except (ValueError, KeyError, TypeError) as exc:
        raise InputError(f"bad schema file {source}: {exc}") from None


def synthetic_schema(dim: int) -> FeatureSchema:
    return FeatureSchema(SYSCALL, tuple(f"f{i:03d}" for i in range(dim)))


@dataclass
class RawHistogram:
    app_id: str
    label: str = UNKNOWN
    counts: dict[str, int] = field(default_factory=dict)
    # features seen in the raw input but absent from the schema
    unknown: Counter = field(default_factory=Counter)

    def __post_init__(self):
        if any(c < 0 for c in self.counts.values()):
            raise InputError(f"{self.app_id}: negative count")

    def merged(self, other: "RawHistogram") -> "RawHistogram":
        counts = Counter(self.counts)
        counts.update(other.counts)
        return RawHistogram(self.app_id, self.label, dict(counts), self.unknown + other.unknown)


@dataclass
class FeatureVector:
    app_id: str
    label: str
    values: np.ndarray


@dataclass
class Dataset:
    schema: FeatureSchema
    rows: list[FeatureVector]
    split_tags: list[str]

    def __post_init__(self):
        if len(self.rows) != len(self.split_tags):
            raise InputError("rows and split tags differ in length")
        for row, tag in zip(self.rows, self.split_tags):
            if len(row.values) != self.schema.dim:
                raise InputError(f"{row.app_id}: vector length {len(row.values)} != {self.schema.dim}")
            if tag in (TRAIN, VAL) and row.label != BENIGN:
                raise InputError(f"{row.app_id}: only benign rows may be in train/val")

    def select(self, *tags: str) -> list[FeatureVector]:
        return [r for r, t in zip(self.rows, self.split_tags) if t in tags]

    def matrix(self, *tags: str) -> np.ndarray:
        rows = self.select(*tags) if tags else self.rows
        if not rows:
            return np.zeros((0, self.schema.dim))
        return np.vstack([r.values for r in rows])

    def __len__(self):
        return len(self.rows)


def parse_trace_log(stream: Iterable[str], schema: FeatureSchema, label: str = UNKNOWN) -> list[RawHistogram]:
    """Count syscalls per app from JSON-lines records ``{"app", "pid", "syscall"}``.

    Counts from every pid of an app are pooled. Histograms come back sorted by
    app id so the result depends only on the multiset of events.
    """
    if schema.kind != SYSCALL:
        raise InputError("trace logs need a syscall schema")
    known = set(schema.names)
    counts: dict[str, Counter] = {}
    unknown: dict[str, Counter] = {}
    for lineno, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            app, pid, name = rec["app"], rec["pid"], rec["syscall"]
        except (ValueError, KeyError, TypeError) as exc:
            raise ParseError(f"malformed trace record ({exc})", line=lineno) from None
        if not isinstance(app, str) or not isinstance(name, str) or isinstance(pid, bool) or not isinstance(pid, int):
            raise ParseError("trace record has wrong field types", line=lineno)
        counts.setdefault(app, Counter())
        unknown.setdefault(app, Counter())
        if name in known:
            counts[app][name] += 1
        else:
            unknown[app][name] += 1
    return [RawHistogram(app, label, dict(counts[app]), unknown[app]) for app in sorted(counts)]


def l1_scale(h: RawHistogram, schema: FeatureSchema) -> FeatureVector:
    raw = np.array([h.counts.get(name, 0) for name in schema.names], dtype=np.float64)
    total = raw.sum()
    if total <= 0:
        raise DegenerateInputError(f"{h.app_id}: histogram has no counts over the schema")
    return FeatureVector(h.app_id, h.label, raw / total)


def split_dataset(rows: Sequence[FeatureVector], schema: FeatureSchema, ratios=(0.70, 0.15, 0.15), seed: int = 0) -> Dataset:
    """Benign rows -> shuffled train/val/test; every non-benign row -> test.

    Val and test sizes are floored; the remainder goes to train.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise InputError(f"split ratios must be three non-negative values summing to 1, got {ratios}")
    benign = [i for i, r in enumerate(rows) if r.label == BENIGN]
    if len(benign) < 10:
        raise InputError(f"need at least 10 benign rows to split, got {len(benign)}")
    n = len(benign)
    n_val = math.floor(ratios[1] * n + 1e-9)
    n_test = math.floor(ratios[2] * n + 1e-9)
    n_train = n - n_val - n_test
    Prng(seed).shuffle(benign)
    tags = [TEST] * len(rows)
    for k, i in enumerate(benign):
        tags[i] = TRAIN if k < n_train else VAL if k < n_train + n_val else TEST
    return Dataset(schema, list(rows), tags)


def gen_synth(schema_dim: int, n_benign: int, n_anom: int, delta: float, seed: int, ratios=(0.70, 0.15, 0.15)) -> Dataset:
    """Dirichlet-sampled benign/anomalous rows on the L1 simplex.

    Benign concentration is 10 on the first ceil(dim/8) features and 0.5
    elsewhere; the anomalous concentration is that vector rolled by
    floor(delta*dim/2) positions.
    """
    if schema_dim < 4:
        raise InputError("synthetic data needs at least 4 features")
    if not 0.0 <= delta <= 1.0:
        raise InputError("separation must lie in [0, 1]")
    schema = synthetic_schema(schema_dim)
    conc_b = np.full(schema_dim, 0.5)
    conc_b[: math.ceil(schema_dim / 8)] = 10.0
    conc_a = np.roll(conc_b, math.floor(delta * schema_dim / 2))
    prng = Prng(seed).spawn(0x5EED)

    def draw(conc):
        g = np.array([prng.gamma(c) for c in conc])
        return g / g.sum()

    rows = [FeatureVector(f"benign-{i:05d}", BENIGN, draw(conc_b)) for i in range(n_benign)]
    rows += [FeatureVector(f"anom-{i:05d}", MALICIOUS, draw(conc_a)) for i in range(n_anom)]
    return split_dataset(rows, schema, ratios, seed)


def histograms_to_dataset(hists: Sequence[RawHistogram], schema: FeatureSchema) -> Dataset:
    rows = [l1_scale(h, schema) for h in hists]
    return Dataset(schema, rows, [UNSPLIT] * len(rows))


def write_dataset_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["app_id", "label", "split", *dataset.schema.names])
        for row, tag in zip(dataset.rows, dataset.split_tags):
            w.writerow([row.app_id, row.label, tag, *(f"{v:.17g}" for v in row.values)])


def read_dataset_csv(path, schema: FeatureSchema | None = None) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty dataset file") from None
        if header[:3] != ["app_id", "label", "split"]:
            raise InputError(f"{path}: header must start with app_id,label,split")
        names = tuple(header[3:])
        if schema is None:
            schema = FeatureSchema(SYSCALL, names)
        elif schema.names != names:
            raise InputError(f"{path}: feature columns do not match the schema ({len(names)} vs {schema.dim})")
        rows, tags = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise ParseError(f"{path}: expected {len(header)} fields, got {len(rec)}", line=lineno)
            app, label, tag = rec[:3]
            if label not in LABELS or tag not in SPLITS:
                raise ParseError(f"{path}: bad label/split {label!r}/{tag!r}", line=lineno)
            try:
                values = np.array([float(v) for v in rec[3:]])
            except ValueError as exc:
                raise ParseError(f"{path}: {exc}", line=lineno) from None
            rows.append(FeatureVector(app, label, values))
            tags.append(tag)
    return Dataset(schema, rows, tags)
