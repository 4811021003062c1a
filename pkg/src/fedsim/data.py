"""Tabular traffic data: CSV ingestion, preprocessing, synthetic data, partitioning."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ArgumentError, IngestionError, PreprocessStateError

log = logging.getLogger(__name__)

KINDS = ("numeric", "categorical", "ip_address", "label", "drop")
UNKNOWN = "<unknown>"


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    feature_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.y.ndim != 1 or len(self.y) != self.X.shape[0]:
            raise ArgumentError(f"inconsistent dataset shapes X{self.X.shape} y{self.y.shape}")
        if len(self.y) < 1:
            raise ArgumentError("dataset must contain at least one sample")
        if not self.feature_names:
            self.feature_names = [f"x{i}" for i in range(self.X.shape[1])]
        if len(self.feature_names) != self.X.shape[1]:
            raise ArgumentError("feature_names length does not match column count")
        if not np.all(np.isfinite(self.X)):
            raise ArgumentError("dataset contains NaN or infinite entries")
        if np.any((self.y != 0) & (self.y != 1)):
            raise ArgumentError("labels must be 0 or 1")

    def __len__(self):
        return len(self.y)

    @property
    def n_features(self):
        return self.X.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.X[idx], self.y[idx], list(self.feature_names))


# -- schema and ingestion -----------------------------------------------------

@dataclass(frozen=True)
class Column:
    name: str
    kind: str


@dataclass(frozen=True)
class FeatureSchema:
    columns: tuple[Column, ...]

    def __post_init__(self):
        for c in self.columns:
            if c.kind not in KINDS:
                raise ArgumentError(f"column {c.name!r}: unknown kind {c.kind!r}")
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise ArgumentError("duplicate column names in schema")
        if sum(c.kind == "label" for c in self.columns) != 1:
            raise ArgumentError("schema needs exactly one label column")
        if not any(c.kind not in ("label", "drop") for c in self.columns):
            raise ArgumentError("schema needs at least one feature column")

    @property
    def names(self):
        return [c.name for c in self.columns]

    @property
    def label(self):
        return next(c.name for c in self.columns if c.kind == "label")

    def of_kind(self, kind):
        return [c.name for c in self.columns if c.kind == kind]

    @classmethod
    def from_json(cls, obj):
        if isinstance(obj, (str, Path)):
            obj = json.loads(Path(obj).read_text())
        return cls(tuple(Column(str(c["name"]), str(c["kind"])) for c in obj))

    def to_json(self):
        return [{"name": c.name, "kind": c.kind} for c in self.columns]


def bundled_schema(name="unsw_nb15"):
    """Load one of the schema files shipped in ``fedsim/schemas``."""
    text = resources.files("fedsim.schemas").joinpath(f"{name}.json").read_text()
    return FeatureSchema.from_json(json.loads(text))


@dataclass
class RecordTable:
    """Typed columns read from a CSV. Numeric columns are float arrays,
    categorical and IP columns are arrays of str, the label is int."""

    columns: dict[str, np.ndarray]
    schema: FeatureSchema
    malformed: list[tuple[int, str]] = field(default_factory=list)

    def __len__(self):
        return len(self.columns[self.schema.label])


def _parse_label(text, row):
    t = text.strip()
    try:
        v = float(t)
    except ValueError:
        raise IngestionError(f"unparseable label {text!r}", row) from None
    if v not in (0.0, 1.0):
        raise IngestionError(f"label must be 0 or 1, got {text!r}", row)
    return int(v)


def load_csv(path, schema):
    """Read a headed CSV file against ``schema``.

    Rows with an unparseable numeric cell are skipped and listed in
    ``RecordTable.malformed`` as ``(row_number, reason)``; row numbers count
    the header as row 1. A bad label aborts ingestion.
    """
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"no such file: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise IngestionError(f"{path} is empty")
        header = [h.strip() for h in header]
        if sorted(header) != sorted(schema.names):
            missing = sorted(set(schema.names) - set(header))
            extra = sorted(set(header) - set(schema.names))
            raise IngestionError(f"header mismatch: missing {missing}, unexpected {extra}", 1)
        pos = {name: header.index(name) for name in schema.names}
        kinds = {c.name: c.kind for c in schema.columns}
        keep = [c.name for c in schema.columns if c.kind != "drop"]
        values = {name: [] for name in keep}
        malformed = []
        for rownum, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                malformed.append((rownum, f"expected {len(header)} fields, got {len(row)}"))
                continue
            parsed = {}
            bad = None
            for name in keep:
                cell = row[pos[name]]
                kind = kinds[name]
                if kind == "label":
                    parsed[name] = _parse_label(cell, rownum)
                elif kind == "numeric":
                    try:
                        v = float(cell)
                    except ValueError:
                        v = math.nan
                    if not math.isfinite(v):
                        bad = f"column {name!r}: bad numeric value {cell!r}"
                        break
                    parsed[name] = v
                else:
                    parsed[name] = cell.strip()
            if bad is not None:
                malformed.append((rownum, bad))
                continue
            for name in keep:
                values[name].append(parsed[name])
    if not values[schema.label]:
        raise IngestionError(f"{path} contains no valid data rows")
    if malformed:
        log.warning("%s: %d malformed rows skipped", path, len(malformed))
    cols = {}
    for name in keep:
        kind = kinds[name]
        if kind == "numeric":
            cols[name] = np.array(values[name], dtype=np.float64)
        elif kind == "label":
            cols[name] = np.array(values[name], dtype=np.int64)
        else:
            cols[name] = np.array(values[name], dtype=object)
    return RecordTable(cols, schema, malformed)


# -- preprocessing ------------------------------------------------------------

@dataclass
class PreprocessState:
    numeric: dict[str, tuple[float, float]]
    categorical: dict[str, list[str]]
    ip_map: dict[str, int]
    ip_stats: dict[str, tuple[float, float]]
    schema: FeatureSchema
    dropped: list[str] = field(default_factory=list)


def _zscore_stats(values):
    mean = float(np.mean(values))
    std = float(np.std(values))
    return mean, std


def fit_preprocess(records, schema=None):
    """Fit z-score, one-hot and IP-id state on a training split."""
    schema = schema or records.schema
    numeric, dropped = {}, []
    for name in schema.of_kind("numeric"):
        mean, std = _zscore_stats(records.columns[name])
        if std > 0:
            numeric[name] = (mean, std)
        else:
            log.warning("dropping zero-variance column %r", name)
            dropped.append(name)
    categorical = {
        name: sorted(set(records.columns[name].tolist()))
        for name in schema.of_kind("categorical")
    }
    ips = set()
    for name in schema.of_kind("ip_address"):
        ips.update(records.columns[name].tolist())
    ip_map = {ip: i for i, ip in enumerate(sorted(ips))}
    ip_stats = {}
    for name in schema.of_kind("ip_address"):
        ids = np.array([ip_map[v] for v in records.columns[name]], dtype=np.float64)
        mean, std = _zscore_stats(ids)
        if std > 0:
            ip_stats[name] = (mean, std)
        else:
            log.warning("dropping zero-variance column %r", name)
            dropped.append(name)
    return PreprocessState(numeric, categorical, ip_map, ip_stats, schema, dropped)


def apply_preprocess(records, state):
    """Transform a record table with a fitted state. Pure in (records, state)."""
    if records.schema.names != state.schema.names or any(
        a.kind != b.kind for a, b in zip(records.schema.columns, state.schema.columns)
    ):
        raise PreprocessStateError("record schema does not match the fitted state")
    blocks, names = [], []
    unknown_ip = len(state.ip_map)
    for col in state.schema.columns:
        if col.name in state.dropped:
            continue
        data = records.columns.get(col.name)
        if col.kind in ("drop", "label"):
            continue
        if data is None:
            raise PreprocessStateError(f"column {col.name!r} missing from records")
        if col.kind == "numeric":
            mean, std = state.numeric[col.name]
            blocks.append(((data - mean) / std)[:, None])
            names.append(col.name)
        elif col.kind == "categorical":
            cats = state.categorical[col.name]
            lookup = {c: i for i, c in enumerate(cats)}
            onehot = np.zeros((len(data), len(cats) + 1))
            slots = np.array([lookup.get(v, len(cats)) for v in data], dtype=np.intp)
            onehot[np.arange(len(data)), slots] = 1.0
            blocks.append(onehot)
            names.extend([f"{col.name}={c}" for c in cats] + [f"{col.name}={UNKNOWN}"])
        elif col.kind == "ip_address":
            mean, std = state.ip_stats[col.name]
            ids = np.array([state.ip_map.get(v, unknown_ip) for v in data], dtype=np.float64)
            blocks.append(((ids - mean) / std)[:, None])
            names.append(col.name)
    X = np.hstack(blocks) if blocks else np.empty((len(records), 0))
    return Dataset(X, records.columns[state.schema.label], names)


# -- synthetic data -----------------------------------------------------------

def generate_synthetic(m, d, anomaly_fraction=0.4, separation=6.0, seed=0):
    """Two unit-covariance Gaussian classes in R^d.

    Normal traffic sits at the origin; anomalies are centred ``separation``
    away along a random unit direction. Exactly ``round(m * anomaly_fraction)``
    rows are anomalies, clipped so both classes are present.
    """
    if m < 10 or d < 2:
        raise ArgumentError("generate_synthetic needs m >= 10 and d >= 2")
    if not 0.0 < anomaly_fraction < 1.0:
        raise ArgumentError("anomaly_fraction must lie in (0, 1)")
    if not (separation >= 0 and math.isfinite(separation)):
        raise ArgumentError("separation must be a finite non-negative number")
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    n_anom = min(max(int(round(m * anomaly_fraction)), 1), m - 1)
    y = np.zeros(m, dtype=np.int64)
    y[:n_anom] = 1
    y = y[rng.permutation(m)]
    X = rng.standard_normal((m, d)) + np.outer(y, separation * direction)
    return Dataset(X, y)


# -- splitting and partitioning -----------------------------------------------

def train_test_split(data, test_fraction, seed=0):
    """Stratified split; both halves keep the original row order."""
    if not 0.0 < test_fraction < 1.0:
        raise ArgumentError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    test_idx = []
    for cls in (0, 1):
        members = np.flatnonzero(data.y == cls)
        n_test = int(round(len(members) * test_fraction))
        test_idx.append(rng.permutation(members)[:n_test])
    test_idx = np.sort(np.concatenate(test_idx))
    mask = np.ones(len(data), dtype=bool)
    mask[test_idx] = False
    train_idx = np.flatnonzero(mask)
    if len(train_idx) == 0 or len(test_idx) == 0:
        raise ArgumentError("split leaves an empty side; use more data or another fraction")
    return data.subset(train_idx), data.subset(test_idx)


@dataclass(frozen=True)
class PartitionPlan:
    n_clients: int
    strategy: str = "iid"
    skew_alpha: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_clients < 1:
            raise ArgumentError("n_clients must be >= 1")
        if self.strategy not in ("iid", "label_skew"):
            raise ArgumentError(f"unknown partition strategy {self.strategy!r}")
        if not self.skew_alpha > 0:
            raise ArgumentError("skew_alpha must be positive")


def partition_indices(y, plan):
    m, n = len(y), plan.n_clients
    if n > m:
        raise ArgumentError(f"cannot split {m} samples across {n} clients")
    rng = np.random.default_rng(plan.seed)
    buckets = [[] for _ in range(n)]
    classes = [rng.permutation(np.flatnonzero(y == cls)) for cls in (0, 1)]
    if plan.strategy == "iid":
        # one running counter across both classes: sizes differ by at most one
        # and every client sees each class once it has >= n members
        dealt = np.concatenate(classes)
        for k, i in enumerate(dealt):
            buckets[k % n].append(i)
    else:
        for members in classes:
            props = rng.dirichlet(np.full(n, plan.skew_alpha))
            cuts = np.round(np.cumsum(props)[:-1] * len(members)).astype(int)
            for k, part in enumerate(np.split(members, cuts)):
                buckets[k].extend(part.tolist())
        # top up tiny clients from the largest so each can form a 2-row batch
        floor = 2 if m >= 2 * n else 1
        for k in range(n):
            while len(buckets[k]) < floor:
                donor = max(range(n), key=lambda j: len(buckets[j]))
                buckets[k].append(buckets[donor].pop())
    return [np.sort(np.asarray(b, dtype=np.intp)) for b in buckets]


def partition(data, plan):
    return [data.subset(idx) for idx in partition_indices(data.y, plan)]
