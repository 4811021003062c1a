"""Experiment configuration, scenario orchestration and result files.

A scenario expands into a list of (sweep point, repeat) runs. The data setup
(synthetic draw or CSV split, plus the client partition) depends only on the
master seed and the client count, so every repeat of a sweep point trains on
the same clients. Repeat ``i`` uses run seed ``hash64(master, i)`` for model
initialization, local shuffling and failures, independently of the sweep
point, which makes points comparable seed by seed.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import tempfile
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__, data, metrics, nn
from .errors import ConfigurationError, FedsimError
from .faults import WeibullModel
from .federation import FaultConfig, FederationConfig, run_federated_training
from .rng import hash64

log = logging.getLogger(__name__)

SCENARIOS = ("train", "scalability_sweep", "dropout_sweep", "compare")
DEFAULT_CLIENT_SWEEP = (2, 4, 6, 8, 16, 32, 64)
DEFAULT_DROPOUT_SWEEP = (0.0, 0.1, 0.2, 0.3, 0.5)
DEFAULT_REPEATS = {"compare": 20}
OUT_ENV = "FEDSIM_OUT"


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic"
    m: int = 3000
    d: int = 10
    anomaly_fraction: float = 0.4
    separation: float = 6.0
    path: str | None = None
    test_path: str | None = None
    schema: str = "unsw_nb15"
    validation_fraction: float = 0.1
    partition: str = "iid"
    skew_alpha: float = 0.5


@dataclass(frozen=True)
class ModelSpec:
    preset: str | None = "desk"
    hidden_widths: tuple[int, ...] | None = None
    dropout_rates: tuple[float, ...] | None = None
    use_batchnorm: bool = True
    learning_rate: float = 1e-3

    def build(self, input_dim):
        widths = self.hidden_widths or nn.PRESETS[self.preset]
        return nn.ModelConfig(
            input_dim,
            hidden_widths=widths,
            dropout_rates=self.dropout_rates,
            use_batchnorm=self.use_batchnorm,
            learning_rate=self.learning_rate,
        )


@dataclass(frozen=True)
class FederationSpec:
    n_clients: int = 6
    n_clients_sweep: tuple[int, ...] = DEFAULT_CLIENT_SWEEP
    num_epochs: int = 1
    max_rounds: int = 300
    patience: int = 10
    mode: str = "proposed"
    batch_size: int = 32
    per_sample_cost: float = 1e-3
    round_deadline_factor: float | None = None
    max_recoveries: int = 10

    def build(self, n_clients, mode):
        return FederationConfig(
            n_clients=n_clients,
            num_epochs=self.num_epochs,
            max_rounds=self.max_rounds,
            patience=self.patience,
            mode=mode,
            batch_size=self.batch_size,
            per_sample_cost=self.per_sample_cost,
            round_deadline_factor=self.round_deadline_factor,
            max_recoveries=self.max_recoveries,
        )


@dataclass(frozen=True)
class FaultSpec:
    weibull: tuple[float, float] | None = None
    dropout_rate: float = 0.0
    dropout_rates: tuple[float, ...] = DEFAULT_DROPOUT_SWEEP
    t_r: float = 0.05
    t_w: float = 0.002
    cost_mode: str = "amortized"
    cost_T: float | None = None
    checkpoint_interval: float | None = None
    checkpoint_dir: str | None = None

    def build(self, dropout_rate):
        return FaultConfig(
            weibull=WeibullModel(*self.weibull) if self.weibull else None,
            dropout_rate=dropout_rate,
            t_r=self.t_r,
            t_w=self.t_w,
            cost_mode=self.cost_mode,
            cost_T=self.cost_T,
            checkpoint_interval=self.checkpoint_interval,
            checkpoint_dir=self.checkpoint_dir,
        )


@dataclass(frozen=True)
class CompareSpec:
    a: str = "proposed"
    b: str = "fedavg_baseline"
    metric: str = "auc_roc"


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str
    dataset: DatasetSpec = DatasetSpec()
    model: ModelSpec = ModelSpec()
    federation: FederationSpec = FederationSpec()
    fault: FaultSpec = FaultSpec()
    compare: CompareSpec = CompareSpec()
    master_seed: int = 42
    repeats: int = 1
    output_dir: str = "results"

    def to_json(self):
        d = {
            "scenario": self.scenario,
            "dataset": dataclasses.asdict(self.dataset),
            "model": dataclasses.asdict(self.model),
            "federation": dataclasses.asdict(self.federation),
            "fault": dataclasses.asdict(self.fault),
            "compare": dataclasses.asdict(self.compare),
            "seeds": {"master": self.master_seed, "repeats": self.repeats},
            "output": {"dir": self.output_dir},
        }
        w = self.fault.weibull
        d["fault"]["weibull"] = None if w is None else {"lambda": w[0], "k": w[1]}
        return json.loads(json.dumps(d))

    def digest(self):
        """SHA-256 of the canonical config; the output directory is not part of it."""
        d = self.to_json()
        del d["output"]
        canon = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def with_seed(self, master_seed):
        return dataclasses.replace(self, master_seed=int(master_seed))

    def with_output(self, output_dir):
        return dataclasses.replace(self, output_dir=str(output_dir))


def _schema():
    text = resources.files("fedsim.schemas").joinpath("experiment_config.schema.json").read_text()
    return json.loads(text)


def _error_key(err):
    path = [str(p) for p in err.absolute_path]
    if err.validator == "additionalProperties":
        allowed = set(err.schema.get("properties", {}))
        extra = sorted(set(err.instance) - allowed)
        path.append(extra[0] if extra else "?")
    return ".".join(path) or "<root>"


def _tuple(v):
    return None if v is None else tuple(v)


def config_from_dict(raw):
    """Validate a parsed JSON object and fill in defaults."""
    if not isinstance(raw, dict):
        raise ConfigurationError("configuration must be a JSON object", "<root>")
    validator = jsonschema.Draft202012Validator(_schema())
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        raise ConfigurationError(err.message, _error_key(err))

    scenario = raw["scenario"]
    dataset = DatasetSpec(**raw.get("dataset", {}))
    if dataset.kind == "csv" and not dataset.path:
        raise ConfigurationError("a csv dataset needs a path", "dataset.path")

    model_raw = raw.get("model", "desk")
    if isinstance(model_raw, str):
        model_raw = {"preset": model_raw}
    model = ModelSpec(**{
        **model_raw,
        "hidden_widths": _tuple(model_raw.get("hidden_widths")),
        "dropout_rates": _tuple(model_raw.get("dropout_rates")),
    })
    if model.hidden_widths is None and model.preset not in nn.PRESETS:
        raise ConfigurationError(
            f"unknown preset {model.preset!r}; choose from {sorted(nn.PRESETS)}", "model.preset"
        )

    fed_raw = dict(raw.get("federation", {}))
    if "n_clients_sweep" in fed_raw:
        fed_raw["n_clients_sweep"] = tuple(fed_raw["n_clients_sweep"])
    federation = FederationSpec(**fed_raw)

    fault_raw = dict(raw.get("fault", {}))
    w = fault_raw.pop("weibull", None)
    if "dropout_rates" in fault_raw:
        fault_raw["dropout_rates"] = tuple(float(r) for r in fault_raw["dropout_rates"])
    fault = FaultSpec(weibull=None if w is None else (float(w["lambda"]), float(w["k"])), **fault_raw)
    if fault.cost_mode == "amortized" and fault.t_w == 0 and fault.checkpoint_interval is None:
        raise ConfigurationError("amortized cost needs t_w > 0 or a fixed checkpoint_interval",
                                 "fault.t_w")

    seeds = raw.get("seeds", {})
    repeats = seeds.get("repeats")
    if repeats is None:
        repeats = DEFAULT_REPEATS.get(scenario, 1)
    return ExperimentConfig(
        scenario=scenario,
        dataset=dataset,
        model=model,
        federation=federation,
        fault=fault,
        compare=CompareSpec(**raw.get("compare", {})),
        master_seed=int(seeds.get("master", 42)),
        repeats=int(repeats),
        output_dir=raw.get("output", {}).get("dir", "results"),
    )


def parse_config(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file {str(path)!r} does not exist", "<path>")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"invalid JSON: {exc}", "<root>") from None
    return config_from_dict(raw)


# -- data setup ---------------------------------------------------------------

def _take(records, idx):
    cols = {k: v[idx] for k, v in records.columns.items()}
    return data.RecordTable(cols, records.schema)


def _load_schema(name):
    if Path(name).suffix == ".json" and Path(name).is_file():
        return data.FeatureSchema.from_json(json.loads(Path(name).read_text()))
    return data.bundled_schema(name)


def prepare_data(spec, master_seed):
    """(train, validation) datasets for a dataset spec."""
    if spec.kind == "synthetic":
        full = data.generate_synthetic(
            spec.m, spec.d, spec.anomaly_fraction, spec.separation,
            seed=hash64(master_seed, "data"),
        )
        return data.train_test_split(full, spec.validation_fraction, seed=hash64(master_seed, "split"))
    schema = _load_schema(spec.schema)
    records = data.load_csv(spec.path, schema)
    if records.malformed:
        log.warning("%s: skipped %d malformed rows", spec.path, len(records.malformed))
    if spec.test_path:
        train_rec, val_rec = records, data.load_csv(spec.test_path, schema)
    else:
        # split row numbers so preprocessing is fitted on the training side only
        labels = records.columns[schema.label]
        rows = data.Dataset(np.arange(len(labels), dtype=np.float64)[:, None], labels)
        tr, va = data.train_test_split(rows, spec.validation_fraction,
                                       seed=hash64(master_seed, "split"))
        train_rec = _take(records, tr.X[:, 0].astype(np.intp))
        val_rec = _take(records, va.X[:, 0].astype(np.intp))
    state = data.fit_preprocess(train_rec)
    return data.apply_preprocess(train_rec, state), data.apply_preprocess(val_rec, state)


# -- scenarios ----------------------------------------------------------------

@dataclass
class ScenarioResult:
    config: ExperimentConfig
    records: list[dict] = field(default_factory=list)
    curves: list[dict] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    comparison: metrics.Comparison | None = None
    wall_seconds: float = 0.0
    started_at: str = ""
    partial: bool = False
    error: str | None = None

    @property
    def digest(self):
        return self.config.digest()

    def summary(self):
        """Mean and sample standard deviation per sweep point."""
        groups = {}
        for rec in self.records:
            groups.setdefault(point_label(rec["point"]), []).append(rec)
        rows = []
        for label, recs in groups.items():
            row = {"point": label, "runs": len(recs)}
            for key in ("final_accuracy", "final_auc", "rounds", "sim_time", "failures"):
                vals = np.array([np.nan if r[key] is None else r[key] for r in recs], dtype=float)
                row[f"{key}_mean"] = float(np.mean(vals))
                row[f"{key}_std"] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
            rows.append(row)
        return rows


class ScenarioInterrupted(FedsimError):
    """A scenario stopped early; ``partial`` holds the runs that finished."""

    def __init__(self, message, partial):
        super().__init__(message)
        self.partial = partial


def point_label(point):
    return ";".join(f"{k}={v}" for k, v in point.items())


def _plan(config):
    """Ordered (point, n_clients, dropout_rate, mode) tuples for a scenario."""
    fed, fault = config.federation, config.fault
    if config.scenario == "train":
        return [({"mode": fed.mode}, fed.n_clients, fault.dropout_rate, fed.mode)]
    if config.scenario == "scalability_sweep":
        return [({"n_clients": n}, n, fault.dropout_rate, fed.mode) for n in fed.n_clients_sweep]
    if config.scenario == "dropout_sweep":
        return [({"dropout_rate": r}, fed.n_clients, r, fed.mode) for r in fault.dropout_rates]
    cmp = config.compare
    return [
        ({"arm": "a", "mode": cmp.a}, fed.n_clients, fault.dropout_rate, cmp.a),
        ({"arm": "b", "mode": cmp.b}, fed.n_clients, fault.dropout_rate, cmp.b),
    ]


def run_seed(master_seed, repeat):
    return hash64(master_seed, repeat)


def _finite_or_none(x):
    return None if x is None or not math.isfinite(x) else float(x)


def run_one(config, train, validation, n_clients, dropout_rate, mode, seed):
    """One federated run; returns (record, curve rows, failure rows) without the point."""
    plan = data.PartitionPlan(
        n_clients, config.dataset.partition, config.dataset.skew_alpha,
        seed=hash64(config.master_seed, "partition", n_clients),
    )
    clients = data.partition(train, plan)
    result = run_federated_training(
        clients, validation,
        config.model.build(train.n_features),
        config.federation.build(n_clients, mode),
        config.fault.build(dropout_rate),
        seed=seed,
    )
    reports = result.reports
    client_stats = [c for rep in reports for c in rep.clients]
    perf = result.final
    record = {
        "seed": seed,
        "mode": mode,
        "n_clients": n_clients,
        "dropout_rate": dropout_rate,
        "final_accuracy": perf.accuracy,
        "final_auc": _finite_or_none(perf.auc_roc),
        "final_loss": perf.loss,
        "best_accuracy": max(r.performance.accuracy for r in reports),
        "rounds": len(reports),
        "sim_time": float(sum(r.sim_duration for r in reports)),
        "failures": sum(c.failures for c in client_stats),
        "recoveries": sum(c.recoveries for c in client_stats),
        "checkpoints": sum(c.checkpoints for c in client_stats),
        "checkpoint_recoveries": sum(c.recovery_sources.count("checkpoint") for c in client_stats),
        "deadline_misses": sum(c.deadline_hit for c in client_stats),
        "abandoned": sum(c.abandoned for c in client_stats),
        "checkpoint_interval": result.checkpoint_interval,
    }
    curves = [
        {"round": r.round, "loss": r.performance.loss, "accuracy": r.performance.accuracy,
         "method": mode, "seed": seed}
        for r in reports
    ]
    last, failures = {}, []
    for cid, t in result.failure_log:
        failures.append({"seed": seed, "client_id": cid, "sim_time": t,
                         "inter_arrival": t - last.get(cid, 0.0)})
        last[cid] = t
    return record, curves, failures


def _sort_key(rec, order):
    return (order[point_label(rec["point"])], rec["seed"])


def run_scenario(config, progress=None):
    """Run every (sweep point, repeat) of ``config``.

    On failure the runs that completed are attached to the raised
    :class:`ScenarioInterrupted` so the caller can still write them out.
    """
    if config.scenario not in SCENARIOS:
        raise ConfigurationError(f"unknown scenario {config.scenario!r}", "scenario")
    started = datetime.now(timezone.utc).isoformat(timespec="seconds")
    wall0 = time.perf_counter()
    result = ScenarioResult(config, started_at=started)
    plan = _plan(config)
    order = {point_label(p[0]): i for i, p in enumerate(plan)}
    splits = prepare_data(config.dataset, config.master_seed)
    try:
        for point, n_clients, rate, mode in plan:
            for rep in range(config.repeats):
                seed = run_seed(config.master_seed, rep)
                record, curves, failures = run_one(config, *splits, n_clients, rate, mode, seed)
                label = point_label(point)
                result.records.append({"point": point, "repeat": rep, **record})
                result.curves.extend({**c, "point": label} for c in curves)
                result.failures.extend({"point": label, **f} for f in failures)
                if progress is not None:
                    progress(point, rep, record)
    except Exception as exc:
        result.partial = True
        result.error = f"{type(exc).__name__}: {exc}"
        _finish(result, order, wall0)
        raise ScenarioInterrupted(result.error, result) from exc
    _finish(result, order, wall0)
    if config.scenario == "compare":
        key = "final_auc" if config.compare.metric == "auc_roc" else "final_accuracy"
        arm = {"a": [], "b": []}
        for rec in result.records:
            arm[rec["point"]["arm"]].append(rec[key])
        result.comparison = metrics.compare_methods(arm["a"], arm["b"])
    return result


def _finish(result, order, wall0):
    result.records.sort(key=lambda r: _sort_key(r, order))
    result.curves.sort(key=lambda c: (order[c["point"]], c["seed"], c["round"]))
    result.failures.sort(key=lambda f: (order[f["point"]], f["seed"]))
    result.wall_seconds = time.perf_counter() - wall0


# -- persistence --------------------------------------------------------------

def _atomic_write(path, text):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _csv_text(rows, columns):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def output_dir(config, override=None):
    """``override`` (a CLI flag) beats ``$FEDSIM_OUT``, which beats the config."""
    return Path(override or os.environ.get(OUT_ENV) or config.output_dir)


def emit_results(result, directory):
    """Write the result files into ``directory`` and return their paths.

    ``runs.jsonl`` is byte-stable for a given config; wall-clock figures
    only appear in ``manifest.json``.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {
        "runs.jsonl": "".join(json.dumps(r, sort_keys=True) + "\n" for r in result.records),
        "summary.csv": _csv_text(result.summary(), _SUMMARY_COLUMNS),
        "curves.csv": _csv_text(result.curves, ["round", "loss", "accuracy", "method", "seed", "point"]),
        "failures.csv": _csv_text(result.failures,
                                  ["point", "seed", "client_id", "sim_time", "inter_arrival"]),
        "config.json": json.dumps(result.config.to_json(), indent=2, sort_keys=True) + "\n",
    }
    if result.comparison is not None:
        files["compare.json"] = json.dumps(
            {"metric": result.config.compare.metric, **result.comparison.to_dict()},
            indent=2, sort_keys=True,
        ) + "\n"
    written, io_error = [], None
    for name, text in files.items():
        try:
            _atomic_write(directory / name, text)
            written.append(name)
        except OSError as exc:
            io_error = f"could not write {directory / name}: {exc}"
            break
    manifest = {
        "config_digest": result.digest,
        "version": __version__,
        "scenario": result.config.scenario,
        "runs": len(result.records),
        "started_at": result.started_at,
        "wall_clock_seconds": result.wall_seconds,
        "partial": result.partial or io_error is not None,
        "error": io_error or result.error,
        "files": written,
    }
    try:
        _atomic_write(directory / "manifest.json", json.dumps(manifest, indent=2) + "\n")
    except OSError as exc:
        raise OSError(f"could not write {directory / 'manifest.json'}: {exc}") from exc
    if io_error is not None:
        raise OSError(io_error)
    return [directory / n for n in written + ["manifest.json"]]


_SUMMARY_COLUMNS = ["point", "runs"] + [
    f"{k}_{s}"
    for k in ("final_accuracy", "final_auc", "rounds", "sim_time", "failures")
    for s in ("mean", "std")
]
