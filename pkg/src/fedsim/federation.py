"""Synchronous federated averaging over simulated clients.

Each round every client starts from the global weights, trains locally for a
fixed number of epochs on its own data, and sends its parameters back; the
server replaces the global model with their element-wise mean, evaluates it
on a held-out validation set, and applies patience-based early stopping.

Time is simulated. A batch of ``b`` rows costs ``b * per_sample_cost``
seconds, a checkpoint write costs ``t_w`` and a recovery ``t_r``. Clients
must deliver by a per-round deadline of ``round_deadline_factor`` times their
nominal training time; a client still busy at the deadline (typically one that
lost work to a failure) is left out of that round's aggregate.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import metrics, nn
from .checkpoint import CheckpointStore, write_checkpoint
from .errors import ArgumentError, ClientAbandoned, ProtocolError, ShapeError, TrainingAborted
from .faults import (
    CHECKPOINTED,
    FAILED,
    CostModelConfig,
    FaultContext,
    ResumePoint,
    WeibullModel,
    make_checkpoint,
    maybe_fail_and_checkpoint,
    optimal_interval,
    recover_client,
)
from .rng import from_stream_id, hash64, pack_state, stream, unpack_state

log = logging.getLogger(__name__)

MODES = ("proposed", "fedavg_baseline")
IMPROVEMENT_TOL = 1e-9


@dataclass(frozen=True)
class FederationConfig:
    n_clients: int = 6
    num_epochs: int = 1
    max_rounds: int = 300
    patience: int = 10
    mode: str = "proposed"
    batch_size: int = 32
    per_sample_cost: float = 1e-3
    round_deadline_factor: float | None = None
    max_recoveries: int = 10

    def __post_init__(self):
        if self.mode not in MODES:
            raise ArgumentError(f"mode must be one of {MODES}")
        if self.n_clients < 1 or self.num_epochs < 1 or self.max_rounds < 1 or self.patience < 1:
            raise ArgumentError("n_clients, num_epochs, max_rounds and patience must be >= 1")
        if self.round_deadline_factor is not None and not self.round_deadline_factor >= 1.0:
            raise ArgumentError("round_deadline_factor must be >= 1")

    @property
    def checkpointing(self):
        return self.mode == "proposed"

    @property
    def early_stopping(self):
        return self.mode == "proposed"


@dataclass(frozen=True)
class FaultConfig:
    """Failure environment shared by both modes.

    ``checkpoint_interval=None`` asks :func:`optimal_interval` for t_c*;
    ``cost_T=None`` uses the mean nominal per-round training time of a client.
    When only dropout failures are configured, the cost model sees an
    exponential failure law with the same per-round failure rate.
    """

    weibull: WeibullModel | None = None
    dropout_rate: float = 0.0
    t_r: float = 0.05
    t_w: float = 0.002
    cost_mode: str = "amortized"
    cost_T: float | None = None
    checkpoint_interval: float | None = None
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise ArgumentError("dropout_rate must lie in [0, 1]")
        if self.t_r < 0 or self.t_w < 0:
            raise ArgumentError("t_r and t_w must be non-negative")

    @property
    def active(self):
        return self.weibull is not None or self.dropout_rate > 0


@dataclass
class ClientState:
    id: int
    data: object
    params: nn.ModelParameters
    adam: nn.AdamState
    fault: FaultContext
    status: str = "active"
    rng_stream_id: int = 0
    sim_time_per_batch: float = 0.0
    resume: ResumePoint | None = None
    round_start_rng: bytes = b""
    recovery_source: str | None = None


@dataclass
class ClientRoundStats:
    client_id: int
    sim_train_time: float = 0.0
    failures: int = 0
    recoveries: int = 0
    checkpoints: int = 0
    recovery_sources: list[str] = field(default_factory=list)
    deadline_hit: bool = False
    abandoned: bool = False

    def to_dict(self):
        return {
            "client_id": self.client_id,
            "sim_train_time": self.sim_train_time,
            "failures": self.failures,
            "recoveries": self.recoveries,
            "checkpoints": self.checkpoints,
            "recovery_sources": list(self.recovery_sources),
            "deadline_hit": self.deadline_hit,
            "abandoned": self.abandoned,
        }


@dataclass
class ClientUpdate:
    params: nn.ModelParameters | None
    stats: ClientRoundStats

    @property
    def delivered(self):
        return self.params is not None


@dataclass(frozen=True)
class Performance:
    accuracy: float
    auc_roc: float
    loss: float


@dataclass
class RoundReport:
    round: int
    clients: list[ClientRoundStats]
    performance: Performance
    sim_duration: float
    wall_duration: float

    def to_dict(self, wall=False):
        out = {
            "round": self.round,
            "accuracy": self.performance.accuracy,
            "auc_roc": self.performance.auc_roc,
            "loss": self.performance.loss,
            "sim_duration": self.sim_duration,
            "clients": [c.to_dict() for c in self.clients],
        }
        if wall:
            out["wall_duration"] = self.wall_duration
        return out


@dataclass
class GlobalServer:
    global_params: nn.ModelParameters
    validation: object
    patience: int
    max_rounds: int
    round: int = 0
    best_performance: float = -math.inf
    patience_counter: int = 0


@dataclass
class FederatedResult:
    params: nn.ModelParameters
    reports: list[RoundReport]
    checkpoint_interval: float | None
    failure_log: list[tuple[int, float]]

    def inter_arrival_times(self):
        """Gaps between consecutive failures of each client, pooled over clients."""
        gaps, last = [], {}
        for cid, t in self.failure_log:
            gaps.append(t - last.get(cid, 0.0))
            last[cid] = t
        return gaps

    @property
    def final(self):
        return self.reports[-1].performance


class _ClientFailure(Exception):
    pass


class _DeadlineReached(Exception):
    pass


def aggregate_flat(vectors):
    """Element-wise mean of equally long vectors, accumulated in list order.

    Computed as ``v0 + sum(v_i - v0) / n`` so identical inputs come back
    bit-exactly.
    """
    if len(vectors) == 0:
        raise ProtocolError("cannot aggregate an empty list of updates")
    base = np.asarray(vectors[0], dtype=np.float64)
    acc = np.zeros_like(base)
    for v in vectors[1:]:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != base.shape:
            raise ShapeError("updates have different lengths")
        acc += v - base
    return base + acc / len(vectors)


def aggregate(updates):
    """Mean of client models; batch-norm running statistics are averaged too."""
    if len(updates) == 0:
        raise ProtocolError("cannot aggregate an empty list of updates")
    template = updates[0]
    for u in updates[1:]:
        if not template.same_shape(u):
            raise ShapeError("client models have different shapes")
    return nn.unflatten(template, aggregate_flat([nn.flatten(u) for u in updates]))


def evaluate_global(w_g, validation):
    preds = nn.predict(w_g, validation.X)
    try:
        auc = metrics.auc_roc(preds, validation.y)
    except metrics.UndefinedMetricError:
        auc = math.nan
    return Performance(
        metrics.accuracy(preds, validation.y),
        auc,
        nn.bce_loss(preds, validation.y),
    )


def early_stop_check(server, performance):
    """Record one round's score; return ``"stop"`` or ``"continue"``."""
    server.round += 1
    if performance > server.best_performance + IMPROVEMENT_TOL:
        server.best_performance = performance
        server.patience_counter = 0
    else:
        server.patience_counter += 1
    if server.patience_counter >= server.patience or server.round >= server.max_rounds:
        return "stop"
    return "continue"


def local_update(
    client,
    w_g,
    num_epochs,
    fault_ctx,
    *,
    model_config,
    round_idx,
    batch_size=32,
    per_sample_cost=1e-3,
):
    """Train one client for a round, handling failures and checkpoints.

    The returned update carries ``params=None`` when the client missed the
    round deadline. Raises :class:`ClientAbandoned` when recovery keeps failing.
    """
    if num_epochs < 1:
        raise ArgumentError("num_epochs must be >= 1")
    ctx = fault_ctx
    stats = ClientRoundStats(client.id)
    start_clock = ctx.clock
    client.params = w_g.copy()
    client.status = "active"
    client.round_start_rng = pack_state(from_stream_id(client.rng_stream_id))
    client.resume = ResumePoint(0, 0, client.round_start_rng)

    def hook(event):
        action = maybe_fail_and_checkpoint(ctx, client, ctx.clock + event.batch_time)
        if action == FAILED:
            raise _ClientFailure()
        if action == CHECKPOINTED:
            write_checkpoint(make_checkpoint(client.id, round_idx, event, ctx.clock), ctx.store)
            ctx.charge(ctx.t_w)
            stats.checkpoints += 1
        if ctx.clock >= ctx.deadline and not event.last:
            raise _DeadlineReached()

    while True:
        rng = unpack_state(client.resume.rng_state)
        try:
            client.params, client.adam = nn.train_epochs(
                client.params, client.data, num_epochs, batch_size, client.adam, rng, hook,
                config=model_config,
                per_sample_cost=per_sample_cost,
                start_epoch=client.resume.epoch,
                start_batch=client.resume.batch,
            )
            break
        except _ClientFailure:
            client.status = "failed"
            stats.failures += 1
            recover_client(client, ctx.store, w_g, ctx)
            stats.recoveries += 1
            stats.recovery_sources.append(client.recovery_source)
            if ctx.clock >= ctx.deadline:
                stats.deadline_hit = True
                break
        except _DeadlineReached:
            stats.deadline_hit = True
            break
    stats.sim_train_time = ctx.clock - start_clock
    return ClientUpdate(None if stats.deadline_hit else client.params, stats)


def _nominal_time(n_samples, fed):
    return fed.num_epochs * n_samples * fed.per_sample_cost


def resolve_checkpoint_interval(client_data, fed, fault):
    """t_c* for this run, or ``None`` when no checkpoints should be written."""
    if not fed.checkpointing or not fault.active:
        return None
    if fault.checkpoint_interval is not None:
        return fault.checkpoint_interval
    nominal = float(np.mean([_nominal_time(len(d), fed) for d in client_data]))
    if fault.weibull is not None:
        model = fault.weibull
    else:
        model = WeibullModel(nominal / fault.dropout_rate, 1.0)
    T = fault.cost_T if fault.cost_T is not None else nominal
    cfg = CostModelConfig(T=T, t_r=fault.t_r, t_w=fault.t_w if fault.t_w > 0 else None,
                          mode=fault.cost_mode)
    return optimal_interval(cfg, model).t_star


def run_federated_training(
    client_data,
    validation,
    model_config,
    fed=None,
    fault=None,
    seed=0,
    on_round=None,
):
    """Run rounds until early stopping or ``fed.max_rounds``.

    Bit-reproducible for a fixed ``seed``: the global initialization, every
    client's per-round training stream and fault stream are derived from it
    independently of execution order.
    """
    fed = fed or FederationConfig(n_clients=len(client_data))
    fault = fault or FaultConfig()
    if len(client_data) < 1:
        raise ArgumentError("need at least one client")
    w_g = nn.init_model(model_config, hash64(seed, "init"))
    patience = fed.patience if fed.early_stopping else fed.max_rounds
    server = GlobalServer(w_g, validation, patience, fed.max_rounds)
    interval = resolve_checkpoint_interval(client_data, fed, fault)
    store = None
    if interval is not None:
        store = CheckpointStore(fault.checkpoint_dir)
        store.clear()
    clients = []
    for cid, data in enumerate(client_data):
        ctx = FaultContext(
            weibull=fault.weibull,
            dropout_rate=fault.dropout_rate,
            checkpoint_interval=interval,
            store=store,
            t_r=fault.t_r,
            t_w=fault.t_w,
            max_recoveries=fed.max_recoveries,
            weibull_rng=stream(seed, cid, "weibull") if fault.weibull is not None else None,
        )
        clients.append(
            ClientState(cid, data, w_g, nn.AdamState.fresh(w_g), ctx,
                        sim_time_per_batch=fed.batch_size * fed.per_sample_cost)
        )
    reports = []
    clock = 0.0
    for r in range(fed.max_rounds):
        wall0 = time.perf_counter()
        updates, stats = [], []
        for c in clients:
            nominal = _nominal_time(len(c.data), fed)
            deadline = math.inf
            if fed.round_deadline_factor is not None:
                deadline = clock + fed.round_deadline_factor * nominal
            c.fault.begin_round(r, clock, nominal, stream(seed, c.id, r, "fault"), deadline)
            c.rng_stream_id = hash64(seed, c.id, r)
            try:
                upd = local_update(
                    c, server.global_params, fed.num_epochs, c.fault,
                    model_config=model_config,
                    round_idx=r,
                    batch_size=fed.batch_size,
                    per_sample_cost=fed.per_sample_cost,
                )
            except ClientAbandoned as exc:
                log.warning("round %d: %s", r, exc)
                s = ClientRoundStats(c.id, sim_train_time=c.fault.clock - clock, abandoned=True,
                                     failures=exc.recoveries + 1, recoveries=exc.recoveries)
                stats.append(s)
                continue
            stats.append(upd.stats)
            if upd.delivered:
                updates.append(upd.params)
        if all(s.abandoned for s in stats):
            raise TrainingAborted(f"round {r}: every client was abandoned")
        if updates:
            server.global_params = aggregate(updates)
        perf = evaluate_global(server.global_params, validation)
        round_end = max(c.fault.clock for c in clients)
        decision = early_stop_check(server, perf.accuracy)
        report = RoundReport(r, stats, perf, round_end - clock, time.perf_counter() - wall0)
        reports.append(report)
        if on_round is not None:
            on_round(report)
        clock = round_end
        if decision == "stop":
            break
    failures = [(c.id, t) for c in clients for t in c.fault.failure_log]
    return FederatedResult(server.global_params, reports, interval, failures)
