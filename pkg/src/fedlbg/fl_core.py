"""The federated loop: tau-step local SGD per worker, weighted server
aggregation, and the shared round engine every algorithm runs on.

Workers transmit accumulated gradients (the plain sum of their tau
minibatch gradients); the server applies
theta <- theta - eta * sum_k omega_k * g_k. Uplink policies decide what
each worker actually puts on the wire and how the server turns it back
into a gradient, which is the single point where vanilla FL, look-back
recycling, and the compressor stacks differ.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import lbgm
from .data import Dataset, partition, synth_classification, load_idx
from .models import (
    Batch,
    Model,
    accuracy,
    build_model,
    forward_loss,
    gradient,
    init_params,
)
from .numerics import (
    STREAM_DATA,
    STREAM_PARTITION,
    STREAM_SERVER,
    ParamVector,
    RngStream,
    axpy,
    norm_sq,
)


@dataclass(frozen=True)
class RoundConfig:
    eta: float
    tau: int
    batch_size: int  # <= 0 means full shard

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.tau < 1:
            raise ValueError("tau must be >= 1")


class WorkerState:
    """Per-worker mutable state: shard, local model, LBG, EF residual, RNG."""

    def __init__(self, worker_id: int, shard: np.ndarray, dim: int, rng: np.random.Generator):
        self.worker_id = worker_id
        self.shard = np.asarray(shard, dtype=np.int64)
        self.theta_local = np.zeros(dim)
        self.lbg: Optional[ParamVector] = None
        self.ef_residual: Optional[ParamVector] = None
        self.rng = rng
        self._order: Optional[np.ndarray] = None  # current epoch-pass permutation
        self._cursor = 0

    def next_batch(self, dataset: Dataset, batch_size: int) -> Batch:
        """Next minibatch: one shuffle per shard pass, consumed in slices."""
        n = len(self.shard)
        if self._order is None or self._cursor >= n:
            self._order = self.rng.permutation(n)
            self._cursor = 0
        size = n if batch_size <= 0 else batch_size
        end = min(self._cursor + size, n)
        idx = self.shard[self._order[self._cursor : end]]
        self._cursor = end
        return dataset.batch(idx)


class ServerState:
    def __init__(self, theta_global: ParamVector):
        self.theta_global = theta_global
        self.lbg_copies: dict = {}
        self.round = 0


def local_round(
    worker: WorkerState,
    theta_global: ParamVector,
    cfg: RoundConfig,
    model: Model,
    dataset: Dataset,
) -> ParamVector:
    """Run tau local SGD steps from the broadcast model.

    Returns the accumulated stochastic gradient (sum, not mean, of the tau
    minibatch gradients) and leaves the stepped parameters in
    worker.theta_local.
    """
    if len(worker.shard) == 0:
        raise ValueError(f"worker {worker.worker_id} has an empty shard")
    theta = theta_global.copy()
    g_sum = np.zeros_like(theta_global)
    for _ in range(cfg.tau):
        batch = worker.next_batch(dataset, cfg.batch_size)
        g = gradient(model, theta, batch)
        theta = axpy(-cfg.eta, g, theta)
        g_sum = g_sum + g
    worker.theta_local = theta
    return g_sum


def aggregate(server: ServerState, grads: dict, weights, eta: float, transform=None) -> ParamVector:
    """Apply theta <- theta - eta * sum_k omega_k g_k, ascending worker id.

    `transform`, when given, is applied to the weighted gradient sum before
    the step (used for majority-vote sign aggregation).
    """
    acc = np.zeros_like(server.theta_global)
    for k in sorted(grads):
        g = grads[k]
        if g.shape != server.theta_global.shape:
            raise ValueError(f"worker {k} gradient has shape {g.shape}")
        acc = acc + weights[k] * g
    if transform is not None:
        acc = transform(acc)
    server.theta_global = axpy(-eta, acc, server.theta_global)
    server.round += 1
    return server.theta_global


# ---------------------------------------------------------------------------
# Metrics and communication accounting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsRow:
    round: int
    train_loss: float
    test_metric: float  # accuracy for classifiers, loss for regression
    cum_floats: float
    cum_bits: float
    scalar_fraction: float
    delta_sq_proxy: float


METRICS_HEADER = "round,train_loss,test_metric,cum_floats,cum_bits,scalar_fraction,delta_sq_proxy"
LEDGER_HEADER = "round,worker,floats,bits"


def _fmt(x) -> str:
    return repr(float(x))


@dataclass
class MetricsTable:
    rows: list = field(default_factory=list)

    def to_csv(self) -> str:
        lines = [METRICS_HEADER]
        for r in self.rows:
            lines.append(
                f"{r.round},{_fmt(r.train_loss)},{_fmt(r.test_metric)},"
                f"{_fmt(r.cum_floats)},{_fmt(r.cum_bits)},"
                f"{_fmt(r.scalar_fraction)},{_fmt(r.delta_sq_proxy)}"
            )
        return "\n".join(lines) + "\n"

    def final(self) -> MetricsRow:
        return self.rows[-1]


class CommLedger:
    """Append-only per-round, per-worker record of floats and bits sent."""

    def __init__(self):
        self.rows = []  # (round, worker, floats, bits)
        self._cum_floats = 0.0
        self._cum_bits = 0.0

    def append(self, round_idx: int, worker_id: int, floats: float, bits: float):
        if floats < 0 or bits < 0:
            raise ValueError("ledger entries must be non-negative")
        self.rows.append((round_idx, worker_id, float(floats), float(bits)))
        self._cum_floats += floats
        self._cum_bits += bits

    @property
    def cum_floats(self) -> float:
        return self._cum_floats

    @property
    def cum_bits(self) -> float:
        return self._cum_bits

    def to_csv(self) -> str:
        lines = [LEDGER_HEADER]
        for rnd, worker, floats, bits in self.rows:
            lines.append(f"{rnd},{worker},{_fmt(floats)},{_fmt(bits)}")
        return "\n".join(lines) + "\n"


@dataclass
class RunResult:
    metrics: MetricsTable
    ledger: CommLedger


# ---------------------------------------------------------------------------
# Experiment setup
# ---------------------------------------------------------------------------

@dataclass
class ExperimentSetup:
    model: Model
    train_ds: Dataset
    test_ds: Dataset
    workers: list
    server: ServerState
    weights: dict
    round_config: RoundConfig
    rounds: int
    monitor_delta_sq: bool
    server_rng: np.random.Generator


def _one_hot_targets(ds: Dataset) -> Dataset:
    targets = np.zeros((ds.n, ds.num_classes))
    targets[np.arange(ds.n), ds.labels] = 1.0
    return Dataset(ds.inputs, targets, 0)


def _slice(ds: Dataset, start: int, stop: int) -> Dataset:
    return Dataset(ds.inputs[start:stop], ds.labels[start:stop], ds.num_classes)


def build_datasets(exp):
    """Materialize (train, test) datasets from an experiment config."""
    if exp.data_kind == "synth":
        gen = RngStream(exp.seed, STREAM_DATA).generator()
        full = synth_classification(
            exp.n + exp.test_n, exp.dim, exp.classes, exp.separation, gen
        )
        return _slice(full, 0, exp.n), _slice(full, exp.n, exp.n + exp.test_n)
    if exp.data_kind == "idx":
        train = load_idx(exp.images, exp.labels)
        test = load_idx(exp.test_images, exp.test_labels)
        if exp.subset > 0:
            train = _slice(train, 0, exp.subset)
        if exp.test_subset > 0:
            test = _slice(test, 0, exp.test_subset)
        return train, test
    raise ValueError(f"unknown data kind {exp.data_kind!r}")


def build_experiment(exp) -> ExperimentSetup:
    """Build model, datasets, partition, and per-worker state for a run.

    Stream layout: worker k draws from stream k (the initial model is drawn
    from worker 0's stream before any sampling), the dataset and partition
    use reserved role streams, and server-side device sampling has its own.
    """
    train_ds, test_ds = build_datasets(exp)
    out_dim = train_ds.num_classes if train_ds.num_classes > 0 else 1
    model = build_model(exp.model_kind, train_ds.dim, out_dim, exp.hidden)
    if exp.model_kind == "linear_regression" and train_ds.num_classes > 0:
        # regression on labeled data fits one-hot targets
        model = build_model(exp.model_kind, train_ds.dim, train_ds.num_classes, exp.hidden)
        train_ds = _one_hot_targets(train_ds)
        test_ds = _one_hot_targets(test_ds)

    part_rng = RngStream(exp.seed, STREAM_PARTITION).generator()
    part = partition(train_ds, exp.workers, exp.partition_mode, part_rng)

    worker_states = [
        WorkerState(k, part.shards[k], model.param_dim, RngStream(exp.seed, k).generator())
        for k in range(exp.workers)
    ]
    theta0 = init_params(model, worker_states[0].rng)
    for w in worker_states:
        w.theta_local = theta0.copy()
    server = ServerState(theta0.copy())
    weights = {k: float(part.weights[k]) for k in range(exp.workers)}

    batch_size = exp.batch_size
    if exp.tau > 0:
        tau = exp.tau
    else:
        max_shard = max(len(sh) for sh in part.shards)
        tau = max(1, math.ceil(max_shard / (batch_size if batch_size > 0 else max_shard)))
    if exp.eta_rule == "inv_sqrt_tau_t":
        eta = 1.0 / math.sqrt(tau * max(exp.rounds, 1))
    else:
        eta = exp.eta

    return ExperimentSetup(
        model=model,
        train_ds=train_ds,
        test_ds=test_ds,
        workers=worker_states,
        server=server,
        weights=weights,
        round_config=RoundConfig(eta, tau, batch_size),
        rounds=exp.rounds,
        monitor_delta_sq=exp.monitor_delta_sq,
        server_rng=RngStream(exp.seed, STREAM_SERVER).generator(),
    )


def evaluate(model: Model, theta: ParamVector, train_ds: Dataset, test_ds: Dataset):
    train_loss = forward_loss(model, theta, train_ds.full_batch())
    if test_ds.num_classes > 0:
        test_metric = accuracy(model, theta, test_ds.full_batch())
    else:
        test_metric = forward_loss(model, theta, test_ds.full_batch())
    return train_loss, test_metric


# ---------------------------------------------------------------------------
# Round engine
# ---------------------------------------------------------------------------

class VanillaPolicy:
    """Always transmit the full accumulated gradient.

    A shadow LBG is still maintained so the drift monitor column matches a
    look-back run with delta = 0 bit for bit.
    """

    server_transform = None

    def process(self, worker, g: ParamVector):
        sin2 = lbgm.lbp_error(g, worker.lbg) if worker.lbg is not None else 0.0
        worker.lbg = g.copy()
        return lbgm.full_gradient_message(g), sin2

    def reconstruct(self, server, worker_id: int, msg) -> ParamVector:
        return lbgm.reconstruct(server, worker_id, msg)


def run_with_policy(exp, policy, sample_fraction: Optional[float] = None) -> RunResult:
    """Run T federated rounds with the given uplink policy.

    With a sample fraction, each round draws ceil(fraction * K) workers
    without replacement from the server stream and scales the update by
    1/|sampled| while keeping the original data weights.
    """
    setup = build_experiment(exp)
    if hasattr(policy, "bind"):
        policy.bind(setup)
    model, rc = setup.model, setup.round_config
    server = setup.server
    k_total = len(setup.workers)

    ledger = CommLedger()
    metrics = MetricsTable()
    nan = float("nan")

    train_loss, test_metric = evaluate(model, server.theta_global, setup.train_ds, setup.test_ds)
    metrics.rows.append(
        MetricsRow(0, train_loss, test_metric, 0.0, 0.0, 0.0,
                   0.0 if setup.monitor_delta_sq else nan)
    )

    for t in range(1, setup.rounds + 1):
        if sample_fraction is not None:
            m = math.ceil(sample_fraction * k_total)
            participants = sorted(
                int(i) for i in setup.server_rng.choice(k_total, size=m, replace=False)
            )
            eta_round = rc.eta / m
        else:
            participants = list(range(k_total))
            eta_round = rc.eta

        g_tilde = {}
        n_scalar = 0
        proxy = 0.0 if setup.monitor_delta_sq else nan
        for k in participants:
            worker = setup.workers[k]
            g = local_round(worker, server.theta_global, rc, model, setup.train_ds)
            msg, sin2 = policy.process(worker, g)
            ledger.append(t, k, msg.cost_floats, msg.cost_bits)
            if msg.tag == lbgm.TAG_SCALAR:
                n_scalar += 1
            if setup.monitor_delta_sq:
                proxy = max(proxy, norm_sq(g) / (rc.tau * rc.tau) * sin2)
            g_tilde[k] = policy.reconstruct(server, k, msg)

        aggregate(server, g_tilde, setup.weights, eta_round, transform=policy.server_transform)
        train_loss, test_metric = evaluate(model, server.theta_global, setup.train_ds, setup.test_ds)
        metrics.rows.append(
            MetricsRow(
                t,
                train_loss,
                test_metric,
                ledger.cum_floats,
                ledger.cum_bits,
                n_scalar / len(participants),
                proxy,
            )
        )
    return RunResult(metrics, ledger)


def run_vanilla(exp) -> RunResult:
    """Baseline federated averaging: full gradients from every worker."""
    return run_with_policy(exp, VanillaPolicy())
