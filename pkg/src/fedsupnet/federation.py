"""Round protocol for federated supernet training and its variants.

Three algorithms share one loop: "fedsup" broadcasts the full supernet and
each client trains M sampled children per iteration; "efedsup" broadcasts
one budget-capped child per client and trains only it; "fedavg" is the
degenerate case of always training the biggest child.

Client data partitioning (label-sorted shards and per-class Dirichlet),
client sampling, the warmup+cosine learning-rate schedule, local SGD and
size-weighted aggregation all live here. Communication is simulated: byte
counts are metered from the parameter sizes actually exchanged.
"""

from __future__ import annotations

import json
import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import ops
from . import supernet as snet
from .space import biggest, flops, medium, sample_sandwich_set, \
    sample_within_flops, smallest

log = logging.getLogger(__name__)

ALGORITHMS = ("fedsup", "efedsup", "fedavg")
FIXED_CHILDREN = {"biggest": biggest, "smallest": smallest, "medium": medium}


@dataclass
class DistillConfig:
    enabled: bool = True
    temperature: float = 1.0
    balance: float = 0.5


@dataclass
class Tier:
    fraction: float
    max_flops: float  # absolute MAC budget, or one of "biggest"/"medium"/"smallest"

    def resolve_budget(self, space):
        if isinstance(self.max_flops, str):
            try:
                spec = FIXED_CHILDREN[self.max_flops](space)
            except KeyError:
                raise ValueError(f"unknown tier budget name {self.max_flops!r}")
            return flops(space, spec)
        return self.max_flops


@dataclass
class FederationConfig:
    n_clients: int
    rounds: int
    participation: float = 0.1
    local_epochs: int = 1
    children_per_iter: int = 3
    momentum: float = 0.5
    base_lr: float = 0.1
    warmup_rounds: int = 20
    batch_size: int = 32
    algorithm: str = "fedsup"
    tiers: list = field(default_factory=lambda: [Tier(fraction=1.0, max_flops="biggest")])
    distill: DistillConfig = field(default_factory=DistillConfig)
    fedprox_lambda: float = 0.0
    label_smoothing: float = 0.0
    clip_norm: float = 1.0
    weight_decay: float = 0.0
    seed: int = 0
    norm: str = "pn"
    fixed_child: str | None = None   # pin every sampled child ("biggest", ...)
    efedsup_resample: bool = True    # resample each client's child every round
    eval_every: int = 1              # 0: only after the final round
    augment: bool = False

    def validate(self):
        if not 0 < self.participation <= 1:
            raise ValueError(f"participation must lie in (0, 1], got {self.participation}")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.children_per_iter < 1:
            raise ValueError("children_per_iter must be >= 1")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        frac = sum(t.fraction for t in self.tiers)
        if self.tiers and abs(frac - 1.0) > 1e-9:
            raise ValueError(f"tier fractions must sum to 1, got {frac}")
        if self.fixed_child is not None and self.fixed_child not in FIXED_CHILDREN:
            raise ValueError(f"fixed_child must be one of {sorted(FIXED_CHILDREN)}")
        return self


@dataclass
class ClientDataset:
    client_id: int
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    @property
    def n_train(self):
        return len(self.train_y)

    @property
    def n_test(self):
        return len(self.test_y)

    def label_histogram(self, num_classes):
        return np.bincount(self.train_y, minlength=num_classes)


@dataclass
class RoundReport:
    round: int
    lr: float
    clients: list
    bytes_broadcast: int
    bytes_upload: int
    eval: dict | None = None

    def to_json(self):
        return json.dumps(
            {
                "round": self.round,
                "lr": self.lr,
                "clients": self.clients,
                "bytes_broadcast": self.bytes_broadcast,
                "bytes_upload": self.bytes_upload,
                "eval": self.eval,
            },
            sort_keys=True,
        )


@dataclass
class LocalResult:
    client_id: int
    n_samples: int
    params: dict | None = None          # full parameters (fedsup/fedavg)
    submodel: object | None = None      # MaterializedModel (efedsup)
    iterations: int = 0
    mean_loss: float = 0.0


def stream_rng(seed, label, *keys):
    """Deterministic, schedule-independent RNG stream for one purpose."""
    entropy = (int(seed) & 0xFFFFFFFF, zlib.crc32(label.encode())) + tuple(
        int(k) & 0xFFFFFFFF for k in keys
    )
    return np.random.default_rng(np.random.SeedSequence(entropy))


def _largest_remainder(total, weights):
    """Integer allocation of `total` proportional to non-negative weights."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.sum() <= 0:
        return np.zeros(len(weights), dtype=np.int64)
    shares = weights / weights.sum() * total
    counts = np.floor(shares).astype(np.int64)
    remainder = total - counts.sum()
    if remainder > 0:
        order = np.argsort(-(shares - counts), kind="stable")
        counts[order[:remainder]] += 1
    return counts


def _split_test_pool(test_x, test_y, train_hists, num_classes):
    """Give each client test data mirroring its train label histogram."""
    per_client_test = [[] for _ in train_hists]
    for c in range(num_classes):
        pool = np.flatnonzero(test_y == c)
        weights = [h[c] for h in train_hists]
        counts = _largest_remainder(len(pool), weights)
        start = 0
        for k, n in enumerate(counts):
            per_client_test[k].extend(pool[start : start + n])
            start += n
    return [np.asarray(sorted(ix), dtype=np.int64) for ix in per_client_test]


def partition_shards(dataset, n_clients, shards_per_client, rng):
    """Label-sorted equal shards of size |D| / (N*s), s per client.

    Remainder examples that do not fill a shard are dropped (logged).
    The per-client test split mirrors the client's train label histogram.
    """
    n = len(dataset.train_y)
    n_shards = n_clients * shards_per_client
    if n_shards > n:
        raise ValueError(f"{n_shards} shards requested but only {n} examples")
    shard_size = n // n_shards
    used = shard_size * n_shards
    if used < n:
        log.info("shard partition drops %d remainder examples", n - used)
    order = np.argsort(dataset.train_y, kind="stable")[:used]
    shard_ids = rng.permutation(n_shards)
    num_classes = dataset.num_classes
    clients = []
    train_hists = []
    per_client_train = []
    for k in range(n_clients):
        mine = shard_ids[k * shards_per_client : (k + 1) * shards_per_client]
        idx = np.concatenate([order[s * shard_size : (s + 1) * shard_size] for s in mine])
        per_client_train.append(idx)
        train_hists.append(np.bincount(dataset.train_y[idx], minlength=num_classes))
    test_splits = _split_test_pool(dataset.test_x, dataset.test_y, train_hists, num_classes)
    for k in range(n_clients):
        idx = per_client_train[k]
        tix = test_splits[k]
        clients.append(
            ClientDataset(
                client_id=k,
                train_x=dataset.train_x[idx],
                train_y=dataset.train_y[idx],
                test_x=dataset.test_x[tix],
                test_y=dataset.test_y[tix],
            )
        )
    return clients


def partition_dirichlet(dataset, n_clients, beta, rng, max_retries=100):
    """Per class, split examples across clients by Dir(beta) proportions.

    A draw that leaves any client with zero training examples is redrawn,
    up to max_retries times.
    """
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    num_classes = dataset.num_classes
    class_indices = [np.flatnonzero(dataset.train_y == c) for c in range(num_classes)]
    for _ in range(max_retries):
        assign = [[] for _ in range(n_clients)]
        for c in range(num_classes):
            pool = rng.permutation(class_indices[c])
            props = rng.dirichlet(np.full(n_clients, beta))
            counts = _largest_remainder(len(pool), props)
            start = 0
            for k, cnt in enumerate(counts):
                assign[k].extend(pool[start : start + cnt])
                start += cnt
        if all(len(a) > 0 for a in assign):
            break
    else:
        raise ValueError(
            f"could not produce {n_clients} non-empty clients in {max_retries} draws"
        )
    train_hists = []
    for k in range(n_clients):
        idx = np.asarray(sorted(assign[k]), dtype=np.int64)
        assign[k] = idx
        train_hists.append(np.bincount(dataset.train_y[idx], minlength=num_classes))
    test_splits = _split_test_pool(dataset.test_x, dataset.test_y, train_hists, num_classes)
    return [
        ClientDataset(
            client_id=k,
            train_x=dataset.train_x[assign[k]],
            train_y=dataset.train_y[assign[k]],
            test_x=dataset.test_x[test_splits[k]],
            test_y=dataset.test_y[test_splits[k]],
        )
        for k in range(n_clients)
    ]


def sample_clients(n_clients, participation, rng):
    """Uniform sample without replacement of round(N*R) clients (>= 1)."""
    size = max(1, int(n_clients * participation + 0.5))
    ids = rng.choice(n_clients, size=size, replace=False)
    return sorted(int(i) for i in ids)


def lr_schedule(t, config):
    """Linear warmup to base_lr, then cosine decay over the remainder."""
    if not 0 <= t < config.rounds:
        raise ValueError(f"round {t} outside [0, {config.rounds})")
    w = config.warmup_rounds
    if t < w:
        return config.base_lr * (t + 1) / w
    if config.rounds <= w:
        return config.base_lr
    progress = (t - w) / (config.rounds - w)
    return 0.5 * config.base_lr * (1.0 + float(np.cos(np.pi * progress)))


def _iter_batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _child_set(net, config, rng):
    if config.fixed_child is not None:
        fixed = FIXED_CHILDREN[config.fixed_child](net.space)
        return [fixed] * config.children_per_iter
    if config.algorithm == "fedavg":
        return [biggest(net.space)]
    return sample_sandwich_set(net.space, config.children_per_iter, rng)


def local_train_fedsup(net, client, config, lr, rng, augment_fn=None):
    """Local supernet optimization: per iteration, accumulate the gradients
    of M sampled children (biggest on hard labels, others optionally
    distilled against its detached logits), clip, add the proximal term,
    take one SGD step. Momentum buffers start at zero each round."""
    if client.n_train == 0:
        log.warning("client %d has no training data; skipped", client.client_id)
        return None
    state = ops.init_optimizer(net.params, config.momentum, lr)
    prox = config.fedprox_lambda
    anchor = {k: v.copy() for k, v in net.params.items()} if prox > 0 else None
    grads = snet.zero_grads(net)
    iterations = 0
    loss_sum = 0.0
    for _ in range(config.local_epochs):
        for batch in _iter_batches(client.n_train, config.batch_size, rng):
            xb = client.train_x[batch]
            yb = client.train_y[batch]
            if augment_fn is not None and config.augment:
                xb = augment_fn(xb, rng)
            children = _child_set(net, config, rng)
            distill_on = (
                config.distill.enabled
                and config.fixed_child is None
                and config.algorithm != "fedavg"
                and len(children) >= 3
            )
            for g in grads.values():
                g.fill(0.0)
            teacher = None
            for idx, spec in enumerate(children):
                use_teacher = teacher if (distill_on and idx > 0) else None
                loss, logits = snet.backward_accumulate(
                    net, spec, xb, yb, grads,
                    label_smoothing=config.label_smoothing,
                    teacher_logits=use_teacher,
                    temperature=config.distill.temperature,
                    balance=config.distill.balance,
                    train=True,
                )
                if distill_on and idx == 0:
                    teacher = logits
                loss_sum += loss
            if config.weight_decay > 0:
                for name, p in net.params.items():
                    grads[name] += p.dtype.type(config.weight_decay) * p
            if config.clip_norm > 0:
                ops.clip_global_norm(grads, config.clip_norm)
            if prox > 0:
                for name, p in net.params.items():
                    grads[name] += p.dtype.type(prox) * (p - anchor[name])
            ops.sgd_step(net.params, grads, state)
            iterations += 1
    return LocalResult(
        client_id=client.client_id,
        n_samples=client.n_train,
        params=net.params,
        iterations=iterations,
        mean_loss=loss_sum / max(1, iterations),
    )


def local_train_efedsup(net, spec, client, config, lr, rng, augment_fn=None):
    """Plain local SGD on one pre-fixed child; no distillation."""
    if client.n_train == 0:
        log.warning("client %d has no training data; skipped", client.client_id)
        return None
    vw = snet.view(net, spec)
    state = ops.init_optimizer(net.params, config.momentum, lr)
    grads = snet.zero_grads(net)
    iterations = 0
    loss_sum = 0.0
    for _ in range(config.local_epochs):
        for batch in _iter_batches(client.n_train, config.batch_size, rng):
            xb = client.train_x[batch]
            yb = client.train_y[batch]
            if augment_fn is not None and config.augment:
                xb = augment_fn(xb, rng)
            for g in grads.values():
                g.fill(0.0)
            loss, _ = snet.backward_accumulate(
                net, vw, xb, yb, grads,
                label_smoothing=config.label_smoothing, train=True,
            )
            loss_sum += loss
            if config.weight_decay > 0:
                for name, p in net.params.items():
                    grads[name] += p.dtype.type(config.weight_decay) * p
            if config.clip_norm > 0:
                ops.clip_global_norm(grads, config.clip_norm)
            ops.sgd_step(net.params, grads, state)
            iterations += 1
    trained = snet.extract_submodel(net, spec)
    return LocalResult(
        client_id=client.client_id,
        n_samples=client.n_train,
        submodel=trained,
        iterations=iterations,
        mean_loss=loss_sum / max(1, iterations),
    )


def aggregate(net, returns, sizes):
    """Size-weighted average in ascending client id.

    `returns` maps client id to a full parameter dict; weights are the
    participants' data sizes renormalized to sum to one.
    """
    order = sorted(returns)
    total = float(sum(sizes[k] for k in order))
    weights = {k: sizes[k] / total for k in order}
    wsum = sum(weights.values())
    if abs(wsum - 1.0) > 1e-9:
        raise ValueError(f"participation weights sum to {wsum!r}, expected 1")
    out = {name: np.zeros_like(p) for name, p in net.params.items()}
    for k in order:
        w = np.float32(weights[k])
        client_params = returns[k]
        for name in out:
            out[name] += w * client_params[name]
    return out


def assign_tiers(config, space):
    """Static tier per client: ids partitioned by tier fractions in order."""
    counts = _largest_remainder(config.n_clients, [t.fraction for t in config.tiers])
    budgets = []
    for tier, cnt in zip(config.tiers, counts):
        budgets.extend([tier.resolve_budget(space)] * int(cnt))
    return budgets


@dataclass
class RunResult:
    net: object
    reports: list
    client_specs: dict = field(default_factory=dict)


def run(config, clients, space, *, evaluator=None, report_sink=None,
        augment_fn=None, threads=1):
    """T rounds of sample, broadcast, local train, aggregate, evaluate.

    `evaluator(net, round)` may return a JSON-able dict stored in the
    round report. Deterministic for a fixed config/seed/thread count.
    """
    config.validate()
    if len(clients) != config.n_clients:
        raise ValueError(f"expected {config.n_clients} clients, got {len(clients)}")
    net = snet.build(space, stream_rng(config.seed, "init"), norm=config.norm)
    sizes = {c.client_id: c.n_train for c in clients}
    by_id = {c.client_id: c for c in clients}
    tier_budgets = assign_tiers(config, space) if config.algorithm == "efedsup" else None
    persistent_specs = {}
    reports = []

    for t in range(config.rounds):
        lr = lr_schedule(t, config)
        selected = sample_clients(config.n_clients, config.participation, stream_rng(config.seed, "clients", t))
        bytes_broadcast = 0
        bytes_upload = 0
        jobs = []
        for k in selected:
            client = by_id[k]
            local = net.copy()
            if config.algorithm == "efedsup":
                if config.efedsup_resample or k not in persistent_specs:
                    tier_rng = stream_rng(config.seed, "tier", t, k)
                    spec = sample_within_flops(space, tier_budgets[k], tier_rng)
                    persistent_specs[k] = spec
                spec = persistent_specs[k]
                sub = snet.extract_submodel(net, spec)
                bytes_broadcast += sub.nbytes
                jobs.append(("efedsup", k, client, local, spec))
            else:
                bytes_broadcast += snet.supernet_nbytes(net)
                jobs.append(("fedsup", k, client, local, None))

        def run_job(job):
            kind, k, client, local, spec = job
            rng = stream_rng(config.seed, "local", t)
            if kind == "efedsup":
                return local_train_efedsup(local, spec, client, config, lr, rng,
                                           augment_fn=augment_fn)
            return local_train_fedsup(local, client, config, lr, rng,
                                      augment_fn=augment_fn)

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(run_job, jobs))
        else:
            results = [run_job(job) for job in jobs]

        returns = {}
        for res in results:
            if res is None:
                continue
            if res.submodel is not None:
                bytes_upload += res.submodel.nbytes
                returns[res.client_id] = snet.merge_submodel(net, res.submodel)
            else:
                bytes_upload += snet.supernet_nbytes(net)
                returns[res.client_id] = res.params
        if returns:
            net.params = aggregate(net, returns, sizes)

        eval_result = None
        if evaluator is not None and config.eval_every > 0 and (t + 1) % config.eval_every == 0:
            eval_result = evaluator(net, t)
        report = RoundReport(
            round=t,
            lr=lr,
            clients=selected,
            bytes_broadcast=bytes_broadcast,
            bytes_upload=bytes_upload,
            eval=eval_result,
        )
        reports.append(report)
        if report_sink is not None:
            report_sink(report)

    return RunResult(net=net, reports=reports, client_specs=dict(persistent_specs))
