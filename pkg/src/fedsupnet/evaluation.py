"""Two-axis evaluation: broadcast (initial) accuracy per client, and
personalized accuracy after head-only fine-tuning, plus the cost/accuracy
sweep over random children and communication-cost totals."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import ops
from . import supernet as snet
from .space import biggest, flops, medium, sample_random, smallest

log = logging.getLogger(__name__)


@dataclass
class EvalReport:
    mean: float
    std: float
    per_client: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    def to_json_dict(self):
        return {"acc": self.mean, "std": self.std}


def accuracy(net, spec_or_view, x, y, batch_size=512):
    """Fraction of argmax predictions matching labels, eval mode."""
    vw = spec_or_view if isinstance(spec_or_view, snet.SubnetView) else snet.view(net, spec_or_view)
    hits = 0
    for start in range(0, len(y), batch_size):
        logits = snet.forward(net, vw, x[start : start + batch_size], train=False)
        hits += int((logits.argmax(axis=1) == y[start : start + batch_size]).sum())
    return hits / len(y)


def initial_accuracy(net, spec, clients):
    """Per-client accuracy of the broadcast child; mean and population std
    across clients. Clients without test data are excluded and logged."""
    vw = snet.view(net, spec)
    per_client = []
    skipped = []
    for client in clients:
        if client.n_test == 0:
            log.warning("client %d has an empty test set; excluded from evaluation",
                        client.client_id)
            skipped.append(client.client_id)
            continue
        per_client.append(accuracy(net, vw, client.test_x, client.test_y))
    arr = np.asarray(per_client, dtype=np.float64)
    return EvalReport(
        mean=float(arr.mean()) if len(arr) else 0.0,
        std=float(arr.std()) if len(arr) else 0.0,
        per_client=per_client,
        skipped=skipped,
    )


def personalize(net, spec, client, fine_tune_epochs, lr, batch_size=32, rng=None):
    """Head-only fine-tuning on the client's training data.

    The body is frozen: its eval-mode features are computed once, then the
    head (a copy) takes fine_tune_epochs of plain SGD (no momentum).
    Returns the client's test accuracy; the supernet is never mutated.
    """
    if client.n_test == 0:
        return None
    vw = snet.view(net, spec)
    feats_test = snet.features(net, vw, client.test_x, train=False)
    head_w = np.ascontiguousarray(net.params["head.w"][:, : vw.head_in])
    head_b = net.params["head.b"].copy()
    if fine_tune_epochs > 0 and client.n_train > 0:
        feats_train = snet.features(net, vw, client.train_x, train=False)
        rng = rng or np.random.default_rng(0)
        for _ in range(fine_tune_epochs):
            order = rng.permutation(client.n_train)
            for start in range(0, client.n_train, batch_size):
                idx = order[start : start + batch_size]
                logits = ops.linear_forward(feats_train[idx], head_w, head_b)
                _, glogits = ops.softmax_cross_entropy(logits, client.train_y[idx])
                _, gw, gb = ops.linear_backward(glogits, feats_train[idx], head_w)
                head_w -= head_w.dtype.type(lr) * gw
                head_b -= head_b.dtype.type(lr) * gb
    logits = ops.linear_forward_rowwise(feats_test, head_w, head_b)
    return float((logits.argmax(axis=1) == client.test_y).mean())


def personalized_accuracy(net, spec, clients, fine_tune_epochs, lr,
                          batch_size=32, seed=0):
    """personalize() across clients; mean and population std."""
    per_client = []
    skipped = []
    for client in clients:
        rng = np.random.default_rng(np.random.SeedSequence((seed, client.client_id)))
        acc = personalize(net, spec, client, fine_tune_epochs, lr,
                          batch_size=batch_size, rng=rng)
        if acc is None:
            skipped.append(client.client_id)
            continue
        per_client.append(acc)
    arr = np.asarray(per_client, dtype=np.float64)
    return EvalReport(
        mean=float(arr.mean()) if len(arr) else 0.0,
        std=float(arr.std()) if len(arr) else 0.0,
        per_client=per_client,
        skipped=skipped,
    )


def bms_eval(net, clients):
    """Initial accuracy of the big/medium/small children, as a JSON dict."""
    out = {}
    for name, fn in (("B", biggest), ("M", medium), ("S", smallest)):
        out[name] = initial_accuracy(net, fn(net.space), clients).to_json_dict()
    return out


def pareto_sweep(net, k, clients, rng, fine_tune_epochs=5, lr=0.01, seed=0):
    """K random children, each scored by cost and both accuracy axes."""
    if k < 1:
        raise ValueError(f"need at least one sample, got {k}")
    rows = []
    for _ in range(k):
        spec = sample_random(net.space, rng)
        init = initial_accuracy(net, spec, clients)
        pers = personalized_accuracy(net, spec, clients, fine_tune_epochs, lr, seed=seed)
        rows.append(
            {
                "spec_hash": spec.spec_hash(),
                "flops": flops(net.space, spec),
                "params": snet.expected_param_count(net, spec),
                "initial_acc": init.mean,
                "personalized_acc": pers.mean,
            }
        )
    return rows


PARETO_FIELDS = ["spec_hash", "flops", "params", "initial_acc", "personalized_acc"]


def write_pareto_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=PARETO_FIELDS)
        writer.writeheader()
        writer.writerows(rows)


def comm_summary(reports):
    """Cumulative and per-round communication volumes over a run."""
    total_broadcast = sum(r.bytes_broadcast for r in reports)
    total_upload = sum(r.bytes_upload for r in reports)
    rounds = len(reports)
    return {
        "rounds": rounds,
        "bytes_broadcast": total_broadcast,
        "bytes_upload": total_upload,
        "bytes_total": total_broadcast + total_upload,
        "bytes_broadcast_per_round": total_broadcast / rounds if rounds else 0.0,
        "bytes_upload_per_round": total_upload / rounds if rounds else 0.0,
    }
