"""Command-line surface: experiment configuration, orchestration and the
reproducibility manifest.

Subcommands: partition, train, eval, pareto, flops, count. Configuration
is a JSON file (schema in the README); --seed/--out/--threads override
the corresponding config fields. Exit code 0 on success, 2 on usage or
config errors, 1 on runtime failures.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, data as datalib, evaluation, federation, kernels
from . import checkpoint as ckpt
from . import space as spacelib
from . import supernet as snet

log = logging.getLogger(__name__)


class ConfigError(Exception):
    pass


@dataclass
class EvalSettings:
    fine_tune_epochs: int = 5
    fine_tune_lr: float | None = None  # default: last training lr of the run
    pareto_samples: int = 500
    batch_size: int = 32


@dataclass
class ExperimentConfig:
    dataset: dict
    partition: dict
    federation: federation.FederationConfig
    eval: EvalSettings
    out_dir: str = "runs/out"
    seed: int = 0
    threads: int = 1
    raw: dict = field(default_factory=dict)


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(raw_config):
    return hashlib.sha256(canonical_json(raw_config).encode()).hexdigest()


def _require_keys(d, allowed, where):
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def parse_config(raw):
    """Validate and materialize the experiment config from a JSON dict."""
    _require_keys(
        raw,
        {"dataset", "partition", "federation", "eval", "out_dir", "seed", "threads"},
        "config",
    )
    dataset = raw.get("dataset")
    if not isinstance(dataset, dict) or "source" not in dataset:
        raise ConfigError("config.dataset.source is required")
    if dataset["source"] not in ("synthetic", "cifar10-binary", "csv"):
        raise ConfigError(f"unknown dataset source {dataset['source']!r}")

    partition = raw.get("partition")
    if not isinstance(partition, dict) or "scheme" not in partition:
        raise ConfigError("config.partition.scheme is required")
    if partition["scheme"] not in ("shards", "dirichlet"):
        raise ConfigError(f"unknown partition scheme {partition['scheme']!r}")

    fed_raw = dict(raw.get("federation", {}))
    _require_keys(
        fed_raw,
        {
            "n_clients", "rounds", "participation", "local_epochs",
            "children_per_iter", "momentum", "base_lr", "warmup_rounds",
            "batch_size", "algorithm", "tiers", "distill", "fedprox_lambda",
            "label_smoothing", "clip_norm", "weight_decay", "norm",
            "fixed_child", "efedsup_resample", "eval_every", "augment",
        },
        "config.federation",
    )
    if "n_clients" not in fed_raw or "rounds" not in fed_raw:
        raise ConfigError("config.federation needs n_clients and rounds")
    tiers = [
        federation.Tier(fraction=t["fraction"], max_flops=t["max_flops"])
        for t in fed_raw.pop("tiers", [{"fraction": 1.0, "max_flops": "biggest"}])
    ]
    distill = federation.DistillConfig(**fed_raw.pop("distill", {}))
    try:
        fed = federation.FederationConfig(tiers=tiers, distill=distill, **fed_raw)
        fed.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad federation config: {exc}")

    try:
        evalcfg = EvalSettings(**raw.get("eval", {}))
    except TypeError as exc:
        raise ConfigError(f"bad eval config: {exc}")

    cfg = ExperimentConfig(
        dataset=dataset,
        partition=partition,
        federation=fed,
        eval=evalcfg,
        out_dir=raw.get("out_dir", "runs/out"),
        seed=int(raw.get("seed", 0)),
        threads=int(raw.get("threads", 1)),
        raw=raw,
    )
    cfg.federation.seed = cfg.seed
    return cfg


def load_config(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    return parse_config(raw)


def build_dataset(cfg):
    d = cfg.dataset
    source = d["source"]
    if source == "synthetic":
        return datalib.generate_synthetic(
            classes=d.get("classes", 10),
            per_class=d.get("per_class", 100),
            resolution=d.get("resolution", 16),
            noise=d.get("noise", 0.3),
            seed=cfg.seed,
            per_class_test=d.get("per_class_test"),
            channels=d.get("channels", 3),
        )
    if source == "cifar10-binary":
        return datalib.load_cifar10_dir(d["path"])
    return datalib.load_csv(
        d["train_path"], d["test_path"], d.get("channels", 3), d.get("resolution", 32)
    )


def build_clients(cfg, dataset):
    rng = federation.stream_rng(cfg.seed, "partition")
    scheme = cfg.partition["scheme"]
    n = cfg.federation.n_clients
    if scheme == "shards":
        return federation.partition_shards(
            dataset, n, cfg.partition.get("shards_per_client", 2), rng
        )
    return federation.partition_dirichlet(
        dataset, n, cfg.partition.get("beta", 1.0), rng
    )


def _augment_fn(cfg, dataset):
    if cfg.federation.augment:
        return datalib.augment
    return None


def run_experiment(cfg, out_dir=None):
    """Train per config; write manifest, round JSONL, checkpoint, summary."""
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())
    t0 = time.monotonic()

    dataset = build_dataset(cfg)
    clients = build_clients(cfg, dataset)
    space = spacelib.default_space(
        num_classes=dataset.num_classes, input_resolution=dataset.resolution
    )

    rounds_path = out / "rounds.jsonl"
    ckpt_path = out / "checkpoint.bin"

    def evaluator(net, _round):
        return evaluation.bms_eval(net, clients)

    with open(rounds_path, "w") as fh:

        def sink(report):
            fh.write(report.to_json() + "\n")

        result = federation.run(
            cfg.federation, clients, space,
            evaluator=evaluator, report_sink=sink,
            augment_fn=_augment_fn(cfg, dataset), threads=cfg.threads,
        )

    ckpt.save_checkpoint(result.net, ckpt_path)

    last_lr = (
        federation.lr_schedule(cfg.federation.rounds - 1, cfg.federation)
        if cfg.federation.rounds > 0
        else cfg.federation.base_lr
    )
    ft_lr = cfg.eval.fine_tune_lr if cfg.eval.fine_tune_lr is not None else last_lr
    final_eval = {}
    for name, fn in (("B", spacelib.biggest), ("M", spacelib.medium), ("S", spacelib.smallest)):
        spec = fn(space)
        init = evaluation.initial_accuracy(result.net, spec, clients)
        pers = evaluation.personalized_accuracy(
            result.net, spec, clients, cfg.eval.fine_tune_epochs, ft_lr,
            batch_size=cfg.eval.batch_size, seed=cfg.seed,
        )
        final_eval[name] = {
            "initial": init.to_json_dict(),
            "personalized": pers.to_json_dict(),
        }
    comm = evaluation.comm_summary(result.reports)

    manifest = {
        "config": cfg.raw,
        "config_hash": config_hash(cfg.raw),
        "seed": cfg.seed,
        "threads": cfg.threads,
        "code_version": __version__,
        "kernel_backend": kernels.BACKEND,
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
        "wall_seconds": round(time.monotonic() - t0, 3),
        "rounds_path": rounds_path.name,
        "checkpoint_path": ckpt_path.name,
        "checkpoint_sha256": ckpt.checkpoint_sha256(ckpt_path),
        "standardization": dataset.standardization,
        "final_eval": final_eval,
        "communication": comm,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _cmd_partition(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.federation.seed = args.seed
    dataset = build_dataset(cfg)
    clients = build_clients(cfg, dataset)
    summary = [
        {
            "client": c.client_id,
            "n_train": c.n_train,
            "n_test": c.n_test,
            "label_histogram": c.label_histogram(dataset.num_classes).tolist(),
        }
        for c in clients
    ]
    text = json.dumps(summary, indent=2)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "partition_summary.json").write_text(text + "\n")
    else:
        print(text)
    return 0


def _cmd_train(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.raw["seed"] = args.seed
        cfg = parse_config(cfg.raw)
    if args.threads is not None:
        cfg.threads = args.threads
    manifest = run_experiment(cfg, out_dir=args.out)
    print(json.dumps({"out_dir": args.out or cfg.out_dir,
                      "checkpoint_sha256": manifest["checkpoint_sha256"]}))
    return 0


def _named_spec(space, name, seed=0):
    if name == "biggest":
        return spacelib.biggest(space)
    if name == "smallest":
        return spacelib.smallest(space)
    if name == "medium":
        return spacelib.medium(space)
    if name == "random":
        return spacelib.sample_random(space, np.random.default_rng(seed))
    raise ConfigError(f"unknown spec name {name!r}")


def _cmd_flops(args):
    space = spacelib.default_space(num_classes=args.classes,
                                   input_resolution=args.resolution)
    spec = _named_spec(space, args.spec, args.seed or 0)
    macs = spacelib.flops(space, spec)
    params = spacelib.param_count(space, spec)
    print(f"spec={args.spec} macs={macs:,} params={params:,}")
    return 0


def _cmd_count(args):
    space = spacelib.default_space(num_classes=args.classes)
    print(f"{spacelib.count_subnets(space):,}")
    return 0


def _load_run(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.raw["seed"] = args.seed
        cfg = parse_config(cfg.raw)
    net = ckpt.load_checkpoint(args.checkpoint)
    dataset = build_dataset(cfg)
    clients = build_clients(cfg, dataset)
    return cfg, net, clients


def _cmd_eval(args):
    cfg, net, clients = _load_run(args)
    space = net.space
    ft_lr = cfg.eval.fine_tune_lr
    if ft_lr is None:
        ft_lr = (
            federation.lr_schedule(cfg.federation.rounds - 1, cfg.federation)
            if cfg.federation.rounds > 0
            else cfg.federation.base_lr
        )
    spec = _named_spec(space, args.spec, cfg.seed)
    init = evaluation.initial_accuracy(net, spec, clients)
    pers = evaluation.personalized_accuracy(
        net, spec, clients, cfg.eval.fine_tune_epochs, ft_lr,
        batch_size=cfg.eval.batch_size, seed=cfg.seed,
    )
    print(json.dumps({
        "spec": args.spec,
        "initial": init.to_json_dict(),
        "personalized": pers.to_json_dict(),
    }, sort_keys=True))
    return 0


def _cmd_pareto(args):
    cfg, net, clients = _load_run(args)
    ft_lr = cfg.eval.fine_tune_lr
    if ft_lr is None:
        ft_lr = (
            federation.lr_schedule(cfg.federation.rounds - 1, cfg.federation)
            if cfg.federation.rounds > 0
            else cfg.federation.base_lr
        )
    k = args.samples or cfg.eval.pareto_samples
    rng = federation.stream_rng(cfg.seed, "pareto")
    rows = evaluation.pareto_sweep(
        net, k, clients, rng,
        fine_tune_epochs=cfg.eval.fine_tune_epochs, lr=ft_lr, seed=cfg.seed,
    )
    evaluation.write_pareto_csv(rows, args.out)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fedsupnet",
        description="Federated supernet training simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("partition", help="partition a dataset and print a summary")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_partition)

    p = sub.add_parser("train", help="run the federated training loop")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--threads", type=int)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--spec", default="biggest",
                   choices=["biggest", "medium", "smallest", "random"])
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("pareto", help="cost/accuracy sweep over random children")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", "-K", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=_cmd_pareto)

    p = sub.add_parser("flops", help="cost of a named child of the default space")
    p.add_argument("--spec", default="biggest",
                   choices=["biggest", "medium", "smallest", "random"])
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=_cmd_flops)

    p = sub.add_parser("count", help="number of distinct children")
    p.add_argument("--classes", type=int, default=10)
    p.set_defaults(fn=_cmd_count)

    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 2
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
