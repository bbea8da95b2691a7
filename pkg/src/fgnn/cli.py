"""Command-line entry point wiring the full pipeline.

Subcommands: ``preprocess`` (raw clicks -> dataset directory),
``build-graph`` (training sessions -> global graph file), ``train``,
``evaluate`` (model checkpoint or a simple baseline), ``analyze correlation``
and ``selftest``.

Exit codes: 0 success, 1 configuration/usage/validation problem, 2 runtime
failure.  Settings come from an optional flat ``key=value`` config file;
``--set key=value`` flags override file values, ``--seed`` (or the SEED
environment variable) overrides the seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from . import ingest
from .errors import (
    ConfigError,
    EmptyDatasetError,
    FgnnError,
    MalformedInputError,
    VocabError,
)
from .graphs import GlobalGraph, SamplingConfig, build_global_graph
from .model import ModelConfig
from .train import TrainConfig, load_checkpoint, train_model

_VALIDATION_ERRORS = (ConfigError, MalformedInputError, EmptyDatasetError, VocabError)


@dataclasses.dataclass
class RunConfig:
    """Union of model, training and sampling settings, flat for config files."""

    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    sampling: SamplingConfig = dataclasses.field(default_factory=SamplingConfig)

    def _owner(self, key: str):
        for section in (self.model, self.train, self.sampling):
            if hasattr(section, key):
                return section
        raise ConfigError(f"unknown config key {key!r}")

    def get(self, key: str):
        return getattr(self._owner(key), key)

    def set(self, key: str, raw: str) -> None:
        owner = self._owner(key)
        current = getattr(owner, key)
        if isinstance(current, bool):
            lowered = raw.strip().lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ConfigError(f"config key {key!r} expects a boolean, got {raw!r}")
            value = lowered in ("true", "1", "yes")
        elif isinstance(current, int):
            try:
                value = int(raw)
            except ValueError:
                raise ConfigError(f"config key {key!r} expects an integer, got {raw!r}")
        elif isinstance(current, float):
            try:
                value = float(raw)
            except ValueError:
                raise ConfigError(f"config key {key!r} expects a number, got {raw!r}")
        else:
            value = raw.strip()
        setattr(owner, key, value)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        if self.sampling.n_hops < 0 or self.sampling.sample_cap < 1:
            raise ConfigError("n_hops must be >= 0 and sample_cap >= 1")
        return self

    @classmethod
    def load(cls, path=None, overrides=(), seed=None) -> "RunConfig":
        cfg = cls()
        if path is not None:
            with open(path, encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, start=1):
                    line = line.strip()
                    if not line or line.startswith("#"):
                        continue
                    if "=" not in line:
                        raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
                    key, _, value = line.partition("=")
                    cfg.set(key.strip(), value)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            key, _, value = item.partition("=")
            cfg.set(key.strip(), value)
        env_seed = os.environ.get("SEED")
        if env_seed is not None and seed is None:
            cfg.set("seed", env_seed)
        if seed is not None:
            cfg.train.seed = int(seed)
        return cfg.validate()


class _Parser(argparse.ArgumentParser):
    """argparse variant that exits 1 on usage problems, per the CLI contract."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="fgnn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("preprocess", help="parse and filter a raw click log")
    p.add_argument("--format", required=True,
                   choices=["yoochoose", "diginetica", "generic"])
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--recency-fraction", type=float, default=None,
                   help="keep only this most-recent fraction of training sessions")
    p.add_argument("--test-fraction", type=float, default=0.1)
    p.add_argument("--test-days", type=float, default=None,
                   help="test split = sessions ending within the last N days")

    p = sub.add_parser("build-graph", help="merge training sessions into the global graph")
    p.add_argument("--train", required=True, help="dataset directory")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="fit the model")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("evaluate", help="score a checkpoint or baseline on the test split")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--baseline", default=None, choices=["pop", "spop", "itemknn"])
    p.add_argument("--data", required=True)
    p.add_argument("--graph", default=None)
    p.add_argument("--k", default="5,10,20")
    p.add_argument("--out", default=None, help="write the JSON report here")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("analyze", help="corpus analyses")
    analyze_sub = p.add_subparsers(dest="analysis", required=True, parser_class=_Parser)
    c = analyze_sub.add_parser("correlation", help="cross-session correlation histogram")
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--max-pairs", type=int, default=1_000_000)
    c.add_argument("--seed", type=int, default=None)

    sub.add_parser("selftest", help="run the built-in invariant suite")
    return parser


def _cmd_preprocess(args) -> int:
    counters: dict = {}
    with open(args.input, "rb") as fh:
        clicks = ingest.parse_clicks(fh, args.format, counters)
    sessions = ingest.group_sessions(clicks)
    result = ingest.preprocess(
        sessions,
        recency_fraction=args.recency_fraction,
        test_fraction=args.test_fraction,
        test_days=args.test_days,
        skipped_rows=counters.get("skipped", 0),
    )
    ingest.write_dataset(args.out, result)
    print(json.dumps(result.stats, indent=2))
    return 0


def _cmd_build_graph(args) -> int:
    sessions = ingest.load_sessions(Path(args.train) / ingest.TRAIN_SESSIONS_FILE)
    if not sessions:
        raise EmptyDatasetError(f"no sessions in {args.train}")
    graph = build_global_graph(sessions)
    graph.save(args.out)
    print(f"global graph: {graph.n_nodes} nodes, {len(graph.edges)} edges -> {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = RunConfig.load(args.config, overrides=args.set, seed=args.seed)
    data = Path(args.data)
    examples = ingest.load_examples(data / ingest.TRAIN_FILE)
    if not examples:
        raise EmptyDatasetError(f"no training examples in {args.data}")
    vocab = ingest.load_vocab(data / ingest.VOCAB_FILE)
    graph = GlobalGraph.load(args.graph)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"
    if not metrics_path.exists():
        metrics_path.write_text("epoch,mean_loss,lr,wall_seconds\n", encoding="utf-8")

    def log(metrics):
        with open(metrics_path, "a", encoding="utf-8") as fh:
            fh.write(
                f"{metrics['epoch']},{metrics['mean_loss']:.6f},"
                f"{metrics['lr']:.3e},{metrics['wall_seconds']:.3f}\n"
            )
        print(
            f"epoch {metrics['epoch']}: loss {metrics['mean_loss']:.4f} "
            f"lr {metrics['lr']:.1e} ({metrics['wall_seconds']:.1f}s)"
        )

    train_model(
        examples,
        graph,
        len(vocab),
        cfg.model,
        cfg.train,
        cfg.sampling,
        checkpoint_dir=out_dir,
        log=log,
    )
    print(f"checkpoint -> {out_dir}")
    return 0


def _cmd_evaluate(args) -> int:
    from . import evaluation as E

    if (args.ckpt is None) == (args.baseline is None):
        raise ConfigError("evaluate needs exactly one of --ckpt or --baseline")
    ks = []
    for token in str(args.k).split(","):
        token = token.strip()
        if token:
            try:
                ks.append(int(token))
            except ValueError:
                raise ConfigError(f"--k expects integers, got {token!r}")
    if not ks or min(ks) < 1:
        raise ConfigError(f"--k needs positive cutoffs, got {args.k!r}")

    data = Path(args.data)
    examples = ingest.load_examples(data / ingest.TEST_FILE)
    if not examples:
        raise EmptyDatasetError(f"no test examples in {args.data}")

    if args.ckpt is not None:
        if args.graph is None:
            raise ConfigError("evaluate --ckpt requires --graph")
        params, model_cfg, manifest, _ = load_checkpoint(args.ckpt)
        sampling_info = manifest.get("sampling", {})
        sampling = SamplingConfig(
            n_hops=int(sampling_info.get("n_hops", 1)),
            sample_cap=int(sampling_info.get("sample_cap", 5)),
        )
        for item in args.set:
            key, _, value = item.partition("=")
            if key.strip() == "n_hops":
                sampling.n_hops = int(value)
            elif key.strip() == "sample_cap":
                sampling.sample_cap = int(value)
            else:
                raise ConfigError(f"evaluate only overrides sampling keys, got {item!r}")
        graph = GlobalGraph.load(args.graph)
        seed = args.seed if args.seed is not None else int(os.environ.get("SEED", "0"))
        scorer = E.model_scorer(params, model_cfg, graph, sampling, seed=seed)
        source = f"checkpoint {args.ckpt}"
    else:
        sessions = ingest.load_sessions(data / ingest.TRAIN_SESSIONS_FILE)
        vocab = ingest.load_vocab(data / ingest.VOCAB_FILE)
        stats = E.TrainStats.from_sessions(sessions, len(vocab))
        scorer = E.baseline_scorer(args.baseline, stats)
        source = f"baseline {args.baseline}"

    report = E.evaluate(scorer, examples, ks=ks)
    print(f"evaluation of {source} on {len(examples)} examples")
    print(report.table())
    payload = json.dumps(report.to_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(payload + "\n", encoding="utf-8")
        print(f"report -> {args.out}")
    else:
        print(payload)
    return 0


def _cmd_analyze_correlation(args) -> int:
    from .evaluation import session_correlation

    data = Path(args.data)
    sessions = ingest.load_sessions(data / ingest.TRAIN_SESSIONS_FILE)
    vocab = ingest.load_vocab(data / ingest.VOCAB_FILE)
    seed = args.seed if args.seed is not None else int(os.environ.get("SEED", "0"))
    result = session_correlation(
        sessions, len(vocab), max_pairs=args.max_pairs, seed=seed
    )
    Path(args.out).write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
    print(f"mean correlation {result['mean']:.4f} over {result['pairs']} pairs "
          f"-> {args.out}")
    return 0


def _cmd_selftest(_args) -> int:
    from .selftest import run_selftest

    if run_selftest():
        return 0
    return 2


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handlers = {
        "preprocess": _cmd_preprocess,
        "build-graph": _cmd_build_graph,
        "train": _cmd_train,
        "evaluate": _cmd_evaluate,
        "selftest": _cmd_selftest,
    }
    try:
        if args.command == "analyze":
            return _cmd_analyze_correlation(args)
        return handlers[args.command](args)
    except _VALIDATION_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (FgnnError, OSError) as err:
        print(f"runtime error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
