"""Command-line entry point: ``python -m ecnp <command> [flags]``.

Configuration comes from three layers, highest precedence first: command
flags, a flat ``key = value`` file given with ``--config``, and environment
variables named ``ECNP_<KEY>`` (for example ``ECNP_LAMBDA1=0.01``).
"""
import argparse
import json
import logging
import os
import subprocess
import sys
from dataclasses import dataclass, fields, replace
from importlib import metadata
from pathlib import Path

import numpy as np

from .errors import ConfigTypeError, ECNPError, MissingRequired, UnknownKey
from .harness import (Checkpoint, Dataset, TrainConfig, load_checkpoint, load_mnist_dir,
                      meta_train, run_active_selection, run_epal_analysis, run_evidence_trends,
                      run_headline, run_lambda_ablation, run_outlier_sweep, save_checkpoint,
                      summarize, write_csv, model_config_for)
from .metrics import evaluate
from .model import build_model
from .nn import AdamState
from .objective import LossConfig
from .selftest import run_selftest
from .tasks import MNIST, SPLIT_STREAM, task_rng

COMMANDS = ("train", "eval", "headline", "outlier", "epal", "active", "ablate", "trends",
            "selftest")
DATASETS = ("sinusoid", "gp", "mnist")
HEAD_NAMES = ("cnp", "ecnp")
MODES = ("random", "ep-greedy")
ENV_PREFIX = "ECNP_"


@dataclass(frozen=True)
class ExperimentConfig:
    command: str = ""
    dataset: str = "sinusoid"
    k: int = 5
    head: str = "ecnp"
    iterations: int = 30000
    epochs: int = 0
    batch: int = 8
    lr: float = 1e-3
    clip_norm: float = 0.0
    lambda1: float = 0.1
    lambda2: float = 0.1
    seed: int = 0
    out: str = ""
    mnist_path: str = ""
    max_train: int = 10000
    severity: tuple = (0.0, 5.0, 10.0, 20.0)
    zeta: tuple = (0.0, 0.25, 0.5, 1.0)
    budget: int = 100
    mode: tuple = ("ep-greedy", "random")
    runs: int = 1
    n_test: int = 2000
    tasks: int = 20
    eval_every: int = 1000
    checkpoint: str = ""
    ablate: str = "lambda1"
    grid: tuple = (0.0, 0.01, 0.1, 1.0)
    contexts: tuple = (3, 5, 10, 20, 50, 100)

    def train_config(self):
        epochs = self.epochs or (5 if self.dataset == MNIST else 0)
        return TrainConfig(iterations=self.iterations, epochs=epochs, batch_tasks=self.batch,
                           lr=self.lr, loss=LossConfig(self.lambda1, self.lambda2),
                           eval_every=self.eval_every, seed=self.seed,
                           clip_norm=self.clip_norm or None)

    @property
    def out_dir(self):
        return Path(self.out or f"runs/{self.command}")

    def to_text(self):
        """Flat key=value echo that :func:`parse_text` reads back unchanged."""
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}
_DEFAULTS = ExperimentConfig()
_TUPLE_ITEM = {"severity": float, "zeta": float, "grid": float, "contexts": int, "mode": str}


def _format(value):
    if isinstance(value, tuple):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _convert(key, raw):
    kind = type(getattr(_DEFAULTS, key))
    raw = str(raw).strip()
    try:
        if kind is tuple:
            item = _TUPLE_ITEM[key]
            return tuple(item(p.strip()) for p in raw.split(",") if p.strip())
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigTypeError(f"{key}: cannot read {raw!r} as {kind.__name__}") from None
    return raw


def _normalize(key):
    return key.strip().lower().replace("-", "_")


def parse_text(text, source="config"):
    """Values from flat ``key = value`` text; '#' starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigTypeError(f"{source}:{n}: expected key = value, got {line!r}")
        key, value = line.split("=", 1)
        key = _normalize(key)
        if key not in _FIELDS:
            raise UnknownKey(key)
        out[key] = _convert(key, value)
    return out


def parse_env(environ):
    out = {}
    for name, value in environ.items():
        if name.startswith(ENV_PREFIX):
            key = _normalize(name[len(ENV_PREFIX):])
            if key not in _FIELDS:
                raise UnknownKey(key)
            out[key] = _convert(key, value)
    return out


def validate(cfg):
    if cfg.command not in COMMANDS:
        raise ConfigTypeError(f"command must be one of {', '.join(COMMANDS)}")
    if cfg.dataset not in DATASETS:
        raise ConfigTypeError(f"dataset must be one of {', '.join(DATASETS)}")
    if cfg.head not in HEAD_NAMES:
        raise ConfigTypeError(f"head must be one of {', '.join(HEAD_NAMES)}")
    if cfg.ablate not in ("lambda1", "lambda2"):
        raise ConfigTypeError("ablate must be lambda1 or lambda2")
    for m in cfg.mode:
        if m not in MODES:
            raise ConfigTypeError(f"mode must be among {', '.join(MODES)}, got {m!r}")
    for key in ("k", "batch", "runs", "n_test", "tasks", "eval_every", "max_train"):
        if getattr(cfg, key) < 1:
            raise ConfigTypeError(f"{key} must be positive")
    for key in ("iterations", "epochs", "budget"):
        if getattr(cfg, key) < 0:
            raise ConfigTypeError(f"{key} must be non-negative")
    if cfg.lr <= 0 or min(cfg.lambda1, cfg.lambda2, cfg.clip_norm) < 0:
        raise ConfigTypeError("lr must be positive; lambdas and clip_norm non-negative")
    if cfg.dataset == MNIST and not cfg.mnist_path and cfg.command != "selftest":
        raise MissingRequired("--mnist-path is required for the mnist dataset")
    if cfg.command == "active" and cfg.dataset != MNIST:
        raise ConfigTypeError("active selection runs on the mnist dataset")
    return cfg


def build_parser():
    p = argparse.ArgumentParser(prog="ecnp", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", metavar="PATH")
    p.add_argument("--dataset", choices=DATASETS)
    p.add_argument("--k", type=int)
    p.add_argument("--head", choices=HEAD_NAMES)
    p.add_argument("--iterations", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--clip-norm", type=float, help="global gradient-norm clip; 0 disables")
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--mnist-path", metavar="PATH")
    p.add_argument("--max-train", type=int, help="cap on MNIST training images")
    p.add_argument("--severity", metavar="FLOATS", help="comma-separated outlier severities")
    p.add_argument("--zeta", metavar="FLOATS", help="comma-separated context-noise levels")
    p.add_argument("--budget", type=int)
    p.add_argument("--mode", help="random, ep-greedy, or both comma-separated")
    p.add_argument("--runs", type=int, help="independent seeds, starting at --seed")
    p.add_argument("--n-test", type=int)
    p.add_argument("--tasks", type=int, help="test tasks for active/trends")
    p.add_argument("--eval-every", type=int)
    p.add_argument("--checkpoint", metavar="PATH", help="load (eval/epal/active/trends) or resume (train)")
    p.add_argument("--ablate", choices=("lambda1", "lambda2"))
    p.add_argument("--grid", metavar="FLOATS")
    p.add_argument("--contexts", metavar="INTS")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def parse_config(argv=None, environ=None):
    """ExperimentConfig from flags over the --config file over ECNP_* variables."""
    args = build_parser().parse_args(argv)
    values = parse_env(environ if environ is not None else {})
    if args.config:
        values.update(parse_text(Path(args.config).read_text(encoding="utf-8"), args.config))
    for key, value in vars(args).items():
        if key in _FIELDS and value is not None:
            values[key] = _convert(key, value) if isinstance(value, str) else value
    values["command"] = args.command
    return validate(ExperimentConfig(**values)), args


# -- run bookkeeping -----------------------------------------------------------------

def _version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _git_hash():
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True,
                             timeout=5, cwd=Path(__file__).parent)
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None


def write_manifest(cfg):
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"config": cfg.to_text(), "seed": cfg.seed, "version": _version(),
                "git": _git_hash(), "argv": sys.argv[1:]}
    path = cfg.out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def _dataset(cfg):
    if cfg.dataset == MNIST:
        train, test = load_mnist_dir(cfg.mnist_path, cfg.max_train)
        return Dataset(MNIST, cfg.k, train, test)
    return Dataset(cfg.dataset, cfg.k)


def _train(cfg, dataset, head, log_name="train_log.jsonl"):
    tcfg = cfg.train_config()
    params = build_model(model_config_for(dataset.name, head), tcfg.seed)
    with open(cfg.out_dir / log_name, "a", encoding="utf-8") as fh:
        return meta_train(params, dataset.train_stream(tcfg.seed), tcfg, log_file=fh).params


def _trained_or_loaded(cfg, dataset, head="ecnp"):
    if cfg.checkpoint:
        return load_checkpoint(cfg.checkpoint).params
    return _train(cfg, dataset, head)


# -- commands ----------------------------------------------------------------------

def cmd_train(cfg, dataset):
    tcfg = cfg.train_config()
    stream = dataset.train_stream(tcfg.seed)
    if cfg.checkpoint:
        ck = load_checkpoint(cfg.checkpoint)
        params, adam, start = ck.params, ck.adam, ck.step
    else:
        params = build_model(model_config_for(dataset.name, cfg.head), tcfg.seed)
        adam, start = AdamState(lr=tcfg.lr), 0
    with open(cfg.out_dir / "train_log.jsonl", "a", encoding="utf-8") as fh:
        result = meta_train(params, stream, tcfg, adam, start, log_file=fh)
    path = cfg.out_dir / "model.ckpt"
    save_checkpoint(path, Checkpoint(result.params, result.adam, result.step, tcfg.seed,
                                     {"dataset": dataset.name, "k": cfg.k, "head": cfg.head}))
    write_csv(cfg.out_dir / "train_log.csv", result.log)
    print(f"saved {path} after {result.step} steps")


def cmd_eval(cfg, dataset):
    path = cfg.checkpoint or str(cfg.out_dir / "model.ckpt")
    params = load_checkpoint(path).params
    test = dataset.test_stream()
    report = evaluate(params, test, dataset.n_test(cfg.n_test))
    row = {"dataset": dataset.name, "shots": cfg.k, "checkpoint": path, **report.as_row()}
    print(write_csv(cfg.out_dir / "metrics.csv", [row]), end="")


def cmd_headline(cfg, dataset):
    seeds = tuple(range(cfg.seed, cfg.seed + cfg.runs))
    with open(cfg.out_dir / "train_log.jsonl", "a", encoding="utf-8") as fh:
        rows = run_headline(dataset, cfg.train_config(), seeds=seeds, n_test=cfg.n_test,
                            log_file=fh)
    write_csv(cfg.out_dir / "headline.csv", rows)
    for key in ("mse", "ll", "inclusion@1", "unc_increase"):
        print(key, summarize(rows, key))


def cmd_outlier(cfg, dataset):
    rows = []
    for seed in range(cfg.seed, cfg.seed + cfg.runs):
        tcfg = replace(cfg.train_config(), seed=seed)
        rows += run_outlier_sweep(dataset, cfg.severity, tcfg, n_test=cfg.n_test)
    print(write_csv(cfg.out_dir / "outlier.csv", rows), end="")


def cmd_epal(cfg, dataset):
    params = _trained_or_loaded(cfg, dataset)
    out = run_epal_analysis(params, dataset, cfg.zeta, dataset.n_test(cfg.n_test))
    write_csv(cfg.out_dir / "epal_profile.csv", out["profile"])
    print(write_csv(cfg.out_dir / "epal_noise.csv", out["noise"]), end="")


def cmd_active(cfg, dataset):
    params = _trained_or_loaded(cfg, dataset)
    test = dataset.test_stream()
    rows = []
    for i in range(min(cfg.tasks, dataset.n_test(cfg.tasks))):
        task = test.task(i)
        for mode in cfg.mode:
            # same generator seed per task, so both modes share the initial pixels
            rng = task_rng(cfg.seed, SPLIT_STREAM, i)
            rows += [{"task": i, **r} for r in run_active_selection(params, task, cfg.budget, mode, rng)]
    write_csv(cfg.out_dir / "active.csv", rows)
    final = [r for r in rows if r["n_added"] == cfg.budget]
    for mode in cfg.mode:
        print(mode, float(np.mean([r["mse"] for r in final if r["mode"] == mode])))


def cmd_ablate(cfg, dataset):
    rows = run_lambda_ablation(dataset, cfg.ablate, cfg.grid, cfg.train_config(),
                               n_test=cfg.n_test)
    print(write_csv(cfg.out_dir / "ablation.csv", rows), end="")


def cmd_trends(cfg, dataset):
    params = _trained_or_loaded(cfg, dataset)
    test = dataset.test_stream()
    rows = []
    for i in range(min(cfg.tasks, dataset.n_test(cfg.tasks))):
        rng = task_rng(cfg.seed, SPLIT_STREAM, i)
        rows += [{"task": i, **r} for r in run_evidence_trends(params, test.task(i), cfg.contexts, rng)]
    print(write_csv(cfg.out_dir / "trends.csv", rows), end="")


def cmd_selftest(cfg, dataset):
    results = run_selftest()
    for r in results:
        print(r.line())
    write_csv(cfg.out_dir / "selftest.csv",
              [{"check": r.name, "value": r.value, "tolerance": r.tolerance,
                "passed": r.passed, "seconds": round(r.seconds, 3)} for r in results])
    return 0 if all(r.passed for r in results) else 1


COMMAND_FUNCS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


def dispatch(cfg):
    write_manifest(cfg)
    dataset = None if cfg.command == "selftest" else _dataset(cfg)
    return COMMAND_FUNCS[cfg.command](cfg, dataset) or 0


def main(argv=None, environ=None):
    try:
        cfg, args = parse_config(argv, os.environ if environ is None else environ)
    except (ECNPError, KeyError, OSError) as exc:
        print(f"ecnp: config error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return dispatch(cfg)
    except (ECNPError, OSError, ValueError) as exc:
        print(f"ecnp: {cfg.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
