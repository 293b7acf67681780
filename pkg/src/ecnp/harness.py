"""Meta-training, evaluation, checkpoints and the experiment suites.

Every experiment returns plain rows (lists of dicts) and can write them as
CSV with a fixed column order. CNP and ECNP runs in one comparison always
share their task streams and initialization seeds.
"""
import csv
import hashlib
import io
import json
import logging
import math
import struct
import time
from pathlib import Path
from dataclasses import dataclass, field, replace

import numpy as np

from . import evidential
from .errors import CorruptFile, NonFiniteLoss, VersionMismatch
from .metrics import evaluate
from .model import EVIDENTIAL, GAUSSIAN, ModelConfig, ModelParams, build_model, forward_batch
from .nn import AdamState, adam_step
from .objective import LossConfig, cnp_loss, ecnp_loss
from .tape import Tape
from .tasks import MNIST, SINUSOID, ImageStream, RegressionStream, Task, load_mnist

log = logging.getLogger(__name__)

HEADS = {"cnp": GAUSSIAN, "ecnp": EVIDENTIAL}
TEST_SEED = 20230207


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 30000
    epochs: int = 0
    batch_tasks: int = 8
    lr: float = 1e-3
    loss: LossConfig = field(default_factory=LossConfig)
    eval_every: int = 1000
    seed: int = 0
    clip_norm: float = None

    def n_steps(self, stream):
        per_epoch = stream.steps_per_epoch(self.batch_tasks)
        if self.epochs and per_epoch:
            return self.epochs * per_epoch
        return self.iterations


@dataclass
class TrainResult:
    params: ModelParams
    adam: AdamState
    step: int
    log: list


def model_config_for(dataset, head, **overrides):
    x_dim = 2 if dataset == MNIST else 1
    return ModelConfig(x_dim=x_dim, y_dim=1, head=HEADS.get(head, head), **overrides)


def batch_loss(params, tasks, loss_cfg, tape):
    pred = forward_batch(params, tasks, tape)
    if params.config.head == EVIDENTIAL:
        return ecnp_loss(pred, tasks, loss_cfg, tape)
    return cnp_loss(pred, tasks, tape, loss_cfg.normalize_targets)


def meta_train(params, stream, cfg, adam=None, start_step=0, log_file=None, on_step=None):
    """Adam on the batch-mean task loss; one batch of tasks per step.

    Logs a loss breakdown every ``cfg.eval_every`` steps (and at step 0) as
    dicts; with ``log_file`` each record is also written as a JSON line.
    """
    names = params.named_parameters()
    arrays = list(names.values())
    adam = adam or AdamState(lr=cfg.lr)
    records = []
    t0 = time.perf_counter()
    n_steps = cfg.n_steps(stream)
    for step in range(start_step, n_steps):
        tasks = stream.batch(step, cfg.batch_tasks)
        tape = Tape()
        loss = batch_loss(params, tasks, cfg.loss, tape)
        total = float(loss.total.value)
        if not math.isfinite(total):
            seeds = [(t.meta.get("seed"), t.meta.get("index")) for t in tasks]
            raise NonFiniteLoss(f"non-finite loss at step {step}; task (seed, index): {seeds}")
        grads = dict(zip(names, tape.grad(loss.total, arrays)))
        applied = adam_step(names, grads, adam, cfg.clip_norm)
        if step % cfg.eval_every == 0 or not applied or step == n_steps - 1:
            rec = {"step": step, **loss.values(), "skipped": not applied,
                   "wall": round(time.perf_counter() - t0, 3)}
            records.append(rec)
            if log_file is not None:
                log_file.write(json.dumps(rec) + "\n")
                log_file.flush()
            log.info("step %d total %.5f", step, rec["total"])
        if on_step is not None:
            on_step(step)
    return TrainResult(params, adam, n_steps, records)


def eval_loss(params, tasks, loss_cfg, chunk=50):
    """Mean task loss (same reduction as training) over ``tasks``."""
    out = {"nll": 0.0, "evid_reg": 0.0, "kernel_reg": 0.0, "total": 0.0}
    for start in range(0, len(tasks), chunk):
        group = tasks[start:start + chunk]
        vals = batch_loss(params, group, loss_cfg, Tape()).values()
        for k in out:
            out[k] += vals[k] * len(group) / len(tasks)
    return out


# -- data streams --------------------------------------------------------------------

@dataclass
class Dataset:
    """Train and test task streams for one benchmark."""
    name: str
    shots: int
    train_images: np.ndarray = None
    test_images: np.ndarray = None

    def train_stream(self, seed, outlier=0.0):
        if self.name == MNIST:
            return ImageStream(self.train_images, self.shots, seed, train=True, outlier=outlier)
        return RegressionStream(self.name, self.shots, seed, train=True, outlier=outlier)

    def test_stream(self, seed=TEST_SEED, zeta=0.0):
        if self.name == MNIST:
            return ImageStream(self.test_images, self.shots, seed, train=False, zeta=zeta)
        return RegressionStream(self.name, self.shots, seed, train=False, zeta=zeta)

    def n_test(self, requested):
        if self.name == MNIST:
            return min(requested, len(self.test_images))
        return requested


def load_mnist_dir(path, max_train=None):
    """Train/test image arrays from a directory of IDX3 files."""
    root = Path(path)

    def find(prefix):
        for name in (f"{prefix}-images-idx3-ubyte", f"{prefix}-images.idx3-ubyte",
                     f"{prefix}-images-idx3-ubyte.gz"):
            if (root / name).exists():
                return root / name
        raise FileNotFoundError(f"no {prefix} IDX3 image file in {root}")
    train = load_mnist(find("train"))
    if max_train is not None:
        train = train[:max_train]
    return train, load_mnist(find("t10k"))


def train_model(dataset, head, cfg, outlier=0.0, model_overrides=None, log_file=None):
    params = build_model(model_config_for(dataset.name, head, **(model_overrides or {})), cfg.seed)
    return meta_train(params, dataset.train_stream(cfg.seed, outlier), cfg, log_file=log_file)


# -- CSV -------------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv(rows, columns=None):
    """CSV text with a header; columns default to first-seen key order."""
    if columns is None:
        columns = []
        for r in rows:
            for k in r:
                if k not in columns:
                    columns.append(k)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in columns])
    return buf.getvalue()


def write_csv(path, rows, columns=None):
    text = rows_to_csv(rows, columns)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return text


# -- experiments -----------------------------------------------------------------------

def run_headline(dataset, cfg, heads=("cnp", "ecnp"), seeds=(0,), n_test=2000, log_file=None,
                 models=None):
    """Train each head per seed on identical task streams; evaluate on one test set.

    Returns one row per (head, seed) with every MetricsReport field. Trained
    parameters are stored into ``models[(head, seed)]`` when a dict is given.
    """
    rows = []
    test = dataset.test_stream()
    test_tasks = [test.task(i) for i in range(dataset.n_test(n_test))]
    for seed in seeds:
        for head in heads:
            run = train_model(dataset, head, replace(cfg, seed=seed), log_file=log_file)
            if models is not None:
                models[(head, seed)] = run.params
            report = evaluate(run.params, test, len(test_tasks), tasks=test_tasks)
            rows.append({"dataset": dataset.name, "shots": dataset.shots, "head": head,
                         "seed": seed, **report.as_row()})
    return rows


def summarize(rows, key, by="head"):
    """Mean of ``key`` per group."""
    groups = {}
    for r in rows:
        groups.setdefault(r[by], []).append(r[key])
    return {g: float(np.mean(v)) for g, v in groups.items()}


def run_outlier_sweep(dataset, severities, cfg, heads=("cnp", "ecnp"), n_test=2000):
    """Train on tasks carrying one corrupted target each; evaluate on clean tasks."""
    rows = []
    test = dataset.test_stream()
    test_tasks = [test.task(i) for i in range(dataset.n_test(n_test))]
    for o in severities:
        for head in heads:
            run = train_model(dataset, head, cfg, outlier=o)
            report = evaluate(run.params, test, len(test_tasks), tasks=test_tasks)
            rows.append({"dataset": dataset.name, "severity": float(o), "head": head,
                         "seed": cfg.seed, "mse": report.mse, "ll": report.ll})
    return rows


def extrapolation_profile(params, dataset, n_tasks=100, grid=None, seed=TEST_SEED):
    """Mean EP and AL of an evidential model over a dense input grid.

    Contexts come from test tasks on the training range; the grid extends
    beyond it (default [-5, 10] for sinusoids).
    """
    if grid is None:
        lo, hi = (-5.0, 10.0) if dataset.name == SINUSOID else (-2.0, 4.0)
        grid = np.linspace(lo, hi, 301)
    grid = np.asarray(grid, float)
    stream = dataset.test_stream(seed)
    tasks = [stream.task(i) for i in range(n_tasks)]
    ep = np.zeros(len(grid))
    al = np.zeros(len(grid))
    for start in range(0, n_tasks, 25):
        group = tasks[start:start + 25]
        pred = forward_batch(params, group, Tape(), [grid[:, None]] * len(group))
        for a, b in pred.segments:
            u = evidential.decompose(pred.nig(slice(a, b)))
            ep += u.epistemic[:, 0] / n_tasks
            al += u.aleatoric[:, 0] / n_tasks
    return [{"x": float(x), "mean_ep": float(e), "mean_al": float(a)}
            for x, e, a in zip(grid, ep, al)]


def region_mean(profile, key, lo, hi):
    vals = [r[key] for r in profile if lo <= r["x"] <= hi]
    return float(np.mean(vals))


def noise_sweep(params, dataset, zetas, n_test=2000):
    """Mean predicted AL/EP and MSE on test tasks with noisy contexts."""
    rows = []
    for z in zetas:
        stream = dataset.test_stream(zeta=z)
        report = evaluate(params, stream, dataset.n_test(n_test))
        rows.append({"dataset": dataset.name, "zeta": float(z), "mse": report.mse,
                     "mean_al": report.mean_al, "mean_ep": report.mean_ep})
    return rows


def run_epal_analysis(params, dataset, zetas=(0.0, 0.25, 0.5, 1.0), n_test=2000,
                      n_profile_tasks=100):
    """Extrapolation profile plus noise sweep for a trained evidential model."""
    return {"profile": extrapolation_profile(params, dataset, n_profile_tasks),
            "noise": noise_sweep(params, dataset, zetas, n_test)}


def run_active_selection(params, task, budget, mode, rng, initial=10):
    """Grow a context set one pixel at a time; MSE over the image after each add.

    ``task`` is an image task; its context and target pixels together form
    the pool. Starts from ``initial`` random pixels. ``ep-greedy`` adds the
    pool pixel with the largest epistemic uncertainty, ``random`` a uniform
    one. Returns rows (n_added, mse).
    """
    X = np.concatenate([task.X_c, task.X_t])
    Y = np.concatenate([task.Y_c, task.Y_t])
    n = len(X)
    chosen = list(rng.choice(n, size=initial, replace=False))
    in_ctx = np.zeros(n, dtype=bool)
    in_ctx[chosen] = True
    rows = []
    for added in range(budget + 1):
        ctx = np.flatnonzero(in_ctx)
        t = Task(X[ctx], Y[ctx], X, Y)
        pred = forward_batch(params, [t], Tape())
        rows.append({"mode": mode, "n_added": added,
                     "mse": float(np.mean((pred.mean.value - Y) ** 2))})
        if added == budget:
            break
        pool = np.flatnonzero(~in_ctx)
        if mode == "ep-greedy":
            ep = evidential.decompose(pred.nig()).epistemic.sum(axis=1)
            pick = pool[np.argmax(ep[pool])]
        elif mode == "random":
            pick = int(rng.choice(pool))
        else:
            raise ValueError(f"unknown selection mode {mode!r}")
        in_ctx[pick] = True
    return rows


def run_lambda_ablation(dataset, which, grid, cfg, n_test=2000):
    """Train ECNP per value of lambda1 or lambda2 and report test trends."""
    if which not in ("lambda1", "lambda2"):
        raise ValueError("which must be 'lambda1' or 'lambda2'")
    rows = []
    test = dataset.test_stream()
    test_tasks = [test.task(i) for i in range(dataset.n_test(n_test))]
    for lam in grid:
        loss = replace(cfg.loss, **{which: float(lam)})
        run = train_model(dataset, "ecnp", replace(cfg, loss=loss))
        report = evaluate(run.params, test, len(test_tasks), tasks=test_tasks)
        tl = eval_loss(run.params, test_tasks, loss)
        rows.append({"dataset": dataset.name, which: float(lam), "test_loss": tl["total"],
                     "test_nll": tl["nll"], "mse": report.mse, "mean_ep": report.mean_ep,
                     "mean_al": report.mean_al, "mean_evidence": report.mean_evidence,
                     "inclusion@1": report.inclusion[1.0],
                     "unc_increase": report.unc_increase})
    return rows


def run_evidence_trends(params, task, context_counts, rng):
    """Evidential parameter means as nested context subsets grow.

    The pool is every point of ``task``; context sets are prefixes of one
    random permutation, so smaller sets are subsets of larger ones. Metrics
    are computed on the whole pool.
    """
    X = np.concatenate([task.X_c, task.X_t])
    Y = np.concatenate([task.Y_c, task.Y_t])
    order = rng.permutation(len(X))
    rows = []
    for n in sorted(context_counts):
        ctx = order[:n]
        pred = forward_batch(params, [Task(X[ctx], Y[ctx], X, Y)], Tape())
        p = pred.nig()
        u = evidential.decompose(p)
        rows.append({"n_context": int(n), "mean_alpha": float(np.mean(p.alpha)),
                     "mean_v": float(np.mean(p.v)), "mean_beta": float(np.mean(p.beta)),
                     "mse": float(np.mean((p.gamma - Y) ** 2)),
                     "evidence": float(np.mean(u.evidence)),
                     "mean_ep": float(np.mean(u.epistemic)),
                     "mean_al": float(np.mean(u.aleatoric))})
    return rows


# -- checkpoints ------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"ECNPCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    params: ModelParams
    adam: AdamState
    step: int
    seed: int
    extra: dict = field(default_factory=dict)


def _checksum(data):
    return struct.unpack("<Q", hashlib.blake2b(data, digest_size=8).digest())[0]


def checkpoint_bytes(ckpt):
    header = {
        "model": ckpt.params.config.to_dict(),
        "step": ckpt.step,
        "seed": ckpt.seed,
        "adam": {"lr": ckpt.adam.lr, "beta1": ckpt.adam.beta1, "beta2": ckpt.adam.beta2,
                 "eps": ckpt.adam.eps, "t": ckpt.adam.t},
        "extra": ckpt.extra,
    }
    arrays = {}
    for name, a in ckpt.params.named_parameters().items():
        arrays[f"param/{name}"] = a
    for name in sorted(ckpt.adam.m):
        arrays[f"adam.m/{name}"] = ckpt.adam.m[name]
        arrays[f"adam.v/{name}"] = ckpt.adam.v[name]
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<I", CHECKPOINT_VERSION)
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    out += struct.pack("<Q", len(text)) + text
    out += struct.pack("<I", len(arrays))
    for name, a in arrays.items():
        key = name.encode("utf-8")
        a = np.ascontiguousarray(a, dtype="<f8")
        out += struct.pack("<I", len(key)) + key
        out += struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
        out += a.tobytes()
    out += struct.pack("<Q", _checksum(bytes(out)))
    return bytes(out)


def save_checkpoint(path, ckpt):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(ckpt))


def parse_checkpoint(data):
    if len(data) < len(CHECKPOINT_MAGIC) + 12 or not data.startswith(CHECKPOINT_MAGIC):
        raise CorruptFile("not an ECNP checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    (version,) = struct.unpack_from("<I", data, pos)
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    pos += 4
    (stored,) = struct.unpack("<Q", data[-8:])
    if _checksum(data[:-8]) != stored:
        raise CorruptFile("checkpoint checksum mismatch")
    (n,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    header = json.loads(data[pos:pos + n].decode("utf-8"))
    pos += n
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + klen].decode("utf-8")
        pos += klen
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) * 8
        arrays[name] = np.frombuffer(data[pos:pos + size], dtype="<f8").reshape(shape).astype(np.float64)
        pos += size
    if pos != len(data) - 8:
        raise CorruptFile("trailing bytes in checkpoint")
    params = ModelParams(ModelConfig(**header["model"]))
    for name, a in params.named_parameters().items():
        a[...] = arrays[f"param/{name}"]
    ah = header["adam"]
    adam = AdamState(lr=ah["lr"], beta1=ah["beta1"], beta2=ah["beta2"], eps=ah["eps"], t=ah["t"])
    for key, a in arrays.items():
        kind, _, name = key.partition("/")
        if kind == "adam.m":
            adam.m[name] = a
        elif kind == "adam.v":
            adam.v[name] = a
    return Checkpoint(params, adam, header["step"], header["seed"], header.get("extra", {}))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        return parse_checkpoint(data)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError, ValueError) as exc:
        if isinstance(exc, (CorruptFile, VersionMismatch)):
            raise
        raise CorruptFile(f"unreadable checkpoint: {exc}") from exc
