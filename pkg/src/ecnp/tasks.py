"""Few-shot task generation: sinusoids, GP samples and image completion.

Randomness comes from Philox (a counter-based generator) keyed by
``(seed, stream, index)``. A task is therefore a pure function of its seed
and its index in the stream, independent of how batches are scheduled.
"""
import gzip
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BadMagic, CholeskyFailure, KTooLarge, TruncatedFile

SINUSOID = "sinusoid"
GP = "gp"
MNIST = "mnist"

# stream ids keep train / test / corruption draws disjoint
TRAIN_STREAM = 0
TEST_STREAM = 1
OUTLIER_STREAM = 2
NOISE_STREAM = 3
EPOCH_STREAM = 4
SPLIT_STREAM = 5

IDX_IMAGES_MAGIC = 0x00000803

GP_LENGTH_SCALE = 0.6
GP_VARIANCE = 1.0


def task_rng(seed, stream, index=0):
    """Independent Philox generator for one (seed, stream, index) triple."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(stream), int(index)])
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class Task:
    X_c: np.ndarray
    Y_c: np.ndarray
    X_t: np.ndarray
    Y_t: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.X_c) < 1 or len(self.X_t) < 1:
            raise ValueError("a task needs at least one context and one target point")
        if len(self.X_c) != len(self.Y_c) or len(self.X_t) != len(self.Y_t):
            raise ValueError("inputs and outputs disagree in length")
        if self.X_c.shape[1] != self.X_t.shape[1] or self.Y_c.shape[1] != self.Y_t.shape[1]:
            raise ValueError("context and target dimensions disagree")

    @property
    def x_dim(self):
        return self.X_c.shape[1]

    @property
    def y_dim(self):
        return self.Y_c.shape[1]

    def equals(self, other):
        return all(np.array_equal(getattr(self, k), getattr(other, k))
                   for k in ("X_c", "Y_c", "X_t", "Y_t"))


@dataclass(frozen=True)
class TaskGenConfig:
    generator: str = SINUSOID
    shots: int = 5
    seed: int = 0
    train: bool = True
    n_test_targets: int = 400

    def __post_init__(self):
        if self.shots < 1:
            raise ValueError("shots must be >= 1")


def _n_extra(rng, k):
    # u ~ integer-uniform on {3..K}; K < 3 degenerates to u = 3
    return int(rng.integers(3, k + 1)) if k >= 3 else 3


def _assemble(x, y, k, train, meta):
    """Context = first K points. Training targets reuse them plus the rest."""
    meta = dict(meta, n_shared=k if train else 0)
    X_c, Y_c = x[:k], y[:k]
    if train:
        return Task(X_c, Y_c, x.copy(), y.copy(), meta)
    return Task(X_c, Y_c, x[k:], y[k:], meta)


def _n_points(cfg, rng):
    k = cfg.shots
    return k + (_n_extra(rng, k) if cfg.train else cfg.n_test_targets)


def gen_sinusoid(cfg, index=0, amplitude=None, phase=None, x=None):
    """y = A sin(x + phi) with A ~ U[0.1, 5], phi ~ U[0, pi], x ~ U[-5, 5]."""
    rng = task_rng(cfg.seed, TRAIN_STREAM if cfg.train else TEST_STREAM, index)
    a = rng.uniform(0.1, 5.0) if amplitude is None else float(amplitude)
    phi = rng.uniform(0.0, np.pi) if phase is None else float(phase)
    n = _n_points(cfg, rng)
    xs = rng.uniform(-5.0, 5.0, size=(n, 1)) if x is None else np.asarray(x, float).reshape(-1, 1)
    meta = {"generator": SINUSOID, "seed": cfg.seed, "index": index,
            "amplitude": a, "phase": phi}
    return _assemble(xs, a * np.sin(xs + phi), cfg.shots, cfg.train, meta)


def se_kernel(xa, xb, length_scale=GP_LENGTH_SCALE, variance=GP_VARIANCE):
    d = np.asarray(xa, float).reshape(-1, 1) - np.asarray(xb, float).reshape(1, -1)
    return variance * np.exp(-0.5 * d * d / length_scale ** 2)


def _cholesky(K):
    jitter = 1e-6
    while jitter <= 1e-2 * (1 + 1e-9):
        try:
            return np.linalg.cholesky(K + jitter * np.eye(len(K)))
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise CholeskyFailure("covariance not positive definite with jitter up to 1e-2")


def gen_gp(cfg, index=0):
    """Joint draw from a zero-mean GP with an SE kernel on x ~ U[-2, 2]."""
    rng = task_rng(cfg.seed, TRAIN_STREAM if cfg.train else TEST_STREAM, index)
    n = _n_points(cfg, rng)
    x = rng.uniform(-2.0, 2.0, size=(n, 1))
    L = _cholesky(se_kernel(x, x))
    y = L @ rng.standard_normal((n, 1))
    meta = {"generator": GP, "seed": cfg.seed, "index": index}
    return _assemble(x, y, cfg.shots, cfg.train, meta)


def pixel_coordinates(height, width):
    """(row / (H-1), col / (W-1)) for every pixel in row-major order."""
    r, c = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return np.stack([r.ravel() / (height - 1), c.ravel() / (width - 1)], axis=1)


def gen_image_task(image, k, rng):
    """K random pixels as context; every other pixel is a target."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    values = image.reshape(h * w, -1)
    if k >= h * w:
        raise KTooLarge(f"K={k} must be below the {h * w} pixels of the image")
    coords = pixel_coordinates(h, w)
    perm = rng.permutation(h * w)
    ctx, tgt = np.sort(perm[:k]), np.sort(perm[k:])
    return Task(coords[ctx], values[ctx], coords[tgt], values[tgt],
                {"generator": MNIST, "context_index": ctx, "target_index": tgt,
                 "n_shared": 0, "shape": (h, w)})


# -- MNIST IDX ---------------------------------------------------------------------

def _open(path):
    path = str(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def load_mnist(path):
    """Images from an IDX3 file as float arrays (n, rows, cols) in [0, 1]."""
    with _open(path) as fh:
        data = fh.read()
    if len(data) < 16:
        raise TruncatedFile(f"{path}: header too short")
    magic, n, rows, cols = struct.unpack(">IIII", data[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise BadMagic(f"{path}: magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")
    need = n * rows * cols
    if len(data) - 16 < need:
        raise TruncatedFile(f"{path}: {len(data) - 16} pixel bytes, expected {need}")
    pixels = np.frombuffer(data, dtype=np.uint8, count=need, offset=16)
    return pixels.reshape(n, rows, cols).astype(np.float64) / 255.0


def write_idx_images(path, images):
    """Write uint8 images (n, rows, cols) in IDX3 format."""
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = np.clip(np.rint(images), 0, 255).astype(np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())


# -- corruption --------------------------------------------------------------------

def inject_outlier(task, severity, rng):
    """Add ``severity`` to the output of one target that is not a context point."""
    if severity == 0:
        return task
    shared = task.meta.get("n_shared", 0)
    candidates = np.arange(shared, len(task.X_t))
    if candidates.size == 0:
        raise ValueError("no target point outside the context to corrupt")
    i = int(rng.choice(candidates))
    Y_t = task.Y_t.copy()
    Y_t[i] += severity
    return replace(task, Y_t=Y_t, meta=dict(task.meta, outlier_index=i, severity=severity))


def noisy_context(task, zeta, rng):
    """Add zeta * N(0, 1) noise to every context output."""
    if zeta == 0:
        return task
    Y_c = task.Y_c + zeta * rng.standard_normal(task.Y_c.shape)
    return replace(task, Y_c=Y_c, meta=dict(task.meta, zeta=zeta))


# -- task streams ------------------------------------------------------------------

class RegressionStream:
    """Indexed source of sinusoid or GP tasks.

    ``outlier`` corrupts every task with :func:`inject_outlier`; ``zeta``
    adds context noise. Both draw from their own streams.
    """

    def __init__(self, generator, shots, seed, train=True, outlier=0.0, zeta=0.0,
                 n_test_targets=400):
        if generator not in (SINUSOID, GP):
            raise ValueError(f"unknown regression generator {generator!r}")
        self.cfg = TaskGenConfig(generator, shots, seed, train, n_test_targets)
        self.outlier = outlier
        self.zeta = zeta
        self._gen = gen_sinusoid if generator == SINUSOID else gen_gp

    x_range = property(lambda self: (-5.0, 5.0) if self.cfg.generator == SINUSOID else (-2.0, 2.0))

    def task(self, index):
        t = self._gen(self.cfg, index)
        if self.outlier:
            t = inject_outlier(t, self.outlier, task_rng(self.cfg.seed, OUTLIER_STREAM, index))
        if self.zeta:
            t = noisy_context(t, self.zeta, task_rng(self.cfg.seed, NOISE_STREAM, index))
        return t

    def batch(self, step, size):
        return [self.task(step * size + j) for j in range(size)]

    def steps_per_epoch(self, size):
        return None


class ImageStream:
    """Image-completion tasks over a fixed image array.

    In training mode step ``s`` reads the ``s``-th batch of a per-epoch
    shuffle; in test mode task ``i`` uses image ``i``.
    """

    def __init__(self, images, shots, seed, train=True, outlier=0.0, zeta=0.0):
        self.images = images
        self.shots = shots
        self.seed = seed
        self.train = train
        self.outlier = outlier
        self.zeta = zeta
        self._perm = {}

    def __len__(self):
        return len(self.images)

    def _task_for(self, image_index, index):
        stream = TRAIN_STREAM if self.train else TEST_STREAM
        t = gen_image_task(self.images[image_index], self.shots, task_rng(self.seed, stream, index))
        t.meta["image_index"] = int(image_index)
        if self.outlier:
            t = inject_outlier(t, self.outlier, task_rng(self.seed, OUTLIER_STREAM, index))
        if self.zeta:
            t = noisy_context(t, self.zeta, task_rng(self.seed, NOISE_STREAM, index))
        return t

    def task(self, index):
        return self._task_for(index % len(self.images), index)

    def steps_per_epoch(self, size):
        return -(-len(self.images) // size)

    def batch(self, step, size):
        per_epoch = self.steps_per_epoch(size)
        epoch, pos = divmod(step, per_epoch)
        perm = self._perm.get(epoch)
        if perm is None:
            self._perm = {epoch: task_rng(self.seed, EPOCH_STREAM, epoch).permutation(len(self.images))}
            perm = self._perm[epoch]
        chosen = perm[pos * size:(pos + 1) * size]
        return [self._task_for(i, step * size + j) for j, i in enumerate(chosen)]
