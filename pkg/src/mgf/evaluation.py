"""Sample-quality metrics and the few-shot adaptation benchmark."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from mgf.autodiff import ParamVector, make_optimizer, optimizer_step, softmax_cross_entropy
from mgf.errors import MetricError, MGFError
from mgf.meta import adapt
from mgf.models import GanPair, MLPSpec, Network, build_pair, generate, init_params, sample_latent
from mgf.tasks import Domain, Task, TaskPartition, draw_k

log = logging.getLogger(__name__)

EVAL_SAMPLES = 256
REPORT_COLUMNS = ("model", "sharpness", "diversity", "mmd", "epochs", "meta_train_minutes", "shots")


# -- image metrics ---------------------------------------------------------------


def _as_images(samples, side: int | None = None) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 2:
        side = side or math.isqrt(x.shape[1])
        if side * side != x.shape[1] or side < 3:
            raise MetricError(f"samples of width {x.shape[1]} are not square images")
        x = x.reshape(len(x), side, side)
    if x.ndim != 3 or min(x.shape[1:]) < 3:
        raise MetricError(f"expected a batch of images, got shape {x.shape}")
    return x


def sharpness(samples) -> float:
    """Mean absolute 4-neighbour Laplacian over interior pixels, divided by 8.

    A constant image scores 0 and a +/-1 checkerboard scores 1.
    """
    x = _as_images(samples)
    c = x[:, 1:-1, 1:-1]
    # summed differences keep a constant image at exactly 0
    lap = (c - x[:, :-2, 1:-1]) + (c - x[:, 2:, 1:-1]) + (c - x[:, 1:-1, :-2]) + (c - x[:, 1:-1, 2:])
    per_image = np.abs(lap).mean(axis=(1, 2)) / 8.0
    return float(np.clip(per_image.mean(), 0.0, 1.0))


def box_blur(samples) -> np.ndarray:
    """3x3 box filter with edge replication, same shape as the input."""
    x = _as_images(samples)
    p = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="edge")
    h, w = x.shape[1:]
    out = sum(p[:, i : i + h, j : j + w] for i in range(3) for j in range(3)) / 9.0
    return out.reshape(np.shape(samples))


def entropy_diversity(probs) -> float:
    """exp(entropy) of the mean class distribution; in [1, n_classes]."""
    p = np.asarray(probs, dtype=np.float64).mean(axis=0)
    p = p[p > 0]
    return float(np.exp(-(p * np.log(p)).sum()))


def diversity(samples, clf: ReferenceClassifier) -> float:
    return entropy_diversity(clf.predict_proba(samples))


# -- distribution distance -------------------------------------------------------------


def median_bandwidth(x, y) -> float:
    z = np.concatenate([np.asarray(x, float), np.asarray(y, float)])
    d2 = ((z[:, None, :] - z[None, :, :]) ** 2).sum(-1)
    iu = np.triu_indices(len(z), k=1)
    med = float(np.median(np.sqrt(d2[iu])))
    return med if med > 0 else 1.0


def mmd(x, y, bandwidth: float | None = None) -> float:
    """Unbiased squared MMD with kernel exp(-|a-b|^2 / (2 bandwidth^2)).

    Equal-sized sets use the paired U-statistic, which also drops the i == j
    cross terms, so ``mmd(x, x)`` is exactly 0.  ``bandwidth=None`` uses the
    median pairwise distance of the pooled sample.
    """
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise MetricError(f"mmd: dimensionality mismatch {x.shape} vs {y.shape}")
    # fixed argument order makes the estimate bitwise symmetric
    if (len(y), y.tobytes()) < (len(x), x.tobytes()):
        x, y = y, x
    m, n = len(x), len(y)
    if m < 2 or n < 2:
        raise MetricError("mmd: the unbiased estimator needs at least 2 samples per set")
    bw = median_bandwidth(x, y) if bandwidth is None else float(bandwidth)

    def k(a, b):
        d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2 * a @ b.T
        return np.exp(-np.maximum(d2, 0.0) / (2 * bw * bw))

    kxx, kyy, kxy = k(x, x), k(y, y), k(x, y)
    a = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    b = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    c = (kxy.sum() - np.trace(kxy)) / (m * (m - 1)) if m == n else kxy.sum() / (m * n)
    return float((a + b) - 2 * c)


# -- reference classifier ----------------------------------------------------------------


def _shift(images: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.full_like(images, -1.0)
    h, w = images.shape[1:]
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[:, yd, xd] = images[:, ys, xs]
    return out


@dataclass
class ReferenceClassifier:
    """Small MLP over flattened images, trained once and then frozen."""

    spec: MLPSpec
    params: ParamVector
    seed: int
    test_accuracy: float = float("nan")

    @property
    def n_classes(self) -> int:
        return self.spec.widths[-1]

    def logits(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.spec.widths[0]:
            raise MetricError(f"classifier expects (n, {self.spec.widths[0]}) inputs, got {x.shape}")
        return Network(self.spec, self.params).apply(x)

    def predict_proba(self, x) -> np.ndarray:
        z = self.logits(x)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def accuracy(self, x, y) -> float:
        return float((self.logits(x).argmax(axis=1) == np.asarray(y)).mean())

    @classmethod
    def fit(cls, domains: Sequence[Domain], seed: int = 0, hidden: int = 256, epochs: int = 15,
            batch: int = 64, lr: float = 1e-3, test_fraction: float = 0.2) -> ReferenceClassifier:
        """Train on a stratified split of ``domains`` with +/-1 pixel shift augmentation."""
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7919]))
        x = np.concatenate([d.samples for d in domains])
        y = np.concatenate([np.full(len(d), d.cls.label) for d in domains])
        n_classes = int(y.max()) + 1
        test_idx = []
        for label in np.unique(y):
            idx = np.flatnonzero(y == label)
            test_idx.extend(rng.choice(idx, size=max(1, int(round(test_fraction * len(idx)))), replace=False))
        test_mask = np.zeros(len(y), bool)
        test_mask[test_idx] = True
        x_tr, y_tr, x_te, y_te = x[~test_mask], y[~test_mask], x[test_mask], y[test_mask]
        side = math.isqrt(x.shape[1])
        if side * side == x.shape[1]:
            imgs = x_tr.reshape(-1, side, side)
            shifted = [imgs] + [_shift(imgs, dy, dx) for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1))]
            x_tr = np.concatenate(shifted).reshape(-1, x.shape[1])
            y_tr = np.tile(y_tr, len(shifted))
        spec = MLPSpec((x.shape[1], hidden, n_classes), "relu", "identity")
        params = init_params(spec, rng)
        net = Network(spec, params)
        opt = make_optimizer("adam", lr)
        for _ in range(epochs):
            order = rng.permutation(len(x_tr))
            for start in range(0, len(order), batch):
                idx = order[start : start + batch]
                bound = net.bind()
                loss = softmax_cross_entropy(bound(x_tr[idx]), y_tr[idx])
                optimizer_step(opt, params, bound.gradient(loss))
        clf = cls(spec, params, seed)
        clf.test_accuracy = clf.accuracy(x_te, y_te) if len(x_te) else float("nan")
        return clf


# -- benchmark ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    model: str
    sharpness: float | None
    diversity: float | None
    mmd: float | None
    epochs: int
    meta_train_minutes: float
    shots: int
    class_probs: np.ndarray | None = field(default=None, repr=False)
    mmd_bandwidth: float | None = None
    error: str | None = None

    def row(self) -> list[str]:
        def fmt(v):
            return "NA" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}"

        return [self.model, fmt(self.sharpness), fmt(self.diversity), fmt(self.mmd), str(self.epochs),
                f"{self.meta_train_minutes:.4f}", str(self.shots)]


@dataclass
class BenchmarkConfig:
    shots: int = 4
    steps: int = 200
    lr: float = 0.01
    optimizer: str = "sgd"
    critic_steps: int = 1
    samples: int = EVAL_SAMPLES
    gen_lr: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    decay: bool = False

    def train_kw(self) -> dict:
        return {"gen_lr": self.gen_lr, "betas": (self.beta1, self.beta2), "decay": self.decay}


def score_samples(samples, task: Task, clf: ReferenceClassifier | None, image: bool):
    """(sharpness, diversity, mmd, bandwidth, mean class probabilities) for one sample set."""
    if image:
        probs = clf.predict_proba(samples) if clf is not None else None
        div = entropy_diversity(probs) if probs is not None else None
        return sharpness(samples), div, None, None, probs.mean(axis=0) if probs is not None else None
    target = task.pool()[0]
    bw = median_bandwidth(samples, target)
    return None, None, mmd(samples, target, bw), bw, None


def _pair_samples(pair: GanPair, n: int, rng) -> np.ndarray:
    return generate(pair.generator, sample_latent(rng, n, pair.generator.latent_dim))


def scratch_pair_like(pair: GanPair, rng: np.random.Generator) -> GanPair:
    g, d = pair.generator.spec, pair.discriminator.spec
    return build_pair(g.widths[-1], pair.loss, pair.discriminator.n_classes, g.widths[0],
                      g.widths[1:-1], d.widths[1:-1], rng)


def adaptation_benchmark(pair: GanPair, partition: TaskPartition, cfg: BenchmarkConfig, seed: int = 0,
                         clf: ReferenceClassifier | None = None, image: bool = False, epochs: int = 0,
                         meta_train_minutes: float = 0.0) -> list[MetricsReport]:
    """Adapted vs. unadapted vs. from-scratch, averaged over the meta-test tasks.

    All three models are scored on ``cfg.samples`` draws from a shared latent
    stream; the adapted and scratch models see the same K shots.
    """
    per_model: dict[str, list] = {"adapted": [], "unadapted": [], "scratch": []}
    errors: dict[str, str] = {}
    for t_i, task in enumerate(partition.test_tasks):
        rng = lambda *tag: np.random.default_rng(np.random.SeedSequence([seed, 31337, t_i, *tag]))  # noqa: E731
        try:
            shots = draw_k(task, cfg.shots, rng(0))
            models = {
                "adapted": adapt(pair, task, cfg.shots, cfg.steps, cfg.lr, rng(1), cfg.optimizer, cfg.critic_steps,
                                 shots, **cfg.train_kw()),
                "unadapted": pair,
                "scratch": adapt(scratch_pair_like(pair, rng(2)), task, cfg.shots, cfg.steps, cfg.lr, rng(1),
                                 cfg.optimizer, cfg.critic_steps, shots, **cfg.train_kw()),
            }
            for name, model in models.items():
                per_model[name].append(score_samples(_pair_samples(model, cfg.samples, rng(3)), task, clf, image))
        except MGFError as e:
            log.warning("adaptation failed on test task %s: %s", task.describe(), e)
            errors[task.describe()] = str(e)
    reports = []
    for name, scores in per_model.items():
        def avg(i):
            vals = [s[i] for s in scores if s[i] is not None]
            return float(np.mean(vals)) if vals else None

        probs = [s[4] for s in scores if s[4] is not None]
        reports.append(MetricsReport(
            model=name, sharpness=avg(0), diversity=avg(1), mmd=avg(2), epochs=epochs,
            meta_train_minutes=meta_train_minutes, shots=cfg.shots,
            class_probs=np.mean(probs, axis=0) if probs else None, mmd_bandwidth=avg(3),
            error="; ".join(f"{k}: {v}" for k, v in errors.items()) or None,
        ))
    return reports


def report_csv(reports: Sequence[MetricsReport]) -> str:
    lines = [",".join(REPORT_COLUMNS)] + [",".join(r.row()) for r in reports]
    return "\n".join(lines) + "\n"


def report_table(reports: Sequence[MetricsReport]) -> str:
    rows = [list(REPORT_COLUMNS)] + [r.row() for r in reports]
    widths = [max(len(r[i]) for r in rows) for i in range(len(REPORT_COLUMNS))]
    out = []
    for j, r in enumerate(rows):
        out.append("  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths))))
        if j == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out) + "\n"
