"""Meta-training for GAN pairs: MAML-style and Reptile-style inner loops, the
shared outer loop, and few-shot adaptation.

Both inner loops work on clones and hand back a pair of meta-"gradients"
(one per network); the outer loop applies them to the live pair with rate
``outer_lr``.  Nothing here knows which architecture or loss family is
plugged in beyond the ``GanPair`` interface.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from mgf.autodiff import OptimizerState, ParamVector, Tensor, make_optimizer, optimizer_step, param_sub
from mgf.errors import ConfigError, NumericOverflowError, StructureError, TaskError
from mgf.models import (
    Discriminator,
    GanPair,
    Generator,
    class_target,
    generate,
    loss_discriminator,
    loss_generator,
    sample_latent,
)
from mgf.tasks import Task, TaskPartition, draw_k

log = logging.getLogger(__name__)

ALGORITHMS = ("maml", "reptile")
OUTER_MODES = ("sequential", "averaged")


@dataclass
class MetaConfig:
    algorithm: str = "reptile"
    inner_lr: float = 0.01
    outer_lr: float = 0.1
    inner_steps: int = 1
    shots: int = 4
    task_batch: int = 4
    outer_mode: str = "sequential"
    # real samples per inner step; each of the K inner iterations sees one minibatch
    inner_batch: int = 1
    gen_first: bool = False
    inner_optimizer: str = "sgd"
    outer_optimizer: str = "sgd"
    clip: float | None = None
    # generator inner rate; None means inner_lr (a slower generator damps GAN orbiting)
    inner_gen_lr: float | None = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999

    @property
    def gen_lr(self) -> float:
        return self.inner_lr if self.inner_gen_lr is None else self.inner_gen_lr

    @property
    def betas(self) -> tuple[float, float]:
        return self.adam_beta1, self.adam_beta2

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown meta algorithm {self.algorithm!r}")
        if self.outer_mode not in OUTER_MODES:
            raise ConfigError(f"unknown outer mode {self.outer_mode!r}")
        if self.inner_lr < 0 or self.outer_lr < 0 or (self.inner_gen_lr is not None and self.inner_gen_lr < 0):
            raise ConfigError("learning rates must be non-negative")
        if self.inner_steps < 0:
            raise ConfigError("inner_steps must be >= 0")
        if self.shots < 1 or self.task_batch < 1 or self.inner_batch < 1:
            raise ConfigError("shots, task_batch and inner_batch must be >= 1")
        if self.clip is not None and self.clip <= 0:
            raise ConfigError("clip must be positive when set")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")


@dataclass
class InnerLoopResult:
    grad_d: ParamVector
    grad_g: ParamVector
    # (inner_step, loss_d, loss_g); NaN where a step has no loss of that kind
    diagnostics: list[tuple[int, float, float]] = field(default_factory=list)
    # Reptile only: the adapted clones, so the outer rule can be applied as an
    # exact interpolation between live and adapted parameters
    adapted_d: ParamVector | None = None
    adapted_g: ParamVector | None = None


@dataclass
class ClonePair:
    gen_clone: Generator
    disc_clone: Discriminator
    dev_disc_clone: Discriminator | None = None


@dataclass
class TrainingLog:
    records: list[dict] = field(default_factory=list)
    epochs: int = 0
    wall_seconds: float = 0.0

    @property
    def meta_train_minutes(self) -> float:
        return self.wall_seconds / 60.0


# -- single steps ----------------------------------------------------------------


class _Stepper:
    """One network plus its inner optimizer; applies plain or Adam steps."""

    def __init__(self, net, kind: str, lr: float, clip: float | None, betas=(0.9, 0.999)):
        self.net = net
        self.clip = clip
        self.opt: OptimizerState | None = (make_optimizer(kind, lr, beta1=betas[0], beta2=betas[1])
                                           if lr > 0 else None)

    def step(self, g: ParamVector) -> None:
        if self.clip is not None:
            norm = float(np.linalg.norm(g.values))
            if norm > self.clip:
                g = ParamVector(g.segments, g.values * (self.clip / norm))
        if self.opt is not None:
            optimizer_step(self.opt, self.net.params, g)


def discriminator_grad(pair_loss, disc: Discriminator, x_real, y_real, x_fake, rng) -> tuple[float, ParamVector]:
    bound = disc.bind()
    loss = loss_discriminator(pair_loss, bound, x_real, x_fake, rng, labels=y_real)
    return loss.item(), bound.gradient(loss)


def generator_grad(pair_loss, gen: Generator, disc: Discriminator, z, target) -> tuple[float, ParamVector]:
    gb = gen.bind()
    loss = loss_generator(pair_loss, disc.bind(trainable=False), gb(Tensor(z)), target)
    return loss.item(), gb.gradient(loss)


def _target(pair: GanPair, task: Task):
    if pair.discriminator.head != "class_aware":
        return None
    return class_target(task.labels, pair.discriminator.n_classes)


def _overflow(where: str, step: int, exc: Exception) -> NumericOverflowError:
    return NumericOverflowError(f"{exc} during {where}, inner step {step}")


# -- inner loops -------------------------------------------------------------------


def split_train_dev(samples, k: int, rng: np.random.Generator, labels=None):
    """Two disjoint K-sized draws without replacement from ``samples``.

    Returns ``(train, dev)`` or, with labels, ``((x_train, y_train), (x_dev, y_dev))``.
    """
    samples = np.asarray(samples)
    n = len(samples)
    if n < 2 * k:
        raise TaskError(f"train/dev split needs {2 * k} samples, only {n} available")
    idx = rng.permutation(n)
    tr, dv = idx[:k], idx[k : 2 * k]
    if labels is None:
        return samples[tr], samples[dv]
    labels = np.asarray(labels)
    return (samples[tr], labels[tr]), (samples[dv], labels[dv])


def inner_loop_maml(task: Task, pair: GanPair, cfg: MetaConfig, rng: np.random.Generator) -> InnerLoopResult:
    """First-order MAML inner loop with a dev-trained discriminator scoring the generator.

    Order of work (fakes always come from the generator clone):
      1. L discriminator steps on the train split;
      2. dev-loss gradient of the discriminator at the adapted clones;
      3. a second discriminator cloned from the live one, trained L steps on dev;
      4. L generator steps against the train-adapted discriminator;
      5. generator-loss gradient at the adapted generator, scored by the
         dev-trained discriminator.
    ``gen_first`` swaps 3 and 4.
    """
    k, L, lr = cfg.shots, cfg.inner_steps, cfg.inner_lr
    x, y = task.pool()
    (x_tr, y_tr), (x_dev, y_dev) = split_train_dev(x, k, rng, y)
    d_in, loss_cfg = pair.generator.latent_dim, pair.loss
    target = _target(pair, task)
    clones = ClonePair(pair.generator.clone(), pair.discriminator.clone())
    d_hat = _Stepper(clones.disc_clone, cfg.inner_optimizer, lr, cfg.clip, cfg.betas)
    g_hat = _Stepper(clones.gen_clone, cfg.inner_optimizer, cfg.gen_lr, cfg.clip, cfg.betas)
    diag: list[tuple[int, float, float]] = []
    try:
        for i in range(L):
            fake = generate(clones.gen_clone, sample_latent(rng, k, d_in))
            ld, g = discriminator_grad(loss_cfg, clones.disc_clone, x_tr, y_tr, fake, rng)
            d_hat.step(g)
            diag.append((i, ld, float("nan")))
    except NumericOverflowError as e:
        raise _overflow("discriminator train steps", i, e) from e
    fake = generate(clones.gen_clone, sample_latent(rng, k, d_in))
    _, grad_d = discriminator_grad(loss_cfg, clones.disc_clone, x_dev, y_dev, fake, rng)

    def dev_discriminator():
        clones.dev_disc_clone = pair.discriminator.clone()
        d_dev = _Stepper(clones.dev_disc_clone, cfg.inner_optimizer, lr, cfg.clip, cfg.betas)
        try:
            for i in range(L):
                fake = generate(clones.gen_clone, sample_latent(rng, k, d_in))
                _, g = discriminator_grad(loss_cfg, clones.dev_disc_clone, x_dev, y_dev, fake, rng)
                d_dev.step(g)
        except NumericOverflowError as e:
            raise _overflow("dev discriminator steps", i, e) from e

    def generator_steps():
        try:
            for i in range(L):
                lg, g = generator_grad(loss_cfg, clones.gen_clone, clones.disc_clone, sample_latent(rng, k, d_in), target)
                g_hat.step(g)
                diag[i] = (i, diag[i][1], lg)
        except NumericOverflowError as e:
            raise _overflow("generator steps", i, e) from e

    if cfg.gen_first:
        generator_steps()
        dev_discriminator()
    else:
        dev_discriminator()
        generator_steps()
    _, grad_g = generator_grad(loss_cfg, clones.gen_clone, clones.dev_disc_clone, sample_latent(rng, k, d_in), target)
    return InnerLoopResult(grad_d, grad_g, diag)


def inner_loop_reptile(task: Task, pair: GanPair, cfg: MetaConfig, rng: np.random.Generator) -> InnerLoopResult:
    """L sweeps over the K drawn minibatches, alternating one discriminator and
    one generator step per minibatch; returns (live - adapted) for each net."""
    k, b, lr = cfg.shots, cfg.inner_batch, cfg.inner_lr
    d_in, loss_cfg = pair.generator.latent_dim, pair.loss
    x, y = draw_k(task, k * b, rng)
    target = _target(pair, task)
    clones = ClonePair(pair.generator.clone(), pair.discriminator.clone())
    d_hat = _Stepper(clones.disc_clone, cfg.inner_optimizer, lr, cfg.clip, cfg.betas)
    g_hat = _Stepper(clones.gen_clone, cfg.inner_optimizer, cfg.gen_lr, cfg.clip, cfg.betas)
    diag = []
    step = 0
    try:
        for _ in range(cfg.inner_steps):
            for j in range(k):
                xk, yk = x[j * b : (j + 1) * b], y[j * b : (j + 1) * b]
                z = sample_latent(rng, b, d_in)
                fake = generate(clones.gen_clone, z)
                ld, g = discriminator_grad(loss_cfg, clones.disc_clone, xk, yk, fake, rng)
                d_hat.step(g)
                lg, g = generator_grad(loss_cfg, clones.gen_clone, clones.disc_clone, z, target)
                g_hat.step(g)
                diag.append((step, ld, lg))
                step += 1
    except NumericOverflowError as e:
        raise _overflow("reptile inner loop", step, e) from e
    return InnerLoopResult(
        param_sub(pair.discriminator.params, clones.disc_clone.params),
        param_sub(pair.generator.params, clones.gen_clone.params),
        diag,
        adapted_d=clones.disc_clone.params,
        adapted_g=clones.gen_clone.params,
    )


INNER_LOOPS = {"maml": inner_loop_maml, "reptile": inner_loop_reptile}


# -- outer loop --------------------------------------------------------------------


def task_rng(seed: int, epoch: int, task_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, task_index]))


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch]))


class OuterUpdater:
    """Applies live <- live - outer_lr * meta_gradient for both networks."""

    def __init__(self, pair: GanPair, cfg: MetaConfig):
        self.pair = pair
        self.cfg = cfg
        self.lr = cfg.outer_lr
        if cfg.outer_optimizer == "adam" and self.lr > 0:
            self.opt_d = make_optimizer("adam", self.lr)
            self.opt_g = make_optimizer("adam", self.lr)
        else:
            self.opt_d = self.opt_g = None

    def apply(self, grad_d: ParamVector, grad_g: ParamVector, adapted_d=None, adapted_g=None) -> None:
        live_d, live_g = self.pair.discriminator.params, self.pair.generator.params
        for live, g in ((live_d, grad_d), (live_g, grad_g)):
            if not live.same_structure(g):
                raise StructureError("meta-gradient segment table does not match the live network")
        if self.opt_d is not None:
            optimizer_step(self.opt_d, live_d, grad_d)
            optimizer_step(self.opt_g, live_g, grad_g)
            return
        beta = self.lr
        if adapted_d is not None and adapted_g is not None:
            # live - beta*(live - adapted), written so beta=0 and beta=1 are exact
            live_d.values[:] = (1.0 - beta) * live_d.values + beta * adapted_d.values
            live_g.values[:] = (1.0 - beta) * live_g.values + beta * adapted_g.values
        else:
            live_d.values -= beta * grad_d.values
            live_g.values -= beta * grad_g.values


def _mean(vectors: list[ParamVector]) -> ParamVector:
    total = vectors[0].values.copy()
    for v in vectors[1:]:
        total += v.values
    return ParamVector(vectors[0].segments, total / len(vectors))


def outer_loop(partition: TaskPartition, pair: GanPair, cfg: MetaConfig, epochs: int, seed: int = 0,
               hooks: Iterable[Callable[[dict], None]] = (), on_epoch_end: Callable[[int, GanPair], None] | None = None,
               on_overflow: Callable[[int, GanPair], None] | None = None, start_epoch: int = 0,
               workers: int = 1, timed: bool = True) -> TrainingLog:
    """Meta-train ``pair`` in place.

    Each epoch draws ``task_batch`` training tasks; every task gets its own
    rng stream derived from (seed, epoch, task index).  ``sequential`` mode
    applies each task's update immediately, ``averaged`` applies the
    task-order mean once per batch.  Hooks receive one record per inner step.
    """
    inner = INNER_LOOPS[cfg.algorithm]
    updater = OuterUpdater(pair, cfg)
    hooks = list(hooks)
    out = TrainingLog()
    t_start = time.perf_counter()

    def emit(epoch, t_index, result: InnerLoopResult, wall_ms):
        for step, ld, lg in result.diagnostics:
            rec = {"epoch": epoch, "task_index": t_index, "inner_step": step, "loss_d": ld, "loss_g": lg,
                   "wall_ms": wall_ms if timed else None}
            out.records.append(rec)
            for h in hooks:
                h(rec)

    def run_task(epoch, j, t_index):
        t0 = time.perf_counter()
        res = inner(partition.train_tasks[t_index], pair, cfg, task_rng(seed, epoch, j))
        return res, (time.perf_counter() - t0) * 1000.0

    for epoch in range(start_epoch, start_epoch + epochs):
        chosen = partition.sample_tasks(epoch_rng(seed, epoch), cfg.task_batch)
        try:
            if cfg.outer_mode == "sequential":
                for j, t_index in enumerate(chosen):
                    res, ms = run_task(epoch, j, t_index)
                    updater.apply(res.grad_d, res.grad_g, res.adapted_d, res.adapted_g)
                    emit(epoch, t_index, res, ms)
            else:
                if workers > 1:
                    with ThreadPoolExecutor(workers) as ex:
                        results = list(ex.map(lambda a: run_task(epoch, *a), enumerate(chosen)))
                else:
                    results = [run_task(epoch, j, t) for j, t in enumerate(chosen)]
                reptile = all(r.adapted_d is not None for r, _ in results)
                updater.apply(
                    _mean([r.grad_d for r, _ in results]),
                    _mean([r.grad_g for r, _ in results]),
                    _mean([r.adapted_d for r, _ in results]) if reptile else None,
                    _mean([r.adapted_g for r, _ in results]) if reptile else None,
                )
                for (res, ms), t_index in zip(results, chosen):
                    emit(epoch, t_index, res, ms)
        except NumericOverflowError as e:
            log.error("numeric overflow in epoch %d: %s", epoch, e)
            if on_overflow is not None:
                on_overflow(epoch, pair)
            raise NumericOverflowError(f"epoch {epoch}: {e}") from e
        out.epochs += 1
        if on_epoch_end is not None:
            on_epoch_end(epoch, pair)
    out.wall_seconds = time.perf_counter() - t_start
    return out


# -- adaptation --------------------------------------------------------------------


def train_gan(pair: GanPair, x, y, steps: int, lr: float, rng: np.random.Generator, target=None,
              optimizer: str = "sgd", critic_steps: int = 1, gen_lr: float | None = None,
              betas=(0.9, 0.999), decay: bool = False) -> GanPair:
    """Plain alternating GAN training of ``pair`` in place on a fixed sample set.

    ``gen_lr`` defaults to ``lr``.  With ``decay`` both rates fall linearly to
    zero over the run, which settles the generator instead of leaving it at an
    arbitrary phase of its orbit around the target.
    """
    if steps <= 0:
        return pair
    x = np.asarray(x)
    n, d_in = len(x), pair.generator.latent_dim
    gen_lr = lr if gen_lr is None else gen_lr
    d_step = _Stepper(pair.discriminator, optimizer, lr, None, betas)
    g_step = _Stepper(pair.generator, optimizer, gen_lr, None, betas)
    for s in range(steps):
        if decay:
            f = 1.0 - s / steps
            for st, base in ((d_step, lr), (g_step, gen_lr)):
                if st.opt is not None:
                    st.opt.lr = base * f
        try:
            for _ in range(critic_steps):
                fake = generate(pair.generator, sample_latent(rng, n, d_in))
                _, g = discriminator_grad(pair.loss, pair.discriminator, x, y, fake, rng)
                d_step.step(g)
            _, g = generator_grad(pair.loss, pair.generator, pair.discriminator, sample_latent(rng, n, d_in), target)
            g_step.step(g)
        except NumericOverflowError as e:
            raise _overflow("adaptation", s, e) from e
    return pair


def adapt(pair: GanPair, task: Task, k: int, steps: int, lr: float, rng: np.random.Generator,
          optimizer: str = "sgd", critic_steps: int = 1, shots=None, **train_kw) -> GanPair:
    """Fine-tune a clone of ``pair`` on K samples of ``task``; the input is untouched.

    ``shots`` may pass pre-drawn (x, y) so several models see the same K samples.
    Remaining keywords (``gen_lr``, ``betas``, ``decay``) go to ``train_gan``.
    """
    adapted = pair.clone()
    if steps <= 0:
        return adapted
    x, y = shots if shots is not None else draw_k(task, k, rng)
    return train_gan(adapted, x, y, steps, lr, rng, _target(pair, task), optimizer, critic_steps, **train_kw)
