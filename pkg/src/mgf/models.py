"""Generator/discriminator MLPs and the adversarial loss families."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from mgf.autodiff import (
    ACTIVATIONS,
    ParamVector,
    Tensor,
    grad,
    input_gradient,
    leaky_relu,
    mean,
    no_grad,
    param_clone,
    row_norm,
    softmax_cross_entropy,
    softplus,
    square,
)
from mgf.errors import ConfigError, ShapeError

FAMILIES = ("wgan_gp", "nonsaturating_bce", "acgan")
HEADS = ("critic", "probability", "class_aware")
HEAD_FOR_FAMILY = {"wgan_gp": "critic", "nonsaturating_bce": "probability", "acgan": "class_aware"}


@dataclass(frozen=True)
class MLPSpec:
    """Fully connected stack: ``widths[0]`` inputs through ``widths[-1]`` outputs."""

    widths: tuple[int, ...]
    hidden_activation: str = "leaky_relu"
    output_activation: str = "identity"
    bias: bool = True
    slope: float = 0.2

    def __post_init__(self):
        if len(self.widths) < 2 or any(w < 1 for w in self.widths):
            raise ConfigError(f"layer widths must be >= 2 positive ints, got {self.widths}")
        for act in (self.hidden_activation, self.output_activation):
            if act not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {act!r}")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for i, (n_in, n_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            shapes[f"W{i}"] = (n_in, n_out)
            if self.bias:
                shapes[f"b{i}"] = (n_out,)
        return shapes

    def describe(self) -> str:
        return f"{'-'.join(map(str, self.widths))}:{self.hidden_activation}:{self.output_activation}:bias={int(self.bias)}"


def init_params(spec: MLPSpec, rng: np.random.Generator) -> ParamVector:
    """Glorot-uniform weights, zero biases."""
    arrays = {}
    for name, shape in spec.param_shapes().items():
        if name.startswith("W"):
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            arrays[name] = rng.uniform(-limit, limit, size=shape)
        else:
            arrays[name] = np.zeros(shape)
    return ParamVector.from_arrays(arrays)


def mlp_forward(spec: MLPSpec, weights: dict[str, Tensor], x: Tensor) -> Tensor:
    h = x
    n_layers = len(spec.widths) - 1
    for i in range(n_layers):
        h = h @ weights[f"W{i}"]
        if spec.bias:
            h = h + weights[f"b{i}"]
        act = spec.hidden_activation if i < n_layers - 1 else spec.output_activation
        h = leaky_relu(h, spec.slope) if act == "leaky_relu" else ACTIVATIONS[act](h)
    return h


class Bound:
    """A network whose parameters are live leaf tensors of the current graph."""

    def __init__(self, net: Network, trainable: bool = True):
        self.net = net
        self.leaves = {
            name: Tensor(arr, requires_grad=trainable, name=name) for name, arr in net.params.arrays().items()
        }

    def __call__(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 2 or x.shape[1] != self.net.spec.widths[0]:
            raise ShapeError(f"{type(self.net).__name__}: expected (batch, {self.net.spec.widths[0]}) input, got {x.shape}")
        return mlp_forward(self.net.spec, self.leaves, x)

    def gradient(self, loss: Tensor) -> ParamVector:
        names = list(self.leaves)
        grads = grad(loss, [self.leaves[n] for n in names])
        return ParamVector(self.net.params.segments, np.concatenate([g.data.ravel() for g in grads]))


class Network:
    def __init__(self, spec: MLPSpec, params: ParamVector):
        expected = spec.param_shapes()
        got = {s.name: s.shape for s in params.segments}
        if got != expected:
            raise ShapeError(f"parameter table {got} does not match layer spec {expected}")
        self.spec = spec
        self.params = params

    def bind(self, trainable: bool = True) -> Bound:
        return Bound(self, trainable)

    def apply(self, x) -> np.ndarray:
        """Forward pass without recording a graph."""
        with no_grad():
            return self.bind(trainable=False)(x).data

    def clone(self):
        return replace_params(self, param_clone(self.params))


def replace_params(net, params: ParamVector):
    out = object.__new__(type(net))
    out.__dict__.update(net.__dict__)
    out.params = params
    return out


class Generator(Network):
    """Maps latent codes z in R^d to samples in R^D."""

    @classmethod
    def create(cls, latent_dim: int, out_dim: int, hidden=(64, 128), rng=None, activation="leaky_relu",
               output_activation="tanh", bias=True) -> Generator:
        spec = MLPSpec((latent_dim, *hidden, out_dim), activation, output_activation, bias)
        return cls(spec, init_params(spec, rng if rng is not None else np.random.default_rng(0)))

    @property
    def latent_dim(self) -> int:
        return self.spec.widths[0]

    @property
    def out_dim(self) -> int:
        return self.spec.widths[-1]


class Discriminator(Network):
    def __init__(self, spec: MLPSpec, params: ParamVector, head: str = "critic", n_classes: int = 0):
        super().__init__(spec, params)
        if head not in HEADS:
            raise ConfigError(f"unknown head kind {head!r}")
        arity = 1 + n_classes if head == "class_aware" else 1
        if head == "class_aware" and n_classes < 1:
            raise ConfigError("class-aware head needs at least one class")
        if spec.widths[-1] != arity:
            raise ConfigError(f"{head} head needs {arity} outputs, layer spec has {spec.widths[-1]}")
        self.head = head
        self.n_classes = n_classes if head == "class_aware" else 0

    @classmethod
    def create(cls, in_dim: int, hidden=(128, 64), head="critic", n_classes=0, rng=None,
               activation="leaky_relu", bias=True) -> Discriminator:
        arity = 1 + n_classes if head == "class_aware" else 1
        spec = MLPSpec((in_dim, *hidden, arity), activation, "identity", bias)
        return cls(spec, init_params(spec, rng if rng is not None else np.random.default_rng(0)), head, n_classes)

    @property
    def in_dim(self) -> int:
        return self.spec.widths[0]


@dataclass
class LossConfig:
    family: str = "wgan_gp"
    lambda_gp: float = 10.0
    lambda_cls: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown loss family {self.family!r}")
        if self.lambda_gp < 0 or self.lambda_cls < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass
class GanPair:
    generator: Generator
    discriminator: Discriminator
    loss: LossConfig = field(default_factory=LossConfig)

    def clone(self) -> GanPair:
        return GanPair(self.generator.clone(), self.discriminator.clone(), replace(self.loss))

    def checksum(self) -> tuple[str, str]:
        return self.generator.params.checksum(), self.discriminator.params.checksum()


def build_pair(data_dim: int, loss: LossConfig, n_classes: int = 0, latent_dim: int = 16,
               gen_hidden=(64, 128), disc_hidden=(128, 64), rng=None) -> GanPair:
    rng = rng if rng is not None else np.random.default_rng(0)
    gen = Generator.create(latent_dim, data_dim, gen_hidden, rng)
    head = HEAD_FOR_FAMILY[loss.family]
    disc = Discriminator.create(data_dim, disc_hidden, head, n_classes if head == "class_aware" else 0, rng)
    return GanPair(gen, disc, loss)


# -- sampling ---------------------------------------------------------------


def sample_latent(rng: np.random.Generator, batch: int, d: int) -> np.ndarray:
    if batch < 1 or d < 1:
        raise ValueError(f"sample_latent needs batch >= 1 and d >= 1, got batch={batch}, d={d}")
    return rng.standard_normal((batch, d))


def generate(g: Generator, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != g.latent_dim:
        raise ShapeError(f"generate: latent batch must be (batch, {g.latent_dim}), got {z.shape}")
    return g.apply(z)


def interpolate(x_real, x_fake, rng: np.random.Generator | None = None, alpha=None) -> np.ndarray:
    """Per-row convex mix alpha * real + (1 - alpha) * fake, alpha ~ U(0, 1) unless forced."""
    x_real = np.asarray(x_real, dtype=np.float64)
    x_fake = np.asarray(x_fake, dtype=np.float64)
    if x_real.shape != x_fake.shape:
        raise ShapeError(f"interpolate: real {x_real.shape} vs fake {x_fake.shape}")
    if alpha is None:
        alpha = rng.uniform(0.0, 1.0, size=(x_real.shape[0], 1))
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim == 1:
        alpha = alpha.reshape(-1, 1)
    return alpha * x_real + (1.0 - alpha) * x_fake


# -- losses -----------------------------------------------------------------


def _check_head(cfg: LossConfig, d: Bound) -> None:
    want = HEAD_FOR_FAMILY[cfg.family]
    if d.net.head != want:
        raise ConfigError(f"loss family {cfg.family} needs a {want} head, discriminator has {d.net.head}")


def _score(out: Tensor) -> Tensor:
    return out[:, 0] if out.shape[1] > 1 else out.reshape(-1)


def gradient_penalty(d: Bound, x_hat: np.ndarray) -> Tensor:
    """mean((||d score / d x_hat||_2 - 1)^2) as a differentiable graph."""
    x = Tensor(x_hat, requires_grad=True)
    gx = input_gradient(_score(d(x)).sum(), x)
    return mean(square(row_norm(gx) - 1.0))


def loss_discriminator(cfg: LossConfig, d: Bound, x_real, x_fake, rng=None, labels=None, interp_alpha=None) -> Tensor:
    """Critic loss, minimized: E[D(fake)] - E[D(real)] + lambda_gp * penalty.

    The BCE family uses softplus(-D(real)) + softplus(D(fake)); the AC family
    adds lambda_cls times the class cross-entropy on real samples.
    """
    _check_head(cfg, d)
    x_real = np.asarray(x_real, dtype=np.float64)
    x_fake = np.asarray(x_fake, dtype=np.float64)
    if x_real.shape[0] == 0 or x_fake.shape[0] == 0:
        raise ShapeError("loss_discriminator: empty batch")
    out_real, out_fake = d(x_real), d(x_fake)
    if cfg.family == "nonsaturating_bce":
        return mean(softplus(-_score(out_real))) + mean(softplus(_score(out_fake)))
    loss = mean(_score(out_fake)) - mean(_score(out_real))
    if cfg.lambda_gp > 0:
        if x_real.shape != x_fake.shape:
            raise ShapeError(f"gradient penalty: real {x_real.shape} vs fake {x_fake.shape}")
        loss = loss + cfg.lambda_gp * gradient_penalty(d, interpolate(x_real, x_fake, rng, interp_alpha))
    if cfg.family == "acgan":
        if labels is None:
            raise ConfigError("acgan discriminator loss needs class labels for the real batch")
        loss = loss + cfg.lambda_cls * class_loss(out_real, d.net.n_classes, labels)
    return loss


def loss_generator(cfg: LossConfig, d: Bound, x_fake: Tensor, target=None) -> Tensor:
    """Generator loss on a fake batch that is still attached to the generator graph.

    ``target`` (AC family only) is the class label or class distribution the
    unconditional generator is pushed toward.
    """
    _check_head(cfg, d)
    out = d(x_fake)
    if cfg.family == "nonsaturating_bce":
        return mean(softplus(-_score(out)))
    loss = -mean(_score(out))
    if cfg.family == "acgan":
        if target is None:
            raise ConfigError("acgan generator loss needs a class target")
        loss = loss + cfg.lambda_cls * class_loss(out, d.net.n_classes, _broadcast_target(target, out.shape[0], d.net.n_classes))
    return loss


def loss_acgan(cfg: LossConfig, d: Bound, x, class_labels) -> Tensor:
    """Auxiliary classification cross-entropy alone (unweighted)."""
    if d.net.head != "class_aware":
        raise ConfigError(f"auxiliary classification needs a class_aware head, got {d.net.head}")
    return class_loss(d(x), d.net.n_classes, class_labels)


def class_loss(out: Tensor, n_classes: int, labels) -> Tensor:
    labels = np.asarray(labels)
    if labels.ndim == 1 and (np.any(labels < 0) or np.any(labels >= n_classes)):
        raise ValueError(f"class label out of range [0, {n_classes})")
    return softmax_cross_entropy(out[:, 1:], labels)


def _broadcast_target(target, n: int, n_classes: int) -> np.ndarray:
    t = np.asarray(target)
    if t.ndim == 0:
        return np.full(n, int(t))
    if t.ndim == 1 and t.shape[0] == n_classes and np.issubdtype(t.dtype, np.floating):
        return np.tile(t, (n, 1))
    return t


def class_target(classes, n_classes: int) -> np.ndarray:
    """Uniform distribution over a task's classes (a one-hot row for one class)."""
    t = np.zeros(n_classes)
    idx = list(classes)
    t[idx] = 1.0 / len(idx)
    return t
