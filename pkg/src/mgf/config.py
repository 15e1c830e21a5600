"""Run configuration: flat ``key = value`` text with dotted section keys.

Example::

    seed = 3
    epochs = 500
    output_dir = runs/ring
    data.kind = synthetic          # synthetic | idx | mnist5k
    data.held_out = 7
    meta.algorithm = reptile
    meta.inner_lr = 0.001

Plain SGD is the default for every optimizer; Adam is opt-in.  ``configs/``
holds tuned examples.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from mgf.errors import ConfigError
from mgf.evaluation import BenchmarkConfig
from mgf.meta import MetaConfig
from mgf.models import GanPair, LossConfig, build_pair
from mgf.tasks import (
    ClassId,
    Domain,
    TaskPartition,
    downscale,
    load_idx_images,
    load_mnist5k,
    make_partition,
    scale_domains,
    synth_family_gaussian,
)


@dataclass
class DataConfig:
    kind: str = "synthetic"
    images: str = ""
    labels: str = ""
    side: int = 0
    n_classes: int = 8
    samples_per_class: int = 500
    scale: float = 0.4
    held_out: tuple[int, ...] = (7,)
    classes_per_task: int = 1
    max_train_tasks: int = 0


@dataclass
class NetConfig:
    latent_dim: int = 16
    gen_hidden: tuple[int, ...] = (64, 128)
    disc_hidden: tuple[int, ...] = (128, 64)


@dataclass
class EvalConfig:
    shots: int = 4
    steps: int = 200
    lr: float = 0.01
    optimizer: str = "sgd"
    critic_steps: int = 1
    samples: int = 256
    classifier_epochs: int = 10
    gen_lr: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    decay: bool = False

    def train_kw(self) -> dict:
        return {"gen_lr": self.gen_lr, "betas": (self.beta1, self.beta2), "decay": self.decay}


@dataclass
class RunConfig:
    seed: int = 0
    epochs: int = 100
    output_dir: str = "runs/default"
    checkpoint_every: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    net: NetConfig = field(default_factory=NetConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    base_dir: Path = field(default=Path("."), compare=False)

    # -- derived objects -----------------------------------------------------
    @property
    def out_path(self) -> Path:
        p = Path(self.output_dir)
        return p if p.is_absolute() else self.base_dir / p

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def load_domains(self) -> list[Domain]:
        d = self.data
        if d.kind == "synthetic":
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, 2024]))
            return scale_domains(synth_family_gaussian(d.n_classes, d.samples_per_class, rng), d.scale)
        if d.kind == "idx":
            domains = load_idx_images(self.resolve(d.images), self.resolve(d.labels))
        elif d.kind == "mnist5k":
            images, labels = load_mnist5k()
            flat = images.reshape(len(images), -1).astype(np.float64) / 127.5 - 1.0
            domains = [Domain(ClassId(int(l), str(l)), flat[labels == l], (28, 28)) for l in np.unique(labels)]
        else:
            raise ConfigError(f"unknown data.kind {d.kind!r}")
        return downscale(domains, d.side) if d.side else domains

    @property
    def is_image(self) -> bool:
        return self.data.kind != "synthetic"

    def partition(self, domains) -> TaskPartition:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 4242]))
        return make_partition(domains, set(self.data.held_out), self.data.classes_per_task, rng,
                              self.data.max_train_tasks or None, self.loss)

    def build_pair(self, data_dim: int, n_classes: int) -> GanPair:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 1]))
        return build_pair(data_dim, self.loss, n_classes, self.net.latent_dim, self.net.gen_hidden,
                          self.net.disc_hidden, rng)

    def benchmark(self) -> BenchmarkConfig:
        e = self.eval
        return BenchmarkConfig(e.shots, e.steps, e.lr, e.optimizer, e.critic_steps, e.samples, e.gen_lr, e.beta1,
                               e.beta2, e.decay)

    def to_lines(self) -> list[str]:
        lines = [f"seed = {self.seed}", f"epochs = {self.epochs}", f"output_dir = {self.output_dir}",
                 f"checkpoint_every = {self.checkpoint_every}"]
        for section in ("data", "net", "loss", "meta", "eval"):
            obj = getattr(self, section)
            for f in fields(obj):
                v = getattr(obj, f.name)
                if isinstance(v, tuple):
                    v = ",".join(map(str, v))
                lines.append(f"{section}.{f.name} = {'' if v is None else v}")
        return lines


_TOP_LEVEL = {"seed": int, "epochs": int, "output_dir": str, "checkpoint_every": int}
_SECTIONS = ("data", "net", "loss", "meta", "eval")


def _convert(raw: str, typ, key: str, lineno: int):
    typ_s = str(typ)
    try:
        if raw == "" and "None" in typ_s:
            return None
        if "tuple" in typ_s:
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if typ is bool or typ_s == "bool":
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int or typ_s == "int":
            return int(raw)
        if "float" in typ_s:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"line {lineno}: bad value {raw!r} for key {key!r}") from None


def parse_config(text: str, base_dir: Path | str = ".") -> RunConfig:
    values: dict[str, dict] = {s: {} for s in _SECTIONS}
    top: dict[str, object] = {}
    templates = {s: {f.name: f.type for f in fields(getattr(RunConfig(), s))} for s in _SECTIONS}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = (part.strip() for part in line.partition("="))
        if key in _TOP_LEVEL:
            top[key] = _convert(raw, _TOP_LEVEL[key], key, lineno)
            continue
        section, _, name = key.partition(".")
        if section not in templates or name not in templates[section]:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[section][name] = _convert(raw, templates[section][name], key, lineno)
    cfg = RunConfig(base_dir=Path(base_dir), **top)
    try:
        for section in _SECTIONS:
            if values[section]:
                setattr(cfg, section, dataclasses.replace(getattr(cfg, section), **values[section]))
    except TypeError as e:
        raise ConfigError(str(e)) from e
    env_seed = os.environ.get("MGF_SEED")
    if env_seed:
        try:
            cfg.seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"MGF_SEED must be an integer, got {env_seed!r}") from None
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), path.parent)
