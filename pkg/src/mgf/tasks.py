"""Classes, domains, tasks and the meta-train / meta-test partition.

Also the concrete sample sources: IDX image files (MNIST layout), the bundled
5,000-digit MNIST subset, and a synthetic family of 2-D Gaussian clusters on
a ring.
"""

from __future__ import annotations

import gzip
import importlib.util
import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from mgf.errors import ConfigError, ParseError, TaskError
from mgf.models import LossConfig

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
_IDX_CODES = {v: k for k, v in _IDX_TYPES.items()}


@dataclass(frozen=True, order=True)
class ClassId:
    label: int
    name: str = ""

    def __str__(self) -> str:
        return self.name or str(self.label)


@dataclass
class Domain:
    """All samples of one class, as rows of a (n, D) array."""

    cls: ClassId
    samples: np.ndarray
    image_shape: tuple[int, int] | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or len(self.samples) == 0:
            raise TaskError(f"domain {self.cls} needs a non-empty (n, D) sample array, got {self.samples.shape}")
        self.samples.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class Task:
    """A class set, its pooled sample source, and the loss it is trained with."""

    classes: tuple[ClassId, ...]
    domains: tuple[Domain, ...]
    loss: LossConfig | None = None
    _pool: tuple[np.ndarray, np.ndarray] | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if len(self.classes) < 1:
            raise TaskError("a task needs at least one class")
        if {d.cls for d in self.domains} != set(self.classes):
            raise TaskError("task domains must match its class set")

    @property
    def labels(self) -> tuple[int, ...]:
        return tuple(c.label for c in self.classes)

    def pool(self) -> tuple[np.ndarray, np.ndarray]:
        """(samples, labels) of the union of member domains, in domain order."""
        if self._pool is None:
            x = np.concatenate([d.samples for d in self.domains])
            y = np.concatenate([np.full(len(d), d.cls.label) for d in self.domains])
            self._pool = (x, y)
        return self._pool

    def __len__(self) -> int:
        return sum(len(d) for d in self.domains)

    def describe(self) -> str:
        return "+".join(str(c) for c in self.classes)


@dataclass
class TaskPartition:
    train_tasks: list[Task]
    test_tasks: list[Task]
    task_weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.task_weights, dtype=np.float64)
        if w.shape != (len(self.train_tasks),) or np.any(w < 0) or not np.isclose(w.sum(), 1.0):
            raise ConfigError("task weights must be a non-negative distribution over the training tasks")
        self.task_weights = w
        train = {c for t in self.train_tasks for c in t.classes}
        test = {c for t in self.test_tasks for c in t.classes}
        if train & test:
            raise ConfigError(f"classes {sorted(str(c) for c in train & test)} appear in both partitions")

    def sample_tasks(self, rng: np.random.Generator, n: int) -> list[int]:
        return [int(i) for i in rng.choice(len(self.train_tasks), size=n, p=self.task_weights)]

    def manifest(self) -> str:
        lines = ["# task_id\tclasses\tsplit"]
        for split, tasks in (("train", self.train_tasks), ("test", self.test_tasks)):
            for i, t in enumerate(tasks):
                lines.append(f"{split}-{i}\t{','.join(str(c) for c in t.classes)}\t{split}")
        return "\n".join(lines) + "\n"


# -- sampling ------------------------------------------------------------------


def draw_k(task: Task, k: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """K samples (and their labels) drawn without replacement from the task pool."""
    x, y = task.pool()
    if k < 1 or k > len(x):
        raise TaskError(f"task {task.describe()} cannot supply {k} samples (pool has {len(x)})")
    idx = rng.permutation(len(x))[:k]
    return x[idx], y[idx]


def make_partition(domains: Sequence[Domain], held_out, classes_per_task: int = 1,
                   rng: np.random.Generator | None = None, max_train_tasks: int | None = None,
                   loss: LossConfig | None = None) -> TaskPartition:
    """Tasks over r-sized class subsets; held-out classes form the meta-test tasks."""
    by_label = {d.cls.label: d for d in domains}
    held = {h.label if isinstance(h, ClassId) else int(h) for h in held_out}
    unknown = held - set(by_label)
    if unknown:
        raise ConfigError(f"held-out classes {sorted(unknown)} are not in the dataset")
    train_labels = sorted(set(by_label) - held)
    r = classes_per_task
    if r < 1:
        raise ConfigError("classes_per_task must be >= 1")
    if len(train_labels) < r:
        raise ConfigError(f"{len(train_labels)} meta-train classes left after holding out {sorted(held)}; need {r} per task")
    if not held:
        raise ConfigError("at least one held-out class is required for the meta-test split")

    def task_of(labels) -> Task:
        ds = tuple(by_label[l] for l in labels)
        return Task(tuple(d.cls for d in ds), ds, loss)

    combos = list(itertools.combinations(train_labels, r))
    if max_train_tasks and len(combos) > max_train_tasks:
        rng = rng if rng is not None else np.random.default_rng(0)
        keep = sorted(rng.choice(len(combos), size=max_train_tasks, replace=False))
        combos = [combos[i] for i in keep]
    test_combos = list(itertools.combinations(sorted(held), min(r, len(held))))
    train = [task_of(c) for c in combos]
    test = [task_of(c) for c in test_combos]
    return TaskPartition(train, test, np.full(len(train), 1.0 / len(train)))


# -- synthetic family ------------------------------------------------------------

RING_RADIUS = 2.0
COMPONENT_SIGMA = 0.15
_COMPONENT_OFFSETS = (-0.25, 0.0, 0.25)


def ring_anchor(i: int, n_classes: int) -> np.ndarray:
    angle = 2 * np.pi * i / n_classes
    return RING_RADIUS * np.array([np.cos(angle), np.sin(angle)])


def synth_family_gaussian(n_classes: int, samples_per_class: int, rng: np.random.Generator) -> list[Domain]:
    """Class i: three-component Gaussian mixture centred on ring anchor i.

    Components sit at tangential offsets of -0.25, 0, +0.25 from the anchor,
    each with isotropic std 0.15, so the class mean is the anchor itself.
    """
    if n_classes < 2:
        raise ConfigError("synthetic family needs n_classes >= 2")
    domains = []
    for i in range(n_classes):
        anchor = ring_anchor(i, n_classes)
        angle = 2 * np.pi * i / n_classes
        tangent = np.array([-np.sin(angle), np.cos(angle)])
        comp = rng.integers(0, len(_COMPONENT_OFFSETS), size=samples_per_class)
        centres = anchor + np.outer(np.asarray(_COMPONENT_OFFSETS)[comp], tangent)
        pts = centres + COMPONENT_SIGMA * rng.standard_normal((samples_per_class, 2))
        domains.append(Domain(ClassId(i, f"ring{i}"), pts))
    return domains


def scale_domains(domains: Sequence[Domain], factor: float) -> list[Domain]:
    return [Domain(d.cls, d.samples * factor, d.image_shape) for d in domains]


# -- IDX files -----------------------------------------------------------------


def _open(path: str | Path) -> bytes:
    path = Path(path)
    data = path.read_bytes()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def read_idx(buf: bytes, expect_magic: int | None = None) -> np.ndarray:
    """Decode an IDX byte string into an array of its declared type and shape."""
    if len(buf) < 4:
        raise ParseError("truncated IDX header", len(buf))
    (magic,) = struct.unpack_from(">I", buf, 0)
    if expect_magic is not None and magic != expect_magic:
        raise ParseError(f"bad IDX magic 0x{magic:08X}, expected 0x{expect_magic:08X}", 0)
    if magic >> 16 != 0:
        raise ParseError(f"bad IDX magic 0x{magic:08X}: leading bytes must be zero", 0)
    code, ndim = (magic >> 8) & 0xFF, magic & 0xFF
    if code not in _IDX_TYPES:
        raise ParseError(f"unknown IDX element type 0x{code:02X}", 2)
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise ParseError(f"truncated IDX header: need {header} bytes, have {len(buf)}", len(buf))
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    dtype = np.dtype(_IDX_TYPES[code])
    need = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    have = len(buf) - header
    if have < need:
        raise ParseError(f"truncated IDX payload: expected {need} bytes, found {have}", header + have)
    if have > need:
        raise ParseError(f"IDX payload has {have - need} trailing bytes", header + need)
    return np.frombuffer(buf, dtype=dtype, count=int(np.prod(dims)), offset=header).reshape(dims)


def encode_idx(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder(">").str if arr.dtype.itemsize > 1 else arr.dtype.str
    dt = dt.replace("|", ">")
    if dt not in _IDX_CODES:
        raise ValueError(f"dtype {arr.dtype} has no IDX encoding")
    magic = (_IDX_CODES[dt] << 8) | arr.ndim
    header = struct.pack(f">I{arr.ndim}I", magic, *arr.shape)
    return header + arr.astype(dt).tobytes()


def load_idx_images(images_path, labels_path, normalize: bool = True, names: dict[int, str] | None = None) -> list[Domain]:
    """One Domain per label value; ubyte pixels map affinely onto [-1, 1].

    Images files may also carry float64 payloads (as written by
    ``write_idx_domains`` for non-image domains); those are used as-is.
    """
    img_buf, lab_buf = _open(images_path), _open(labels_path)
    labels = read_idx(lab_buf, LABELS_MAGIC)
    (magic,) = struct.unpack_from(">I", img_buf, 0) if len(img_buf) >= 4 else (None,)
    if magic in (0x00000E02, 0x00000E03):
        images = read_idx(img_buf).astype(np.float64)
    else:
        images = read_idx(img_buf, IMAGES_MAGIC)
    if len(images) != len(labels):
        raise ParseError(f"image count {len(images)} does not match label count {len(labels)}", 4)
    shape = images.shape[1:] if images.ndim == 3 else None
    flat = images.reshape(len(images), -1)
    if images.dtype == np.uint8:
        flat = flat.astype(np.float64)
        if normalize:
            flat = flat / 127.5 - 1.0
    names = names or {}
    return [
        Domain(ClassId(int(l), names.get(int(l), str(int(l)))), flat[labels == l], shape)
        for l in np.unique(labels)
    ]


def write_idx_domains(domains: Sequence[Domain], images_path, labels_path) -> None:
    """Export domains to IDX: ubyte images when image-shaped, else float64 rows."""
    x = np.concatenate([d.samples for d in domains])
    y = np.concatenate([np.full(len(d), d.cls.label, dtype=np.uint8) for d in domains])
    shape = domains[0].image_shape
    if shape is not None:
        pix = np.clip(np.round((x + 1.0) * 127.5), 0, 255).astype(np.uint8)
        payload = encode_idx(pix.reshape(len(x), *shape))
    else:
        payload = encode_idx(x.astype(">f8"))
    Path(images_path).write_bytes(payload)
    Path(labels_path).write_bytes(encode_idx(y))


# -- images --------------------------------------------------------------------


def downscale(domains: Sequence[Domain], side: int) -> list[Domain]:
    """Area-average square images down to ``side`` x ``side``."""
    out = []
    for d in domains:
        if d.image_shape is None:
            raise ConfigError(f"domain {d.cls} is not image-shaped")
        h, w = d.image_shape
        if (h, w) == (side, side):
            out.append(d)
            continue
        if h % side or w % side:
            raise ConfigError(f"cannot area-average {h}x{w} down to {side}x{side}")
        fh, fw = h // side, w // side
        imgs = d.samples.reshape(-1, side, fh, side, fw).mean(axis=(2, 4))
        out.append(Domain(d.cls, imgs.reshape(len(d), -1), (side, side)))
    return out


def mnist5k_path() -> Path:
    """Location of the 5,000-digit MNIST subset bundled with mlxtend."""
    spec = importlib.util.find_spec("mlxtend")
    if spec is None or not spec.submodule_search_locations:
        raise FileNotFoundError("the bundled MNIST subset needs the 'mlxtend' package installed")
    path = Path(list(spec.submodule_search_locations)[0]) / "data" / "data" / "mnist_5k.csv.gz"
    if not path.exists():
        raise FileNotFoundError(path)
    return path


def load_mnist5k() -> tuple[np.ndarray, np.ndarray]:
    """(images uint8 (5000, 28, 28), labels uint8 (5000,))."""
    raw = np.loadtxt(gzip.open(mnist5k_path(), "rt"), delimiter=",", dtype=np.int64)
    return raw[:, :-1].astype(np.uint8).reshape(-1, 28, 28), raw[:, -1].astype(np.uint8)


def export_mnist5k_idx(out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images, labels = load_mnist5k()
    img_path = out_dir / "mnist5k-images-idx3-ubyte"
    lab_path = out_dir / "mnist5k-labels-idx1-ubyte"
    img_path.write_bytes(encode_idx(images))
    lab_path.write_bytes(encode_idx(labels))
    return img_path, lab_path
