"""Artifact files: graymap grids, the loss CSV, and checkpoints with manifests."""

from __future__ import annotations

import csv
import math
import re
import time
from pathlib import Path

import numpy as np

from mgf.autodiff import ParamVector
from mgf.errors import ConfigError, ParseError
from mgf.models import Discriminator, GanPair, Generator, LossConfig, MLPSpec

LOSS_COLUMNS = ("epoch", "task_index", "inner_step", "loss_d", "loss_g", "wall_ms")


# -- graymap grids ---------------------------------------------------------------


def to_pixels(x) -> np.ndarray:
    return np.clip(np.round((np.asarray(x, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def image_grid(samples, rows: int, cols: int, side: int | None = None) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    side = side or math.isqrt(x.shape[1])
    if side * side != x.shape[1]:
        raise ValueError(f"samples of width {x.shape[1]} are not square images")
    if len(x) < rows * cols:
        x = np.concatenate([x, np.full((rows * cols - len(x), x.shape[1]), -1.0)])
    tiles = x[: rows * cols].reshape(rows, cols, side, side)
    return to_pixels(tiles.transpose(0, 2, 1, 3).reshape(rows * side, cols * side))


def write_pgm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", buf)
    if not m:
        raise ParseError("not a binary graymap (P5) file", 0)
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ParseError(f"unsupported graymap maxval {maxval}", m.start(3))
    data = buf[m.end():]
    if len(data) != w * h:
        raise ParseError(f"expected {w * h} pixel bytes, found {len(data)}", m.end())
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def write_scatter_csv(path, samples) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        x = np.asarray(samples)
        w.writerow([f"x{i}" for i in range(x.shape[1])])
        for row in x:
            w.writerow([repr(float(v)) for v in row])


# -- loss log ----------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, float):
        return "NA" if math.isnan(v) else repr(v)
    return str(v)


class LossCsv:
    """Append-only loss log; usable directly as an outer-loop hook."""

    def __init__(self, path):
        self.path = Path(path)
        self._f = open(self.path, "w", newline="")
        self._f.write(",".join(LOSS_COLUMNS) + "\n")

    def __call__(self, rec: dict) -> None:
        self._f.write(",".join(_fmt(rec.get(c)) for c in LOSS_COLUMNS) + "\n")

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# -- checkpoints ---------------------------------------------------------------------


def spec_to_text(spec: MLPSpec) -> str:
    return f"{','.join(map(str, spec.widths))}|{spec.hidden_activation}|{spec.output_activation}|{int(spec.bias)}|{spec.slope!r}"


def spec_from_text(text: str) -> MLPSpec:
    try:
        widths, hidden, out, bias, slope = text.split("|")
        return MLPSpec(tuple(int(w) for w in widths.split(",")), hidden, out, bool(int(bias)), float(slope))
    except ValueError as e:
        raise ConfigError(f"bad layer spec in manifest: {text!r}") from e


def write_manifest(path, entries: dict) -> None:
    lines = [f"created = {time.strftime('%Y-%m-%dT%H:%M:%S%z')}"]
    lines += [f"{k} = {v}" for k, v in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, _, v = line.partition("=")
        out[k.strip()] = v.strip()
    return out


def save_checkpoint(directory, stem: str, pair: GanPair, extra: dict | None = None) -> Path:
    """Write ``stem.gen.mgpv``, ``stem.disc.mgpv`` and the ``stem.manifest`` sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    pair.generator.params.save(directory / f"{stem}.gen.mgpv")
    pair.discriminator.params.save(directory / f"{stem}.disc.mgpv")
    entries = {
        "generator.spec": spec_to_text(pair.generator.spec),
        "discriminator.spec": spec_to_text(pair.discriminator.spec),
        "discriminator.head": pair.discriminator.head,
        "discriminator.n_classes": pair.discriminator.n_classes,
        "loss.family": pair.loss.family,
        "loss.lambda_gp": repr(pair.loss.lambda_gp),
        "loss.lambda_cls": repr(pair.loss.lambda_cls),
    }
    entries.update(extra or {})
    manifest = directory / f"{stem}.manifest"
    write_manifest(manifest, entries)
    return manifest


def checkpoint_stem(path) -> Path:
    """Accept the manifest, either parameter file, or the bare stem."""
    p = Path(path)
    for suffix in (".manifest", ".gen.mgpv", ".disc.mgpv"):
        if p.name.endswith(suffix):
            return p.with_name(p.name[: -len(suffix)])
    return p


def load_checkpoint(path) -> tuple[GanPair, dict[str, str]]:
    stem = checkpoint_stem(path)
    manifest_path = stem.with_name(stem.name + ".manifest")
    if not manifest_path.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {manifest_path}")
    m = read_manifest(manifest_path)
    g_params = ParamVector.load(stem.with_name(stem.name + ".gen.mgpv"))
    d_params = ParamVector.load(stem.with_name(stem.name + ".disc.mgpv"))
    try:
        gen = Generator(spec_from_text(m["generator.spec"]), g_params)
        disc = Discriminator(spec_from_text(m["discriminator.spec"]), d_params, m["discriminator.head"],
                             int(m["discriminator.n_classes"]))
        loss = LossConfig(m["loss.family"], float(m["loss.lambda_gp"]), float(m["loss.lambda_cls"]))
    except (KeyError, ValueError) as e:
        raise ConfigError(f"checkpoint manifest does not match its parameter files: {e}") from e
    return GanPair(gen, disc, loss), m
