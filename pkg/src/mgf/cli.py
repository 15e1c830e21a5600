"""Command-line entry points.

Exit statuses: 0 ok, 2 configuration, 3 data, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from mgf.autodiff import ParamVector
from mgf.config import RunConfig, load_config, parse_config
from mgf.errors import (
    ConfigError,
    NumericOverflowError,
    ParseError,
    StructureError,
    TaskError,
)
from mgf.evaluation import ReferenceClassifier, adaptation_benchmark, report_csv, report_table
from mgf.io import (
    LossCsv,
    checkpoint_stem,
    image_grid,
    load_checkpoint,
    read_manifest,
    save_checkpoint,
    spec_from_text,
    spec_to_text,
    write_manifest,
    write_pgm,
    write_scatter_csv,
)
from mgf.meta import adapt, outer_loop
from mgf.models import GanPair, generate, sample_latent
from mgf.tasks import Task, export_mnist5k_idx

log = logging.getLogger("mgf")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(Exception):
    """Dataset or checkpoint unreachable or unreadable."""


# -- helpers -------------------------------------------------------------------------


def _config_entries(cfg: RunConfig) -> dict:
    entries = {f"config.{line.split(' = ', 1)[0]}": line.split(" = ", 1)[1] for line in cfg.to_lines()}
    entries["config.base_dir"] = str(cfg.base_dir.resolve())
    return entries


def config_from_manifest(manifest: dict) -> RunConfig:
    lines = [f"{k[len('config.'):]} = {v}" for k, v in manifest.items()
             if k.startswith("config.") and k != "config.base_dir"]
    if not lines:
        raise ConfigError("checkpoint manifest carries no run configuration")
    return parse_config("\n".join(lines), manifest.get("config.base_dir", "."))


def _load_data(cfg: RunConfig):
    try:
        domains = cfg.load_domains()
    except (OSError, ParseError, ImportError) as e:
        raise DataError(str(e)) from e
    return domains, cfg.partition(domains)


def _n_classes(cfg: RunConfig, domains) -> int:
    return max(d.cls.label for d in domains) + 1 if cfg.loss.family == "acgan" else 0


def _find_task(domains, label: int, loss) -> Task:
    for d in domains:
        if d.cls.label == label:
            return Task((d.cls,), (d,), loss)
    raise TaskError(f"class {label} not present in the dataset (have {sorted(d.cls.label for d in domains)})")


def _write_samples(path_stem: Path, samples: np.ndarray, image: bool) -> Path:
    if image:
        cols = 8
        rows = max(1, -(-len(samples) // cols))
        path = path_stem.with_suffix(".pgm")
        write_pgm(path, image_grid(samples, rows, cols))
    else:
        path = path_stem.with_suffix(".csv")
        write_scatter_csv(path, samples)
    return path


def _classifier(cfg: RunConfig, domains) -> ReferenceClassifier:
    """Fit the reference classifier once per output directory and cache it there."""
    out = cfg.out_path
    params_path, manifest_path = out / "classifier.mgpv", out / "classifier.manifest"
    if params_path.exists() and manifest_path.exists():
        m = read_manifest(manifest_path)
        clf = ReferenceClassifier(spec_from_text(m["spec"]), ParamVector.load(params_path), int(m["seed"]))
        clf.test_accuracy = float(m["test_accuracy"])
        return clf
    clf = ReferenceClassifier.fit(domains, seed=cfg.seed, epochs=cfg.eval.classifier_epochs)
    out.mkdir(parents=True, exist_ok=True)
    clf.params.save(params_path)
    write_manifest(manifest_path, {"spec": spec_to_text(clf.spec), "seed": clf.seed,
                                   "test_accuracy": repr(clf.test_accuracy)})
    log.info("reference classifier test accuracy %.4f", clf.test_accuracy)
    return clf


# -- commands -----------------------------------------------------------------------------


def cmd_meta_train(args) -> int:
    cfg = load_config(args.config)
    domains, part = _load_data(cfg)
    pair = cfg.build_pair(domains[0].samples.shape[1], _n_classes(cfg, domains))
    out = cfg.out_path
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    deterministic = args.single_thread
    workers = 1 if deterministic else args.workers
    t0 = time.perf_counter()

    def save(epoch: int, p: GanPair, stem: str | None = None):
        extra = _config_entries(cfg)
        extra.update({"seed": cfg.seed, "epoch": epoch,
                      "meta_train_minutes": f"{(time.perf_counter() - t0) / 60.0:.6f}"})
        return save_checkpoint(ckpt_dir, stem or f"epoch_{epoch:06d}", p, extra)

    save(0, pair)
    if cfg.epochs > 0:
        def on_epoch_end(epoch, p):
            done = epoch + 1
            if cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done != cfg.epochs:
                save(done, p)

        with LossCsv(out / "losses.csv") as loss_log:
            outer_loop(part, pair, cfg.meta, cfg.epochs, seed=cfg.seed, hooks=[loss_log],
                       on_epoch_end=on_epoch_end, workers=workers, timed=not deterministic,
                       on_overflow=lambda e, p: save(e, p, f"overflow_epoch_{e:06d}"))
        save(cfg.epochs, pair)
    print(f"wrote {ckpt_dir / f'epoch_{cfg.epochs:06d}.manifest'}")
    return EXIT_OK


def _load_ckpt(path):
    stem = checkpoint_stem(path)
    if not stem.with_name(stem.name + ".manifest").exists():
        raise DataError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except OSError as e:
        raise DataError(str(e)) from e
    except (ParseError, StructureError) as e:
        raise ConfigError(f"checkpoint does not match its manifest: {e}") from e


def cmd_adapt(args) -> int:
    pair, manifest = _load_ckpt(args.checkpoint)
    cfg = config_from_manifest(manifest)
    domains, _ = _load_data(cfg)
    task = _find_task(domains, args.cls, pair.loss)
    seed = cfg.seed if args.seed is None else args.seed
    lr = cfg.eval.lr if args.lr is None else args.lr
    adapted = adapt(pair, task, args.shots, args.steps, lr, np.random.default_rng([seed, 17]), cfg.eval.optimizer,
                    cfg.eval.critic_steps, **cfg.eval.train_kw())
    out = Path(args.out) if args.out else cfg.out_path / f"adapt_class{args.cls}"
    out.mkdir(parents=True, exist_ok=True)
    z = sample_latent(np.random.default_rng([seed, 23]), args.count, pair.generator.latent_dim)
    before = _write_samples(out / "before", generate(pair.generator, z), cfg.is_image)
    after = _write_samples(out / "after", generate(adapted.generator, z), cfg.is_image)
    extra = {k: v for k, v in manifest.items() if k.startswith("config.") or k in ("seed", "epoch")}
    extra.update({"adapt.class": args.cls, "adapt.shots": args.shots, "adapt.steps": args.steps, "adapt.lr": repr(lr),
                  "adapt.seed": seed})
    save_checkpoint(out, "adapted", adapted, extra)
    print(f"wrote {before}, {after}, {out / 'adapted.manifest'}")
    return EXIT_OK


def cmd_generate(args) -> int:
    pair, manifest = _load_ckpt(args.checkpoint)
    cfg = config_from_manifest(manifest)
    seed = cfg.seed if args.seed is None else args.seed
    z = sample_latent(np.random.default_rng([seed, 29]), args.count, pair.generator.latent_dim)
    out = Path(args.out) if args.out else cfg.out_path / "samples"
    out.mkdir(parents=True, exist_ok=True)
    path = _write_samples(out / checkpoint_stem(args.checkpoint).name, generate(pair.generator, z), cfg.is_image)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    pair, manifest = _load_ckpt(args.checkpoint)
    domains, part = _load_data(cfg)
    clf = _classifier(cfg, domains) if cfg.is_image else None
    reports = adaptation_benchmark(pair, part, cfg.benchmark(), seed=cfg.seed, clf=clf, image=cfg.is_image,
                                   epochs=int(manifest.get("epoch", 0)),
                                   meta_train_minutes=float(manifest.get("meta_train_minutes", 0.0)))
    out = cfg.out_path
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report_csv(reports))
    (out / "report.txt").write_text(report_table(reports))
    sys.stdout.write(report_table(reports))
    return EXIT_OK


def cmd_export_mnist(args) -> int:
    try:
        images, labels = export_mnist5k_idx(args.out_dir)
    except (OSError, ImportError) as e:
        raise DataError(str(e)) from e
    print(f"wrote {images} and {labels}")
    return EXIT_OK


# -- entry point -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mgf", description="Meta-learning for GANs: meta-train, adapt, evaluate.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("meta-train", help="run the outer loop from a config file")
    s.add_argument("config")
    s.add_argument("--single-thread", action="store_true",
                   help="deterministic path: one worker, wall-clock column written as NA")
    s.add_argument("--workers", type=int, default=1, help="threads for averaged outer mode")
    s.set_defaults(func=cmd_meta_train)

    s = sub.add_parser("adapt", help="fine-tune a checkpoint on K shots of one class")
    s.add_argument("checkpoint")
    s.add_argument("--class", dest="cls", type=int, required=True)
    s.add_argument("--shots", type=int, required=True)
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--lr", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--count", type=int, default=64, help="samples in the before/after artifacts")
    s.add_argument("--out")
    s.set_defaults(func=cmd_adapt)

    s = sub.add_parser("generate", help="sample from a checkpoint's generator")
    s.add_argument("checkpoint")
    s.add_argument("--count", type=int, default=64)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("evaluate", help="adapted / unadapted / scratch report on the held-out tasks")
    s.add_argument("checkpoint")
    s.add_argument("config")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("export-mnist", help="write the bundled 5k MNIST subset as IDX files")
    s.add_argument("out_dir")
    s.set_defaults(func=cmd_export_mnist)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, TaskError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericOverflowError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
