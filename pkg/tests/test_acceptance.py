"""End-to-end acceptance checks.

Each test prints one ``CRITERION n: PASS|FAIL`` line with the measured
quantities, then asserts.  Tolerances and seed counts are fixed here; the
long-running efficacy runs (4 to 6) use the shipped configs under ``configs/``.
Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines.
"""

import hashlib
import math
import struct
import time
from pathlib import Path

import numpy as np
import pytest

from mgf.autodiff import Tensor
from mgf.cli import main
from mgf.config import load_config, parse_config
from mgf.errors import ParseError, TaskError
from mgf.evaluation import ReferenceClassifier, adaptation_benchmark
from mgf.meta import (
    MetaConfig,
    discriminator_grad,
    generator_grad,
    inner_loop_maml,
    inner_loop_reptile,
    outer_loop,
    split_train_dev,
    task_rng,
)
from mgf.models import (
    LossConfig,
    MLPSpec,
    build_pair,
    class_target,
    generate,
    gradient_penalty,
    loss_discriminator,
    loss_generator,
)
from mgf.tasks import ClassId, Domain, Task, draw_k, make_partition, read_idx, scale_domains, synth_family_gaussian

from oracles import central_diff, max_rel_err
from test_meta import ScriptedRng, one_d_task, scalar_pair

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
FAMILIES = ("wgan_gp", "nonsaturating_bce", "acgan")


def verdict(n: int, ok: bool, detail: str) -> None:
    print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"criterion {n}: {detail}"


def param_fd(net, loss_of):
    base = net.params.values.copy()

    def f(v):
        net.params.values[:] = v
        return loss_of()

    g = central_diff(f, base)
    net.params.values[:] = base
    return g


# -- 1 ------------------------------------------------------------------------------------


def test_criterion_1_gradient_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1001)
    worst = {}
    instances = 100
    for family in FAMILIES:
        cfg = LossConfig(family)
        for _ in range(instances):
            pair = build_pair(2, cfg, n_classes=3, latent_dim=3, gen_hidden=(4,), disc_hidden=(5,), rng=rng)
            g, d = pair.generator, pair.discriminator
            # smooth activations so central differences are well defined everywhere
            g.spec = MLPSpec(g.spec.widths, "tanh", "tanh")
            d.spec = MLPSpec(d.spec.widths, "tanh", "identity")
            real, fake = rng.uniform(-1, 1, size=(4, 2)), rng.uniform(-1, 1, size=(4, 2))
            labels = rng.integers(0, 3, size=4)
            alpha = rng.uniform(size=4)
            z = rng.normal(size=(5, 3))
            target = class_target([int(labels[0])], 3)

            def d_loss():
                return loss_discriminator(cfg, d.bind(), real, fake, labels=labels, interp_alpha=alpha).item()

            b = d.bind()
            ours = b.gradient(loss_discriminator(cfg, b, real, fake, labels=labels, interp_alpha=alpha)).values
            key = f"{family}/discriminator"
            worst[key] = max(worst.get(key, 0.0), max_rel_err(ours, param_fd(d, d_loss)))

            def g_loss():
                return loss_generator(cfg, d.bind(False), Tensor(generate(g, z)), target).item()

            gb = g.bind()
            ours = gb.gradient(loss_generator(cfg, d.bind(False), gb(z), target)).values
            key = f"{family}/generator"
            worst[key] = max(worst.get(key, 0.0), max_rel_err(ours, param_fd(g, g_loss)))

            if family == "wgan_gp":
                x_hat = alpha[:, None] * real + (1 - alpha[:, None]) * fake

                def p_loss():
                    return gradient_penalty(d.bind(), x_hat).item()

                b = d.bind()
                ours = b.gradient(gradient_penalty(b, x_hat)).values
                worst["penalty"] = max(worst.get("penalty", 0.0), max_rel_err(ours, param_fd(d, p_loss)))
    elapsed = time.perf_counter() - t0
    # losses that contain the penalty go through the second-order path
    tol = {k: 1e-3 if k == "penalty" or k.endswith("discriminator") and not k.startswith("nonsat") else 1e-4
           for k in worst}
    ok = all(worst[k] < tol[k] for k in worst) and elapsed < 60
    detail = ", ".join(f"{k}={worst[k]:.1e}(<{tol[k]:g})" for k in sorted(worst))
    verdict(1, ok, f"{instances} instances/family; {detail}; {elapsed:.1f}s (<60s)")


# -- 2 ------------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def ring_partition():
    doms = scale_domains(synth_family_gaussian(4, 40, np.random.default_rng(0)), 0.4)
    return make_partition(doms, {3}, 1, loss=LossConfig("acgan"))


def small_pair(family="wgan_gp", seed=0):
    return build_pair(2, LossConfig(family), 4, latent_dim=3, gen_hidden=(6,), disc_hidden=(6,),
                      rng=np.random.default_rng(seed))


def test_criterion_2_algorithm_reductions(ring_partition):
    t0 = time.perf_counter()
    part = ring_partition
    checks = {}

    # MAML with L=0 is the plain dev-split gradient
    err = 0.0
    for family in FAMILIES:
        pair, task = small_pair(family), part.train_tasks[1]
        res = inner_loop_maml(task, pair, MetaConfig("maml", inner_steps=0, shots=5), np.random.default_rng(3))
        rng = np.random.default_rng(3)
        x, y = task.pool()
        _, (x_dev, y_dev) = split_train_dev(x, 5, rng, y)
        fake = generate(pair.generator, rng.standard_normal((5, 3)))
        _, gd = discriminator_grad(pair.loss, pair.discriminator, x_dev, y_dev, fake, rng)
        target = class_target([1], 4) if family == "acgan" else None
        _, gg = generator_grad(pair.loss, pair.generator, pair.discriminator, rng.standard_normal((5, 3)), target)
        err = max(err, np.max(np.abs(res.grad_d.values - gd.values)), np.max(np.abs(res.grad_g.values - gg.values)))
    checks["maml L=0"] = (err < 1e-12, f"{err:.1e}")

    # Reptile with L=0 or alpha=0 moves nothing
    zero = True
    for cfg in (MetaConfig(inner_steps=0, shots=3), MetaConfig(inner_lr=0.0, shots=3, inner_steps=2)):
        res = inner_loop_reptile(part.train_tasks[0], small_pair(), cfg, np.random.default_rng(1))
        zero &= not res.grad_d.values.any() and not res.grad_g.values.any()
    checks["reptile zero"] = (zero, "exact" if zero else "nonzero")

    # Reptile L=1, K=1 is alpha times the single-step gradient
    alpha, err = 0.05, 0.0
    for family in FAMILIES:
        pair, task = small_pair(family), part.train_tasks[2]
        res = inner_loop_reptile(task, pair, MetaConfig(inner_lr=alpha, inner_steps=1, shots=1),
                                 np.random.default_rng(9))
        rng = np.random.default_rng(9)
        x, y = task.pool()
        idx = rng.permutation(len(x))[:1]
        z = rng.standard_normal((1, 3))
        fake = generate(pair.generator, z)
        _, gd = discriminator_grad(pair.loss, pair.discriminator, x[idx], y[idx], fake, rng)
        err = max(err, np.max(np.abs(res.grad_d.values - alpha * gd.values)))
    checks["reptile L=1,K=1"] = (err < 1e-12, f"{err:.1e}")

    # outer rate 0 is a bitwise fixed point
    fixed = True
    for algorithm in ("maml", "reptile"):
        pair = small_pair()
        before = pair.generator.params.values.tobytes() + pair.discriminator.params.values.tobytes()
        outer_loop(part, pair, MetaConfig(algorithm, outer_lr=0.0, shots=3, task_batch=2), epochs=3, seed=1)
        fixed &= before == pair.generator.params.values.tobytes() + pair.discriminator.params.values.tobytes()
    checks["beta=0"] = (fixed, "bitwise" if fixed else "moved")

    # reptile with rate 1 on one task lands on the adapted clone
    cls = ClassId(0, "c")
    dom = Domain(cls, np.random.default_rng(0).uniform(-0.5, 0.5, size=(20, 2)))
    one = make_partition([dom, Domain(ClassId(1, "h"), np.zeros((3, 2)))], {1}, 1)
    pair = small_pair()
    cfg = MetaConfig(outer_lr=1.0, inner_lr=0.05, inner_steps=2, shots=3, task_batch=1)
    res = inner_loop_reptile(one.train_tasks[0], pair, cfg, task_rng(4, 0, 0))
    outer_loop(one, pair, cfg, epochs=1, seed=4)
    same = (pair.generator.params.values.tobytes() == res.adapted_g.values.tobytes()
            and pair.discriminator.params.values.tobytes() == res.adapted_d.values.tobytes())
    checks["reptile beta=1"] = (same, "bitwise" if same else "differs")

    elapsed = time.perf_counter() - t0
    ok = all(v[0] for v in checks.values())
    verdict(2, ok, "; ".join(f"{k}: {v[1]}" for k, v in checks.items()) + f"; {elapsed:.1f}s")


# -- 3 ------------------------------------------------------------------------------------


def test_criterion_3_hand_traced_maml_step():
    # theta=0.5, phi=0.8, lambda=10, alpha=0.1, pool {2, 3}; split sends 3 to train, 2 to dev;
    # z draws 1.0, -0.5, 2.0, 1.5, -1.0.  A linear critic has |dD/dx| = |phi| everywhere.
    #  1. fake 0.5: dL/dphi = 0.5 - 3 + 20*(0.8-1) = -6.5      -> phi_hat = 1.45
    #  2. dev, fake -0.25: -0.25 - 2 + 20*(1.45-1) = 6.75      -> grad_D
    #  3. dev critic from phi, fake 1.0: 1 - 2 + 20*(-0.2) = -5 -> phi_dev = 1.3
    #  4. generator step vs phi_hat, z=1.5: -1.45*1.5 = -2.175 -> theta_hat = 0.7175
    #  5. generator loss at theta_hat scored by phi_dev, z=-1: -1.3*(-1) = 1.3 -> grad_G
    pair = scalar_pair(0.5, 0.8, "wgan_gp")
    rng = ScriptedRng([1.0, -0.5, 2.0, 1.5, -1.0], uniforms=[0.3, 0.6, 0.9], perms=[[1, 0]])
    res = inner_loop_maml(one_d_task([2.0, 3.0]), pair, MetaConfig("maml", inner_lr=0.1, inner_steps=1, shots=1), rng)
    ed, eg = abs(res.grad_d.values[0] - 6.75), abs(res.grad_g.values[0] - 1.3)
    verdict(3, ed < 1e-12 and eg < 1e-12, f"|grad_D - 6.75|={ed:.1e}, |grad_G - 1.3|={eg:.1e} (<1e-12)")


# -- 4 ------------------------------------------------------------------------------------

EFFICACY_SEEDS = (0, 1, 2, 3, 4)


def test_criterion_4_synthetic_few_shot_efficacy():
    t0 = time.perf_counter()
    base = load_config(CONFIGS / "ring.cfg")
    assert base.meta.algorithm == "reptile" and base.loss.family == "wgan_gp"
    assert base.epochs <= 2000 and base.eval.shots == 8 and base.eval.steps == 200
    rows, wins = [], 0
    for seed in EFFICACY_SEEDS:
        cfg = parse_config("\n".join(base.to_lines()) + f"\nseed = {seed}\n")
        domains = cfg.load_domains()
        part = cfg.partition(domains)
        pair = cfg.build_pair(2, 0)
        outer_loop(part, pair, cfg.meta, cfg.epochs, seed=seed, timed=False)
        r = {m.model: m.mmd for m in adaptation_benchmark(pair, part, cfg.benchmark(), seed=seed)}
        win = r["adapted"] < r["unadapted"] and r["adapted"] < r["scratch"]
        wins += win
        rows.append(f"seed {seed}: adapted {r['adapted']:.3f} unadapted {r['unadapted']:.3f} "
                    f"scratch {r['scratch']:.3f} {'win' if win else 'loss'}")
    elapsed = time.perf_counter() - t0
    print("\n" + "\n".join(rows))
    verdict(4, wins >= 4 and elapsed < 900,
            f"{wins}/5 seeds adapted MMD below unadapted and scratch (need >=4); {elapsed / 60:.1f} min (<15)")


# -- 5 and 6 ------------------------------------------------------------------------------


def _mnist_available() -> bool:
    try:
        from mgf.tasks import mnist5k_path

        return mnist5k_path().exists()
    except ImportError:
        return False


@pytest.fixture(scope="module")
def mnist_runs():
    """Meta-train both families on 14x14 digits 0-8 and evaluate on digit 9 every checkpoint."""
    if not _mnist_available():
        pytest.skip("MNIST subset not installed (pip install .[mnist])")
    t0 = time.perf_counter()
    base = {fam: load_config(CONFIGS / f"mnist14_{fam}.cfg") for fam in ("acgan", "wgan_gp")}
    for cfg in base.values():
        assert cfg.data.side == 14 and cfg.data.held_out == (9,) and cfg.eval.shots == 4
        assert cfg.epochs == base["acgan"].epochs and cfg.checkpoint_every == base["acgan"].checkpoint_every
    domains = base["acgan"].load_domains()
    clf = ReferenceClassifier.fit(domains, seed=0, epochs=base["acgan"].eval.classifier_epochs)
    out, minutes = {}, {}
    for fam, cfg0 in base.items():
        for seed in EFFICACY_SEEDS:
            cfg = parse_config("\n".join(cfg0.to_lines()) + f"\nseed = {seed}\n")
            part = cfg.partition(domains)
            pair = cfg.build_pair(domains[0].samples.shape[1], 10 if fam == "acgan" else 0)
            every = cfg.checkpoint_every or cfg.epochs
            history = []
            for start in range(0, cfg.epochs, every):
                outer_loop(part, pair, cfg.meta, every, seed=seed, start_epoch=start, timed=False)
                reps = {m.model: m for m in adaptation_benchmark(pair, part, cfg.benchmark(), seed=seed, clf=clf,
                                                                  image=True)}
                history.append((start + every, reps))
            out[(fam, seed)] = history
        minutes[fam] = (time.perf_counter() - t0) / 60.0
        t0 = time.perf_counter()
    return out, clf, minutes


def _success(reps) -> bool:
    return int(np.argmax(reps["adapted"].class_probs)) == 9


def test_criterion_5_image_few_shot_protocol(mnist_runs):
    runs, clf, minutes = mnist_runs
    rows, wins, div_ok = [], 0, 0
    for seed in EFFICACY_SEEDS:
        epoch, reps = runs[("acgan", seed)][-1]
        probs = reps["adapted"].class_probs
        win = _success(reps)
        div = reps["unadapted"].diversity
        wins += win
        div_ok += div > 3.0
        rows.append(f"seed {seed}: epoch {epoch} top class {int(np.argmax(probs))} p9={probs[9]:.2f} "
                    f"unadapted diversity {div:.2f}")
    print("\n" + "\n".join(rows))
    verdict(5, wins >= 3 and div_ok == 5 and minutes["acgan"] < 60,
            f"class 9 on top in {wins}/5 seeds (need >=3); unadapted diversity >3 in {div_ok}/5 (need 5/5); "
            f"classifier accuracy {clf.test_accuracy:.3f}; {minutes['acgan']:.1f} min (<60)")


def test_criterion_6_acgan_ordering(mnist_runs):
    runs, _, _ = mnist_runs

    def first_success(history):
        return next((e for e, reps in history if _success(reps)), math.inf)

    rows, wins = [], 0
    for seed in EFFICACY_SEEDS:
        ac, plain = runs[("acgan", seed)], runs[("wgan_gp", seed)]
        # diversity of the meta-trained generators themselves, as in criterion 5
        div_ac, div_pl = ac[-1][1]["unadapted"].diversity, plain[-1][1]["unadapted"].diversity
        e_ac, e_pl = first_success(ac), first_success(plain)
        win = div_ac >= div_pl and e_ac <= e_pl
        wins += win
        rows.append(f"seed {seed}: diversity acgan {div_ac:.2f} plain {div_pl:.2f}; "
                    f"first success acgan {e_ac} plain {e_pl} {'win' if win else 'loss'}")
    print("\n" + "\n".join(rows))
    verdict(6, wins >= 3, f"AC-GAN ordering holds in {wins}/5 seeds (need >=3)")


# -- 7 ------------------------------------------------------------------------------------

DETERMINISM_CFG = """\
seed = 11
epochs = 4
output_dir = out
checkpoint_every = 2
data.n_classes = 5
data.samples_per_class = 60
data.held_out = 4
net.latent_dim = 4
net.gen_hidden = 16
net.disc_hidden = 16
meta.shots = 3
meta.inner_batch = 4
meta.inner_steps = 2
meta.inner_optimizer = adam
meta.inner_lr = 0.001
meta.inner_gen_lr = 0.0002
meta.adam_beta1 = 0.5
meta.adam_beta2 = 0.9
meta.outer_lr = 0.5
"""


def test_criterion_7_determinism(tmp_path):
    digests = []
    for run in ("first", "second"):
        d = tmp_path / run
        d.mkdir()
        (d / "run.cfg").write_text(DETERMINISM_CFG)
        assert main(["meta-train", str(d / "run.cfg"), "--single-thread"]) == 0
        files = [d / "out" / "losses.csv"] + sorted((d / "out" / "checkpoints").glob("*.mgpv"))
        digests.append({p.relative_to(d).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest() for p in files})
    same = digests[0] == digests[1]
    verdict(7, same and len(digests[0]) == 7,
            f"{len(digests[0])} files (loss CSV + 3 checkpoints x 2 nets) {'byte-identical' if same else 'differ'}")


# -- 8 ------------------------------------------------------------------------------------


def _images_idx(n, r, c, payload=None):
    body = payload if payload is not None else bytes(n * r * c)
    return bytes.fromhex("00000803") + struct.pack(">III", n, r, c) + body


def test_criterion_8_data_layer():
    t0 = time.perf_counter()
    checks = {}

    good = read_idx(_images_idx(2, 28, 28, bytes(range(256)) * 6 + bytes(32)))
    checks["good header"] = good.shape == (2, 28, 28) and good.dtype == np.uint8 and good[0, 0, 5] == 5

    def offset_of(buf, magic=None):
        try:
            read_idx(buf, magic)
        except ParseError as e:
            return e.offset
        return None

    checks["bad magic"] = (offset_of(_images_idx(1, 2, 2, bytes(4)), 0x00000801) == 0
                           and offset_of(b"\x01\x00\x08\x03" + bytes(16)) == 0)
    checks["truncation"] = (offset_of(_images_idx(1, 2, 2, bytes(3))) == 16 + 3
                            and offset_of(bytes.fromhex("00000803") + bytes(5)) == 9
                            and offset_of(b"\x00\x00") == 2)

    rng = np.random.default_rng(8)
    disjoint = True
    for _ in range(300):
        n = int(rng.integers(3, 10))
        doms = [Domain(ClassId(i, str(i)), np.zeros((2, 1))) for i in range(n)]
        held = set(rng.choice(n, size=int(rng.integers(1, n - 1)), replace=False).tolist())
        r = int(rng.integers(1, min(3, n - len(held)) + 1))
        part = make_partition(doms, held, r, rng)
        train = {c.label for t in part.train_tasks for c in t.classes}
        test = {c.label for t in part.test_tasks for c in t.classes}
        disjoint &= not (train & test) and test == held
        disjoint &= len(part.train_tasks) == math.comb(n - len(held), r)
    checks["partition disjoint (300 trials)"] = disjoint

    cls = ClassId(9, "nine")
    task = Task((cls,), (Domain(cls, np.arange(8, dtype=np.float64).reshape(8, 1)),))
    x, _ = draw_k(task, 4, np.random.default_rng(0))
    whole, _ = draw_k(task, 8, np.random.default_rng(0))
    bounds = len(set(x.ravel())) == 4 and sorted(whole.ravel()) == list(range(8))
    for k in (0, 9):
        try:
            draw_k(task, k, np.random.default_rng(0))
            bounds = False
        except TaskError:
            pass
    checks["draw_k boundaries"] = bounds

    elapsed = time.perf_counter() - t0
    ok = all(checks.values()) and elapsed < 60
    verdict(8, ok, "; ".join(f"{k}: {'ok' if v else 'FAILED'}" for k, v in checks.items()) + f"; {elapsed:.1f}s")
