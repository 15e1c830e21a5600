import numpy as np
import pytest

from mgf.autodiff import ParamVector, Tensor, tsum
from mgf.errors import ConfigError, ShapeError
from mgf.models import (
    Discriminator,
    Generator,
    GanPair,
    LossConfig,
    MLPSpec,
    build_pair,
    class_target,
    generate,
    gradient_penalty,
    interpolate,
    loss_acgan,
    loss_discriminator,
    loss_generator,
    sample_latent,
)
from oracles import central_diff, leaky, max_rel_err, mlp_np, softplus


def linear_critic(w, head="critic", n_classes=0):
    w = np.asarray(w, dtype=np.float64).reshape(len(w), -1)
    spec = MLPSpec((w.shape[0], w.shape[1]), output_activation="identity", bias=False)
    return Discriminator(spec, ParamVector.from_arrays({"W0": w}), head, n_classes)


# -- latent sampling and generation ----------------------------------------------------


def test_latent_is_reproducible():
    a = sample_latent(np.random.default_rng(9), 4, 3)
    b = sample_latent(np.random.default_rng(9), 4, 3)
    assert a.tobytes() == b.tobytes()


def test_latent_statistics():
    z = sample_latent(np.random.default_rng(20240101), 10_000, 1)
    assert -0.05 < z.mean() < 0.05
    assert 0.95 < z.std() < 1.05


@pytest.mark.parametrize("batch,d", [(0, 3), (3, 0), (-1, 2)])
def test_latent_rejects_degenerate_sizes(batch, d):
    with pytest.raises(ValueError):
        sample_latent(np.random.default_rng(0), batch, d)


def test_zero_final_layer_gives_zero_output():
    g = Generator.create(5, 4, (8,), np.random.default_rng(0))
    g.params["W1"][:] = 0.0
    g.params["b1"][:] = 0.0
    out = generate(g, np.random.default_rng(1).normal(size=(6, 5)) * 100)
    assert not out.any()


def test_generate_shape_bounds_and_determinism():
    g = Generator.create(16, 64, rng=np.random.default_rng(0))
    z = sample_latent(np.random.default_rng(1), 7, 16) * 50
    out = generate(g, z)
    assert out.shape == (7, 64)
    assert np.all(np.abs(out) <= 1.0)
    assert out.tobytes() == generate(g, z).tobytes()


def test_generate_matches_numpy_forward():
    g = Generator.create(4, 3, (5, 6), np.random.default_rng(2))
    z = np.random.default_rng(3).normal(size=(8, 4))
    np.testing.assert_allclose(generate(g, z), mlp_np(g.params.arrays(), z, out="tanh"), rtol=1e-13)


def test_generate_latent_mismatch():
    g = Generator.create(4, 3, (5,), np.random.default_rng(2))
    with pytest.raises(ShapeError):
        generate(g, np.zeros((2, 5)))


def test_glorot_init_range_and_zero_bias():
    g = Generator.create(16, 64, rng=np.random.default_rng(0))
    for name, arr in g.params.arrays().items():
        if name.startswith("W"):
            lim = np.sqrt(6 / sum(arr.shape))
            assert np.all(np.abs(arr) <= lim)
        else:
            assert not arr.any()


# -- interpolation ------------------------------------------------------------------------


def test_interpolate_forced_alphas():
    real, fake = np.array([[2.0, 0.0]]), np.array([[0.0, 2.0]])
    np.testing.assert_array_equal(interpolate(real, fake, alpha=1.0), real)
    np.testing.assert_array_equal(interpolate(real, fake, alpha=0.0), fake)
    np.testing.assert_array_equal(interpolate(real, fake, alpha=0.5), [[1.0, 1.0]])


def test_interpolate_stays_in_hull():
    rng = np.random.default_rng(4)
    for _ in range(200):
        a, b = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        x = interpolate(a, b, rng)
        assert np.all(x >= np.minimum(a, b) - 1e-15) and np.all(x <= np.maximum(a, b) + 1e-15)


def test_interpolate_alpha_is_per_row():
    rng = np.random.default_rng(0)
    x = interpolate(np.ones((500, 2)), np.zeros((500, 2)), rng)
    np.testing.assert_array_equal(x[:, 0], x[:, 1])
    assert len(np.unique(x[:, 0])) == 500


def test_interpolate_shape_mismatch():
    with pytest.raises(ShapeError):
        interpolate(np.ones((2, 2)), np.ones((3, 2)), np.random.default_rng(0))


# -- discriminator loss -------------------------------------------------------------------


def test_linear_critic_closed_form():
    d = linear_critic([1.0, 0.0]).bind()
    loss = loss_discriminator(LossConfig("wgan_gp", 10.0), d, [[1.0, 0.0]], [[0.0, 0.0]], interp_alpha=0.5)
    assert loss.item() == pytest.approx(-1.0, abs=1e-15)


def test_unit_norm_linear_critic_has_zero_penalty():
    w = np.array([0.6, 0.8])
    x = np.random.default_rng(0).normal(size=(9, 2))
    assert gradient_penalty(linear_critic(w).bind(), x).item() == pytest.approx(0.0, abs=1e-15)


def test_identical_batches_cancel():
    d = build_pair(3, LossConfig("wgan_gp", 0.0), rng=np.random.default_rng(0)).discriminator.bind()
    x = np.random.default_rng(1).uniform(-1, 1, size=(6, 3))
    assert loss_discriminator(LossConfig("wgan_gp", 0.0), d, x, x).item() == 0.0


def test_zero_lambda_is_plain_difference_and_swap_negates():
    pair = build_pair(3, LossConfig("wgan_gp", 0.0), rng=np.random.default_rng(0))
    rng = np.random.default_rng(1)
    real, fake = rng.uniform(-1, 1, size=(6, 3)), rng.uniform(-1, 1, size=(6, 3))
    d = pair.discriminator
    cfg = LossConfig("wgan_gp", 0.0)
    expected = d.apply(fake).mean() - d.apply(real).mean()
    ours = loss_discriminator(cfg, d.bind(), real, fake).item()
    assert ours == pytest.approx(expected, rel=0, abs=1e-15)
    assert loss_discriminator(cfg, d.bind(), fake, real).item() == -ours


def test_bce_losses_at_zero_critic():
    d = linear_critic([0.0, 0.0], head="probability").bind()
    x = np.ones((3, 2))
    cfg = LossConfig("nonsaturating_bce")
    assert loss_discriminator(cfg, d, x, x).item() == pytest.approx(2 * np.log(2))
    assert loss_generator(cfg, d, Tensor(x)).item() == pytest.approx(np.log(2))


def test_generator_loss_examples():
    d = linear_critic([1.0, 0.0]).bind()
    assert loss_generator(LossConfig(), d, Tensor([[2.0, 0.0]])).item() == -2.0
    assert loss_generator(LossConfig(), linear_critic([0.0, 0.0]).bind(), Tensor([[2.0, 0.0]])).item() == 0.0


def test_head_family_mismatch():
    d = linear_critic([1.0, 0.0], head="probability").bind()
    with pytest.raises(ConfigError):
        loss_discriminator(LossConfig("wgan_gp"), d, np.ones((1, 2)), np.ones((1, 2)))
    with pytest.raises(ConfigError):
        loss_generator(LossConfig("wgan_gp"), d, Tensor(np.ones((1, 2))))


def _critic_np(params, x):
    return mlp_np(params, x)[:, 0]


def _penalty_np(params, x_hat, h=1e-6):
    # input gradient by central differences of a plain numpy critic
    g = np.zeros_like(x_hat)
    for j in range(x_hat.shape[1]):
        e = np.zeros(x_hat.shape[1])
        e[j] = h
        g[:, j] = (_critic_np(params, x_hat + e) - _critic_np(params, x_hat - e)) / (2 * h)
    return np.mean((np.linalg.norm(g, axis=1) - 1.0) ** 2)


def test_penalty_value_matches_numpy_oracle():
    rng = np.random.default_rng(8)
    for _ in range(20):
        d = Discriminator.create(3, (6, 5), rng=rng)
        x_hat = rng.uniform(-1, 1, size=(4, 3))
        ours = gradient_penalty(d.bind(), x_hat).item()
        assert ours == pytest.approx(_penalty_np(d.params.arrays(), x_hat), rel=1e-6)


# -- gradients through the loss families ------------------------------------------------


def _param_fd(net, loss_of):
    """Central differences of ``loss_of()`` over every entry of ``net.params``."""
    base = net.params.values.copy()

    def f(v):
        net.params.values[:] = v
        return loss_of()

    g = central_diff(f, base)
    net.params.values[:] = base
    return g


@pytest.mark.parametrize("family", ["wgan_gp", "nonsaturating_bce", "acgan"])
def test_discriminator_parameter_gradients(family):
    rng = np.random.default_rng(hash(family) % 2**32)
    cfg = LossConfig(family)
    tol = 1e-3 if family != "nonsaturating_bce" else 1e-4
    worst = 0.0
    for _ in range(10):
        pair = build_pair(2, cfg, n_classes=3, latent_dim=3, gen_hidden=(4,), disc_hidden=(5,), rng=rng)
        d = pair.discriminator
        d.spec = MLPSpec(d.spec.widths, "tanh", "identity")  # smooth critic so FD is well defined
        real, fake = rng.uniform(-1, 1, size=(4, 2)), rng.uniform(-1, 1, size=(4, 2))
        labels = rng.integers(0, 3, size=4)
        alpha = rng.uniform(size=4)

        def loss_of():
            return loss_discriminator(cfg, d.bind(), real, fake, labels=labels, interp_alpha=alpha).item()

        bound = d.bind()
        ours = bound.gradient(loss_discriminator(cfg, bound, real, fake, labels=labels, interp_alpha=alpha)).values
        worst = max(worst, max_rel_err(ours, _param_fd(d, loss_of)))
    assert worst < tol


@pytest.mark.parametrize("family", ["wgan_gp", "nonsaturating_bce", "acgan"])
def test_generator_parameter_gradients(family):
    rng = np.random.default_rng(3 + len(family))
    cfg = LossConfig(family)
    worst = 0.0
    for _ in range(10):
        pair = build_pair(2, cfg, n_classes=3, latent_dim=3, gen_hidden=(4,), disc_hidden=(5,), rng=rng)
        g, d = pair.generator, pair.discriminator
        g.spec = MLPSpec(g.spec.widths, "tanh", "tanh")
        d.spec = MLPSpec(d.spec.widths, "tanh", "identity")
        z = rng.normal(size=(5, 3))
        target = class_target([1], 3)

        def loss_of():
            return loss_generator(cfg, d.bind(False), Tensor(generate(g, z)), target).item()

        gb = g.bind()
        ours = gb.gradient(loss_generator(cfg, d.bind(False), gb(z), target)).values
        worst = max(worst, max_rel_err(ours, _param_fd(g, loss_of)))
    assert worst < 1e-4


def test_acgan_uniform_logits_cost_ln10():
    d = linear_critic(np.zeros((4, 11)), head="class_aware", n_classes=10).bind()
    loss = loss_acgan(LossConfig("acgan"), d, np.ones((3, 4)), [0, 5, 9])
    assert loss.item() == pytest.approx(2.302585092994046, abs=1e-12)


def test_acgan_margin_drives_loss_to_zero():
    w = np.zeros((2, 4))
    losses = []
    for margin in (1.0, 5.0, 20.0):
        w[0, 2] = margin  # class 1 logit
        d = linear_critic(w, head="class_aware", n_classes=3).bind()
        losses.append(loss_acgan(LossConfig("acgan"), d, np.array([[1.0, 0.0]]), [1]).item())
    assert losses[0] > losses[1] > losses[2] and losses[2] < 1e-8


def test_acgan_label_out_of_range_and_wrong_head():
    d = linear_critic(np.zeros((2, 4)), head="class_aware", n_classes=3).bind()
    with pytest.raises(ValueError):
        loss_acgan(LossConfig("acgan"), d, np.ones((1, 2)), [3])
    with pytest.raises(ConfigError):
        loss_acgan(LossConfig("acgan"), linear_critic([1.0, 0.0]).bind(), np.ones((1, 2)), [0])


def test_class_target():
    np.testing.assert_array_equal(class_target([2], 4), [0, 0, 1, 0])
    np.testing.assert_array_equal(class_target([0, 3], 4), [0.5, 0, 0, 0.5])


@pytest.mark.parametrize("family", ["wgan_gp", "nonsaturating_bce", "acgan"])
def test_all_families_finite_on_random_inputs(family):
    rng = np.random.default_rng(100)
    cfg = LossConfig(family)
    pair = build_pair(3, cfg, n_classes=4, latent_dim=4, gen_hidden=(8,), disc_hidden=(8,), rng=rng)
    for _ in range(1000):
        real, fake = rng.uniform(-1, 1, size=(3, 3)), rng.uniform(-1, 1, size=(3, 3))
        db = pair.discriminator.bind()
        ld = loss_discriminator(cfg, db, real, fake, rng, labels=rng.integers(0, 4, 3))
        gd = db.gradient(ld).values
        gb = pair.generator.bind()
        lg = loss_generator(cfg, pair.discriminator.bind(False), gb(rng.normal(size=(3, 4))), 1)
        gg = gb.gradient(lg).values
        assert np.isfinite(ld.item()) and np.isfinite(lg.item())
        assert np.all(np.isfinite(gd)) and np.all(np.isfinite(gg))


# -- pair ---------------------------------------------------------------------------------


def test_pair_clone_is_independent():
    pair = build_pair(2, LossConfig(), rng=np.random.default_rng(0))
    c = pair.clone()
    assert c.checksum() == pair.checksum()
    c.generator.params.values += 1
    c.discriminator.params.values += 1
    assert c.checksum()[0] != pair.checksum()[0] and c.checksum()[1] != pair.checksum()[1]


def test_heads_and_arity():
    assert build_pair(2, LossConfig("acgan"), n_classes=10).discriminator.spec.widths[-1] == 11
    assert build_pair(2, LossConfig("nonsaturating_bce")).discriminator.head == "probability"
    with pytest.raises(ConfigError):
        Discriminator.create(2, head="class_aware", n_classes=0)
    with pytest.raises(ConfigError):
        LossConfig("hinge")
    with pytest.raises(ConfigError):
        LossConfig("wgan_gp", lambda_gp=-1)
