"""Loss identities against straight-line re-evaluation, model contracts,
and small training smoke runs."""

import numpy as np
import pytest

from monge_lab.autodiff import Mlp, Tensor, mlp_spec
from monge_lab.datasets import gaussian_spec
from monge_lab.w2gan import (
    FD_H,
    GeneratorNet,
    PotentialPair,
    TrainingConfig,
    default_generator,
    default_potential_pair,
    disc_loss,
    eq_penalty,
    fit_discriminator,
    gen_loss,
    interpolate_pairs,
    load_checkpoint,
    restore_checkpoint,
    save_checkpoint,
    train,
    wgan_baseline_disc_loss,
)

from conftest import mlp_forward_np


def _np_net(mlp):
    """Straight-line closure over an Mlp's current parameters."""
    weights = [w.data for w in mlp.weights]
    biases = [b.data for b in mlp.biases]
    acts = mlp.spec.activations
    return lambda pts: mlp_forward_np(weights, biases, acts, pts)


def _np_fd_grad(net_fn, x, h=FD_H):
    cols = []
    for k in range(x.shape[1]):
        shift = np.zeros_like(x)
        shift[:, k] = h
        cols.append((net_fn(x + shift) - net_fn(x - shift)) / (2.0 * h))
    return np.concatenate(cols, axis=1)


def _small_pair(seed=0, parameterization="direct"):
    return default_potential_pair(2, seed=seed, hidden=(8, 8),
                                  parameterization=parameterization)


# ---------------------------------------------------------------------------
# loss identities (straight-line numpy oracles)
# ---------------------------------------------------------------------------

def test_disc_loss_matches_straight_line_reevaluation():
    rng = np.random.default_rng(0)
    pp = _small_pair(seed=3)
    cfg = TrainingConfig(lambda_ineq=200.0, iterations=1)
    gz = rng.standard_normal((32, 2))
    x = rng.standard_normal((32, 2)) + 1.0
    got = disc_loss(pp, gz, x, cfg)

    phi, psi = _np_net(pp.phi), _np_net(pp.psi)
    l_ot = phi(gz).mean() + psi(x).mean()
    cost = 0.5 * np.sum((gz - x) ** 2, axis=1, keepdims=True)
    viol = np.maximum(phi(gz) + psi(x) - cost, 0.0)
    l_ineq = (viol ** 2).mean()
    total = l_ot - cfg.lambda_ineq * l_ineq

    assert abs(got.l_ot - l_ot) < 1e-12
    assert abs(got.l_ineq - l_ineq) < 1e-12
    assert abs(got.total - total) < 1e-12


def test_disc_loss_constant_potentials_hand_value():
    # phi == psi == 1 on a coincident pair: transport term 2, violation
    # (2 - 0)^2 = 4, so the dual value is 2 - 4 * lambda
    pp = _small_pair(seed=1)
    for net in (pp.phi, pp.psi):
        for w in net.weights:
            w.data[...] = 0.0
        net.biases[-1].data[...] = 1.0
    cfg = TrainingConfig(lambda_ineq=7.0)
    point = np.array([[0.3, -0.7]])
    got = disc_loss(pp, point, point, cfg)
    assert abs(got.l_ot - 2.0) < 1e-15
    assert abs(got.l_ineq - 4.0) < 1e-15
    assert abs(got.total - (2.0 - 28.0)) < 1e-15


def test_disc_loss_translation_equivariance_exact():
    # shifting (phi, psi) -> (phi + c, psi - c) changes nothing
    rng = np.random.default_rng(5)
    gz = rng.standard_normal((64, 2))
    x = rng.standard_normal((64, 2)) + 2.0
    cfg = TrainingConfig(lambda_ineq=200.0)
    pp = _small_pair(seed=9)
    base = disc_loss(pp, gz, x, cfg)
    c = 3.7
    pp.phi.biases[-1].data[...] += c
    pp.psi.biases[-1].data[...] -= c
    shifted = disc_loss(pp, gz, x, cfg)
    assert abs(base.l_ot - shifted.l_ot) < 1e-12
    assert abs(base.l_ineq - shifted.l_ineq) < 1e-12
    assert abs(base.total - shifted.total) < 1e-12
    # the saturation penalty's finite-difference gradients divide the
    # bias-shift rounding by 2h, so it is only invariant to ~1e-10
    cfg_eq = TrainingConfig(lambda_ineq=200.0, lambda_eq=150.0)
    pp.phi.biases[-1].data[...] -= c
    pp.psi.biases[-1].data[...] += c
    base_eq = disc_loss(pp, gz, x, cfg_eq)
    pp.phi.biases[-1].data[...] += c
    pp.psi.biases[-1].data[...] -= c
    shift_eq = disc_loss(pp, gz, x, cfg_eq)
    assert abs(base_eq.l_eq - shift_eq.l_eq) < 1e-9
    assert abs(base_eq.total - shift_eq.total) < 1e-7


def test_disc_loss_interpolated_matches_independent_rederivation():
    rng = np.random.default_rng(8)
    pp = _small_pair(seed=2)
    cfg = TrainingConfig(lambda_ineq=50.0, interpolated_sampling=True)
    gz = rng.standard_normal((16, 2))
    x = rng.standard_normal((16, 2)) + 1.5
    seed = 424242
    got = disc_loss(pp, gz, x, cfg, interp_seed=seed)

    # re-derive the interpolates straight from the counter-based stream
    r = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    e1 = r.uniform(0.0, 1.0, size=(16, 1))
    e2 = r.uniform(0.0, 1.0, size=(16, 1))
    perm = r.permutation(16)
    first = e1 * x + (1.0 - e1) * gz
    second = e2 * x[perm] + (1.0 - e2) * gz[perm]

    phi, psi = _np_net(pp.phi), _np_net(pp.psi)
    l_ot = phi(gz).mean() + psi(x).mean()
    cost = 0.5 * np.sum((first - second) ** 2, axis=1, keepdims=True)
    l_ineq = (np.maximum(phi(first) + psi(second) - cost, 0.0) ** 2).mean()
    assert abs(got.l_ot - l_ot) < 1e-12
    assert abs(got.l_ineq - l_ineq) < 1e-12


def test_eq_penalty_matches_straight_line_reevaluation():
    rng = np.random.default_rng(21)
    pp = _small_pair(seed=4)
    x = rng.standard_normal((12, 2))
    y = rng.standard_normal((12, 2)) + 1.0
    got = eq_penalty(pp, x, y)

    phi, psi = _np_net(pp.phi), _np_net(pp.psi)
    gphi = _np_fd_grad(phi, x)
    t1 = phi(x) + psi(x - gphi) - 0.5 * np.sum(gphi ** 2, axis=1, keepdims=True)
    gpsi = _np_fd_grad(psi, y)
    t2 = phi(y - gpsi) + psi(y) - 0.5 * np.sum(gpsi ** 2, axis=1, keepdims=True)
    want = (t1 ** 2 + t2 ** 2).mean()
    assert abs(got - want) < 1e-12
    assert got >= 0.0


def test_eq_penalty_zero_for_saturating_quadratic():
    # phi(x) = |x|^2/2 transports everything to the origin; with psi == 0
    # the saturation identity holds exactly, and central differences are
    # exact for quadratics.

    class QuadNet:
        in_width = 2

        def forward(self, x, training=False):
            t = x if isinstance(x, Tensor) else Tensor(np.atleast_2d(x))
            return t.square().sum(axis=1, keepdims=True) * 0.5

    class ZeroNet:
        in_width = 2

        def forward(self, x, training=False):
            t = x if isinstance(x, Tensor) else Tensor(np.atleast_2d(x))
            return t.sum(axis=1, keepdims=True) * 0.0

    pp = PotentialPair(QuadNet(), ZeroNet())
    x = np.array([[1.0, 0.0], [0.25, -2.0]])
    assert eq_penalty(pp, x, None) < 1e-12
    with pytest.raises(ValueError):
        eq_penalty(pp, None, None)


def test_wgan_baseline_matches_straight_line_reevaluation():
    rng = np.random.default_rng(31)
    f = Mlp(mlp_spec([2, 8, 1], activation="relu", seed=7), name="critic")
    cfg = TrainingConfig(lambda_gp=10.0)
    gz = rng.standard_normal((20, 2))
    x = rng.standard_normal((20, 2)) + 1.0
    seed = 777
    for variant in ("gp", "lp"):
        _, got = wgan_baseline_disc_loss(f, gz, x, cfg, variant, interp_seed=seed)

        r = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
        u = r.uniform(0.0, 1.0, size=(20, 1))
        x_hat = u * x + (1.0 - u) * gz
        fnp = _np_net(f)
        critic = fnp(x).mean() - fnp(gz).mean()
        g = _np_fd_grad(fnp, x_hat)
        norm = np.sqrt(np.sum(g * g, axis=1, keepdims=True) + 1e-12)
        raw = norm - 1.0 if variant == "gp" else np.maximum(norm - 1.0, 0.0)
        penalty = (raw ** 2).mean()
        assert abs(got["critic"] - critic) < 1e-12
        assert abs(got["penalty"] - penalty) < 1e-12
        assert abs(got["total"] - (critic - 10.0 * penalty)) < 1e-12


def test_wgan_baseline_linear_critic_hand_value():
    # f(x) = w . x has constant gradient w, so the penalty is (|w| - 1)^2
    f = Mlp(mlp_spec([2, 1], activation="none", seed=0), name="lin")
    f.weights[0].data[...] = np.array([[3.0], [4.0]])
    cfg = TrainingConfig(lambda_gp=1.0)
    gz = np.zeros((4, 2))
    x = np.ones((4, 2))
    _, gp = wgan_baseline_disc_loss(f, gz, x, cfg, "gp", interp_seed=1)
    assert abs(gp["penalty"] - 16.0) < 1e-6  # (5 - 1)^2
    assert abs(gp["critic"] - 7.0) < 1e-9    # w . (1,1)
    # under-unit slope: lp penalty vanishes, gp does not
    f.weights[0].data[...] = np.array([[0.3], [0.4]])
    _, lp = wgan_baseline_disc_loss(f, gz, x, cfg, "lp", interp_seed=1)
    _, gp2 = wgan_baseline_disc_loss(f, gz, x, cfg, "gp", interp_seed=1)
    assert lp["penalty"] < 1e-12
    assert gp2["penalty"] > 0.2

    with pytest.raises(ValueError):
        wgan_baseline_disc_loss(f, gz, x, cfg, "wc")


# ---------------------------------------------------------------------------
# sampling helpers
# ---------------------------------------------------------------------------

def test_interpolate_pairs_segment_and_determinism():
    rng = np.random.default_rng(41)
    gz = rng.standard_normal((30, 2))
    x = rng.standard_normal((30, 2)) + 3.0
    f1, s1 = interpolate_pairs(gz, x, seed=9)
    f2, s2 = interpolate_pairs(gz, x, seed=9)
    assert np.array_equal(f1, f2) and np.array_equal(s1, s2)
    # first output lies on the segment between the paired points
    d_total = np.linalg.norm(x - gz, axis=1)
    d_split = (np.linalg.norm(f1 - x, axis=1) + np.linalg.norm(f1 - gz, axis=1))
    assert np.abs(d_split - d_total).max() < 1e-9
    # different seeds decorrelate
    f3, _ = interpolate_pairs(gz, x, seed=10)
    assert not np.allclose(f1, f3)
    with pytest.raises(ValueError):
        interpolate_pairs(gz, x[:5], seed=0)


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

def test_generator_starts_near_identity():
    gen = default_generator(2, seed=0)
    z = np.random.default_rng(3).standard_normal((10_000, 2))
    out = gen.transport(z)
    assert np.linalg.norm(out - z, axis=1).mean() < 0.05


def test_generator_output_transform_and_validation():
    h = Mlp(mlp_spec([2, 8, 2], activation="relu", final_activation="tanh",
                     seed=0), name="h")
    for w in h.weights:
        w.data[...] = 0.0
    gen = GeneratorNet(h, skip=False, output_transform="clipped_affine_tanh")
    z = np.array([[0.5, -3.0], [2.0, 0.0]])
    assert np.allclose(gen.transport(z), np.clip(z, -1.0, 1.0), atol=1e-12)

    with pytest.raises(ValueError):
        GeneratorNet(Mlp(mlp_spec([2, 8, 3], seed=0)), skip=True)
    with pytest.raises(ValueError):
        GeneratorNet(Mlp(mlp_spec([2, 8, 2], seed=0)), output_transform="affine")


def test_potential_pair_validation_and_reparam():
    with pytest.raises(ValueError):
        PotentialPair(Mlp(mlp_spec([2, 4, 1], seed=0)))  # direct without psi
    with pytest.raises(ValueError):
        PotentialPair(Mlp(mlp_spec([2, 4, 1], seed=0)),
                      parameterization="epsilon_reparam")
    pp = _small_pair(seed=11, parameterization="epsilon_reparam")
    assert pp.psi is None  # psi never stored under the reparameterization
    y = np.random.default_rng(0).standard_normal((6, 2))
    want = -pp.phi.predict(y) + pp.epsilon_net.predict(y)
    assert np.allclose(pp.psi_value(y).data, want, atol=1e-12)
    # the eps penalty requires the reparam critic
    direct = _small_pair(seed=12)
    with pytest.raises(ValueError):
        disc_loss(direct, y, y, TrainingConfig(lambda_eps=1.0))


def test_gen_loss_descends_along_critic_gradient():
    # a generator whose parameters are per-sample output shifts: the
    # parametric descent direction must align with -grad phi
    pp = _small_pair(seed=13)
    z = np.random.default_rng(7).standard_normal((50, 2))

    class ShiftGen:
        def __init__(self, n, d):
            self.b = Tensor(np.zeros((n, d)), requires_grad=True)

        def forward(self, z_arr, training=False):
            return Tensor(z_arr) + self.b

    gen = ShiftGen(50, 2)
    loss = gen_loss(pp, gen, z)
    loss.backward()
    descent = -gen.b.grad.ravel()
    field = -pp.phi.input_gradient(z).ravel()
    cos = descent @ field / (np.linalg.norm(descent) * np.linalg.norm(field))
    assert cos > 0.999


def test_potential_transport_map_shape():
    pp = _small_pair(seed=17)
    x = np.random.default_rng(1).standard_normal((25, 2))
    mapped = pp.transport(x)
    assert mapped.shape == (25, 2)
    assert np.allclose(mapped, x - pp.phi.input_gradient(x), atol=1e-12)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_bitwise(tmp_path):
    gen = default_generator(2, seed=5)
    pp = _small_pair(seed=6)
    path = tmp_path / "ckpt.json"
    # move batch-norm stats off their initial values first
    gen.forward(np.random.default_rng(0).standard_normal((32, 2)), training=True)
    save_checkpoint(path, gen, pp)
    from monge_lab.w2gan import _named_state
    orig = {name: arr.copy() for name, arr in _named_state(gen)}

    for _, p in gen.parameters():
        p.data += 1.0
    gen.h.norms[0].running_mean += 9.9
    restore_checkpoint(path, gen, pp)
    for name, arr in _named_state(gen):
        assert np.array_equal(arr, orig[name]), name


def test_checkpoint_version_and_shape_guards(tmp_path):
    gen = default_generator(2, seed=5)
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, gen)
    import json
    payload = json.loads(path.read_text())
    payload["format_version"] = 99
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(payload))
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(bad)

    other = default_generator(3, seed=5)
    with pytest.raises(ValueError, match="shape"):
        restore_checkpoint(path, other)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _tiny_cfg(**kw):
    base = dict(batch=32, iterations=3, n_critic=2, w2_every=2, w2_eval_n=32,
                seed=0)
    base.update(kw)
    return TrainingConfig(**base)


def test_train_smoke_and_determinism(tmp_path):
    src = gaussian_spec([0.0, 0.0], np.eye(2), seed=1)
    tgt = gaussian_spec([1.0, 0.0], np.eye(2), seed=2)

    def run(out):
        res = train(_tiny_cfg(), src, tgt, out_dir=out)
        flat = np.concatenate([p.data.ravel() for _, p in res.generator.parameters()])
        return res, flat

    res1, flat1 = run(tmp_path / "a")
    res2, flat2 = run(tmp_path / "b")
    assert np.array_equal(flat1, flat2)
    assert len(res1.trace.rows) == 3
    assert (tmp_path / "a" / "checkpoint.json").exists()
    assert (tmp_path / "a" / "trace.csv").exists()
    assert not res1.trace.diverged
    # byte-identical traces under the same seed
    assert (tmp_path / "a" / "trace.csv").read_bytes() == \
        (tmp_path / "b" / "trace.csv").read_bytes()
    # w2 was logged on schedule
    assert len(res1.trace.w2_series()) >= 1


def test_train_zero_iterations_writes_initial_checkpoint(tmp_path):
    src = gaussian_spec([0.0, 0.0], np.eye(2), seed=1)
    tgt = gaussian_spec([1.0, 0.0], np.eye(2), seed=2)
    res = train(_tiny_cfg(iterations=0), src, tgt, out_dir=tmp_path)
    assert (tmp_path / "checkpoint.json").exists()
    assert res.trace.rows == []


def test_train_divergence_detector(tmp_path):
    src = gaussian_spec([0.0, 0.0], np.eye(2), seed=1)
    tgt = gaussian_spec([1.0, 0.0], np.eye(2), seed=2)
    cfg = _tiny_cfg(alpha_disc=1e9, iterations=50, w2_every=0)
    res = train(cfg, src, tgt, out_dir=tmp_path)
    assert res.trace.diverged
    assert len(res.trace.rows) < 50
    assert (tmp_path / "checkpoint.json").exists()


def test_training_config_validation():
    with pytest.raises(ValueError):
        TrainingConfig(n_critic=0)
    with pytest.raises(ValueError):
        TrainingConfig(lambda_ineq=-1.0)
    with pytest.raises(ValueError):
        TrainingConfig(alpha_gen=0.0)
    with pytest.raises(ValueError):
        TrainingConfig(batch=0)


def test_fit_discriminator_climbs_dual():
    src = gaussian_spec([0.0, 0.0], np.eye(2), seed=3)
    tgt = gaussian_spec([1.5, 0.0], np.eye(2), seed=4)
    pp = _small_pair(seed=21)
    cfg = TrainingConfig(alpha_disc=2e-4, n_critic=5, batch=128, seed=5)
    values = fit_discriminator(pp, src, tgt, cfg, blocks=20, eval_n=512)
    deltas = np.diff(values)
    assert (deltas > 0).mean() >= 0.9


def test_critic_only_training_recovers_translation_map():
    # A translation by (2, 0) has the affine transport map x + (2, 0); the
    # potential trained against a frozen identity "generator" should encode
    # it through x - grad(phi).
    src = gaussian_spec([0.0, 0.0], np.eye(2), seed=11)
    tgt = gaussian_spec([2.0, 0.0], np.eye(2), seed=12)
    pp = default_potential_pair(2, seed=0)
    cfg = TrainingConfig(batch=256, w2_every=0, seed=0,
                         disc_optimizer="adam", alpha_disc=5e-4, n_critic=5)
    fit_discriminator(pp, src, tgt, cfg, blocks=200)
    rng = np.random.Generator(np.random.Philox(key=np.uint64(778)))
    x = rng.multivariate_normal([0.0, 0.0], np.eye(2), size=1000)
    err = np.linalg.norm(pp.transport(x) - (x + [2.0, 0.0]), axis=1).mean()
    assert err < 0.2


def test_epsilon_slack_nonpositive_after_training():
    # With the reparameterized pair, epsilon(y) = phi(y) + psi(y) is the
    # constraint slack at the diagonal; the hinge penalty keeps it from
    # going positive while the dual value is maximized.
    src = gaussian_spec([0.0, 0.0], np.eye(2), seed=11)
    tgt = gaussian_spec([2.0, 0.0], np.eye(2), seed=12)
    pp = default_potential_pair(2, seed=0, parameterization="epsilon_reparam")
    cfg = TrainingConfig(batch=256, w2_every=0, seed=0, lambda_eps=200.0,
                         disc_optimizer="adam", alpha_disc=5e-4, n_critic=5)
    fit_discriminator(pp, src, tgt, cfg, blocks=200)
    rng = np.random.Generator(np.random.Philox(key=np.uint64(779)))
    y = rng.multivariate_normal([2.0, 0.0], np.eye(2), size=2000)
    eps = pp.epsilon_net.forward(y, training=False).data.ravel()
    assert np.quantile(eps, 0.95) < 0.1
