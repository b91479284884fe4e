import csv

import numpy as np
import pytest

from infinity import diffcore as dc
from infinity.inr import InrArchitecture, SharedInrWeights, inr_forward, reconstruction_loss
from infinity.meta import (
    DivergenceError,
    FieldObservations,
    MetaConfig,
    encode_dataset,
    fit_inr,
    inner_loop_encode,
    meta_gradients,
    meta_train_step,
    reconstruction_mse,
    stack_observations,
)

from . import oracles


def tiny_weights(seed=0, latent=4, width=8, depth=2, m=4, hyper_scale=1.0, out=1):
    arch = InrArchitecture(output_dim=out, num_fourier_features=m, depth=depth, hidden_width=width, latent_dim=latent)
    w = SharedInrWeights.initialize(arch, np.random.default_rng(seed), "p", hyper_scale=hyper_scale)
    rng = np.random.default_rng(seed + 7)
    n = depth + 1
    return w.with_parameters([p.data + (0.1 * rng.standard_normal(p.shape) if i >= n else 0) for i, p in enumerate(w.parameters())])


def random_obs(n_cases=3, n_points=6, seed=0, tag="p", out=1):
    rng = np.random.default_rng(seed)
    return [
        FieldObservations(f"c{i}", tag, rng.uniform(-1, 1, (n_points, 2)), rng.standard_normal((n_points, out)))
        for i in range(n_cases)
    ]


def test_config_validation():
    with pytest.raises(ValueError):
        MetaConfig(inner_steps=-1)
    with pytest.raises(ValueError):
        MetaConfig(outer_lr=0)
    with pytest.raises(ValueError):
        MetaConfig(optimizer="rmsprop")


def test_observation_validation():
    with pytest.raises(ValueError):
        FieldObservations("a", "p", np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(ValueError):
        FieldObservations("a", "p", np.zeros((3, 2)), np.zeros(2))


def test_zero_steps_returns_zero_code():
    w = tiny_weights()
    z = inner_loop_encode(random_obs(1)[0], w, MetaConfig(inner_steps=0))
    np.testing.assert_array_equal(z.z, np.zeros(4))


def test_stationary_start_with_zero_hypernetwork():
    w = tiny_weights(hyper_scale=0.0)
    w = w.with_parameters([*(p.data for p in w.parameters()[:-1]), np.zeros_like(w.hyper_b.data)])
    x = np.random.default_rng(1).uniform(-1, 1, (8, 2))
    obs = FieldObservations("a", "p", x, inr_forward(x, np.zeros(4), w).data)
    np.testing.assert_array_equal(inner_loop_encode(obs, w, MetaConfig(inner_steps=5)).z, np.zeros(4))
    np.testing.assert_array_equal(encode_dataset([obs], w, MetaConfig())["a"].z, np.zeros(4))


def test_one_step_matches_manual_chain_rule():
    w = tiny_weights()
    obs = random_obs(1)[0]
    cfg = MetaConfig(inner_steps=1, inner_lr=0.3)
    expected = -0.3 * oracles.loss_grad_z(obs.points, obs.values, np.zeros(4), oracles.params_of(w))
    np.testing.assert_allclose(inner_loop_encode(obs, w, cfg).z, expected, rtol=1e-10, atol=1e-15)


def test_three_steps_match_numpy_unroll():
    w = tiny_weights()
    obs = random_obs(2)
    cfg = MetaConfig(inner_steps=3, inner_lr=0.5)
    ref = oracles.unrolled_codes([o.points for o in obs], [o.values for o in obs], oracles.params_of(w), 3, 0.5)
    for o, r in zip(obs, ref):
        np.testing.assert_allclose(inner_loop_encode(o, w, cfg).z, r, rtol=1e-9, atol=1e-14)


def test_second_order_meta_gradient_matches_unrolled_fd():
    w = tiny_weights()
    obs = random_obs(3)
    cfg = MetaConfig(inner_steps=3, inner_lr=0.5, points_per_case=None)
    loss, grads = meta_gradients(obs, w, cfg)
    P = oracles.params_of(w)
    xs, ys = [o.points for o in obs], [o.values for o in obs]
    assert loss == pytest.approx(oracles.meta_objective(xs, ys, P, 3, 0.5), rel=1e-12)
    fd = oracles.meta_gradient_fd(xs, ys, P, 3, 0.5)
    ad = np.concatenate([g.ravel() for g in grads])
    rel = np.abs(ad - fd) / (np.abs(fd) + 1e-12)
    assert np.linalg.norm(ad - fd) / np.linalg.norm(fd) < 1e-6
    # coordinate-wise on entries not dominated by finite-difference noise
    assert rel[np.abs(fd) > 1e-6].max() < 1e-4


def test_meta_gradient_differs_from_first_order():
    # dropping the dependence of the codes on the weights changes the gradient
    w = tiny_weights()
    obs = random_obs(2)
    cfg = MetaConfig(inner_steps=3, inner_lr=0.5, points_per_case=None)
    _, grads = meta_gradients(obs, w, cfg)
    codes = [inner_loop_encode(o, w, cfg).z for o in obs]
    first = dc.grad(
        dc.mean(dc.concat([dc.reshape(reconstruction_loss(z, w, o.points, o.values), (1,)) for z, o in zip(codes, obs)], axis=0)),
        w.parameters(),
    )
    assert not np.allclose(grads[-2], first[-2].data)


def test_zero_inner_lr_is_plain_gradient_descent():
    w = tiny_weights()
    obs = random_obs(3)
    cfg = MetaConfig(inner_steps=3, inner_lr=0.0, outer_lr=0.05, points_per_case=None)
    new, _ = meta_train_step(obs, w, cfg)
    losses = [reconstruction_loss(np.zeros(4), w, o.points, o.values) for o in obs]
    total = dc.mean(dc.concat([dc.reshape(l, (1,)) for l in losses], axis=0))
    grads = dc.grad(total, w.parameters())
    for p_new, p, g in zip(new.parameters(), w.parameters(), grads):
        np.testing.assert_allclose(p_new.data, p.data - 0.05 * g.data, rtol=0, atol=1e-12)


def test_optimum_is_fixed_point():
    w = tiny_weights(hyper_scale=0.0)
    x = np.random.default_rng(2).uniform(-1, 1, (2, 5, 2))
    obs = [FieldObservations(f"c{i}", "p", x[i], inr_forward(x[i], np.zeros(4), w).data) for i in range(2)]
    new, loss = meta_train_step(obs, w, MetaConfig(outer_lr=0.1, points_per_case=None))
    assert loss == 0.0
    for a, b in zip(new.parameters(), w.parameters()):
        assert a.data.tobytes() == b.data.tobytes()


def test_step_does_not_mutate_inputs():
    w = tiny_weights()
    before = [p.data.copy() for p in w.parameters()]
    meta_train_step(random_obs(2), w, MetaConfig(points_per_case=None))
    for a, b in zip(before, w.parameters()):
        assert a.tobytes() == b.data.tobytes()


def test_divergence_reports_last_finite_state():
    w = tiny_weights()
    obs = [FieldObservations("a", "p", np.zeros((3, 2)), np.full(3, 1e200))]
    with pytest.raises(DivergenceError) as info:
        meta_train_step(obs, w, MetaConfig())
    assert info.value.weights is w


def test_field_tag_mismatch_rejected():
    w = tiny_weights()
    with pytest.raises(ValueError):
        meta_train_step(random_obs(1, tag="vx"), w, MetaConfig())
    mixed = random_obs(1, tag="p") + random_obs(1, tag="vx")
    with pytest.raises(ValueError):
        meta_train_step(mixed, tiny_weights().copy(), MetaConfig())


def test_fit_requires_data():
    with pytest.raises(ValueError):
        fit_inr([], MetaConfig(), tiny_weights())


def test_stacking_pads_and_subsamples():
    obs = [FieldObservations("a", "p", np.zeros((3, 2)), np.ones(3)), FieldObservations("b", "p", np.ones((5, 2)), np.ones(5))]
    pts, vals, mask = stack_observations(obs)
    assert pts.shape == (2, 5, 2) and mask.sum() == 8
    pts, vals, mask = stack_observations(obs, budget=3, rng=np.random.default_rng(0))
    assert pts.shape == (2, 3, 2) and mask is None


def test_padded_batch_matches_per_case_losses():
    w = tiny_weights()
    obs = [random_obs(1, n_points=4, seed=1)[0], random_obs(1, n_points=7, seed=2)[0]]
    cfg = MetaConfig(inner_steps=2, inner_lr=0.5, points_per_case=None)
    loss, _ = meta_gradients(obs, w, cfg)
    ref = oracles.meta_objective([o.points for o in obs], [o.values for o in obs], oracles.params_of(w), 2, 0.5)
    assert loss == pytest.approx(ref, rel=1e-12)


def test_encoding_is_deterministic_and_order_free():
    w = tiny_weights()
    obs = random_obs(4)
    cfg = MetaConfig()
    a = encode_dataset(obs, w, cfg)
    b = encode_dataset(obs[::-1], w, cfg)
    c = encode_dataset(obs[:2], w, cfg)
    for k in a:
        assert a[k].z.tobytes() == b[k].z.tobytes()
    for k in c:
        assert a[k].z.tobytes() == c[k].z.tobytes()


def test_constant_field_overfits():
    w = tiny_weights(seed=3)
    x = np.random.default_rng(0).uniform(-1, 1, (32, 2))
    obs = [FieldObservations("a", "p", x, np.full(32, 0.7))]
    # plain gradient descent creeps on the last 1e-5; the adaptive variant gets there in budget
    cfg = MetaConfig(inner_lr=1e-2, outer_lr=1e-2, batch_size=1, max_iterations=2000, points_per_case=None, tol=0, optimizer="adam")
    trained, log = fit_inr(obs, cfg, w, rng=0)
    assert reconstruction_mse(obs[0], inner_loop_encode(obs[0], trained, cfg), trained) < 1e-6
    assert len(log.losses) <= 2000


def test_two_constants_get_distinct_codes():
    w = tiny_weights(seed=4)
    x = np.random.default_rng(0).uniform(-1, 1, (16, 2))
    obs = [FieldObservations("lo", "p", x, np.full(16, -1.0)), FieldObservations("hi", "p", x, np.full(16, 1.0))]
    cfg = MetaConfig(inner_lr=1e-1, outer_lr=0.05, batch_size=2, max_iterations=2000, points_per_case=None, tol=0)
    trained, _ = fit_inr(obs, cfg, w, rng=0)
    codes = encode_dataset(obs, trained, cfg)
    assert not np.allclose(codes["lo"].z, codes["hi"].z)
    for o in obs:
        assert reconstruction_mse(o, codes[o.case_id], trained) < 1e-4


def test_convergence_stops_early_and_log_csv(tmp_path):
    w = tiny_weights(hyper_scale=0.0)
    w = w.with_parameters([*(p.data for p in w.parameters()[:-1]), np.zeros_like(w.hyper_b.data)])
    x = np.random.default_rng(1).uniform(-1, 1, (5, 2))
    obs = [FieldObservations("a", "p", x, inr_forward(x, np.zeros(4), w).data)]
    cfg = MetaConfig(window=5, max_iterations=100, points_per_case=None)
    _, log = fit_inr(obs, cfg, w, rng=0)
    assert log.converged and len(log.losses) == 10
    log.to_csv(tmp_path / "log.csv")
    rows = list(csv.reader(open(tmp_path / "log.csv")))
    assert rows[0] == ["iteration", "outer_loss", "wall_clock_s"]
    assert len(rows) == 11


def test_target_loss_stops_training():
    w = tiny_weights()
    obs = random_obs(1)
    _, log = fit_inr(obs, MetaConfig(target_loss=1e9, max_iterations=50, points_per_case=None), w, rng=0)
    assert len(log.losses) == 1


def test_adam_flag_runs():
    w = tiny_weights()
    cfg = MetaConfig(optimizer="adam", outer_lr=1e-2, max_iterations=20, points_per_case=None, batch_size=2)
    trained, log = fit_inr(random_obs(3), cfg, w, rng=0)
    assert log.losses[-1] < log.losses[0]
