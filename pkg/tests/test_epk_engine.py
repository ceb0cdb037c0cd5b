import json
from types import SimpleNamespace

import numpy as np
import pytest
from numpy.testing import assert_allclose

from pathkernel import epk_engine
from pathkernel.config import ScheduleConfig
from pathkernel.error_handling import InvalidInputError, MissingInputError
from pathkernel.optimizers import adam_denominator, adam_step_scale

from tests.conftest import blob_config, train_log


def test_trapezoid_weights():
    assert_allclose(epk_engine.trapezoid_weights(1), [0.5, 0.5])
    assert_allclose(epk_engine.trapezoid_weights(4), [0.125, 0.25, 0.25, 0.25, 0.125])
    assert epk_engine.trapezoid_weights(100).sum() == pytest.approx(1.0)
    with pytest.raises(InvalidInputError):
        epk_engine.trapezoid_weights(0)


@pytest.mark.parametrize("log_fixture", ["linear_adamw_log", "linear_momentum_log"])
def test_linear_model_reconstruction_is_exact(request, log_fixture):
    log = request.getfixturevalue(log_fixture)
    prediction = epk_engine.reconstruct(log, log.test.inputs, T=1, progress=False)
    assert prediction.max_abs_error <= 1e-9
    assert_allclose(prediction.step_deltas, epk_engine.checkpoint_deltas(log, log.test.inputs), atol=1e-9)


def test_linear_model_exact_with_unscaled_momentum():
    log = train_log(blob_config("linear", kind="sgd_momentum", momentum=0.6, weight_decay=0.3,
                                momentum_scaled_step=False))
    prediction = epk_engine.reconstruct(log, log.test.inputs, T=3, progress=False)
    assert prediction.max_abs_error <= 1e-9


@pytest.mark.parametrize("log_fixture", ["tiny_log", "mlp_log", "linear_momentum_log"])
def test_train_maps_rebuild_each_update(request, log_fixture):
    log = request.getfixturevalue(log_fixture)
    for maps in epk_engine.EPKSweep(log, None, T=1, progress=False):
        update = np.asarray(log.theta(maps.step - 1)) - np.asarray(log.theta(maps.step))
        assert_allclose(maps.train_total + log.weight_decay * maps.reg, update, rtol=1e-9, atol=1e-13)


def test_adamw_train_maps_reproduce_the_update_direction(tiny_log):
    opt = tiny_log.config.optimizer
    accumulator = epk_engine.TrainMapAccumulator(tiny_log)
    for s in range(1, tiny_log.n_steps + 1):
        train_maps, reg = accumulator.advance()
        scale = tiny_log.lr(s) * adam_step_scale(opt.beta1, opt.beta2, s)
        direction = np.asarray(tiny_log.m(s)) / adam_denominator(np.asarray(tiny_log.v(s)), opt.eps, opt.beta2, s)
        assert_allclose(train_maps.sum(axis=0), scale * direction, rtol=1e-9, atol=1e-14)
        assert_allclose(reg, tiny_log.lr(s) * np.asarray(tiny_log.theta(s - 1)))


def test_samples_outside_every_batch_so_far_have_zero_maps(linear_adamw_log):
    log = linear_adamw_log
    train_maps, _ = epk_engine.TrainMapAccumulator(log).advance()
    outside = ~log.batch_mask(1)
    assert outside.any()
    assert np.all(train_maps[outside] == 0.0)
    assert np.all(np.any(train_maps[~outside] != 0.0, axis=1))


def test_reconstruction_error_shrinks_with_T(tiny_log):
    inputs = tiny_log.test.inputs
    coarse = epk_engine.reconstruct(tiny_log, inputs, T=1, progress=False)
    fine = epk_engine.reconstruct(tiny_log, inputs, T=8, progress=False)
    assert fine.max_abs_error < coarse.max_abs_error
    coarse_fidelity, fine_fidelity = epk_engine.fidelity(coarse), epk_engine.fidelity(fine)
    assert fine_fidelity['mean_kl'] <= coarse_fidelity['mean_kl']
    assert fine_fidelity['mean_kl'] < 1e-6
    assert fine_fidelity['agreement'] == 1.0


def test_cached_start_jacobians_match_direct_computation(tiny_log):
    inputs = tiny_log.test.inputs[:2]
    maps = {m.step: m for m in epk_engine.EPKSweep(tiny_log, inputs, T=3, steps=[2, 3], progress=False)}
    direct = epk_engine.test_feature_map(tiny_log, 3, inputs[1:2], T=3)
    assert_allclose(maps[3].test[1], direct, rtol=1e-13, atol=1e-15)


def test_train_feature_map_matches_sweep(tiny_log):
    maps = {m.step: m for m in epk_engine.EPKSweep(tiny_log, None, T=1, progress=False)}
    assert np.array_equal(epk_engine.train_feature_map(tiny_log, 3, 2), maps[3].train[2])
    with pytest.raises(InvalidInputError):
        epk_engine.train_feature_map(tiny_log, 3, len(tiny_log.train))


def test_worker_pool_gives_identical_maps(tiny_log):
    inputs = tiny_log.test.inputs[:4]
    serial = list(epk_engine.EPKSweep(tiny_log, inputs, T=2, workers=1, progress=False))
    pooled = list(epk_engine.EPKSweep(tiny_log, inputs, T=2, workers=2, progress=False))
    for a, b in zip(serial, pooled):
        assert np.array_equal(a.test, b.test)
        assert np.array_equal(a.train, b.train)


def test_plain_gradient_descent_kernel_is_a_gradient_dot_product():
    log = train_log(blob_config("linear", kind="sgd_momentum", momentum=0.0, weight_decay=0.0,
                                momentum_scaled_step=False,
                                schedule=ScheduleConfig(kind="constant", peak=0.1)))
    x = log.test.inputs[:1]
    s = 2
    maps = next(iter(epk_engine.EPKSweep(log, x, T=1, steps=[s], progress=False)))
    kernel = maps.test[0].sum(axis=0) @ maps.train.T
    theta_prev = np.asarray(log.theta(s - 1))
    _, jac = log.model.jacobian(theta_prev, x)
    batch = log.batch_indices(s)
    grads = log.model.sample_loss_gradients(theta_prev, log.train.inputs, log.train.labels)
    expected = np.zeros(len(log.train))
    expected[batch] = 0.1 * grads[batch] @ jac.sum(axis=0) / len(batch)
    assert_allclose(kernel, expected, rtol=1e-9, atol=1e-14)


def test_sweep_rejects_unrecorded_steps(tiny_log):
    with pytest.raises(MissingInputError):
        epk_engine.EPKSweep(tiny_log, None, T=1, steps=[0])
    with pytest.raises(MissingInputError):
        epk_engine.test_feature_map(tiny_log, tiny_log.n_steps + 1, tiny_log.test.inputs[:1], T=1)


def test_fidelity_report_lists_every_T(tiny_log):
    report = epk_engine.fidelity_report(tiny_log, tiny_log.test.inputs[:3], [1, 2], progress=False)
    assert report['n_steps'] == tiny_log.n_steps
    assert report['n_test'] == 3
    assert [r['T'] for r in report['results']] == [1, 2]
    assert set(report['results'][0]) == {'T', 'agreement', 'mean_kl', 'max_abs_error', 'n_test'}


def test_fidelity_report_is_identical_across_reruns(tiny_log):
    inputs = tiny_log.test.inputs[:2]
    timings = {}
    first = epk_engine.fidelity_report(tiny_log, inputs, [1], progress=False, timings=timings)
    second = epk_engine.fidelity_report(tiny_log, inputs, [1], progress=False)
    assert json.dumps(first, sort_keys=True) == json.dumps(second, sort_keys=True)
    assert set(timings) == {"T=1"}


def test_reduced_sweeps_match_the_full_maps(tiny_log):
    inputs = tiny_log.test.inputs[:3]
    full = list(epk_engine.EPKSweep(tiny_log, inputs, T=2, progress=False))
    summed = list(epk_engine.EPKSweep(tiny_log, inputs, T=2, progress=False, reduction="summed"))
    update = list(epk_engine.EPKSweep(tiny_log, inputs, T=2, progress=False, reduction="update"))
    for f, s, u in zip(full, summed, update):
        assert s.test.shape == (3, tiny_log.size)
        assert u.test.shape == (3, tiny_log.model.n_outputs, 2)
        assert_allclose(s.test, f.test.sum(axis=1), rtol=1e-12, atol=1e-15)
        assert_allclose(u.test[..., 0], np.einsum("nod,d->no", f.test, f.train_total), rtol=1e-10, atol=1e-15)
        assert_allclose(u.test[..., 1], np.einsum("nod,d->no", f.test, f.reg), rtol=1e-10, atol=1e-15)


def test_jacobian_cache_stays_within_its_budget(tiny_log):
    inputs = tiny_log.test.inputs[:3]
    one_sample = tiny_log.model.n_outputs * tiny_log.size * 8
    unbounded = list(epk_engine.EPKSweep(tiny_log, inputs, T=2, progress=False))
    sweep = epk_engine.EPKSweep(tiny_log, inputs, T=2, progress=False, cache_bytes=one_sample)
    assert sweep.cache_items == 1
    bounded = []
    for maps in sweep:
        assert len(sweep.cache) <= 1
        bounded.append(maps)
    for a, b in zip(unbounded, bounded):
        assert_allclose(b.test, a.test, rtol=1e-13, atol=1e-15)
    uncached = epk_engine.EPKSweep(tiny_log, inputs, T=2, progress=False, cache_bytes=0)
    assert uncached.cache_items == 0
    assert all(len(uncached.cache) == 0 for _ in uncached)


def test_unknown_reduction_is_rejected(tiny_log):
    with pytest.raises(InvalidInputError):
        epk_engine.EPKSweep(tiny_log, None, T=1, reduction="mean")


class QuadraticJacobianModel:
    """J(theta) = c (theta ** 2)^T, so the path integrand is quadratic in t"""

    n_outputs = 2
    size = 3
    coefficients = np.array([1.0, -0.5])

    def jacobian(self, theta, inputs):
        return None, np.outer(self.coefficients, theta ** 2)


def test_trapezoid_error_is_quadratic_in_the_step_size():
    model = QuadraticJacobianModel()
    start, end = np.array([0.2, -1.0, 0.5]), np.array([1.4, 0.5, -0.3])
    log = SimpleNamespace(n_steps=1, model=model, theta=lambda s: (start, end)[s])
    delta = end - start
    exact = np.outer(model.coefficients, start ** 2 + start * delta + delta ** 2 / 3)
    errors = {}
    for T in (2, 4, 8, 16):
        phi = epk_engine.test_feature_map(log, 1, np.zeros((1, 1)), T=T)
        errors[T] = np.abs(phi - exact).max()
        assert_allclose(phi - exact, np.outer(model.coefficients, delta ** 2) / (6 * T ** 2), rtol=1e-9, atol=1e-15)
    for T in (2, 4, 8):
        assert errors[T] / errors[2 * T] == pytest.approx(4.0, rel=1e-6)
