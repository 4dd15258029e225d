import numpy as np
import pytest

from chexplore import oracle
from chexplore.errors import InvalidArgumentError, InvalidInputError, ShapeError
from chexplore.harness.data import generate_synthetic_dataset
from chexplore.simnet import (
    ExplorationConfig,
    OptimizerState,
    SimNetwork,
    Trainer,
    backward,
    count_flops,
    forward,
    make_streams,
    run_baseline,
    run_chex,
    sgd_step_masked,
)
from chexplore.simnet.loop import archive_channel, convergence_probe, splice_channel
from chexplore.explore import MruCache


@pytest.fixture(scope="module")
def blobs():
    return generate_synthetic_dataset("blobs", 300, 3, 0.8, 0)


def _pruned_net(rng, widths=(3, 5, 4, 2), bn_mode="standardize"):
    net = SimNetwork.initialize(list(widths), rng, bn_mode=bn_mode)
    cache = MruCache()
    archive_channel(net, cache, None, 0, 1, 0)
    net.masks[0].drop([1])
    return net


# --------------------------------------------------------------------------- forward


def test_forward_identity_composition():
    widths = [3, 3, 3, 2]
    params = {"w0": np.eye(3), "w1": np.eye(3), "gamma0": np.ones(3), "beta0": np.zeros(3),
              "gamma1": np.ones(3), "beta1": np.zeros(3),
              "head_w": np.arange(6.0).reshape(3, 2), "head_b": np.array([0.5, -0.5])}
    net = SimNetwork(widths, params, bn_mode="scale_only")
    x = np.array([[1.0, -2.0, 3.0], [-1.0, 0.5, 0.0]])
    assert np.allclose(forward(net, x).logits, np.maximum(x, 0) @ params["head_w"] + params["head_b"])


def test_pruned_channel_activation_is_zero():
    rng = np.random.default_rng(0)
    net = SimNetwork.initialize([3, 5, 4, 2], rng)
    net.masks[0].drop([2])
    tr = forward(net, rng.standard_normal((8, 3)))
    assert np.all(tr.activations[1][:, 2] == 0.0)


@pytest.mark.parametrize("bn_mode", ["standardize", "scale_only"])
def test_forward_matches_reference(bn_mode):
    rng = np.random.default_rng(1)
    net = _pruned_net(rng, (3, 4, 3, 2), bn_mode)
    x = rng.standard_normal((6, 3))
    ref = oracle.reference_forward(net.params, [m.as_bool() for m in net.masks], bn_mode, x)
    assert np.max(np.abs(forward(net, x).logits - ref)) <= 1e-10


def test_forward_input_validation():
    net = SimNetwork.initialize([3, 4, 2], np.random.default_rng(0))
    with pytest.raises(ShapeError):
        forward(net, np.ones((4, 2)))
    with pytest.raises(InvalidInputError):
        forward(net, np.ones((1, 3)))


def test_network_shape_validation():
    net = SimNetwork.initialize([3, 4, 2], np.random.default_rng(0))
    bad = dict(net.params, w0=np.ones((2, 4)))
    with pytest.raises(ShapeError):
        SimNetwork([3, 4, 2], bad)
    with pytest.raises(InvalidArgumentError):
        SimNetwork([3, 4, 2], net.params, bn_mode="layernorm")


# --------------------------------------------------------------------------- backward


@pytest.mark.parametrize("bn_mode", ["standardize", "scale_only"])
def test_backward_matches_finite_differences(bn_mode):
    rng = np.random.default_rng(2)
    net = _pruned_net(rng, (3, 5, 4, 3), bn_mode)
    x, y = rng.standard_normal((7, 3)), rng.integers(0, 3, size=7)
    masks = [m.as_bool() for m in net.masks]
    _, grads = backward(net, x, y)
    numeric = oracle.finite_diff_grad(lambda: oracle.reference_loss(net.params, masks, bn_mode, x, y), net.params, 1e-5)
    for k in grads:
        assert oracle.relative_error(grads[k], numeric[k]) <= 1e-4, k


def test_backward_pruned_channel_gradient_is_zero():
    rng = np.random.default_rng(3)
    net = _pruned_net(rng)
    _, grads = backward(net, rng.standard_normal((6, 3)), rng.integers(0, 2, size=6))
    assert not grads["w0"][:, 1].any() and not grads["w1"][1, :].any()
    assert grads["gamma0"][1] == 0.0 and grads["beta0"][1] == 0.0


def test_zero_gamma_blocks_upstream_gradient():
    rng = np.random.default_rng(4)
    net = SimNetwork.initialize([3, 4, 3, 2], rng, bn_mode="scale_only")
    net.params["gamma1"][:] = 0.0
    _, grads = backward(net, rng.standard_normal((5, 3)), rng.integers(0, 2, size=5))
    assert not grads["w0"].any()


def test_label_smoothing_changes_loss():
    rng = np.random.default_rng(5)
    net = SimNetwork.initialize([3, 4, 2], rng)
    x, y = rng.standard_normal((6, 3)), rng.integers(0, 2, size=6)
    assert backward(net, x, y, 0.1)[0] != backward(net, x, y, 0.0)[0]


# --------------------------------------------------------------------------- optimizer


def test_sgd_plain_step():
    rng = np.random.default_rng(6)
    net = SimNetwork.initialize([3, 4, 2], rng)
    before = {k: v.copy() for k, v in net.params.items()}
    grads = {k: rng.standard_normal(v.shape) for k, v in net.params.items()}
    sgd_step_masked(OptimizerState(lr=0.1, momentum=0.0), net, grads)
    for k in before:
        assert np.allclose(net.params[k], before[k] - 0.1 * grads[k])


def test_sgd_masked_coordinates_untouched():
    rng = np.random.default_rng(7)
    net = _pruned_net(rng)
    before = {k: v.copy() for k, v in net.params.items()}
    grads = {k: np.ones_like(v) for k, v in net.params.items()}
    sgd_step_masked(OptimizerState(lr=0.1, momentum=0.9, weight_decay=0.01), net, grads)
    assert np.array_equal(net.params["w0"][:, 1], before["w0"][:, 1])
    assert np.array_equal(net.params["w1"][1, :], before["w1"][1, :])
    assert net.params["gamma0"][1] == 0.0


def test_sgd_momentum_two_steps():
    rng = np.random.default_rng(8)
    net = SimNetwork.initialize([3, 4, 2], rng)
    before = net.params["w0"].copy()
    g = {k: np.full_like(v, 0.5) for k, v in net.params.items()}
    state = OptimizerState(lr=0.1, momentum=0.9)
    sgd_step_masked(state, net, g)
    sgd_step_masked(state, net, g)
    assert np.allclose(before - net.params["w0"], 0.1 * 0.5 * (1 + 1.9))


def test_optimizer_requires_positive_lr():
    with pytest.raises(InvalidArgumentError):
        OptimizerState(lr=0.0)


# --------------------------------------------------------------------------- FLOPs


def test_flops_dense_and_pruned():
    net = SimNetwork.initialize([4, 8, 3], np.random.default_rng(0))
    rep = count_flops(net)
    assert rep.total == 56 and rep.reduction_vs_dense == 0.0
    net.masks[0].drop([0, 1, 2, 3])
    rep = count_flops(net)
    assert rep.total == 28 and rep.reduction_vs_dense == pytest.approx(0.5)


def test_flops_counts_effective_inputs():
    net = SimNetwork.initialize([2, 4, 4, 3], np.random.default_rng(0))
    net.masks[0].drop([0, 1])
    net.masks[1].drop([3])
    rep = count_flops(net)
    assert rep.per_layer == [2 * 2, 2 * 3] and rep.head == 3 * 3


# --------------------------------------------------------------------------- channel surgery


def test_archive_then_splice_round_trip_with_shared_coordinates():
    rng = np.random.default_rng(10)
    net = SimNetwork.initialize([3, 4, 4, 2], rng)
    original = {k: v.copy() for k, v in net.params.items()}
    cache = MruCache()
    # prune channel 1 of layer 0 then channel 2 of layer 1; they share w1[1, 2]
    archive_channel(net, cache, None, 0, 1, 1)
    net.masks[0].drop([1])
    archive_channel(net, cache, None, 1, 2, 1)
    net.masks[1].drop([2])
    assert cache.get(1, 2).out_weights[1] == original["w1"][1, 2]
    for layer, j in ((0, 1), (1, 2)):
        net.masks[layer].add([j])
        splice_channel(net, layer, j, cache.pop(layer, j))
    for k in original:
        assert net.params[k].tobytes() == original[k].tobytes(), k


# --------------------------------------------------------------------------- training loop


def _config(**kw):
    base = dict(total_iters=60, dt=10, t_max=40, batch_size=32, seed=0)
    base.update(kw)
    return ExplorationConfig(**base)


def test_config_validation():
    with pytest.raises(InvalidArgumentError):
        _config(S=1.0)
    with pytest.raises(InvalidArgumentError):
        _config(dt=50)
    with pytest.raises(InvalidArgumentError):
        _config(mode="lottery")


def test_lr_schedule_warmup_then_cosine():
    cfg = _config(total_iters=100, lr=0.1, warmup_fraction=0.1)
    assert cfg.lr_at(5) == pytest.approx(0.05)
    assert cfg.lr_at(10) == pytest.approx(0.1)
    assert cfg.lr_at(11) == pytest.approx(0.1)
    assert cfg.lr_at(100) < 0.001


def test_s_zero_equals_plain(blobs):
    a = run_chex(SimNetwork.initialize([2, 8, 8, 3], make_streams(0)["init"]), blobs, _config(S=0.0))
    b = run_chex(SimNetwork.initialize([2, 8, 8, 3], make_streams(0)["init"]), blobs, _config(mode="plain"))
    assert [r.acc for r in a.history] == [r.acc for r in b.history]
    assert all(m.pruned.size == 0 for m in a.net.masks)


def test_one_shot_with_s_zero_equals_plain(blobs):
    a = run_baseline(SimNetwork.initialize([2, 8, 8, 3], make_streams(0)["init"]), blobs, "one_shot_early", _config(S=0.0))
    b = run_chex(SimNetwork.initialize([2, 8, 8, 3], make_streams(0)["init"]), blobs, _config(mode="plain"))
    assert [(r.loss, r.acc) for r in a.history] == [(r.loss, r.acc) for r in b.history]


def test_gradual_reaches_target_exactly(blobs):
    res = run_baseline(SimNetwork.initialize([2, 8, 8, 3], make_streams(0)["init"]), blobs, "gradual", _config())
    assert sum(m.retained.size for m in res.net.masks) == 8
    assert len(res.cache) == 8


def test_chex_step_count_and_cosine_regrowth(blobs):
    events = []
    cfg = _config(total_iters=80, dt=8, t_max=64)
    tr = Trainer(SimNetwork.initialize([2, 8, 8, 3], make_streams(0)["init"]), blobs, cfg,
                 callback=lambda t, e: e and events.append(e))
    tr.run()
    assert len(events) == 8
    for e in events[:-1]:
        expected = 0.5 * (1 + np.cos(e.step * np.pi / 8)) * 0.3
        assert e.delta == pytest.approx(expected)
        k = int(np.ceil(e.delta * 8 - 1e-9))
        for layer, regrown in e.regrown.items():
            candidates = 8 - (e.retained[layer] - len(regrown))
            assert len(regrown) == min(k, candidates)
    assert events[-1].delta == 0.0 and not events[-1].regrown


def test_history_rows_have_consistent_flops(blobs):
    cfg = _config()
    states = {}

    def grab(tr, _e):
        states[tr.iteration] = count_flops(tr.net).total

    tr = Trainer(SimNetwork.initialize([2, 8, 8, 3], make_streams(0)["init"]), blobs, cfg, callback=grab).run()
    assert [r.iteration for r in tr.history] == list(range(10, 61, 10))
    for r in tr.history:
        assert r.flops == states[r.iteration]


def test_runs_are_deterministic(blobs):
    def go():
        return Trainer(SimNetwork.initialize([2, 8, 8, 3], make_streams(3)["init"]), blobs, _config(seed=3)).run().history
    a, b = go(), go()
    assert [(r.loss, r.acc, r.retained) for r in a] == [(r.loss, r.acc, r.retained) for r in b]


@pytest.mark.parametrize("scheme", ["mru", "ema", "zero", "random"])
@pytest.mark.parametrize("sampling", ["importance", "uniform", "deterministic"])
def test_every_scheme_and_sampling_mode_runs(blobs, scheme, sampling):
    cfg = _config(init_scheme=scheme, sampling=sampling)
    tr = Trainer(SimNetwork.initialize([2, 8, 8, 3], make_streams(0)["init"]), blobs, cfg).run()
    tr.cache.check_against(tr.net.masks)
    assert np.isfinite(tr.history[-1].loss)


def test_convergence_probe_returns_finite(blobs):
    net = SimNetwork.initialize([2, 6, 3], make_streams(0)["init"], bn_mode="scale_only")
    v = convergence_probe(net, blobs, 200, 1.0, np.random.default_rng(0))
    assert np.isfinite(v) and v >= 0.0
