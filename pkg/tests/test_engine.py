import numpy as np
import pytest

from graphprune import engine
from graphprune.engine import (Batch, ParamStore, backward, finite_diff_check, forward, init_params,
                               loss_and_grad, predict, softmax_cross_entropy)
from graphprune.fixtures import load_fixture
from graphprune.ir import OP_KINDS

from _graphs import Builder, randomise, registry_net


def _batch(g, n=4, seed=0, classes=3):
    rng = np.random.default_rng(seed)
    shape = tuple(g.vertices[g.inputs[0]].attrs["shape"])
    return Batch(rng.normal(size=(n,) + shape), rng.integers(0, classes, n))


def test_registry_net_covers_every_operator():
    g = registry_net()
    assert {v.op for v in g.vertices.values()} == set(OP_KINDS)


def test_finite_differences_every_operator():
    g = registry_net()
    store = randomise(init_params(g, 0), seed=1)
    rep = finite_diff_check(g, store, _batch(g, n=5), tolerance=1e-4, h=1e-5)
    assert rep.ok, rep.max_rel_error


@pytest.mark.parametrize("name", ["chain_net", "diamond_net", "demonet_s", "stacked_unets_mini"])
def test_finite_differences_fixtures_sampled(name):
    # deep ReLU/max-pool stacks: a 1e-5 step can cross a kink, and biases
    # ahead of BatchNorm have exactly zero gradient, so use a smaller step and
    # an absolute floor here; the registry net above runs at the strict setting
    g = load_fixture(name)
    store = init_params(g, 0)
    batch = _batch(g, n=4, classes=2)
    rep = finite_diff_check(g, store, batch, tolerance=1e-3, h=1e-7, max_coords=4, floor=1e-4)
    assert rep.ok, rep.max_rel_error


def test_finite_differences_catch_a_broken_backward(monkeypatch):
    g = registry_net()
    store = randomise(init_params(g, 0), seed=1)
    real = engine.BACKWARD["ReLU"]

    def wrong(v, dout, cache, store, grads, need_dx):
        (dx,) = real(v, dout, cache, store, grads, need_dx)
        return (dx * 1.01,)

    monkeypatch.setitem(engine.BACKWARD, "ReLU", wrong)
    rep = finite_diff_check(g, store, _batch(g, n=5))
    assert not rep.ok


def test_fd_requires_float64():
    g = registry_net()
    with pytest.raises(ValueError, match="float64"):
        finite_diff_check(g, init_params(g, 0, np.float32), _batch(g))


def test_softmax_cross_entropy_matches_reference():
    z = np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]])
    loss, d = softmax_cross_entropy(z, np.array([2, 0]))
    p = np.exp(z) / np.exp(z).sum(1, keepdims=True)
    assert loss == pytest.approx(-(np.log(p[0, 2]) + np.log(p[1, 0])) / 2)
    assert np.allclose(d.sum(1), 0)


def test_batchnorm_modes_and_running_stats():
    b = Builder((2, 3, 3))
    c = b.conv("c", "x", 2)
    n = b.bn("n", c)
    g_ = b.add("g", "GlobalAvgPool", [n])
    b.add("o", "Output", [b.linear("fc", g_, 2)])
    g = b.graph()
    store = init_params(g, 0)
    batch = _batch(g, n=8, classes=2)
    forward(g, store, batch, "train", update_running=False)
    assert np.all(store["n.running_mean"] == 0)
    forward(g, store, batch, "train")
    assert np.any(store["n.running_mean"] != 0)
    # eval mode does not touch statistics and is deterministic
    before = store["n.running_var"].copy()
    a = predict(g, store, batch.inputs)
    assert np.array_equal(a, predict(g, store, batch.inputs))
    assert np.array_equal(before, store["n.running_var"])


def test_tape_single_use_and_eval_tapes_rejected():
    g = registry_net()
    store = init_params(g, 0)
    _, _, tape = forward(g, store, _batch(g), "train")
    backward(tape)
    with pytest.raises(RuntimeError, match="consumed"):
        backward(tape)
    _, _, tape = forward(g, store, _batch(g), "eval")
    with pytest.raises(RuntimeError, match="train"):
        backward(tape)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_names_vertex():
    g = registry_net()
    store = init_params(g, 0)
    store["c1.weight"][...] = np.inf
    with pytest.raises(FloatingPointError, match="c1"):
        forward(g, store, _batch(g))


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        Batch(np.zeros((0, 2)), np.zeros(0, dtype=int))


def test_param_store_flat_views():
    g = load_fixture("demonet_s")
    store = init_params(g, 3)
    assert store.total_dim == 42474
    store["Conv2.weight"][0, 0, 0, 0] = 123.0
    lo, _ = store.offsets["Conv2.weight"]
    assert store.x[lo] == 123.0
    cp = store.copy(np.float32)
    assert cp.dtype == np.float32 and cp["Conv2.weight"][0, 0, 0, 0] == 123.0


def test_init_is_seeded_and_kaiming_bounded():
    g = load_fixture("demonet_s")
    a, b = init_params(g, 5), init_params(g, 5)
    assert np.array_equal(a.x, b.x)
    w = a["Conv6.weight"]
    assert np.abs(w).max() <= np.sqrt(6 / (48 * 9))
    assert np.all(a["BN1.weight"] == 1) and np.all(a["BN1.bias"] == 0)
    assert np.all(a["BN1.running_var"] == 1)


def test_float32_and_float64_agree():
    g = load_fixture("demonet_s")
    s64 = init_params(g, 0)
    s32 = s64.copy(np.float32)
    x = np.random.default_rng(0).normal(size=(3, 1, 28, 28))
    assert np.allclose(predict(g, s64, x), predict(g, s32, x.astype(np.float32)), atol=1e-4)


def test_gradient_descends():
    g = registry_net()
    store = init_params(g, 0)
    batch = _batch(g, n=16)
    l0, _, grads = loss_and_grad(g, store, batch, update_running=False)
    store.x -= 1e-3 * grads.flat
    l1, _, _ = forward(g, store, batch, "train", update_running=False)
    assert l1 < l0


def test_uniform_logits_loss_is_ln10():
    loss, _ = softmax_cross_entropy(np.zeros((3, 10)), np.array([0, 4, 9]))
    assert loss == pytest.approx(np.log(10), abs=1e-12)


def test_zero_affine_bn_branch_contributes_nothing_to_add():
    g = load_fixture("demonet_s")
    store = randomise(init_params(g, 0), seed=2)
    x = np.random.default_rng(0).normal(size=(4, 1, 28, 28))
    store["BN8.weight"][...] = 0
    store["BN8.bias"][...] = 0
    ref = predict(g, store, x)
    store["Conv8.weight"][...] = np.random.default_rng(1).normal(size=store["Conv8.weight"].shape)
    assert np.array_equal(ref, predict(g, store, x))


def test_unused_parameter_gets_zero_gradient():
    g = load_fixture("demonet_s")
    store = randomise(init_params(g, 0), seed=2)
    # a dead Add branch: zero BN8's scale, so Conv8 receives no gradient
    store["BN8.weight"][...] = 0
    _, _, grads = loss_and_grad(g, store, _batch(g, n=4, classes=10), update_running=False)
    assert not np.any(grads["Conv8.weight"]) and not np.any(grads["Conv8.bias"])


# -- an independent straight-line forward of the demo network -------------

def _ref_conv(x, w, b):
    k = w.shape[2]
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    h, wd = x.shape[2], x.shape[3]
    out = np.zeros((x.shape[0], w.shape[0], h, wd))
    for i in range(k):
        for j in range(k):
            out += np.einsum("nchw,oc->nohw", xp[:, :, i:i + h, j:j + wd], w[:, :, i, j])
    return out + b[None, :, None, None]


def _ref_pool(x, op):
    h, w = x.shape[2], x.shape[3]
    fill = -np.inf if op is np.maximum else 0.0
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=fill)
    acc = np.full(x.shape, fill)
    for i in range(3):
        for j in range(3):
            acc = op(acc, xp[:, :, i:i + h, j:j + w])
    return acc if op is np.maximum else acc / 9


def _ref_bn(x, s, name):
    mu = x.mean(axis=(0, 2, 3), keepdims=True)
    var = x.var(axis=(0, 2, 3), keepdims=True)
    y = (x - mu) / np.sqrt(var + 1e-5) * s[name + ".weight"][None, :, None, None]
    return np.maximum(y + s[name + ".bias"][None, :, None, None], 0)


def _ref_demonet(s, x):
    cb = lambda i, t: _ref_bn(_ref_conv(t, s[f"Conv{i}.weight"], s[f"Conv{i}.bias"]), s, f"BN{i}")
    h1 = cb(1, x)
    a = cb(2, h1)
    b = cb(3, _ref_pool(h1, np.maximum))
    c = cb(5, cb(4, _ref_pool(h1, np.add)))
    h6 = cb(6, np.concatenate([a, b, c], axis=1))
    z = (cb(7, h6) + cb(8, h6)).mean(axis=(2, 3))
    return z @ s["Linear1.weight"].T + s["Linear1.bias"]


def test_demonet_matches_straight_line_reference():
    g = load_fixture("demonet_s")
    store = randomise(init_params(g, 0), seed=3)
    batch = _batch(g, n=3, classes=10)
    loss, logits, _ = forward(g, store, batch, "train", update_running=False)
    ref = _ref_demonet(store, batch.inputs)
    ref_loss, _ = softmax_cross_entropy(ref, batch.labels)
    assert np.max(np.abs(logits - ref)) <= 1e-10 * max(1.0, np.max(np.abs(ref)))
    assert abs(loss - ref_loss) <= 1e-10 * abs(ref_loss)
