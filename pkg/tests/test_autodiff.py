import numpy as np
import pytest
from hypothesis import given, strategies as st

from diseg import autodiff as ad
from diseg.autodiff import FDReport, ParameterSet, Tensor, evaluate_with_gradients, finite_difference_check


def fd(fn, **arrays):
    report = finite_difference_check(fn, ParameterSet(arrays), eps=1e-5, tol=1e-6)
    assert report.passed, report.max_rel_err


def weighted_sum(t, seed=0):
    w = np.random.default_rng(seed).normal(size=t.shape)
    return ad.sum(ad.mul(t, w))


def test_elementwise_ops_match_finite_differences(rng):
    x = rng.normal(size=(3, 4))
    fd(lambda P: weighted_sum(ad.sigmoid(P["x"])), x=x)
    fd(lambda P: weighted_sum(ad.tanh(P["x"])), x=x)
    fd(lambda P: weighted_sum(ad.exp(P["x"])), x=x)
    fd(lambda P: weighted_sum(ad.log(P["x"])), x=np.abs(x) + 0.5)
    fd(lambda P: weighted_sum(ad.absolute(P["x"])), x=x + np.sign(x))
    fd(lambda P: weighted_sum(ad.clip(P["x"], -0.5, 0.5)), x=np.where(np.abs(np.abs(x) - 0.5) < 0.01, 0.0, x))


def test_broadcasting_binary_ops(rng):
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(3, 1))
    fd(lambda P: weighted_sum(ad.add(P["a"], P["b"])), a=a, b=b)
    fd(lambda P: weighted_sum(ad.sub(P["a"], P["b"])), a=a, b=b)
    fd(lambda P: weighted_sum(ad.mul(P["a"], P["b"])), a=a, b=b)


def test_matmul_variants(rng):
    fd(lambda P: weighted_sum(ad.matmul(P["a"], P["b"])), a=rng.normal(size=(3, 4)), b=rng.normal(size=(4, 2)))
    fd(lambda P: weighted_sum(ad.matmul(P["a"], P["b"])), a=rng.normal(size=(2, 3, 4)), b=rng.normal(size=(4, 5)))
    fd(lambda P: weighted_sum(ad.matmul(P["a"], P["b"])), a=rng.normal(size=(2, 3, 4)), b=rng.normal(size=(2, 4, 2)))
    fd(lambda P: weighted_sum(ad.matmul(P["a"], P["b"])), a=rng.normal(size=4), b=rng.normal(size=(4, 3)))


def test_reductions_and_shapes(rng):
    x = rng.normal(size=(2, 3, 4))
    fd(lambda P: weighted_sum(ad.sum(P["x"], axis=1)), x=x)
    fd(lambda P: weighted_sum(ad.mean(P["x"], axis=-1, keepdims=True)), x=x)
    fd(lambda P: weighted_sum(ad.reshape(P["x"], (6, 4))), x=x)
    fd(lambda P: weighted_sum(ad.transpose(P["x"], (2, 0, 1))), x=x)
    fd(lambda P: weighted_sum(ad.getitem(P["x"], (slice(None), 1))), x=x)
    fd(lambda P: weighted_sum(ad.getitem(P["x"], np.array([0, 0, 1]))), x=x)
    fd(lambda P: weighted_sum(ad.concat([P["x"], ad.exp(P["x"])], axis=1)), x=x)
    fd(lambda P: weighted_sum(ad.cumsum(P["x"], axis=-1)), x=x)


def test_normalisers(rng):
    x = rng.normal(size=(3, 5))
    mask = np.where(np.tril(np.ones((3, 5))) > 0, 0.0, -np.inf)
    fd(lambda P: weighted_sum(ad.softmax(P["x"])), x=x)
    fd(lambda P: weighted_sum(ad.softmax(P["x"], mask=mask)), x=x)
    fd(lambda P: weighted_sum(ad.softmax(P["x"], weights=P["w"])), x=x, w=rng.uniform(0.1, 1.0, (3, 5)))
    fd(lambda P: weighted_sum(ad.layer_norm(P["x"], P["g"], P["b"])), x=x, g=rng.normal(size=5),
       b=rng.normal(size=5))
    fd(lambda P: weighted_sum(ad.cosine_similarity(P["a"], P["b"])), a=rng.normal(size=(3, 1, 4)),
       b=rng.normal(size=(1, 2, 4)))
    targets = np.array([0, 4, 2])
    fd(lambda P: ad.cross_entropy(P["x"], targets, np.array([1.0, 0.0, 1.0])), x=x)


def test_embedding_and_max_pool(rng):
    table = rng.normal(size=(5, 3))
    fd(lambda P: weighted_sum(ad.embedding(P["t"], np.array([[0, 4, 4], [1, 2, 0]]))), t=table)
    x = rng.permutation(7).astype(float)  # distinct values, so argmax is unique
    fd(lambda P: weighted_sum(ad.max_pool1d(P["x"], 3)), x=x)


def test_max_pool_keeps_trailing_window_and_breaks_ties_low():
    out = ad.max_pool1d(Tensor(np.array([1.0, 3.0, 2.0, 5.0, 4.0])), 2)
    np.testing.assert_array_equal(out.data, [3.0, 5.0, 4.0])
    x = Tensor(np.array([2.0, 2.0]), requires_grad=True)
    ad.sum(ad.max_pool1d(x, 2)).backward()
    np.testing.assert_array_equal(x.grad, [1.0, 0.0])


def test_softmax_fully_masked_row_raises():
    with pytest.raises(FloatingPointError):
        ad.softmax(Tensor(np.zeros((1, 2))), mask=np.full((1, 2), -np.inf))


def test_log_of_non_positive_raises():
    with pytest.raises(FloatingPointError):
        ad.log(Tensor(np.array([1.0, 0.0])))


def test_cosine_zero_vector_raises():
    with pytest.raises(ValueError, match="zero-norm"):
        ad.cosine_similarity(Tensor(np.zeros(3)), Tensor(np.ones(3)))


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4,\)"):
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(4)))


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        ad.mul(x, 2.0).backward()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.sum(ad.mul(x, x))
    assert not y.requires_grad


def test_gradients_accumulate_over_shared_subexpressions():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = ad.mul(x, x)
    ad.sum(ad.add(y, y)).backward()
    np.testing.assert_allclose(x.grad, [12.0])


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=8))
def test_sigmoid_is_finite_and_bounded(values):
    out = ad.sigmoid(Tensor(np.array(values))).data
    assert np.all((out >= 0) & (out <= 1))


@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_broadcast_gradient_shapes_match_inputs(rows, cols, seed):
    r = np.random.default_rng(seed)
    params = ParameterSet({"a": r.normal(size=(rows, cols)), "b": r.normal(size=(1, cols))})
    _, grads = evaluate_with_gradients(lambda P: ad.sum(ad.mul(P["a"], P["b"])), params)
    assert grads["a"].shape == (rows, cols) and grads["b"].shape == (1, cols)
    np.testing.assert_allclose(grads["b"], params["a"].sum(0, keepdims=True))


def test_finite_difference_check_catches_injected_fault(rng):
    params = ParameterSet({"x": rng.normal(size=4)})
    report = finite_difference_check(lambda P: weighted_sum(ad.tanh(P["x"])), params, tol=1e-4,
                                     perturb_analytic=1e-2)
    assert not report.passed
    assert isinstance(report, FDReport) and report.worst > 1e-3


def test_finite_difference_names_non_finite_parameter():
    params = ParameterSet({"x": np.array([1e-6])})
    with pytest.raises(FloatingPointError, match=r"x\[0\]"):
        finite_difference_check(lambda P: ad.sum(ad.log(P["x"])), params, eps=1e-5)


def test_parameter_set_json_round_trip(tmp_path, rng):
    params = ParameterSet({"w": rng.normal(size=(2, 3)), "b": rng.normal(size=3)})
    path = tmp_path / "p.json"
    params.save(path)
    loaded = ParameterSet.load(path)
    assert set(loaded) == {"w", "b"}
    for name in params:
        np.testing.assert_array_equal(loaded[name], params[name])


def test_linear_map_example():
    params = ParameterSet({"x": np.array([1.0, 2.0])})
    (loss,), grads = evaluate_with_gradients(lambda P: (ad.sum(ad.matmul(np.eye(2), P["x"])),), params)
    assert float(loss.data) == 3.0
    np.testing.assert_array_equal(grads["x"], [1.0, 1.0])


def test_sigmoid_at_zero():
    x = Tensor(np.array(0.0), requires_grad=True)
    y = ad.sigmoid(x)
    y.backward()
    assert float(y.data) == 0.5 and float(x.grad) == 0.25


def test_square_and_constant_under_the_checker():
    params = ParameterSet({"x": np.array([3.0])})
    report = finite_difference_check(lambda P: ad.sum(ad.mul(P["x"], P["x"])), params)
    assert report.passed and report.worst < 1e-9
    report = finite_difference_check(lambda P: ad.sum(ad.mul(P["x"], 0.0)), params)
    assert report.passed and report.worst == 0.0


def three_layer(P, x):
    h = ad.tanh(ad.add(ad.matmul(x, P["w1"]), P["b1"]))
    h = ad.layer_norm(ad.sigmoid(ad.matmul(h, P["w2"])), P["g"], P["b2"])
    logits = ad.matmul(ad.softmax(h), P["w3"])
    return ad.cross_entropy(logits, np.array([0, 2, 1]))


def random_graph_params(seed):
    r = np.random.default_rng(seed)
    return ParameterSet({"w1": r.normal(size=(4, 5)), "b1": r.normal(size=5), "w2": r.normal(size=(5, 6)),
                         "g": r.normal(size=6), "b2": r.normal(size=6), "w3": r.normal(size=(6, 3))})


@pytest.mark.parametrize("seed", range(10))
def test_random_three_layer_graph(seed):
    x = np.random.default_rng(1000 + seed).normal(size=(3, 4))
    report = finite_difference_check(lambda P: three_layer(P, x), random_graph_params(seed), tol=1e-6)
    assert report.passed, report.max_rel_err


OPS = {
    "sigmoid": lambda P: weighted_sum(ad.sigmoid(P["x"])),
    "tanh": lambda P: weighted_sum(ad.tanh(P["x"])),
    "exp": lambda P: weighted_sum(ad.exp(P["x"])),
    "log": lambda P: weighted_sum(ad.log(ad.add(ad.mul(P["x"], P["x"]), 0.5))),
    "softmax": lambda P: weighted_sum(ad.softmax(P["x"])),
    "softmax_weighted": lambda P: weighted_sum(ad.softmax(P["x"], weights=ad.sigmoid(P["x"]))),
    "layer_norm": lambda P: weighted_sum(ad.layer_norm(P["x"], ad.exp(P["x"][0]), P["x"][1])),
    "cosine": lambda P: weighted_sum(ad.cosine_similarity(P["x"], ad.exp(P["x"]))),
    "cross_entropy": lambda P: ad.cross_entropy(P["x"], np.array([1, 0, 3])),
    "matmul": lambda P: weighted_sum(ad.matmul(P["x"], ad.transpose(P["x"], (1, 0)))),
    "mean": lambda P: ad.sum(ad.mul(ad.mean(P["x"], axis=0), ad.mean(P["x"], axis=1)[:1])),
}


@pytest.mark.parametrize("op", sorted(OPS))
def test_op_gradients_over_many_seeds(op):
    # 100 random trials per op; the seed of a failing trial is in the assertion message
    fn = OPS[op]
    for seed in range(100):
        x = np.random.default_rng(seed).normal(size=(3, 4))
        report = finite_difference_check(fn, ParameterSet({"x": x}), tol=1e-6)
        assert report.passed, (op, seed, report.max_rel_err)


def test_gradient_of_sum_is_sum_of_gradients():
    params = random_graph_params(3)
    x1, x2 = np.random.default_rng(7).normal(size=(2, 3, 4))
    _, g1 = evaluate_with_gradients(lambda P: three_layer(P, x1), params)
    _, g2 = evaluate_with_gradients(lambda P: three_layer(P, x2), params)
    _, g12 = evaluate_with_gradients(lambda P: ad.add(three_layer(P, x1), three_layer(P, x2)), params)
    for name in params:
        np.testing.assert_allclose(g12[name], g1[name] + g2[name], rtol=1e-12, atol=1e-14)


def test_forward_is_bitwise_deterministic():
    x = np.random.default_rng(0).normal(size=(3, 4))
    a = three_layer(random_graph_params(1).constants(), x).data
    b = three_layer(random_graph_params(1).constants(), x).data
    assert a.tobytes() == b.tobytes()


def test_parameter_order_is_insertion_order():
    params = ParameterSet()
    for name in ("z", "a", "m"):
        params[name] = np.zeros(1)
    assert list(params) == ["z", "a", "m"] and list(params.copy()) == ["z", "a", "m"]
    assert list(ParameterSet.from_json_dict(params.to_json_dict())) == ["z", "a", "m"]


def test_json_document_has_format_version():
    doc = ParameterSet({"w": np.ones((2, 2))}).to_json_dict()
    assert doc["format_version"] == 1 and doc["w"] == {"shape": [2, 2], "data": [1.0, 1.0, 1.0, 1.0]}
