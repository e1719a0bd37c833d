import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calcurve import netcore as nc
from calcurve.errors import DimensionError, FormatError, NumericalFailure, SpecError

from conftest import dense_jacobian, fd_gradient, linear_net, random_tiny_net, rel_err, tiny_net


def reference_logits(params, X):
    """Straight-line forward pass written independently of the library."""
    spec = params.spec
    h = np.asarray(X, dtype=float)
    offs = 0
    dims = [spec.input_dim] + [w for w, _ in spec.hidden_layers] + [spec.num_classes]
    acts = [a for _, a in spec.hidden_layers] + [None]
    for i in range(len(dims) - 1):
        n_w = dims[i + 1] * dims[i]
        W = params.values[offs:offs + n_w].reshape(dims[i + 1], dims[i])
        offs += n_w
        b = params.values[offs:offs + dims[i + 1]]
        offs += dims[i + 1]
        out = []
        for row in h:
            a = [sum(W[o, k] * row[k] for k in range(dims[i])) + b[o] for o in range(dims[i + 1])]
            if acts[i] == "tanh":
                a = [np.tanh(v) for v in a]
            elif acts[i] == "relu":
                a = [max(v, 0.0) for v in a]
            out.append(a)
        h = np.array(out)
    return h


class TestSpec:
    def test_param_count_cifar_mlp(self):
        spec = nc.NetworkSpec(3072, ((200, "tanh"), (200, "tanh")), 10)
        assert spec.num_params == 656_810

    def test_json_round_trip(self):
        spec = nc.NetworkSpec(5, ((7, "relu"), (3, "tanh")), 4, init_seed=2**63 + 5, init_scheme="gaussian-scaled")
        assert nc.NetworkSpec.from_json(spec.to_json()) == spec

    @pytest.mark.parametrize("kwargs", [
        dict(input_dim=0, hidden_layers=(), num_classes=3),
        dict(input_dim=2, hidden_layers=(), num_classes=1),
        dict(input_dim=2, hidden_layers=((0, "tanh"),), num_classes=3),
        dict(input_dim=2, hidden_layers=((4, "gelu"),), num_classes=3),
        dict(input_dim=2, hidden_layers=(), num_classes=3, init_scheme="xavier"),
    ])
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(SpecError):
            nc.NetworkSpec(**kwargs)


class TestInit:
    def test_linear_model_deterministic(self):
        spec = nc.NetworkSpec(4, (), 3, init_seed=11)
        assert np.array_equal(nc.init_network(spec).values, nc.init_network(spec).values)

    def test_seed_sensitivity(self):
        a = nc.init_network(nc.NetworkSpec(4, ((6, "tanh"),), 3, init_seed=1))
        b = nc.init_network(nc.NetworkSpec(4, ((6, "tanh"),), 3, init_seed=2))
        assert np.any(a.values != b.values)

    def test_uniform_fan_in_scale(self):
        p = nc.init_network(nc.NetworkSpec(400, ((50, "tanh"),), 3))
        W, b = p.blocks()[0]
        assert np.abs(W).max() <= 1 / np.sqrt(400)
        assert np.abs(b).max() <= 1 / np.sqrt(400)

    def test_gaussian_scale(self):
        p = nc.init_network(nc.NetworkSpec(400, ((500, "tanh"),), 3, init_scheme="gaussian-scaled"))
        W, b = p.blocks()[0]
        assert abs(W.var() - 1 / 400) < 0.05 / 400
        assert not np.any(b)


class TestForward:
    def test_zero_linear_net(self):
        p = linear_net(np.zeros((3, 4)))
        assert not np.any(nc.forward(p, np.random.default_rng(0).standard_normal((5, 4))).logits)

    def test_basis_vector_picks_column(self):
        W = np.arange(12.0).reshape(3, 4)
        p = linear_net(W)
        for j in range(4):
            e = np.eye(4)[j]
            assert np.array_equal(nc.logits(p, e[None])[0], W[:, j])

    def test_straight_line_reference(self):
        for seed in range(5):
            p, rng = random_tiny_net(seed)
            X = rng.standard_normal((4, p.spec.input_dim))
            np.testing.assert_allclose(nc.logits(p, X), reference_logits(p, X), rtol=1e-12, atol=1e-12)

    def test_rows_independent(self):
        p, rng = random_tiny_net(3)
        X = rng.standard_normal((6, p.spec.input_dim))
        full = nc.logits(p, X)
        for i in range(6):
            np.testing.assert_array_equal(nc.logits(p, X[i:i + 1])[0], full[i])

    def test_dimension_and_finiteness_errors(self, net):
        with pytest.raises(DimensionError):
            nc.forward(net, np.zeros((2, 4)))
        with pytest.raises(NumericalFailure):
            nc.forward(net, np.array([[np.nan, 0, 0]]))

    def test_batch_types_validate(self):
        with pytest.raises(SpecError):
            nc.LogitBatch(np.zeros((2, 3)), [0, 3])
        with pytest.raises(NumericalFailure):
            nc.LogitBatch(np.array([[np.inf, 0.0]]))
        with pytest.raises(SpecError):
            nc.ProbBatch(np.array([[0.6, 0.6]]))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(nc.softmax(np.zeros((1, 10))), 0.1, rtol=0, atol=1e-15)

    def test_two_class_closed_form(self):
        e = np.e
        np.testing.assert_allclose(nc.softmax(np.array([1.0, 0.0])), [e / (1 + e), 1 / (1 + e)], rtol=1e-14)

    def test_no_overflow(self):
        p = nc.softmax(np.array([[1000.0, 0.0]]))
        assert p[0, 0] == 1.0 and 0 <= p[0, 1] < 1e-300

    def test_batch_in_batch_out(self):
        pb = nc.softmax(nc.LogitBatch(np.zeros((2, 3)), [0, 1]))
        assert isinstance(pb, nc.ProbBatch) and list(pb.labels) == [0, 1]

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=10), st.floats(-100, 100))
    def test_shift_invariance_and_normalisation(self, row, c):
        z = np.array(row)
        p = nc.softmax(z)
        assert abs(p.sum() - 1) <= 1e-9
        assert np.max(np.abs(nc.softmax(z + c) - p)) <= 1e-12


class TestGradients:
    def test_bias_gradient_closed_form(self):
        p = linear_net(np.zeros((4, 3)))
        X = np.random.default_rng(1).standard_normal((8, 3))
        y = np.array([0, 1, 2, 3, 0, 1, 2, 3])
        g = nc.grad_params(p, X, y)
        freq = np.bincount(y, minlength=4) / y.size
        np.testing.assert_allclose(g.blocks()[0][1], 0.25 - freq, atol=1e-15)

    def test_empty_batch(self, net):
        with pytest.raises(DimensionError):
            nc.grad_params(net, np.zeros((0, 3)), np.zeros(0, dtype=int))

    @pytest.mark.parametrize("kind", ["ce", "mse"])
    def test_matches_finite_differences(self, kind):
        from calcurve.lossfns import objective

        for seed in range(6):
            p, rng = random_tiny_net(seed)
            X = rng.standard_normal((5, p.spec.input_dim))
            y = rng.integers(0, p.spec.num_classes, 5)
            g = nc.grad_params(p, X, y, kind)
            fd = fd_gradient(lambda v: objective(p.with_values(v), X, y, kind), p.values, 1e-5)
            assert rel_err(g.values, fd) <= 1e-5

    def test_non_finite_gradient_flagged(self, net):
        bad = net.with_values(np.full(len(net), 1e308))
        with pytest.raises(NumericalFailure), np.errstate(over="ignore", invalid="ignore"):
            nc.grad_params(bad, np.ones((1, 3)), [0])

    def test_grad_input_linear_logit_head(self):
        W = np.random.default_rng(2).standard_normal((3, 4))
        p = linear_net(W)
        x = np.ones(4)
        for k in range(3):
            np.testing.assert_allclose(nc.grad_input(p, x, k, "logit"), W[k], atol=1e-15)

    def test_grad_input_linear_margin_head(self):
        W = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]])
        p = linear_net(W)
        x = np.array([2.0, 1.0])  # logits (2, 1, 1.5): runner-up of class 0 is class 2
        np.testing.assert_allclose(nc.grad_input(p, x, 0, "margin"), W[0] - W[2], atol=1e-15)

    def test_margin_tie_break_smallest_index(self):
        p = linear_net(np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]))
        g = nc.grad_input(p, np.array([2.0, 1.0]), 0, "margin")
        np.testing.assert_allclose(g, [1.0, -1.0])

    def test_grad_input_wrong_shape(self, net):
        with pytest.raises(DimensionError):
            nc.grad_input(net, np.zeros((2, 3)), 0)

    @pytest.mark.parametrize("head", ["loss", "margin", "logit"])
    def test_grad_input_finite_differences(self, head):
        for seed in range(5):
            p, rng = random_tiny_net(seed + 40)
            x = rng.standard_normal(p.spec.input_dim)
            y = int(rng.integers(p.spec.num_classes))

            def f(xx):
                z = nc.logits(p, xx[None])[0]
                if head == "logit":
                    return z[y]
                if head == "margin":
                    return z[y] - np.max(np.delete(z, y))
                return -nc.log_softmax(z)[y]

            assert rel_err(nc.grad_input(p, x, y, head), fd_gradient(f, x, 1e-5)) <= 1e-5


class TestSmoothness:
    def test_linear_closed_form(self):
        W = np.array([[1.0, 2.0], [0.5, -1.0], [0.0, 0.0]])
        p = linear_net(W)
        x = np.array([1.0, 0.5])  # logits (2, 0, 0): runner-up is class 1
        g = nc.second_order_smoothness_grad(p, x, 0)
        gW = g.blocks()[0][0]
        diff = W[0] - W[1]
        expect = np.zeros_like(W)
        expect[0], expect[1] = 2 * diff, -2 * diff
        np.testing.assert_allclose(gW, expect, atol=1e-14)
        assert not np.any(g.blocks()[0][1])

    def test_finite_differences_random_nets(self):
        for seed in range(6):
            p, rng = random_tiny_net(seed + 100)
            x = rng.standard_normal(p.spec.input_dim)
            y = int(rng.integers(p.spec.num_classes))
            pen = lambda v: float(np.sum(nc.grad_input(p.with_values(v), x, y, "margin") ** 2))
            g = nc.second_order_smoothness_grad(p, x, y)
            assert rel_err(g.values, fd_gradient(pen, p.values, 1e-5)) <= 1e-4

    def test_zero_network_symmetric_input(self):
        p = tiny_net(3, 3, ((4, "tanh"),), 3)
        p.values[:] = 0.0
        x = np.array([1.0, -1.0, 0.0])
        pen = lambda v: float(np.sum(nc.grad_input(p.with_values(v), x, 0, "margin") ** 2))
        g = nc.second_order_smoothness_grad(p, x, 0)
        np.testing.assert_allclose(g.values, fd_gradient(pen, p.values, 1e-5), atol=1e-9)

    def test_penalty_nonnegative(self):
        for seed in range(4):
            p, rng = random_tiny_net(seed)
            X = rng.standard_normal((7, p.spec.input_dim))
            pen, _ = nc.smoothness_value_and_grad(p, X, rng.integers(0, p.spec.num_classes, 7))
            assert np.all(pen >= 0)

    def test_relu_kink_is_logged(self, caplog):
        p = tiny_net(0, 2, ((3, "relu"),), 2)
        W, b = p.blocks()[0]
        b[...] = 0.0
        with caplog.at_level(logging.WARNING):
            nc.second_order_smoothness_grad(p, np.zeros(2), 0)
        assert any("kink" in r.message for r in caplog.records)


class TestJvpVjp:
    def test_zero_direction(self, net):
        x = np.ones(3)
        assert not np.any(nc.jvp(net, x, v_params=net.zeros_like()))
        assert not np.any(nc.jvp(net, x, v_input=np.zeros(3)))

    def test_transpose_consistency(self):
        for seed in range(8):
            p, rng = random_tiny_net(seed)
            x = rng.standard_normal(p.spec.input_dim)
            v = p.with_values(rng.standard_normal(len(p)))
            vi = rng.standard_normal(p.spec.input_dim)
            u = rng.standard_normal(p.spec.num_classes)
            gp, gx = nc.vjp(p, x, u)
            assert abs(u @ nc.jvp(p, x, v_params=v) - gp.values @ v.values) <= 1e-10
            assert abs(u @ nc.jvp(p, x, v_input=vi) - gx @ vi) <= 1e-10

    def test_dense_assembly_both_ways(self):
        p, rng = random_tiny_net(5)
        x = rng.standard_normal(p.spec.input_dim)
        P, K = len(p), p.spec.num_classes
        by_cols = np.column_stack([nc.jvp(p, x, v_params=p.with_values(np.eye(P)[i])) for i in range(P)])
        by_rows = np.vstack([nc.vjp(p, x, np.eye(K)[k])[0].values for k in range(K)])
        np.testing.assert_allclose(by_cols, by_rows, atol=1e-13)
        np.testing.assert_allclose(by_cols, dense_jacobian(p, x), atol=1e-7)

    def test_linear_parameter_direction(self):
        W = np.random.default_rng(0).standard_normal((3, 2))
        p = linear_net(W)
        x = np.array([0.3, -2.0])
        dW = np.random.default_rng(1).standard_normal((3, 2))
        v = p.zeros_like()
        v.blocks()[0][0][...] = dW
        np.testing.assert_allclose(nc.jvp(p, x, v_params=v), dW @ x, atol=1e-14)

    def test_shape_errors(self, net):
        with pytest.raises(DimensionError):
            nc.jvp(net, np.ones(3), v_input=np.ones(2))
        with pytest.raises(DimensionError):
            nc.vjp(net, np.ones(3), np.ones(2))


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        p, _ = random_tiny_net(9)
        nc.save_checkpoint(tmp_path / "c.bin", p)
        q = nc.load_checkpoint(tmp_path / "c.bin")
        assert q.spec == p.spec and q.values.tobytes() == p.values.tobytes()

    def test_rejects_foreign_and_truncated(self, tmp_path, net):
        (tmp_path / "x.bin").write_bytes(b"nope")
        with pytest.raises(FormatError):
            nc.load_checkpoint(tmp_path / "x.bin")
        nc.save_checkpoint(tmp_path / "c.bin", net)
        (tmp_path / "t.bin").write_bytes((tmp_path / "c.bin").read_bytes()[:-3])
        with pytest.raises(FormatError):
            nc.load_checkpoint(tmp_path / "t.bin")


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_forward_deterministic(seed):
    p, rng = random_tiny_net(seed)
    X = rng.standard_normal((3, p.spec.input_dim))
    assert nc.logits(p, X).tobytes() == nc.logits(p.copy(), X.copy()).tobytes()
