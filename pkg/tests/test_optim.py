import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calcurve import curvature as cv
from calcurve import lossfns as lf
from calcurve import netcore as nc
from calcurve import optim
from calcurve.errors import FormatError, NumericalFailure, SpecError

from conftest import random_tiny_net, tiny_net


def scalar_params(theta):
    """One-parameter 'network' (a 1x1 linear map without bias use) for scalar recurrences."""
    p = tiny_net(0, 1, (), 2)
    p.values[:] = 0.0
    p.values[0] = theta
    return p


def quad_grad(lam):
    return lambda p, batch=None: p.with_values(lam * p.values)


def cfg(**kw):
    return optim.OptimizerConfig(**kw)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(kind="Adam"), dict(lr=np.inf), dict(lr=-1), dict(kind="GD", batch_size=4),
                                    dict(bulk_refresh_every=0), dict(muon_coeffs=(1.0, 2.0)), dict(momentum=1.0)])
    def test_invalid(self, kw):
        with pytest.raises(SpecError):
            optim.OptimizerConfig(**kw)

    def test_defaults(self):
        c = optim.OptimizerConfig(kind="Muon")
        assert c.muon_coeffs == (3.4445, -4.7750, 2.0315) and c.muon_ns_steps == 5 and c.momentum == 0.95
        assert optim.OptimizerConfig().sam_rho == 0.05 and optim.OptimizerConfig().bulk_refresh_every == 50


class TestGD:
    def test_zero_lr_identity(self):
        p, rng = random_tiny_net(1)
        g = p.with_values(rng.standard_normal(len(p)))
        assert np.array_equal(optim.step_gd(p, g, cfg(lr=0.0)).values, p.values)

    @pytest.mark.parametrize("lr,contracts", [(0.5, True), (1.9, True), (2.1, False), (3.0, False)])
    def test_quadratic_stability_threshold(self, lr, contracts):
        lam = 1.0
        p = scalar_params(1.0)
        c = cfg(lr=lr)
        prev = 1.0
        for _ in range(20):
            p = optim.step_gd(p, quad_grad(lam)(p), c)
            cur = abs(p.values[0])
            assert (cur < prev) == contracts
            prev = cur
            np.testing.assert_allclose(p.values[0], (1 - lr * lam) ** (_ + 1), rtol=1e-12)

    def test_two_steps_compose(self):
        """theta <- (I - lr A) theta + lr b twice equals the composed affine map."""
        rng = np.random.default_rng(0)
        p = tiny_net(0, 2, (), 2)
        P = len(p)
        M = rng.standard_normal((P, P))
        A = M @ M.T / P
        b = rng.standard_normal(P)
        lr = 0.1
        grad = lambda q: q.with_values(A @ q.values - b)
        q = optim.step_gd(optim.step_gd(p, grad(p), cfg(lr=lr)), grad(optim.step_gd(p, grad(p), cfg(lr=lr))), cfg(lr=lr))
        T = np.eye(P) - lr * A
        expect = T @ (T @ p.values + lr * b) + lr * b
        np.testing.assert_allclose(q.values, expect, rtol=1e-12, atol=1e-14)

    def test_non_finite_gradient(self, net):
        with pytest.raises(NumericalFailure):
            optim.step_sgd(net, net.with_values(np.full(len(net), np.nan)), cfg(kind="SGD", lr=0.1))


class TestAdamW:
    def test_first_step_closed_form(self):
        p, rng = random_tiny_net(2)
        g = p.with_values(rng.standard_normal(len(p)))
        c = cfg(kind="AdamW", lr=1e-3)
        q, st_ = optim.step_adamw(p, g, optim.OptimizerState(), c)
        expect = p.values - 1e-3 * g.values / (np.abs(g.values) + 1e-8)
        np.testing.assert_allclose(q.values, expect, rtol=1e-12, atol=1e-15)
        assert st_.step == 1

    def test_zero_grad_only_decays(self):
        p, _ = random_tiny_net(3)
        c = cfg(kind="AdamW", lr=0.1, weight_decay=0.2)
        q, _ = optim.step_adamw(p, p.zeros_like(), optim.OptimizerState(), c)
        np.testing.assert_allclose(q.values, p.values * (1 - 0.02), rtol=1e-15)

    def test_state_round_trip(self, tmp_path):
        p, rng = random_tiny_net(4)
        c = cfg(kind="AdamW", lr=0.01)
        state = optim.OptimizerState()
        for _ in range(3):
            p, state = optim.step_adamw(p, p.with_values(rng.standard_normal(len(p))), state, c)
        state.save(tmp_path / "s.bin")
        back = optim.OptimizerState.load(tmp_path / "s.bin")
        assert back.step == state.step
        for k in state.buffers:
            assert back.buffers[k].tobytes() == state.buffers[k].tobytes()

    def test_state_bad_bytes(self):
        with pytest.raises(FormatError):
            optim.OptimizerState.from_bytes(b"XXXXX")
        good = optim.OptimizerState(2, {"m": np.ones(3)}).to_bytes()
        with pytest.raises(FormatError):
            optim.OptimizerState.from_bytes(good[:-1])


class TestMuon:
    def test_identity_is_fixed(self):
        np.testing.assert_allclose(optim.newton_schulz(np.eye(16)), np.eye(16), atol=5e-2)

    def test_rank_one_polar_factor(self):
        rng = np.random.default_rng(1)
        u, v = rng.standard_normal(12), rng.standard_normal(20)
        out = optim.newton_schulz(np.outer(u, v))
        np.testing.assert_allclose(out, np.outer(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)), atol=5e-2)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31), st.integers(2, 40), st.sampled_from([2, 3, 4, 8]), st.booleans())
    def test_singular_values_in_band(self, seed, m, ratio, tall):
        rows, cols = (m * ratio, m) if tall else (m, m * ratio)
        G = np.random.default_rng(seed).standard_normal((rows, cols))
        s = np.linalg.svd(optim.newton_schulz(G), compute_uv=False)
        assert s.min() >= 0.7 and s.max() <= 1.3

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31), st.integers(2, 30), st.sampled_from([2, 4]))
    def test_near_orthogonal(self, seed, m, ratio):
        X = optim.newton_schulz(np.random.default_rng(seed).standard_normal((m, m * ratio)))
        assert np.linalg.norm(X @ X.T - np.eye(m)) / np.sqrt(m) <= 0.35

    def test_zero_block_skipped(self):
        p = tiny_net(0, 3, ((4, "tanh"),), 2)
        g = p.zeros_like()
        g.views()[1][...] = 1.0  # only a bias gets gradient
        q, st_ = optim.step_muon(p, g, optim.OptimizerState(), cfg(kind="Muon", lr=0.1))
        diff = q.with_values(q.values - p.values).views()
        assert not np.any(diff[0]) and not np.any(diff[2])
        np.testing.assert_allclose(diff[1], -0.1)

    def test_update_scaling_and_momentum(self):
        p, rng = random_tiny_net(5)
        g = p.with_values(rng.standard_normal(len(p)))
        c = cfg(kind="Muon", lr=0.01)
        q1, s1 = optim.step_muon(p, g, optim.OptimizerState(), c)
        np.testing.assert_array_equal(s1.buffers["mom"], g.values)
        upd = p.with_values((p.values - q1.values) / 0.01).views()
        for arr, garr in zip(upd, g.views()):
            if arr.ndim == 2:
                s = np.linalg.svd(arr / np.sqrt(max(arr.shape)), compute_uv=False)
                assert s.min() > 0.7 and s.max() < 1.3
            else:
                np.testing.assert_allclose(arr, garr)
        _, s2 = optim.step_muon(q1, g, s1, c)
        np.testing.assert_allclose(s2.buffers["mom"], 1.95 * g.values)

    def test_zero_lr_identity(self):
        p, rng = random_tiny_net(6)
        q, _ = optim.step_muon(p, p.with_values(rng.standard_normal(len(p))), optim.OptimizerState(),
                               cfg(kind="Muon", lr=0.0))
        assert np.array_equal(q.values, p.values)


class TestSAM:
    def test_rho_zero_is_sgd_bitwise(self):
        p, rng = random_tiny_net(7)
        X = rng.standard_normal((5, p.spec.input_dim))
        y = rng.integers(0, p.spec.num_classes, 5)
        gfn = lambda q, b: nc.grad_params(q, *b)
        c = cfg(kind="SAM", lr=0.1, sam_rho=0.0)
        sam = optim.step_sam(p, (X, y), c, gfn)
        sgd = optim.step_sgd(p, gfn(p, (X, y)), c)
        assert sam.values.tobytes() == sgd.values.tobytes()

    def test_scalar_quadratic(self):
        lam, rho, lr, theta = 2.0, 0.1, 0.05, 0.7
        p = scalar_params(theta)
        out = optim.step_sam(p, None, cfg(kind="SAM", lr=lr, sam_rho=rho), quad_grad(lam))
        sam_grad = lam * (theta + rho * np.sign(theta))
        np.testing.assert_allclose(out.values[0], theta - lr * sam_grad, rtol=1e-14)
        assert abs(sam_grad) > abs(lam * theta)

    def test_zero_gradient_falls_back(self, net):
        out = optim.step_sam(net, None, cfg(kind="SAM", lr=0.1), lambda q, b: q.zeros_like())
        assert np.array_equal(out.values, net.values)

    def test_invariant_to_ascent_rescaling(self):
        p, rng = random_tiny_net(8)
        X = rng.standard_normal((4, p.spec.input_dim))
        y = rng.integers(0, p.spec.num_classes, 4)
        calls = []

        def gfn(q, b, scale):
            g = nc.grad_params(q, *b)
            calls.append(len(calls))
            return g.with_values(g.values * scale) if len(calls) % 2 == 1 else g

        c = cfg(kind="SAM", lr=0.1)
        a = optim.step_sam(p, (X, y), c, lambda q, b: gfn(q, b, 1.0))
        b = optim.step_sam(p, (X, y), c, lambda q, b: gfn(q, b, 37.0))
        np.testing.assert_allclose(a.values, b.values, rtol=1e-12, atol=1e-15)

    def test_small_rho_ratio(self):
        """The SAM-SGD gap shrinks linearly in rho."""
        p, rng = random_tiny_net(9)
        X = rng.standard_normal((6, p.spec.input_dim))
        y = rng.integers(0, p.spec.num_classes, 6)
        gfn = lambda q, b: nc.grad_params(q, *b)
        sgd = optim.step_sgd(p, gfn(p, (X, y)), cfg(kind="SGD", lr=0.1))
        gaps = [np.linalg.norm(optim.step_sam(p, (X, y), cfg(kind="SAM", lr=0.1, sam_rho=r), gfn).values - sgd.values)
                for r in (1e-3, 1e-4)]
        assert 8.0 < gaps[0] / gaps[1] < 12.0


class TestBulkSGD:
    def _setup(self, seed=10):
        p, rng = random_tiny_net(seed)
        X = rng.standard_normal((8, p.spec.input_dim))
        y = rng.integers(0, p.spec.num_classes, 8)
        return p, X, y, cv.GNOperator(p, X)

    def test_k_zero_is_sgd(self):
        p, X, y, op = self._setup()
        g = nc.grad_params(p, X, y)
        c = cfg(kind="BulkSGD", lr=0.1, bulk_k=0)
        q, _ = optim.step_bulk_sgd(p, g, optim.OptimizerState(), c, None)
        assert q.values.tobytes() == optim.step_sgd(p, g, c).values.tobytes()

    def test_projection_orthogonal(self):
        p, X, y, op = self._setup()
        g = nc.grad_params(p, X, y)
        c = cfg(kind="BulkSGD", lr=0.1, bulk_k=3)
        q, st_ = optim.step_bulk_sgd(p, g, optim.OptimizerState(), c, op)
        V = st_.basis
        np.testing.assert_allclose(V.T @ V, np.eye(3), atol=1e-6)
        proj = (p.values - q.values) / 0.1
        assert np.max(np.abs(V.T @ proj)) <= 1e-6 * np.linalg.norm(g.values)

    def test_gradient_in_span_gives_zero_update(self):
        p, X, y, op = self._setup()
        c = cfg(kind="BulkSGD", lr=0.1, bulk_k=2)
        _, st_ = optim.step_bulk_sgd(p, nc.grad_params(p, X, y), optim.OptimizerState(), c, op)
        g = p.with_values(st_.basis @ np.array([0.3, -2.0]))
        q, _ = optim.step_bulk_sgd(p, g, st_, c, op)
        np.testing.assert_allclose(q.values, p.values, atol=1e-14)

    def test_refresh_cadence(self):
        p, X, y, op = self._setup()
        calls = {"n": 0}

        def counting(v):
            calls["n"] += 1
            return op(v)

        c = cfg(kind="BulkSGD", lr=0.0, bulk_k=1, bulk_refresh_every=3, bulk_power_iters=2)
        st_ = optim.OptimizerState()
        g = nc.grad_params(p, X, y)
        history = []
        for _ in range(7):
            before = calls["n"]
            p, st_ = optim.step_bulk_sgd(p, g, st_, c, counting)
            history.append(calls["n"] > before)
        assert history == [True, False, False, True, False, False, True]

    def test_refresh_needs_operator(self, net):
        with pytest.raises(SpecError):
            optim.step_bulk_sgd(net, net.zeros_like(), optim.OptimizerState(), cfg(kind="BulkSGD", lr=0.1), None)


@pytest.mark.parametrize("kind", optim.KINDS)
def test_every_optimizer_zero_lr_identity(kind):
    p, rng = random_tiny_net(11)
    X = rng.standard_normal((5, p.spec.input_dim))
    y = rng.integers(0, p.spec.num_classes, 5)
    c = cfg(kind=kind, lr=0.0)
    g = nc.grad_params(p, X, y)
    if kind in ("GD", "SGD"):
        q = optim.step_gd(p, g, c)
    elif kind == "AdamW":
        q, _ = optim.step_adamw(p, g, optim.OptimizerState(), c)
    elif kind == "Muon":
        q, _ = optim.step_muon(p, g, optim.OptimizerState(), c)
    elif kind == "SAM":
        q = optim.step_sam(p, (X, y), c, lambda w, b: nc.grad_params(w, *b))
    else:
        q, _ = optim.step_bulk_sgd(p, g, optim.OptimizerState(), c, cv.GNOperator(p, X))
    assert np.array_equal(q.values, p.values)


def test_calmo_gradient_drives_optimizer():
    p, rng = random_tiny_net(12)
    X = rng.standard_normal((6, p.spec.input_dim))
    y = rng.integers(0, p.spec.num_classes, 6)
    lc = lf.CalMOConfig(epsilon=0.1, pgd_alpha=0.03)
    before = lf.calmo_loss(p, X, y, lc).total
    for _ in range(30):
        p = optim.step_gd(p, nc.grad_params(p, X, y, lc), cfg(lr=0.05))
    assert lf.calmo_loss(p, X, y, lc).total < before
