import numpy as np
import pytest

from meshbake.autodiff import (Adam, MlpSpec, ParamStore, bilinear_backward,
                               bilinear_sample, mlp_backward, mlp_forward,
                               mlp_init)
from meshbake.errors import UsageError, ValidationError

RNG = np.random.default_rng


def make_mlp(widths, acts, seed=0):
    store = ParamStore()
    spec = MlpSpec(widths, acts)
    mlp_init(spec, store, "net", RNG(seed))
    return spec, store


def fd_param_grads(spec, store, x, upstream, eps=1e-5):
    """Central finite differences of sum(forward * upstream) per parameter."""
    fd = {}

    def loss():
        y, _ = mlp_forward(spec, store, "net", x, want_ctx=False)
        return float(np.sum(y * upstream))

    for name in store.names():
        p = store[name]
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            lp = loss()
            flat[i] = old - eps
            lm = loss()
            flat[i] = old
            g.reshape(-1)[i] = (lp - lm) / (2 * eps)
        fd[name] = g
    return fd


class TestMlpForward:
    def test_identity_single_layer(self):
        spec = MlpSpec((3, 3), ("none",))
        store = ParamStore()
        store.add("net.w0", np.eye(3))
        store.add("net.b0", np.zeros(3))
        x = RNG(1).normal(size=(5, 3))
        y, _ = mlp_forward(spec, store, "net", x, want_ctx=False)
        assert np.array_equal(y, x)

    def test_zero_weights_sigmoid_gives_sigmoid_bias(self):
        spec = MlpSpec((4, 2), ("sigmoid",))
        store = ParamStore()
        b = np.array([0.3, -1.2])
        store.add("net.w0", np.zeros((2, 4)))
        store.add("net.b0", b)
        x = RNG(2).normal(size=(7, 4))
        y, _ = mlp_forward(spec, store, "net", x, want_ctx=False)
        expected = 1.0 / (1.0 + np.exp(-b))
        assert np.abs(y - expected).max() < 1e-15

    def test_matches_independent_matmul_oracle(self):
        spec, store = make_mlp((2, 64, 3), ("relu", "sigmoid"), seed=3)
        x = RNG(4).normal(size=(11, 2))
        y, _ = mlp_forward(spec, store, "net", x, want_ctx=False)
        # straight-line reimplementation
        h = x @ store["net.w0"].T + store["net.b0"]
        h = np.maximum(h, 0)
        z = h @ store["net.w1"].T + store["net.b1"]
        oracle = 1.0 / (1.0 + np.exp(-z))
        assert np.abs(y - oracle).max() < 1e-12

    def test_shape_mismatch_rejected(self):
        spec, store = make_mlp((3, 4), ("none",))
        with pytest.raises(ValidationError):
            mlp_forward(spec, store, "net", np.zeros((2, 5)))

    def test_spec_validation(self):
        with pytest.raises(ValidationError):
            MlpSpec((3,), ())
        with pytest.raises(ValidationError):
            MlpSpec((3, 0), ("none",))
        with pytest.raises(ValidationError):
            MlpSpec((3, 4), ("tanh",))
        with pytest.raises(ValidationError):
            MlpSpec((3, 4, 5), ("none",))


class TestMlpBackward:
    def test_param_grads_match_finite_differences(self):
        spec, store = make_mlp((4, 8, 8, 2), ("relu", "relu", "sigmoid"), seed=5)
        x = RNG(6).normal(size=(6, 4))
        upstream = RNG(7).normal(size=(6, 2))
        y, ctx = mlp_forward(spec, store, "net", x)
        store.zero_grads()
        mlp_backward(spec, store, "net", ctx, upstream)
        fd = fd_param_grads(spec, store, x, upstream)
        for name in store.names():
            an = store.grad(name)
            denom = np.maximum(np.abs(fd[name]), np.abs(an))
            denom = np.where(denom > 1e-7, denom, 1.0)
            rel = np.abs(fd[name] - an) / denom
            assert rel.max() < 1e-4, name

    def test_input_grad_matches_finite_differences(self):
        spec, store = make_mlp((3, 16, 2), ("relu", "none"), seed=8)
        x = RNG(9).normal(size=(4, 3))
        upstream = RNG(10).normal(size=(4, 2))
        _, ctx = mlp_forward(spec, store, "net", x)
        gx = mlp_backward(spec, store, "net", ctx, upstream)
        eps = 1e-6
        for i in range(x.shape[0]):
            for j in range(x.shape[1]):
                old = x[i, j]
                x[i, j] = old + eps
                lp = float(np.sum(mlp_forward(spec, store, "net", x,
                                              want_ctx=False)[0] * upstream))
                x[i, j] = old - eps
                lm = float(np.sum(mlp_forward(spec, store, "net", x,
                                              want_ctx=False)[0] * upstream))
                x[i, j] = old
                assert abs((lp - lm) / (2 * eps) - gx[i, j]) < 1e-6

    def test_zero_upstream_leaves_grads_unchanged(self):
        spec, store = make_mlp((3, 5, 2), ("relu", "none"))
        x = RNG(11).normal(size=(4, 3))
        _, ctx = mlp_forward(spec, store, "net", x)
        store.accumulate("net.b1", np.array([1.0, 2.0]))
        before = {n: store.grad(n).copy() for n in store.names()}
        mlp_backward(spec, store, "net", ctx, np.zeros((4, 2)))
        for n in store.names():
            assert np.array_equal(store.grad(n), before[n])

    def test_backward_is_linear_in_upstream(self):
        spec, store = make_mlp((3, 6, 2), ("relu", "none"), seed=12)
        x = RNG(13).normal(size=(5, 3))
        g1 = RNG(14).normal(size=(5, 2))
        g2 = RNG(15).normal(size=(5, 2))

        def run(up):
            _, ctx = mlp_forward(spec, store, "net", x)
            store.zero_grads()
            mlp_backward(spec, store, "net", ctx, up)
            return {n: store.grad(n).copy() for n in store.names()}

        ga = run(g1)
        gb = run(g2)
        gs = run(g1 + g2)
        for n in store.names():
            assert np.abs(gs[n] - (ga[n] + gb[n])).max() < 1e-12

    def test_backward_without_forward_state_is_usage_error(self):
        spec, store = make_mlp((3, 2), ("none",))
        with pytest.raises(UsageError):
            mlp_backward(spec, store, "net", None, np.zeros((1, 2)))

    def test_accumulation_bit_deterministic(self):
        spec, store = make_mlp((3, 8, 2), ("relu", "sigmoid"), seed=16)
        x = RNG(17).normal(size=(9, 3))
        up = RNG(18).normal(size=(9, 2))

        def run():
            _, ctx = mlp_forward(spec, store, "net", x)
            store.zero_grads()
            mlp_backward(spec, store, "net", ctx, up)
            return {n: store.grad(n).copy() for n in store.names()}

        a, b = run(), run()
        for n in store.names():
            assert np.array_equal(a[n], b[n])

    def test_zero_grads_does_not_affect_forward(self):
        spec, store = make_mlp((3, 4, 2), ("relu", "none"), seed=19)
        x = RNG(20).normal(size=(4, 3))
        y0, ctx = mlp_forward(spec, store, "net", x)
        mlp_backward(spec, store, "net", ctx, np.ones((4, 2)))
        store.zero_grads()
        y1, _ = mlp_forward(spec, store, "net", x, want_ctx=False)
        assert np.array_equal(y0, y1)


class TestBilinear:
    def test_texel_center_identity(self):
        tex = RNG(21).normal(size=(8, 8, 3))
        for i, j in ((0, 0), (3, 5), (7, 7)):
            uv = np.array([(j + 0.5) / 8, (i + 0.5) / 8])
            val, _ = bilinear_sample(tex, uv, want_ctx=False)
            assert np.abs(val - tex[i, j]).max() < 1e-12

    def test_constant_texture(self):
        tex = np.full((6, 6, 2), 0.37)
        uv = RNG(22).uniform(0, 1, size=(50, 2))
        vals, _ = bilinear_sample(tex, uv, want_ctx=False)
        assert np.abs(vals - 0.37).max() < 1e-12

    def test_backward_weights_sum_to_one(self):
        tex = np.zeros((5, 5, 1))
        uv = RNG(23).uniform(0.1, 0.9, size=(20, 2))
        _, ctx = bilinear_sample(tex, uv)
        gt, _ = bilinear_backward(ctx, np.ones((20, 1)))
        assert abs(gt.sum() - 20.0) < 1e-9

    def test_texel_grads_match_finite_differences(self):
        tex = RNG(24).normal(size=(4, 4, 2))
        uv = RNG(25).uniform(0.05, 0.95, size=(10, 2))
        up = RNG(26).normal(size=(10, 2))
        _, ctx = bilinear_sample(tex, uv)
        gt, _ = bilinear_backward(ctx, up)
        eps = 1e-6
        fd = np.zeros_like(tex)
        for idx in np.ndindex(tex.shape):
            old = tex[idx]
            tex[idx] = old + eps
            lp = float(np.sum(bilinear_sample(tex, uv, want_ctx=False)[0] * up))
            tex[idx] = old - eps
            lm = float(np.sum(bilinear_sample(tex, uv, want_ctx=False)[0] * up))
            tex[idx] = old
            fd[idx] = (lp - lm) / (2 * eps)
        denom = np.maximum(np.abs(fd), np.abs(gt))
        denom = np.where(denom > 1e-8, denom, 1.0)
        assert (np.abs(fd - gt) / denom).max() < 1e-6

    def test_non_finite_uv_rejected(self):
        tex = np.zeros((4, 4, 1))
        with pytest.raises(ValidationError):
            bilinear_sample(tex, np.array([[0.5, np.nan]]))

    def test_clamped_addressing_at_borders(self):
        tex = RNG(27).normal(size=(4, 4, 1))
        lo, _ = bilinear_sample(tex, np.array([0.0, 0.0]), want_ctx=False)
        hi, _ = bilinear_sample(tex, np.array([1.0, 1.0]), want_ctx=False)
        assert np.allclose(lo, tex[0, 0])
        assert np.allclose(hi, tex[3, 3])


class TestAdam:
    def test_sparse_step_matches_dense_when_all_rows_touched(self):
        rng = RNG(28)
        store_a = ParamStore()
        store_b = ParamStore()
        p = rng.normal(size=(10, 4))
        g = rng.normal(size=(10, 4))
        store_a.add("w", p.copy())
        store_b.add("w", p.copy())
        store_a.accumulate("w", g)
        store_b.accumulate("w", g)
        Adam(store_a, 0.01).step()
        Adam(store_b, 0.01).step(touched={"w": np.arange(10)})
        assert np.allclose(store_a["w"], store_b["w"], atol=1e-15)

    def test_lr_prefix_map(self):
        store = ParamStore()
        store.add("grid0", np.zeros(3))
        store.add("decoder.w0", np.zeros(3))
        store.accumulate("grid0", np.ones(3))
        store.accumulate("decoder.w0", np.ones(3))
        opt = Adam(store, {"grid": 0.5, "decoder": 0.1})
        opt.step()
        assert abs(store["grid0"][0] + 0.5) < 1e-9
        assert abs(store["decoder.w0"][0] + 0.1) < 1e-9
