"""Autodiff engine tests: forward oracles, gradient checks, graph semantics."""

import numpy as np
import pytest

from gridtnp import tensor as T
from gridtnp.tensor import (
    EmptyAxisError,
    GraphError,
    NumericError,
    ShapeError,
    Tensor,
    backward,
    grad_check,
)


def leaf(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


class TestForwardOracles:
    def test_matmul_identity(self, rng):
        a = rng.normal(size=(2, 2))
        out = T.matmul(Tensor(np.eye(2)), Tensor(a))
        np.testing.assert_allclose(out.data, a, atol=0)

    def test_softmax_equal_logits(self):
        for c in (-3.0, 0.0, 11.5):
            out = T.softmax(Tensor(np.full(3, c)), axis=-1)
            np.testing.assert_allclose(out.data, np.full(3, 1.0 / 3.0), atol=1e-15)

    def test_matmul_triple_loop_oracle(self, rng):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        want = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    want[i, j] += a[i, k] * b[k, j]
        got = T.matmul(Tensor(a), Tensor(b)).data
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_batched_matmul_matches_loop(self, rng):
        a = rng.normal(size=(5, 3, 4))
        b = rng.normal(size=(5, 4, 2))
        got = T.matmul(Tensor(a), Tensor(b)).data
        want = np.stack([a[i] @ b[i] for i in range(5)])
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_softplus_stable_for_large_inputs(self):
        out = T.softplus(Tensor(np.array([-800.0, 0.0, 800.0])))
        np.testing.assert_allclose(out.data, [0.0, np.log(2.0), 800.0], atol=1e-12)

    def test_concat_split_roundtrip(self, rng):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 5))
        cat = T.concat([Tensor(a), Tensor(b)], axis=1)
        pa, pb = T.split(cat, [3, 5], axis=1)
        np.testing.assert_array_equal(pa.data, a)
        np.testing.assert_array_equal(pb.data, b)

    def test_gather_rows(self, rng):
        x = rng.normal(size=(6, 4))
        idx = np.array([[0, 5], [2, 2]])
        np.testing.assert_array_equal(T.gather(Tensor(x), idx).data, x[idx])

    def test_masked_fill(self, rng):
        x = rng.normal(size=(3, 3))
        mask = np.eye(3, dtype=bool)
        out = T.masked_fill(Tensor(x), mask, -1.0)
        assert (out.data[mask] == -1.0).all()
        np.testing.assert_array_equal(out.data[~mask], x[~mask])

    def test_roll_and_pad(self, rng):
        x = rng.normal(size=(2, 5))
        np.testing.assert_array_equal(T.roll(Tensor(x), 2, 1).data, np.roll(x, 2, 1))
        padded = T.pad_end(Tensor(x), [0, 3])
        assert padded.shape == (2, 8)
        assert (padded.data[:, 5:] == 0).all()


class TestErrors:
    def test_add_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_matmul_inner_dim_mismatch(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))

    def test_softmax_empty_axis(self):
        with pytest.raises(EmptyAxisError):
            T.softmax(Tensor(np.zeros((3, 0))), axis=-1)

    def test_backward_non_scalar_loss(self):
        x = leaf(np.ones(3))
        with pytest.raises(GraphError):
            backward(T.mul(x, x))


class TestBackward:
    def test_sum_gradient(self):
        x = leaf([1.0, 2.0, 3.0])
        backward(T.tsum(x))
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_quadratic_gradient(self):
        x = leaf([1.0, 2.0])
        backward(T.tsum(T.mul(x, x)))
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_three_layer_mlp_matches_finite_differences(self, rng):
        ws = [leaf(rng.normal(size=s) * 0.5) for s in [(4, 5), (5, 5), (5, 1)]]
        x = Tensor(rng.normal(size=(3, 4)))

        def run():
            h = x
            for w in ws[:-1]:
                h = T.gelu(T.matmul(h, w))
            return T.tsum(T.matmul(h, ws[-1]))

        loss = run()
        for w in ws:
            w.zero_grad()
        backward(loss)
        analytic = [w.grad.copy() for w in ws]
        step = 1e-5
        for w, a in zip(ws, analytic):
            flat = w.data.reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + step
                up = float(run().data)
                flat[i] = keep - step
                down = float(run().data)
                flat[i] = keep
                num = (up - down) / (2 * step)
                ai = a.reshape(-1)[i]
                assert abs(ai - num) / max(1.0, abs(ai), abs(num)) < 1e-4

    def test_accumulation_without_zeroing(self):
        x = leaf([2.0])
        backward(T.tsum(x))
        backward(T.tsum(x))
        np.testing.assert_array_equal(x.grad, [2.0])

    def test_shared_parameter_sums_both_paths(self, rng):
        # y = (x @ w) @ w pattern: dL/dw must be the sum of both uses
        w = leaf(rng.normal(size=(3, 3)))
        x = Tensor(rng.normal(size=(2, 3)))
        loss = T.tsum(T.matmul(T.matmul(x, w), w))
        backward(loss)
        rep = grad_check(lambda t: T.tsum(T.matmul(T.matmul(x, t), t)), w)
        assert rep.passed, rep

    def test_off_path_gradient_is_exactly_zero(self):
        x = leaf([1.0, 2.0])
        unused = leaf([5.0])
        backward(T.tsum(x))
        assert unused.grad is None or (unused.grad == 0).all()

    def test_constant_branch_records_no_graph(self):
        a = Tensor(np.ones(3))
        b = Tensor(np.ones(3))
        out = T.add(a, b)
        assert not out.requires_grad and out._backward is None


# Each entry builds a scalar function that exercises one op.
_OP_CASES = {
    "add": lambda x: T.tsum(T.add(x, 0.7)),
    "add_broadcast": lambda x: T.tsum(T.add(x, Tensor(np.linspace(-1, 1, x.shape[-1])))),
    "sub": lambda x: T.tsum(T.sub(1.3, x)),
    "mul": lambda x: T.tsum(T.mul(x, x)),
    "div": lambda x: T.tsum(T.div(x, T.add(T.mul(x, x), 1.5))),
    "matmul": lambda x: T.tsum(T.matmul(x, T.transpose(x, (1, 0)))),
    "concat": lambda x: T.tsum(T.mul(T.concat([x, x], axis=0), 0.5)),
    "split": lambda x: T.tsum(T.split(x, [1, x.shape[0] - 1], axis=0)[1]),
    "transpose": lambda x: T.tsum(T.mul(T.transpose(x, (1, 0)), Tensor(np.ones(x.shape[::-1])))),
    "reshape": lambda x: T.tsum(T.mul(T.reshape(x, (-1 if 0 in x.shape else x.size,)), 2.0)),
    "broadcast_to": lambda x: T.tsum(T.broadcast_to(x, (3,) + x.shape)),
    "gather": lambda x: T.tsum(T.gather(x, np.array([0, 1, 1, 2]))),
    "getitem": lambda x: T.tsum(x[1:, :2]),
    "masked_fill": lambda x: T.tsum(T.masked_fill(x, np.eye(x.shape[0], x.shape[1], dtype=bool), 0.25)),
    "softmax": lambda x: T.tsum(T.mul(T.softmax(x, -1), Tensor(np.linspace(0, 1, x.shape[-1])))),
    "layer_norm": lambda x: T.tsum(T.mul(T.layer_norm(x), Tensor(np.linspace(0.5, 1.5, x.shape[-1])))),
    "gelu": lambda x: T.tsum(T.gelu(x)),
    "relu": lambda x: T.tsum(T.relu(T.add(x, 0.05))),
    "softplus": lambda x: T.tsum(T.softplus(x)),
    "log": lambda x: T.tsum(T.log(T.add(T.mul(x, x), 1.1))),
    "exp": lambda x: T.tsum(T.exp(T.mul(x, 0.5))),
    "sqrt": lambda x: T.tsum(T.sqrt(T.add(T.mul(x, x), 0.9))),
    "sum_axis": lambda x: T.tsum(T.mul(T.tsum(x, axis=0), T.tsum(x, axis=0))),
    "mean": lambda x: T.tsum(T.mul(T.tmean(x, axis=-1, keepdims=True), x)),
    "roll": lambda x: T.tsum(T.mul(T.roll(x, 1, 0), x)),
    "pad_end": lambda x: T.tsum(T.mul(T.pad_end(x, [1, 1]), T.pad_end(x, [1, 1]))),
}


class TestOpGradients:
    @pytest.mark.parametrize("name", sorted(_OP_CASES))
    def test_op_matches_central_differences(self, name):
        rng = np.random.default_rng(hash(name) % 2**32)
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        rep = grad_check(_OP_CASES[name], x, step=1e-5, tol=1e-4)
        assert rep.passed, f"{name}: {rep}"

    def test_randomized_trials_all_ops(self):
        # invariant: 100 randomized 64-bit trials across the registered ops
        rng = np.random.default_rng(7)
        names = sorted(_OP_CASES)
        for trial in range(100):
            name = names[trial % len(names)]
            x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
            rep = grad_check(_OP_CASES[name], x, step=1e-5, tol=1e-4, max_entries=4, rng=rng)
            assert rep.passed, f"trial {trial} ({name}): {rep}"


class TestInvariants:
    def test_softmax_simplex(self, rng):
        for _ in range(20):
            x = Tensor(rng.normal(size=(4, 7)) * 5)
            s = T.softmax(x, -1).data
            assert (s >= 0).all()
            np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-12)

    def test_layer_norm_moments(self, rng):
        x = Tensor(rng.normal(size=(10, 32)) * 3 + 1)
        y = T.layer_norm(x).data
        assert np.abs(y.mean(-1)).max() < 1e-10
        np.testing.assert_allclose(y.var(-1), 1.0, atol=1e-5)


class TestGradCheck:
    def test_sum_is_exact(self, rng):
        x = Tensor(rng.normal(size=(5,)), requires_grad=True)
        rep = grad_check(T.tsum, x)
        assert rep.max_rel_error < 1e-9

    def test_softmax_sum_is_constant(self, rng):
        x = Tensor(rng.normal(size=(6,)), requires_grad=True)
        rep = grad_check(lambda t: T.tsum(T.softmax(t, -1)), x)
        assert rep.max_rel_error < 1e-9

    def test_mhsa_block_on_four_tokens(self, rng):
        from gridtnp.attnproc import AttentionConfig, MHSABlock

        block = MHSABlock(AttentionConfig(dz=8, heads=2, d_v=4, d_qk=4), rng)
        z = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
        rep = grad_check(lambda t: T.tsum(T.mul(block(t), block(t))), z, tol=1e-4)
        assert rep.passed, rep

    def test_non_finite_raises_numeric_error(self):
        x = Tensor(np.array([-1.0]), requires_grad=True)
        with np.errstate(invalid="ignore"), pytest.raises(NumericError):
            grad_check(lambda t: T.tsum(T.log(t)), x)

    def test_report_fields(self, rng):
        x = Tensor(rng.normal(size=(3,)), requires_grad=True)
        rep = grad_check(T.tsum, x, tol=1e-4)
        assert rep.n_checked == 3 and rep.passed
        assert "PASS" in str(rep)


class TestParameter:
    def test_parameter_grad_allocated(self):
        from gridtnp.tensor import Parameter

        p = Parameter(np.zeros((2, 2)), name="w", init_scheme="zeros")
        assert p.grad.shape == (2, 2) and (p.grad == 0).all()
        assert p.tensor.requires_grad
