import numpy as np
import pytest

import diffkit
from diffkit import (
    AdamState, BoundEncoder, Tape, Tensor, adam_step, add, build_encoder, concat_columns,
    conv2d_3x3, cosine_similarity_matrix, dense, encode, load_checkpoint, matmul,
    maxpool_2x2, mean, mul, params_digest, reduce_max_with_argmax, relu, reshape, save_checkpoint,
    scale, select_columns, slice_rows, softmax_rows, stop_gradient, sub,
)
from oracle import gradient_check


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    """sum(out * weights) as a scalar tensor."""
    return scale(mean(mul(out, Tensor(weights))), float(out.size))


def _check_op(build, arrays: dict, rng, tolerance=1e-6):
    """Tape gradient of sum(build(...) * R) against central differences on every coordinate."""
    sample = build({k: Tensor(v) for k, v in arrays.items()})
    weights = rng.normal(size=sample.shape)

    tape = Tape()
    bound = {k: tape.parameter(k, v) for k, v in arrays.items()}
    analytic = tape.backward(_weighted_sum(build(bound), weights))

    def loss_fn(params):
        return _weighted_sum(build({k: Tensor(v) for k, v in params.items()}), weights).item()

    total = sum(v.size for v in arrays.values())
    report = gradient_check(loss_fn, analytic, arrays, rng, n_coordinates=total,
                            tolerance=tolerance, required_fraction=1.0)
    assert report["passed"], report["worst"]


class TestForwardOps:

    def test_cosine_with_itself(self, rng):
        x = rng.normal(size=(1, 5))
        assert cosine_similarity_matrix(x, x).item() == pytest.approx(1.0)

    def test_cosine_with_zero_vector(self, rng):
        out = cosine_similarity_matrix(rng.normal(size=(2, 4)), np.zeros((1, 4)))
        assert np.all(out.numpy() == 0.0)

    def test_cosine_range(self, rng):
        out = cosine_similarity_matrix(rng.normal(size=(30, 6)), rng.normal(size=(20, 6))).numpy()
        assert out.min() >= -1.0 and out.max() <= 1.0

    def test_softmax_uniform_row(self):
        out = softmax_rows(np.full((1, 7), 3.0)).numpy()
        np.testing.assert_allclose(out, np.full((1, 7), 1 / 7))

    def test_softmax_rows_sum_to_one(self, rng):
        out = softmax_rows(rng.normal(scale=5.0, size=(50, 13))).numpy()
        assert np.all(out > 0)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)

    def test_reduce_max_ties_go_lowest(self):
        values, idx = reduce_max_with_argmax(np.array([[1.0, 3.0, 3.0], [2.0, 2.0, 0.0]]))
        assert list(idx) == [1, 0]
        np.testing.assert_array_equal(values.numpy(), [3.0, 2.0])

    def test_paper_conv_shapes(self):
        params = build_encoder("paper_conv", seed=0)
        z = encode("paper_conv", diffkit.bind_params(params.arrays), np.zeros((2, 28, 28)))
        assert z.shape == (2, 100)
        assert params.latent_dim == 100
        assert params.arrays["conv1.weight"].size + params.arrays["conv1.bias"].size == 640

    def test_conv_pool_spatial_trace(self, rng):
        h = Tensor(rng.normal(size=(1, 1, 28, 28)))
        sizes = []
        for channels in (1, 64, 64, 64):
            h = maxpool_2x2(conv2d_3x3(h, np.zeros((64, channels, 3, 3)), np.zeros(64)))
            sizes.append(h.shape[2])
        assert sizes == [14, 7, 3, 1]
        assert h.shape == (1, 64, 1, 1)

    def test_small_mlp_zero_input(self):
        params = build_encoder("small_mlp", seed=3)
        z = BoundEncoder(params)(np.zeros((3, 28, 28)))
        assert z.shape == (3, 64)
        assert np.all(z.numpy() == 0.0)

    def test_identity_encoder_flattens(self, rng):
        x = rng.random((4, 28, 28))
        z = BoundEncoder(build_encoder("identity"))(x)
        np.testing.assert_array_equal(z.numpy(), x.reshape(4, 784))

    def test_unknown_descriptor(self):
        with pytest.raises(ValueError, match="Unknown encoder descriptor"):
            build_encoder("resnet")

    @pytest.mark.parametrize("op, args", [
        (matmul, (np.ones((2, 3)), np.ones((2, 3)))),
        (add, (np.ones((2, 3)), np.ones((3, 2)))),
        (cosine_similarity_matrix, (np.ones((2, 3)), np.ones((2, 4)))),
    ])
    def test_shape_mismatch(self, op, args):
        with pytest.raises(ValueError):
            op(*args)

    def test_constants_are_not_recorded(self, rng):
        out = relu(matmul(rng.normal(size=(2, 2)), rng.normal(size=(2, 2))))
        assert not out.tracked


class TestBackward:

    def test_sum_of_parameters_has_unit_gradient(self, rng):
        tape = Tape()
        p = tape.parameter("p", rng.normal(size=(3, 4)))
        grads = tape.backward(scale(mean(p), 12.0))
        np.testing.assert_allclose(grads["p"], np.ones((3, 4)))

    def test_relu_blocks_negative_path(self):
        tape = Tape()
        p = tape.parameter("p", np.array([[-2.0, 3.0]]))
        grads = tape.backward(scale(mean(relu(p)), 2.0))
        np.testing.assert_array_equal(grads["p"], [[0.0, 1.0]])

    def test_max_gradient_goes_to_winner(self):
        tape = Tape()
        p = tape.parameter("p", np.array([[1.0, 5.0, 5.0]]))
        values, _ = reduce_max_with_argmax(p)
        grads = tape.backward(mean(values))
        np.testing.assert_array_equal(grads["p"], [[0.0, 1.0, 0.0]])

    def test_stop_gradient(self, rng):
        tape = Tape()
        p = tape.parameter("p", rng.normal(size=(2, 2)))
        grads = tape.backward(mean(add(mul(p, p), stop_gradient(mul(p, p)))))
        np.testing.assert_allclose(grads["p"], 2 * p.numpy() / 4)

    def test_unused_parameter_gets_zeros(self, rng):
        tape = Tape()
        p = tape.parameter("p", rng.normal(size=(2,)))
        tape.parameter("unused", rng.normal(size=(3, 3)))
        grads = tape.backward(mean(p))
        np.testing.assert_array_equal(grads["unused"], np.zeros((3, 3)))

    def test_non_scalar_loss(self, rng):
        tape = Tape()
        p = tape.parameter("p", rng.normal(size=(2, 2)))
        with pytest.raises(ValueError, match="scalar"):
            tape.backward(relu(p))

    def test_deterministic(self, rng):
        params = build_encoder("small_mlp", seed=5)
        x = rng.random((6, 28, 28))

        def run():
            tape = Tape()
            z = BoundEncoder(params, tape)(x)
            return tape.backward(mean(mul(z, z)))

        first, second = run(), run()
        for name in first:
            assert np.array_equal(first[name], second[name])


class TestGradients:
    """Every differentiable op against central differences."""

    def test_matmul_add_scale(self, rng):
        _check_op(lambda p: scale(add(matmul(p["a"], p["b"]), p["c"]), 0.5),
                  {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4, 2)), "c": rng.normal(size=(2,))}, rng)

    def test_dense_relu(self, rng):
        _check_op(lambda p: relu(dense(p["x"], p["w"], p["b"])),
                  {"x": rng.normal(size=(4, 5)), "w": rng.normal(size=(5, 3)), "b": rng.normal(size=(3,))}, rng)

    def test_sub_mul_broadcast(self, rng):
        _check_op(lambda p: mul(sub(p["a"], p["b"]), p["c"]),
                  {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(1, 4)), "c": rng.normal(size=(4,))}, rng)

    def test_softmax_rows(self, rng):
        _check_op(lambda p: softmax_rows(p["a"]), {"a": rng.normal(size=(3, 5))}, rng)

    def test_cosine_similarity(self, rng):
        _check_op(lambda p: cosine_similarity_matrix(p["a"], p["b"]),
                  {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(5, 4))}, rng)

    def test_reduce_max(self, rng):
        _check_op(lambda p: reduce_max_with_argmax(p["a"])[0], {"a": rng.normal(size=(4, 3))}, rng)

    def test_conv2d(self, rng):
        _check_op(lambda p: conv2d_3x3(p["x"], p["w"], p["b"]),
                  {"x": rng.normal(size=(2, 2, 5, 5)), "w": rng.normal(size=(3, 2, 3, 3)),
                   "b": rng.normal(size=(3,))}, rng)

    def test_maxpool(self, rng):
        _check_op(lambda p: maxpool_2x2(p["x"]), {"x": rng.normal(size=(2, 2, 5, 6))}, rng)

    def test_plumbing_ops(self, rng):
        def build(p):
            rows = slice_rows(p["a"], 1, 4)
            wide = concat_columns([rows, reshape(p["c"], (3, 2))])
            return select_columns(wide, [0, 3, 1])

        _check_op(build, {"a": rng.normal(size=(4, 2)), "c": rng.normal(size=(6,))}, rng)


class TestAdam:

    def test_zero_gradient_keeps_params(self, rng):
        params = {"w": rng.normal(size=(3,))}
        new, _, applied = adam_step(params, {"w": np.zeros(3)}, AdamState())
        assert applied
        np.testing.assert_array_equal(new["w"], params["w"])

    def test_first_step_is_lr_sign(self):
        params = {"w": np.zeros(3)}
        new, state, _ = adam_step(params, {"w": np.array([0.3, -2.0, 5.0])}, AdamState(), lr=1e-3)
        np.testing.assert_allclose(new["w"], [-1e-3, 1e-3, -1e-3], rtol=1e-6)
        assert state.step == 1

    def test_constant_gradient_step_size(self):
        params, state = {"w": np.zeros(2)}, AdamState()
        grads = {"w": np.array([0.7, -0.02])}
        for _ in range(10_000):
            previous = params["w"]
            params, state, _ = adam_step(params, grads, state, lr=1e-3)
        np.testing.assert_allclose(params["w"] - previous, [-1e-3, 1e-3], rtol=1e-3)

    def test_non_finite_gradient_skips(self, capsys):
        params = {"w": np.ones(2)}
        state = AdamState()
        new, new_state, applied = adam_step(params, {"w": np.array([np.nan, 1.0])}, state)
        assert not applied
        assert new is params and new_state is state
        assert "[ADAM]" in capsys.readouterr().out

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape-mismatched"):
            adam_step({"w": np.ones(2)}, {"w": np.ones(3)}, AdamState())


class TestCheckpoint:

    def test_bit_exact_round_trip(self, tmp_path, rng):
        arrays = build_encoder("small_mlp", rng=rng).arrays
        arrays["scalar"] = np.array(3.25)
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(path, arrays, {"kind": "devi", "seed": 4})
        loaded, metadata = load_checkpoint(path)
        assert metadata == {"kind": "devi", "seed": 4}
        assert list(loaded) == list(arrays)
        for name in arrays:
            assert loaded[name].shape == np.shape(arrays[name])
            assert loaded[name].tobytes() == np.asarray(arrays[name], dtype=np.float64).tobytes()
        assert params_digest(loaded) == params_digest(arrays)

    def test_magic_bytes(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(str(path), {"w": np.ones(2)})
        assert path.read_bytes()[:5] == b"DEVI1"

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "other.bin"
        path.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(ValueError, match="not a DEVI1 checkpoint"):
            load_checkpoint(str(path))

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(str(path), {"w": np.ones(4)})
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(str(path))

    def test_digest_sees_single_value_change(self, rng):
        arrays = {"w": rng.normal(size=(4, 4))}
        changed = {"w": arrays["w"].copy()}
        changed["w"][2, 1] += 1e-12
        assert params_digest(arrays) != params_digest(changed)
