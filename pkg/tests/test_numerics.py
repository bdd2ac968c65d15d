import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hashexit.autodiff import Tensor
from hashexit.errors import BatchSizeError, CheckpointError, DimensionError, NonFiniteError
from hashexit.numerics import (
    LayerParams,
    LrSchedule,
    batch_norm,
    check_gradients,
    init_batch_norm,
    init_linear,
    linear,
    load_checkpoint,
    restore_params,
    save_checkpoint,
    sgd_step,
    sign_act,
    softsign_act,
    tanh_act,
)

rng = np.random.default_rng(77)


def make_linear(w, b):
    return LayerParams(weights=Tensor(np.asarray(w, float)), bias=Tensor(np.asarray(b, float)))


class TestLinear:
    def test_identity_weights(self):
        p = make_linear(np.eye(3), np.zeros(3))
        out = linear(Tensor([[1.0, 2.0, 3.0]]), p)
        assert np.array_equal(out.data, [[1.0, 2.0, 3.0]])

    def test_zero_weights_constant_map(self):
        p = make_linear(np.zeros((3, 1)), [5.0])
        out = linear(Tensor(rng.standard_normal((4, 3))), p)
        assert np.array_equal(out.data, np.full((4, 1), 5.0))

    def test_matches_naive_triple_loop(self):
        x = rng.standard_normal((4, 3))
        w = rng.standard_normal((3, 5))
        b = rng.standard_normal(5)
        out = linear(Tensor(x), make_linear(w, b)).data
        naive = np.empty((4, 5))
        for i in range(4):
            for j in range(5):
                acc = b[j]
                for k in range(3):
                    acc += x[i, k] * w[k, j]
                naive[i, j] = acc
        assert np.max(np.abs(out - naive)) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            linear(Tensor(np.zeros((2, 4))), make_linear(np.eye(3), np.zeros(3)))

    def test_rejects_non_finite(self):
        p = make_linear(np.eye(2), np.zeros(2))
        with pytest.raises(NonFiniteError):
            linear(Tensor([[1.0, np.nan]]), p)


class TestBatchNorm:
    def test_identical_rows_zero_before_affine(self):
        p = init_batch_norm(3)
        x = np.tile([1.5, -2.0, 0.25], (5, 1))
        out = batch_norm(Tensor(x), p, "train")
        assert np.max(np.abs(out.data)) < 1e-9

    def test_infer_identity_stats_is_identity(self):
        p = init_batch_norm(4)  # running mean 0, var 1, scale 1, shift 0
        x = rng.standard_normal((6, 4))
        out = batch_norm(Tensor(x), p, "infer")
        assert np.max(np.abs(out.data - x)) < 1e-4  # eps effect only

    def test_train_moments(self):
        p = init_batch_norm(4)
        x = rng.standard_normal((8, 4)) * 3.0 + 1.0
        out = batch_norm(Tensor(x), p, "train").data
        assert np.max(np.abs(out.mean(axis=0))) < 1e-6
        assert np.max(np.abs(out.var(axis=0) - 1.0)) < 1e-5

    def test_running_stats_updated_with_momentum(self):
        p = init_batch_norm(2, momentum=0.1)
        x = rng.standard_normal((16, 2)) + 5.0
        batch_norm(Tensor(x), p, "train")
        assert np.allclose(p.running_mean.data, 0.9 * 0.0 + 0.1 * x.mean(axis=0))
        assert np.allclose(p.running_var.data, 0.9 * 1.0 + 0.1 * x.var(axis=0))

    def test_small_batch_rejected(self):
        p = init_batch_norm(2)
        with pytest.raises(BatchSizeError):
            batch_norm(Tensor([[1.0, 2.0]]), p, "train")

    def test_infer_does_not_touch_running_stats(self):
        p = init_batch_norm(2)
        before = p.running_mean.data.copy()
        batch_norm(Tensor(rng.standard_normal((4, 2))), p, "infer")
        assert np.array_equal(p.running_mean.data, before)


class TestActivations:
    def test_softsign_closed_forms(self):
        x = Tensor([0.0, 1.0, -1.0, 1e6])
        out = softsign_act(x).data
        assert out[0] == 0.0
        assert out[1] == 0.5
        assert out[2] == -0.5
        assert out[3] > 0.999999

    def test_softsign_gradient_quarter_at_one(self):
        err = check_gradients(lambda t: softsign_act(t).sum(), np.array([1.0]), h=1e-6)
        assert err < 1e-6
        x = Tensor([1.0], requires_grad=True)
        softsign_act(x).sum().backward()
        assert np.allclose(x.grad, [0.25])

    def test_sign_codomain(self):
        out = sign_act(Tensor([0.3, -0.1, 0.0])).data
        assert np.array_equal(out, [1.0, -1.0, -1.0])

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=32))
    @settings(max_examples=50, deadline=None)
    def test_softsign_strictly_inside_unit_interval(self, values):
        out = softsign_act(Tensor(values)).data
        assert (out > -1.0).all() and (out < 1.0).all()

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=32))
    @settings(max_examples=50, deadline=None)
    def test_sign_exactly_pm_one(self, values):
        out = sign_act(Tensor(values)).data
        assert set(np.unique(out)) <= {-1.0, 1.0}


class TestCheckGradients:
    def test_quadratic(self):
        assert check_gradients(lambda t: (t * t).sum(), rng.standard_normal(6)) < 1e-7

    def test_composed_stack(self):
        p1 = init_linear(rng, 5, 4)
        bn = init_batch_norm(4)
        p2 = init_linear(rng, 4, 2)

        def f(t):
            h = batch_norm(linear(t, p1), bn, "infer")
            return linear(tanh_act(h), p2).sum()

        assert check_gradients(f, rng.standard_normal((3, 5)), h=1e-4) < 1e-4


class TestSgd:
    def test_zero_lr_no_change(self):
        p = Tensor([1.0, 2.0], requires_grad=True)
        sgd_step([p], [np.array([3.0, -4.0])], lr=0.0)
        assert np.array_equal(p.data, [1.0, 2.0])

    def test_basic_arithmetic(self):
        p = Tensor([1.0], requires_grad=True)
        sgd_step([p], [np.array([2.0])], lr=0.1, weight_decay=0.0)
        assert np.allclose(p.data, [0.8])

    def test_weight_decay(self):
        p = Tensor([1.0], requires_grad=True)
        sgd_step([p], [np.array([0.0])], lr=0.1, weight_decay=0.5)
        assert np.allclose(p.data, [0.95])

    def test_non_finite_gradient_aborts(self):
        p = Tensor([1.0], requires_grad=True)
        with pytest.raises(NonFiniteError):
            sgd_step([p], [np.array([np.inf])], lr=0.1)


class TestLrSchedule:
    def test_reference_boundaries(self):
        sched = LrSchedule()
        assert sched.lr_for_epoch(0) == 3e-4
        assert sched.lr_for_epoch(39) == 3e-4
        assert sched.lr_for_epoch(40) == 3e-5
        assert sched.lr_for_epoch(69) == 3e-5
        assert sched.lr_for_epoch(70) == 3e-6
        assert sched.lr_for_epoch(99) == 3e-6


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        params = {
            "a.weights": Tensor(rng.standard_normal((3, 4))),
            "a.bias": Tensor(rng.standard_normal(4)),
            "stats.running_var": Tensor(np.abs(rng.standard_normal(4)) + 0.5),
        }
        prefix = tmp_path / "ckpt"
        save_checkpoint(prefix, params, meta={"seed": 9, "epoch": 12})
        loaded, meta = load_checkpoint(prefix)
        assert meta == {"seed": "9", "epoch": "12"}
        for name, t in params.items():
            assert loaded[name].tobytes() == t.data.tobytes()

    def test_restore_checks_shapes(self, tmp_path):
        prefix = tmp_path / "ckpt"
        save_checkpoint(prefix, {"w": Tensor(np.zeros((2, 2)))})
        loaded, _ = load_checkpoint(prefix)
        target = {"w": Tensor(np.zeros((3, 2)))}
        with pytest.raises(CheckpointError):
            restore_params(target, loaded)

    def test_truncated_blob_detected(self, tmp_path):
        prefix = tmp_path / "ckpt"
        save_checkpoint(prefix, {"w": Tensor(np.zeros(8))})
        blob = (tmp_path / "ckpt.blob").read_bytes()
        (tmp_path / "ckpt.blob").write_bytes(blob[:-8])
        with pytest.raises(CheckpointError):
            load_checkpoint(prefix)
