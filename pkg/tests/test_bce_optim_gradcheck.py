"""BCE loss, Adam updates, gradient checking, and checkpoint round trips."""

import math

import numpy as np
import pytest

from helpers import assert_grads_close, bce_scalar_loop, make_tensor

from modfuse.diffcore import (
    Adam, Graph, Tensor, backward, bce_loss, grad_check, load_checkpoint,
    matmul, mul, optimizer_step, save_checkpoint, sigmoid, sum_all,
)
from modfuse.errors import ConfigurationError, ContractError, DegenerateBatchError


class TestBceLoss:
    def test_perfect_prediction_is_nearly_zero(self):
        loss = bce_loss(Tensor([1.0]), Tensor([1.0]))
        assert abs(loss.item() - math.log(1.0 / (1.0 - 1e-7))) < 1e-9
        assert loss.item() < 1e-6

    def test_half_prediction_is_ln2(self):
        loss = bce_loss(Tensor([0.5]), Tensor([1.0]))
        assert abs(loss.item() - math.log(2.0)) < 1e-12

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            shape = (int(rng.integers(1, 65)), int(rng.integers(1, 26)))
            p = rng.random(shape)
            y = (rng.random(shape) > 0.5).astype(float)
            got = bce_loss(Tensor(p), Tensor(y)).item()
            assert abs(got - bce_scalar_loop(p, y)) < 1e-12

    def test_mask_excludes_from_sum_and_count(self):
        p = np.array([0.9, 0.1, 0.5])
        y = np.array([1.0, 1.0, 1.0])
        m = np.array([1.0, 0.0, 1.0])
        got = bce_loss(Tensor(p), Tensor(y), Tensor(m)).item()
        assert abs(got - bce_scalar_loop(p, y, m)) < 1e-12
        expected = (-math.log(0.9) - math.log(0.5)) / 2.0
        assert abs(got - expected) < 1e-12

    def test_all_masked_batch_rejected(self):
        with pytest.raises(DegenerateBatchError):
            bce_loss(Tensor([0.5]), Tensor([1.0]), Tensor([0.0]))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        w = make_tensor(rng, (3, 5))
        x = Tensor(rng.standard_normal((4, 3)))
        y = Tensor((rng.random((4, 5)) > 0.3).astype(float))
        m = Tensor((rng.random((4, 5)) > 0.2).astype(float))

        def loss():
            return bce_loss(sigmoid(matmul(x, w)), y, m)

        assert_grads_close(loss, {"w": w}, tol=1e-6)


class TestAdam:
    def test_first_step_hand_value(self):
        # m_hat = 1, v_hat = 1 after one unit-gradient step.
        w = Tensor(0.0, requires_grad=True)
        opt = Adam([w], lr=0.1)
        w.grad = np.ones(())
        opt.step()
        expected = -0.1 * 1.0 / (1.0 + 1e-8)
        assert w.data == pytest.approx(expected, abs=0)
        assert abs(float(w.data) + 0.1) < 1e-8

    def test_zero_gradient_is_fixed_point(self):
        w = Tensor([1.5, -2.0], requires_grad=True)
        opt = Adam([w])
        before = w.data.copy()
        w.grad = np.zeros(2)
        opt.step()
        assert np.array_equal(w.data, before)

    def test_untouched_parameters_bit_identical(self):
        w = Tensor([1.0], requires_grad=True)
        other = Tensor([2.0], requires_grad=True)
        other_bytes = other.data.tobytes()
        opt = Adam([w])
        w.grad = np.ones(1)
        other.grad = np.ones(1)  # present but not registered
        opt.step()
        assert other.data.tobytes() == other_bytes
        assert other.grad is not None  # untouched, including its gradient

    def test_step_counter_increments_by_one(self):
        w = Tensor([0.0], requires_grad=True)
        opt = Adam([w])
        for expected in (1, 2, 3):
            w.grad = np.ones(1)
            opt.step()
            assert opt.step_count == expected

    def test_missing_gradient_rejected(self):
        w = Tensor([0.0], requires_grad=True)
        opt = Adam([w])
        with pytest.raises(ContractError):
            opt.step()

    def test_gradients_zeroed_after_step(self):
        w = Tensor([0.0], requires_grad=True)
        opt = Adam([w])
        w.grad = np.ones(1)
        opt.step()
        assert w.grad is None

    def test_optimizer_step_requires_registered_set(self):
        w = Tensor([0.0], requires_grad=True)
        other = Tensor([0.0], requires_grad=True)
        opt = Adam([w])
        w.grad = np.ones(1)
        optimizer_step(opt, [w])
        with pytest.raises(ContractError):
            optimizer_step(opt, [other])

    def test_same_seed_training_is_bit_identical(self):
        def run():
            rng = np.random.default_rng(11)
            w = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
            x = Tensor(rng.standard_normal((8, 4)))
            y = Tensor((rng.random((8, 2)) > 0.5).astype(float))
            opt = Adam([w], lr=1e-2)
            for _ in range(50):
                with Graph() as g:
                    loss = bce_loss(sigmoid(matmul(x, w)), y)
                g.backward(loss)
                opt.step()
            return w.data.tobytes()

        assert run() == run()


class TestGradCheck:
    def test_linear_bce_passes_tight(self):
        rng = np.random.default_rng(12)
        w = make_tensor(rng, (4, 3))
        b = make_tensor(rng, (3,), scale=0.1)
        x = Tensor(rng.standard_normal((5, 4)))
        y = Tensor((rng.random((5, 3)) > 0.5).astype(float))

        def loss():
            from modfuse.diffcore import bias_add
            return bce_loss(sigmoid(bias_add(matmul(x, w), b)), y)

        report = grad_check(loss, {"w": w, "b": b}, tolerance=1e-6)
        assert report.passed, report.per_param

    def test_corrupted_backward_rule_fails(self):
        rng = np.random.default_rng(13)
        w = make_tensor(rng, (3, 3))

        def doubled_wrong_grad(t):
            # Forward doubles; backward pretends it tripled.
            out = Tensor(t.data * 2.0)
            g = Graph.active()
            if g is not None:
                g.record("bad_scale", (t,), out, lambda gout: (gout * 3.0,))
            return out

        def loss():
            return sum_all(mul(doubled_wrong_grad(w), w))

        report = grad_check(loss, {"w": w}, tolerance=1e-4)
        assert not report.passed
        assert report.max_rel_err > 1e-2


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(14)
        groups = {
            "seq_enc": {"w_x": Tensor(rng.standard_normal((5, 8))), "b": Tensor(np.zeros(8))},
            "img_enc": {"stem.w": Tensor(rng.standard_normal((2, 1, 3, 3)))},
            "head_ehr": {"w": Tensor(np.array([-0.0, 1e-320, np.pi]))},
        }
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, groups)
        loaded = load_checkpoint(path)
        for gname, params in groups.items():
            for pname, t in params.items():
                assert loaded[gname][pname].tobytes() == t.data.tobytes()
                assert loaded[gname][pname].shape == t.data.shape

    def test_magic_prefix(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, {"g": {"p": Tensor([1.0])}})
        assert path.read_bytes().startswith(b"MODFUSE1")

    def test_save_twice_byte_identical(self, tmp_path):
        groups = {"g": {"p": Tensor(np.linspace(0, 1, 7))}}
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, groups)
        save_checkpoint(p2, groups)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
        with pytest.raises(ConfigurationError):
            load_checkpoint(path)
