import math

import numpy as np
import pytest

from remix.bagstore import FormatError
from remix.milnet import (
    PARAM_ORDER,
    LrSchedule,
    MilModel,
    OptimizerState,
    adam_step,
    backward,
    cosine_lr,
    cross_entropy,
    init_params,
    load_checkpoint,
    loss_only,
    save_checkpoint,
)


# straight-line references, one scalar at a time

def ref_abmil(h, p):
    M, d = len(h), len(h[0])
    H = len(p["w"])
    scores = []
    for k in range(M):
        s = 0.0
        for j in range(H):
            pre = sum(p["V"][j][i] * h[k][i] for i in range(d))
            s += p["w"][j] * math.tanh(pre)
        scores.append(s)
    top = max(scores)
    ex = [math.exp(s - top) for s in scores]
    a = [e / sum(ex) for e in ex]
    z = [sum(a[k] * h[k][i] for k in range(M)) for i in range(d)]
    C = len(p["bc"])
    return [sum(p["Wc"][c][i] * z[i] for i in range(d)) + p["bc"][c] for c in range(C)]


def ref_dsmil(h, p):
    M, d = len(h), len(h[0])
    C, Q = len(p["bb"]), len(p["Wq"])
    inst = [[sum(p["W0"][c][i] * h[k][i] for i in range(d)) for c in range(C)] for k in range(M)]
    best, m = -math.inf, 0
    for k in range(M):
        for c in range(C):
            if inst[k][c] > best:
                best, m = inst[k][c], k
    q = [[sum(p["Wq"][j][i] * h[k][i] for i in range(d)) for j in range(Q)] for k in range(M)]
    s = [sum(q[k][j] * q[m][j] for j in range(Q)) / math.sqrt(Q) for k in range(M)]
    top = max(s)
    ex = [math.exp(x - top) for x in s]
    a = [e / sum(ex) for e in ex]
    v = [[sum(p["Wv"][r][i] * h[k][i] for i in range(d)) for r in range(d)] for k in range(M)]
    b = [sum(a[k] * v[k][r] for k in range(M)) for r in range(d)]
    bag = [sum(p["Wb"][c][r] * b[r] for r in range(d)) + p["bb"][c] for c in range(C)]
    return [0.5 * (inst[m][c] + bag[c]) for c in range(C)]


def perturbed(model, rng, scale=0.5):
    """Random model with non-zero biases so every tensor is exercised."""
    for name, value in model.params.items():
        model.params[name] = value + scale * rng.standard_normal(value.shape)
    return model


def numeric_grad(model, h, label, name, eps=1e-5):
    p = model.params[name]
    out = np.zeros_like(p)
    for idx in np.ndindex(p.shape):
        orig = p[idx]
        p[idx] = orig + eps
        up = loss_only(model, h, label)
        p[idx] = orig - eps
        down = loss_only(model, h, label)
        p[idx] = orig
        out[idx] = (up - down) / (2 * eps)
    return out


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


def critical_margin(model, h):
    flat = np.sort((h @ model.params["W0"].T).ravel())
    return flat[-1] - flat[-2]


class TestAbmilForward:
    def test_singleton(self, rng):
        model = init_params("abmil", 5, 3, hidden=4, seed=1)
        h = rng.standard_normal((1, 5))
        logits, att, z = model.forward(h)
        assert att.tolist() == [1.0]
        np.testing.assert_array_equal(z, h[0])

    def test_identical_rows(self, rng):
        model = init_params("abmil", 5, 3, hidden=4, seed=1)
        h = np.tile(rng.standard_normal(5), (2, 1))
        _, att, z = model.forward(h)
        np.testing.assert_array_equal(att, [0.5, 0.5])
        np.testing.assert_allclose(z, h[0], rtol=1e-15)

    def test_matches_reference(self, rng):
        model = perturbed(init_params("abmil", 5, 3, hidden=6, seed=2), rng)
        h = rng.standard_normal((7, 5))
        np.testing.assert_allclose(model.logits(h), ref_abmil(h.tolist(), {k: v.tolist() for k, v in model.params.items()}),
                                   rtol=0, atol=1e-12)

    def test_non_finite(self):
        model = init_params("abmil", 2, 2, hidden=2)
        with pytest.raises(ValueError, match="non-finite"):
            model.forward([[np.inf, 0.0]])


class TestDsmilForward:
    def test_singleton(self, rng):
        model = perturbed(init_params("dsmil", 4, 2, hidden=3, seed=3), rng)
        h = rng.standard_normal((1, 4))
        logits, inst, att = model.forward(h)
        assert att.tolist() == [1.0]
        p = model.params
        bag = p["Wb"] @ (p["Wv"] @ h[0]) + p["bb"]
        np.testing.assert_allclose(logits, 0.5 * (inst[0] + bag), rtol=1e-14)

    def test_duplicate_critical(self, rng):
        model = init_params("dsmil", 4, 2, hidden=3, seed=3)
        h = rng.standard_normal((5, 4))
        _, inst, _ = model.forward(h)
        m = int(np.argmax(inst)) // 2
        _, _, att = model.forward(np.vstack([h, h[m:m + 1]]))
        assert att[-1] == att[m]

    def test_matches_reference(self, rng):
        model = perturbed(init_params("dsmil", 4, 2, hidden=5, seed=4), rng)
        h = rng.standard_normal((6, 4))
        np.testing.assert_allclose(model.logits(h), ref_dsmil(h.tolist(), {k: v.tolist() for k, v in model.params.items()}),
                                   rtol=0, atol=1e-12)

    def test_tie_break(self):
        model = init_params("dsmil", 2, 2, hidden=2)
        model.params["W0"] = np.eye(2)
        h = np.array([[1.0, 3.0], [3.0, 1.0], [0.0, 0.0]])
        # row 0 column 1 and row 1 column 0 both score 3; the lower row wins
        _, _, att = model.forward(h)
        q = h @ model.params["Wq"].T
        expected = np.exp(q @ q[0] / math.sqrt(2) - (q @ q[0] / math.sqrt(2)).max())
        np.testing.assert_allclose(att, expected / expected.sum(), rtol=1e-14)


class TestCrossEntropy:
    def test_uniform(self):
        loss, grad = cross_entropy([0.3, 0.3], 1)
        assert loss == pytest.approx(math.log(2), abs=1e-15)
        np.testing.assert_allclose(grad, [0.5, -0.5])

    def test_overflow(self):
        loss, grad = cross_entropy([1000.0, 0.0], 0)
        assert 0 <= loss < 1e-300 or loss == 0.0
        assert np.all(np.isfinite(grad))
        loss, _ = cross_entropy([1000.0, 0.0], 1)
        assert loss == pytest.approx(1000.0)

    def test_finite_difference(self, rng):
        for _ in range(20):
            logits = rng.standard_normal(5) * 3
            label = int(rng.integers(5))
            _, grad = cross_entropy(logits, label)
            fd = np.zeros(5)
            for c in range(5):
                e = np.zeros(5)
                e[c] = 1e-6
                fd[c] = (cross_entropy(logits + e, label)[0] - cross_entropy(logits - e, label)[0]) / 2e-6
            assert rel_err(grad, fd) < 1e-6

    def test_label_range(self):
        with pytest.raises(ValueError, match="out of range"):
            cross_entropy([0.0, 0.0], 2)


class TestGradients:
    @pytest.mark.parametrize("trial", range(20))
    def test_abmil(self, trial):
        rng = np.random.default_rng(100 + trial)
        d, C, H, M = (int(rng.integers(2, 6)), int(rng.integers(2, 4)),
                      int(rng.integers(2, 7)), int(rng.integers(1, 8)))
        model = perturbed(init_params("abmil", d, C, hidden=H, seed=trial), rng)
        h = rng.standard_normal((M, d))
        label = int(rng.integers(C))
        _, grads, _ = backward(model, h, label)
        for name in PARAM_ORDER["abmil"]:
            assert rel_err(grads[name], numeric_grad(model, h, label, name)) < 1e-5, name

    @pytest.mark.parametrize("trial", range(20))
    def test_dsmil(self, trial):
        rng = np.random.default_rng(200 + trial)
        while True:
            d, C, Q, M = (int(rng.integers(2, 6)), int(rng.integers(2, 4)),
                          int(rng.integers(2, 7)), int(rng.integers(1, 8)))
            model = perturbed(init_params("dsmil", d, C, hidden=Q, seed=trial), rng)
            h = rng.standard_normal((M, d))
            # the critical row must not flip under a 1e-5 nudge
            if M * C == 1 or critical_margin(model, h) > 1e-3:
                break
        label = int(rng.integers(C))
        _, grads, _ = backward(model, h, label)
        for name in PARAM_ORDER["dsmil"]:
            assert rel_err(grads[name], numeric_grad(model, h, label, name)) < 1e-5, name

    def test_zero_attention_vector(self, rng):
        model = perturbed(init_params("abmil", 4, 2, hidden=5, seed=7), rng)
        model.params["w"][:] = 0
        h = rng.standard_normal((6, 4))
        _, att, _ = model.forward(h)
        np.testing.assert_allclose(att, np.full(6, 1 / 6), rtol=1e-15)
        _, grads, _ = backward(model, h, 1)
        assert rel_err(grads["w"], numeric_grad(model, h, 1, "w")) < 1e-5

    def test_duplicated_bag(self, rng):
        model = perturbed(init_params("abmil", 4, 3, hidden=5, seed=8), rng)
        h = rng.standard_normal((5, 4))
        l1, g1, _ = backward(model, h, 2)
        l2, g2, _ = backward(model, np.vstack([h, h]), 2)
        assert l1 == pytest.approx(l2, abs=1e-12)
        np.testing.assert_allclose(g2["Wc"], g1["Wc"], atol=1e-12)
        np.testing.assert_allclose(g2["bc"], g1["bc"], atol=1e-12)


class TestProperties:
    @pytest.mark.parametrize("kind", ["abmil", "dsmil"])
    def test_attention_distribution(self, kind, rng):
        for M in (1, 2, 5, 50):
            model = perturbed(init_params(kind, 6, 3, hidden=8, seed=M), rng, 2.0)
            att = model.forward(rng.standard_normal((M, 6)) * 5)[1 if kind == "abmil" else 2]
            assert np.all(att >= 0)
            assert abs(att.sum() - 1) <= 1e-9

    @pytest.mark.parametrize("kind", ["abmil", "dsmil"])
    def test_permutation_invariance(self, kind, rng):
        for trial in range(20):
            model = perturbed(init_params(kind, 6, 3, hidden=8, seed=trial), rng)
            h = rng.standard_normal((12, 6))
            if kind == "dsmil" and critical_margin(model, h) == 0:
                continue
            perm = rng.permutation(12)
            np.testing.assert_allclose(model.logits(h[perm]), model.logits(h), rtol=0, atol=1e-9)

    @pytest.mark.parametrize("kind,C", [("abmil", 2), ("dsmil", 2), ("abmil", 4), ("dsmil", 4)])
    def test_initial_loss_near_uniform(self, kind, C):
        rng = np.random.default_rng(C)
        model = init_params(kind, 32, C, hidden=128, seed=0)
        losses = [loss_only(model, rng.standard_normal((20, 32)), i % C) for i in range(200)]
        assert abs(np.mean(losses) - math.log(C)) <= 0.1 * math.log(C)


class TestAdam:
    def test_zero_gradient(self):
        params = {"x": np.array([1.0, -2.0])}
        state = OptimizerState.for_params(params)
        adam_step(params, {"x": np.zeros(2)}, state, 0.1)
        np.testing.assert_array_equal(params["x"], [1.0, -2.0])
        assert state.step == 1

    def test_first_step(self):
        params = {"x": np.array(3.0)}
        adam_step(params, {"x": np.array(1.0)}, OptimizerState.for_params(params), 0.1)
        assert params["x"] == pytest.approx(2.9, abs=1e-8)

    def test_quadratic(self):
        params = {"x": np.array(1.0)}
        state = OptimizerState.for_params(params)
        # independent scalar recurrence
        x, m, v = 1.0, 0.0, 0.0
        for t in range(1, 101):
            g = 2 * x
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x -= 0.05 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
            adam_step(params, {"x": 2 * params["x"]}, state, 0.05)
        assert float(params["x"]) == pytest.approx(x, abs=1e-12)
        assert abs(x) < 0.05

    def test_shape_mismatch(self):
        params = {"x": np.zeros(2)}
        with pytest.raises(ValueError, match="shape"):
            adam_step(params, {"x": np.zeros(3)}, OptimizerState.for_params(params), 0.1)


class TestSchedule:
    def test_values(self):
        s = LrSchedule(2e-4, 100)
        assert cosine_lr(0, s) == 2e-4
        assert cosine_lr(100, s) == pytest.approx(0, abs=1e-20)
        assert cosine_lr(50, s) == pytest.approx(1e-4, rel=1e-12)

    def test_beyond_end(self):
        with pytest.raises(ValueError):
            cosine_lr(101, LrSchedule(2e-4, 100))
        with pytest.raises(ValueError):
            LrSchedule(0.0, 10)


class TestInit:
    @pytest.mark.parametrize("kind", ["abmil", "dsmil"])
    def test_deterministic_and_zero_bias(self, kind):
        a, b = init_params(kind, 8, 3, hidden=16, seed=5), init_params(kind, 8, 3, hidden=16, seed=5)
        for name in PARAM_ORDER[kind]:
            np.testing.assert_array_equal(a.params[name], b.params[name])
        bias = "bc" if kind == "abmil" else "bb"
        assert np.all(a.params[bias] == 0)

    def test_fan_in_bound(self):
        model = init_params("abmil", 64, 2, hidden=128)
        assert np.abs(model.params["V"]).max() <= 1 / 8
        assert np.abs(model.params["w"]).max() <= 1 / math.sqrt(128)

    def test_shapes(self):
        m = init_params("dsmil", 7, 3, hidden=5)
        assert (m.dim, m.n_classes, m.hidden) == (7, 3, 5)
        assert m.params["Wv"].shape == (7, 7)


class TestCheckpoint:
    @pytest.mark.parametrize("kind", ["abmil", "dsmil"])
    def test_round_trip(self, kind, tmp_path, rng):
        model = perturbed(init_params(kind, 6, 3, hidden=4, seed=1), rng)
        save_checkpoint(model, tmp_path / "m.rmxm")
        back = load_checkpoint(tmp_path / "m.rmxm")
        assert back.kind == kind
        for name in PARAM_ORDER[kind]:
            assert back.params[name].tobytes() == model.params[name].tobytes()
        h = rng.standard_normal((4, 6))
        np.testing.assert_array_equal(back.logits(h), model.logits(h))

    def test_layout(self, tmp_path):
        model = init_params("abmil", 3, 2, hidden=4)
        save_checkpoint(model, tmp_path / "m.rmxm")
        raw = (tmp_path / "m.rmxm").read_bytes()
        assert raw[:4] == b"RMXM" and raw[4] == 0
        assert len(raw) == 17 + 8 * (4 * 3 + 4 + 2 * 3 + 2)

    def test_corruption(self, tmp_path):
        path = tmp_path / "m.rmxm"
        save_checkpoint(init_params("dsmil", 3, 2, hidden=4), path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(FormatError, match="truncated"):
            load_checkpoint(path)
        path.write_bytes(raw + b"\0")
        with pytest.raises(FormatError, match="beyond"):
            load_checkpoint(path)
        path.write_bytes(b"NOPE" + raw[4:])
        with pytest.raises(FormatError, match="bad magic"):
            load_checkpoint(path)


def test_model_copy_is_independent():
    a = init_params("abmil", 3, 2, hidden=2)
    b = a.copy()
    b.params["bc"] += 1
    assert np.all(a.params["bc"] == 0)
    assert isinstance(b, MilModel)
