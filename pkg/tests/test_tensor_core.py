import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from depois_attack import nn
from depois_attack import tensor as T
from depois_attack.errors import ConfigError, DataError, NonFiniteError, ShapeError
from depois_attack.nn import Adam, CrossEntropy, KDComposite, LayerSpec, Network, ScoreAscent, SGD

ACTS = ["relu", "leaky_relu", "sigmoid", "tanh", "identity"]


def manual_forward(net, x):
    """Layer formulas re-evaluated with explicit loops, independent of the graph code."""
    h = list(np.asarray(x, dtype=float))
    for i, spec in enumerate(net.layers):
        w = net.params[f"layer{i}.weight"].data
        b = net.params[f"layer{i}.bias"].data
        out = []
        for j in range(spec.out_dim):
            z = b[j] + sum(h[k] * w[k, j] for k in range(spec.in_dim))
            if spec.activation == "relu":
                z = max(z, 0.0)
            elif spec.activation == "leaky_relu":
                z = z if z > 0 else 0.2 * z
            elif spec.activation == "sigmoid":
                z = 1.0 / (1.0 + math.exp(-z))
            elif spec.activation == "tanh":
                z = math.tanh(z)
            out.append(z)
        h = out
    return np.array(h)


def random_net(rng, max_layers=3, max_units=64, in_dim=None, out_dim=None):
    n_layers = int(rng.integers(1, max_layers + 1))
    dims = [in_dim or int(rng.integers(1, 9))]
    dims += [int(rng.integers(1, max_units + 1)) for _ in range(n_layers - 1)]
    dims.append(out_dim or int(rng.integers(1, 5)))
    acts = [ACTS[int(rng.integers(len(ACTS)))] for _ in range(n_layers)]
    net = Network.build(dims, acts, seed=int(rng.integers(1 << 30)))
    for p in net.params.values():
        p.data = p.data + 0.1 * rng.standard_normal(p.shape)  # non-zero biases
    return net


class TestForward:
    def test_identity_layer(self):
        net = Network([LayerSpec(2, 2)], {"layer0.weight": np.eye(2), "layer0.bias": np.zeros(2)})
        np.testing.assert_array_equal(nn.forward(net, [0.3, 0.7]).data, [0.3, 0.7])

    def test_relu_clips_negative_preactivation(self):
        net = Network(
            [LayerSpec(2, 1, "relu")], {"layer0.weight": np.array([[1.0], [-1.0]]), "layer0.bias": np.array([0.5])}
        )
        assert nn.forward(net, [0.2, 0.9]).data.tolist() == [0.0]

    def test_matches_loop_evaluation(self, rng):
        for _ in range(20):
            net = random_net(rng)
            x = rng.uniform(-1, 1, net.in_dim)
            np.testing.assert_allclose(nn.forward(net, x).data, manual_forward(net, x), rtol=1e-12, atol=1e-12)
            np.testing.assert_allclose(nn.predict(net, x), manual_forward(net, x), rtol=1e-12, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        net = Network.build([3, 2], "identity", seed=0)
        with pytest.raises(ShapeError):
            nn.forward(net, np.zeros(4))
        with pytest.raises(ShapeError):
            nn.forward(net, np.zeros((2, 2, 3)))

    def test_incompatible_layers_rejected(self):
        with pytest.raises(ShapeError):
            Network([LayerSpec(2, 3), LayerSpec(4, 1)], {})

    def test_deterministic(self, rng):
        net = random_net(rng)
        x = rng.uniform(size=(5, net.in_dim))
        a = nn.forward(net, x).data
        b = nn.forward(net, x).data
        assert a.tobytes() == b.tobytes()


def fd_input_grad(f, x, delta=1e-4):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = delta
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * delta)
    return g


def assert_grad_close(analytic, numeric, rel=1e-4, abs_tol=1e-6):
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    ok = (diff <= abs_tol) | (diff <= rel * scale)
    assert ok.all(), f"max diff {diff.max():.3e} at {np.unravel_index(np.argmax(diff), diff.shape)}"


class TestBackward:
    def test_input_grad_matches_finite_differences(self, rng):
        for _ in range(10):
            net = random_net(rng, out_dim=3)
            net = Network(
                [LayerSpec(s.in_dim, s.out_dim, "tanh" if s.activation in ("relu", "leaky_relu") else s.activation) for s in net.layers],
                net.state(),
            )
            x = rng.uniform(0, 1, net.in_dim)
            y = int(rng.integers(3))
            _, _, g = nn.backward(net, x, y, CrossEntropy())
            f = lambda v: nn.backward(net, v, y, CrossEntropy())[0]
            assert_grad_close(g, fd_input_grad(f, x))

    def test_zero_network_score_ascent(self):
        net = Network.build([4, 3, 1], "identity", seed=0)
        net.load_state({k: np.zeros_like(v) for k, v in net.state().items()})
        _, grads, g = nn.backward(net, np.ones(4), loss=ScoreAscent())
        assert not g.any()
        assert set(grads) == set(net.params)

    def test_logistic_unit_closed_form(self, rng):
        w = rng.standard_normal(3)
        net = Network([LayerSpec(3, 1, "sigmoid")], {"layer0.weight": w[:, None], "layer0.bias": np.zeros(1)})
        x = rng.uniform(size=3)
        _, _, g = nn.backward(net, x, 1, CrossEntropy())
        sigma = 1.0 / (1.0 + math.exp(-w @ x))
        np.testing.assert_allclose(g, (sigma - 1.0) * w, rtol=1e-10)

    def test_input_grad_shape_and_param_coverage(self, rng):
        net = random_net(rng, out_dim=4)
        x = rng.uniform(size=(7, net.in_dim))
        _, grads, g = nn.backward(net, x, rng.integers(4, size=7), CrossEntropy())
        assert g.shape == x.shape
        assert {k: v.shape for k, v in grads.items()} == {k: v.shape for k, v in net.params.items()}

    def test_missing_label_is_config_error(self):
        net = Network.build([2, 3], "identity", seed=0)
        with pytest.raises(ConfigError):
            nn.backward(net, np.zeros(2), None, CrossEntropy())

    def test_kd_requires_teacher(self):
        net = Network.build([2, 3], "identity", seed=0)
        with pytest.raises(ConfigError):
            nn.backward(net, np.zeros(2), 0, KDComposite())

    def test_nan_is_an_error(self):
        with pytest.raises(NonFiniteError):
            T.Tensor([1.0, np.nan])
        big = T.Tensor([1e308], requires_grad=True)
        with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
            big * 10.0

    def test_repeated_use_accumulates(self):
        x = T.Tensor([2.0, 3.0], requires_grad=True)
        (x * x + x).sum().backward()
        np.testing.assert_allclose(x.grad, [5.0, 7.0])


class TestSoftmaxKL:
    def test_uniform_for_equal_logits(self):
        for temp in (0.5, 1.0, 7.0):
            np.testing.assert_allclose(nn.softmax_temperature([2.0, 2.0, 2.0], temp), [1 / 3] * 3, rtol=1e-15)

    @pytest.mark.parametrize("temp", [1.0, 4.0])
    def test_two_logit_formula(self, temp):
        a = math.exp(1.0 / temp)
        expected = [a / (a + 1.0), 1.0 / (a + 1.0)]
        np.testing.assert_allclose(nn.softmax_temperature([1.0, 0.0], temp), expected, rtol=1e-14)

    def test_high_temperature_flattens(self):
        p = nn.softmax_temperature([3.0, -3.0], 1000.0)
        assert p.max() - p.min() < 0.01

    def test_bad_temperature(self):
        with pytest.raises(ConfigError):
            nn.softmax_temperature([1.0, 2.0], 0.0)
        with pytest.raises(ShapeError):
            nn.softmax_temperature([[1.0, 2.0]], 1.0)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(0.05, 100))
    def test_softmax_is_distribution(self, logits, temp):
        p = nn.softmax_temperature(logits, temp)
        assert np.all(p >= 0)
        assert abs(p.sum() - 1.0) <= 1e-9

    def test_kl_examples(self):
        assert nn.kl_divergence([0.5, 0.5], [0.5, 0.5]) == 0.0
        assert nn.kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2), rel=1e-15)
        with pytest.raises(ShapeError):
            nn.kl_divergence([1.0], [0.5, 0.5])

    def test_kl_matches_direct_sum(self, rng):
        for _ in range(50):
            p = rng.dirichlet(np.ones(6))
            q = rng.dirichlet(np.ones(6))
            direct = sum(pi * math.log(pi / qi) for pi, qi in zip(p, q))
            assert nn.kl_divergence(p, q) == pytest.approx(direct, rel=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 10), st.integers(0, 2**31))
    def test_kl_nonnegative(self, k, seed):
        r = np.random.default_rng(seed)
        assert nn.kl_divergence(r.dirichlet(np.ones(k)), r.dirichlet(np.ones(k))) >= 0.0

    def test_kl_floor_on_zero_q(self):
        assert math.isfinite(nn.kl_divergence([0.5, 0.5], [1.0, 0.0]))


class TestKDObjective:
    def test_alpha_zero_is_pure_kl(self, rng):
        net = Network.build([4, 5], "identity", seed=1)
        x = rng.uniform(size=(8, 4))
        teacher = rng.dirichlet(np.ones(5), size=8)
        value, _, _ = nn.backward(net, x, None, KDComposite(0.0, 3.0), teacher=teacher)
        logits = nn.predict(net, x)
        direct = np.mean([
            nn.kl_divergence(nn.soften(t, 3.0), nn.softmax_temperature(z, 3.0)) for t, z in zip(teacher, logits)
        ])
        assert value == pytest.approx(direct, rel=1e-10)

    def test_objective_is_alpha_ce_plus_kl(self, rng):
        net = Network.build([4, 5], "identity", seed=1)
        x = rng.uniform(size=(8, 4))
        y = rng.integers(5, size=8)
        teacher = rng.dirichlet(np.ones(5), size=8)
        ce, _, _ = nn.backward(net, x, y, CrossEntropy())
        kl, _, _ = nn.backward(net, x, y, KDComposite(0.0, 2.0), teacher=teacher)
        for alpha in (0.25, 0.5, 1.0):
            total, _, _ = nn.backward(net, x, y, KDComposite(alpha, 2.0), teacher=teacher)
            assert total == pytest.approx(alpha * ce + kl, rel=1e-12)

    def test_teacher_equal_to_student_gives_alpha_ce(self, rng):
        net = Network.build([4, 5], "identity", seed=1)
        x = rng.uniform(size=(8, 4))
        y = rng.integers(5, size=8)
        teacher = T.softmax(T.Tensor(nn.predict(net, x))).data
        ce, _, _ = nn.backward(net, x, y, CrossEntropy())
        total, _, _ = nn.backward(net, x, y, KDComposite(0.5, 4.0), teacher=teacher)
        assert total == pytest.approx(0.5 * ce, rel=1e-9, abs=1e-12)

    def test_invalid_parameters(self):
        with pytest.raises(ConfigError):
            KDComposite(1.5, 1.0)
        with pytest.raises(ConfigError):
            KDComposite(0.5, 0.0)


class TestOptimizers:
    def test_zero_grad_leaves_parameters(self, rng):
        net = random_net(rng)
        before = net.state()
        for opt in (SGD(0.1), Adam(0.1)):
            nn.optimizer_step(net, {k: np.zeros_like(v) for k, v in before.items()}, opt)
        for k, v in net.state().items():
            assert v.tobytes() == before[k].tobytes()

    def test_sgd_exact(self):
        net = Network([LayerSpec(1, 1)], {"layer0.weight": [[1.0]], "layer0.bias": [1.0]})
        nn.optimizer_step(net, {"layer0.weight": np.array([[2.0]]), "layer0.bias": np.array([2.0])}, SGD(0.1))
        assert net.params["layer0.weight"].data[0, 0] == 1.0 - 0.1 * 2.0
        assert net.params["layer0.bias"].data[0] == pytest.approx(0.8, abs=0)

    def test_adam_first_step(self):
        # step 1: m_hat = g, v_hat = g^2  =>  p' = p - lr * g / (|g| + eps)
        net = Network([LayerSpec(1, 1)], {"layer0.weight": [[1.0]], "layer0.bias": [-0.5]})
        g = {"layer0.weight": np.array([[2.0]]), "layer0.bias": np.array([-3.0])}
        nn.optimizer_step(net, g, Adam(0.1))
        assert net.params["layer0.weight"].data[0, 0] == pytest.approx(1.0 - 0.1 * 2.0 / (2.0 + 1e-8), rel=1e-15)
        assert net.params["layer0.bias"].data[0] == pytest.approx(-0.5 + 0.1 * 3.0 / (3.0 + 1e-8), rel=1e-15)

    def test_bad_lr_and_missing_grads(self, rng):
        with pytest.raises(ConfigError):
            SGD(0.0)
        with pytest.raises(ConfigError):
            Adam(-1.0)
        net = random_net(rng)
        with pytest.raises(ConfigError):
            nn.optimizer_step(net, {}, SGD(0.1))

    def test_parameter_count_invariant(self, rng):
        net = random_net(rng, out_dim=3)
        count = net.num_parameters()
        opt = Adam(0.01)
        for _ in range(5):
            _, grads, _ = nn.backward(net, rng.uniform(size=(4, net.in_dim)), rng.integers(3, size=4))
            nn.optimizer_step(net, grads, opt)
        assert net.num_parameters() == count


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        net = random_net(rng)
        nn.save_network(net, tmp_path / "net")
        back = nn.load_network(tmp_path / "net")
        assert back.layers == net.layers
        assert back.checksum() == net.checksum()
        blob = (tmp_path / "net.bin").read_bytes()
        assert len(blob) == 8 * net.num_parameters()

    def test_little_endian_manifest_order(self, tmp_path):
        net = Network([LayerSpec(1, 2)], {"layer0.weight": [[1.5, -2.0]], "layer0.bias": [0.25, 3.0]})
        nn.save_network(net, tmp_path / "n")
        values = np.frombuffer((tmp_path / "n.bin").read_bytes(), dtype="<f8")
        assert values.tolist() == [1.5, -2.0, 0.25, 3.0]

    def test_truncated_binary_rejected(self, tmp_path, rng):
        net = random_net(rng)
        nn.save_network(net, tmp_path / "net")
        p = tmp_path / "net.bin"
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(DataError):
            nn.load_network(tmp_path / "net")

    def test_missing_files(self, tmp_path):
        with pytest.raises(DataError):
            nn.load_network(tmp_path / "nothing")
