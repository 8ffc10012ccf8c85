import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import GRAD_RTOL, gradient_check, toy_model, toy_problem
from knotpair.errors import ConfigError, DataError
from knotpair.features import FEATURE_COLUMNS
from knotpair.nn import (
    CUSTOM_WEIGHTS,
    AdamState,
    Augmentation,
    Layer,
    ModelParams,
    TrainConfig,
    adam_step,
    augment,
    embed_all,
    forward,
    forward_cached,
    init_model,
    load_model,
    model_from_dict,
    model_to_dict,
    ntxent_loss,
    ntxent_loss_grad,
    report_learned_weights,
    save_model,
    train,
    triplet_loss,
    triplet_loss_grad,
    triplet_objective,
)
from knotpair.synth import SynthConfig, feature_table, generate_specimens
from knotpair.triplets import build_triplets, split_specimens

VARIANTS = ("standard", "learnable_weights", "custom_weights", "simclr")


def ntxent_brute(Z, tau):
    """Per-sample cross-entropy written out with explicit loops."""
    m = len(Z)
    n = m // 2
    U = [z / np.linalg.norm(z) for z in Z]
    total = 0.0
    for i in range(m):
        j = (i + n) % m
        num = math.exp(float(U[i] @ U[j]) / tau)
        den = sum(math.exp(float(U[i] @ U[k]) / tau) for k in range(m) if k != i)
        total += -math.log(num / den)
    return total / m


class TestForward:
    def test_zero_network(self):
        p = init_model("standard", np.random.default_rng(0), dtype=np.float64)
        for layer in p.layers:
            layer.weight[:] = 0
            layer.bias[:] = 0
        x = np.random.default_rng(1).random(9)
        np.testing.assert_array_equal(forward(p, x), np.zeros(128))

    def test_infer_deterministic(self):
        p = init_model("learnable_weights", np.random.default_rng(0))
        x = np.random.default_rng(1).random((5, 9))
        np.testing.assert_array_equal(forward(p, x), forward(p, x))

    def test_hand_computed(self):
        W1 = np.zeros((3, 9))
        W1[0, 0], W1[1, 1], W1[2, 2] = 1.0, -1.0, 2.0
        b1 = np.array([0.0, 0.5, -1.0])
        W2 = np.array([[1.0, 1.0, 1.0], [0.5, -1.0, 0.0]])
        b2 = np.array([0.25, 0.0])
        p = ModelParams("standard", [Layer(W1, b1, "relu"), Layer(W2, b2, "none")])
        x = np.zeros(9)
        x[:3] = [2.0, 0.2, 0.75]
        # hidden: relu([2, 0.3, 0.5]) -> output [2.8 + 0.25, 1 - 0.3]
        np.testing.assert_allclose(forward(p, x), [3.05, 0.7], rtol=0, atol=1e-15)

    def test_architecture(self):
        p = init_model("standard", np.random.default_rng(0))
        assert [(l.in_dim, l.out_dim) for l in p.layers] == [
            (9, 1024), (1024, 512), (512, 256), (256, 128), (128, 64), (64, 128)
        ]
        assert [l.dropout for l in p.layers] == [0.3] * 4 + [0.0] * 2
        assert [l.activation for l in p.layers] == ["relu"] * 5 + ["none"]
        bound = np.sqrt(6 / 1024)
        assert np.abs(p.layers[1].weight).max() <= bound
        assert all(not l.bias.any() for l in p.layers)

    def test_dimension_mismatch(self):
        p = init_model("standard", np.random.default_rng(0))
        with pytest.raises(DataError):
            forward(p, np.zeros(8))

    def test_train_needs_rng(self):
        p = toy_model("standard", 0)
        with pytest.raises(ConfigError):
            forward(p, np.zeros(9), "train")

    def test_dropout_expectation(self):
        # Non-negative weights and inputs keep every ReLU in its linear regime, so
        # the mean over masks equals the infer-mode output exactly.
        rng = np.random.default_rng(4)
        p = init_model("standard", rng, encoder_dims=(9, 8, 4, 4), dropout_layers=2, dtype=np.float64)
        for layer in p.layers:
            layer.weight[:] = np.abs(layer.weight)
        x = rng.uniform(0.1, 1.0, 9)
        reference = forward(p, x)
        batch = np.tile(x, (20000, 1))
        mean = forward(p, batch, "train", np.random.default_rng(5)).mean(axis=0)
        np.testing.assert_allclose(mean, reference, rtol=0.02)

    def test_dropout_rate(self):
        p = init_model("standard", np.random.default_rng(0), encoder_dims=(9, 2000, 4))
        p.layers[0].weight[:] = 0
        p.layers[0].bias[:] = 1
        _, cache = forward_cached(p, np.ones((10, 9)), "train", np.random.default_rng(1))
        hidden = cache.encoder[1]
        assert set(np.unique(hidden)) <= {0.0, np.float32(1 / 0.7)}
        assert abs((hidden == 0).mean() - 0.3) < 0.01

    def test_dropout_only_after_relu(self):
        with pytest.raises(DataError):
            Layer(np.zeros((2, 2)), np.zeros(2), "none", 0.3)


class TestTripletLoss:
    def test_satisfied(self):
        assert triplet_loss([0, 0], [0, 0], [2, 0], 1.0) == 0.0

    def test_equidistant(self):
        assert triplet_loss([0, 0], [1, 0], [0, 1], 1.0) == 1.0

    def test_hand_case(self):
        assert triplet_loss([0, 0], [1, 0], [0, 2], 1.0) == 0.0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.01, 5.0))
    def test_properties(self, seed, margin):
        rng = np.random.default_rng(seed)
        a, p, n = rng.normal(size=(3, 6))
        loss = triplet_loss(a, p, n, margin)
        assert loss >= 0
        dap, dan = np.linalg.norm(a - p), np.linalg.norm(a - n)
        if dan >= dap + margin:
            assert loss == 0.0
        else:
            assert loss == pytest.approx(dap - dan + margin, abs=1e-12)

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(0)
        A, P, N = rng.normal(size=(3, 16, 5))
        loss, *_ = triplet_loss_grad(A, P, N, 1.0)
        expected = np.mean([triplet_loss(a, p, n, 1.0) for a, p, n in zip(A, P, N)])
        assert loss == pytest.approx(expected, abs=1e-12)

    def test_kink_and_zero_distance(self):
        A = np.array([[0.0, 0.0], [0.0, 0.0]])
        P = np.array([[1.0, 0.0], [0.0, 0.0]])
        N = np.array([[0.0, 2.0], [0.0, 0.5]])
        loss, dA, dP, dN = triplet_loss_grad(A, P, N, 1.0)
        # row 0 sits exactly on the hinge; row 1 is active with a zero a-p distance
        assert loss == pytest.approx(0.25)
        np.testing.assert_array_equal(dA[0], 0)
        np.testing.assert_array_equal(dP[1], 0)
        np.testing.assert_allclose(dN[1], [0.0, -0.5])


class TestNtXent:
    @pytest.mark.parametrize("tau", [0.1, 0.5, 1.0])
    def test_identical(self, tau):
        assert ntxent_loss(np.ones((4, 3)), tau) == pytest.approx(math.log(3), abs=1e-9)

    def test_low_temperature_limit(self):
        Z = np.array([[1.0, 0], [0, 1.0], [2.0, 0], [0, 3.0]])
        loss = ntxent_loss(Z, 0.01)
        assert loss == pytest.approx(ntxent_brute(Z, 0.01), rel=1e-9)
        assert loss < 1e-40

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 6), st.sampled_from([0.1, 0.5, 1.0, 2.0]))
    def test_brute_force(self, seed, n, tau):
        Z = np.random.default_rng(seed).normal(size=(2 * n, 5))
        assert ntxent_loss(Z, tau) == pytest.approx(ntxent_brute(Z, tau), rel=1e-10)

    def test_pair_permutation(self):
        rng = np.random.default_rng(2)
        Z = rng.normal(size=(8, 5))
        perm = rng.permutation(4)
        Zp = np.concatenate([Z[:4][perm], Z[4:][perm]])
        assert ntxent_loss(Zp, 0.5) == pytest.approx(ntxent_loss(Z, 0.5), abs=1e-12)

    def test_rotation_invariance(self):
        rng = np.random.default_rng(3)
        Z = rng.normal(size=(6, 4))
        Q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
        assert ntxent_loss(Z @ Q, 0.5) == pytest.approx(ntxent_loss(Z, 0.5), abs=1e-12)

    def test_errors(self):
        with pytest.raises(DataError):
            ntxent_loss(np.zeros((4, 3)), 0.5)
        with pytest.raises(DataError):
            ntxent_loss(np.ones((2, 3)), 0.5)
        with pytest.raises(DataError):
            ntxent_loss(np.ones((4, 3)), 0.0)

    def test_gradient(self):
        rng = np.random.default_rng(4)
        Z = rng.normal(size=(6, 4))
        _, dZ = ntxent_loss_grad(Z, 0.5)
        h = 1e-6
        num = np.zeros_like(Z)
        for idx in np.ndindex(Z.shape):
            Zu, Zd = Z.copy(), Z.copy()
            Zu[idx] += h
            Zd[idx] -= h
            num[idx] = (ntxent_loss(Zu, 0.5) - ntxent_loss(Zd, 0.5)) / (2 * h)
        np.testing.assert_allclose(dZ, num, rtol=1e-6, atol=1e-9)


class TestAugment:
    def test_identity(self):
        x = np.random.default_rng(0).random(9)
        np.testing.assert_array_equal(augment(x, Augmentation(0.0, (1.0, 1.0), 0.0), np.random.default_rng(1)), x)

    def test_drop_all(self):
        x = np.random.default_rng(0).random(9)
        np.testing.assert_array_equal(augment(x, Augmentation(0.05, (0.9, 1.1), 1.0), np.random.default_rng(1)), 0)

    def test_seeded(self):
        x = np.random.default_rng(0).random((4, 9))
        cfg = Augmentation()
        np.testing.assert_array_equal(
            augment(x, cfg, np.random.default_rng(7)), augment(x, cfg, np.random.default_rng(7))
        )

    def test_scale_range(self):
        x = np.ones((200, 9))
        out = augment(x, Augmentation(0.0, (0.9, 1.1), 0.0), np.random.default_rng(0))
        assert out.min() >= 0.9 and out.max() <= 1.1
        # one factor per vector
        np.testing.assert_array_equal(out, out[:, :1].repeat(9, axis=1))


class TestBackward:
    @pytest.mark.parametrize("variant", VARIANTS)
    @pytest.mark.parametrize("mode", ["train", "infer"])
    def test_finite_differences(self, variant, mode):
        for seed in range(3):
            assert gradient_check(variant, seed, mode) < GRAD_RTOL

    def test_satisfied_batch_zero_gradient(self):
        p = toy_model("learnable_weights", 0)
        X = np.random.default_rng(0).random((3, 9))
        batch = np.array([[0, 0, 1]])
        loss, grads = triplet_objective(p, X, batch, 1e-9, None, "infer")
        # anchor == positive; a tiny margin is satisfied as long as a != n
        assert loss == 0.0
        assert all(not g.any() for g in grads.values())

    def test_zero_feature_weight_gradient(self):
        p = toy_model("learnable_weights", 1)
        rng = np.random.default_rng(0)
        X = rng.random((6, 9))
        X[:, 4] = 0.0
        batch = np.array([[0, 1, 2], [3, 4, 5]])
        _, grads = triplet_objective(p, X, batch, 5.0, np.random.default_rng(1))
        assert grads["input_weights"][4] == 0.0
        assert np.count_nonzero(grads["input_weights"]) > 0

    def test_custom_weights_not_trainable(self):
        p = toy_model("custom_weights", 0)
        assert "input_weights" not in p.parameters()


class TestAdam:
    def test_zero_gradient(self):
        p = {"w": np.array([1.0, -2.0])}
        adam_step(p, {"w": np.zeros(2)}, AdamState(), 1e-3)
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    def test_first_step(self):
        p = {"w": np.array([1.0])}
        adam_step(p, {"w": np.array([1.0])}, AdamState(), 1e-3)
        assert p["w"][0] == pytest.approx(0.999, abs=1e-9)

    def test_reference_sequence(self):
        rng = np.random.default_rng(0)
        theta = rng.normal(size=5)
        grads = rng.normal(size=(10, 5))
        p = {"w": theta.copy()}
        state = AdamState()
        for g in grads:
            adam_step(p, {"w": g.copy()}, state, 0.01, 0.1)
        # scalar reference with coupled decay
        ref = theta.copy()
        m = np.zeros(5)
        v = np.zeros(5)
        for t, g in enumerate(grads, start=1):
            g = g + 0.1 * ref
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mhat, vhat = m / (1 - 0.9**t), v / (1 - 0.999**t)
            ref = ref - 0.01 * mhat / (np.sqrt(vhat) + 1e-8)
        np.testing.assert_allclose(p["w"], ref, rtol=1e-12)
        assert state.step == 10

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            params, objective = toy_problem("learnable_weights", 3, "train")
            state = AdamState()
            for _ in range(5):
                _, g = objective()
                adam_step(params.parameters(), g, state, 1e-2, 1e-5)
            runs.append(params)
        assert runs[0] == runs[1]

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState(), 1e-3)


def small_dataset(n=20, seed=0):
    specs = generate_specimens(SynthConfig(n_specimens=n, seed=seed))
    table = feature_table(specs)
    trips = build_triplets(table.rows, np.random.default_rng(seed))
    split = split_specimens(table.specimens(), np.random.default_rng(seed + 1))
    return table, trips, split


SMALL_NET = dict(encoder_dims=(9, 32, 16, 8), dropout_layers=1)


class TestTrain:
    def test_standard_loss_decreases(self):
        table, trips, split = small_dataset()
        res = train(table, trips, TrainConfig("standard", epochs=200), split)
        assert len(res.log) == 200
        assert res.log[-1].train_loss < res.log[0].train_loss

    def test_custom_weights_frozen(self):
        table, trips, split = small_dataset(8)
        res = train(table, trips, TrainConfig("custom", epochs=5, input_weights=CUSTOM_WEIGHTS, **SMALL_NET), split)
        expected = np.asarray(CUSTOM_WEIGHTS, dtype=np.float32)
        assert res.params.input_weights.tobytes() == expected.tobytes()

    def test_learnable_weights_move(self):
        table, trips, split = small_dataset(8)
        res = train(table, trips, TrainConfig("learnable", epochs=5, **SMALL_NET), split)
        assert not np.all(res.params.input_weights == 1.0)

    def test_same_seed_same_bytes(self, tmp_path):
        table, trips, split = small_dataset(8)
        for name in ("a", "b"):
            res = train(table, trips, TrainConfig("learnable", epochs=10, seed=4, **SMALL_NET), split)
            save_model(res.params, tmp_path / f"{name}.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_checkpoint_is_best_validation(self):
        table, trips, split = small_dataset(8)
        res = train(table, trips, TrainConfig("standard", epochs=15, **SMALL_NET), split)
        vals = [e.val_loss for e in res.log]
        best = min(vals)
        assert res.best_epoch == max(i + 1 for i, v in enumerate(vals) if v == best)
        val_trips = np.array([(t.anchor, t.positive, t.negative) for t in trips if t.specimen_id in split.validation])
        loss, _ = triplet_objective(res.params, table.X.astype(np.float32), val_trips, 1.0, None, "infer", False)
        assert loss == best

    def test_simclr_runs(self):
        table, trips, split = small_dataset(8)
        cfg = TrainConfig("simclr", epochs=3, encoder_dims=(9, 16, 8), projection_dims=(8, 4, 3), dropout_layers=1)
        res = train(table, None, cfg, split)
        assert res.params.projection_head is not None
        assert res.params.config["embedding_source"] == "encoder"
        assert np.isfinite([e.train_loss for e in res.log]).all()

    def test_empty_training_data(self):
        table, _, split = small_dataset(8)
        with pytest.raises(DataError):
            train(table, [], TrainConfig("standard", epochs=1), split)

    def test_config_errors(self):
        with pytest.raises(ConfigError):
            TrainConfig("custom_weights")
        with pytest.raises(ConfigError):
            TrainConfig("standard", epochs=0)
        with pytest.raises(ConfigError):
            TrainConfig("nonsense")

    def test_variant_defaults(self):
        t = TrainConfig("standard")
        s = TrainConfig("simclr")
        assert (t.learning_rate, t.weight_decay, t.epochs, t.batch_size, t.margin) == (1e-4, 1e-5, 2000, 32, 1.0)
        assert (s.epochs, s.batch_size, s.temperature) == (2500, 18, 0.5)
        assert TrainConfig.from_dict(t.to_dict()) == t


class TestEmbedAndReport:
    def test_empty(self):
        p = init_model("standard", np.random.default_rng(0))
        assert embed_all(p, np.empty((0, 9))).shape == (0, 128)

    def test_width_and_identical_rows(self):
        p = init_model("learnable_weights", np.random.default_rng(0))
        x = np.random.default_rng(1).random(9)
        E = embed_all(p, np.stack([x, x, x * 0.5]))
        assert E.shape == (3, 128)
        np.testing.assert_array_equal(E[0], E[1])

    def test_uniform_report(self):
        p = init_model("learnable_weights", np.random.default_rng(0))
        w = report_learned_weights(p)
        assert list(w) == list(FEATURE_COLUMNS)
        np.testing.assert_allclose(list(w.values()), 1 / 9, rtol=1e-12)

    def test_report_normalizes_abs(self):
        p = init_model("learnable_weights", np.random.default_rng(0), dtype=np.float64)
        p.input_weights[:] = [-2, 1, 1, 1, 1, 1, 1, 1, 1]
        w = report_learned_weights(p)
        assert w["surface"] == 0.2
        assert sum(w.values()) == pytest.approx(1.0, abs=1e-9)

    def test_report_needs_weights(self):
        with pytest.raises(ConfigError):
            report_learned_weights(init_model("standard", np.random.default_rng(0)))


class TestSerialize:
    @pytest.mark.parametrize("variant", VARIANTS)
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_roundtrip(self, tmp_path, variant, dtype):
        iw = CUSTOM_WEIGHTS if variant == "custom_weights" else None
        p = init_model(variant, np.random.default_rng(1), input_weights=iw, dtype=dtype,
                       config={"seed": 1, "note": "x"})
        save_model(p, tmp_path / "m.json")
        q = load_model(tmp_path / "m.json")
        assert q == p
        assert q.variant == variant

    def test_toy_roundtrip_float64_bits(self, tmp_path):
        p = toy_model("learnable_weights", 2)
        save_model(p, tmp_path / "m.json")
        q = load_model(tmp_path / "m.json")
        for a, b in zip(p.layers, q.layers):
            assert a.weight.tobytes() == b.weight.tobytes()

    def test_mismatched_dims(self):
        d = model_to_dict(toy_model("standard", 0))
        d["layers"][1]["in_dim"] = 7
        d["layers"][1]["weight"] = d["layers"][1]["weight"][:28]
        with pytest.raises(DataError):
            model_from_dict(d)

    def test_wrong_value_count(self):
        d = model_to_dict(toy_model("standard", 0))
        d["layers"][0]["weight"].pop()
        with pytest.raises(DataError):
            model_from_dict(d)

    def test_bad_format(self, tmp_path):
        (tmp_path / "m.json").write_text(json.dumps({"format": "other"}))
        with pytest.raises(DataError):
            load_model(tmp_path / "m.json")
