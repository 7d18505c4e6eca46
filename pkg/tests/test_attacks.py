"""Attack engine: losses, init, projection, smoothing, descent loop."""

from __future__ import annotations

import json
import math
from dataclasses import replace

import numpy as np
import pytest

from ioaf.errors import DataValidationError
from ioaf.numerics import SeededRng
from ioaf.models import (
    KwtaActivation,
    Layer,
    MlpClassifier,
    Rejector,
    init_mlp,
    input_gradient,
    make_blobs,
    predict,
    train_sgd,
    wrap,
)
from ioaf.attacks import (
    PRESETS,
    AttackConfig,
    CrossEntropyLoss,
    LogitDifferenceLoss,
    RejectionAwareLoss,
    config_from_dict,
    get_preset,
    initialize,
    load_config,
    make_loss,
    project,
    run_attack,
    smooth_gradient,
)
from ioaf.traces import serialize_trace


def linear_model(weights, bias=None, classes=None):
    W = np.asarray(weights, dtype=np.float64)
    b = np.zeros(W.shape[0]) if bias is None else np.asarray(bias, dtype=np.float64)
    return MlpClassifier((Layer(W, b, "identity"),), classes or W.shape[0])


class TestAttackConfig:
    def test_defaults_valid(self):
        cfg = AttackConfig()
        assert cfg.norm == "inf" and cfg.policy == "best-loss"

    @pytest.mark.parametrize("kw", [
        {"norm": "1"},
        {"epsilon": -0.1},
        {"epsilon": math.nan},
        {"alpha": 0.0},
        {"steps": 0},
        {"restarts": 0},
        {"step_rule": "momentum"},
        {"loss": "dlr"},
        {"init": "warm"},
        {"policy": "median"},
        {"smooth_m": -1},
        {"smooth_sigma": -0.1},
        {"targeted": True},
        {"target_class": 1},
    ])
    def test_invalid_fields(self, kw):
        with pytest.raises(DataValidationError):
            AttackConfig(**kw)

    def test_infinite_epsilon_needs_best_loss(self):
        AttackConfig(epsilon=math.inf, policy="best-loss")
        with pytest.raises(DataValidationError, match="best-loss"):
            AttackConfig(epsilon=math.inf, policy="last-iterate")

    def test_dict_round_trip(self):
        cfg = AttackConfig(epsilon=0.3, alpha=0.02, steps=7, restarts=2,
                           loss="logit-difference", kappa=0.5)
        assert config_from_dict(cfg.to_dict()) == cfg

    def test_unknown_field(self):
        with pytest.raises(DataValidationError, match="unknown"):
            config_from_dict({"epsilon": 0.1, "momentum": 0.9})

    def test_load_from_file(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"epsilon": 0.25, "steps": 3}))
        cfg = load_config(path)
        assert cfg.epsilon == 0.25 and cfg.steps == 3

    def test_load_bad_json(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text("{nope")
        with pytest.raises(DataValidationError, match="byte"):
            load_config(path)

    def test_fingerprint_stable(self):
        assert AttackConfig().fingerprint == AttackConfig().fingerprint
        assert AttackConfig().fingerprint != AttackConfig(alpha=0.02).fingerprint


class TestPresets:
    def test_published_values(self):
        k = PRESETS["kwta-weak"]
        assert (k.alpha, k.epsilon, k.steps, k.restarts) == (0.003, 8 / 255, 50, 5)
        d = PRESETS["distill-weak"]
        assert (d.alpha, d.epsilon, d.steps) == (0.01, 0.3, 50)
        e = PRESETS["ensemble-weak"]
        assert (e.alpha, e.epsilon, e.steps) == (0.001, 0.01, 10)
        t = PRESETS["tws-weak"]
        assert (t.alpha, t.epsilon, t.steps) == (0.1, 0.3, 50)

    def test_weak_presets_use_last_iterate(self):
        for cfg in PRESETS.values():
            assert cfg.policy == "last-iterate"
            assert cfg.step_rule == "sign-gradient"

    def test_unknown_preset(self):
        with pytest.raises(DataValidationError, match="unknown preset"):
            get_preset("pgd-strong")


class TestLosses:
    def test_logit_difference_examples(self):
        loss = LogitDifferenceLoss()
        assert loss.value(np.array([2.0, 1.0, 0.0]), 0) == 1.0
        assert loss.value(np.array([0.0, 3.0]), 0) == -3.0

    def test_kappa_shifts_value(self):
        loss = LogitDifferenceLoss(kappa=0.5)
        assert loss.value(np.array([2.0, 1.0, 0.0]), 0) == 1.5

    def test_sign_convention_grid(self):
        # On a grid over the box, value <= 0 exactly when the point is
        # misclassified (kappa=0), boundary ties landing on <= 0.
        model = linear_model([[3.0, -1.0], [0.5, 2.0]])
        loss = LogitDifferenceLoss()
        from ioaf.models import forward

        for a in np.linspace(0, 1, 21):
            for b in np.linspace(0, 1, 21):
                z = forward(model, np.array([a, b]))
                v = loss.value(z, 0)
                if predict(model, np.array([a, b])) != 0:
                    assert v <= 0
                if v < 0:
                    assert predict(model, np.array([a, b])) != 0

    def test_cross_entropy_decreases_toward_misclassification(self):
        loss = CrossEntropyLoss()
        confident = loss.value(np.array([5.0, 0.0]), 0)
        uncertain = loss.value(np.array([0.5, 0.0]), 0)
        flipped = loss.value(np.array([-5.0, 0.0]), 0)
        assert confident > uncertain > flipped

    def test_cross_entropy_gradient_matches_numeric(self):
        loss = CrossEntropyLoss()
        z = np.array([1.0, -0.5, 0.3])
        g = loss.logit_gradient(z, 1)
        for j in range(3):
            e = np.zeros(3)
            e[j] = 1e-6
            num = (loss.value(z + e, 1) - loss.value(z - e, 1)) / 2e-6
            assert abs(num - g[j]) < 1e-6

    def test_targeted_variants(self):
        ce = CrossEntropyLoss(targeted=True, target_class=2)
        z = np.array([0.0, 0.0, 4.0])
        assert ce.value(z, 0) < ce.value(np.array([4.0, 0.0, 0.0]), 0)
        ld = LogitDifferenceLoss(targeted=True, target_class=2)
        assert ld.value(z, 0) == -4.0

    def test_rejection_aware_values(self):
        loss = RejectionAwareLoss(reject_label=2)
        # Reject channel trailing: plain real-class margin.
        assert loss.value(np.array([2.0, 1.0, 0.5]), 0) == 1.0
        # Reject channel leading: hinge penalty added.
        assert loss.value(np.array([1.0, 0.5, 3.0]), 0) == 0.5 + 2.0

    def test_rejection_aware_gradient_matches_numeric(self):
        loss = RejectionAwareLoss(reject_label=2)
        for z in ([2.0, 1.0, 0.5], [1.0, 0.5, 3.0], [0.3, 1.9, 2.4]):
            z = np.array(z)
            g = loss.logit_gradient(z, 0)
            for j in range(3):
                e = np.zeros(3)
                e[j] = 1e-6
                num = (loss.value(z + e, 0) - loss.value(z - e, 0)) / 2e-6
                assert abs(num - g[j]) < 1e-6

    def test_rejection_aware_channel_mismatch(self):
        loss = RejectionAwareLoss(reject_label=3)
        with pytest.raises(DataValidationError, match="channels"):
            loss.value(np.array([1.0, 2.0]), 0)

    def test_make_loss_requires_reject_channel(self):
        cfg = AttackConfig(loss="rejection-aware")
        with pytest.raises(DataValidationError, match="reject"):
            make_loss(cfg, None)

    def test_label_out_of_range(self):
        with pytest.raises(DataValidationError, match="out of range"):
            LogitDifferenceLoss().value(np.array([1.0, 2.0]), 5)


class TestInitialize:
    def test_clean_is_zero(self):
        cfg = AttackConfig(init="clean", epsilon=0.3)
        d = initialize(np.array([0.5, 0.5]), cfg, SeededRng(0))
        assert np.array_equal(d, [0.0, 0.0])

    def test_random_zero_epsilon(self):
        cfg = AttackConfig(init="random-in-ball", epsilon=0.0)
        d = initialize(np.array([0.5, 0.5]), cfg, SeededRng(0))
        assert np.array_equal(d, [0.0, 0.0])

    def test_random_inf_ball_exhaustive(self):
        cfg = AttackConfig(init="random-in-ball", epsilon=0.1)
        x0 = np.array([0.05, 0.5, 0.98])
        rng = SeededRng(3)
        for i in range(10_000):
            d = initialize(x0, cfg, rng.substream(i))
            assert np.all(np.abs(d) <= 0.1 + 1e-12)
            assert np.all((x0 + d >= 0) & (x0 + d <= 1))

    def test_random_l2_ball(self):
        cfg = AttackConfig(norm="2", init="random-in-ball", epsilon=0.2)
        x0 = np.array([0.5, 0.5, 0.5, 0.5])
        rng = SeededRng(4)
        for i in range(2_000):
            d = initialize(x0, cfg, rng.substream(i))
            assert np.linalg.norm(d) <= 0.2 + 1e-12

    def test_random_infinite_epsilon_covers_box(self):
        cfg = AttackConfig(init="random-in-ball", epsilon=math.inf)
        x0 = np.array([0.9, 0.1])
        rng = SeededRng(5)
        pts = np.array([x0 + initialize(x0, cfg, rng.substream(i)) for i in range(2_000)])
        assert pts.min() >= 0 and pts.max() <= 1
        assert pts[:, 0].min() < 0.1 and pts[:, 0].max() > 0.9


class TestProject:
    def test_inside_unchanged(self):
        x0 = np.array([0.5, 0.5])
        d = np.array([0.05, -0.02])
        assert np.array_equal(project(x0, d, "inf", 0.1), d)

    def test_inf_clamp_example(self):
        x0 = np.array([0.5, 0.5])
        out = project(x0, np.array([0.3, -0.05]), "inf", 0.1)
        assert np.array_equal(out, [0.1, -0.05])

    def test_l2_rescale_example(self):
        x0 = np.array([0.2, 0.1])
        out = project(x0, np.array([3.0, 4.0]), "2", 1.0)
        assert np.allclose(out, [0.6, 0.8], atol=1e-12)

    def test_box_priority(self):
        x0 = np.array([0.95, 0.5])
        out = project(x0, np.array([0.3, 0.0]), "inf", 0.5)
        assert np.isclose(x0[0] + out[0], 1.0)

    def test_feasibility_fuzz(self):
        gen = SeededRng(9).generator
        for _ in range(2_000):
            d_dim = int(gen.integers(1, 6))
            x0 = gen.uniform(0, 1, d_dim)
            raw = gen.normal(scale=2.0, size=d_dim)
            eps = float(gen.uniform(0.01, 0.5))
            for norm in ("inf", "2"):
                out = project(x0, raw, norm, eps)
                assert np.all((x0 + out >= -1e-12) & (x0 + out <= 1 + 1e-12))
                if norm == "inf":
                    assert np.max(np.abs(out)) <= eps + 1e-9
                else:
                    assert np.linalg.norm(out) <= eps + 1e-9

    def test_inf_idempotent(self):
        gen = SeededRng(10).generator
        for _ in range(500):
            x0 = gen.uniform(0, 1, 4)
            raw = gen.normal(scale=1.5, size=4)
            once = project(x0, raw, "inf", 0.2)
            assert np.array_equal(project(x0, once, "inf", 0.2), once)


class TestSmoothGradient:
    def test_sigma_zero_exact(self):
        model = init_mlp(SeededRng(1), [3, 8, 2])
        loss = CrossEntropyLoss()
        x = np.array([0.2, 0.6, 0.4])
        plain = input_gradient(model, x, loss, 0)
        smoothed = smooth_gradient(model, x, loss, 0, 7, 0.0, SeededRng(2))
        assert np.array_equal(smoothed, plain)

    def test_linear_model_any_sigma(self):
        model = linear_model([[2.0, -1.0], [0.5, 1.5]])

        class SumLoss:
            def value(self, logits, y):
                return float(logits[0] - 2.0 * logits[1])

            def logit_gradient(self, logits, y):
                return np.array([1.0, -2.0])

        x = np.array([0.5, 0.5])
        plain = input_gradient(model, x, SumLoss(), 0)
        for sigma in (0.01, 0.2):
            sm = smooth_gradient(model, x, SumLoss(), 0, 20, sigma, SeededRng(3))
            assert np.allclose(sm, plain, atol=1e-12)

    def test_kwta_denoising(self):
        # Layer-0 biases tie every hidden activation at xstar, so selection
        # boundaries are dense there and raw gradients decorrelate across
        # 1e-3 steps while smoothed ones stay aligned.
        rng = SeededRng(42)
        base = init_mlp(rng.substream("init"), [8, 32, 32, 2])
        xstar = np.full(8, 0.5)
        layers = list(base.layers)
        layers[0] = replace(layers[0], bias=1.0 - layers[0].weights @ xstar)
        model = wrap(
            MlpClassifier(tuple(layers), 2), KwtaActivation(6)
        )
        loss = LogitDifferenceLoss()

        def cosine(a, b):
            na, nb = np.linalg.norm(a), np.linalg.norm(b)
            return 0.0 if na == 0 or nb == 0 else float(a @ b / (na * nb))

        gen = SeededRng(7).generator
        raw, smooth = [], []
        for i in range(100):
            x = xstar + gen.uniform(-0.005, 0.005, 8)
            u = gen.normal(size=8)
            u /= np.linalg.norm(u)
            x2 = x + 1e-3 * u
            raw.append(cosine(
                input_gradient(model, x, loss, 0), input_gradient(model, x2, loss, 0)
            ))
            smooth.append(cosine(
                smooth_gradient(model, x, loss, 0, 100, 0.031, rng.substream("s", i, 0)),
                smooth_gradient(model, x2, loss, 0, 100, 0.031, rng.substream("s", i, 1)),
            ))
        assert np.mean(smooth) > np.mean(raw)

    def test_rejector_path_matches_loop(self):
        model = wrap(linear_model([[1.0, 0.0], [0.0, 1.0]]),
                     Rejector(probes=8, radius=0.05, seed=1))
        loss = RejectionAwareLoss(reject_label=2)
        x = np.array([0.6, 0.4])
        a = smooth_gradient(model, x, loss, 0, 5, 0.02, SeededRng(6))
        b = smooth_gradient(model, x, loss, 0, 5, 0.02, SeededRng(6))
        assert np.array_equal(a, b)


class ScriptedLoss:
    """Returns scripted values per call; NaN exercises the halt path."""

    def __init__(self, values):
        self.values = list(values)
        self.calls = 0

    def value(self, logits, y):
        v = self.values[min(self.calls, len(self.values) - 1)]
        self.calls += 1
        return v

    def logit_gradient(self, logits, y):
        g = np.zeros_like(logits)
        g[y] = 1.0
        return g


class TestRunAttack:
    def test_zero_gradient_model(self):
        model = linear_model(np.zeros((2, 2)))
        cfg = AttackConfig(epsilon=0.1, alpha=0.01, steps=5)
        res = run_attack(model, model, np.array([0.4, 0.6]), 0, cfg, SeededRng(0))
        trace = res.best_trace
        assert len(trace.iterates) == 6
        first = trace.iterates[0]
        assert all(it == first for it in trace.iterates)
        assert np.array_equal(res.delta, [0.0, 0.0])

    def test_one_step_closed_form(self):
        model = linear_model([[3.0, -2.0], [0.0, 0.0]])
        # Gradient of z_0 - z_1 is w = [3, -2]; one sign step of 0.05.
        cfg = AttackConfig(epsilon=0.1, alpha=0.05, steps=1,
                           loss="logit-difference", policy="last-iterate")
        res = run_attack(model, model, np.array([0.5, 0.5]), 0, cfg, SeededRng(0))
        assert np.allclose(res.delta, [-0.05, 0.05], atol=1e-15)

    def test_trace_length_and_restarts(self):
        model = init_mlp(SeededRng(1), [3, 8, 2])
        cfg = AttackConfig(epsilon=0.1, alpha=0.01, steps=4, restarts=3,
                           init="random-in-ball")
        res = run_attack(model, model, np.array([0.2, 0.5, 0.8]), 0, cfg, SeededRng(2))
        assert len(res.traces) == 3
        assert all(len(t.iterates) == 5 for t in res.traces)
        assert [t.restart for t in res.traces] == [0, 1, 2]
        assert 0 <= res.restart_index < 3

    def test_deterministic_traces(self):
        model = init_mlp(SeededRng(1), [3, 8, 2])
        cfg = AttackConfig(epsilon=0.1, alpha=0.02, steps=6, restarts=2,
                           init="random-in-ball")

        def run():
            res = run_attack(model, model, np.array([0.3, 0.4, 0.5]), 1, cfg, SeededRng(5))
            return [serialize_trace(t) for t in res.traces]

        assert run() == run()

    def test_delta_norm_within_budget(self):
        model = init_mlp(SeededRng(1), [3, 8, 2])
        cfg = AttackConfig(epsilon=0.07, alpha=0.05, steps=20, init="random-in-ball")
        res = run_attack(model, model, np.array([0.1, 0.9, 0.5]), 0, cfg, SeededRng(3))
        for it in res.best_trace.iterates:
            assert it.delta_norm <= 0.07 + 1e-9

    def test_best_loss_dominates_last_iterate(self):
        # Tent-shaped class-1 region narrower than one step: sign descent
        # walks into the band at step 3 and overshoots past it at step 4.
        # All coordinates are dyadic so the path is exact.
        net = MlpClassifier(
            layers=(
                Layer(np.array([[1.0, 0.0], [1.0, 0.0]]),
                      np.array([-0.25, -0.5]), "relu"),
                Layer(np.array([[0.0, 0.0], [16.0, -32.0]]),
                      np.array([0.0, -3.5]), "identity"),
            ),
            num_classes=2,
        )
        x0 = np.array([0.3125, 0.5])
        base = AttackConfig(epsilon=0.3125, alpha=0.0625, steps=4)
        best = run_attack(net, net, x0, 0, base, SeededRng(0))
        last = run_attack(net, net, x0, 0, replace(base, policy="last-iterate"),
                          SeededRng(0))
        flags = [it.success_target for it in best.best_trace.iterates]
        assert flags == [False, False, False, True, False]
        assert [it.success_target for it in last.best_trace.iterates] == flags
        assert best.best_trace.returned_index == 3
        assert last.best_trace.returned_index == 4
        assert best.success and not last.success

    def test_surrogate_distinct_flag(self):
        a = init_mlp(SeededRng(1), [2, 4, 2])
        b = init_mlp(SeededRng(2), [2, 4, 2])
        cfg = AttackConfig(steps=2)
        same = run_attack(a, a, np.array([0.5, 0.5]), 0, cfg, SeededRng(0))
        cross = run_attack(a, b, np.array([0.5, 0.5]), 0, cfg, SeededRng(0))
        assert not same.best_trace.surrogate_distinct
        assert cross.best_trace.surrogate_distinct

    def test_halt_on_non_finite_loss(self):
        model = linear_model([[1.0, 0.0], [0.0, 1.0]])
        cfg = AttackConfig(epsilon=0.2, alpha=0.01, steps=6)
        scripted = ScriptedLoss([1.0, 0.9, math.nan, 0.5])
        res = run_attack(model, model, np.array([0.5, 0.4]), 0, cfg, SeededRng(0),
                         loss=scripted)
        trace = res.best_trace
        assert trace.status == "halted_non_finite"
        assert len(trace.iterates) == 3
        assert math.isnan(trace.iterates[-1].loss_surrogate)

    def test_unbounded_epsilon_breaks_trained_model(self):
        rng = SeededRng(21)
        ds = make_blobs(rng.substream("data"), 30, 5, 3, 0.08)
        net = train_sgd(init_mlp(rng.substream("init"), [5, 12, 3]), ds,
                        epochs=60, lr=0.1, rng=rng.substream("train"))
        cfg = AttackConfig(epsilon=math.inf, alpha=0.05, steps=500,
                           loss="logit-difference", policy="best-loss")
        for i in range(len(ds)):
            x0, y = ds.features[i], int(ds.labels[i])
            if predict(net, x0) != y:
                continue
            res = run_attack(net, net, x0, y, cfg, SeededRng(1000 + i))
            assert res.success, f"sample {i} survived unbounded attack"

    def test_label_out_of_range(self):
        model = linear_model([[1.0, 0.0], [0.0, 1.0]])
        with pytest.raises(DataValidationError, match="out of range"):
            run_attack(model, model, np.array([0.5, 0.5]), 9, AttackConfig(), SeededRng(0))

    def test_clean_correct_recorded(self):
        model = linear_model([[1.0, 0.0], [0.0, 1.0]])
        cfg = AttackConfig(steps=1)
        res = run_attack(model, model, np.array([0.8, 0.2]), 0, cfg, SeededRng(0))
        assert res.best_trace.clean_correct
        res2 = run_attack(model, model, np.array([0.8, 0.2]), 1, cfg, SeededRng(0))
        assert not res2.best_trace.clean_correct
