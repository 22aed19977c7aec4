import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rapa import attacks, data, nets
from rapa import tensor as T
from rapa.attacks import AttackConfig, TransformSpec
from rapa.masking import MaskPlan


def test_loss_values():
    assert attacks.loss_value("logit", np.array([1.0, 2, 5]), 2).item() == 5
    ce = attacks.loss_value("cross_entropy", np.zeros(4), 1).item()
    assert abs(ce - math.log(4)) < 1e-12
    assert abs(ce - 1.386294) < 1e-6
    with pytest.raises(ValueError):
        attacks.loss_value("hinge", np.zeros(3), 0)


def test_logit_loss_gradient_is_one_hot():
    out, tape = T.forward_eval(lambda z: T.sum(attacks.loss_value("logit", z, [2])),
                               {"z": np.array([[0.3, -1.0, 2.0, 0.5]])})
    assert np.array_equal(T.backward(tape, out["out"])[0], [[0, 0, 1, 0]])


def test_attack_objective_signs():
    z = np.array([[1.0, 2.0, 3.0]])
    assert attacks.attack_objective("logit", z, [0]).item() == 1.0
    ce = attacks.loss_value("cross_entropy", z, [0]).item()
    assert attacks.attack_objective("cross_entropy", z, [0]).item() == -ce


@pytest.mark.parametrize("kw", [dict(eps=0), dict(alpha=-1), dict(steps=0), dict(inferences=0),
                                dict(mu=-0.1), dict(loss="l2"), dict(ti_kernel_size=4)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        AttackConfig(**kw).validate()


def test_transform_spec_validation():
    for kw in (dict(kind="rotate"), dict(ratio=0.9), dict(prob=1.5), dict(copies=0)):
        with pytest.raises(ValueError):
            TransformSpec(**kw)


def test_config_dict_roundtrip():
    cfg = AttackConfig(transform=TransformSpec("rdi"), mask_plan=MaskPlan(p_w=0.07), seed=4)
    assert AttackConfig.from_dict(cfg.to_dict()) == cfg


def test_identity_and_prob_zero_transforms():
    x = np.random.default_rng(0).random((2, 16, 16, 1))
    assert attacks.input_transform(TransformSpec(), x) is x
    rng = np.random.default_rng(1)
    for kind in ("di", "rdi"):
        assert attacks.input_transform(TransformSpec(kind, prob=0.0), x, rng) is x


def test_rdi_shape_and_di_canvas():
    x = np.random.default_rng(0).random((2, 16, 16, 1))
    for seed in range(20):
        out = attacks.input_transform(TransformSpec("rdi", prob=1.0), x, np.random.default_rng(seed))
        assert out.shape == (2, 16, 16, 1)
        di = attacks.input_transform(TransformSpec("di", prob=1.0), x, np.random.default_rng(seed))
        assert di.shape == (2, 20, 20, 1)


def test_transform_is_differentiable():
    x = np.random.default_rng(0).random((1, 16, 16, 1))

    def f(x):
        return T.sum(T.mul(attacks.input_transform(TransformSpec("rdi", prob=1.0), x,
                                                   np.random.default_rng(3)), x))

    out, tape = T.forward_eval(f, {"x": x})
    g = T.backward(tape, out["out"])[0]
    fd = T.finite_diff_grad(lambda v: f(v).item(), x, 1e-5)
    assert np.abs(g - fd).max() < 1e-7


def test_scale_copies():
    x = np.ones((1, 2, 2, 1))
    assert attacks.scale_copies(x, 1)[0] is x
    two = attacks.scale_copies(x, 2)
    assert np.array_equal(two[1].data, 0.5 * x)
    assert attacks.scale_copies(x * 0.8, 3)[2].data.max() == pytest.approx(0.2)
    with pytest.raises(ValueError):
        attacks.scale_copies(x, 0)
    si = TransformSpec("si", copies=3)
    assert attacks.input_transform(si, x, index=4).data.max() == 0.5


def test_gaussian_kernel_normalized():
    k = attacks.gaussian_kernel(5)
    assert k.shape == (5, 5) and abs(k.sum() - 1) < 1e-15
    assert k[2, 2] == k.max()
    with pytest.raises(ValueError):
        attacks.gaussian_kernel(4)


def test_ti_smooth_identity_and_constant_interior():
    g = np.random.default_rng(0).normal(size=(2, 16, 16, 1))
    assert attacks.ti_smooth(g, 0) is g and attacks.ti_smooth(g, 1) is g
    c = np.full((1, 16, 16, 2), 0.7)
    out = attacks.ti_smooth(c, 5)
    np.testing.assert_allclose(out[:, 2:-2, 2:-2], 0.7, rtol=1e-14)
    assert out[0, 0, 0, 0] < 0.7  # zero padding at the border
    with pytest.raises(ValueError):
        attacks.ti_smooth(g, 2)


def test_ti_smooth_delta_mass_preserved():
    d = np.zeros((1, 9, 9, 1))
    d[0, 4, 4, 0] = 1.0
    out = attacks.ti_smooth(d, 3)
    assert abs(out.sum() - 1) < 1e-14
    np.testing.assert_allclose(out[0, 3:6, 3:6, 0], attacks.gaussian_kernel(3), rtol=1e-14)


def test_mi_update_examples():
    g = np.array([1.0, -3.0])
    np.testing.assert_allclose(attacks.mi_update(np.array([5.0, 5.0]), g, 0.0), g / 4)
    assert np.array_equal(attacks.mi_update(np.zeros(2), [2.0, -2.0], 1.0), [0.5, -0.5])
    m = np.array([0.3, -0.1])
    assert np.array_equal(attacks.mi_update(m, np.zeros(2), 0.5), 0.5 * m)


def test_mi_update_per_sample_norm():
    g = np.array([[1.0, 1.0], [0.0, 0.0], [3.0, -1.0]])
    out = attacks.mi_update(np.ones((3, 2)), g, 1.0, per_sample=True)
    np.testing.assert_allclose(out, [[1.5, 1.5], [1, 1], [1.75, 0.75]])


def test_step_and_project_examples():
    d = attacks.step_and_project(np.array([0.5, 0.5]), np.array([2.0, -3.0]), 2 / 255,
                                 np.array([0.5, 0.5]), 16 / 255) - 0.5
    np.testing.assert_allclose(d, [2 / 255, -2 / 255], rtol=0, atol=1e-16)
    out = attacks.step_and_project(np.array([0.9]), np.array([0.0]), 0.0, np.array([0.5]), 16 / 255)
    assert out[0] == pytest.approx(0.562745, abs=1e-6)
    assert attacks.step_and_project(np.array([-0.1]), np.array([0.0]), 0.0, np.array([0.0]), 0.5)[0] == 0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=4, max_size=4), st.lists(st.floats(0, 1), min_size=4, max_size=4),
       st.lists(st.floats(-1, 1), min_size=4, max_size=4), st.floats(1e-3, 0.5))
def test_projection_invariants(x_adv, x_clean, direction, eps):
    x_clean = np.array(x_clean)
    out = attacks.step_and_project(np.array(x_adv), np.array(direction), 2 / 255, x_clean, eps)
    assert (out >= 0).all() and (out <= 1).all()
    assert (np.abs(out - x_clean) <= eps + 1e-12).all()


def test_run_attack_contract(small_models, attack_batch):
    g, p = small_models["cnn_bn"]
    cfg = AttackConfig(steps=6, inferences=2, transform=TransformSpec("rdi"), ti_kernel_size=3,
                       mask_plan=MaskPlan(p_w=0.1), seed=2)
    adv = attacks.run_attack(g, p, attack_batch, cfg, snapshot_every=3)
    assert adv.trace_loss.shape == (len(attack_batch), 6) == adv.trace_grad_inf.shape
    assert np.abs(adv.x_adv - adv.x_clean).max() <= cfg.eps + 1e-9
    assert adv.x_adv.min() >= 0 and adv.x_adv.max() <= 1
    assert sorted(adv.snapshots) == [3, 6] and np.array_equal(adv.snapshots[6], adv.x_adv)
    assert adv.config == cfg.to_dict()


def test_run_attack_rejects_bad_input(small_models, attack_batch):
    g, p = small_models["cnn_bn"]
    with pytest.raises(ValueError, match="target"):
        attacks.run_attack(g, p, data.Dataset(attack_batch.images, attack_batch.labels),
                           AttackConfig(steps=1))
    with pytest.raises(ValueError, match="rdi"):
        attacks.run_attack(g, p, attack_batch, AttackConfig(steps=1, transform=TransformSpec("di")))
    with pytest.raises(ValueError):
        attacks.run_attack(g, p, attack_batch, AttackConfig(steps=0))


def test_chunking_and_workers_do_not_change_results(small_models, attack_batch):
    g, p = small_models["cnn_bn"]
    cfg = AttackConfig(steps=4, inferences=2, transform=TransformSpec("rdi"),
                       mask_plan=MaskPlan(p_w=0.05), seed=1)
    whole = attacks.run_attack(g, p, attack_batch, cfg)
    split = attacks.run_attack(g, p, attack_batch, cfg, chunk_size=5, workers=3)
    assert whole.x_adv.tobytes() == split.x_adv.tobytes()
    assert whole.trace_loss.tobytes() == split.trace_loss.tobytes()


@pytest.mark.parametrize("seed", range(10))
def test_p_zero_reduces_to_baseline_bitwise(small_models, attack_batch, seed):
    g, p = small_models["cnn_bn"]
    base = AttackConfig(steps=3, inferences=1, mu=1.0, seed=seed)
    a = attacks.run_attack(g, p, attack_batch, base)
    b = attacks.run_attack(g, p, attack_batch, AttackConfig(steps=3, inferences=1, mu=1.0, seed=seed,
                                                            mask_plan=MaskPlan(p_w=0.0)))
    assert a.x_adv.tobytes() == b.x_adv.tobytes()


def test_gradient_is_mean_of_inferences(small_models, attack_batch):
    """One step with S=3 equals the mean of the three per-inference gradients."""
    g, p = small_models["cnn_bn"]
    plan = MaskPlan(p_w=0.2)
    x = attack_batch.images
    yt = attack_batch.targets
    from rapa import rng as rngmod
    from rapa.masking import apply_masks, sample_masks
    total = None
    for s in (1, 2, 3):
        view = apply_masks(p, sample_masks(plan, g, p, 0, 1, s))
        gs, _ = attacks.input_gradient(g, view, x, yt, "logit", TransformSpec(),
                                       rngmod.substream(0, rngmod.TRANSFORM, 1, s), s - 1)
        total = gs if total is None else total + gs
    mean = total / 3
    adv = attacks.run_attack(g, p, attack_batch, AttackConfig(steps=1, inferences=3, mask_plan=plan))
    assert np.array_equal(adv.trace_grad_inf[:, 0], np.abs(mean).reshape(len(x), -1).max(axis=1))
    expected = attacks.step_and_project(x, attacks.mi_update(np.zeros_like(x), mean, 1.0, True),
                                        2 / 255, x, 16 / 255)
    assert np.array_equal(adv.x_adv, expected)


def test_white_box_loss_mostly_increases(small_models, attack_batch):
    g, p = small_models["cnn_bn"]
    adv = attacks.run_attack(g, p, attack_batch, AttackConfig(steps=40, inferences=1, mu=0.0))
    mean_trace = adv.trace_loss.mean(axis=0)
    assert np.mean(np.diff(mean_trace) >= 0) >= 0.8


def test_advbatch_roundtrip(tmp_path, small_models, attack_batch):
    g, p = small_models["mlp"]
    adv = attacks.run_attack(g, p, attack_batch, AttackConfig(steps=2, inferences=1), snapshot_every=1)
    attacks.save_advbatch(adv, tmp_path / "a.rpab", {"attack": "x"})
    back = attacks.load_advbatch(tmp_path / "a.rpab")
    for f in ("x_adv", "x_clean", "y", "y_tar", "trace_loss", "trace_grad_inf"):
        assert getattr(back, f).tobytes() == getattr(adv, f).tobytes()
    assert back.config == adv.config and sorted(back.snapshots) == [1, 2]
