import numpy as np
import pytest

from rapa import nets
from rapa.masking import MaskDraw, MaskPlan, apply_masks, sample_masks, variant_stream


@pytest.fixture(scope="module")
def cnn():
    g = nets.build_model("cnn_bn")
    return g, nets.init_params(g, 0)


def test_plan_validation():
    with pytest.raises(ValueError):
        MaskPlan(p_w=1.5)
    with pytest.raises(ValueError):
        MaskPlan(dense=False, norm=False, conv=False)
    with pytest.raises(ValueError):
        MaskPlan.from_layers("dense,attn", 0.1)
    plan = MaskPlan.from_layers("norm, conv", 0.1, 0.2)
    assert plan.layer_flags() == ["norm", "conv"] and plan.prob_b == 0.2
    assert MaskPlan(p_w=0.3).prob_b == 0.3


def test_targets_default_dense_and_norm(cnn):
    g, _ = cnn
    names = [n for _, n, _ in MaskPlan().targets(g)]
    assert names == ["bn1.gamma", "bn1.beta", "bn2.gamma", "bn2.beta",
                     "dense1.weight", "dense1.bias", "dense2.weight", "dense2.bias"]


@pytest.mark.parametrize("p, value", [(0.0, 1.0), (1.0, 0.0)])
def test_degenerate_probabilities(cnn, p, value):
    g, params = cnn
    draw = sample_masks(MaskPlan(p_w=p), g, params, 0, 1, 1)
    for m in draw.masks.values():
        assert (m == value).all()


def test_masks_binary_and_shaped(cnn):
    g, params = cnn
    draw = sample_masks(MaskPlan(p_w=0.3, conv=True), g, params, 0, 1, 1)
    for name, m in draw.masks.items():
        assert m.shape == params[name].shape
        assert set(np.unique(m)) <= {0.0, 1.0}
    assert draw.coords == (0, 1, 1)


def test_drop_rate_within_binomial_bounds(cnn):
    g, params = cnn
    for p in (0.01, 0.05, 0.09):
        drops = n = 0
        t = 0
        while n < 100_000:
            t += 1
            for m in sample_masks(MaskPlan(p_w=p), g, params, 5, t, 1).masks.values():
                drops += (m == 0).sum()
                n += m.size
        assert abs(drops / n - p) <= 3 * np.sqrt(p * (1 - p) / n)


def test_apply_elementwise_rule():
    g = nets.build_model([nets.Flatten(), nets.Dense(256, 2), nets.Dense(2, 8)])
    p = nets.init_params(g, 0).replace(**{"dense2.weight": np.array([[1.0] * 8, [2.0] * 8])})
    w = np.array([[1.0, 2], [3, 4]])
    small = nets.ParamStore({"l.weight": w}, ["l.weight"])
    out = apply_masks(small, MaskDraw({"l.weight": np.array([[1.0, 0], [0, 1]])}))
    assert np.array_equal(out["l.weight"], [[1, 0], [0, 4]])
    assert np.array_equal(small["l.weight"], w)
    with pytest.raises(ValueError, match="shape"):
        apply_masks(p, MaskDraw({"dense2.weight": np.ones((3, 8))}))
    with pytest.raises(ValueError, match="unknown"):
        apply_masks(p, MaskDraw({"nope.weight": np.ones(2)}))


def test_all_ones_draw_is_identity(cnn):
    g, params = cnn
    draw = sample_masks(MaskPlan(p_w=0.0), g, params, 0, 1, 1)
    x = np.random.default_rng(0).random((2, 16, 16, 1))
    assert np.array_equal(nets.logits(g, apply_masks(params, draw), x), nets.logits(g, params, x))


def test_unselected_layers_and_base_untouched(cnn):
    g, params = cnn
    before = params.copy()
    for s in range(1, 6):
        view = apply_masks(params, sample_masks(MaskPlan(p_w=0.5), g, params, 1, 1, s))
        nets.logits(g, view, np.zeros((1, 16, 16, 1)))
        for name in params.names():
            if name.startswith("conv") or "running" in name:
                assert view[name].tobytes() == params[name].tobytes()
    assert params.equal(before)


def test_variant_stream_determinism_and_independence(cnn):
    g, params = cnn
    vs = variant_stream(MaskPlan(p_w=0.05), g, params, seed=3)
    a, b = vs.draw(1, 1), vs.draw(1, 1)
    assert all(a.masks[k].tobytes() == b.masks[k].tobytes() for k in a.masks)
    c = vs.draw(1, 2)
    assert any(not np.array_equal(a.masks[k], c.masks[k]) for k in a.masks)
    assert vs[2, 1]["dense1.weight"].shape == (1024, 64)
    zero = variant_stream(MaskPlan(p_w=0.0), g, params, seed=3)
    assert zero.view(4, 2).equal(params)
