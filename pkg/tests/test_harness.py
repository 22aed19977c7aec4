import json
from dataclasses import replace

import numpy as np
import pytest

from rapa import attacks, harness, nets
from rapa.attacks import AdvBatch, AttackConfig, TransformSpec
from rapa.harness import ManifestError, ModelEntry, NamedAttack, RunManifest, TransferMatrix
from rapa.masking import MaskPlan


def _adv(x, y, y_tar):
    n = len(x)
    return AdvBatch(x, x.copy(), np.asarray(y), None if y_tar is None else np.asarray(y_tar),
                    np.zeros((n, 1)), np.zeros((n, 1)))


def test_evaluate_asr_examples(small_models, small_splits):
    g, p = small_models["cnn_bn"]
    test = small_splits[1]
    pred = nets.predict(g, p, test.images)
    assert harness.evaluate_asr(_adv(test.images, test.labels, pred), g, p) == 1.0
    assert harness.evaluate_asr(_adv(test.images, test.labels, (pred + 1) % 8), g, p) == 0.0
    clean = harness.evaluate_asr(_adv(test.images, test.labels, (test.labels + 3) % 8), g, p)
    assert clean < 0.05
    outcomes = harness.attack_outcomes(_adv(test.images, test.labels, pred), g, p)
    assert outcomes.dtype == bool and outcomes.all()
    with pytest.raises(ValueError, match="target"):
        harness.evaluate_asr(_adv(test.images, test.labels, None), g, p)


def test_transfer_matrix_csv_format_and_roundtrip():
    m = TransferMatrix(["base", "rapa"], ["cnn_bn", "mlp"], [[1.0, 0.25], [0.98765, 1 / 3]], "cnn_bn", 64,
                       manifest_hash="abc123")
    text = m.to_csv()
    lines = text.splitlines()
    assert lines[0] == "attack,cnn_bn,mlp"
    assert lines[1] == "base,1.0000,0.2500"
    assert lines[2] == "rapa,0.9877,0.3333"
    assert lines[3].startswith("#") and "white_box=cnn_bn" in lines[3] and "abc123" in lines[3]
    back = TransferMatrix.from_csv(text)
    assert back.attacks == m.attacks and back.targets == m.targets and back.surrogate == "cnn_bn"
    assert back.cell("rapa", "mlp") == 0.3333
    assert m.mean_transfer("rapa") == pytest.approx(1 / 3)


def test_transfer_matrix_rejects_bad_cells():
    with pytest.raises(ValueError):
        TransferMatrix(["a"], ["m"], [[1.2]], "m", 1)
    with pytest.raises(ValueError):
        TransferMatrix(["a"], ["m", "n"], [[0.2]], "m", 1)


def tiny_manifest(out_dir, **kw):
    base = AttackConfig(steps=2, inferences=2, transform=TransformSpec("rdi"), ti_kernel_size=3)
    m = RunManifest(
        name="tiny",
        models=[ModelEntry("cnn_bn", "cnn_bn", 1, epochs=1), ModelEntry("mlp", "mlp", 2, epochs=2)],
        surrogate="cnn_bn",
        attacks=[NamedAttack("base", base), NamedAttack("rapa", replace(base, mask_plan=MaskPlan()))],
        targets=["cnn_bn", "mlp"],
        out_dir=str(out_dir), seed=3,
        dataset={"train_per_class": 16, "test_per_class": 4, "contrast": 1.0, "background": 0.0},
        n_samples=8, snapshot_every=1,
    )
    return replace(m, **kw)


def test_manifest_validation(tmp_path):
    m = tiny_manifest(tmp_path)
    m.validate()
    with pytest.raises(ManifestError, match="no attack"):
        tiny_manifest(tmp_path, attacks=[]).validate()
    with pytest.raises(ManifestError, match="duplicate attack"):
        tiny_manifest(tmp_path, attacks=[m.attacks[0], m.attacks[0]]).validate()
    with pytest.raises(ManifestError, match="duplicate model"):
        tiny_manifest(tmp_path, models=[m.models[0], m.models[0]]).validate()
    unequal = [m.attacks[0], NamedAttack("long", replace(m.attacks[1].config, steps=3))]
    with pytest.raises(ManifestError, match="share T and S"):
        tiny_manifest(tmp_path, attacks=unequal).validate()
    with pytest.raises(ManifestError, match="surrogate"):
        tiny_manifest(tmp_path, surrogate="vit").validate()
    with pytest.raises(ManifestError, match="unknown target"):
        tiny_manifest(tmp_path, targets=["cnn_bn", "vit"]).validate()
    missing = [replace(m.models[0], checkpoint=str(tmp_path / "none.rpac")), m.models[1]]
    with pytest.raises(ManifestError, match="missing input"):
        tiny_manifest(tmp_path, models=missing).validate()
    with pytest.raises(ManifestError):
        tiny_manifest(tmp_path, analyses=["plots"]).validate()


def test_manifest_json_roundtrip_and_hash(tmp_path):
    m = tiny_manifest(tmp_path / "a")
    m.save(tmp_path / "m.json")
    back = RunManifest.load(tmp_path / "m.json")
    assert back.to_dict() == m.to_dict()
    assert back.digest() == m.digest()
    assert tiny_manifest(tmp_path / "elsewhere", workers=4).digest() == m.digest()
    assert tiny_manifest(tmp_path, seed=4).digest() != m.digest()
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ManifestError):
        RunManifest.load(tmp_path / "bad.json")
    with pytest.raises(ManifestError):
        RunManifest.from_dict({"name": "x", "models": [{"bogus": 1}]})


def test_reference_manifest_shape(tmp_path):
    m = harness.reference_manifest(tmp_path)
    m.validate()
    assert m.name == "baseline_vs_rapa" and len(m.models) == 4 and m.n_samples == 256
    assert {a.config.steps for a in m.attacks} == {300} and {a.config.inferences for a in m.attacks} == {5}
    assert len({e.seed for e in m.models}) == 4


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run1")
    m = tiny_manifest(out)
    return m, harness.run_experiment(m)


def test_run_experiment_artifacts(tiny_run):
    m, arts = tiny_run
    h = m.digest()
    for key in ("transfer", "asr_curve", "gini", "variants", "pilot", "summary", "adv:base", "model:mlp",
                "data:train"):
        assert key in arts
    assert h in open(arts["transfer"]).read()
    assert h in open(arts["asr_curve"]).read()
    for key in ("gini", "variants", "pilot", "summary"):
        assert json.load(open(arts[key]))["manifest_hash"] == h
    assert attacks.load_advbatch(arts["adv:base"]).config["seed"] == m.seed
    assert nets.load_checkpoint(arts["model:mlp"]).meta["manifest_hash"] == h
    summary = json.load(open(arts["summary"]))
    assert summary["status"] == "ok" and not summary["partial"]
    assert summary["resolved"]["dataset"]["noise"] is not None
    curve = open(arts["asr_curve"]).read().splitlines()
    assert curve[0] == "attack,target,iteration,asr"
    assert len(curve) == 1 + 2 * 2 * 2 + 1


def test_run_is_deterministic_and_reevaluable(tiny_run, tmp_path):
    m, arts = tiny_run
    m2 = tiny_manifest(tmp_path / "run2", workers=2)
    arts2 = harness.run_experiment(m2)
    first = open(arts["transfer"], "rb").read()
    assert first == open(arts2["transfer"], "rb").read()
    assert harness.reevaluate(m).to_csv().encode() == first


def test_failure_names_step_and_flags_partial(tmp_path, small_models):
    ck = tmp_path / "mlp.rpac"
    nets.save_checkpoint(small_models["mlp"][1], ck)
    m = tiny_manifest(tmp_path / "out", analyses=[])
    m.models = [ModelEntry("cnn_bn", "cnn_bn", 1, checkpoint=str(ck)), m.models[1]]
    with pytest.raises(harness.ExperimentError) as ei:
        harness.run_experiment(m)
    assert ei.value.step == "train:cnn_bn"
    summary = json.load(open(tmp_path / "out" / "run_summary.json"))
    assert summary["status"] == "failed" and summary["partial"] and summary["failed_step"] == "train:cnn_bn"


def test_zero_attack_manifest_rejected_at_validation(tmp_path):
    with pytest.raises(harness.ExperimentError) as ei:
        harness.run_experiment(tiny_manifest(tmp_path, attacks=[]))
    assert ei.value.step == "validate"
