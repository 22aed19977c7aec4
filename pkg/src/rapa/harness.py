"""Experiment orchestration: run manifests, transfer matrices and on-disk artifacts.

Every artifact written by :func:`run_experiment` carries the manifest hash, and
re-evaluating the saved adversarial batches reproduces the transfer matrix exactly.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import analysis, attacks, data, nets
from .attacks import AttackConfig, TransformSpec
from .masking import MaskPlan

DEFAULT_SAMPLES = 256
GINI_SAMPLES = 64
VARIANT_P_GRID = tuple(round(0.01 * k, 2) for k in range(1, 10))
ANALYSES = ("gini", "variants", "pilot")


class ManifestError(ValueError):
    pass


class ExperimentError(RuntimeError):
    def __init__(self, step: str, cause: BaseException):
        super().__init__(f"step {step!r} failed: {type(cause).__name__}: {cause}")
        self.step = step
        self.cause = cause


# -- manifest ----------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelEntry:
    name: str
    preset: str
    seed: int
    epochs: int = nets.TrainHyper.epochs
    lr: float = nets.TrainHyper.lr
    batch_size: int = nets.TrainHyper.batch_size
    checkpoint: str | None = None  # load this file instead of training


@dataclass(frozen=True)
class NamedAttack:
    name: str
    config: AttackConfig


@dataclass
class RunManifest:
    name: str
    models: list[ModelEntry]
    surrogate: str
    attacks: list[NamedAttack]
    targets: list[str]
    out_dir: str
    seed: int = 0
    dataset: dict = field(default_factory=dict)  # overrides of data.DEFAULT_DATA, or train/test paths
    n_samples: int = DEFAULT_SAMPLES
    target_rule: str = "random_excluding_true"
    analyses: list[str] = field(default_factory=lambda: list(ANALYSES))
    snapshot_every: int = 25
    workers: int = 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attacks"] = [{"name": a.name, "config": a.config.to_dict()} for a in self.attacks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        d = dict(d)
        try:
            d["models"] = [ModelEntry(**m) for m in d.get("models", [])]
            d["attacks"] = [NamedAttack(a["name"], AttackConfig.from_dict(a.get("config", {})))
                            for a in d.get("attacks", [])]
            return cls(**d)
        except (TypeError, KeyError) as e:
            raise ManifestError(f"malformed manifest: {e}") from e

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "RunManifest":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as e:
            raise ManifestError(f"{path}: not valid JSON ({e})") from e

    def digest(self) -> str:
        """Hash of everything that affects results (the output directory and worker count do not)."""
        d = self.to_dict()
        d.pop("out_dir")
        d.pop("workers")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def data_config(self) -> dict:
        cfg = dict(data.DEFAULT_DATA, seed=self.seed)
        cfg.update({k: v for k, v in self.dataset.items() if k not in ("train_path", "test_path")})
        return cfg

    def resolved_attacks(self) -> list[NamedAttack]:
        """Attack configs with their seed replaced by the manifest's global seed."""
        return [NamedAttack(a.name, replace(a.config, seed=self.seed)) for a in self.attacks]

    def validate(self, check_paths: bool = True) -> None:
        if not self.attacks:
            raise ManifestError("manifest has no attack configurations")
        if not self.models:
            raise ManifestError("manifest has no models")
        for kind, names in (("model", [m.name for m in self.models]),
                            ("attack", [a.name for a in self.attacks])):
            dup = sorted({n for n in names if names.count(n) > 1})
            if dup:
                raise ManifestError(f"duplicate {kind} names: {', '.join(dup)}")
        known = {m.name for m in self.models}
        if self.surrogate not in known:
            raise ManifestError(f"surrogate {self.surrogate!r} is not a declared model")
        missing = [t for t in self.targets if t not in known]
        if missing:
            raise ManifestError(f"unknown target models: {', '.join(missing)}")
        for m in self.models:
            if m.preset not in nets.PRESETS:
                raise ManifestError(f"model {m.name!r}: unknown preset {m.preset!r}")
        steps = {a.config.steps for a in self.attacks}
        infs = {a.config.inferences for a in self.attacks}
        if len(steps) > 1 or len(infs) > 1:
            raise ManifestError("compared attacks must share T and S "
                                f"(got T={sorted(steps)}, S={sorted(infs)})")
        for a in self.attacks:
            try:
                a.config.validate()
            except ValueError as e:
                raise ManifestError(f"attack {a.name!r}: {e}") from e
        bad = [x for x in self.analyses if x not in ANALYSES]
        if bad:
            raise ManifestError(f"unknown analyses: {', '.join(bad)}")
        if self.n_samples < 1:
            raise ManifestError("n_samples must be >= 1")
        if self.target_rule not in ("next_class", "random_excluding_true"):
            raise ManifestError(f"unknown target rule {self.target_rule!r}")
        if check_paths:
            paths = [m.checkpoint for m in self.models if m.checkpoint]
            paths += [self.dataset[k] for k in ("train_path", "test_path") if self.dataset.get(k)]
            absent = [p for p in paths if not Path(p).exists()]
            if absent:
                raise ManifestError(f"missing input files: {', '.join(absent)}")


def reference_manifest(out_dir, seed: int = 0, n_samples: int = DEFAULT_SAMPLES,
                       steps: int = 300, inferences: int = 5) -> RunManifest:
    """``baseline_vs_rapa``: MI+TI+RDI with and without parameter masking on ``cnn_bn``."""
    base = AttackConfig(steps=steps, inferences=inferences, mu=1.0, transform=TransformSpec("rdi"),
                        ti_kernel_size=REFERENCE_TI_KERNEL)
    return RunManifest(
        name="baseline_vs_rapa",
        models=[ModelEntry(n, n, s, epochs=e) for n, s, e in REFERENCE_MODELS],
        surrogate="cnn_bn",
        attacks=[NamedAttack("mi_ti_rdi", base),
                 NamedAttack("rapa_mi_ti_rdi", replace(base, mask_plan=MaskPlan(p_w=0.05)))],
        targets=[n for n, _, _ in REFERENCE_MODELS],
        out_dir=str(out_dir), seed=seed, n_samples=n_samples,
    )


# a 5-tap kernel blurs most of a 16 px glyph away; 3 keeps the baseline strong
REFERENCE_TI_KERNEL = 3

# (name/preset, init seed, epochs); seeds are pairwise distinct
REFERENCE_MODELS = (("cnn_bn", 11, 4), ("cnn_ln", 12, 4), ("mlp", 13, 30), ("cnn_wide", 14, 4))


# -- evaluation -----------------------------------------------------------------------

def attack_outcomes(adv, graph, params, x=None) -> np.ndarray:
    """Per-sample success: prediction on ``x`` (default ``adv.x_adv``) equals ``y_tar``."""
    if getattr(adv, "y_tar", None) is None:
        raise ValueError("adversarial batch has no target labels")
    x = adv.x_adv if x is None else x
    return nets.predict(graph, params, x) == np.asarray(adv.y_tar)


def evaluate_asr(adv, graph, params) -> float:
    """Targeted success rate: fraction with argmax logits(x_adv) == y_tar."""
    return float(attack_outcomes(adv, graph, params).mean())


@dataclass
class TransferMatrix:
    attacks: list[str]
    targets: list[str]
    cells: np.ndarray  # (attacks, targets)
    surrogate: str
    n_samples: int
    seeds: dict = field(default_factory=dict)
    wall_time: float = 0.0
    manifest_hash: str = ""

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.float64)
        if self.cells.shape != (len(self.attacks), len(self.targets)):
            raise ValueError("cell grid does not match attack/target lists")
        if ((self.cells < 0) | (self.cells > 1)).any():
            raise ValueError("ASR cells must lie in [0, 1]")

    def cell(self, attack: str, target: str) -> float:
        return float(self.cells[self.attacks.index(attack), self.targets.index(target)])

    def mean_transfer(self, attack: str) -> float:
        """Mean over non-surrogate targets."""
        cols = [j for j, t in enumerate(self.targets) if t != self.surrogate]
        return float(self.cells[self.attacks.index(attack), cols].mean())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["attack", *self.targets])
        for name, row in zip(self.attacks, self.cells):
            w.writerow([name, *(f"{v:.4f}" for v in row)])
        buf.write(f"# white_box={self.surrogate} n_samples={self.n_samples} "
                  f"manifest={self.manifest_hash}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TransferMatrix":
        lines = text.splitlines()
        rows = list(csv.reader(ln for ln in lines if not ln.startswith("#")))
        meta = dict(kv.split("=", 1) for ln in lines if ln.startswith("#") for kv in ln[1:].split())
        return cls([r[0] for r in rows[1:]], rows[0][1:], [[float(v) for v in r[1:]] for r in rows[1:]],
                   meta.get("white_box", ""), int(meta.get("n_samples", 0)),
                   manifest_hash=meta.get("manifest", ""))


def transfer_matrix(advs: dict, models: dict, targets, surrogate: str, manifest_hash: str = "",
                    seeds: dict | None = None) -> TransferMatrix:
    """``advs``: attack name -> AdvBatch; ``models``: name -> (graph, params)."""
    t0 = time.perf_counter()
    cells = [[evaluate_asr(adv, *models[t]) for t in targets] for adv in advs.values()]
    n = len(next(iter(advs.values())))
    return TransferMatrix(list(advs), list(targets), cells, surrogate, n, dict(seeds or {}),
                          time.perf_counter() - t0, manifest_hash)


def asr_curve_rows(advs: dict, models: dict, targets) -> list[tuple[str, str, int, float]]:
    rows = []
    for name, adv in advs.items():
        for t in sorted(adv.snapshots):
            for tgt in targets:
                ok = attack_outcomes(adv, *models[tgt], x=adv.snapshots[t])
                rows.append((name, tgt, t, float(ok.mean())))
    return rows


# -- experiment ---------------------------------------------------------------------

class _Steps:
    """Runs named steps, timing each and naming the one that fails."""

    def __init__(self):
        self.timings: dict[str, float] = {}
        self.current: str | None = None

    def run(self, name, fn, *args, **kw):
        self.current = name
        t0 = time.perf_counter()
        try:
            out = fn(*args, **kw)
        except ExperimentError:
            raise
        except Exception as e:
            raise ExperimentError(name, e) from e
        self.timings[name] = round(time.perf_counter() - t0, 3)
        self.current = None
        return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def load_data(manifest: RunManifest):
    ds = manifest.dataset
    if ds.get("train_path") and ds.get("test_path"):
        return data.load_dataset(ds["train_path"]), data.load_dataset(ds["test_path"])
    return data.default_splits(**manifest.data_config())


def obtain_model(entry: ModelEntry, train_set, test_set):
    graph = nets.build_model(entry.preset)
    if entry.checkpoint:
        params = nets.load_checkpoint(entry.checkpoint)
        if params.arch.get("name") != graph.name:
            raise ValueError(f"checkpoint {entry.checkpoint} holds {params.arch.get('name')!r}, "
                             f"expected {graph.name!r}")
    else:
        hyper = nets.TrainHyper(epochs=entry.epochs, batch_size=entry.batch_size, lr=entry.lr,
                                seed=entry.seed)
        params, _ = nets.train(graph, nets.init_params(graph, entry.seed), train_set, hyper, test_set)
    # evaluate exactly what is stored on disk
    return graph, nets.to_stored_precision(params)


def attack_batch(manifest: RunManifest, test_set):
    n = min(manifest.n_samples, len(test_set))
    return data.assign_targets(test_set.subset(np.arange(n)), manifest.target_rule, manifest.seed)


def run_experiment(manifest: RunManifest) -> dict[str, str]:
    """Execute a manifest; returns artifact name -> path.

    On failure the run summary is still written with ``status: failed``, the failing
    step and ``partial: true``, and :class:`ExperimentError` is raised.
    """
    out = Path(manifest.out_dir)
    steps = _Steps()
    artifacts: dict[str, str] = {}
    h = manifest.digest()
    summary = {"manifest_hash": h, "manifest": manifest.to_dict(), "status": "running",
               "resolved": {}, "artifacts": artifacts}
    t_start = time.perf_counter()
    try:
        steps.run("validate", manifest.validate)
        for sub in ("data", "models", "adv"):
            (out / sub).mkdir(parents=True, exist_ok=True)
        resolved = {"dataset": manifest.data_config(), "analyses": list(manifest.analyses),
                    "attacks": {a.name: a.config.to_dict() for a in manifest.resolved_attacks()},
                    "gini_samples": GINI_SAMPLES, "variant_p_grid": list(VARIANT_P_GRID)}
        summary["resolved"] = resolved

        train_set, test_set = steps.run("data", load_data, manifest)
        for name, ds in (("train", train_set), ("test", test_set)):
            ds.meta["manifest_hash"] = h
            p = out / "data" / f"{name}.rpds"
            data.save_dataset(ds, p)
            artifacts[f"data:{name}"] = str(p)

        models, accuracy = {}, {}
        for entry in manifest.models:
            graph, params = steps.run(f"train:{entry.name}", obtain_model, entry, train_set, test_set)
            params.meta["manifest_hash"] = h
            p = out / "models" / f"{entry.name}.rpac"
            nets.save_checkpoint(params, p)
            artifacts[f"model:{entry.name}"] = str(p)
            models[entry.name] = (graph, params)
            accuracy[entry.name] = nets.accuracy(graph, params, test_set)
        summary["test_accuracy"] = accuracy

        batch = attack_batch(manifest, test_set)
        sg, sp = models[manifest.surrogate]
        advs = {}
        for a in manifest.resolved_attacks():
            adv = steps.run(f"attack:{a.name}", attacks.run_attack, sg, sp, batch, a.config,
                            workers=manifest.workers, snapshot_every=manifest.snapshot_every)
            p = out / "adv" / f"{a.name}.rpab"
            attacks.save_advbatch(adv, p, {"manifest_hash": h, "attack": a.name,
                                           "surrogate": manifest.surrogate})
            artifacts[f"adv:{a.name}"] = str(p)
            advs[a.name] = adv

        def evaluate():
            m = transfer_matrix(advs, models, manifest.targets, manifest.surrogate, h,
                                {"global": manifest.seed, **{e.name: e.seed for e in manifest.models}})
            (out / "transfer.csv").write_text(m.to_csv())
            curve = io.StringIO()
            w = csv.writer(curve, lineterminator="\n")
            w.writerow(["attack", "target", "iteration", "asr"])
            for name, tgt, t, v in asr_curve_rows(advs, models, manifest.targets):
                w.writerow([name, tgt, t, f"{v:.4f}"])
            curve.write(f"# manifest={h}\n")
            (out / "asr_curve.csv").write_text(curve.getvalue())
            return m

        matrix = steps.run("evaluate", evaluate)
        artifacts["transfer"] = str(out / "transfer.csv")
        artifacts["asr_curve"] = str(out / "asr_curve.csv")
        summary["transfer_wall_time"] = matrix.wall_time

        if "gini" in manifest.analyses:
            def gini():
                k = min(GINI_SAMPLES, len(batch))
                rep = {}
                for name, adv in advs.items():
                    imps = [analysis.importance_first_order(sg, sp, adv.x_adv[i], adv.y_tar[i])
                            for i in range(k)]
                    rep[name] = analysis.mean_gini_report(sg, sp, imps).to_dict()
                return {"manifest_hash": h, "n_examples": k, "reports": rep}
            _write_json(out / "gini.json", steps.run("analysis:gini", gini))
            artifacts["gini"] = str(out / "gini.json")

        if "variants" in manifest.analyses:
            def variants():
                plans = [a.config.mask_plan for a in manifest.attacks if a.config.mask_plan]
                plan = plans[0] if plans else MaskPlan()
                st = analysis.variant_diversity_utility(sg, sp, plan, VARIANT_P_GRID, batch.images,
                                                        batch.labels, seed=manifest.seed)
                return {"manifest_hash": h, **asdict(st)}
            _write_json(out / "variants.json", steps.run("analysis:variants", variants))
            artifacts["variants"] = str(out / "variants.json")

        if "pilot" in manifest.analyses:
            def pilot():
                rep = {name: analysis.pilot_prune(sg, sp, adv.x_adv, adv.y_tar).to_dict()
                       for name, adv in advs.items()}
                return {"manifest_hash": h, "reports": rep}
            _write_json(out / "pilot.json", steps.run("analysis:pilot", pilot))
            artifacts["pilot"] = str(out / "pilot.json")

        summary["status"] = "ok"
        summary["partial"] = False
    except ExperimentError as e:
        summary.update(status="failed", failed_step=e.step, error=str(e), partial=True)
        raise
    finally:
        summary["step_seconds"] = steps.timings
        summary["wall_time"] = round(time.perf_counter() - t_start, 3)
        if out.exists() or summary["status"] == "ok":
            out.mkdir(parents=True, exist_ok=True)
            _write_json(out / "run_summary.json", summary)
            artifacts["summary"] = str(out / "run_summary.json")
    return artifacts


def reevaluate(manifest: RunManifest) -> TransferMatrix:
    """Rebuild the transfer matrix from the saved checkpoints and adversarial batches."""
    out = Path(manifest.out_dir)
    models = {}
    for e in manifest.models:
        params = nets.load_checkpoint(out / "models" / f"{e.name}.rpac")
        models[e.name] = (nets.build_model(e.preset), params)
    advs = {a.name: attacks.load_advbatch(out / "adv" / f"{a.name}.rpab") for a in manifest.attacks}
    return transfer_matrix(advs, models, manifest.targets, manifest.surrogate, manifest.digest())
