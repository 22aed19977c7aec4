"""Command-line entry point (``rapa``).

Results are printed as JSON on stdout.  Failures print one JSON object with an
``error`` key on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import analysis, attacks, data, harness, nets
from .attacks import AttackConfig, TransformSpec
from .masking import MaskPlan


class CLIError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(f"{self.prog}: {message}")


def fraction(text: str) -> float:
    """Accepts ``0.0627``, ``16/255`` and the like."""
    try:
        return float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError) as e:
        raise argparse.ArgumentTypeError(f"not a number or fraction: {text!r}") from e


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True, default=harness._json_default))


def _out_dir(args) -> Path:
    p = Path(args.out_dir or ".")
    p.mkdir(parents=True, exist_ok=True)
    return p


# -- attack options ----------------------------------------------------------------

def _add_attack_flags(p):
    p.add_argument("--eps", type=fraction, default=Fraction(16, 255))
    p.add_argument("--alpha", type=fraction, default=Fraction(2, 255))
    p.add_argument("--T", type=int, default=300, help="iterations")
    p.add_argument("--S", type=int, default=5, help="inferences per iteration")
    p.add_argument("--mu", type=float, default=1.0)
    p.add_argument("--loss", choices=("logit", "ce"), default="logit")
    p.add_argument("--transform", choices=("identity", "di", "rdi", "si"), default="identity")
    p.add_argument("--ti-kernel", type=int, default=0, help="0 disables TI smoothing")
    p.add_argument("--mask-p", type=float, default=0.0, help="0 disables parameter masking")
    p.add_argument("--mask-layers", default="dense,norm")


def attack_config(args) -> AttackConfig:
    plan = MaskPlan.from_layers(args.mask_layers, args.mask_p) if args.mask_p > 0 else None
    cfg = AttackConfig(eps=float(args.eps), alpha=float(args.alpha), steps=args.T,
                       inferences=args.S, mu=args.mu,
                       loss="cross_entropy" if args.loss == "ce" else "logit",
                       transform=TransformSpec(args.transform), ti_kernel_size=args.ti_kernel,
                       mask_plan=plan, seed=args.seed)
    cfg.validate()
    return cfg


def _model(path):
    params = nets.load_checkpoint(path)
    return nets.graph_of(params), params


# -- subcommands -------------------------------------------------------------------

def cmd_gen_data(args):
    out = _out_dir(args)
    train, test = data.default_splits(args.seed, args.noise, args.translation, args.contrast,
                                      args.background, args.train_per_class, args.test_per_class)
    data.save_dataset(train, out / "train.rpds")
    data.save_dataset(test, out / "test.rpds")
    return {"train": str(out / "train.rpds"), "test": str(out / "test.rpds"),
            "n_train": len(train), "n_test": len(test)}


def cmd_train(args):
    out = _out_dir(args)
    train_set = data.load_dataset(args.data)
    test_set = data.load_dataset(args.test) if args.test else None
    graph = nets.build_model(args.preset)
    hyper = nets.TrainHyper(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed)
    params, metrics = nets.train(graph, nets.init_params(graph, args.seed), train_set, hyper, test_set)
    path = out / f"{args.name or args.preset}.rpac"
    nets.save_checkpoint(params, path)
    return {"checkpoint": str(path), "train_accuracy": metrics.train_accuracy,
            "test_accuracy": metrics.test_accuracy}


def cmd_attack(args):
    out = _out_dir(args)
    graph, params = _model(args.model)
    ds = data.load_dataset(args.data)
    n = min(args.n, len(ds)) if args.n else len(ds)
    batch = ds.subset(np.arange(n))
    if batch.targets is None:
        batch = data.assign_targets(batch, args.target_rule, args.seed)
    cfg = attack_config(args)
    adv = attacks.run_attack(graph, params, batch, cfg, workers=args.threads)
    path = out / f"{args.name}.rpab"
    attacks.save_advbatch(adv, path, {"attack": args.name})
    return {"adv": str(path), "white_box_asr": harness.evaluate_asr(adv, graph, params),
            "config": cfg.to_dict()}


def cmd_evaluate(args):
    models = {Path(p).stem: _model(p) for p in args.models}
    advs = {Path(p).stem: attacks.load_advbatch(p) for p in args.adv}
    surrogate = args.surrogate or next(iter(models))
    m = harness.transfer_matrix(advs, models, list(models), surrogate)
    text = m.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return None


def _adv_and_model(args):
    graph, params = _model(args.model)
    adv = attacks.load_advbatch(args.adv)
    return graph, params, adv


def cmd_importance(args):
    graph, params, adv = _adv_and_model(args)
    i = args.index
    x, yt = adv.x_adv[i], adv.y_tar[i]
    if args.method == "first_order":
        imp = analysis.importance_first_order(graph, params, x, yt, args.loss)
    else:
        idx = None
        if args.subset:
            idx = np.sort(np.random.default_rng(args.seed).choice(params.n_trainable, args.subset,
                                                                   replace=False))
        imp = analysis.importance_hessian_fd(graph, params, x, yt, args.loss, args.h, idx)
    top = np.argsort(-imp.values, kind="stable")[:args.top]
    ids = top if imp.indices is None else imp.indices[top]
    return {"method": imp.method, "n": int(imp.values.size),
            "top": [{"index": int(j), "value": float(imp.values[k])} for j, k in zip(ids, top)]}


def cmd_gini(args):
    graph, params, adv = _adv_and_model(args)
    k = min(args.n, len(adv))
    imps = [analysis.importance_first_order(graph, params, adv.x_adv[i], adv.y_tar[i], args.loss)
            for i in range(k)]
    return {"n_examples": k, **analysis.mean_gini_report(graph, params, imps).to_dict()}


def cmd_taylor(args):
    a = [float(v) for v in args.a.split(",")]
    theta = [float(v) for v in args.theta.split(",")]
    graph, params, f, g, H = analysis.synthetic_quadratic(a, theta)
    mean, se = analysis.expected_masked_loss_mc(graph, params, MaskPlan(p_w=args.p), f, args.draws,
                                                args.seed)
    base = f(params)
    paper = base + analysis.taylor_penalty(theta, g, H, args.p, "paper")
    exact = base + analysis.taylor_penalty(theta, g, H, args.p, "exact_moment")
    return {"loss": base, "mc_mean": mean, "mc_stderr": se, "paper_form": paper,
            "exact_moment_form": exact, "paper_gap": paper - exact}


def cmd_variants(args):
    graph, params = _model(args.model)
    ds = data.load_dataset(args.data)
    n = min(args.n, len(ds))
    grid = [float(v) for v in args.p_grid.split(",")]
    plan = MaskPlan.from_layers(args.mask_layers, grid[0])
    st = analysis.variant_diversity_utility(graph, params, plan, grid, ds.images[:n], ds.labels[:n],
                                            args.variants, args.seed)
    return asdict(st)


def cmd_pilot(args):
    graph, params, adv = _adv_and_model(args)
    return analysis.pilot_prune(graph, params, adv.x_adv, adv.y_tar, args.fraction, args.loss).to_dict()


def cmd_run(args):
    if args.manifest == "baseline_vs_rapa":
        manifest = harness.reference_manifest(args.out_dir or ".", args.seed)
    else:
        manifest = harness.RunManifest.load(args.manifest)
        if args.out_dir:
            manifest.out_dir = args.out_dir
    manifest.workers = args.threads
    arts = harness.run_experiment(manifest)
    return {"manifest_hash": manifest.digest(), "artifacts": arts}


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", help="output directory (default: current directory)")
    common.add_argument("--threads", type=int, default=1)

    p = _Parser(prog="rapa", description="Targeted transfer attacks with random parameter masking "
                                         "on a synthetic glyph dataset.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="generate train/test ShapeSet files")
    d = data.DEFAULT_DATA
    g.add_argument("--noise", type=float, default=d["noise"])
    g.add_argument("--translation", type=int, default=d["max_translation"])
    g.add_argument("--contrast", type=float, default=d["contrast"])
    g.add_argument("--background", type=float, default=d["background"])
    g.add_argument("--train-per-class", type=int, default=d["train_per_class"])
    g.add_argument("--test-per-class", type=int, default=d["test_per_class"])
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train a preset model")
    t.add_argument("--preset", choices=sorted(nets.PRESETS), required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--test")
    t.add_argument("--name")
    t.add_argument("--epochs", type=int, default=nets.TrainHyper.epochs)
    t.add_argument("--lr", type=float, default=nets.TrainHyper.lr)
    t.add_argument("--batch-size", type=int, default=nets.TrainHyper.batch_size)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("attack", parents=[common], help="craft adversarial examples on a surrogate")
    a.add_argument("--model", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--n", type=int, default=harness.DEFAULT_SAMPLES)
    a.add_argument("--target-rule", choices=("next_class", "random_excluding_true"),
                   default="random_excluding_true")
    a.add_argument("--name", default="adv")
    _add_attack_flags(a)
    a.set_defaults(func=cmd_attack)

    e = sub.add_parser("evaluate", parents=[common], help="transfer matrix as CSV")
    e.add_argument("--adv", nargs="+", required=True)
    e.add_argument("--models", nargs="+", required=True)
    e.add_argument("--surrogate", help="model name (file stem) flagged as white-box")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    an = sub.add_parser("analyze", help="importance, Gini, Taylor and variant analyses")
    asub = an.add_subparsers(dest="analysis", required=True, parser_class=_Parser)
    for name, fn in (("importance", cmd_importance), ("gini", cmd_gini)):
        q = asub.add_parser(name, parents=[common])
        q.add_argument("--model", required=True)
        q.add_argument("--adv", required=True)
        q.add_argument("--loss", choices=("logit", "cross_entropy"), default="logit")
        q.set_defaults(func=fn)
        if name == "importance":
            q.add_argument("--index", type=int, default=0)
            q.add_argument("--method", choices=("first_order", "hessian_fd"), default="first_order")
            q.add_argument("--h", type=float, default=1e-3)
            q.add_argument("--subset", type=int, default=0, help="hessian_fd on a random index subset")
            q.add_argument("--top", type=int, default=10)
        else:
            q.add_argument("--n", type=int, default=harness.GINI_SAMPLES)
    q = asub.add_parser("taylor", parents=[common], help="masked-loss expectation on a quadratic")
    q.add_argument("--a", default="1,1")
    q.add_argument("--theta", default="1,2")
    q.add_argument("--p", type=float, default=0.1)
    q.add_argument("--draws", type=int, default=100_000)
    q.set_defaults(func=cmd_taylor)
    q = asub.add_parser("variants", parents=[common])
    q.add_argument("--model", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--n", type=int, default=harness.DEFAULT_SAMPLES)
    q.add_argument("--variants", type=int, default=8)
    q.add_argument("--p-grid", default=",".join(str(p) for p in harness.VARIANT_P_GRID))
    q.add_argument("--mask-layers", default="dense,norm")
    q.set_defaults(func=cmd_variants)

    pp = sub.add_parser("pilot-prune", parents=[common], help="prune by importance and re-check success")
    pp.add_argument("--model", required=True)
    pp.add_argument("--adv", required=True)
    pp.add_argument("--fraction", type=float, default=0.005)
    pp.add_argument("--loss", choices=("logit", "cross_entropy"), default="logit")
    pp.set_defaults(func=cmd_pilot)

    r = sub.add_parser("run", parents=[common], help="execute a manifest (or 'baseline_vs_rapa')")
    r.add_argument("manifest")
    r.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        result = args.func(args)
        if result is not None:
            _emit(result)
        return 0
    except CLIError as e:
        _error("usage", str(e))
        return 2
    except harness.ExperimentError as e:
        _error("step_failed", str(e), step=e.step)
        return 1
    except Exception as e:  # noqa: BLE001 - every failure becomes one error line
        _error(type(e).__name__, str(e))
        return 1


def _error(kind: str, message: str, **extra) -> None:
    print(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
