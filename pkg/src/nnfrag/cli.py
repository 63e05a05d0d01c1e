"""Command-line interface.

Perturbation budgets (--eps, --alpha) are given in 1/255 units, i.e. raw
8-bit pixel steps; inputs are stored in [0, 1] so ``--eps 8`` means 8/255.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, analysis, attacks, engine, harness, influence, interpret, metrics

log = logging.getLogger("nnfrag")


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _out(args, default):
    return Path(args.out) if getattr(args, "out", None) else Path(default)


def _load_model(path):
    return engine.load_checkpoint(path)


def _test_set(args):
    _, test = harness.load_dataset(args.dataset, args.data, args.seed)
    return test


# --------------------------------------------------------------------------
# subcommands

def cmd_train(args):
    train, test = harness.load_dataset(args.dataset, args.data, args.seed)
    path = _out(args, "model.ckpt")
    if path.suffix == "" or path.is_dir():
        path = path / "model.ckpt"
    path.parent.mkdir(parents=True, exist_ok=True)
    if args.task == "influence":
        task = harness.influence_task(train, test, seed=args.seed, epochs=args.epochs)
        model, test = task.model, task.test
    else:
        model = engine.preset(args.preset, seed=args.seed, num_classes=int(train.labels.max()) + 1,
                              input_shape=train.images.shape[1:])
        if args.softplus:
            model = model.smooth(args.softplus)
        cfg = engine.TrainConfig(epochs=args.epochs, learning_rate=args.lr, batch_size=args.batch_size,
                                 seed=args.seed, optimizer=args.optimizer, weight_decay=args.weight_decay)
        model = engine.train(model, train.images, train.labels, cfg)
    engine.save_checkpoint(model, path)
    acc = engine.accuracy(model, test.images, test.labels)
    print(f"{path}\ttest_accuracy={acc:.4f}")
    return 0


def _mask(args, shape):
    if not args.mask:
        return None
    pix = interpret.read_pgm(args.mask)
    if pix.shape != tuple(shape[-2:]):
        raise SystemExit(f"mask is {pix.shape}, images are {tuple(shape[-2:])}")
    return (pix > 127).astype(np.float64)


def cmd_attack(args):
    model = _load_model(args.model)
    train, test = harness.load_dataset(args.dataset, args.data, args.seed)
    ref = harness.reference_for(args.reference, train, model.input_shape)
    out = _out(args, "attack_out")
    (out / "saliency").mkdir(parents=True, exist_ok=True)
    mask = _mask(args, model.input_shape)
    ids = args.images or harness.select_images(model, test, args.n, args.seed)
    rows = []
    for i in ids:
        x = test.images[i]
        cfg = attacks.AttackConfig(args.kind, args.eps / 255, args.alpha / 255, args.iters, args.seed ^ i,
                                   args.method, args.k, mask, args.M, ref, args.beta)
        r = attacks.iterative_attack(model, x, cfg)
        rows.append({"image_id": i, "method": cfg.saliency_method, "attack": cfg.kind, "epsilon": cfg.epsilon,
                     "rank_corr": r.metrics.rank_correlation, "top_k": r.metrics.topk_intersection,
                     "k": r.metrics.k, "center_shift": r.metrics.center_shift,
                     "pred_preserved": r.prediction_preserved})
        stem = f"img{i:05d}_{cfg.saliency_method}_{cfg.kind}"
        interpret.write_pgm(out / "saliency" / f"{stem}_before.pgm", r.saliency_before.values)
        interpret.write_pgm(out / "saliency" / f"{stem}_after.pgm", r.saliency_after.values)
        np.save(out / f"{stem}_adv.npy", r.x_adv)
        log.info("image %d: rank %.3f top-k %.3f preserved %s", i, r.metrics.rank_correlation,
                 r.metrics.topk_intersection, r.prediction_preserved)
    harness.write_rows(out / "attack.csv", harness.ROW_FIELDS, rows)
    print(out / "attack.csv")
    return 0


def cmd_influence_attack(args):
    model = _load_model(args.model)
    if model.num_classes != 2:
        raise SystemExit("influence-attack expects the two-class frozen-feature model (train --task influence)")
    from . import data
    pair = tuple(args.pair)
    train = harness.binary_subset(data.load_mnist(harness.mnist_dir(args.train), "train"), pair)
    test = harness.binary_subset(data.load_mnist(harness.mnist_dir(args.test), "test"), pair)
    cache = influence.InfluenceCache(model, train.images, train.labels, args.damping)
    out = _out(args, "influence_out")
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    for i in harness.select_images(model, test, args.n, args.seed):
        z = (test.images[i], int(test.labels[i]))
        res = influence.influence_attack_eval(model, None, z, args.eps / 255, args.seed ^ i, args.top_m,
                                              cache=cache)
        rb = np.empty(len(res.before), dtype=np.int64)
        rb[np.argsort(-res.before, kind="stable")] = np.arange(1, len(rb) + 1)
        ra = np.empty_like(rb)
        ra[np.argsort(-res.after_gradient, kind="stable")] = np.arange(1, len(ra) + 1)
        per = [{"train_index": j, "influence_before": res.before[j], "influence_after": res.after_gradient[j],
                "rank_before": rb[j], "rank_after": ra[j]} for j in range(len(rb))]
        harness.write_rows(out / f"influence_img{i:05d}.csv",
                           ["train_index", "influence_before", "influence_after", "rank_before", "rank_after"], per)
        for kind, rep, ok in (("gradient_sign", res.gradient, res.gradient_preserved),
                              ("random_sign", res.random, res.random_preserved)):
            summary.append({"image_id": i, "attack": kind, "epsilon": args.eps / 255,
                            "rank_corr": rep.rank_correlation, "top_k": rep.topk_intersection,
                            "pred_preserved": ok})
    harness.write_rows(out / "influence_summary.csv",
                       ["image_id", "attack", "epsilon", "rank_corr", "top_k", "pred_preserved"], summary)
    print(out / "influence_summary.csv")
    return 0


def _read_map(path, shape=None):
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return interpret.read_pgm(path).astype(np.float64)
    vals = np.loadtxt(path, delimiter=",", skiprows=1, usecols=1, ndmin=1)
    return vals.reshape(shape) if shape else vals


def cmd_metrics(args):
    shape = tuple(_ints(args.shape)) if args.shape else None
    a, b = _read_map(args.before, shape), _read_map(args.after, shape)
    k = args.k or attacks.default_k(a.shape)
    if a.ndim == 1:
        rho = metrics.spearman(a, b)
        top = metrics.topk_intersection(a, b, k)
        line = f"{rho:.9g},{top:.9g},{k},"
    else:
        rep = metrics.compare(a, b, k)
        line = f"{rep.rank_correlation:.9g},{rep.topk_intersection:.9g},{rep.k},{rep.center_shift:.9g}"
    text = "rank_corr,top_k,k,center_shift\n" + line + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_analyze(args):
    if args.what == "scaling":
        out = _out(args, "scaling.csv")
        res = analysis.dimension_scaling_experiment(_ints(args.dims), args.trials, args.seed,
                                                    args.eps / 255, beta=args.beta or 1.0, out=out)
        dims, means = res.means()
        for d, m in zip(dims, means):
            print(f"d={d}\tmean={m:.6g}")
        print(f"slope={res.slope:.4f}\tmax_p={max(res.p_values):.3g}")
        return 0
    if not args.model:
        raise SystemExit(f"analyze {args.what} needs --model")
    model = _load_model(args.model)
    beta = args.beta or model.beta
    smooth = model.smooth(beta)
    if args.what == "lipschitz":
        print(f"bound={analysis.lipschitz_interpretation_bound(smooth):.9g}\tbeta={beta:g}")
        return 0
    test = _test_set(args)
    ids = harness.select_images(model, test, min(args.n, len(test)), args.seed)
    pairs = analysis.attack_angles(smooth, test.images[ids], seed=args.seed)
    angles = [p.angle_deg for p in pairs]
    out = _out(args, "angles.csv")
    analysis.write_angles_csv(out, angles)
    print(f"{out}\tn={len(angles)}\tmedian={np.median(angles):.3f} deg")
    return 0


def cmd_campaign(args):
    over = {
        "dataset": args.dataset, "model_preset": args.preset, "n_images": args.n_images,
        "attacks": args.attacks.split(",") if args.attacks else None,
        "methods": args.methods.split(",") if args.methods else None,
        "epsilons": [e / 255 for e in _floats(args.eps)] if args.eps else None,
        "P": args.iters, "k": args.k, "M": args.M, "checkpoint": args.model, "data_dir": args.data,
        "output_dir": args.out, "threads": args.threads, "n_angles": args.angles,
    }
    if args.seed_given:
        over["seed"] = args.seed
    if args.config:
        spec = harness.ExperimentSpec.from_file(args.config, **over)
    else:
        spec = harness.ExperimentSpec(**{k: v for k, v in over.items() if v is not None})
    m = harness.run_campaign(spec, resume=not args.fresh)
    print(Path(spec.output_dir) / "report.txt")
    print((Path(spec.output_dir) / "report.txt").read_text(), end="")
    return 0 if m.rows else 1


def cmd_report(args):
    d = args.manifest or args.out
    if not d:
        raise SystemExit("report needs --manifest DIR")
    m = harness.load_manifest(d)
    out = harness.emit_report(m)
    print(out / "report.txt")
    return 0


# --------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (default 0)")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads for campaigns")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="nnfrag", parents=[common], description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"nnfrag {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def data_opts(sp):
        sp.add_argument("--dataset", default="mnist", choices=["mnist", "cifar10", "synthetic"])
        sp.add_argument("--data", help="dataset directory (default $NNFRAG_DATA or the bundled MNIST sample)")

    sp = sub.add_parser("train", parents=[common], help="train a model preset and write a checkpoint")
    data_opts(sp)
    sp.add_argument("--preset", default="mlp_small", choices=sorted(engine.PRESETS))
    sp.add_argument("--task", default="classify", choices=["classify", "influence"],
                    help="influence: frozen cnn_mnist features with a 3-vs-8 head")
    sp.add_argument("--epochs", type=int, default=harness.DEFAULT_EPOCHS)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--batch-size", type=int, default=64)
    sp.add_argument("--optimizer", default="adam", choices=["adam", "sgd"])
    sp.add_argument("--weight-decay", type=float, default=0.0)
    sp.add_argument("--softplus", type=float, metavar="BETA", help="train with softplus(BETA) activations")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("attack", parents=[common], help="attack saliency maps of test images",
                        description="--eps and --alpha are in 1/255 units (--eps 8 is 8/255).")
    data_opts(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--method", default="sg", choices=["sg", "ig", "dl"])
    sp.add_argument("--kind", default="topk", choices=sorted(attacks.SHORT_KINDS))
    sp.add_argument("--eps", type=float, default=8.0, help="L-inf budget in 1/255 units")
    sp.add_argument("--alpha", type=float, default=0.5, help="step size in 1/255 units")
    sp.add_argument("--iters", type=int, default=300)
    sp.add_argument("--k", type=int)
    sp.add_argument("--mask", help="PGM with 0/255 values selecting the target region")
    sp.add_argument("--n", type=int, default=1, help="number of correctly classified test images")
    sp.add_argument("--images", type=_ints, help="explicit comma-separated test indices")
    sp.add_argument("--M", type=int, default=interpret.DEFAULT_M)
    sp.add_argument("--beta", type=float, help="softplus surrogate beta")
    sp.add_argument("--reference", default="pixelwise_mean", choices=["zeros", "pixelwise_mean", "channelwise_mean"])
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("influence-attack", parents=[common], help="perturb test points to move influence rankings")
    sp.add_argument("--model", required=True)
    sp.add_argument("--train", help="MNIST directory with the training files")
    sp.add_argument("--test", help="MNIST directory with the test files")
    sp.add_argument("--eps", type=float, default=8.0, help="L-inf budget in 1/255 units")
    sp.add_argument("--top-m", type=int, default=influence.DEFAULT_TOP_M)
    sp.add_argument("--n", type=int, default=10)
    sp.add_argument("--damping", type=float, default=influence.DEFAULT_DAMPING)
    sp.add_argument("--pair", type=int, nargs=2, default=list(harness.INFLUENCE_PAIR))
    sp.set_defaults(func=cmd_influence_attack)

    sp = sub.add_parser("metrics", parents=[common], help="compare two saliency maps (PGM or index,value CSV)")
    sp.add_argument("--before", required=True)
    sp.add_argument("--after", required=True)
    sp.add_argument("--k", type=int)
    sp.add_argument("--shape", help="H,W for CSV maps (enables center shift)")
    sp.set_defaults(func=cmd_metrics)

    sp = sub.add_parser("analyze", parents=[common], help="geometric analyses")
    sp.add_argument("what", choices=["angles", "lipschitz", "scaling"])
    data_opts(sp)
    sp.add_argument("--model")
    sp.add_argument("--n", type=int, default=1000)
    sp.add_argument("--beta", type=float)
    sp.add_argument("--dims", default="10,100,1000,10000")
    sp.add_argument("--trials", type=int, default=100)
    sp.add_argument("--eps", type=float, default=8.0, help="in 1/255 units")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("campaign", parents=[common], help="run an attack campaign from a key=value config")
    sp.add_argument("--config")
    sp.add_argument("--dataset", choices=["mnist", "cifar10", "synthetic"])
    sp.add_argument("--data")
    sp.add_argument("--preset", choices=sorted(engine.PRESETS))
    sp.add_argument("--model", help="checkpoint (otherwise the preset is trained)")
    sp.add_argument("--n-images", type=int)
    sp.add_argument("--attacks", help="comma list, e.g. random_sign,top_k,mass_center")
    sp.add_argument("--methods", help="comma list, e.g. sg,ig,dl")
    sp.add_argument("--eps", help="comma list in 1/255 units")
    sp.add_argument("--iters", type=int)
    sp.add_argument("--k", type=int)
    sp.add_argument("--M", type=int)
    sp.add_argument("--angles", type=int, help="also compute attack-direction angles on this many images")
    sp.add_argument("--fresh", action="store_true", help="ignore partial results of an earlier run")
    sp.set_defaults(func=cmd_campaign)

    sp = sub.add_parser("report", parents=[common], help="rewrite report files from a campaign directory")
    sp.add_argument("--manifest", help="campaign output directory")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    args.seed_given = hasattr(args, "seed")
    for name, default in (("seed", 0), ("threads", None), ("out", None), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, ArithmeticError) as e:
        print(f"nnfrag: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
