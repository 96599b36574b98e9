"""Command-line interface: ``stjem {train,eval,sample,denoise,combine,oracle-check}``.

Exit codes: 0 success, 1 invalid input or usage (also a failed oracle
check), 2 training failed after the maximum number of rollbacks.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import data as datamod
from . import energy_net
from .combiner import ModelEnsemble, evaluate_combination, prior_from_labels, write_comparison_csv
from .exceptions import DimensionError, FormatError, InvalidArgumentError, ResourceLimitError, \
    SamplerDivergenceError, TrainingFailedError
from .oracle import run_oracle_checks
from .sgld import SgldConfig, denoise, run_chain
from .trainer import evaluate, train

EXIT_OK, EXIT_INVALID, EXIT_TRAIN_FAILED = 0, 1, 2
IMAGE_SIZE = 256
CLASS_COLORS = np.array([
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40), (148, 103, 189),
    (140, 86, 75), (227, 119, 194), (127, 127, 127), (188, 189, 34), (23, 190, 207),
], dtype=np.uint8)

log = logging.getLogger("stjem")


class _Parser(argparse.ArgumentParser):
    """argparse that exits with status 1 on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_dataset(dc):
    """Dataset described by a :class:`~stjem.config.DataConfig`."""
    makers = {
        "two_moons": lambda: datamod.make_two_moons(dc.n, dc.noise_sd, dc.seed),
        "gmm": lambda: datamod.make_gmm(dc.n, seed=dc.seed),
        "ring": lambda: datamod.make_ring(dc.n, seed=dc.seed),
        "two_mode_1d": lambda: datamod.make_two_mode_1d(dc.n, seed=dc.seed),
        "csv": lambda: datamod.load_csv(dc.path),
    }
    if dc.name not in makers:
        raise InvalidArgumentError(f"unknown dataset {dc.name!r}; choose from {sorted(makers)}")
    if dc.name == "csv" and not dc.path:
        raise InvalidArgumentError("data.name = csv needs data.path")
    ds = makers[dc.name]()
    if dc.label_noise > 0:
        ds = datamod.flip_labels(ds, dc.label_noise, dc.seed)
    return ds


def _threads(n):
    if n <= 0:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _sgld_from_args(args, n_steps_default):
    return SgldConfig(step_size=args.step_size, noise_scale=args.noise_scale,
                      n_steps=args.steps or n_steps_default, init="uniform")


def write_samples_csv(xs, classes, path):
    ds = datamod.Dataset(xs, np.maximum(classes, 0), classes >= 0,
                         n_classes=int(max(classes.max(), 0)) + 1)
    datamod.dump_csv(ds, path)


def write_ppm_scatter(xs, classes, path, lim=1.2, size=IMAGE_SIZE):
    """Binary P6 scatter of 2-D points over ``[-lim, lim]^2``; one colour per class."""
    img = np.full((size, size, 3), 255, dtype=np.uint8)
    mid = size // 2
    img[mid, :] = img[:, mid] = 220
    px = np.clip(((xs[:, 0] + lim) / (2 * lim) * (size - 1)).round().astype(int), 0, size - 1)
    py = np.clip(((lim - xs[:, 1]) / (2 * lim) * (size - 1)).round().astype(int), 0, size - 1)
    colors = CLASS_COLORS[np.maximum(classes, 0) % len(CLASS_COLORS)]
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            img[np.clip(py + dy, 0, size - 1), np.clip(px + dx, 0, size - 1)] = colors
    with open(path, "wb") as fh:
        fh.write(f"P6\n{size} {size}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


# --- subcommands ---------------------------------------------------------------

def cmd_train(args):
    file_values = cfgmod.load_file(args.config) if args.config else {}
    cli_values = dict(cfgmod.parse_text("\n".join(args.set or []), "--set"))
    if args.seed is not None:
        cli_values["seed"] = args.seed
    if args.data:
        cli_values.update({"data.name": "csv", "data.path": args.data})
    run = cfgmod.build(file_values, cfgmod.env_overrides(), cli_values)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = build_dataset(run.data)
    train_ds, test_ds = ds, None
    if run.data.test_fraction > 0 and run.data.name != "csv":
        train_ds, test_ds = datamod.train_test_split(ds, run.data.test_fraction, run.data.seed)
    if run.data.keep_labels >= 0:
        train_ds = datamod.mask_labels(train_ds, run.data.keep_labels, run.data.seed)
    datamod.dump_csv(train_ds, out / "train.csv")
    if test_ds is not None:
        datamod.dump_csv(test_ds, out / "test.csv")
    (out / "config.cfg").write_text(cfgmod.dump_text(run))
    with _threads(run.threads):
        try:
            net, trainlog = train(run.train, train_ds, eval_data=test_ds, checkpoint_dir=out)
        except TrainingFailedError as exc:
            exc.log.to_csv(out / "metrics.csv")
            print(f"training failed: {exc}", file=sys.stderr)
            return EXIT_TRAIN_FAILED
    trainlog.to_csv(out / "metrics.csv")
    _write_evals(trainlog.evals, out / "evals.csv")
    last = trainlog.evals[-1]
    print(f"accuracy={last['accuracy']:.4f} ece={last['ece']:.4f} xent={last['xent']:.4f} "
          f"rollbacks={trainlog.rollbacks}")
    return EXIT_OK


def _write_evals(evals, path):
    cols = ("epoch", "step", "accuracy", "ece", "xent", "mi", "mean_log_post", "marginal_entropy")
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for e in evals:
            fh.write(",".join(str(e[c]) if isinstance(e[c], int) else repr(float(e[c])) for c in cols) + "\n")


def cmd_eval(args):
    net = energy_net.load(args.checkpoint)
    ds = datamod.load_csv(args.data)
    if ds.dx != net.dx:
        raise DimensionError(f"data has {ds.dx} features, network expects {net.dx}")
    acc, e, xent = evaluate(net, ds, n_bins=args.bins)
    print(f"accuracy={acc:.6f} ece={e:.6f} xent={xent:.6f}")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("accuracy,ece,xent\n")
            fh.write(f"{acc!r},{e!r},{xent!r}\n")
    return EXIT_OK


def cmd_sample(args):
    net = energy_net.load(args.checkpoint)
    if args.cls is not None and not 0 <= args.cls < net.dy:
        raise InvalidArgumentError(f"--class must be in [0, {net.dy})")
    if args.n < 1:
        raise InvalidArgumentError("--n must be >= 1")
    rng = np.random.default_rng([args.seed, 5])
    head = "marginal" if args.cls is None else args.cls
    xs, diag = run_chain(net, _sgld_from_args(args, 100), rng=rng, n=args.n, head=head)
    classes = np.full(args.n, -1 if args.cls is None else args.cls)
    if args.cls is None:
        classes = np.argmax(net.forward(xs), axis=1)
    write_samples_csv(xs, classes, args.out)
    if args.diagnostics:
        diag.to_csv(args.diagnostics)
    if net.dx == 2:
        image = args.image or str(Path(args.out).with_suffix(".ppm"))
        write_ppm_scatter(xs, classes, image)
    print(f"wrote {args.n} samples to {args.out}")
    return EXIT_OK


def cmd_denoise(args):
    net = energy_net.load(args.checkpoint)
    ds = datamod.load_csv(args.data, datamod.DatasetSchema(require_labels=False))
    if ds.dx != net.dx:
        raise DimensionError(f"data has {ds.dx} features, network expects {net.dx}")
    head = "marginal" if args.cls is None else args.cls
    cfg = SgldConfig(step_size=args.step_size, noise_scale=0.0, n_steps=args.steps or 100)
    out, _ = denoise(net, ds.xs, cfg, head=head)
    with open(args.out, "w") as fh:
        d = ds.dx
        fh.write(",".join([f"before_x{i}" for i in range(d)] + [f"after_x{i}" for i in range(d)]) + "\n")
        for a, b in zip(ds.xs, out):
            fh.write(",".join(format(float(v), ".17g") for v in np.concatenate([a, b])) + "\n")
    print(f"denoised {len(ds)} rows into {args.out}")
    return EXIT_OK


def cmd_combine(args):
    members = [energy_net.load(p) for p in args.checkpoints]
    datasets = [datamod.load_csv(p) for p in args.data]
    prior = None
    if args.prior_from:
        src = datamod.load_csv(args.prior_from).labeled()
        prior = prior_from_labels(src.ys, members[0].dy)
    ens = ModelEnsemble(members, prior)
    names = [Path(p).stem for p in args.data]
    rows = evaluate_combination(ens, datasets, names)
    write_comparison_csv(rows, args.out)
    for r in rows:
        print(f"{r['dataset']:>12} {r['model_id']:>10} accuracy={r['accuracy']:.4f} ece={r['ece']:.4f}")
    return EXIT_OK


def cmd_oracle_check(args):
    if args.checkpoint:
        net = energy_net.load(args.checkpoint)
    else:
        net = energy_net.init((args.dims, 16, 16, args.classes), "swish", args.seed)
    results = run_oracle_checks(net, grid_points=args.grid, seed=args.seed, n_samples=args.samples)
    ok = True
    for name, passed, detail in results:
        print(f"{'PASS' if passed else 'FAIL'} {name} {detail}")
        ok &= bool(passed)
    return EXIT_OK if ok else EXIT_INVALID


def build_parser():
    p = _Parser(prog="stjem", description="Stabilized joint energy model training and tools.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model; writes checkpoint, metrics and datasets")
    t.add_argument("--config", help="flat key = value config file")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", type=int)
    t.add_argument("--data", help="dataset CSV (overrides data.name)")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy, ECE and cross-entropy on a labeled CSV")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--bins", type=int, default=15)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    def sampler_flags(sp, step):
        sp.add_argument("--steps", type=int)
        sp.add_argument("--step-size", type=float, default=step)

    s = sub.add_parser("sample", help="draw SGLD samples from uniform starts")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--class", dest="cls", type=int)
    s.add_argument("--noise-scale", type=float, default=0.01)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="samples.csv")
    s.add_argument("--image", help="P6 scatter path for 2-D models (default: next to --out)")
    s.add_argument("--diagnostics", help="per-step chain energy CSV")
    sampler_flags(s, 1.0)
    s.set_defaults(func=cmd_sample)

    d = sub.add_parser("denoise", help="greedy noise-free ascent on corrupted inputs")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--class", dest="cls", type=int)
    d.add_argument("--out", default="denoised.csv")
    sampler_flags(d, 1.0)
    d.set_defaults(func=cmd_denoise)

    c = sub.add_parser("combine", help="compare members with their likelihood-weighted combination")
    c.add_argument("--checkpoints", nargs="+", required=True)
    c.add_argument("--data", nargs="+", required=True)
    c.add_argument("--prior-from", help="labeled CSV used to estimate the class prior")
    c.add_argument("--out", default="comparison.csv")
    c.set_defaults(func=cmd_combine)

    o = sub.add_parser("oracle-check", help="exact-grid checks of the sampled estimators")
    o.add_argument("--checkpoint")
    o.add_argument("--grid", type=int, default=512)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--dims", type=int, default=1, choices=(1, 2))
    o.add_argument("--classes", type=int, default=2)
    o.add_argument("--samples", type=int, default=10_000)
    o.set_defaults(func=cmd_oracle_check)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InvalidArgumentError, FormatError, ResourceLimitError, SamplerDivergenceError,
            FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
