"""Command-line front end: train, scan, spectrum, mine and analyze.

Every command writes CSV data, a gnuplot ``.dat`` copy and a JSON manifest
echoing the resolved run configuration. File names carry the command, seed
and a UTC timestamp; file contents never do.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import math
import sys
import time
import traceback
from pathlib import Path

import numpy as np

from . import formats
from .analysis import delta_loss_distribution, mli_curve, quadratic_overlay
from .data import cifar10_paths, eval_loss, gen_blobs, load_dataset, read_cifar10
from .directions import (Direction, delta_direction, direction_bytes, gaussian_direction,
                         load_direction, neg_gradient_direction, normalize)
from .errors import LandscapeError
from .miner import VVV_DEFAULTS, WPEAK_DEFAULTS, MineConfig, mine_vvv, mine_wpeak
from .models import ModelSpec, Model
from .scan import scan_1d, scan_2d, uniform_grid
from .spectral import DEFAULT_EVAL_SAMPLES, HvpOperator, compute_spectrum, extremal_eigs
from .trainer import (Checkpoint, TrainConfig, checkpoint_bytes, load_checkpoint, save_checkpoint,
                      train)

COMMANDS = ("train", "scan1d", "scan2d", "spectrum", "mine-wpeak", "mine-vvv", "soa", "overlay")
DIRECTIONS = ("gaussian", "neggrad", "delta", "eigen", "mined")

CSV_COLUMNS = {
    "train": "history: epoch,train_loss,train_acc,eval_loss",
    "scan1d": "curve per direction: lambda,loss,accuracy",
    "scan2d": "surface: lambda1,lambda2,loss,accuracy",
    "spectrum": "eigenvalues: which,index,label,eigenvalue,residual; density: grid,density",
    "mine-wpeak": "objective: epoch,objective; curve: lambda,loss,accuracy",
    "mine-vvv": "objective: epoch,objective; curve: lambda,loss,accuracy",
    "soa": "one file per lambda: probe,a,b,delta_loss[,true_delta_loss]",
    "overlay": "one file per anchor: x,true_loss,quad_loss; mli: alpha,loss",
}


class ArgumentError(Exception):
    pass


# ---------------------------------------------------------------- parser

def _csv_floats(text):
    return tuple(float(t) for t in str(text).split(",") if t.strip())


def _csv_ints(text):
    return tuple(int(t) for t in str(text).split(",") if t.strip())


def _common(p):
    p.add_argument("--config", help="INI file whose keys mirror the long flags")
    p.add_argument("--out", default="runs", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-scale", action="store_true",
                   help="also emit a log10 copy of the losses (.dat only)")
    g = p.add_argument_group("data")
    g.add_argument("--data", default="blobs",
                   help="'blobs', 'cifar10' (read from $LM_DATA_DIR) or an LMDS file")
    g.add_argument("--data-dir", default=None)
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--per-class", type=int, default=500)
    g.add_argument("--dim", type=int, default=64)
    g.add_argument("--spread", type=float, default=0.3)
    g.add_argument("--data-seed", type=int, default=0)
    g.add_argument("--eval-samples", type=int, default=0,
                   help="evaluate losses on the first N samples (0: all)")


def _ckpt_args(p):
    p.add_argument("--ckpt", help="checkpoint at the base point")


def _grid_args(p, lo=-1.0, hi=1.0, points=41):
    p.add_argument("--points", type=int, default=points)
    p.add_argument("--range", type=float, default=None, help="symmetric range [-r, r]")
    p.add_argument("--range-lo", type=float, default=lo)
    p.add_argument("--range-hi", type=float, default=hi)
    p.add_argument("--bn-mode", choices=("UpBN", "NoUpBN"), default="UpBN")


def _direction_args(p):
    p.add_argument("--dir", choices=DIRECTIONS, default="gaussian")
    p.add_argument("--norm", choices=("auto", "none", "global", "layer", "filter"), default="auto",
                   help="auto: none for delta/mined, global otherwise")
    p.add_argument("--seeds", type=int, default=1, help="number of direction seeds")
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--ckpt-a")
    p.add_argument("--ckpt-b")
    p.add_argument("--direction", help="LMDR file for --dir mined")
    p.add_argument("--eig-which", choices=("SA", "LA"), default="SA")
    p.add_argument("--eig-index", type=int, default=1)
    p.add_argument("--grad-samples", type=int, default=1000)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="landscape", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def add(name, help_):
        p = sub.add_parser(name, help=help_, description=f"{help_}. CSV columns: {CSV_COLUMNS[name]}")
        _common(p)
        return p

    p = add("train", "train a classifier with SGD and save checkpoints")
    p.add_argument("--model", choices=("linear", "mlp", "convnet"), default="mlp")
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--channels", type=_csv_ints, default=(8, 16, 16))
    p.add_argument("--skip", action="store_true")
    p.add_argument("--bn", action="store_true")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--checkpoint-epochs", type=_csv_ints, default=(10, 50, 100))

    p = add("scan1d", "loss along theta + lambda * eps")
    _ckpt_args(p)
    _direction_args(p)
    _grid_args(p)

    p = add("scan2d", "loss over theta + l1 * eps1 + l2 * eps2")
    _ckpt_args(p)
    _direction_args(p)
    _grid_args(p, points=21)

    p = add("spectrum", "extremal Hessian eigenpairs, trace and SLQ density")
    _ckpt_args(p)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--which", choices=("LA", "SA", "both"), default="both")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--trace-probes", type=int, default=100)
    p.add_argument("--slq-probes", type=int, default=10)
    p.add_argument("--lanczos-steps", type=int, default=80)
    p.add_argument("--save-eigvecs", action="store_true")

    for name, d in (("mine-wpeak", WPEAK_DEFAULTS), ("mine-vvv", VVV_DEFAULTS)):
        p = add(name, "mine a w-peak direction" if name == "mine-wpeak"
                else "mine a vvv-basin partner model")
        _ckpt_args(p)
        p.add_argument("--epochs", type=int, default=d.epochs)
        p.add_argument("--lr", type=float, default=d.lr)
        p.add_argument("--batch-size", type=int, default=d.batch_size)
        p.add_argument("--gamma", type=float, default=d.gamma)
        p.add_argument("--alpha", type=float, default=d.alpha)
        _grid_args(p, -1.0, *((1.0, 41) if name == "mine-wpeak" else (2.0, 31)))

    p = add("soa", "loss-change distribution under Gaussian perturbations")
    _ckpt_args(p)
    p.add_argument("--lambdas", type=_csv_floats, default=(0.001, 0.01))
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--trace-probes", type=int, default=100)
    p.add_argument("--true-loss", action="store_true")

    p = add("overlay", "piecewise quadratic overlays along theta_f - theta_0")
    p.add_argument("--ckpt-a", help="initial checkpoint theta_0")
    p.add_argument("--ckpt-b", help="final checkpoint theta_f")
    p.add_argument("--anchors", type=int, default=11)
    p.add_argument("--half-width", type=float, default=0.05)
    p.add_argument("--points", type=int, default=11)
    return parser


def _config_argv(path, parser, command):
    """Flags reconstructed from an INI file; command-line flags placed after them win."""
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise ArgumentError(f"cannot read config file {path}")
    sub = parser._subparsers._group_actions[0].choices[command]
    actions = {a.dest: a for a in sub._actions}
    out = []
    for section in cp.sections():
        for key, value in cp.items(section):
            if key == "command":
                continue
            dest = key.replace("-", "_")
            a = actions.get(dest)
            if a is None or dest in ("config", "help"):
                raise ArgumentError(f"unknown config key {key!r} for {command}")
            flag = a.option_strings[-1]
            if isinstance(a, argparse._StoreTrueAction):
                if cp.getboolean(section, key):
                    out.append(flag)
            else:
                out += [flag, value]
    return out


def _config_path(argv):
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _config_command(path):
    cp = configparser.ConfigParser()
    cp.read(path)
    for section in cp.sections():
        if cp.has_option(section, "command"):
            return cp.get(section, "command")
    return None


def parse_args(argv):
    parser = build_parser()
    argv = list(argv)
    cfg = _config_path(argv)
    if cfg is not None:
        command = next((t for t in argv if t in COMMANDS), None)
        if command is None:
            command = _config_command(cfg)
            if command not in COMMANDS:
                parser.error("no command given on the command line or in the config file")
            argv = [command] + argv
        try:
            extra = _config_argv(cfg, parser, command)
        except ArgumentError as e:
            parser.error(str(e))
        i = argv.index(command)
        argv = argv[:i + 1] + extra + argv[i + 1:]
    args = parser.parse_args(argv)
    try:
        _validate(args)
    except ArgumentError as e:
        parser.error(str(e))
    return args


def _grid(args):
    lo, hi = (-args.range, args.range) if args.range is not None else (args.range_lo, args.range_hi)
    if not hi > lo:
        raise ArgumentError("range must satisfy lo < hi")
    if args.points < 5:
        raise ArgumentError("--points must be >= 5")
    g = uniform_grid(lo, hi, args.points)
    if not np.any(g == 0.0):
        raise ArgumentError("the lambda grid must contain 0; adjust --points or the range")
    return g


def _validate(args):
    if args.eval_samples < 0:
        raise ArgumentError("--eval-samples must be >= 0")
    if args.data not in ("blobs", "cifar10") and not Path(args.data).is_file():
        raise ArgumentError(f"--data: no such dataset file {args.data}")
    c = args.command
    if c == "train":
        if args.epochs < 0 or args.lr <= 0 or args.batch_size < 1:
            raise ArgumentError("need --epochs >= 0, --lr > 0 and --batch-size >= 1")
        return
    if c in ("scan1d", "scan2d", "mine-wpeak", "mine-vvv"):
        args.grid = _grid(args)
    if c in ("scan1d", "scan2d"):
        if args.seeds < 1:
            raise ArgumentError("--seeds must be >= 1")
        if args.dir == "delta":
            if not (args.ckpt_a and args.ckpt_b):
                raise ArgumentError("--dir delta needs --ckpt-a and --ckpt-b")
        elif not args.ckpt:
            raise ArgumentError(f"--dir {args.dir} needs --ckpt")
        if args.dir == "mined" and not args.direction:
            raise ArgumentError("--dir mined needs --direction")
        if c == "scan2d" and args.dir in ("delta", "mined", "neggrad"):
            raise ArgumentError("scan2d supports --dir gaussian or eigen")
        if args.norm == "auto":
            args.norm = "none" if args.dir in ("delta", "mined") else "global"
    elif c == "overlay":
        if not (args.ckpt_a and args.ckpt_b):
            raise ArgumentError("overlay needs --ckpt-a (theta_0) and --ckpt-b (theta_f)")
        if args.anchors < 2 or args.points < 2:
            raise ArgumentError("--anchors and --points must be >= 2")
    elif not args.ckpt:
        raise ArgumentError(f"{c} needs --ckpt")
    if c in ("mine-wpeak", "mine-vvv"):
        try:
            MineConfig(args.epochs, args.lr, args.batch_size, args.gamma, args.alpha, args.seed)
        except ValueError as e:
            raise ArgumentError(str(e)) from None
    if c == "soa" and (args.samples < 2 or not args.lambdas):
        raise ArgumentError("soa needs --samples >= 2 and at least one lambda")


# ---------------------------------------------------------------- outputs

def resolved_config(args) -> dict:
    d = {k: v for k, v in vars(args).items() if k not in ("config", "out", "grid")}
    if getattr(args, "grid", None) is not None:
        d["grid"] = [float(x) for x in args.grid]
    return json.loads(json.dumps(d, default=list))


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, np.integer):
        return str(int(x))
    return str(x)


def csv_text(header, rows, comment) -> str:
    buf = io.StringIO()
    buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    return buf.getvalue()


def dat_text(columns, comment, log_scale=False) -> str:
    """Whitespace-separated columns; with ``log_scale`` the last column is log10."""
    lines = [f"# {comment}"]
    for row in zip(*columns):
        row = list(row)
        if log_scale:
            row[-1] = math.log10(row[-1]) if row[-1] > 0 else float("nan")
        lines.append(" ".join(_fmt(float(x)) for x in row))
    return "\n".join(lines) + "\n"


def matrix_dat_text(l1, l2, z, comment, log_scale=False) -> str:
    """gnuplot ``splot`` layout: one block per lambda2 row, blocks separated by a blank line."""
    lines = [f"# {comment}"]
    for i, b in enumerate(l2):
        for j, a in enumerate(l1):
            v = float(z[i, j])
            if log_scale:
                v = math.log10(v) if v > 0 else float("nan")
            lines.append(f"{_fmt(float(a))} {_fmt(float(b))} {_fmt(v)}")
        lines.append("")
    return "\n".join(lines) + "\n"


class Emitter:
    """Collects named outputs and writes them atomically once the command succeeds."""

    def __init__(self, args):
        self.args = args
        self.outdir = Path(args.out)
        self.stamp = time.strftime("%Y%m%dT%H%M%SZ", time.gmtime())
        self.files = {}

    def name(self, role, ext):
        return f"{self.args.command}_s{self.args.seed}_{self.stamp}_{role}.{ext}"

    def add(self, role, ext, text):
        self.files[(role, ext)] = text.encode() if isinstance(text, str) else text

    def write(self, summary):
        self.outdir.mkdir(parents=True, exist_ok=True)
        manifest = {"command": self.args.command, "seed": self.args.seed,
                    "config": resolved_config(self.args),
                    "outputs": sorted(f"{r}.{e}" for r, e in self.files), "results": summary}
        self.add("manifest", "json", json.dumps(manifest, indent=2, sort_keys=True,
                                                 allow_nan=True) + "\n")
        paths = []
        for (role, ext), raw in self.files.items():
            path = self.outdir / self.name(role, ext)
            formats.atomic_write(path, raw)
            paths.append(path)
        return paths


# ---------------------------------------------------------------- pipelines

def load_data(args):
    if args.data == "blobs":
        ds = gen_blobs(args.classes, args.per_class, args.dim, args.spread, args.data_seed)
    elif args.data == "cifar10":
        ds = read_cifar10(cifar10_paths(args.data_dir))
    else:
        ds = load_dataset(args.data)
    return ds


def _eval_set(args, ds):
    return ds.head(args.eval_samples) if args.eval_samples else ds


def _ckpt(path) -> Checkpoint:
    p = Path(path)
    if not p.exists() and p.with_name(p.name + ".lmck").exists():
        p = p.with_name(p.name + ".lmck")
    return load_checkpoint(p)


def _comment(args, seed, provenance):
    return f"command={args.command} seed={seed} provenance={provenance}"


def _curve_outputs(em, args, role, curve, seed, provenance):
    c = _comment(args, seed, provenance)
    em.add(role, "csv", csv_text(("lambda", "loss", "accuracy"),
                                 zip(curve.lambdas, curve.losses, curve.accuracies), c))
    em.add(role, "dat", dat_text((curve.lambdas, curve.losses), c))
    if args.log_scale:
        em.add(role + "_log", "dat", dat_text((curve.lambdas, curve.losses), c, True))
    return {"seed": seed, "provenance": provenance, "label": curve.label,
            "stationary_count": curve.stationary_count,
            "loss_at_zero": curve.loss_at(0.0)}


def _eigen_direction(model, ck, ds, which, index, seed):
    op = HvpOperator(model, ck.params, ds)
    res = extremal_eigs(op, index, which, seed=seed)
    op.free()
    vec = ck.params.like(res.eigenvectors[:, index - 1])
    tag = "N.E." if which == "SA" else "P.E."
    return Direction(vec, "eigenvector", meta={"eigenvalue": float(res.eigenvalues[index - 1]),
                                               "label": f"{tag}{index}"})


def _directions(args, model, base, ds, count):
    """Raw (unnormalized) directions for a scan and the seeds they carry."""
    if args.dir == "gaussian":
        return [(s, gaussian_direction(base.params.manifest, args.sigma, s))
                for s in range(args.seed, args.seed + count)]
    if args.dir == "eigen":
        return [(args.seed, _eigen_direction(model, base, ds, args.eig_which, args.eig_index + i,
                                             args.seed)) for i in range(count)]
    if args.dir == "neggrad":
        n = min(args.grad_samples, len(ds))
        return [(args.seed, neg_gradient_direction(model, base.params, ds.batch(np.arange(n)),
                                                   base.bn))]
    if args.dir == "delta":
        return [(args.seed, delta_direction(base, _ckpt(args.ckpt_b)))]
    return [(args.seed, load_direction(args.direction))]


def _base(args):
    return _ckpt(args.ckpt_a if args.dir == "delta" else args.ckpt)


def _dir_summary(d):
    return {"provenance": d.provenance, "normalization": d.normalization,
            "norm_before": d.norm_before, "norm_after": d.norm_after, "degenerate": d.degenerate}


def cmd_train(args, em):
    ds = load_data(args)
    shape = tuple(ds.inputs.shape[1:])
    spec = ModelSpec(args.model, shape, ds.num_classes, args.hidden, tuple(args.channels),
                     args.skip, args.bn).validate()
    cfg = TrainConfig(args.lr, args.batch_size, args.weight_decay, args.epochs,
                      tuple(args.checkpoint_epochs), args.seed)
    ckpts = train(spec, cfg, ds)
    rows = [(c.epoch, c.train_loss, c.train_acc, c.eval_loss) for c in ckpts]
    c = _comment(args, args.seed, "train")
    em.add("history", "csv", csv_text(("epoch", "train_loss", "train_acc", "eval_loss"), rows, c))
    em.add("history", "dat", dat_text(([r[0] for r in rows], [r[1] for r in rows]), c))
    if args.log_scale:
        em.add("history_log", "dat", dat_text(([r[0] for r in rows], [r[1] for r in rows]), c, True))
    Path(args.out).mkdir(parents=True, exist_ok=True)
    for ck in ckpts:
        save_checkpoint(ck, Path(args.out) / f"e{ck.epoch:03d}.lmck")
    return {"spec": spec.to_dict(), "spec_hash": spec.spec_hash(), "params": len(ckpts[0].params),
            "checkpoints": [f"e{ck.epoch:03d}.lmck" for ck in ckpts],
            "final_train_loss": ckpts[-1].train_loss, "final_train_acc": ckpts[-1].train_acc}


def cmd_scan1d(args, em):
    ds = load_data(args)
    base = _base(args)
    model = Model(base.spec)
    ev = _eval_set(args, ds)
    curves = []
    for seed, raw in _directions(args, model, base, ds, args.seeds):
        d = normalize(raw, base.params, args.norm)
        curve = scan_1d(model, base.params, base.bn, d, args.grid, ev, args.bn_mode, bn_data=ds)
        info = _curve_outputs(em, args, f"curve{len(curves)}", curve, seed, d.provenance)
        info.update(_dir_summary(d), meta=d.meta)
        curves.append(info)
    counts = [c["stationary_count"] for c in curves]
    labels = [c["label"] for c in curves]
    return {"curves": curves, "avg_stationary_count": float(np.mean(counts)),
            "class_counts": {k: labels.count(k) for k in sorted(set(labels))},
            "base_epoch": base.epoch, "base_seed": base.seed}


def cmd_scan2d(args, em):
    ds = load_data(args)
    base = _base(args)
    model = Model(base.spec)
    ev = _eval_set(args, ds)
    (s1, r1), (s2, r2) = _directions(args, model, base, ds, 2)
    d1 = normalize(r1, base.params, args.norm)
    d2 = normalize(r2, base.params, args.norm)
    surf = scan_2d(model, base.params, base.bn, d1, d2, args.grid, args.grid, ev, args.bn_mode,
                   bn_data=ds)
    c = _comment(args, f"{s1},{s2}", d1.provenance)
    rows = [(a, b, surf.losses[i, j], surf.accuracies[i, j])
            for i, b in enumerate(surf.lambdas2) for j, a in enumerate(surf.lambdas1)]
    em.add("surface", "csv", csv_text(("lambda1", "lambda2", "loss", "accuracy"), rows, c))
    em.add("surface", "dat", matrix_dat_text(surf.lambdas1, surf.lambdas2, surf.losses, c))
    if args.log_scale:
        em.add("surface_log", "dat",
               matrix_dat_text(surf.lambdas1, surf.lambdas2, surf.losses, c, True))
    i, j = surf.center
    return {"seeds": [s1, s2], "directions": [_dir_summary(d1), _dir_summary(d2)],
            "loss_at_center": float(surf.losses[i, j]), "min_loss": float(surf.losses.min())}


def cmd_spectrum(args, em):
    ds = load_data(args)
    ck = _ckpt(args.ckpt)
    model = Model(ck.spec)
    n = args.eval_samples or DEFAULT_EVAL_SAMPLES
    op = HvpOperator(model, ck.params, ds, n)
    whiches = ("LA", "SA") if args.which == "both" else (args.which,)
    rows, out, dens = [], {}, None
    for w in whiches:
        sp = compute_spectrum(op, args.k, w, args.tol, args.trace_probes,
                              args.slq_probes if dens is None else 0, args.lanczos_steps, args.seed)
        dens = dens or sp.density
        for i, (lam, r) in enumerate(zip(sp.eigenvalues, sp.residuals)):
            rows.append((w, i + 1, sp.eigenvectors[i].meta["label"], lam, r))
            if args.save_eigvecs:
                v = sp.eigenvectors[i]
                em.add(v.meta["label"].replace(".", ""), "lmdr",
                       direction_bytes(v, ck.spec_hash, args.seed))
        out[w] = {"eigenvalues": [float(x) for x in sp.eigenvalues],
                  "max_residual": float(np.max(sp.residuals)), **sp.meta}
        out["trace"], out["trace_stderr"] = sp.trace, sp.trace_stderr
    c = _comment(args, args.seed, "eigenvector")
    em.add("eigenvalues", "csv",
           csv_text(("which", "index", "label", "eigenvalue", "residual"), rows, c))
    if dens is not None:
        em.add("density", "csv", csv_text(("grid", "density"), zip(dens.grid, dens.values), c))
        em.add("density", "dat", dat_text((dens.grid, dens.values), c))
        if args.log_scale:
            em.add("density_log", "dat", dat_text((dens.grid, dens.values), c, True))
        out["slq"] = {"integral": dens.integral(), "first_moment": dens.first_moment,
                      "first_moment_stderr": dens.first_moment_stderr,
                      "kernel_sigma": dens.sigma}
    out["dim"] = op.dim
    op.free()
    return out


def _objective_outputs(em, args, history):
    c = _comment(args, args.seed, "mined")
    em.add("objective", "csv", csv_text(("epoch", "objective"), enumerate(history), c))


def cmd_mine_wpeak(args, em):
    ds = load_data(args)
    ck = _ckpt(args.ckpt)
    model = Model(ck.spec)
    cfg = MineConfig(args.epochs, args.lr, args.batch_size, args.gamma, args.alpha, args.seed)
    d = mine_wpeak(model, ck.params, ds, cfg, ck.bn)
    _objective_outputs(em, args, d.meta["objective"])
    em.add("direction", "lmdr", direction_bytes(d, ck.spec_hash, args.seed))
    curve = scan_1d(model, ck.params, ck.bn, d, args.grid, _eval_set(args, ds), args.bn_mode,
                    bn_data=ds)
    info = _curve_outputs(em, args, "curve", curve, args.seed, d.provenance)
    return {"curve": info, "direction_norm": d.norm(), "final_objective": d.meta["objective"][-1]}


def cmd_mine_vvv(args, em):
    ds = load_data(args)
    ck = _ckpt(args.ckpt)
    model = Model(ck.spec)
    cfg = MineConfig(args.epochs, args.lr, args.batch_size, args.gamma, args.alpha, args.seed)
    phi, d = mine_vvv(model, ck.params, ds, cfg, ck.bn)
    _objective_outputs(em, args, d.meta["objective"])
    em.add("phi", "lmck", checkpoint_bytes(Checkpoint(phi, ck.bn, cfg.epochs, args.seed, ck.spec,
                                                      meta={"mine_config": cfg.to_dict()})))
    em.add("direction", "lmdr", direction_bytes(d, ck.spec_hash, args.seed))
    ev = _eval_set(args, ds)
    curve = scan_1d(model, ck.params, ck.bn, d, args.grid, ev, args.bn_mode, bn_data=ds)
    info = _curve_outputs(em, args, "curve", curve, args.seed, d.provenance)
    mid = eval_loss(model, ck.params.like(0.5 * (ck.params.values + phi.values)), ck.bn, ev)[0]
    return {"curve": info, "midpoint_loss": mid, "phi_loss": eval_loss(model, phi, ck.bn, ev)[0],
            "final_objective": d.meta["objective"][-1]}


def cmd_soa(args, em):
    ds = load_data(args)
    ck = _ckpt(args.ckpt)
    model = Model(ck.spec)
    n = args.eval_samples or DEFAULT_EVAL_SAMPLES
    op = HvpOperator(model, ck.params, ds, n)
    out = []
    samples = None
    for k, lam in enumerate(args.lambdas):
        r = delta_loss_distribution(model, ck.params, ds, lam, args.sigma, args.samples, args.seed,
                                    args.trace_probes, args.true_loss, op=op, samples=samples)
        samples = (r.a, r.b)
        cols = [np.arange(args.samples), r.a, r.b, r.values]
        header = ["probe", "a", "b", "delta_loss"]
        if r.true_values is not None:
            cols.append(r.true_values)
            header.append("true_delta_loss")
        c = _comment(args, args.seed, "gaussian")
        em.add(f"lambda{k}", "csv", csv_text(header, zip(*cols), c))
        out.append({"lambda": lam, "sigma": args.sigma, "mean": r.mean, "stderr": r.stderr,
                    "predicted_mean": r.predicted_mean, "positive_fraction": r.positive_fraction,
                    "trace": r.trace_estimate, "trace_stderr": r.trace_stderr})
    op.free()
    return {"settings": out}


def cmd_overlay(args, em):
    ds = load_data(args)
    a, b = _ckpt(args.ckpt_a), _ckpt(args.ckpt_b)
    model = Model(b.spec)
    eps = b.params - a.params
    n = args.eval_samples or DEFAULT_EVAL_SAMPLES
    anchors = uniform_grid(-1.0, 0.0, args.anchors)
    res = quadratic_overlay(model, b.params, eps, ds, anchors, args.half_width, args.points, n)
    c = _comment(args, args.seed, "ckpt-delta")
    out = []
    for k, r in enumerate(res):
        em.add(f"anchor{k}", "csv",
               csv_text(("x", "true_loss", "quad_loss"), zip(r.xs, r.true_losses, r.quad_losses), c))
        out.append({"anchor": r.anchor, "a": r.a, "b": r.b, "base_loss": r.base_loss,
                    "max_error": r.max_error})
    alphas = anchors + 1.0
    mli = mli_curve(model, a.params, b.params, alphas, ds.head(n))
    em.add("mli", "csv", csv_text(("alpha", "loss"), zip(alphas, mli), c))
    em.add("mli", "dat", dat_text((alphas, mli), c))
    if args.log_scale:
        em.add("mli_log", "dat", dat_text((alphas, mli), c, True))
    return {"anchors": out, "mli": [float(x) for x in mli]}


HANDLERS = {"train": cmd_train, "scan1d": cmd_scan1d, "scan2d": cmd_scan2d,
            "spectrum": cmd_spectrum, "mine-wpeak": cmd_mine_wpeak, "mine-vvv": cmd_mine_vvv,
            "soa": cmd_soa, "overlay": cmd_overlay}


def _failing_module(exc) -> str:
    if isinstance(exc, LandscapeError):
        return exc.module
    pkg = Path(__file__).resolve().parent
    mod = "cli"
    for frame, _ in traceback.walk_tb(exc.__traceback__):
        f = Path(frame.f_code.co_filename).resolve()
        if f.parent == pkg:
            mod = f.stem
    return mod


def run(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    em = Emitter(args)
    try:
        summary = HANDLERS[args.command](args, em)
        em.write(summary)
    except Exception as e:  # noqa: BLE001  (reported with the failing module)
        print(f"landscape {args.command}: error in module {_failing_module(e)}: {e}",
              file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
