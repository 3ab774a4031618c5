"""Command line driver: ``fqtlab {train,bias,variance,sweep,sparse}``.

Exit codes: 0 when every check passes, 1 on an invariant violation, 2 on a
usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from fqtlab import analysis, config
from fqtlab.config import ConfigError
from fqtlab.data import load_idx, make_blobs
from fqtlab.net import Network, QuantScheme, backward_qat, forward_quantized, save_checkpoint
from fqtlab.quant import dumps_transform, fit_transform
from fqtlab.train import TrainConfig, mean_loss_and_grad, train

OUT_ENV = "FQTLAB_OUT"
EXIT_OK, EXIT_VIOLATION, EXIT_USAGE = 0, 1, 2


def _u64(text):
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _positive(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI or JSON config file")
    common.add_argument("--seed", type=_u64, help="master seed (overrides run.seed)")
    common.add_argument("--threads", type=_positive, help="cap BLAS threads; 1 gives bit-reproducible output")
    common.add_argument("--out", metavar="DIR", help=f"output directory (default ${OUT_ENV} or ./fqtlab-out/<command>)")
    p = argparse.ArgumentParser(prog="fqtlab", description="Fully quantized training experiments and gradient-variance checks.")
    sub = p.add_subparsers(dest="command", required=True)
    tr = sub.add_parser("train", parents=[common], help="train an MLP in exact, qat or fqt mode")
    tr.add_argument("--wall-time", action="store_true", help="add a wall_time column to metrics.csv (breaks byte-identical output)")
    sub.add_parser("bias", parents=[common], help="Monte Carlo check that FQT gradients are unbiased")
    sub.add_parser("variance", parents=[common], help="gradient variance decomposition and bounds")
    sub.add_parser("sweep", parents=[common], help="quantizer variance against bit width")
    sub.add_parser("sparse", parents=[common], help="PTQ/PSQ/BHQ on a one-large-row gradient")
    return p


# -- output helpers ---------------------------------------------------------------


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_clean(obj), indent=2) + "\n")


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else ("" if v is None else v) for v in row])


def _out_dir(args) -> Path:
    out = args.out or os.environ.get(OUT_ENV) or os.path.join("fqtlab-out", args.command)
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _scheme(cfg) -> QuantScheme:
    s = cfg["scheme"]
    return QuantScheme(s["forward_bits"], s["grad_weight_bits"], s["grad_act_bits"], s["variant"], s["rounding"])


def _mc_problem(cfg, seed):
    """Random network and fixed batch for the Monte Carlo commands."""
    dims = cfg["mc"]["dims"]
    net = Network.mlp(dims, seed=seed)
    rng = np.random.default_rng([seed, 1])
    x = rng.standard_normal((cfg["mc"]["batch"], dims[0]))
    y = np.eye(dims[-1])[rng.integers(0, dims[-1], cfg["mc"]["batch"])]
    return net, x, y


# -- commands ---------------------------------------------------------------------


def cmd_train(cfg, out: Path, wall_time: bool = False) -> int:
    d, t, seed = cfg["data"], cfg["train"], cfg["run"]["seed"]
    if d["source"] == "idx":
        ds = load_idx(d["images"], d["labels"], d["limit"] or None)
    else:
        ds = make_blobs(d["classes"], d["dims"], d["per_class"], d["spread"], d["seed"])
    train_set, val_set = ds.split(d["val_fraction"], seed=0)
    tc = TrainConfig(
        hidden=tuple(cfg["net"]["hidden"]),
        scheme=_scheme(cfg),
        mode=t["mode"],
        lr=t["lr"],
        schedule=t["schedule"],
        momentum=t["momentum"],
        epochs=t["epochs"],
        batch_size=t["batch_size"],
        seed=seed,
        warmup_epochs=t["warmup_epochs"],
        weight_decay=t["weight_decay"],
        label_smoothing=t["label_smoothing"],
        diverge_loss=t["diverge_loss"],
    )
    wall_time = wall_time or t["wall_time"]
    result = train(tc, train_set, val_set)
    header = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "status"] + (["wall_time"] if wall_time else [])
    rows = [[r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.status] + ([r.wall_time] if wall_time else []) for r in result.rows]
    write_csv(out / "metrics.csv", header, rows)
    save_checkpoint(result.net, out / "checkpoint.bin")
    f = result.final
    write_json(out / "report.json", {
        "command": "train",
        "config": cfg,
        "status": result.status,
        "epochs_run": len(result.rows),
        "final": {"train_loss": f.train_loss, "train_acc": f.train_acc, "val_loss": f.val_loss, "val_acc": f.val_acc},
    })
    if tc.mode == "fqt" and result.status == "ok":
        # gradient transforms of the trained net on the first training batch
        x, y = next(train_set.batches(tc.batch_size, 0, seed))
        logits, tape = forward_quantized(result.net, x, tc.scheme)
        _, top = mean_loss_and_grad(logits, y)
        grads = backward_qat(result.net, tape, top)
        lines = []
        for i in result.net.linear_indices:
            if tc.scheme.grad_act_bits is not None:
                rec = json.loads(dumps_transform(fit_transform(grads.outputs[i], tc.scheme.variant, tc.scheme.grad_act_bits)))
                lines.append(json.dumps({"layer": i, "transform": rec}))
        (out / "transforms.jsonl").write_text("".join(line + "\n" for line in lines))
    return EXIT_OK


def cmd_bias(cfg, out: Path) -> int:
    seed = cfg["run"]["seed"]
    net, x, y = _mc_problem(cfg, seed)
    rep = analysis.bias_check(net, x, y, _scheme(cfg), analysis.MCConfig(cfg["mc"]["trials"], seed))
    write_json(out / "report.json", {"command": "bias", "config": cfg, **rep.to_dict()})
    rows = rep.rows()
    write_csv(out / "bias.csv", ["coordinate", "qat", "fqt_mean", "se"], [[r["coordinate"], r["qat"], r["fqt_mean"], r["se"]] for r in rows])
    return EXIT_OK if rep.passed else EXIT_VIOLATION


def cmd_variance(cfg, out: Path) -> int:
    seed = cfg["run"]["seed"]
    net, x, y = _mc_problem(cfg, seed)
    rep = analysis.variance_decomposition(net, x, y, _scheme(cfg), analysis.MCConfig(cfg["mc"]["trials"], seed))
    bc = analysis.bound_check(rep)
    terms_ok = all(t.mean >= 0.0 for t in rep.terms)
    ok = rep.decomposition_holds() and bc.passed and terms_ok
    write_json(out / "report.json", {"command": "variance", "config": cfg, **rep.to_dict(), "bound_check": bc.to_dict(), "passed": ok})
    write_csv(out / "terms.csv", ["k", "l", "slot", "mean", "se"], [[t.k, t.l, t.slot, t.mean, t.se] for t in rep.terms])
    return EXIT_OK if ok else EXIT_VIOLATION


def cmd_sweep(cfg, out: Path) -> int:
    seed = cfg["run"]["seed"]
    net, x, y = _mc_problem(cfg, seed)
    sw = cfg["sweep"]
    rows = analysis.bit_sweep(net, x, y, sw["variant"], sw["bits"], analysis.MCConfig(cfg["mc"]["trials"], seed), forward_bits=cfg["scheme"]["forward_bits"])
    failures = []
    for r in rows:
        if r.exact_variance > r.bound * (1 + 1e-12):
            failures.append(f"layer {r.layer} bits {r.bits}: exact variance above bound")
        if abs(r.mc_variance - r.exact_variance) > 3 * r.mc_se + 1e-15:
            failures.append(f"layer {r.layer} bits {r.bits}: Monte Carlo estimate more than 3 SE from exact")
    by_layer = {}
    for r in rows:
        by_layer.setdefault(r.layer, []).append(r)
    # the exact variance of one input can rise with bits (grid alignment
    # changes); the bound cannot, so monotonicity is checked on the bound
    for layer, rs in by_layer.items():
        for a, b in zip(rs, rs[1:]):
            if b.bound > a.bound * (1 + 1e-12):
                failures.append(f"layer {layer}: bound increased from {a.bits} to {b.bits} bits")
    header = ["layer", "bits", "exact_variance", "bound", "mc_variance", "mc_se", "ratio_to_next_bit"]
    write_csv(out / "sweep.csv", header, [[getattr(r, h) for h in header] for r in rows])
    write_json(out / "report.json", {"command": "sweep", "config": cfg, "rows": [{h: getattr(r, h) for h in header} for r in rows], "failures": failures, "passed": not failures})
    return EXIT_OK if not failures else EXIT_VIOLATION


def cmd_sparse(cfg, out: Path) -> int:
    sp, seed = cfg["sparse"], cfg["run"]["seed"]
    table, lines, failures = [], [], []
    prev = None
    for n in sp["n_rows"]:
        rows = analysis.sparse_gradient_bench(n, sp["lambda1"], sp["lambda2"], sp["d"], sp["bits"], seed)
        if not analysis.ordering_holds(rows):
            failures.append(f"N={n}: expected BHQ < PSQ < PTQ")
        bhq = rows[2].exact_variance
        ratio = prev[1] / bhq if prev is not None and bhq > 0 else None
        for r in rows:
            table.append([n, r.variant, r.exact_variance, r.bound, r.groups, ratio if r.variant == "bhq" else None])
        g = analysis.sparse_gradient(n, sp["lambda1"], sp["lambda2"], sp["d"], seed)
        for v in ("ptq", "psq", "bhq"):
            lines.append(json.dumps({"n_rows": n, "variant": v, "transform": json.loads(dumps_transform(fit_transform(g, v, sp["bits"])))}))
        prev = (n, bhq)
    header = ["n_rows", "variant", "exact_variance", "bound", "groups", "bhq_ratio_from_previous"]
    write_csv(out / "sparse.csv", header, table)
    (out / "transforms.jsonl").write_text("".join(line + "\n" for line in lines))
    write_json(out / "report.json", {"command": "sparse", "config": cfg, "rows": [dict(zip(header, r)) for r in table], "failures": failures, "passed": not failures})
    return EXIT_OK if not failures else EXIT_VIOLATION


COMMANDS = {"bias": cmd_bias, "variance": cmd_variance, "sweep": cmd_sweep, "sparse": cmd_sparse}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = {"run": {"seed": args.seed}} if args.seed is not None else None
        cfg = config.load(args.config, overrides)
    except ConfigError as e:
        print(f"fqtlab: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    limiter = threadpool_limits(limits=args.threads) if args.threads is not None else nullcontext()
    out = _out_dir(args)
    try:
        with limiter:
            if args.command == "train":
                return cmd_train(cfg, out, args.wall_time)
            return COMMANDS[args.command](cfg, out)
    except (ValueError, OSError) as e:
        print(f"fqtlab: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
