"""Command-line entry point: data generation, tokenizer fitting, training, evaluation and experiments.

Exit codes:
  0  success
  1  a check failed (grad-check did not pass)
  2  usage error (unknown command or flag)
  3  missing input file
  4  invalid config or malformed input
  5  runtime failure (non-finite loss, numerical error)

Errors are printed to stderr as one JSON line: {"error": kind, "code": n, "message": ...}.
Run directories live under $MBGR_RUNS_ROOT (default ./runs) and are named <config-hash>-s<seed>.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .data import (BUSINESS_NAMES, Dataset, business_shares, generate_dataset, load_catalog, load_dataset,
                   make_catalog, save_catalog, save_dataset)
from .evaluation import embedding_separation, write_coords_csv, write_metrics_csv
from .loss import EMPIRICAL_WEIGHTS, inverse_frequency_weights
from .tokenizer import Codebook, fit_residual_quantizer, read_item_vectors
from .trainer import (VARIANTS, RunConfig, build_context, checkpoint_codebook, desk_config, evaluate,
                      grad_check_model, item_representations, load_checkpoint, metric_rows, run_id, run_once,
                      save_checkpoint, set_dotted, tiny_config, train, with_overrides)

log = logging.getLogger("mbgr")

EXIT_CHECK_FAILED, EXIT_USAGE, EXIT_MISSING, EXIT_CONFIG, EXIT_RUNTIME = 1, 2, 3, 4, 5

SWEEPS = {
    "alpha": ("loss.alpha", [0.01, 0.05, 0.10, 0.20, 0.50]),
    "experts": ("model.n_experts", [4, 8, 16, 32]),
    "weights": ("loss.business_weights", ["uniform", "inverse-frequency", "empirical"]),
}
PRESETS = {"default": RunConfig, "desk": desk_config, "tiny": tiny_config}


class CliError(Exception):
    def __init__(self, kind: str, code: int, message: str):
        super().__init__(message)
        self.kind, self.code = kind, code


# ---------------------------------------------------------------- config handling

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(args) -> RunConfig:
    """Preset, then the JSON config file, then ``--set`` overrides, then ``--seed``."""
    doc = PRESETS[args.preset]().to_dict()
    try:
        if args.config:
            path = Path(args.config)
            if not path.exists():
                raise CliError("missing-file", EXIT_MISSING, f"config file not found: {path}")
            try:
                given = json.loads(path.read_text())
            except json.JSONDecodeError as exc:
                raise CliError("invalid-config", EXIT_CONFIG, f"{path}: {exc}") from None
            _merge(doc, given)
        for item in args.set or []:
            key, sep, value = item.partition("=")
            if not sep:
                raise CliError("invalid-config", EXIT_CONFIG, f"--set expects key=value, got {item!r}")
            set_dotted(doc, key, _parse_value(value))
        if args.seed is not None:
            doc["seed"] = args.seed
        return RunConfig.from_dict(doc)
    except (KeyError, ValueError, TypeError) as exc:
        raise CliError("invalid-config", EXIT_CONFIG, str(exc.args[0] if exc.args else exc)) from None


def _merge(doc: dict, given: dict) -> None:
    # nested sections or flat dotted keys are both accepted
    for key, value in given.items():
        if "." in key:
            set_dotted(doc, key, value)
        elif isinstance(value, dict) and isinstance(doc.get(key), dict):
            for sub, v in value.items():
                set_dotted(doc, f"{key}.{sub}", v)
        else:
            set_dotted(doc, key, value)


def runs_root() -> Path:
    return Path(os.environ.get("MBGR_RUNS_ROOT", "runs"))


def run_dir(cfg: RunConfig, out: str | None = None) -> Path:
    path = Path(out) if out else runs_root() / run_id(cfg)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise CliError("missing-file", EXIT_MISSING, f"file not found: {path}")
    return path


def dataset_for(cfg: RunConfig, args) -> Dataset:
    if getattr(args, "dataset", None):
        catalog = load_catalog(_require(args.items)) if args.items else make_catalog(cfg.data)
        return load_dataset(_require(args.dataset), catalog)
    return generate_dataset(cfg.data)


def _context(cfg, args, codebook=None):
    ds = dataset_for(cfg, args)
    if codebook is None and getattr(args, "codebook", None):
        codebook = Codebook.load(_require(args.codebook))
    return build_context(cfg, ds, codebook)


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    cfg = load_config(args)
    out = run_dir(cfg, args.out)
    ds = generate_dataset(cfg.data)
    save_dataset(ds, out / "dataset.jsonl")
    save_catalog(ds.catalog, out / "items.jsonl")
    shares = business_shares(ds, cfg.data.n_business)
    names = BUSINESS_NAMES if cfg.data.n_business <= len(BUSINESS_NAMES) else range(cfg.data.n_business)
    summary = {"users": len(ds), "events": ds.n_events, "shares": dict(zip(map(str, names), shares.tolist()))}
    _write_json(out / "data_summary.json", summary)
    print(json.dumps({"out": str(out), **summary}))
    return 0


def cmd_fit_tokenizer(args) -> int:
    cfg = load_config(args)
    out = run_dir(cfg, args.out)
    if args.items:
        _, vectors = read_item_vectors(_require(args.items))
    else:
        vectors = make_catalog(cfg.data).vectors
    cb = fit_residual_quantizer(vectors, cfg.model.n_levels, cfg.model.vocab, seed=cfg.seed)
    cb.save(out / "codebook.json")
    print(json.dumps({"out": str(out / "codebook.json"), "levels": cb.levels, "vocab": cb.vocab, "dim": cb.dim}))
    return 0


def _write_curve(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(curve[0]))
        w.writeheader()
        for row in curve:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def cmd_train(args) -> int:
    cfg = load_config(args)
    out = run_dir(cfg, args.out)
    ctx = _context(cfg, args)
    _write_json(out / "config.json", cfg.to_dict())
    res = train(cfg, ctx, log_every=args.log_every)
    save_checkpoint(res.model, cfg, out / "checkpoint.pt", ctx.codebook)
    ctx.codebook.save(out / "codebook.json")
    if res.curve:
        _write_curve(out / "curve.csv", res.curve)
    if not args.no_eval:
        rows = metric_rows(evaluate(res.model, cfg, ctx), cfg, ctx.n_business, run_id(cfg))
        write_metrics_csv(out / "metrics.csv", rows)
        _print_rows(rows)
    print(json.dumps({"out": str(out), "steps": cfg.optim.steps}))
    return 0


def _load(args):
    path = _require(args.checkpoint)
    try:
        model, cfg = load_checkpoint(path)
    except (ValueError, KeyError) as exc:
        raise CliError("invalid-config", EXIT_CONFIG, str(exc.args[0] if exc.args else exc)) from None
    return model, cfg, checkpoint_codebook(path), path.parent


def cmd_eval(args) -> int:
    model, cfg, codebook, where = _load(args)
    ctx = _context(cfg, args, codebook)
    rows = metric_rows(evaluate(model, cfg, ctx), cfg, ctx.n_business, run_id(cfg))
    out = Path(args.out) if args.out else where
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", rows)
    _print_rows(rows)
    return 0


def _print_rows(rows) -> None:
    for r in rows:
        print(f"{r['run_id']}\t{r['variant']}\t{r['business']}\t{r['metric']}\t{r['value']:.4f}")


def _run_point(cfg_doc: dict, dataset_args: dict) -> list[dict]:
    cfg = RunConfig.from_dict(cfg_doc)
    ctx = _context(cfg, argparse.Namespace(**dataset_args))
    return run_once(cfg, ctx)[2]


def _run_many(cfgs: list[RunConfig], args) -> list[dict]:
    """Train and evaluate each config; results are ordered as given whatever the worker count."""
    ds_args = {"dataset": getattr(args, "dataset", None), "items": getattr(args, "items", None),
               "codebook": getattr(args, "codebook", None)}
    docs = [c.to_dict() for c in cfgs]
    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            chunks = list(pool.map(_run_point, docs, [ds_args] * len(docs)))
    else:
        # one context per seed: variants and grid points share data and tokenization
        cache, chunks = {}, []
        for cfg in cfgs:
            key = (json.dumps(cfg.data.to_dict(), sort_keys=True), cfg.model.n_levels, cfg.model.vocab, cfg.seed)
            if key not in cache:
                cache[key] = _context(cfg, argparse.Namespace(**ds_args))
            chunks.append(run_once(cfg, cache[key])[2])
    return [row for chunk in chunks for row in chunk]


def _seeds(cfg, args) -> list[int]:
    return args.seeds if args.seeds else [cfg.seed]


def cmd_ablate(args) -> int:
    cfg = load_config(args)
    variants = args.variants or list(VARIANTS)
    bad = sorted(set(variants) - set(VARIANTS))
    if bad:
        raise CliError("invalid-config", EXIT_CONFIG, f"unknown variants {bad}")
    cfgs = [with_overrides(cfg, variant=v, seed=s) for s in _seeds(cfg, args) for v in variants]
    rows = _run_many(cfgs, args)
    out = run_dir(cfg, args.out)
    write_metrics_csv(out / "ablation.csv", rows)
    _print_rows(rows)
    return 0


def weight_preset(name: str, cfg: RunConfig):
    if name == "uniform":
        return None, "as-given"
    if name == "inverse-frequency":
        return inverse_frequency_weights(cfg.data.proportions), "as-given"
    if name == "empirical":
        return list(EMPIRICAL_WEIGHTS), "as-given"
    raise CliError("invalid-config", EXIT_CONFIG, f"unknown weight preset {name!r}")


def sweep_configs(cfg: RunConfig, grid: str, values=None, seeds=None) -> list[tuple[object, RunConfig]]:
    key, default = SWEEPS[grid]
    points = []
    for s in seeds or [cfg.seed]:
        for v in values if values is not None else default:
            if grid == "weights":
                w, mode = weight_preset(v, cfg)
                c = with_overrides(cfg, **{"loss.business_weights": w, "loss.weight_mode": mode}, seed=s)
            else:
                c = with_overrides(cfg, **{key: v}, seed=s)
            points.append((v, c))
    return points


def cmd_sweep(args) -> int:
    cfg = load_config(args)
    values = [_parse_value(v) for v in args.values] if args.values else None
    points = sweep_configs(cfg, args.grid, values, _seeds(cfg, args))
    rows = _run_many([c for _, c in points], args)
    out = run_dir(cfg, args.out)
    write_metrics_csv(out / f"sweep-{args.grid}.csv", rows)
    with open(out / f"sweep-{args.grid}-points.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run_id", "parameter", "value"])
        for v, c in points:
            w.writerow([run_id(c), SWEEPS[args.grid][0], json.dumps(v)])
    _print_rows(rows)
    return 0


def cmd_viz(args) -> int:
    model, cfg, codebook, where = _load(args)
    ctx = _context(cfg, args, codebook)
    out = Path(args.out) if args.out else where
    out.mkdir(parents=True, exist_ok=True)
    items = np.arange(len(ctx.item_business))
    summary = {}
    seps = {}
    for mode in ("bid", "sum-pool"):
        sep = embedding_separation(item_representations(model, ctx, mode), ctx.item_business)
        write_coords_csv(out / f"coords-{mode}.csv", items, ctx.item_business, sep.coords)
        summary[mode] = {"silhouette": sep.silhouette, "per_business": {str(k): v for k, v in sep.per_business.items()}}
        seps[mode] = sep
    _write_json(out / "separation.json", summary)
    _plot(seps, ctx.item_business, out / "separation.png")
    print(json.dumps({"out": str(out), **{m: s["silhouette"] for m, s in summary.items()}}))
    return 0


def _plot(seps, labels, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(seps), figsize=(5 * len(seps), 4.5))
    for ax, (mode, sep) in zip(np.atleast_1d(axes), seps.items()):
        for b in np.unique(labels):
            sel = labels == b
            name = BUSINESS_NAMES[b] if b < len(BUSINESS_NAMES) else str(b)
            ax.scatter(sep.coords[sel, 0], sep.coords[sel, 1], s=6, alpha=0.6, label=name)
        ax.set_title(f"{mode} (silhouette {sep.silhouette:.3f})")
        ax.legend(markerscale=2, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_grad_check(args) -> int:
    cfg = load_config(args)
    try:
        rep = grad_check_model(cfg, eps=args.eps, tolerance=args.tolerance)
    except ValueError as exc:
        raise CliError("invalid-config", EXIT_CONFIG, str(exc)) from None
    status = "pass" if rep.passed else "fail"
    print(f"grad-check {status} max_rel_err={rep.max_error:.3e} tolerance={rep.tolerance:g} "
          f"params={len(rep.errors)}")
    if not rep.passed:
        for name, err in rep.worst(5):
            print(f"  {name}\t{err:.3e}")
    return 0 if rep.passed else EXIT_CHECK_FAILED


# ---------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(json.dumps({"error": "usage", "code": EXIT_USAGE, "message": message}), file=sys.stderr)
        sys.exit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mbgr", description="Multi-business generative recommendation experiments.",
                epilog=__doc__.split("\n\n", 1)[1], formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("--config", help="JSON run config (nested sections or dotted keys)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, e.g. loss.alpha=0.1")
        sp.add_argument("--preset", choices=sorted(PRESETS), default="default", help="base config (default: %(default)s)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory (default: run directory)")
        if data:
            sp.add_argument("--dataset", help="dataset JSONL (default: generate from config)")
            sp.add_argument("--items", help="item feature JSONL matching --dataset")
            sp.add_argument("--codebook", help="codebook JSON (default: fit from item features)")

    sp = sub.add_parser("gen-data", help="generate a synthetic dataset and item features")
    common(sp, data=False)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("fit-tokenizer", help="fit the residual k-means codebook")
    common(sp, data=False)
    sp.add_argument("--items", help="item feature JSONL (default: the config's synthetic catalog)")
    sp.set_defaults(func=cmd_fit_tokenizer)

    sp = sub.add_parser("train", help="train one model, write checkpoint, curve and metrics")
    common(sp)
    sp.add_argument("--log-every", type=int, default=0)
    sp.add_argument("--no-eval", action="store_true")
    sp.set_defaults(func=cmd_train)

    for name, func, hlp in (("eval", cmd_eval, "HR@K of a checkpoint"),
                            ("viz", cmd_viz, "PCA coordinates, silhouettes and plot of item representations")):
        sp = sub.add_parser(name, help=hlp)
        sp.add_argument("checkpoint")
        sp.add_argument("--out")
        sp.add_argument("--dataset")
        sp.add_argument("--items")
        sp.set_defaults(func=func)

    sp = sub.add_parser("ablate", help="train and evaluate every variant")
    common(sp)
    sp.add_argument("--variants", nargs="+", metavar="V", help=f"subset of {', '.join(VARIANTS)}")
    sp.add_argument("--seeds", nargs="+", type=int)
    sp.add_argument("--parallel", type=int, default=1, help="worker processes (default: 1)")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("sweep", help="hyperparameter grid: alpha, experts or weights")
    common(sp)
    sp.add_argument("grid", choices=sorted(SWEEPS))
    sp.add_argument("--values", nargs="+", help="replace the grid's default values")
    sp.add_argument("--seeds", nargs="+", type=int)
    sp.add_argument("--parallel", type=int, default=1, help="worker processes (default: 1)")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("grad-check", help="whole-model finite-difference gradient check")
    sp.add_argument("--config")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")
    sp.add_argument("--preset", choices=sorted(PRESETS), default="tiny")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--eps", type=float, default=1e-4)
    sp.add_argument("--tolerance", type=float, default=1e-4)
    sp.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as exc:
        return _fail(exc.kind, exc.code, str(exc))
    except FileNotFoundError as exc:
        return _fail("missing-file", EXIT_MISSING, str(exc))
    except ValueError as exc:
        return _fail("invalid-input", EXIT_CONFIG, str(exc))
    except (dc.NonFiniteError, ZeroDivisionError, FloatingPointError, RuntimeError) as exc:
        return _fail("runtime", EXIT_RUNTIME, str(exc))


def _fail(kind, code, message) -> int:
    print(json.dumps({"error": kind, "code": code, "message": message}), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
