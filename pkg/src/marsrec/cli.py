"""Command-line entry point: ``marsrec <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import dataset as dsm
from .evaluator import EvalProtocol, evaluate
from .model import (Variant, export_facet_embeddings, init_params, load_checkpoint,
                    save_checkpoint)
from .objective import LossConfig, component_gradients, total_loss_gradients
from .optim import compare_gradients, finite_difference_gradient
from .trainer import (STREAM_EVAL, STREAM_SPLIT, TrainConfig, coerce_config_values,
                      read_config_file, stream_seed, sweep, train, write_config_file)

log = logging.getLogger("marsrec")

# CLI flag -> TrainConfig field
TRAIN_FLAGS = {
    "variant": "variant", "k": "k", "dim": "dim", "lr": "learning_rate",
    "lambda_pull": "lambda_pull", "lambda_facet": "lambda_facet", "alpha": "alpha",
    "beta": "beta", "batch_size": "batch_size", "epochs": "epochs", "n_neg": "n_neg",
    "workers": "workers", "patience": "patience", "eval_every": "eval_every",
    "fixed_margin": "fixed_margin",
}


class CLIError(Exception):
    pass


def _seed_int(seed: int, stream: int) -> int:
    return int(stream_seed(seed, stream).generate_state(1)[0])


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def resolve_train_config(args) -> TrainConfig:
    values = read_config_file(args.config) if args.config else {}
    for flag, key in TRAIN_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    if args.seed is not None:
        values["seed"] = args.seed
    try:
        return TrainConfig(**coerce_config_values(values))
    except (TypeError, ValueError) as exc:
        raise CLIError(f"invalid configuration: {exc}") from None


def cmd_split(args):
    ds = dsm.load_interactions(args.input, delimiter=args.delimiter, skip_header=args.skip_header)
    seed = args.seed if args.seed is not None else 0
    split = dsm.leave_one_out_split(ds, seed=stream_seed(seed, STREAM_SPLIT))
    out = Path(args.out)
    dsm.write_split(split, out)
    summary = split.summary()
    summary["density"] = len(ds) / (ds.n_users * ds.n_items)
    _write_json(out / "summary.json", summary)
    print(json.dumps(summary, sort_keys=True))


def cmd_train(args):
    cfg = resolve_train_config(args)
    split = dsm.read_split(args.split)
    out = Path(args.out)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    write_config_file(cfg, out / "resolved_config.txt")

    def on_checkpoint(epoch, params):
        save_checkpoint(ckpt_dir / f"epoch_{epoch:04d}.npz", params, cfg.geometry, cfg.variant,
                        cfg.seed)

    params, train_log = train(split, cfg, on_checkpoint=on_checkpoint)
    save_checkpoint(out / "model.npz", params, cfg.geometry, cfg.variant, cfg.seed,
                    extra={"best_epoch": train_log.best_epoch})
    train_log.write_jsonl(out / "train_log.jsonl")
    print(json.dumps({"best_epoch": train_log.best_epoch, "epochs_logged": len(train_log.records),
                      "stopped_early": train_log.stopped_early}))


def cmd_eval(args):
    params, meta = load_checkpoint(args.checkpoint)
    split = dsm.read_split(args.split)
    seed = args.seed if args.seed is not None else meta.get("seed", 0)
    cutoffs = tuple(int(c) for c in args.cutoffs.split(","))
    protocol = EvalProtocol(args.negatives, cutoffs, seed=_seed_int(seed, STREAM_EVAL))
    report = evaluate(params, split, protocol, meta["geometry"], target=args.target)
    if not report.check_invariants():
        raise CLIError("report violates nDCG <= HR or HR monotonicity")
    text = report.to_json()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    if args.ranks_out:
        users = split.test_users if args.target == "test" else split.dev_users
        with open(args.ranks_out, "w") as f:
            for u, r in zip(users, report.ranks):
                f.write(f"{u}\t{r}\n")
    print(text)


def _parse_grid(specs):
    grid = {}
    for spec in specs:
        if "=" not in spec:
            raise CLIError(f"bad --grid entry {spec!r}; expected key=v1,v2,...")
        key, values = spec.split("=", 1)
        key = TRAIN_FLAGS.get(key.strip().replace("-", "_"), key.strip().replace("-", "_"))
        grid[key] = [coerce_config_values({key: v})[key] for v in values.split(",")]
    return grid


def cmd_sweep(args):
    cfg = resolve_train_config(args)
    split = dsm.read_split(args.split)
    grid = _parse_grid(args.grid)
    if not grid:
        raise CLIError("sweep needs at least one --grid entry")
    results = sweep(split, cfg, grid)
    rows = [{"config": {k: c.to_dict()[k] for k in grid}, "dev_ndcg10": s} for c, s in results]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "sweep.json", rows)
    for row in rows:
        print(json.dumps(row, sort_keys=True))


def cmd_export(args):
    params, meta = load_checkpoint(args.checkpoint)
    user_ids = item_ids = None
    if args.split:
        split = dsm.read_split(args.split)
        user_ids, item_ids = split.train.user_ids, split.train.item_ids
    paths = export_facet_embeddings(params, args.out, user_ids, item_ids)
    print(json.dumps({"files": [str(p) for p in paths]}))


def gradcheck_report(seed=0, variant=Variant.MARS, n_users=7, n_items=11, dim=5, k=3,
                     h=1e-5, corrupt=None):
    """Finite differences vs analytic gradients on a small random model.

    ``corrupt`` names a ``group:flat_index`` coordinate of the analytic
    gradient to perturb (a negative control for the checker itself).
    """
    variant = Variant(variant)
    k = 1 if variant is Variant.CML else k
    rng = np.random.default_rng(seed)
    pairs = [(u, i) for u in range(n_users) for i in range(n_items) if rng.random() < 0.35]
    pairs += [(u, u % n_items) for u in range(n_users)]
    ds = dsm.InteractionDataset.from_pairs(pairs, n_users, n_items)
    margins = dsm.compute_adaptive_margins(ds)
    params = init_params(n_users, n_items, dim, k, variant.geometry, seed=rng)
    params.user_proj += rng.normal(0, 0.3, params.user_proj.shape)
    params.item_proj += rng.normal(0, 0.3, params.item_proj.shape)
    params.facet_logits += rng.normal(0, 1.0, params.facet_logits.shape)
    cfg = LossConfig(lambda_pull=0.5, lambda_facet=0.5)
    batch = dsm.sample_batch(ds, dsm.user_sampling_distribution(ds), 12, 2, rng)
    report = {}
    for comp in ("push", "pull", "facet", "total"):
        if comp == "total":
            _, analytic = total_loss_gradients(params, batch, margins, cfg, variant)
            fn = lambda p: total_loss_gradients(p, batch, margins, cfg, variant)[0].total  # noqa: E731
        else:
            _, analytic = component_gradients(params, batch, margins, cfg, variant, comp)
            fn = lambda p, c=comp: component_gradients(p, batch, margins, cfg, variant, c)[0]  # noqa: E731
        if corrupt:
            group, idx = corrupt.split(":")
            getattr(analytic, group).reshape(-1)[int(idx)] += 1e-2
        numeric = finite_difference_gradient(fn, params, h)
        groups = compare_gradients(analytic, numeric)
        report[comp] = {g: {"worst_error": e, "worst_index": i, "passed": ok}
                        for g, (e, i, ok) in groups.items()}
    passed = all(v["passed"] for comp in report.values() for v in comp.values())
    return {"variant": variant.value, "seed": seed, "passed": passed, "terms": report}


def cmd_gradcheck(args):
    variants = [Variant(args.variant)] if args.variant else list(Variant)
    seed = args.seed if args.seed is not None else 0
    results = [gradcheck_report(seed, v, corrupt=args.corrupt) for v in variants]
    failed = []
    for res in results:
        for comp, groups in res["terms"].items():
            for g, r in groups.items():
                if not r["passed"]:
                    failed.append(f"{res['variant']}/{comp}/{g}[{r['worst_index']}] "
                                  f"error {r['worst_error']:.3g}")
    text = json.dumps({"passed": not failed, "failures": failed, "results": results},
                      indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    for line in failed:
        print(f"gradcheck FAIL: {line}", file=sys.stderr)
    return 0 if not failed else 1


def cmd_synth_conflict(args):
    seed = args.seed if args.seed is not None else 0
    ds = dsm.generate_conflict_dataset(args.blocks, seed)
    with open(args.out, "w") as f:
        for u, i, t in zip(ds.users, ds.items, ds.timestamps):
            f.write(f"{u}\t{i}\t{t}\n")
    print(json.dumps({"n_users": ds.n_users, "n_items": ds.n_items, "n_pairs": len(ds)}))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="root random seed")
    common.add_argument("--workers", type=int, help="worker count (1 = deterministic)")
    common.add_argument("-v", "--verbose", action="store_true")

    hyper = argparse.ArgumentParser(add_help=False)
    hyper.add_argument("--variant", choices=[v.value for v in Variant])
    hyper.add_argument("--k", type=int, help="number of facets")
    hyper.add_argument("--dim", type=int, help="embedding dimension")
    hyper.add_argument("--lr", type=float, help="learning rate")
    hyper.add_argument("--lambda-pull", type=float)
    hyper.add_argument("--lambda-facet", type=float)
    hyper.add_argument("--alpha", type=float)
    hyper.add_argument("--beta", type=float)
    hyper.add_argument("--batch-size", type=int)
    hyper.add_argument("--epochs", type=int)
    hyper.add_argument("--n-neg", type=int)
    hyper.add_argument("--patience", type=int)
    hyper.add_argument("--eval-every", type=int)
    hyper.add_argument("--fixed-margin", type=float)

    parser = argparse.ArgumentParser(prog="marsrec", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", parents=[common], help="leave-one-out split of a log file")
    p.add_argument("--input", required=True)
    p.add_argument("--delimiter", default="\t")
    p.add_argument("--skip-header", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", parents=[common, hyper], help="train one model")
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="HR@N / nDCG@N of a checkpoint")
    p.add_argument("--split", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--negatives", type=int, default=100)
    p.add_argument("--cutoffs", default="10,20")
    p.add_argument("--target", choices=["test", "dev"], default="test")
    p.add_argument("--out")
    p.add_argument("--ranks-out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common, hyper], help="grid search on the dev set")
    p.add_argument("--split", required=True)
    p.add_argument("--grid", action="append", default=[], help="key=v1,v2,... (repeatable)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export", parents=[common], help="write per-facet embeddings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", help="split dir, for raw ids")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--variant", choices=[v.value for v in Variant])
    p.add_argument("--corrupt", help=argparse.SUPPRESS)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth-conflict", parents=[common], help="write the conflict dataset")
    p.add_argument("--blocks", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_conflict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.workers not in (None, 1):
        print("marsrec: only --workers 1 is supported", file=sys.stderr)
        return 2
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            try:
                rc = args.func(args)
            finally:
                for w in caught:
                    print(f"marsrec {args.command}: warning: {w.message}", file=sys.stderr)
    except CLIError as exc:
        print(f"marsrec {args.command}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"marsrec {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
