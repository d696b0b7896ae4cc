"""``mergegrid`` command line.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numeric failure.
Machine-readable JSON goes to stdout, human-readable logs to stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from . import __version__

log = logging.getLogger("mergegrid")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _ks(text: str) -> list[int]:
    return sorted({int(k) for k in text.split(",") if k.strip()})


def _write_or_print(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------- commands


def cmd_inspect(args) -> int:
    from .tensor_store import load

    ckpt = load(args.path)
    _emit(
        {
            "id": ckpt.id,
            "metadata": ckpt.metadata(),
            "tensors": [
                {"name": e.name, "shape": list(e.shape), "dtype": "F32", "row_labels": e.row_labels is not None}
                for e in ckpt.tensors.values()
            ],
        }
    )
    return EXIT_OK


def cmd_merge(args) -> int:
    from .recipe import CheckpointResolver, MergeRecipe, common_meta, run_recipe
    from .tensor_store import save

    path = Path(args.recipe)
    doc = json.loads(path.read_text())
    if args.seed is not None:
        doc.setdefault("trim", {})
        doc["trim"] = {**(doc["trim"] or {}), "seed": args.seed}
    trim = doc.get("trim") or {}
    if trim.get("dare_drop_prob") is not None and trim.get("seed") is None:
        raise UsageError("DARE trimming needs a seed: set trim.seed in the recipe or pass --seed")
    if args.no_base_term:
        doc["base_term"] = False
    recipe = MergeRecipe.from_dict(doc)
    resolver = CheckpointResolver.for_recipe(doc, path.parent)
    inputs = [resolver.get(i) for i in recipe.inputs]
    base = None if recipe.method == "average" else resolver.base(recipe.base)
    merged = run_recipe(recipe, inputs, base, args.threads).evolve(**common_meta(inputs))
    save(merged, args.out)
    log.info("wrote %s", args.out)
    _emit({"output": str(args.out), "id": merged.id, "lineage": merged.lineage, "recipe": recipe.to_dict()})
    return EXIT_OK


def cmd_norms(args) -> int:
    from .merge import l1_norm, task_vector
    from .tensor_store import load

    target, base = load(args.ckpt), load(args.base)
    per_tensor, total = l1_norm(task_vector(base, target))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["tensor", "name", "l1"])
    for name, value in per_tensor.items():
        w.writerow([target.id, name, repr(value)])
    w.writerow([target.id, "__total__", repr(total)])
    _write_or_print(buf.getvalue(), args.out)
    if args.out:
        _emit({"output": args.out, "target": target.id, "base": base.id, "total_l1": total})
    return EXIT_OK


def cmd_grid(args) -> int:
    from .grid import BaseStrategy, GridManifest, new_manifest, parse_cell, register, resolve_base
    from .tensor_store import save

    if args.grid_cmd == "init":
        manifest = new_manifest(args.base, Path(args.manifest).parent, tuple(args.phases.split(",")))
        manifest.save(args.manifest)
    elif args.grid_cmd == "register":
        manifest = register(GridManifest.load(args.manifest), args.domain, args.phase, args.path, force=args.force)
        manifest.save(args.manifest)
    elif args.grid_cmd == "ls":
        manifest = GridManifest.load(args.manifest)
    else:
        manifest = GridManifest.load(args.manifest)
        strategy = BaseStrategy(
            args.kind,
            historical=parse_cell(args.cell) if args.cell else None,
            neutral_members=tuple(parse_cell(m) for m in args.member or ()),
        )
        ckpt = resolve_base(manifest, strategy)
        save(ckpt, args.out)
        _emit({"output": args.out, "id": ckpt.id, "strategy": strategy.to_dict()})
        return EXIT_OK
    _emit(manifest.to_dict())
    return EXIT_OK


def cmd_temporal_sweep(args) -> int:
    from .evaluation import Evaluator
    from .synth import ingest
    from .temporal import parse_lambdas, sweep_lambda, temporal_shift
    from .tensor_store import load

    t1, t2 = load(args.t1), load(args.t2)
    events = ingest(args.log)
    ks = _ks(args.ks)
    groups = args.groups.split(",")
    ev = Evaluator(events, args.history_len, args.per_user_last)
    shift = temporal_shift(t1, t2, ("t0", "t1", "t2"))
    result = sweep_lambda(
        t1, shift, parse_lambdas(args.lambdas), lambda c, g: ev(c, g, ks), groups, args.metric, args.max_lambda
    )
    text = json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n"
    Path(args.out).write_text(text)
    _emit({"output": args.out, "argmax": result.argmax, "metric": args.metric})
    return EXIT_OK


def cmd_predict_lambda(args) -> int:
    from .temporal import DomainStats, blend_lambda, loo_predict

    with open(args.stats, newline="") as fh:
        rows = list(csv.DictReader(fh))
    required = {"domain", "avg_gap_days", "lambda_star", "p_active"}
    if not rows or not required <= set(rows[0]):
        raise ValueError(f"stats file needs columns {sorted(required)}")
    stats = [DomainStats.from_row(r["domain"], float(r["avg_gap_days"]), float(r["lambda_star"]), float(r["p_active"])) for r in rows]
    pred = loo_predict(stats)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["domain", "lambda_pred", "lambda_blend"])
    out = {}
    for s in stats:
        blend = blend_lambda(pred[s.domain], s.p_active)
        w.writerow([s.domain, repr(pred[s.domain]), repr(blend)])
        out[s.domain] = {"lambda_pred": pred[s.domain], "lambda_blend": blend}
    _write_or_print(buf.getvalue(), args.out)
    if args.out:
        _emit({"output": args.out, "predictions": out})
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synth import SynthConfig, ToyModelSpec, compute_stats, generate, ingest, train
    from .tensor_store import load, save

    if args.synth_cmd == "gen":
        cfg = json.loads(Path(args.config).read_text())
        if args.seed is not None:
            cfg["seed"] = args.seed
        if "seed" not in cfg:
            raise UsageError("synth gen needs a seed (config field or --seed)")
        events = generate(SynthConfig.from_dict(cfg))
        events.save(args.out)
        _emit({"output": args.out, "domain": events.domain, "counts": events.window_counts()})
    elif args.synth_cmd == "train":
        if args.seed is None:
            raise UsageError("synth train needs --seed")
        spec = ToyModelSpec.from_dict(json.loads(Path(args.spec).read_text())) if args.spec else ToyModelSpec()
        events = ingest(args.log)
        init = load(args.init) if args.init else None
        ckpt = train(events, spec, args.stage, init=init, seed=args.seed, ckpt_id=args.id)
        save(ckpt, args.out)
        _emit({"output": args.out, "id": ckpt.id, "lineage": ckpt.lineage, "phase": ckpt.phase})
    else:
        s = compute_stats(ingest(args.log))
        _emit(vars(s))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import evaluate
    from .synth import ingest
    from .tensor_store import load

    events = ingest(args.log)
    record = evaluate(load(args.ckpt), events, _ks(args.ks), args.group, args.history_len, args.per_user_last)
    doc = {"domain": events.domain, **record.to_dict()}
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _emit(doc)
    return EXIT_OK


def _records(paths):
    from .evaluation import MetricRecord

    out = {}
    for p in paths:
        doc = json.loads(Path(p).read_text())
        if "n_evaluated" in doc:
            out[doc.get("domain") or Path(p).stem] = MetricRecord.from_dict(doc)
        else:
            out.update({d: MetricRecord.from_dict(r) for d, r in doc.items()})
    return out


def cmd_report(args) -> int:
    from .evaluation import relative_report, report_csv

    merged, baselines = _records(args.merged), _records(args.baseline)
    if len(merged) == 1 and set(merged) != set(baselines):
        merged = next(iter(merged.values()))
    change = relative_report(merged, baselines, args.metric)
    rows = []
    for d, pct in change.items():
        m = merged[d] if isinstance(merged, dict) else merged
        rows.append({"domain": d, "metric": args.metric, "merged": m.get(args.metric), "baseline": baselines[d].get(args.metric), "change_pct": pct})
    text = report_csv(rows, ("domain", "metric", "merged", "baseline", "change_pct"))
    Path(args.out).write_text(text)
    _emit({"output": args.out, "change_pct": change})
    return EXIT_OK


def cmd_pipeline(args) -> int:
    from .pipeline import Experiment, run

    if args.config:
        doc = json.loads(Path(args.config).read_text())
    else:
        from importlib import resources

        doc = json.loads(resources.files("mergegrid").joinpath("experiments/two_domain.json").read_text())
    if args.seed is not None:
        doc["seed"] = args.seed
    if "seed" not in doc:
        raise UsageError("pipeline needs a seed (experiment field or --seed)")
    result = run(Experiment.from_dict(doc), args.out)
    _emit(
        {
            "output": str(result.out_dir),
            "joint": result.joint,
            "argmax": {d: {g: v["argmax"] for g, v in s["groups"].items()} for d, s in result.sweep.items()},
        }
    )
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mergegrid", description="Checkpoint merging and contextual-grid toolkit.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("inspect", help="print tensor names, shapes and metadata")
    s.add_argument("path")
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("merge", help="execute a JSON merge recipe")
    s.add_argument("--recipe", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, help="overrides trim.seed")
    s.add_argument("--threads", type=int, help="worker threads (default: MERGEGRID_THREADS or 1)")
    s.add_argument("--no-base-term", action="store_true", help="omit the base from the merged parameters")
    s.set_defaults(func=cmd_merge)

    s = sub.add_parser("norms", help="per-tensor L1 norms of a task vector, as CSV")
    s.add_argument("ckpt")
    s.add_argument("--base", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_norms)

    s = sub.add_parser("grid", help="manage the (domain, phase) manifest")
    gsub = s.add_subparsers(dest="grid_cmd", required=True, parser_class=_Parser)
    g = gsub.add_parser("init")
    g.add_argument("--manifest", default="grid.json")
    g.add_argument("--base", required=True)
    g.add_argument("--phases", default="t0,t1,t2")
    g = gsub.add_parser("register")
    g.add_argument("--manifest", default="grid.json")
    g.add_argument("--domain", required=True)
    g.add_argument("--phase", required=True)
    g.add_argument("--path", required=True)
    g.add_argument("--force", action="store_true")
    g = gsub.add_parser("ls")
    g.add_argument("--manifest", default="grid.json")
    g = gsub.add_parser("resolve")
    g.add_argument("--manifest", default="grid.json")
    g.add_argument("--kind", choices=("pretrained", "historical", "neutral"), required=True)
    g.add_argument("--cell", help="DOMAIN:PHASE for a historical base")
    g.add_argument("--member", action="append", help="DOMAIN:PHASE, repeat for each neutral member")
    g.add_argument("--out", required=True)
    s.set_defaults(func=cmd_grid)

    s = sub.add_parser("temporal-sweep", help="evaluate theta_t1 + lambda * shift over a lambda grid")
    s.add_argument("--t1", required=True)
    s.add_argument("--t2", required=True)
    s.add_argument("--lambdas", default="0:1.5:0.05")
    s.add_argument("--log", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--groups", default="all,active,nonactive")
    s.add_argument("--metric", default="ndcg@10")
    s.add_argument("--ks", default="10,20")
    s.add_argument("--history-len", type=int, default=10)
    s.add_argument("--per-user-last", action="store_true")
    s.add_argument("--max-lambda", type=float, default=2.0, help="raise to allow stronger extrapolation")
    s.set_defaults(func=cmd_temporal_sweep)

    s = sub.add_parser("predict-lambda", help="leave-one-out lambda* prediction from domain stats")
    s.add_argument("--stats", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_predict_lambda)

    s = sub.add_parser("synth", help="synthetic logs and toy model training")
    ssub = s.add_subparsers(dest="synth_cmd", required=True, parser_class=_Parser)
    g = ssub.add_parser("gen")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g = ssub.add_parser("train")
    g.add_argument("--log", required=True)
    g.add_argument("--stage", choices=("pretrain", "p1", "p2"), required=True)
    g.add_argument("--init")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--spec", help="ToyModelSpec JSON")
    g.add_argument("--id")
    g = ssub.add_parser("stats")
    g.add_argument("--log", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("eval", help="Recall/NDCG of a checkpoint on a log's test window")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--log", required=True)
    s.add_argument("--ks", default="10,20")
    s.add_argument("--group", choices=("all", "active", "nonactive"), default="all")
    s.add_argument("--history-len", type=int, default=10)
    s.add_argument("--per-user-last", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="percent change of merged metrics over baselines, as CSV")
    s.add_argument("--merged", action="append", required=True)
    s.add_argument("--baseline", action="append", required=True)
    s.add_argument("--metric", default="ndcg@10")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("pipeline", help="run an experiment file end to end")
    s.add_argument("--config", help="experiment JSON (default: bundled two-domain grid)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_pipeline)
    return p


def run(argv=None) -> int:
    from .merge import MergeError
    from .synth import NumericError
    from .temporal import SweepError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr
    )
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mergegrid: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError, OverflowError) as exc:
        print(f"mergegrid: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SweepError as exc:
        numeric = isinstance(exc.__cause__, (NumericError, FloatingPointError, OverflowError))
        print(f"mergegrid: {exc}", file=sys.stderr)
        return EXIT_NUMERIC if numeric else EXIT_DATA
    except (OSError, ValueError, KeyError, MergeError) as exc:
        print(f"mergegrid: error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
