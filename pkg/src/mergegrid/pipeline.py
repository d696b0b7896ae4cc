"""End-to-end experiment: synthesize domains, train the grid, merge, sweep, report.

An experiment file is JSON::

    {
      "seed": 42,
      "domains": [{SynthConfig fields except seed}, ...],
      "model": {ToyModelSpec fields except seed},
      "ks": [10, 20],
      "merge": {"trim": {...}, "alpha": 0.5, "linear_weights": [0.5, 0.5],
                "strategies": ["pretrained", "historical", "neutral"]},
      "sweep": {"lambdas": "0:1.5:0.05", "groups": ["all", "active", "nonactive"],
                "metric": "ndcg@10"}
    }

Every random choice derives from ``seed``.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

from . import rng
from .evaluation import Evaluator, dump_json, relative_report, report_csv
from .grid import BaseStrategy, GridManifest, new_manifest, register, resolve_base
from .merge import TrimConfig, alpha_merge, linear_merge, subspace_merge, task_vector
from .synth import STAGE_PHASE, STAGES, SynthConfig, ToyModelSpec, compute_stats, generate, init_checkpoint, train
from .temporal import DomainStats, blend_lambda, loo_predict, parse_lambdas, sweep_lambda, temporal_shift
from .tensor_store import save

log = logging.getLogger(__name__)

HEAT_COLUMNS = ("pair", "strategy", "domain", "metric", "merged", "baseline", "change_pct")
STATS_COLUMNS = ("domain", "avg_gap_days", "lambda_star", "p_active")
STRATEGIES = ("weighted", "pretrained", "historical", "neutral")


@dataclass
class Experiment:
    seed: int
    domains: list[dict]
    model: dict = field(default_factory=dict)
    ks: tuple[int, ...] = (10, 20)
    merge: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    name: str = "experiment"
    shared_catalog: bool = False

    @classmethod
    def from_dict(cls, d: Mapping) -> Experiment:
        if "seed" not in d:
            raise ValueError("experiment file needs an explicit seed")
        return cls(
            seed=int(d["seed"]),
            domains=list(d["domains"]),
            model=dict(d.get("model", {})),
            ks=tuple(d.get("ks", (10, 20))),
            merge=dict(d.get("merge", {})),
            sweep=dict(d.get("sweep", {})),
            name=d.get("name", "experiment"),
            shared_catalog=bool(d.get("shared_catalog", False)),
        )

    @classmethod
    def load(cls, path: str | Path) -> Experiment:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_seed(self, seed: int) -> Experiment:
        return replace(self, seed=seed)

    def sub_seed(self, stream: int) -> int:
        return rng.derive_seed(self.seed, stream) >> 1

    def synth_configs(self) -> list[SynthConfig]:
        shared = {"catalog_seed": self.sub_seed(500), "item_prefix": ""} if self.shared_catalog else {}
        return [SynthConfig.from_dict({**d, **shared, "seed": self.sub_seed(k)}) for k, d in enumerate(self.domains)]

    def model_spec(self) -> ToyModelSpec:
        return ToyModelSpec.from_dict({**self.model, "seed": self.sub_seed(1000)})

    def trim(self) -> TrimConfig:
        cfg = {"ties_keep_percent": 20, "ties_sign_election": True, "dare_drop_prob": 0.1}
        cfg.update(self.merge.get("trim", {}))
        cfg.setdefault("seed", self.sub_seed(2000))
        return TrimConfig.from_dict(cfg)


@dataclass
class PipelineResult:
    out_dir: Path
    sweep: dict
    heat_rows: list[dict]
    joint: dict[str, dict[str, float]]
    stats: list[DomainStats]

    def argmax_gap(self, domain: str) -> float:
        g = self.sweep[domain]["groups"]
        return g["active"]["argmax"] - g["nonactive"]["argmax"]


def run(exp: Experiment, out_dir: str | Path, write_logs: bool = True) -> PipelineResult:
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "events").mkdir(exist_ok=True)
    spec = exp.model_spec()
    configs = exp.synth_configs()
    names = [c.domain_name for c in configs]
    if len(set(names)) != len(names):
        raise ValueError("domain names must be unique")

    logs = {}
    for cfg in configs:
        logs[cfg.domain_name] = generate(cfg)
        if write_logs:
            logs[cfg.domain_name].save(out / "events" / f"{cfg.domain_name}.jsonl")
        log.info("generated %s: %s", cfg.domain_name, logs[cfg.domain_name].window_counts())

    labels = list(dict.fromkeys(label for cfg in configs for label in cfg.item_labels()))
    base = init_checkpoint(labels, spec, exp.sub_seed(3000), ckpt_id="pretrained")
    base_path = out / "checkpoints" / "pretrained.mgt"
    save(base, base_path)
    manifest = new_manifest(base_path, root=out)

    ckpts = {}
    for cfg in configs:
        d = cfg.domain_name
        prev = base
        for k, stage in enumerate(STAGES):
            phase = STAGE_PHASE[stage]
            prev = train(logs[d], spec, stage, init=prev, seed=exp.sub_seed(4000 + 10 * configs.index(cfg) + k), ckpt_id=f"{d}_{phase}")
            path = out / "checkpoints" / f"{d}_{phase}.mgt"
            save(prev, path)
            manifest = register(manifest, d, phase, path)
            ckpts[(d, phase)] = prev
        log.info("trained grid row %s", d)
    manifest.save(out / "grid.json")

    ks = tuple(exp.ks)
    evaluators = {d: Evaluator(logs[d], spec.history_len) for d in names}
    metric = exp.sweep.get("metric", "ndcg@10")
    baselines = {d: evaluators[d].evaluate(ckpts[(d, "t2")], ks) for d in names}

    trim_cfg = exp.trim()
    alpha = float(exp.merge.get("alpha", 0.5))
    weights = exp.merge.get("linear_weights", [0.5, 0.5])
    strategies = exp.merge.get("strategies", list(STRATEGIES))
    heat_rows: list[dict] = []
    joint: dict[str, dict[str, float]] = {}
    for di, dj in itertools.combinations(names, 2):
        pair = f"{di}+{dj}"
        targets = [ckpts[(di, "t2")], ckpts[(dj, "t2")]]
        joint[pair] = {}
        for strategy in strategies:
            merged = _merge_pair(strategy, manifest, targets, di, dj, trim_cfg, alpha, weights, f"{pair}.{strategy}")
            records = {d: evaluators[d].evaluate(merged, ks) for d in (di, dj)}
            change = relative_report(records, {d: baselines[d] for d in (di, dj)}, metric)
            for d in (di, dj):
                heat_rows.append(
                    {
                        "pair": pair,
                        "strategy": strategy,
                        "domain": d,
                        "metric": metric,
                        "merged": records[d].get(metric),
                        "baseline": baselines[d].get(metric),
                        "change_pct": change[d],
                    }
                )
            joint[pair][strategy] = sum(records[d].get(metric) / baselines[d].get(metric) for d in (di, dj)) / 2
            log.info("merged %s with %s base: joint %.4f", pair, strategy, joint[pair][strategy])

    lambdas = parse_lambdas(str(exp.sweep.get("lambdas", "0:1.5:0.05")))
    groups = exp.sweep.get("groups", ["all", "active", "nonactive"])
    sweep = {}
    stats = []
    for d in names:
        shift = temporal_shift(ckpts[(d, "t1")], ckpts[(d, "t2")], manifest.phases)
        ev = evaluators[d]
        result = sweep_lambda(ckpts[(d, "t1")], shift, lambdas, lambda c, g: ev(c, g, ks), groups, metric)
        sweep[d] = result.to_dict()
        s = compute_stats(logs[d])
        stats.append(
            DomainStats(d, s.n_users, s.n_active, s.n_nonactive, s.avg_gap_days, result.argmax.get("nonactive"), s.p_active)
        )
        log.info("swept %s: argmax %s", d, result.argmax)

    predictions = {}
    if len(stats) >= 3:
        pred = loo_predict(stats)
        predictions = {s.domain: {"lambda_pred": pred[s.domain], "lambda_blend": blend_lambda(pred[s.domain], s.p_active)} for s in stats}

    (out / "sweep.json").write_text(dump_json(sweep))
    (out / "heat.csv").write_text(report_csv(heat_rows, HEAT_COLUMNS))
    stat_rows = [
        {"domain": s.domain, "avg_gap_days": s.avg_gap_days, "lambda_star": s.lambda_star_nonactive, "p_active": s.p_active}
        for s in stats
    ]
    (out / "stats.csv").write_text(report_csv(stat_rows, STATS_COLUMNS))
    summary = {
        "seed": exp.seed,
        "baselines": {d: r.to_dict() for d, r in baselines.items()},
        "joint": joint,
        "argmax": {d: {g: sweep[d]["groups"][g]["argmax"] for g in groups} for d in names},
        "stats": stat_rows,
        "lambda_prediction": predictions,
    }
    (out / "summary.json").write_text(dump_json(summary))
    return PipelineResult(out, sweep, heat_rows, joint, stats)


def _merge_pair(strategy, manifest: GridManifest, targets, di, dj, trim_cfg, alpha, weights, output_id):
    if strategy == "weighted":
        base = resolve_base(manifest, BaseStrategy("pretrained"))
        tvs = [task_vector(base, t) for t in targets]
        return linear_merge(base, tvs, weights, output_id=output_id)
    if strategy == "pretrained":
        base = resolve_base(manifest, BaseStrategy("pretrained"))
        return subspace_merge(base, [task_vector(base, t) for t in targets], trim_cfg, output_id=output_id)
    if strategy == "historical":
        base = resolve_base(manifest, BaseStrategy("historical", historical=(di, "t1")))
    elif strategy == "neutral":
        base = resolve_base(manifest, BaseStrategy("neutral", neutral_members=((di, "t1"), (dj, "t1"))))
    else:
        raise ValueError(f"unknown merge strategy {strategy!r}")
    tv_i, tv_j = (task_vector(base, t) for t in targets)
    return alpha_merge(base, tv_i, tv_j, alpha, trim_cfg, output_id=output_id)
