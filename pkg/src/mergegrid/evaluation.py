"""Recall@K / NDCG@K over the test window, per user group."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .synth import ITEM_EMB, TRANSFORM, DataError, InteractionLog, split_active
from .tensor_store import Checkpoint

GROUPS = ("all", "active", "nonactive")


def group_split(log: InteractionLog) -> tuple[set[str], set[str]]:
    """(active, non-active) test users; same partition as the domain statistics."""
    return split_active(log)


@dataclass
class MetricRecord:
    recall: dict[int, float]
    ndcg: dict[int, float]
    n_evaluated: int
    group: str = "all"
    skipped: int = 0

    def __post_init__(self):
        ks = sorted(self.recall)
        for k in ks:
            if not (0 <= self.recall[k] <= 1 and 0 <= self.ndcg[k] <= 1):
                raise ValueError(f"metric at K={k} outside [0, 1]")
        for a, b in zip(ks, ks[1:]):
            if self.recall[a] > self.recall[b] or self.ndcg[a] > self.ndcg[b]:
                raise ValueError(f"metrics decrease from K={a} to K={b}")

    def flat(self) -> dict[str, float]:
        out = {f"recall@{k}": v for k, v in sorted(self.recall.items())}
        out.update({f"ndcg@{k}": v for k, v in sorted(self.ndcg.items())})
        return out

    def get(self, metric: str) -> float:
        return self.flat()[metric]

    def to_dict(self) -> dict:
        return {"group": self.group, "n_evaluated": self.n_evaluated, "skipped": self.skipped, **self.flat()}

    @classmethod
    def from_dict(cls, d: Mapping) -> MetricRecord:
        recall, ndcg = {}, {}
        for key, value in d.items():
            name, _, k = key.partition("@")
            if name == "recall":
                recall[int(k)] = float(value)
            elif name == "ndcg":
                ndcg[int(k)] = float(value)
        return cls(recall, ndcg, int(d.get("n_evaluated", 0)), d.get("group", "all"), int(d.get("skipped", 0)))


def metrics_from_ranks(ranks: np.ndarray, ks: Sequence[int], group: str = "all", skipped: int = 0) -> MetricRecord:
    ranks = np.asarray(ranks)
    n = ranks.size
    recall, ndcg = {}, {}
    for k in sorted(ks):
        hit = ranks <= k
        gain = np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0)
        recall[k] = math.fsum(hit.tolist()) / n if n else 0.0
        ndcg[k] = math.fsum(gain.tolist()) / n if n else 0.0
    return MetricRecord(recall, ndcg, n, group, skipped)


@dataclass(eq=False)
class Evaluator:
    """Precomputes test events, histories and group membership for one log.

    ``ranks(ckpt)`` gives the 1-based rank of every evaluable test event's
    target among all log items, history items (other than the target itself)
    removed from the candidates and score ties broken by item id.
    """

    log: InteractionLog
    history_len: int = 10
    per_user_last: bool = False
    _cache: tuple = field(default=(None, None), repr=False)

    def __post_init__(self):
        log = self.log
        hist, n_hist = log.histories(self.history_len)
        test = np.flatnonzero(log.window_mask("test"))
        if self.per_user_last and test.size:
            last = {}
            for k in test.tolist():
                last[int(log.user_idx[k])] = k
            test = np.array(sorted(last.values()), dtype=np.int64)
        has_hist = n_hist[test] > 0
        self.skipped_idx = test[~has_hist]
        self.event_idx = test[has_hist]
        self.hist = hist[self.event_idx]
        self.target = log.item_idx[self.event_idx]
        active, nonactive = group_split(log)
        users = [log.users[u] for u in log.user_idx[self.event_idx].tolist()]
        skipped_users = [log.users[u] for u in log.user_idx[self.skipped_idx].tolist()]
        self.groups = {
            "all": np.ones(len(users), dtype=bool),
            "active": np.array([u in active for u in users], dtype=bool),
            "nonactive": np.array([u in nonactive for u in users], dtype=bool),
        }
        self.skipped_groups = {
            "all": len(skipped_users),
            "active": sum(u in active for u in skipped_users),
            "nonactive": sum(u in nonactive for u in skipped_users),
        }

    def ranks(self, ckpt: Checkpoint) -> np.ndarray:
        if self._cache[0] is ckpt:
            return self._cache[1]
        for name in (ITEM_EMB, TRANSFORM):
            if name not in ckpt:
                raise DataError(f"checkpoint {ckpt.id!r} is missing tensor {name!r}")
        table = ckpt[ITEM_EMB]
        row_of = {label: r for r, label in enumerate(table.row_labels or ())}
        missing = [i for i in self.log.items if i not in row_of]
        if missing:
            raise DataError(f"checkpoint {ckpt.id!r} has no embedding row for item {missing[0]!r}")
        rows = np.array([row_of[i] for i in self.log.items], dtype=np.int64)
        emb = table.data.astype(np.float64)[rows]
        W = ckpt[TRANSFORM].data.astype(np.float64)
        ranks = np.empty(self.event_idx.size, dtype=np.int64)
        n_items = emb.shape[0]
        for lo in range(0, self.event_idx.size, 2048):
            h = self.hist[lo : lo + 2048]
            valid = h >= 0
            q = (emb[np.maximum(h, 0)] * valid[:, :, None]).sum(axis=1) / valid.sum(axis=1, keepdims=True)
            scores = (q @ W.T) @ emb.T
            tgt = self.target[lo : lo + 2048]
            rix = np.arange(tgt.size)
            excluded = np.zeros(scores.shape, dtype=bool)
            excluded[np.repeat(rix, h.shape[1])[valid.reshape(-1)], h[valid]] = True
            excluded[rix, tgt] = False
            t_score = scores[rix, tgt][:, None]
            codes = np.arange(n_items)[None, :]
            ahead = (scores > t_score) | ((scores == t_score) & (codes < tgt[:, None]))
            ranks[lo : lo + 2048] = 1 + (ahead & ~excluded).sum(axis=1)
        self._cache = (ckpt, ranks)
        return ranks

    def evaluate(self, ckpt: Checkpoint, ks: Sequence[int] = (10, 20), group: str = "all") -> MetricRecord:
        if group not in GROUPS:
            raise ValueError(f"group must be one of {GROUPS}, got {group!r}")
        sel = self.groups[group]
        if not sel.any():
            raise DataError(f"no evaluable test events for group {group!r}")
        return metrics_from_ranks(self.ranks(ckpt)[sel], ks, group, self.skipped_groups[group])

    def __call__(self, ckpt: Checkpoint, group: str, ks: Sequence[int] = (10, 20)) -> dict[str, float]:
        return self.evaluate(ckpt, ks, group).flat()


def evaluate(
    ckpt: Checkpoint,
    log: InteractionLog,
    ks: Sequence[int] = (10, 20),
    group: str = "all",
    history_len: int = 10,
    per_user_last: bool = False,
) -> MetricRecord:
    return Evaluator(log, history_len, per_user_last).evaluate(ckpt, ks, group)


def relative_report(
    merged: MetricRecord | Mapping[str, MetricRecord],
    baselines: Mapping[str, MetricRecord],
    metric: str = "ndcg@10",
) -> dict[str, float]:
    """Percent change of the merged model over each domain's own baseline."""
    out = {}
    for domain, base in baselines.items():
        m = merged[domain] if isinstance(merged, Mapping) else merged
        if set(m.recall) != set(base.recall):
            raise ValueError(f"{domain}: K sets differ between merged and baseline records")
        b = base.get(metric)
        if b == 0:
            raise ValueError(f"{domain}: baseline {metric} is zero")
        out[domain] = 100.0 * (m.get(metric) - b) / b
    return out


def report_csv(rows: Sequence[Mapping[str, object]], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({c: _fmt(row[c]) for c in columns})
    return buf.getvalue()


def _fmt(value):
    return repr(float(value)) if isinstance(value, (float, np.floating)) else value


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
