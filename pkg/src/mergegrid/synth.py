"""Synthetic interaction logs with temporal drift, and a toy next-item recommender.

Time is integer seconds.  A log has four windows::

    pretrain [.., t0)   P1 [t0, t1)   P2 [t1, t2)   test [t2, test_end)

Only *active* users interact during P2.  From ``t1`` on, active users choose
items with a rotated preference vector, so the P2 data (and the model trained
on it) carries a preference shift that non-active users never made.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .tensor_store import Checkpoint, TensorEntry

DAY = 86400
STAGES = ("pretrain", "p1", "p2")
STAGE_PHASE = {"pretrain": "t0", "p1": "t1", "p2": "t2"}
WINDOWS = ("pretrain", "p1", "p2", "test")


class DataError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Boundaries:
    t0: int
    t1: int
    t2: int
    test_end: int

    def __post_init__(self):
        if not self.t0 <= self.t1 <= self.t2 <= self.test_end:
            raise DataError(f"boundaries must be ordered t0 <= t1 <= t2 <= test_end, got {self}")

    def window_of(self, ts: np.ndarray) -> np.ndarray:
        """Window index per timestamp: 0..3 for pretrain/P1/P2/test, 4 past ``test_end``."""
        return np.searchsorted(np.array([self.t0, self.t1, self.t2, self.test_end]), ts, side="right")

    def span(self, window: str) -> tuple[int | None, int]:
        return {
            "pretrain": (None, self.t0),
            "p1": (self.t0, self.t1),
            "p2": (self.t1, self.t2),
            "test": (self.t2, self.test_end),
        }[window]


@dataclass(eq=False)
class InteractionLog:
    """Events sorted by (timestamp, user, item), stored as integer codes into sorted vocabularies."""

    users: list[str]
    items: list[str]
    user_idx: np.ndarray
    item_idx: np.ndarray
    ts: np.ndarray
    boundaries: Boundaries
    domain: str | None = None
    duplicates_dropped: int = 0

    def __post_init__(self):
        self.user_idx = np.asarray(self.user_idx, dtype=np.int64)
        self.item_idx = np.asarray(self.item_idx, dtype=np.int64)
        self.ts = np.asarray(self.ts, dtype=np.int64)
        order = np.lexsort((self.item_idx, self.user_idx, self.ts))
        self.user_idx, self.item_idx, self.ts = self.user_idx[order], self.item_idx[order], self.ts[order]
        first = np.full(len(self.items), np.iinfo(np.int64).max, dtype=np.int64)
        np.minimum.at(first, self.item_idx, self.ts)
        self._first_seen = first

    @classmethod
    def from_records(cls, records, boundaries: Boundaries, domain: str | None = None, dedupe: bool = True) -> InteractionLog:
        records = list(records)
        dropped = 0
        if dedupe:
            unique = set(records)
            dropped = len(records) - len(unique)
            records = list(unique)
        users = sorted({r[0] for r in records})
        items = sorted({r[1] for r in records})
        u_code = {u: k for k, u in enumerate(users)}
        i_code = {i: k for k, i in enumerate(items)}
        return cls(
            users,
            items,
            np.array([u_code[r[0]] for r in records], dtype=np.int64),
            np.array([i_code[r[1]] for r in records], dtype=np.int64),
            np.array([r[2] for r in records], dtype=np.int64),
            boundaries,
            domain,
            dropped,
        )

    def __len__(self) -> int:
        return int(self.ts.size)

    @property
    def events(self) -> Iterator[tuple[str, str, int]]:
        for u, i, t in zip(self.user_idx.tolist(), self.item_idx.tolist(), self.ts.tolist()):
            yield self.users[u], self.items[i], t

    @property
    def item_first_seen(self) -> dict[str, int]:
        return {item: int(t) for item, t in zip(self.items, self._first_seen.tolist())}

    def first_seen_codes(self) -> np.ndarray:
        return self._first_seen

    def windows(self) -> np.ndarray:
        return self.boundaries.window_of(self.ts)

    def window_mask(self, window: str) -> np.ndarray:
        return self.windows() == WINDOWS.index(window)

    def window_counts(self) -> dict[str, int]:
        w = self.windows()
        counts = {name: int((w == k).sum()) for k, name in enumerate(WINDOWS)}
        counts["outside"] = int((w == len(WINDOWS)).sum())
        return counts

    def histories(self, length: int) -> tuple[np.ndarray, np.ndarray]:
        """For every event, the item codes of the same user's previous ``length`` events.

        Returns ``(hist, n)`` where ``hist`` is ``(events, length)`` padded with -1
        (most recent last) and ``n`` the number of real entries.
        """
        hist = np.full((len(self), length), -1, dtype=np.int64)
        n = np.zeros(len(self), dtype=np.int64)
        recent: dict[int, list[int]] = {}
        for k, (u, i) in enumerate(zip(self.user_idx.tolist(), self.item_idx.tolist())):
            prev = recent.setdefault(u, [])
            if prev:
                tail = prev[-length:]
                hist[k, length - len(tail):] = tail
                n[k] = len(tail)
            prev.append(i)
        return hist, n

    def to_jsonl(self) -> str:
        return "".join(json.dumps({"user": u, "item": i, "ts": t}) + "\n" for u, i, t in self.events)

    def meta(self) -> dict:
        return {"domain": self.domain, "boundaries": asdict(self.boundaries)}

    def save(self, path: str | Path) -> None:
        """Write JSONL events plus a ``<path>.meta.json`` sidecar with the boundaries."""
        path = Path(path)
        path.write_text(self.to_jsonl())
        sidecar(path).write_text(json.dumps(self.meta(), indent=2, sort_keys=True) + "\n")


def sidecar(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def split_active(log: InteractionLog) -> tuple[set[str], set[str]]:
    """Test-window users with / without at least one event in [t1, t2)."""
    w = log.windows()
    test_users = set(log.user_idx[w == 3].tolist())
    p2_users = set(log.user_idx[w == 2].tolist())
    active = {log.users[u] for u in test_users & p2_users}
    nonactive = {log.users[u] for u in test_users - p2_users}
    return active, nonactive


# ---------------------------------------------------------------- ingest


def _parse_lines(text: str, fmt: str):
    if fmt == "jsonl":
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                yield str(rec["user"]), str(rec["item"]), _as_int(rec["ts"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"line {lineno}: unparseable record ({exc})") from None
        return
    reader = csv.reader(io.StringIO(text))
    for lineno, row in enumerate(reader, 1):
        if not row:
            continue
        if lineno == 1 and [c.strip() for c in row] == ["user", "item", "ts"]:
            continue
        try:
            user, item, ts = row
            yield user.strip(), item.strip(), _as_int(ts.strip())
        except ValueError as exc:
            raise DataError(f"line {lineno}: unparseable record ({exc})") from None


def _as_int(value) -> int:
    if isinstance(value, bool):
        raise ValueError("boolean timestamp")
    if isinstance(value, float):
        if not value.is_integer():
            raise ValueError(f"non-integer timestamp {value}")
        return int(value)
    return int(value)


def ingest(path: str | Path, boundaries: Boundaries | None = None, domain: str | None = None) -> InteractionLog:
    """Read a JSONL (``{"user","item","ts"}``) or CSV (``user,item,ts``) events file.

    Boundaries come from the argument or the ``<path>.meta.json`` sidecar.
    Duplicate (user, item, ts) triples are dropped and counted; events past
    ``test_end`` are kept and show up in ``window_counts()["outside"]``.
    """
    path = Path(path)
    meta_path = sidecar(path)
    if boundaries is None or domain is None:
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        if boundaries is None:
            if "boundaries" not in meta:
                raise DataError(f"no boundaries given and no sidecar {meta_path.name}")
            boundaries = Boundaries(**meta["boundaries"])
        domain = domain or meta.get("domain")
    text = path.read_text()
    stripped = text.lstrip()
    fmt = "jsonl" if path.suffix in (".jsonl", ".json") or stripped.startswith("{") else "csv"
    return InteractionLog.from_records(_parse_lines(text, fmt), boundaries, domain)


# ---------------------------------------------------------------- generation


@dataclass(frozen=True)
class SynthConfig:
    domain_name: str
    n_users: int
    n_items: int
    latent_dim: int = 8
    drift_angle_per_phase: float = 0.0
    active_prob: float = 0.5
    item_arrival_rate: float = 0.0
    events_per_phase: tuple[int, int, int, int] = (4000, 1500, 1500, 1500)
    seed: int = 0
    window_days: tuple[int, int, int, int] = (360, 90, 90, 90)
    n_clusters: int = 4
    cluster_spread: float = 0.5
    sharpness: float = 6.0
    recency_days: float = 0.0
    initial_items: float = 0.25
    item_prefix: str | None = None
    catalog_seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "events_per_phase", tuple(int(x) for x in self.events_per_phase))
        object.__setattr__(self, "window_days", tuple(int(x) for x in self.window_days))
        counts = [self.n_users, self.n_items, self.latent_dim, self.n_clusters, *self.window_days]
        if any(c <= 0 for c in counts):
            raise DataError("user/item/latent/cluster counts and window lengths must be positive")
        if len(self.events_per_phase) != 4 or any(c < 0 for c in self.events_per_phase):
            raise DataError("events_per_phase needs four non-negative counts")
        if not 0 <= self.active_prob <= 1:
            raise DataError(f"active_prob must be in [0, 1], got {self.active_prob}")
        if self.item_arrival_rate < 0:
            raise DataError("item_arrival_rate must be non-negative")

    @classmethod
    def from_dict(cls, d: Mapping) -> SynthConfig:
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def prefix(self) -> str:
        return f"{self.domain_name}:" if self.item_prefix is None else self.item_prefix

    def item_labels(self) -> list[str]:
        return [f"{self.prefix}i{k:04d}" for k in range(self.n_items)]

    def user_labels(self) -> list[str]:
        return [f"u{k:04d}" for k in range(self.n_users)]

    def boundaries(self) -> Boundaries:
        edges = np.cumsum(self.window_days) * DAY
        return Boundaries(*(int(e) for e in edges))


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _rotation(dim: int, angle: float, rng: np.random.Generator) -> np.ndarray:
    """Rotate by ``angle`` inside every plane of a random orthonormal pairing."""
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    block = np.eye(dim)
    c, s = math.cos(angle), math.sin(angle)
    for k in range(0, dim - 1, 2):
        block[k : k + 2, k : k + 2] = [[c, -s], [s, c]]
    return q @ block @ q.T


def generate(config: SynthConfig) -> InteractionLog:
    """Draw a log; identical configs (including ``seed``) give identical logs."""
    rng = np.random.default_rng(config.seed)
    d = config.latent_dim
    bounds = config.boundaries()
    edges = [0, bounds.t0, bounds.t1, bounds.t2, bounds.test_end]

    # a shared catalog_seed gives several domains the same item geometry
    item_rng = rng if config.catalog_seed is None else np.random.default_rng([config.catalog_seed, 0xCA7])
    item_vecs = _unit(item_rng.standard_normal((config.n_items, d)))
    centers = _unit(rng.standard_normal((config.n_clusters, d)))
    assign = rng.integers(config.n_clusters, size=config.n_users)
    prefs = _unit(centers[assign] + config.cluster_spread * rng.standard_normal((config.n_users, d)) / math.sqrt(d))
    active = rng.random(config.n_users) < config.active_prob
    rotated = prefs @ _rotation(d, config.drift_angle_per_phase, rng).T

    horizon_days = bounds.test_end / DAY
    n_initial = max(1, int(round(config.initial_items * config.n_items)))
    n_new = min(config.n_items - n_initial, int(round(config.item_arrival_rate * horizon_days)))
    arrival = np.zeros(config.n_items, dtype=np.int64)
    if n_new > 0:
        late = rng.choice(config.n_items, size=n_new, replace=False)
        arrival[late] = rng.integers(0, bounds.test_end, size=n_new)

    users, items, stamps = [], [], []
    active_ids = np.flatnonzero(active)
    for w, count in enumerate(config.events_per_phase):
        pool = active_ids if w == 2 else np.arange(config.n_users)
        if count == 0 or pool.size == 0:
            continue
        who = pool[rng.integers(pool.size, size=count)]
        when = np.sort(rng.integers(edges[w], edges[w + 1], size=count))
        drifted = active[who] & (when >= bounds.t1)
        pref = np.where(drifted[:, None], rotated[who], prefs[who])
        logits = config.sharpness * pref @ item_vecs.T
        age_days = (when[:, None] - arrival[None, :]) / DAY
        if config.recency_days > 0:
            logits = logits - age_days / config.recency_days
        logits = np.where(age_days >= 0, logits, -np.inf)
        choice = np.argmax(logits + rng.gumbel(size=logits.shape), axis=1)
        users.append(who)
        items.append(choice)
        stamps.append(when)

    if not users:
        return InteractionLog([], [], [], [], [], bounds, config.domain_name)
    user_labels, item_labels = config.user_labels(), config.item_labels()
    records = zip(
        (user_labels[u] for u in np.concatenate(users).tolist()),
        (item_labels[i] for i in np.concatenate(items).tolist()),
        np.concatenate(stamps).tolist(),
    )
    return InteractionLog.from_records(records, bounds, config.domain_name, dedupe=True)


# ---------------------------------------------------------------- statistics


@dataclass
class LogStats:
    n_users: int
    n_active: int
    n_nonactive: int
    p_active: float
    avg_gap_days: float


def compute_stats(log: InteractionLog) -> LogStats:
    """Active-user share among test users and mean item age (days) over training events.

    Item age uses the item's first interaction in the log as its release time.
    """
    train = log.ts < log.boundaries.t2
    if not train.any():
        raise DataError("log has no training events before t2")
    gaps = (log.ts[train] - log.first_seen_codes()[log.item_idx[train]]) / DAY
    active, nonactive = split_active(log)
    n_users = len(active) + len(nonactive)
    return LogStats(
        n_users=n_users,
        n_active=len(active),
        n_nonactive=len(nonactive),
        p_active=len(active) / n_users if n_users else 0.0,
        avg_gap_days=math.fsum(gaps.tolist()) / gaps.size,
    )


# ---------------------------------------------------------------- toy model

ITEM_EMB = "item_embeddings"
TRANSFORM = "transform_matrix"


@dataclass(frozen=True)
class ToyModelSpec:
    latent_dim: int = 16
    history_len: int = 10
    learning_rate: float = 0.5
    epochs: Mapping[str, int] = field(default_factory=lambda: {"pretrain": 3, "p1": 2, "p2": 2})
    negatives_per_step: int = 16
    batch_size: int = 32
    init_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "epochs", dict(self.epochs))
        if min(self.latent_dim, self.history_len, self.batch_size) <= 0 or self.learning_rate <= 0:
            raise DataError("toy model hyperparameters must be positive")
        if self.negatives_per_step < 0:
            raise DataError("negatives_per_step must be >= 0 (0 = full softmax)")

    @classmethod
    def from_dict(cls, d: Mapping) -> ToyModelSpec:
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def init_checkpoint(item_labels: Sequence[str], spec: ToyModelSpec, seed: int, ckpt_id: str = "base") -> Checkpoint:
    """Random-parameter model; plays the role of the shared pretrained base."""
    rng = np.random.default_rng([seed, 0x1A17])
    d = spec.latent_dim
    emb = spec.init_scale * rng.standard_normal((len(item_labels), d))
    transform = rng.standard_normal((d, d)) / math.sqrt(d)
    return Checkpoint(
        id=ckpt_id,
        tensors=[
            TensorEntry(ITEM_EMB, emb.astype(np.float32), list(item_labels)),
            TensorEntry(TRANSFORM, transform.astype(np.float32)),
        ],
        paradigm="toy-semantic-embedding",
        seed=seed,
    )


def _log_softmax(s: np.ndarray) -> np.ndarray:
    m = s.max(axis=1, keepdims=True)
    return s - m - np.log(np.exp(s - m).sum(axis=1, keepdims=True))


def train(
    log: InteractionLog,
    spec: ToyModelSpec,
    stage: str,
    init: Checkpoint | None = None,
    seed: int | None = None,
    ckpt_id: str | None = None,
) -> Checkpoint:
    """Train the mean-pool next-item model on one stage's window with plain minibatch SGD.

    score(history, item) = (W @ mean(E[history])) . E[item]; loss is sampled
    softmax cross-entropy against ``negatives_per_step`` uniform negatives drawn
    from the log's items (full softmax over them when that is 0).
    """
    if stage not in STAGES:
        raise DataError(f"stage must be one of {STAGES}, got {stage!r}")
    if stage != "pretrain" and init is None:
        raise DataError(f"stage {stage!r} needs an init checkpoint")
    seed = spec.seed if seed is None else seed
    if init is None:
        init = init_checkpoint(log.items, spec, seed, ckpt_id=f"{log.domain or 'model'}_init")
    if ITEM_EMB not in init or TRANSFORM not in init:
        raise DataError(f"init checkpoint {init.id!r} lacks {ITEM_EMB}/{TRANSFORM}")
    table = init[ITEM_EMB]
    row_of = {label: r for r, label in enumerate(table.row_labels or ())}
    missing = [i for i in log.items if i not in row_of]
    if missing:
        raise DataError(f"{len(missing)} log items have no embedding row, e.g. {missing[0]!r}")
    code_to_row = np.array([row_of[i] for i in log.items], dtype=np.int64)

    length = spec.history_len
    hist, n_hist = log.histories(length)
    mask = log.window_mask(stage) & (n_hist > 0)
    sample_idx = np.flatnonzero(mask)
    if sample_idx.size == 0:
        raise DataError(f"no trainable events in the {stage} window")
    rows_hist = np.where(hist >= 0, code_to_row[np.maximum(hist, 0)], -1)[sample_idx]
    weight = (rows_hist >= 0) / n_hist[sample_idx][:, None]
    rows_hist = np.maximum(rows_hist, 0)
    targets = code_to_row[log.item_idx[sample_idx]]
    catalog = np.unique(code_to_row)

    E = table.data.astype(np.float64).copy()
    W = init[TRANSFORM].data.astype(np.float64).copy()
    rng = np.random.default_rng([seed, STAGES.index(stage) + 1])
    lr = spec.learning_rate
    full = spec.negatives_per_step == 0
    if full:
        target_pos = np.searchsorted(catalog, targets)

    for epoch in range(spec.epochs[stage]):
        order = rng.permutation(sample_idx.size)
        for step, lo in enumerate(range(0, order.size, spec.batch_size)):
            b = order[lo : lo + spec.batch_size]
            bsz = b.size
            h, wt = rows_hist[b], weight[b]
            q = np.einsum("bl,bld->bd", wt, E[h])
            z = q @ W.T
            if full:
                cand = np.broadcast_to(catalog, (bsz, catalog.size))
                pos = target_pos[b]
            else:
                negs = catalog[rng.integers(catalog.size, size=(bsz, spec.negatives_per_step))]
                cand = np.concatenate([targets[b][:, None], negs], axis=1)
                pos = np.zeros(bsz, dtype=np.int64)
            ec = E[cand]
            logp = _log_softmax(np.einsum("bd,bkd->bk", z, ec))
            loss = -logp[np.arange(bsz), pos].mean()
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss in {stage} training at epoch {epoch}, step {step}")
            g = np.exp(logp)
            g[np.arange(bsz), pos] -= 1.0
            g /= bsz
            dz = np.einsum("bk,bkd->bd", g, ec)
            dW = dz.T @ q
            dq = dz @ W
            dE = np.zeros_like(E)
            np.add.at(dE, cand.reshape(-1), (g[:, :, None] * z[:, None, :]).reshape(-1, E.shape[1]))
            np.add.at(dE, h.reshape(-1), (wt[:, :, None] * dq[:, None, :]).reshape(-1, E.shape[1]))
            E -= lr * dE
            W -= lr * dW

    phase = STAGE_PHASE[stage]
    domain = log.domain
    return Checkpoint(
        id=ckpt_id or f"{domain or 'model'}_{phase}",
        tensors=[table.with_data(E.astype(np.float32)), init[TRANSFORM].with_data(W.astype(np.float32))],
        domain=domain,
        phase=phase,
        paradigm=init.paradigm or "toy-semantic-embedding",
        lineage=init.id,
        seed=seed,
    )
