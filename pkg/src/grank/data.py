"""Items, user interaction sequences, TSV ingestion and a synthetic corpus.

A :class:`UserRecord` stores its chronological history column-wise (item ids,
timestamps, dwell, engagement code) plus one held-out target interaction
that postdates the whole history.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import IntegrityError, ParseError

log = logging.getLogger(__name__)

FEATURE_WIDTH = 4  # [dwell, engagement one-hot x3]
N_ENGAGEMENT = 3
LONG_VIEW_DWELL = 0.7
RECENT_WINDOW = 10
TSV_HEADER = ("user_id", "item_id", "timestamp", "dwell", "engagement_code")
PAD = -1


@dataclass(frozen=True)
class Interaction:
    item_id: int
    features: tuple
    timestamp: int


def interaction_features(dwell, engagement) -> np.ndarray:
    dwell = np.asarray(dwell, dtype=np.float64).reshape(-1)
    engagement = np.asarray(engagement, dtype=np.int64).reshape(-1)
    out = np.zeros((dwell.size, FEATURE_WIDTH))
    out[:, 0] = dwell
    out[np.arange(dwell.size), 1 + engagement] = 1.0
    return out


@dataclass(eq=False)
class UserRecord:
    user_id: int
    items: np.ndarray
    timestamps: np.ndarray
    dwell: np.ndarray
    engagement: np.ndarray
    target: int
    target_timestamp: int
    target_dwell: float = 0.0
    target_engagement: int = 0
    demographics: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.items = np.asarray(self.items, dtype=np.int64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.dwell = np.asarray(self.dwell, dtype=np.float64)
        self.engagement = np.asarray(self.engagement, dtype=np.int64)
        self.demographics = np.asarray(self.demographics, dtype=np.float64)
        n = self.items.size
        if not (self.timestamps.size == self.dwell.size == self.engagement.size == n):
            raise ValueError(f"user {self.user_id}: history columns have different lengths")

    def __len__(self):
        return int(self.items.size)

    @property
    def history(self) -> list[Interaction]:
        feats = self.features()
        return [
            Interaction(int(i), tuple(f), int(t)) for i, f, t in zip(self.items, feats, self.timestamps)
        ]

    def features(self) -> np.ndarray:
        return interaction_features(self.dwell, self.engagement)

    def behavior_sequences(self, window: int | None = None) -> dict[str, np.ndarray]:
        """Derived behavior id lists used by the query token.

        click = every interaction, long_view = dwell above 0.7, rs = the most
        recent ten; all restricted to the last ``window`` interactions.
        """
        start = 0 if window is None else max(0, len(self) - window)
        items, dwell = self.items[start:], self.dwell[start:]
        return {
            "rs": items[-RECENT_WINDOW:],
            "click": items,
            "long_view": items[dwell > LONG_VIEW_DWELL],
        }

    def validate(self, n_items: int) -> None:
        if np.any(np.diff(self.timestamps) <= 0):
            raise IntegrityError(f"user {self.user_id}: timestamps are not strictly increasing")
        if len(self) and self.target_timestamp <= self.timestamps[-1]:
            raise IntegrityError(f"user {self.user_id}: target does not postdate the history")
        ids = np.append(self.items, self.target)
        if ids.size and (ids.min() < 0 or ids.max() >= n_items):
            raise IntegrityError(f"user {self.user_id}: item id outside [0, {n_items})")

    def full_sequence(self):
        return (
            np.append(self.items, self.target),
            np.append(self.timestamps, self.target_timestamp),
            np.append(self.dwell, self.target_dwell),
            np.append(self.engagement, self.target_engagement),
        )

    def structurally_equal(self, other: "UserRecord") -> bool:
        return (
            self.user_id == other.user_id
            and self.target == other.target
            and self.target_timestamp == other.target_timestamp
            and np.array_equal(self.items, other.items)
            and np.array_equal(self.timestamps, other.timestamps)
            and np.allclose(self.dwell, other.dwell, atol=1e-6)
            and np.array_equal(self.engagement, other.engagement)
            and np.allclose(self.demographics, other.demographics, atol=1e-6)
        )


def _record_from_sequence(user_id, items, ts, dwell, eng, demographics) -> UserRecord:
    return UserRecord(
        user_id=int(user_id),
        items=items[:-1],
        timestamps=ts[:-1],
        dwell=dwell[:-1],
        engagement=eng[:-1],
        target=int(items[-1]),
        target_timestamp=int(ts[-1]),
        target_dwell=float(dwell[-1]),
        target_engagement=int(eng[-1]),
        demographics=demographics,
    )


@dataclass(eq=False)
class Dataset:
    n_items: int
    users: list[UserRecord]
    split: str = "full"
    demographics_width: int = 0
    item_topics: np.ndarray | None = None  # synthetic ground truth, never fed to a model
    split_time: int | None = None
    manifest: dict = field(default_factory=dict)
    skipped_lines: int = 0

    def __len__(self):
        return len(self.users)

    def validate(self) -> None:
        for user in self.users:
            user.validate(self.n_items)

    def by_id(self) -> dict[int, UserRecord]:
        return {u.user_id: u for u in self.users}

    def subset(self, count: int) -> "Dataset":
        return Dataset(
            self.n_items,
            self.users[:count],
            self.split,
            self.demographics_width,
            self.item_topics,
            self.split_time,
            dict(self.manifest),
        )

    @property
    def targets(self) -> np.ndarray:
        return np.array([u.target for u in self.users], dtype=np.int64)

    def structurally_equal(self, other: "Dataset") -> bool:
        if self.n_items != other.n_items or len(self) != len(other):
            return False
        a = sorted(self.users, key=lambda u: u.user_id)
        b = sorted(other.users, key=lambda u: u.user_id)
        return all(x.structurally_equal(y) for x, y in zip(a, b))


# -- chronological split ------------------------------------------------


def chronological_split(dataset: Dataset, test_fraction: float = 0.1, split_time: int | None = None):
    """Split on a global time boundary.

    Train records take the last interaction before ``split_time`` as target,
    test records take the first interaction at or after it, so every test
    target postdates every train target.  Users lacking an interaction on
    one side are left out of that side.
    """
    if split_time is None:
        split_time = dataset.split_time
    if split_time is None:
        stamps = np.concatenate([u.full_sequence()[1] for u in dataset.users]) if dataset.users else np.zeros(0)
        split_time = int(np.quantile(stamps, 1.0 - test_fraction)) if stamps.size else 0
    train, test = [], []
    for user in dataset.users:
        items, ts, dwell, eng = user.full_sequence()
        cut = int(np.searchsorted(ts, split_time, side="left"))
        if cut >= 1:
            train.append(_record_from_sequence(user.user_id, items[:cut], ts[:cut], dwell[:cut], eng[:cut], user.demographics))
        if cut < ts.size:
            end = cut + 1
            test.append(_record_from_sequence(user.user_id, items[:end], ts[:end], dwell[:end], eng[:end], user.demographics))
    common = dict(
        n_items=dataset.n_items,
        demographics_width=dataset.demographics_width,
        item_topics=dataset.item_topics,
        split_time=split_time,
        manifest=dict(dataset.manifest),
    )
    return Dataset(users=train, split="train", **common), Dataset(users=test, split="test", **common)


# -- TSV I/O --------------------------------------------------------------


def _sidecars(path: Path):
    return path.with_name(path.name + ".manifest"), path.with_name(path.name + ".users")


def read_manifest(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError(f"manifest entry without '=': {line!r}", line=n)
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def write_manifest(path, values: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key, value in values.items():
            fh.write(f"{key}={value}\n")


def write_dataset(dataset: Dataset, path) -> None:
    """Write interactions (history + target per user) as TSV with sidecar files."""
    path = Path(path)
    rows = []
    for user in dataset.users:
        items, ts, dwell, eng = user.full_sequence()
        for i, t, d, e in zip(items, ts, dwell, eng):
            rows.append(f"{user.user_id}\t{i}\t{t}\t{d:.6f}\t{e}\n")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(TSV_HEADER) + "\n")
        fh.writelines(rows)
    manifest_path, users_path = _sidecars(path)
    manifest = dict(dataset.manifest)
    manifest.update(n_items=dataset.n_items, split=dataset.split, demographics_width=dataset.demographics_width)
    if dataset.split_time is not None:
        manifest["split_time"] = dataset.split_time
    write_manifest(manifest_path, manifest)
    if dataset.demographics_width:
        with open(users_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("user_id\tdemographics\n")
            for user in dataset.users:
                values = ",".join(f"{v:.6f}" for v in user.demographics)
                fh.write(f"{user.user_id}\t{values}\n")
    if dataset.item_topics is not None:
        np.save(path.with_name(path.name + ".topics.npy"), dataset.item_topics)


def _parse_lines(lines, strict: bool):
    header = next(lines, None)
    if header is None:
        return [], 0
    if tuple(header.rstrip("\n").split("\t")) != TSV_HEADER:
        raise ParseError(f"expected header {'/'.join(TSV_HEADER)}", line=1)
    rows, skipped = [], 0
    for n, raw in enumerate(lines, 2):
        line = raw.rstrip("\n")
        if not line:
            continue
        parts = line.split("\t")
        try:
            if len(parts) != 5:
                raise ValueError(f"expected 5 fields, got {len(parts)}")
            user, item, ts = int(parts[0]), int(parts[1]), int(parts[2])
            dwell, eng = float(parts[3]), int(parts[4])
            if not 0 <= eng < N_ENGAGEMENT:
                raise ValueError(f"engagement code {eng} outside [0, {N_ENGAGEMENT})")
            if not np.isfinite(dwell):
                raise ValueError("dwell is not finite")
        except ValueError as exc:
            if strict:
                raise ParseError(str(exc), line=n) from None
            skipped += 1
            continue
        rows.append((user, item, ts, dwell, eng, n))
    return rows, skipped


def load_dataset(path, strict: bool = True) -> Dataset:
    """Load a TSV interaction log; each user's last interaction becomes the target.

    With ``strict=False`` malformed lines are skipped and counted in
    ``Dataset.skipped_lines`` (and logged) instead of raising.
    """
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        rows, skipped = _parse_lines(iter(fh), strict)
    if skipped:
        log.warning("%s: skipped %d malformed lines", path, skipped)
    manifest_path, users_path = _sidecars(path)
    manifest = read_manifest(manifest_path) if manifest_path.exists() else {}
    demographics, width = {}, int(manifest.get("demographics_width", 0))
    if users_path.exists():
        with open(users_path, encoding="utf-8") as fh:
            next(fh, None)
            for n, line in enumerate(fh, 2):
                line = line.rstrip("\n")
                if not line:
                    continue
                try:
                    uid, values = line.split("\t")
                    vec = np.array([float(v) for v in values.split(",")]) if values else np.zeros(0)
                except ValueError as exc:
                    raise ParseError(f"users sidecar: {exc}", line=n) from None
                demographics[int(uid)] = vec
                width = vec.size

    if "n_items" in manifest:
        n_items = int(manifest["n_items"])
    else:
        n_items = max((r[1] for r in rows), default=-1) + 1
    grouped: dict[int, list] = {}
    for row in rows:
        if row[1] < 0 or row[1] >= n_items:
            raise IntegrityError(f"line {row[5]}: item id {row[1]} outside corpus [0, {n_items})")
        grouped.setdefault(row[0], []).append(row)

    users = []
    for uid, seq in grouped.items():
        seq.sort(key=lambda r: r[2])
        ts = np.array([r[2] for r in seq], dtype=np.int64)
        dup = np.nonzero(np.diff(ts) <= 0)[0]
        if dup.size:
            raise ParseError(f"user {uid}: duplicate timestamp {ts[dup[0] + 1]}", line=seq[dup[0] + 1][5])
        items = np.array([r[1] for r in seq], dtype=np.int64)
        dwell = np.array([r[3] for r in seq])
        eng = np.array([r[4] for r in seq], dtype=np.int64)
        demo = demographics.get(uid, np.zeros(width))
        users.append(_record_from_sequence(uid, items, ts, dwell, eng, demo))

    topics_path = path.with_name(path.name + ".topics.npy")
    dataset = Dataset(
        n_items=n_items,
        users=users,
        split=manifest.get("split", "full"),
        demographics_width=width,
        item_topics=np.load(topics_path) if topics_path.exists() else None,
        split_time=int(manifest["split_time"]) if "split_time" in manifest else None,
        manifest=manifest,
        skipped_lines=skipped,
    )
    dataset.validate()
    return dataset


# -- synthetic corpus ---------------------------------------------------------


@dataclass
class SynthParams:
    latent_dim: int = 8
    max_user_topics: int = 3
    popularity_exponent: float = 0.8
    drift: float = 0.15
    repeat_prob: float = 0.3
    item_affinity: float = 3.0
    demographic_noise: float = 0.3


def synth_generate(
    seed: int,
    n_items: int,
    n_users: int,
    n_topics: int,
    seq_len: int,
    params: SynthParams | None = None,
) -> Dataset:
    """Generate a corpus with planted topic structure.

    Items are split evenly over topics and carry a latent vector (topic
    centroid plus noise).  Each user sparsely mixes a few topics and holds a
    latent taste; every interaction either re-consumes an earlier item or
    picks a topic from the slowly drifting mixture and an item inside it with
    probability rising with popularity and taste affinity.  ``seq_len``
    history interactions are followed by one target drawn by the same
    process; all histories precede ``split_time``, all targets follow it.
    """
    if n_items < 1 or n_users < 1 or n_topics < 1:
        raise ValueError("n_items, n_users and n_topics must be positive")
    if n_topics > n_items:
        raise ValueError("n_topics must not exceed n_items")
    if seq_len < 2:
        raise ValueError("seq_len must be at least 2")
    p = params or SynthParams()
    rng = np.random.default_rng(seed)

    item_topics = rng.permutation(np.arange(n_items) % n_topics)
    topic_vecs = rng.standard_normal((n_topics, p.latent_dim))
    item_vecs = topic_vecs[item_topics] + 0.7 * rng.standard_normal((n_items, p.latent_dim))
    log_pop = np.empty(n_items)
    members = [np.nonzero(item_topics == t)[0] for t in range(n_topics)]
    for ids in members:
        ranks = rng.permutation(ids.size)
        log_pop[ids] = -p.popularity_exponent * np.log1p(ranks)

    total = seq_len + 1
    split_time = 10 * total * 1000
    users = []
    max_topics = min(p.max_user_topics, n_topics)
    for uid in range(n_users):
        m = int(rng.integers(1, max_topics + 1))
        topics = rng.choice(n_topics, size=m, replace=False)
        base = np.log(rng.dirichlet(np.ones(m)) + 1e-3)
        walk = np.cumsum(rng.standard_normal((total, m)) * p.drift, axis=0)
        logits = base + walk
        w = np.exp(logits - logits.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        chosen = topics[(rng.random((total, 1)) > np.cumsum(w, axis=1)).sum(axis=1).clip(0, m - 1)]
        taste = rng.standard_normal(p.latent_dim)
        # in-topic item draws, one categorical per topic
        items = np.empty(total, dtype=np.int64)
        for t in topics:
            pos = np.nonzero(chosen == t)[0]
            if not pos.size:
                continue
            cand = members[t]
            score = log_pop[cand] + p.item_affinity * (item_vecs[cand] @ taste) / np.sqrt(p.latent_dim)
            prob = np.exp(score - score.max())
            cdf = np.cumsum(prob / prob.sum())
            items[pos] = cand[np.searchsorted(cdf, rng.random(pos.size) * cdf[-1]).clip(0, cand.size - 1)]
        # repeats copy an earlier interaction; pointer jumping resolves chains
        repeat = rng.random(total) < p.repeat_prob
        repeat[0] = False
        src = np.arange(total)
        src[repeat] = (rng.random(repeat.sum()) * np.nonzero(repeat)[0]).astype(np.int64)
        for _ in range(int(np.ceil(np.log2(total))) + 1):
            src = src[src]
        items = items[src]

        dwell = np.clip(rng.beta(2.0, 2.0, size=total) + 0.15 * (w.max(axis=1) - 0.5), 0.0, 1.0)
        eng = np.where(dwell > 0.85, 2, np.where(dwell > 0.6, 1, 0))
        eng = np.where(rng.random(total) < 0.1, rng.integers(0, N_ENGAGEMENT, total), eng)
        ts = np.sort(rng.integers(0, split_time - total, size=total - 1)) + np.arange(total - 1)
        ts = np.append(ts, split_time + int(rng.integers(0, split_time)))
        mixture = np.zeros(n_topics)
        mixture[topics] = np.exp(base) / np.exp(base).sum()
        demo = mixture @ topic_vecs + p.demographic_noise * rng.standard_normal(p.latent_dim)
        users.append(_record_from_sequence(uid, items, ts, dwell, eng, demo))

    manifest = dict(
        seed=seed,
        n_items=n_items,
        n_users=n_users,
        n_topics=n_topics,
        seq_len=seq_len,
        **{f"synth.{k}": v for k, v in vars(p).items()},
    )
    return Dataset(
        n_items=n_items,
        users=users,
        split="full",
        demographics_width=p.latent_dim,
        item_topics=item_topics,
        split_time=split_time,
        manifest=manifest,
    )


def modal_topic_agreement(dataset: Dataset) -> float:
    """Fraction of users whose target shares the modal topic of their history."""
    topics = dataset.item_topics
    if topics is None:
        raise ValueError("dataset carries no topic labels")
    hits = 0
    for user in dataset.users:
        if not len(user):
            continue
        counts = np.bincount(topics[user.items], minlength=topics.max() + 1)
        hits += int(topics[user.target] == counts.argmax())
    return hits / max(len(dataset), 1)


# -- batching -----------------------------------------------------------------


@dataclass
class Batch:
    users: list[UserRecord]

    @property
    def targets(self) -> np.ndarray:
        return np.array([u.target for u in self.users], dtype=np.int64)

    def negatives_for(self, j: int) -> np.ndarray:
        t = self.targets
        return np.delete(t, j)

    def __len__(self):
        return len(self.users)


def batch_iterator(dataset: Dataset, batch_size: int, seed: int, drop_last: bool = True) -> Iterator[Batch]:
    """Shuffle users deterministically and yield batches of ``batch_size``.

    Each user's target doubles as an in-batch negative for the others.  The
    trailing partial batch is dropped unless ``drop_last`` is False.
    """
    if batch_size < 2:
        raise ValueError("batch_size must be at least 2")
    if batch_size > len(dataset):
        raise ValueError(f"batch_size {batch_size} exceeds user count {len(dataset)}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    stop = len(order) - (len(order) % batch_size if drop_last else 0)
    for start in range(0, stop, batch_size):
        yield Batch([dataset.users[i] for i in order[start : start + batch_size]])


@dataclass
class Collated:
    """Padded arrays for a list of users (PAD marks empty slots, left-padded)."""

    short_items: np.ndarray  # (U, L)
    short_features: np.ndarray  # (U, L, FEATURE_WIDTH)
    long_items: np.ndarray  # (U, long_len)
    demographics: np.ndarray  # (U, d_u)
    pool_ids: dict  # name -> (ids, segment) for each behavior sequence
    targets: np.ndarray  # (U,)
    user_ids: np.ndarray

    def __len__(self):
        return int(self.targets.size)

    @property
    def short_valid(self):
        return self.short_items != PAD

    @property
    def long_valid(self):
        return self.long_items != PAD


def _left_pad(seqs: Sequence[np.ndarray], width: int) -> np.ndarray:
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for r, s in enumerate(seqs):
        s = s[-width:] if width else s[:0]
        if s.size:
            out[r, width - s.size :] = s
    return out


def collate(
    users: Sequence[UserRecord],
    short_len: int,
    long_len: int,
    behavior_window: int | None = None,
    demographics_width: int | None = None,
) -> Collated:
    short = _left_pad([u.items for u in users], short_len)
    feats = np.zeros((len(users), short_len, FEATURE_WIDTH))
    for r, u in enumerate(users):
        n = min(len(u), short_len)
        if n:
            feats[r, short_len - n :] = interaction_features(u.dwell[-n:], u.engagement[-n:])
    long_items = _left_pad([u.items for u in users], long_len)
    if demographics_width is None:
        demographics_width = max((u.demographics.size for u in users), default=0)
    demo = np.zeros((len(users), demographics_width))
    for r, u in enumerate(users):
        k = min(u.demographics.size, demographics_width)
        demo[r, :k] = u.demographics[:k]
    pools = {}
    seqs = [u.behavior_sequences(behavior_window) for u in users]
    for name in ("rs", "click", "long_view"):
        ids = [s[name] for s in seqs]
        segments = np.concatenate([np.full(x.size, r, dtype=np.int64) for r, x in enumerate(ids)]) if ids else np.zeros(0, np.int64)
        flat = np.concatenate(ids) if ids else np.zeros(0, np.int64)
        pools[name] = (flat.astype(np.int64), segments)
    return Collated(
        short_items=short,
        short_features=feats,
        long_items=long_items,
        demographics=demo,
        pool_ids=pools,
        targets=np.array([u.target for u in users], dtype=np.int64),
        user_ids=np.array([u.user_id for u in users], dtype=np.int64),
    )


def parse_interactions(text: str, n_items: int, user_id: int = -1) -> UserRecord:
    """Build a serving-time record from inline TSV lines ``item_id, timestamp, dwell, engagement``.

    The header is optional; the target is unknown and set to -1.
    """
    items, ts, dwell, eng = [], [], [], []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("item_id") or line.startswith("user_id"):
            continue
        parts = line.split("\t")
        if len(parts) == 5:
            parts = parts[1:]
        if len(parts) != 4:
            raise ParseError(f"expected 4 or 5 fields, got {len(parts)}", line=n)
        try:
            i = int(parts[0])
            items.append(i)
            ts.append(int(parts[1]))
            dwell.append(float(parts[2]))
            eng.append(int(parts[3]))
        except ValueError as exc:
            raise ParseError(str(exc), line=n) from None
        if not 0 <= i < n_items:
            raise IntegrityError(f"line {n}: item id {i} outside corpus [0, {n_items})")
    order = np.argsort(ts, kind="stable")
    pick = lambda xs: np.asarray(xs)[order] if xs else np.zeros(0)  # noqa: E731
    return UserRecord(
        user_id=user_id,
        items=pick(items),
        timestamps=pick(ts),
        dwell=pick(dwell),
        engagement=pick(eng),
        target=-1,
        target_timestamp=(max(ts) + 1) if ts else 0,
    )
