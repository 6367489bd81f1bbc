"""Implicit-feedback datasets: loading, leave-one-out splits, adaptive
margins, user-biased triplet sampling and the synthetic conflict data."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

NEG_REJECTION_ATTEMPTS = 100


class DatasetError(ValueError):
    pass


class Interaction(NamedTuple):
    user: int
    item: int
    timestamp: Optional[int] = None


class Triplets(NamedTuple):
    """A batch of (user, positive item, negative item) index arrays."""

    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray

    def __len__(self):
        return len(self.users)


@dataclass(eq=False)
class InteractionDataset:
    """Deduplicated binary user-item interactions over dense ids.

    ``users``/``items`` are parallel arrays sorted by (user, item); the
    per-user item sets are stored CSR-style in ``indptr``/``items`` and the
    per-item user sets in ``item_indptr``/``item_users``.
    """

    n_users: int
    n_items: int
    users: np.ndarray
    items: np.ndarray
    timestamps: Optional[np.ndarray] = None
    user_ids: Optional[list] = None
    item_ids: Optional[list] = None
    indptr: np.ndarray = field(init=False, repr=False)
    item_indptr: np.ndarray = field(init=False, repr=False)
    item_users: np.ndarray = field(init=False, repr=False)
    keys: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        users = np.asarray(self.users, dtype=np.int64)
        items = np.asarray(self.items, dtype=np.int64)
        if users.shape != items.shape:
            raise DatasetError("users and items must have the same length")
        if len(users) and (users.min() < 0 or users.max() >= self.n_users):
            raise DatasetError("user id out of range")
        if len(items) and (items.min() < 0 or items.max() >= self.n_items):
            raise DatasetError("item id out of range")
        keys = users * self.n_items + items
        order = np.argsort(keys, kind="stable")
        keys = keys[order]
        if len(keys) > 1 and np.any(keys[1:] == keys[:-1]):
            raise DatasetError("duplicate (user, item) pairs; use from_pairs to deduplicate")
        self.users = users[order]
        self.items = items[order]
        if self.timestamps is not None:
            self.timestamps = np.asarray(self.timestamps, dtype=np.int64)[order]
        self.keys = keys
        self.indptr = np.zeros(self.n_users + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.users, minlength=self.n_users), out=self.indptr[1:])
        by_item = np.lexsort((self.users, self.items))
        self.item_users = self.users[by_item]
        self.item_indptr = np.zeros(self.n_items + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.items, minlength=self.n_items), out=self.item_indptr[1:])

    @classmethod
    def from_pairs(cls, pairs: Sequence, n_users=None, n_items=None, **kwargs):
        """Build from (user, item[, timestamp]) tuples, dropping duplicates.

        Of duplicated pairs the one with the earliest timestamp is kept.
        """
        pairs = list(pairs)
        has_ts = bool(pairs) and all(len(p) > 2 and p[2] is not None for p in pairs)
        best = {}
        for p in pairs:
            key = (int(p[0]), int(p[1]))
            ts = int(p[2]) if has_ts else None
            if key not in best or (has_ts and ts < best[key]):
                best[key] = ts
        users = np.array([k[0] for k in best], dtype=np.int64)
        items = np.array([k[1] for k in best], dtype=np.int64)
        ts = np.array(list(best.values()), dtype=np.int64) if has_ts else None
        if n_users is None:
            n_users = int(users.max()) + 1 if len(users) else 0
        if n_items is None:
            n_items = int(items.max()) + 1 if len(items) else 0
        return cls(n_users, n_items, users, items, ts, **kwargs)

    def __len__(self):
        return len(self.users)

    @property
    def freq(self) -> np.ndarray:
        return np.diff(self.indptr)

    def items_of_user(self, u: int) -> np.ndarray:
        return self.items[self.indptr[u]:self.indptr[u + 1]]

    def users_of_item(self, v: int) -> np.ndarray:
        return self.item_users[self.item_indptr[v]:self.item_indptr[v + 1]]

    @property
    def pairs(self) -> list:
        ts = self.timestamps if self.timestamps is not None else [None] * len(self)
        return [Interaction(int(u), int(v), None if t is None else int(t))
                for u, v, t in zip(self.users, self.items, ts)]

    def contains(self, users, items) -> np.ndarray:
        """Vectorised membership test for (user, item) pairs."""
        q = np.asarray(users, dtype=np.int64) * self.n_items + np.asarray(items, dtype=np.int64)
        if len(self.keys) == 0:
            return np.zeros(q.shape, dtype=bool)
        pos = np.searchsorted(self.keys, q)
        pos = np.minimum(pos, len(self.keys) - 1)
        return self.keys[pos] == q

    def subset(self, mask: np.ndarray) -> "InteractionDataset":
        ts = self.timestamps[mask] if self.timestamps is not None else None
        return InteractionDataset(self.n_users, self.n_items, self.users[mask], self.items[mask],
                                  ts, self.user_ids, self.item_ids)


@dataclass(eq=False)
class SplitDataset:
    """Leave-one-out split; ``dev``/``test`` map eligible users to one item."""

    train: InteractionDataset
    dev_users: np.ndarray
    dev_items: np.ndarray
    test_users: np.ndarray
    test_items: np.ndarray
    n_train_only: int = 0

    @property
    def n_users(self):
        return self.train.n_users

    @property
    def n_items(self):
        return self.train.n_items

    def held_out(self) -> InteractionDataset:
        """Train, dev and test pairs together (the full set of known positives)."""
        users = np.concatenate([self.train.users, self.dev_users, self.test_users])
        items = np.concatenate([self.train.items, self.dev_items, self.test_items])
        return InteractionDataset(self.n_users, self.n_items, users, items)

    def summary(self) -> dict:
        return {
            "n_users": int(self.n_users),
            "n_items": int(self.n_items),
            "n_train": int(len(self.train)),
            "n_dev": int(len(self.dev_users)),
            "n_test": int(len(self.test_users)),
            "n_pairs": int(len(self.train) + len(self.dev_users) + len(self.test_users)),
            "n_eval_users": int(len(self.test_users)),
            "n_train_only_users": int(self.n_train_only),
        }


def load_interactions(path, delimiter: str = "\t", skip_header: bool = False) -> InteractionDataset:
    """Read ``user<delim>item[<delim>timestamp]`` rows and compact ids.

    Dense ids are assigned in order of first appearance. The raw-id lists
    are kept on the dataset (``user_ids[dense] == raw``).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    user_map: dict = {}
    item_map: dict = {}
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if skip_header and lineno == 1:
                continue
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split(delimiter) if delimiter else line.split()
            if len(parts) not in (2, 3):
                raise DatasetError(f"{path}:{lineno}: expected 2 or 3 fields, got {len(parts)}")
            raw_u, raw_i = parts[0].strip(), parts[1].strip()
            if not raw_u or not raw_i:
                raise DatasetError(f"{path}:{lineno}: empty id")
            ts = None
            if len(parts) > 2:
                try:
                    ts = int(float(parts[2]))
                except ValueError:
                    raise DatasetError(f"{path}:{lineno}: bad timestamp {parts[2]!r}") from None
            u = user_map.setdefault(raw_u, len(user_map))
            i = item_map.setdefault(raw_i, len(item_map))
            rows.append((u, i, ts))
    if not rows:
        raise DatasetError(f"{path}: no interactions")
    if any(r[2] is None for r in rows) and not all(r[2] is None for r in rows):
        raise DatasetError(f"{path}: timestamps must be given on all rows or none")
    return InteractionDataset.from_pairs(rows, len(user_map), len(item_map),
                                         user_ids=list(user_map), item_ids=list(item_map))


def leave_one_out_split(ds: InteractionDataset, seed: int = 0) -> SplitDataset:
    """Hold out test (latest) and dev (second latest) items per user.

    Users with fewer than three interactions stay train-only. Without
    timestamps the two held-out items are drawn uniformly with ``seed``;
    ties in timestamps are broken by item id.
    """
    rng = np.random.default_rng(seed)
    keep = np.ones(len(ds), dtype=bool)
    dev_u, dev_i, test_u, test_i = [], [], [], []
    n_train_only = 0
    for u in range(ds.n_users):
        lo, hi = ds.indptr[u], ds.indptr[u + 1]
        n = hi - lo
        if n == 0:
            continue
        if n < 3:
            n_train_only += 1
            continue
        if ds.timestamps is not None:
            order = np.lexsort((ds.items[lo:hi], ds.timestamps[lo:hi]))
            t_idx, d_idx = lo + order[-1], lo + order[-2]
        else:
            t_idx, d_idx = lo + rng.choice(n, size=2, replace=False)
        test_u.append(u)
        test_i.append(ds.items[t_idx])
        dev_u.append(u)
        dev_i.append(ds.items[d_idx])
        keep[t_idx] = keep[d_idx] = False
    if n_train_only:
        logger.info("%d users with < 3 interactions kept train-only", n_train_only)
    as_arr = lambda x: np.asarray(x, dtype=np.int64)  # noqa: E731
    return SplitDataset(ds.subset(keep), as_arr(dev_u), as_arr(dev_i),
                        as_arr(test_u), as_arr(test_i), n_train_only)


def _write_pairs(path, users, items, timestamps=None):
    with open(path, "w") as f:
        for k in range(len(users)):
            if timestamps is None:
                f.write(f"{users[k]}\t{items[k]}\n")
            else:
                f.write(f"{users[k]}\t{items[k]}\t{timestamps[k]}\n")


def _read_pairs(path):
    data = np.loadtxt(path, dtype=np.int64, delimiter="\t", ndmin=2)
    if data.size == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), None
    ts = data[:, 2] if data.shape[1] > 2 else None
    return data[:, 0], data[:, 1], ts


def write_split(split: SplitDataset, out_dir) -> None:
    """Write train/dev/test manifests (dense ids) and the two id maps."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tr = split.train
    _write_pairs(out / "train.tsv", tr.users, tr.items, tr.timestamps)
    _write_pairs(out / "dev.tsv", split.dev_users, split.dev_items)
    _write_pairs(out / "test.tsv", split.test_users, split.test_items)
    for name, ids, n in (("user_map.tsv", tr.user_ids, tr.n_users),
                         ("item_map.tsv", tr.item_ids, tr.n_items)):
        ids = ids if ids is not None else [str(k) for k in range(n)]
        with open(out / name, "w") as f:
            for dense, raw in enumerate(ids):
                f.write(f"{raw}\t{dense}\n")


def read_split(split_dir) -> SplitDataset:
    d = Path(split_dir)
    maps = []
    for name in ("user_map.tsv", "item_map.tsv"):
        with open(d / name) as f:
            rows = [line.rstrip("\n").split("\t") for line in f if line.strip()]
        ids = [None] * len(rows)
        for raw, dense in rows:
            ids[int(dense)] = raw
        maps.append(ids)
    n_users, n_items = len(maps[0]), len(maps[1])
    u, i, ts = _read_pairs(d / "train.tsv")
    train = InteractionDataset(n_users, n_items, u, i, ts, maps[0], maps[1])
    du, di, _ = _read_pairs(d / "dev.tsv")
    tu, ti, _ = _read_pairs(d / "test.tsv")
    eligible = set(tu.tolist())
    n_train_only = int(sum(1 for x in np.flatnonzero(train.freq > 0) if x not in eligible))
    return SplitDataset(train, du, di, tu, ti, n_train_only)


def compute_adaptive_margins(ds: InteractionDataset) -> np.ndarray:
    """Per-user margin ``1 - |two-hop users| / N``.

    The two-hop neighbourhood is the distinct union of users sharing at
    least one item with ``u`` (``u`` itself included). Users without
    interactions get margin 1.
    """
    n = ds.n_users
    gamma = np.ones(n)
    seen = np.zeros(n, dtype=bool)
    for u in range(n):
        its = ds.items_of_user(u)
        if len(its) == 0:
            continue
        nbrs = np.concatenate([ds.users_of_item(v) for v in its])
        seen[nbrs] = True
        gamma[u] = 1.0 - seen.sum() / n
        seen[nbrs] = False
    return gamma


def user_sampling_distribution(ds: InteractionDataset, beta: float = 0.8) -> np.ndarray:
    """Pr(u) proportional to freq(u)**beta; users without interactions get 0."""
    if beta < 0:
        raise ValueError("beta must be >= 0")
    freq = ds.freq.astype(float)
    w = np.where(freq > 0, freq ** beta, 0.0)
    total = w.sum()
    if total <= 0:
        raise DatasetError("all user frequencies are zero")
    return w / total


def sample_batch(ds: InteractionDataset, dist: np.ndarray, batch_size: int, n_neg: int,
                 rng: np.random.Generator) -> Triplets:
    """Draw ``batch_size`` (user, positive) pairs, each with ``n_neg`` negatives.

    Users whose row covers every item cannot yield a negative and are
    excluded from ``dist`` before drawing.
    """
    if batch_size < 1 or n_neg < 1:
        raise ValueError("batch_size and n_neg must be >= 1")
    freq = ds.freq
    saturated = freq >= ds.n_items
    if saturated.any():
        dist = np.where(saturated, 0.0, dist)
        if dist.sum() <= 0:
            raise DatasetError("every sampled user has interacted with all items")
        dist = dist / dist.sum()
    users = rng.choice(ds.n_users, size=batch_size, p=dist)
    offs = np.floor(rng.random(batch_size) * freq[users]).astype(np.int64)
    pos = ds.items[ds.indptr[users] + offs]
    users = np.repeat(users, n_neg)
    pos = np.repeat(pos, n_neg)
    neg = rng.integers(ds.n_items, size=len(users))
    bad = np.flatnonzero(ds.contains(users, neg))
    for _ in range(NEG_REJECTION_ATTEMPTS):
        if len(bad) == 0:
            break
        neg[bad] = rng.integers(ds.n_items, size=len(bad))
        bad = bad[ds.contains(users[bad], neg[bad])]
    for k in bad:
        comp = np.setdiff1d(np.arange(ds.n_items), ds.items_of_user(users[k]), assume_unique=True)
        neg[k] = comp[rng.integers(len(comp))]
    return Triplets(users, pos, neg)


def generate_conflict_dataset(n_blocks: int, seed: int = 0) -> InteractionDataset:
    """Replicate the three-user / five-item conflict pattern ``n_blocks`` times.

    Per block: A likes items {1, 2}, B likes {4, 5}, C likes {2, 3, 4}. Users
    of block ``b`` are ``3b, 3b+1, 3b+2`` (A, B, C); items are ``5b..5b+4``.
    Timestamps are a seeded random order within each user, so a
    leave-one-out split of C holds out a random pair of C's items.
    """
    if n_blocks < 1:
        raise ValueError("n_blocks must be >= 1")
    rng = np.random.default_rng(seed)
    pattern = ((0, 0), (0, 1), (1, 3), (1, 4), (2, 1), (2, 2), (2, 3))
    rows = []
    for b in range(n_blocks):
        ts = rng.permutation(len(pattern))
        for (du, di), t in zip(pattern, ts):
            rows.append((3 * b + du, 5 * b + di, int(t)))
    return InteractionDataset.from_pairs(rows, 3 * n_blocks, 5 * n_blocks)


def conflict_roles(n_users: int) -> np.ndarray:
    """Role per user of a conflict dataset: 0 = A, 1 = B, 2 = C."""
    return np.arange(n_users) % 3
