"""Leave-one-out ranking evaluation with sampled negatives (HR@N, nDCG@N)."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .dataset import InteractionDataset, SplitDataset
from .model import Geometry, ModelParams, score_items, score_matrix

logger = logging.getLogger(__name__)


@dataclass
class EvalProtocol:
    n_negatives: int = 100
    cutoffs: tuple = (10, 20)
    seed: int = 0

    def __post_init__(self):
        self.cutoffs = tuple(int(c) for c in self.cutoffs)
        if self.n_negatives < max(self.cutoffs):
            warnings.warn(f"n_negatives={self.n_negatives} is below the largest cutoff "
                          f"{max(self.cutoffs)}; HR at that cutoff is trivially 1")


@dataclass
class EvalReport:
    hr: dict
    ndcg: dict
    users_evaluated: int
    short_negative_users: int = 0
    ranks: np.ndarray = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "hr": {str(k): v for k, v in sorted(self.hr.items())},
            "ndcg": {str(k): v for k, v in sorted(self.ndcg.items())},
            "users_evaluated": self.users_evaluated,
            "short_negative_users": self.short_negative_users,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def check_invariants(self) -> bool:
        cuts = sorted(self.hr)
        ok = all(self.ndcg[c] <= self.hr[c] + 1e-12 for c in cuts)
        return ok and all(self.hr[a] <= self.hr[b] for a, b in zip(cuts, cuts[1:]))


def rank_from_scores(test_score: float, neg_scores) -> int:
    """1-based rank of the test item; ties with negatives rank it last."""
    return 1 + int(np.count_nonzero(np.asarray(neg_scores) >= test_score))


def rank_test_item(params: ModelParams, u: int, test_item: int, negatives, geom: Geometry) -> int:
    negatives = np.asarray(negatives, dtype=np.int64)
    if np.any(negatives == test_item):
        raise ValueError("test item appears among the negatives")
    scores = score_items(params, u, np.concatenate([[test_item], negatives]), geom)
    return rank_from_scores(scores[0], scores[1:])


def hit_at(rank, n):
    return (np.asarray(rank) <= n).astype(float)


def ndcg_at(rank, n):
    rank = np.asarray(rank, dtype=float)
    return np.where(rank <= n, 1.0 / np.log2(rank + 1.0), 0.0)


def sample_negatives(known: InteractionDataset, users, n_negatives: int, seed: int):
    """Per-user negatives drawn uniformly without replacement from unseen items.

    Returns ``(negatives, lengths)``; rows shorter than ``n_negatives`` (users
    with too few unseen items) are padded with -1.
    """
    rng = np.random.default_rng(seed)
    out = np.full((len(users), n_negatives), -1, dtype=np.int64)
    lengths = np.zeros(len(users), dtype=np.int64)
    all_items = np.arange(known.n_items)
    for row, u in enumerate(users):
        pool = np.setdiff1d(all_items, known.items_of_user(u), assume_unique=True)
        take = min(n_negatives, len(pool))
        out[row, :take] = rng.choice(pool, size=take, replace=False)
        lengths[row] = take
    return out, lengths


def ranks_for(params, users, targets, negatives, lengths, geom, chunk=512) -> np.ndarray:
    ranks = np.empty(len(users), dtype=np.int64)
    for lo in range(0, len(users), chunk):
        sl = slice(lo, lo + chunk)
        negs = negatives[sl]
        cand = np.concatenate([targets[sl, None], np.maximum(negs, 0)], axis=1)
        scores = score_matrix(params, users[sl], cand, geom)
        valid = np.arange(negs.shape[1])[None, :] < lengths[sl, None]
        beats = (scores[:, 1:] >= scores[:, :1]) & valid
        ranks[sl] = 1 + beats.sum(axis=1)
    return ranks


def evaluate(params: ModelParams, split: SplitDataset, protocol: EvalProtocol, geom: Geometry,
             target: str = "test", known: InteractionDataset | None = None) -> EvalReport:
    """Rank each eligible user's held-out item against sampled unseen items.

    ``target`` selects the held-out set (``"test"`` or ``"dev"``). Negatives
    exclude the user's train, dev and test items. The same protocol seed
    yields the same negatives on every call.
    """
    if target == "test":
        users, targets = split.test_users, split.test_items
    elif target == "dev":
        users, targets = split.dev_users, split.dev_items
    else:
        raise ValueError(f"unknown evaluation target {target!r}")
    known = known if known is not None else split.held_out()
    negatives, lengths = sample_negatives(known, users, protocol.n_negatives, protocol.seed)
    short = int(np.count_nonzero(lengths < protocol.n_negatives))
    if short:
        logger.warning("%d users have fewer than %d unseen items", short, protocol.n_negatives)
    ranks = ranks_for(params, users, targets, negatives, lengths, Geometry(geom))
    return report_from_ranks(ranks, protocol.cutoffs, short)


def report_from_ranks(ranks, cutoffs, short_negative_users=0) -> EvalReport:
    ranks = np.asarray(ranks)
    if len(ranks) == 0:
        return EvalReport({c: 0.0 for c in cutoffs}, {c: 0.0 for c in cutoffs}, 0,
                          short_negative_users, ranks)
    hr = {c: float(hit_at(ranks, c).mean()) for c in cutoffs}
    ndcg = {c: float(ndcg_at(ranks, c).mean()) for c in cutoffs}
    return EvalReport(hr, ndcg, int(len(ranks)), short_negative_users, ranks)
