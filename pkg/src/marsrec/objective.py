"""Push, pull and facet-separating losses with analytic gradients.

Every loss is a mean over the minibatch. Gradients are accumulated into a
:class:`Gradients` value by reverse-mode chain rule through the softmax
facet weights, the per-facet similarities and the shared projections.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dataset import Triplets
from .model import Geometry, ModelParams, Variant, batch_project_grad, facet_weights


@dataclass
class LossConfig:
    lambda_pull: float = 0.1
    lambda_facet: float = 0.01
    alpha: float = 0.1
    fixed_margin: float = 1.0
    facet_loss_items: bool = True
    facet_separating: bool = True

    def __post_init__(self):
        if self.lambda_pull < 0 or self.lambda_facet < 0:
            raise ValueError("loss weights must be >= 0")
        if self.alpha <= 0 or self.fixed_margin <= 0:
            raise ValueError("alpha and fixed_margin must be > 0")


@dataclass
class LossBreakdown:
    push: float
    pull: float
    facet: float
    total: float

    def as_dict(self):
        return {"push": self.push, "pull": self.pull, "facet": self.facet, "total": self.total}


@dataclass(eq=False)
class Gradients:
    """Dense gradient arrays shaped like :class:`ModelParams`.

    ``touched_users``/``touched_items`` list the embedding rows the batch
    reached; every other row is exactly zero.
    """

    user_emb: np.ndarray
    item_emb: np.ndarray
    user_proj: np.ndarray
    item_proj: np.ndarray
    facet_logits: np.ndarray
    touched_users: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    touched_items: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "Gradients":
        return cls(*(np.zeros_like(a) for a in params.arrays()))

    def arrays(self):
        return [getattr(self, f) for f in ModelParams.FIELDS]


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


class _PairForward:
    """Cross-facet similarity of aligned (user, item) arrays, kept for backprop."""

    def __init__(self, params: ModelParams, users, items, geom: Geometry):
        self.users = users
        self.items = items
        self.geom = geom
        self.uf = params.user_facets(users)
        self.vf = params.item_facets(items)
        self.theta = facet_weights(params.facet_logits[users])
        if geom is Geometry.EUCLIDEAN:
            self.diff = self.uf - self.vf
            self.sims = -np.einsum("bkd,bkd->bk", self.diff, self.diff)
        else:
            self.nu = np.linalg.norm(self.uf, axis=-1)
            self.nv = np.linalg.norm(self.vf, axis=-1)
            self.a = self.uf / self.nu[..., None]
            self.b = self.vf / self.nv[..., None]
            self.sims = np.einsum("bkd,bkd->bk", self.a, self.b)
        self.g = np.einsum("bk,bk->b", self.theta, self.sims)

    def backward(self, params: ModelParams, dg: np.ndarray, grads: Gradients):
        ds = dg[:, None] * self.theta
        np.add.at(grads.facet_logits, self.users, ds * (self.sims - self.g[:, None]))
        if self.geom is Geometry.EUCLIDEAN:
            duf = -2.0 * ds[..., None] * self.diff
            dvf = -duf
        else:
            s = self.sims[..., None]
            duf = ds[..., None] * (self.b - s * self.a) / self.nu[..., None]
            dvf = ds[..., None] * (self.a - s * self.b) / self.nv[..., None]
        _chain_user(params, self.users, duf, grads)
        _chain_item(params, self.items, dvf, grads)


def _chain_user(params, users, dfacets, grads):
    d_rows, d_proj = batch_project_grad(params.user_emb[users], params.user_proj, dfacets)
    np.add.at(grads.user_emb, users, d_rows)
    grads.user_proj += d_proj


def _chain_item(params, items, dfacets, grads):
    d_rows, d_proj = batch_project_grad(params.item_emb[items], params.item_proj, dfacets)
    np.add.at(grads.item_emb, items, d_rows)
    grads.item_proj += d_proj


def _user_margins(margins, users):
    if np.isscalar(margins):
        return np.full(len(users), float(margins))
    return np.asarray(margins, dtype=float)[users]


def _push(params, batch: Triplets, margins, geom, grads=None, weight=1.0):
    fp = _PairForward(params, batch.users, batch.pos, geom)
    fq = _PairForward(params, batch.users, batch.neg, geom)
    hinge = _user_margins(margins, batch.users) - fp.g + fq.g
    loss = float(np.maximum(hinge, 0.0).mean())
    if grads is not None:
        # ties (hinge == 0) are treated as inactive
        active = (hinge > 0).astype(float) * (weight / len(hinge))
        fp.backward(params, -active, grads)
        fq.backward(params, active, grads)
    return loss


def _pull(params, users, items, geom, grads=None, weight=1.0):
    fp = _PairForward(params, users, items, geom)
    loss = float(-fp.g.mean())
    if grads is not None:
        fp.backward(params, np.full(len(users), -weight / len(users)), grads)
    return loss


def _facet_pair_selectors(k):
    iu, ju = np.triu_indices(k, 1)
    sel_i = np.zeros((len(iu), k))
    sel_j = np.zeros((len(iu), k))
    sel_i[np.arange(len(iu)), iu] = 1.0
    sel_j[np.arange(len(iu)), ju] = 1.0
    return iu, ju, sel_i, sel_j


def _facet_cosine_term(facets, alpha, sel, weight, want_grad, sign):
    """Mean of softplus(sign * alpha cos(x^i, x^j)) / alpha over rows and facet pairs."""
    iu, ju, sel_i, sel_j = sel
    norms = np.linalg.norm(facets, axis=-1)
    unit = facets / norms[..., None]
    c = np.einsum("pnd,pnd->pn", unit[:, iu], unit[:, ju])
    loss = float(np.logaddexp(0.0, sign * alpha * c).mean() / alpha)
    if not want_grad:
        return loss, None
    dc = sign * _sigmoid(sign * alpha * c) * (weight / c.size)
    gi = dc[..., None] * (unit[:, ju] - c[..., None] * unit[:, iu]) / norms[:, iu][..., None]
    gj = dc[..., None] * (unit[:, iu] - c[..., None] * unit[:, ju]) / norms[:, ju][..., None]
    dfac = sel_i.T @ gi + sel_j.T @ gj
    return loss, dfac


def _facet(params, batch: Triplets, alpha, geom, items_term=True, grads=None, weight=1.0,
           separating=True):
    k = params.n_facets
    if k < 2:
        return 0.0
    sel = _facet_pair_selectors(k)
    iu, ju, sel_i, sel_j = sel
    want = grads is not None
    if geom is Geometry.EUCLIDEAN:
        # user and item separations enter one softplus, so pair them by positive pair
        keys = np.unique(batch.users * params.n_items + batch.pos)
        users, items = keys // params.n_items, keys % params.n_items
        uf = params.user_facets(users)
        vf = params.item_facets(items)
        du = uf[:, iu] - uf[:, ju]
        dv = vf[:, iu] - vf[:, ju]
        t = np.einsum("pnd,pnd->pn", du, du) + np.einsum("pnd,pnd->pn", dv, dv)
        loss = float(np.logaddexp(0.0, -alpha * t).mean() / alpha)
        if want:
            dt = -_sigmoid(-alpha * t) * (weight / t.size)
            gu = 2.0 * dt[..., None] * du
            gv = 2.0 * dt[..., None] * dv
            sel_d = sel_i - sel_j
            _chain_user(params, users, sel_d.T @ gu, grads)
            _chain_item(params, items, sel_d.T @ gv, grads)
        return loss
    # +cos penalises aligned facets; -cos is the literal form, which rewards alignment
    sign = 1.0 if separating else -1.0
    users = np.unique(batch.users)
    loss, dfac = _facet_cosine_term(params.user_facets(users), alpha, sel, weight, want, sign)
    if want:
        _chain_user(params, users, dfac, grads)
    if items_term:
        items = np.unique(np.concatenate([batch.pos, batch.neg]))
        item_loss, dfac = _facet_cosine_term(params.item_facets(items), alpha, sel, weight, want,
                                             sign)
        loss += item_loss
        if want:
            _chain_item(params, items, dfac, grads)
    return loss


def loss_push(params: ModelParams, batch: Triplets, margins, geom: Geometry) -> float:
    """Mean hinge ``[margin_u - g(u, v_p) + g(u, v_q)]_+``.

    ``margins`` is a per-user array (adaptive margins) or a scalar (the
    fixed CML margin).
    """
    return _push(params, batch, margins, Geometry(geom))


def loss_pull(params: ModelParams, users, items, geom: Geometry) -> float:
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    if len(users) == 0:
        raise ValueError("empty positive list")
    return _pull(params, users, items, Geometry(geom))


def loss_facet(params: ModelParams, batch: Triplets, alpha: float, geom: Geometry,
               items_term: bool = True, separating: bool = True) -> float:
    """Facet-separating loss over the entities of ``batch`` (0 when K = 1).

    Euclidean: averaged over the distinct positive (user, item) pairs, with
    user and item facet separations summed inside one softplus. Spherical:
    mean over distinct users plus (if ``items_term``) mean over distinct
    items of ``log(1 + exp(alpha cos(x^i, x^j))) / alpha``, which falls as
    facets spread apart. ``separating=False`` flips the sign inside the
    exponent to ``-alpha cos``.
    """
    return _facet(params, batch, alpha, Geometry(geom), items_term, separating=separating)


def _resolve(variant, geom):
    variant = Variant(variant)
    if geom is None:
        return variant, variant.geometry
    geom = Geometry(geom)
    if geom is not variant.geometry:
        raise ValueError(f"variant {variant.value} requires {variant.geometry.value} geometry")
    return variant, geom


def _total(params, batch, margins, config, variant, geom, grads):
    variant, geom = _resolve(variant, geom)
    if len(batch) == 0:
        raise ValueError("empty batch")
    if variant is Variant.CML:
        margins = config.fixed_margin
    push = _push(params, batch, margins, geom, grads)
    pull_grads = grads if config.lambda_pull > 0 else None
    pull = _pull(params, batch.users, batch.pos, geom, pull_grads, config.lambda_pull)
    facet = 0.0
    if variant is not Variant.CML:
        facet_grads = grads if config.lambda_facet > 0 else None
        facet = _facet(params, batch, config.alpha, geom, config.facet_loss_items,
                       facet_grads, config.lambda_facet, config.facet_separating)
    total = push + config.lambda_pull * pull + config.lambda_facet * facet
    return LossBreakdown(push, pull, facet, total)


def total_loss(params: ModelParams, batch: Triplets, margins, config: LossConfig,
               variant: Variant, geom: Optional[Geometry] = None) -> LossBreakdown:
    """Combined objective; CML uses the fixed margin and drops the facet term."""
    return _total(params, batch, margins, config, variant, geom, None)


def total_loss_gradients(params: ModelParams, batch: Triplets, margins, config: LossConfig,
                         variant: Variant, geom: Optional[Geometry] = None):
    """Return ``(LossBreakdown, Gradients)`` of :func:`total_loss`."""
    grads = Gradients.zeros_like(params)
    breakdown = _total(params, batch, margins, config, variant, geom, grads)
    grads.touched_users = np.unique(batch.users)
    grads.touched_items = np.unique(np.concatenate([batch.pos, batch.neg]))
    return breakdown, grads


def component_gradients(params, batch, margins, config, variant, component):
    """Loss and gradients of a single term (``push``, ``pull`` or ``facet``), unweighted."""
    variant, geom = _resolve(variant, None)
    grads = Gradients.zeros_like(params)
    if component == "push":
        m = config.fixed_margin if variant is Variant.CML else margins
        value = _push(params, batch, m, geom, grads)
    elif component == "pull":
        value = _pull(params, batch.users, batch.pos, geom, grads)
    elif component == "facet":
        value = _facet(params, batch, config.alpha, geom, config.facet_loss_items, grads,
                       separating=config.facet_separating)
    else:
        raise ValueError(f"unknown loss component {component!r}")
    return value, grads
