"""Learnable parameters and the (cross-)facet similarity functions."""

from __future__ import annotations

import enum
import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class Geometry(str, enum.Enum):
    EUCLIDEAN = "euclidean"
    SPHERICAL = "spherical"


class Variant(str, enum.Enum):
    CML = "cml"
    MAR = "mar"
    MARS = "mars"

    @property
    def geometry(self) -> Geometry:
        return Geometry.SPHERICAL if self is Variant.MARS else Geometry.EUCLIDEAN


@dataclass(eq=False)
class ModelParams:
    """Universal embeddings, shared facet projections and facet logits.

    Shapes: ``user_emb`` (N, D), ``item_emb`` (M, D), ``user_proj`` and
    ``item_proj`` (K, D, D), ``facet_logits`` (N, K). The facet-k embedding
    of user ``u`` is ``user_emb[u] @ user_proj[k]``.
    """

    user_emb: np.ndarray
    item_emb: np.ndarray
    user_proj: np.ndarray
    item_proj: np.ndarray
    facet_logits: np.ndarray

    FIELDS = ("user_emb", "item_emb", "user_proj", "item_proj", "facet_logits")

    @property
    def n_users(self):
        return self.user_emb.shape[0]

    @property
    def n_items(self):
        return self.item_emb.shape[0]

    @property
    def dim(self):
        return self.user_emb.shape[1]

    @property
    def n_facets(self):
        return self.user_proj.shape[0]

    def arrays(self):
        return [getattr(self, f) for f in self.FIELDS]

    def copy(self) -> "ModelParams":
        return ModelParams(*(a.copy() for a in self.arrays()))

    def user_facets(self, users) -> np.ndarray:
        """(B, K, D) facet embeddings for the given user ids."""
        return batch_project(self.user_emb[users], self.user_proj)

    def item_facets(self, items) -> np.ndarray:
        return batch_project(self.item_emb[items], self.item_proj)


def batch_project(rows: np.ndarray, proj: np.ndarray) -> np.ndarray:
    """(B, K, E) stack of ``rows[b] @ proj[k]`` computed as one matmul."""
    k, d, e = proj.shape
    flat = proj.transpose(1, 0, 2).reshape(d, k * e)
    return (rows @ flat).reshape(*rows.shape[:-1], k, e)


def batch_project_grad(rows: np.ndarray, proj: np.ndarray, dfacets: np.ndarray):
    """Adjoint of :func:`batch_project`: gradients for ``rows`` and ``proj``."""
    k, d, e = proj.shape
    flat = proj.transpose(1, 0, 2).reshape(d, k * e)
    dflat = dfacets.reshape(len(rows), k * e)
    d_rows = dflat @ flat.T
    d_proj = (rows.T @ dflat).reshape(d, k, e).transpose(1, 0, 2)
    return d_rows, d_proj


def project_facets(x: np.ndarray, proj: np.ndarray) -> np.ndarray:
    """Rows ``x @ proj[k]`` for each of the K projections, shape (K, D)."""
    x = np.asarray(x, dtype=float)
    proj = np.asarray(proj, dtype=float)
    if proj.ndim != 3 or x.ndim != 1 or proj.shape[1] != x.shape[0]:
        raise ValueError(f"cannot project vector of shape {x.shape} with {proj.shape}")
    return np.einsum("d,kde->ke", x, proj)


def facet_weights(logits: np.ndarray) -> np.ndarray:
    """Softmax over the last axis."""
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def facet_similarity(u_k, v_k, geom: Geometry) -> float:
    u_k = np.asarray(u_k, dtype=float)
    v_k = np.asarray(v_k, dtype=float)
    if geom is Geometry.EUCLIDEAN:
        d = u_k - v_k
        return -float(d @ d)
    nu, nv = np.linalg.norm(u_k), np.linalg.norm(v_k)
    if nu == 0 or nv == 0:
        raise ValueError("cosine similarity of a zero vector")
    return float(np.clip((u_k @ v_k) / (nu * nv), -1.0, 1.0))


def _facet_sims(uf: np.ndarray, vf: np.ndarray, geom: Geometry) -> np.ndarray:
    """Per-facet similarities between broadcastable (..., K, D) stacks."""
    if geom is Geometry.EUCLIDEAN:
        d = uf - vf
        return -np.einsum("...d,...d->...", d, d)
    nu = np.linalg.norm(uf, axis=-1)
    nv = np.linalg.norm(vf, axis=-1)
    if np.any(nu == 0) or np.any(nv == 0):
        raise ValueError("cosine similarity of a zero vector")
    return np.einsum("...d,...d->...", uf, vf) / (nu * nv)


def cross_facet_similarity(params: ModelParams, u: int, v: int, geom: Geometry) -> float:
    theta = facet_weights(params.facet_logits[u])
    uf = project_facets(params.user_emb[u], params.user_proj)
    vf = project_facets(params.item_emb[v], params.item_proj)
    return float(theta @ _facet_sims(uf, vf, geom))


def score_items(params: ModelParams, u: int, candidates, geom: Geometry) -> np.ndarray:
    candidates = np.asarray(candidates, dtype=np.int64)
    if candidates.size == 0:
        raise ValueError("no candidates to score")
    theta = facet_weights(params.facet_logits[u])
    uf = project_facets(params.user_emb[u], params.user_proj)
    vf = params.item_facets(candidates)
    return _facet_sims(uf[None], vf, geom) @ theta


def score_matrix(params: ModelParams, users, candidates, geom: Geometry) -> np.ndarray:
    """Scores for a (B, C) candidate matrix, one row per user in ``users``."""
    users = np.asarray(users, dtype=np.int64)
    candidates = np.asarray(candidates, dtype=np.int64)
    theta = facet_weights(params.facet_logits[users])
    uf = params.user_facets(users)
    vf = batch_project(params.item_emb[candidates], params.item_proj)
    sims = _facet_sims(uf[:, None], vf, geom)
    return np.einsum("bck,bk->bc", sims, theta)


def normalize_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def init_params(n_users: int, n_items: int, dim: int, n_facets: int, geom: Geometry,
                seed=0) -> ModelParams:
    """Gaussian embeddings (std 1/sqrt(D)); identity + N(0, 0.01) projections."""
    if min(n_users, n_items, dim, n_facets) < 1:
        raise ValueError("all dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(dim)
    user_emb = rng.normal(0.0, scale, size=(n_users, dim))
    item_emb = rng.normal(0.0, scale, size=(n_items, dim))
    eye = np.eye(dim)[None]
    user_proj = eye + rng.normal(0.0, 0.01, size=(n_facets, dim, dim))
    item_proj = eye + rng.normal(0.0, 0.01, size=(n_facets, dim, dim))
    if Geometry(geom) is Geometry.SPHERICAL:
        user_emb = normalize_rows(user_emb)
        item_emb = normalize_rows(item_emb)
    return ModelParams(user_emb, item_emb, user_proj, item_proj, np.zeros((n_users, n_facets)))


def save_checkpoint(path, params: ModelParams, geom: Geometry, variant: Variant, seed: int,
                    extra: dict | None = None) -> None:
    """Write an ``.npz`` holding every tensor plus a JSON metadata header."""
    meta = {
        "n_users": params.n_users, "n_items": params.n_items,
        "dim": params.dim, "n_facets": params.n_facets,
        "geometry": Geometry(geom).value, "variant": Variant(variant).value,
        "seed": int(seed),
    }
    if extra:
        meta.update(extra)
    arrays = dict(zip(ModelParams.FIELDS, params.arrays()))
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    # fixed zip timestamps keep identical checkpoints byte-identical
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arr), allow_pickle=False)
            zf.writestr(info, buf.getvalue())


def load_checkpoint(path):
    """Return ``(params, meta)`` from a checkpoint written by ``save_checkpoint``."""
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        params = ModelParams(*(z[f].copy() for f in ModelParams.FIELDS))
    meta["geometry"] = Geometry(meta["geometry"])
    meta["variant"] = Variant(meta["variant"])
    return params, meta


def export_facet_embeddings(params: ModelParams, out_dir, user_ids=None, item_ids=None) -> list:
    """Write ``facet_<k>.tsv`` files: users (``u:<id>``) then items (``i:<id>``)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    uf = params.user_facets(np.arange(params.n_users))
    vf = params.item_facets(np.arange(params.n_items))
    user_ids = user_ids if user_ids is not None else range(params.n_users)
    item_ids = item_ids if item_ids is not None else range(params.n_items)
    paths = []
    for k in range(params.n_facets):
        path = out / f"facet_{k}.tsv"
        with open(path, "w") as f:
            for tag, ids, rows in (("u", user_ids, uf[:, k]), ("i", item_ids, vf[:, k])):
                for ident, row in zip(ids, rows):
                    f.write(f"{tag}:{ident}\t" + "\t".join(repr(float(x)) for x in row) + "\n")
        paths.append(path)
    return paths


def read_facet_embeddings(path):
    """Inverse of one ``export_facet_embeddings`` file: (tags, matrix)."""
    tags, rows = [], []
    with open(path) as f:
        for line in f:
            parts = line.rstrip("\n").split("\t")
            tags.append(parts[0])
            rows.append([float(x) for x in parts[1:]])
    return tags, np.array(rows)
