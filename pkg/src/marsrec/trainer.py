"""Training loop, early stopping, config files and grid sweeps."""

from __future__ import annotations

import dataclasses
import itertools
import json
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .dataset import SplitDataset, compute_adaptive_margins, sample_batch, user_sampling_distribution
from .evaluator import EvalProtocol, evaluate
from .model import ModelParams, Variant, init_params
from .objective import LossConfig, total_loss_gradients
from .optim import OptimConfig, apply_step

logger = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6

# named random streams derived from the root seed
STREAM_SPLIT, STREAM_INIT, STREAM_SAMPLING, STREAM_EVAL = range(4)


def stream_seed(seed: int, stream: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), stream])


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    variant: Variant = Variant.MARS
    k: int = 4
    dim: int = 32
    epochs: int = 30
    batch_size: int = 1000
    n_neg: int = 1
    learning_rate: float = 0.1
    lambda_pull: float = 0.1
    lambda_facet: float = 0.01
    alpha: float = 0.1
    beta: float = 0.8
    fixed_margin: float = 1.0
    facet_loss_items: bool = True
    facet_separating: bool = True
    calibrate: bool = True
    lr_decay: float = 1.0
    step_reduction: str = "sum"
    seed: int = 0
    patience: int = 10
    eval_every: int = 1
    eval_negatives: int = 100
    workers: int = 1

    def __post_init__(self):
        self.variant = Variant(self.variant)
        if self.variant is Variant.CML and self.k != 1:
            warnings.warn(f"variant cml uses a single space; forcing k=1 (was {self.k})")
            self.k = 1
        for name in ("k", "dim", "batch_size", "n_neg", "eval_every", "patience", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.step_reduction not in ("sum", "mean"):
            raise ValueError("step_reduction must be 'sum' or 'mean'")
        if self.workers != 1:
            raise ValueError("only single-worker training is supported")
        self.loss_config()

    @property
    def geometry(self):
        return self.variant.geometry

    def loss_config(self) -> LossConfig:
        return LossConfig(self.lambda_pull, self.lambda_facet, self.alpha, self.fixed_margin,
                          self.facet_loss_items, self.facet_separating)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["variant"] = self.variant.value
        return d

    def replace(self, **changes) -> "TrainConfig":
        d = self.to_dict()
        d.update(changes)
        return TrainConfig(**d)


_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False,
         "on": True, "off": False}


def coerce_config_values(raw: dict) -> dict:
    """Convert string values to the types of the matching TrainConfig fields."""
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    out = {}
    for key, value in raw.items():
        key = key.strip().replace("-", "_")
        if key not in types:
            raise ValueError(f"unknown config key {key!r}")
        if not isinstance(value, str):
            out[key] = value
            continue
        value = value.strip()
        kind = types[key]
        if kind == "bool":
            if value.lower() not in _BOOL:
                raise ValueError(f"{key}: expected a boolean, got {value!r}")
            out[key] = _BOOL[value.lower()]
        elif kind == "int":
            out[key] = int(value)
        elif kind == "float":
            out[key] = float(value)
        else:
            out[key] = value
    return out


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    raw = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            raw[key.strip()] = value.strip()
    return coerce_config_values(raw)


def write_config_file(cfg: TrainConfig, path) -> None:
    with open(path, "w") as f:
        for key, value in cfg.to_dict().items():
            f.write(f"{key} = {value}\n")


@dataclass
class EpochRecord:
    epoch: int
    push: float
    pull: float
    facet: float
    total: float
    dev_hr10: float
    dev_ndcg10: float
    seconds: float = 0.0

    def to_json(self) -> str:
        # wall-clock time is left out so logs of identical runs are byte-identical
        d = dataclasses.asdict(self)
        d.pop("seconds")
        return json.dumps(d, sort_keys=True)


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    best_epoch: Optional[int] = None
    stopped_early: bool = False

    def write_jsonl(self, path) -> None:
        with open(path, "w") as f:
            for r in self.records:
                f.write(r.to_json() + "\n")


def _check_finite(value, where):
    if not math.isfinite(value) or abs(value) > DIVERGENCE_LIMIT:
        raise TrainingDiverged(f"loss diverged ({value!r}) at {where}; try a smaller learning rate")


def train(split: SplitDataset, cfg: TrainConfig,
          on_checkpoint: Optional[Callable[[int, ModelParams], None]] = None):
    """Train one model and return ``(best_params, TrainLog)``.

    The learning rate multiplies the batch-summed gradient unless
    ``step_reduction`` is ``"mean"``. Each epoch draws ``ceil(|train| / batch_size)`` batches from the biased
    user sampler. Dev HR@10 is measured every ``eval_every`` epochs; training
    stops after ``patience`` evaluations without improvement, and the
    parameters of the best evaluation are returned.
    """
    ds = split.train
    geom = cfg.geometry
    params = init_params(ds.n_users, ds.n_items, cfg.dim, cfg.k, geom,
                         seed=stream_seed(cfg.seed, STREAM_INIT))
    log = TrainLog()
    if cfg.epochs == 0:
        return params, log
    margins = compute_adaptive_margins(ds)
    dist = user_sampling_distribution(ds, cfg.beta)
    rng = np.random.default_rng(stream_seed(cfg.seed, STREAM_SAMPLING))
    loss_cfg = cfg.loss_config()
    # losses are batch means; with step_reduction="sum" the learning rate acts on
    # the batch-summed gradient so its scale does not shrink with the batch size
    lr = cfg.learning_rate
    if cfg.step_reduction == "sum":
        lr *= cfg.batch_size * cfg.n_neg
    opt = OptimConfig(lr, geometry=geom, calibrate=cfg.calibrate)
    protocol = EvalProtocol(cfg.eval_negatives, (10,), seed=int(stream_seed(cfg.seed, STREAM_EVAL)
                                                               .generate_state(1)[0]))
    known = split.held_out()
    n_batches = max(1, math.ceil(len(ds) / cfg.batch_size))
    best, best_hr, since_best = params.copy(), -1.0, 0
    sums = np.zeros(4)
    n_seen = 0
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        for b in range(n_batches):
            batch = sample_batch(ds, dist, cfg.batch_size, cfg.n_neg, rng)
            losses, grads = total_loss_gradients(params, batch, margins, loss_cfg, cfg.variant)
            _check_finite(losses.total, f"epoch {epoch}, batch {b}")
            apply_step(params, grads, opt)
            sums += (losses.push, losses.pull, losses.facet, losses.total)
            n_seen += 1
        opt.learning_rate *= cfg.lr_decay
        if epoch % cfg.eval_every and epoch != cfg.epochs:
            continue
        if len(split.dev_users):
            rep = evaluate(params, split, protocol, geom, target="dev", known=known)
            hr, ndcg = rep.hr[10], rep.ndcg[10]
        else:
            hr = ndcg = float("nan")
        mean = sums / n_seen
        rec = EpochRecord(epoch, *map(float, mean), dev_hr10=hr, dev_ndcg10=ndcg,
                          seconds=time.perf_counter() - t0)
        log.records.append(rec)
        logger.info("epoch %d total=%.4f dev HR@10=%.4f nDCG@10=%.4f (%.1fs)",
                    epoch, rec.total, hr, ndcg, rec.seconds)
        sums[:] = 0
        n_seen = 0
        if on_checkpoint is not None:
            on_checkpoint(epoch, params)
        if not hr <= best_hr:  # NaN dev metrics (no dev users) keep the latest params
            best, best_hr, since_best = params.copy(), hr, 0
            log.best_epoch = epoch
        else:
            since_best += 1
            if since_best >= cfg.patience:
                log.stopped_early = True
                break
    return best, log


def sweep(split: SplitDataset, base_cfg: TrainConfig, grid: dict):
    """Train every point of the grid (same seed); rank by dev nDCG@10.

    Returns ``[(config, dev_ndcg10), ...]`` best first. A cell that fails
    records NaN and sorts last.
    """
    if not grid:
        raise ValueError("empty grid")
    keys = list(grid)
    results = []
    for values in itertools.product(*(grid[k] for k in keys)):
        cfg = base_cfg.replace(**dict(zip(keys, values)))
        try:
            _, log = train(split, cfg)
            scored = [r for r in log.records if not math.isnan(r.dev_hr10)]
            score = max(scored, key=lambda r: r.dev_hr10).dev_ndcg10 if scored else float("nan")
        except (TrainingDiverged, FloatingPointError, ValueError) as exc:
            logger.warning("sweep cell %s failed: %s", dict(zip(keys, values)), exc)
            score = float("nan")
        results.append((cfg, score))
    results.sort(key=lambda t: (math.isnan(t[1]), 0.0 if math.isnan(t[1]) else -t[1]))
    return results
