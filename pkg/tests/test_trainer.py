import math
import warnings

import numpy as np
import pytest

from marsrec.dataset import leave_one_out_split
from marsrec.model import Variant
from marsrec.trainer import (TrainConfig, TrainingDiverged, coerce_config_values, read_config_file,
                             stream_seed, sweep, train, write_config_file)

from conftest import random_dataset


@pytest.fixture(scope="module")
def split():
    return leave_one_out_split(random_dataset(40, 60, 0.12, seed=3, min_per_user=3), seed=0)


def small_cfg(**kw):
    base = dict(variant="mars", k=2, dim=6, epochs=3, batch_size=50, learning_rate=0.01,
                eval_negatives=30)
    base.update(kw)
    return TrainConfig(**base)


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.batch_size, cfg.n_neg, cfg.alpha, cfg.beta) == (1000, 1, 0.1, 0.8)
        assert cfg.variant is Variant.MARS

    def test_cml_forces_single_facet(self):
        with pytest.warns(UserWarning):
            cfg = TrainConfig(variant="cml", k=4)
        assert cfg.k == 1

    @pytest.mark.parametrize("bad", [dict(k=0), dict(dim=0), dict(learning_rate=0.0),
                                     dict(batch_size=0), dict(workers=2), dict(alpha=0),
                                     dict(lambda_pull=-1), dict(step_reduction="max")])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)

    def test_file_roundtrip(self, tmp_path):
        cfg = small_cfg(lambda_facet=0.1, calibrate=False)
        write_config_file(cfg, tmp_path / "c.txt")
        assert TrainConfig(**read_config_file(tmp_path / "c.txt")) == cfg

    def test_file_comments_and_errors(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("# comment\nk = 3  # trailing\nvariant = mar\n")
        assert read_config_file(p) == {"k": 3, "variant": "mar"}
        p.write_text("k: 3\n")
        with pytest.raises(ValueError, match=":1:"):
            read_config_file(p)
        with pytest.raises(ValueError):
            coerce_config_values({"nope": "1"})
        with pytest.raises(ValueError):
            coerce_config_values({"calibrate": "maybe"})

    def test_coerce_types(self):
        out = coerce_config_values({"lambda-pull": "0.5", "epochs": "7", "facet_loss_items": "off"})
        assert out == {"lambda_pull": 0.5, "epochs": 7, "facet_loss_items": False}

    def test_stream_seeds_differ(self):
        a = np.random.default_rng(stream_seed(0, 1)).random()
        b = np.random.default_rng(stream_seed(0, 2)).random()
        assert a != b


class TestTrain:
    @pytest.mark.parametrize("variant", ["cml", "mar", "mars"])
    def test_runs_and_logs(self, split, variant):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            cfg = small_cfg(variant=variant)
        params, log = train(split, cfg)
        assert [r.epoch for r in log.records] == [1, 2, 3]
        for r in log.records:
            assert math.isfinite(r.total)
            assert r.total == pytest.approx(r.push + cfg.lambda_pull * r.pull
                                            + cfg.lambda_facet * r.facet, abs=1e-9)
            assert 0 <= r.dev_hr10 <= 1
        assert params.n_facets == cfg.k
        if variant == "mars":
            np.testing.assert_allclose(np.linalg.norm(params.user_emb, axis=1), 1, atol=1e-9)

    def test_deterministic(self, split):
        cfg = small_cfg()
        p1, l1 = train(split, cfg)
        p2, l2 = train(split, cfg)
        assert [r.to_json() for r in l1.records] == [r.to_json() for r in l2.records]
        for a, b in zip(p1.arrays(), p2.arrays()):
            np.testing.assert_array_equal(a, b)

    def test_eval_every_and_final_epoch(self, split):
        _, log = train(split, small_cfg(epochs=5, eval_every=2))
        assert [r.epoch for r in log.records] == [2, 4, 5]

    def test_early_stopping_returns_best(self, split):
        snaps = {}
        cfg = small_cfg(epochs=30, patience=2, learning_rate=0.1)
        best, log = train(split, cfg, on_checkpoint=lambda e, p: snaps.__setitem__(e, p.copy()))
        hrs = [r.dev_hr10 for r in log.records]
        assert log.best_epoch == log.records[int(np.argmax(hrs))].epoch
        if log.stopped_early:
            assert len(log.records) < 30
            assert log.records[-1].epoch - log.best_epoch == 2
        np.testing.assert_array_equal(best.user_emb, snaps[log.best_epoch].user_emb)

    def test_zero_epochs_returns_init(self, split):
        params, log = train(split, small_cfg(epochs=0))
        assert log.records == [] and params.n_users == split.train.n_users

    def test_divergence_detected(self, split, monkeypatch):
        import marsrec.trainer as tr
        real = tr.total_loss_gradients

        def poisoned(*args, **kw):
            lb, grads = real(*args, **kw)
            lb.total = float("nan")
            return lb, grads

        monkeypatch.setattr(tr, "total_loss_gradients", poisoned)
        with pytest.raises(TrainingDiverged, match="epoch 1, batch 0"):
            train(split, small_cfg())

    def test_step_reduction_scales_learning_rate(self, split):
        a, _ = train(split, small_cfg(epochs=1, learning_rate=0.002))
        b, _ = train(split, small_cfg(epochs=1, learning_rate=0.1, step_reduction="mean"))
        np.testing.assert_allclose(a.user_emb, b.user_emb, atol=1e-12)


def test_sweep_orders_by_dev(split):
    results = sweep(split, small_cfg(epochs=2), {"learning_rate": [0.001, 0.01], "k": [1, 2]})
    assert len(results) == 4
    scores = [s for _, s in results]
    assert scores == sorted(scores, reverse=True)
    with pytest.raises(ValueError):
        sweep(split, small_cfg(), {})
