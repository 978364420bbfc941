import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import binom

from petkit import tensor as T
from petkit.accounting import PetStrategy, apply_strategy, count_params
from petkit.backbone import build_backbone
from petkit.harness import (DEFAULT_LR_GRID, TrainConfig, TrainingError, attach_head, build_task,
                            low_resource_sweep, lr_grid_search, pick_best, run_one, train)
from petkit.synth import SyntheticTaskSpec, gen_synthetic_dataset
from petkit.tensor import ConfigError

SMALL = SyntheticTaskSpec(n_classes=4, samples_per_class=20, seed=3)


@pytest.fixture(scope="module")
def mini():
    return build_backbone("mini", seed=0)


@pytest.fixture(scope="module")
def small():
    return gen_synthetic_dataset(SMALL)


# ------------------------------------------------------------------ synthetic data

def test_dataset_deterministic():
    a, b = gen_synthetic_dataset(SMALL), gen_synthetic_dataset(SMALL)
    for k in ("x_train", "y_train", "x_val", "y_val", "x_test", "y_test"):
        assert getattr(a, k).tobytes() == getattr(b, k).tobytes()
    c = gen_synthetic_dataset(replace(SMALL, seed=4))
    assert a.x_train.tobytes() != c.x_train.tobytes()


def test_split_sizes_and_shapes():
    ds = gen_synthetic_dataset(SyntheticTaskSpec())
    assert ds.split_sizes() == (800, 100, 100)
    assert ds.x_train.shape == (800, 1, 400)
    assert np.bincount(ds.y_test).tolist() == [10] * 10


def test_waves_unit_rms_without_noise():
    ds = gen_synthetic_dataset(replace(SMALL, snr_db=math.inf))
    rms = np.sqrt(np.mean(ds.x_train ** 2, axis=-1))
    np.testing.assert_allclose(rms, 1.0, atol=1e-12)


def test_noiseless_classes_are_spectrally_separable():
    ds = gen_synthetic_dataset(SyntheticTaskSpec(snr_db=math.inf, seed=0))
    spec = lambda x: np.log(np.abs(np.fft.rfft(x[:, 0], axis=-1)) + 1e-6)
    feats = spec(ds.x_train)
    centroids = np.stack([feats[ds.y_train == c].mean(axis=0) for c in range(ds.n_classes)])
    test = spec(ds.x_test)
    pred = np.argmin(((test[:, None, :] - centroids[None]) ** 2).sum(-1), axis=1)
    assert np.mean(pred == ds.y_test) > 0.9


def test_subset_is_class_balanced(small):
    sub = small.subset(0.5)
    assert np.bincount(sub.y_train).tolist() == [8] * 4
    assert small.subset(1.0) is small
    with pytest.raises(ConfigError):
        small.subset(0.01)
    with pytest.raises(ConfigError):
        small.subset(0.0)


def test_dataset_errors():
    with pytest.raises(ConfigError):
        gen_synthetic_dataset(replace(SMALL, n_classes=1))


# ------------------------------------------------------------------ head

def test_head_adds_330_on_mini(mini):
    pet, _ = apply_strategy(mini, PetStrategy.frozen())
    task = attach_head(pet, 10)
    assert sum(t.size for t in task.head_parameters()) == 330
    assert all(t.trainable for t in task.head_parameters())
    assert count_params(pet, "all", task.head_parameters()).head == 330


def test_logits_shape(mini, small, rng):
    task = build_task(mini, PetStrategy.chapter(), 4, 0)
    assert task.logits(T.tensor(small.x_test[:3])).shape == (3, 4)
    assert task.logits(T.tensor(small.x_test[0])).shape == (4,)


def test_weighted_sum_head_consumes_mix(mini, small):
    pet, _ = apply_strategy(mini, PetStrategy.weighted_sum())
    task = attach_head(pet, 4)
    assert task.head == "weighted-sum-then-mean-pool-linear"
    x = T.tensor(small.x_test[:2])
    layers = mini.encode(mini.feature_extract(x))
    want = np.mean([l.data for l in layers], axis=0).mean(axis=-2) @ task.head_w.data + task.head_b.data
    np.testing.assert_allclose(task.logits(x).data, want, atol=1e-12)
    with pytest.raises(ConfigError):
        attach_head(pet, 4, head="mean-pool-linear")


@pytest.mark.parametrize("strategy", [PetStrategy.chapter(), PetStrategy.houlsby_only(),
                                      PetStrategy.cnn_adapter(compression=2)])
def test_task_identity_at_init(mini, small, strategy):
    x = T.tensor(small.x_test)
    base = build_task(mini, PetStrategy.frozen(), 4, 7).logits(x).data
    assert build_task(mini, strategy, 4, 7).logits(x).data.tobytes() == base.tobytes()


# ------------------------------------------------------------------ training

def test_train_updates_only_trainable(mini, small):
    task = build_task(mini, PetStrategy.chapter(top_n=1), 4, 0)
    frozen = [(t, t.data.copy()) for t in task.frozen_parameters()]
    trainable = [(t, t.data.copy()) for t in task.trainable_parameters()]
    rec = train(task, small, TrainConfig(epochs=2, lr_grid=(1e-2,), mode="verify-64bit"))
    assert all(t.data.tobytes() == d.tobytes() for t, d in frozen)
    assert any(t.data.tobytes() != d.tobytes() for t, d in trainable)
    assert len(rec.train_loss) == len(rec.val_acc) == 2


def test_sgd_runs(mini, small):
    task = build_task(mini, PetStrategy.houlsby_only(8), 4, 0)
    rec = train(task, small, TrainConfig(epochs=1, optimizer="sgd", lr_grid=(1e-2,)))
    assert math.isfinite(rec.train_loss[0])


def test_zero_epochs_near_chance(mini):
    ds = gen_synthetic_dataset(SyntheticTaskSpec(n_classes=4, samples_per_class=100, seed=1))
    rec = run_one(mini, PetStrategy.frozen(), ds, TrainConfig(epochs=0), 1e-3)
    n = len(ds.y_test)
    lo, hi = binom.ppf([0.0005, 0.9995], n, 0.25) / n
    assert rec.best_epoch == 0 and rec.train_loss == []
    assert lo <= rec.test_acc <= hi


def test_frozen_learns_easy_task(mini):
    ds = gen_synthetic_dataset(SyntheticTaskSpec(n_classes=4, samples_per_class=40, snr_db=40.0, seed=2))
    best, _ = lr_grid_search(mini, PetStrategy.frozen(), ds, TrainConfig(lr_grid=(1e-2,), epochs=30))
    assert best.test_acc > 0.25


def test_run_is_deterministic(mini, small):
    cfg = TrainConfig(epochs=2, lr_grid=(1e-3,))
    a = run_one(mini, PetStrategy.chapter(), small, cfg, 1e-3).to_dict()
    b = run_one(mini, PetStrategy.chapter(), small, cfg, 1e-3).to_dict()
    a.pop("wall_time"), b.pop("wall_time")
    assert a == b


def test_non_finite_loss_raises(mini, small):
    task = build_task(mini, PetStrategy.frozen(), 4, 0)
    task.head_w.data[...] = np.nan
    with pytest.raises(TrainingError, match=r"step 0 .*lr 0\.001"):
        train(task, small, TrainConfig(epochs=1, lr_grid=(1e-3,)))


def test_best_checkpoint_is_restored(mini, small):
    task = build_task(mini, PetStrategy.cnn_adapter(top_n=1), 4, 0)
    rec = train(task, small, TrainConfig(epochs=3, lr_grid=(3e-2,)))
    assert rec.best_val_acc >= max(rec.val_acc)
    assert rec.best_epoch == 0 or rec.val_acc[rec.best_epoch - 1] == rec.best_val_acc
    assert task.accuracy(small.x_val, small.y_val) == rec.best_val_acc


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr_grid=())
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="lamb")
    with pytest.raises(ConfigError):
        TrainConfig(subset_fraction=1.5)


# ------------------------------------------------------------------ grid search and sweep

def test_default_grid_spans_decades():
    assert DEFAULT_LR_GRID == (1e-3, 1e-4, 1e-5)
    assert TrainConfig().lr_grid == DEFAULT_LR_GRID


def test_single_element_grid(mini, small):
    best, records = lr_grid_search(mini, PetStrategy.frozen(), small, TrainConfig(epochs=1, lr_grid=(1e-3,)))
    assert records == [best] and best.lr == 1e-3


def test_grid_records_and_tie_break(mini, small):
    cfg = TrainConfig(epochs=1, lr_grid=(1e-3, 1e-4))
    best, records = lr_grid_search(mini, PetStrategy.frozen(), small, cfg)
    assert [r.lr for r in records] == [1e-3, 1e-4]
    assert best.best_val_acc == max(r.best_val_acc for r in records)
    tied = [replace(records[0], best_val_acc=0.5), replace(records[1], best_val_acc=0.5)]
    assert pick_best(tied).lr == 1e-4


def test_sweep_rows_and_consistency(mini, small):
    cfg = TrainConfig(epochs=1, lr_grid=(1e-3,))
    strategies = [PetStrategy.frozen(), PetStrategy.chapter(top_n=1)]
    cells, rows = low_resource_sweep(mini, strategies, small, cfg, fractions=(1.0, 0.5), seeds=(0, 1))
    assert len(rows) == 4 and len(cells) == 8
    assert all(r["n_seeds"] == 2 for r in rows)
    ref, _ = lr_grid_search(mini, strategies[1], small, replace(cfg, seed=1))
    cell = next(c for c in cells if c.strategy == strategies[1].label and c.fraction == 1.0 and c.seed == 1)
    a, b = cell.best.to_dict(), ref.to_dict()
    a.pop("wall_time"), b.pop("wall_time")
    assert a == b


def test_sweep_rejects_tiny_fraction_before_training(mini, small):
    with pytest.raises(ConfigError):
        low_resource_sweep(mini, [PetStrategy.frozen()], small, TrainConfig(epochs=1), fractions=(0.01,))
