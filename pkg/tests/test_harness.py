"""Tests for the experiment harness: prediction, metrics, and full runs."""

import json
import os

import numpy as np
import pytest
from numpy.random import default_rng

from otcl.data import Batch, SynthSpec, ring_centers
from otcl.harness import (
    AccMatrix,
    RunConfig,
    avg_accuracy,
    avg_forgetting,
    evaluate_task,
    load_model,
    predict,
    run_experiment,
)
from otcl.losses import PreservationConfig
from otcl.mixture import ClassMixture, OtmmConfig
from otcl.model import FeatureExtractor


def small_extractor(input_dim=2, feat_dim=4, seed=0):
    return FeatureExtractor(input_dim, feat_dim, seed=seed, hidden=8)


def mixture_at(centroids: np.ndarray) -> ClassMixture:
    """Mixture whose component means are exactly the given rows."""
    c = np.asarray(centroids, dtype=np.float64)
    return ClassMixture.from_features(c, c.shape[0])


def separable_spec(seed=0):
    return SynthSpec(
        num_classes=2,
        modes_per_class=1,
        mode_centers=np.array([[[3.0, 0.0]], [[-3.0, 0.0]]]),
        mode_scale=0.3,
        samples_per_class=300,
        seed=seed,
    )


def tiny_run_config(out_dir=None, seeds=(0,), **overrides):
    base = dict(
        dataset="synth",
        synth=separable_spec(),
        num_tasks=1,
        classes_per_task=2,
        memory_size=100,
        batch_size=10,
        n_centroids=1,
        feat_dim=8,
        hidden_dim=32,
        seeds=seeds,
        out_dir=out_dir,
    )
    base.update(overrides)
    return RunConfig(**base)


# ------------------------------------------------------------- predict


def test_predict_returns_class_of_matching_centroid():
    fe = small_extractor()
    x0 = np.array([0.25, 0.75])
    x1 = np.array([0.9, 0.1])
    z0 = fe.features_np(x0.reshape(1, -1))[0]
    z1 = fe.features_np(x1.reshape(1, -1))[0]
    mixtures = {0: mixture_at(z0.reshape(1, -1)), 1: mixture_at(z1.reshape(1, -1))}
    assert predict(x0, fe, mixtures) == 0
    assert predict(x1, fe, mixtures) == 1


def test_predict_single_class_always_wins():
    fe = small_extractor()
    mixtures = {7: mixture_at(np.zeros((1, fe.feat_dim)))}
    rng = default_rng(0)
    for _ in range(5):
        assert predict(rng.normal(size=2), fe, mixtures) == 7


def test_predict_matches_brute_force_enumeration():
    # three classes, two components each, checked against a hand-rolled argmin
    fe = small_extractor(feat_dim=3)
    rng = default_rng(42)
    tables = {c: rng.normal(size=(2, 3)) for c in (0, 1, 2)}
    mixtures = {c: mixture_at(t) for c, t in tables.items()}
    for _ in range(50):
        x = rng.normal(size=2)
        z = fe.features_np(x.reshape(1, -1))[0]
        best_c, best_d = None, np.inf
        for c in (0, 1, 2):  # ascending order: ties resolve to the smallest id
            for row in tables[c]:
                d = float(np.sum((z - row) ** 2))
                if d < best_d:
                    best_c, best_d = c, d
        assert predict(x, fe, mixtures) == best_c


def test_predict_ignores_dict_insertion_order():
    fe = small_extractor()
    rng = default_rng(1)
    tables = {c: rng.normal(size=(2, fe.feat_dim)) for c in (0, 1, 2)}
    fwd = {c: mixture_at(tables[c]) for c in (0, 1, 2)}
    rev = {c: mixture_at(tables[c]) for c in (2, 1, 0)}
    for _ in range(20):
        x = rng.normal(size=2)
        assert predict(x, fe, fwd) == predict(x, fe, rev)


def test_predict_tie_breaks_to_smaller_class_id():
    fe = small_extractor()
    z = fe.features_np(np.array([[0.5, 0.5]]))[0]
    same = z.reshape(1, -1)
    mixtures = {3: mixture_at(same), 1: mixture_at(same.copy())}
    assert predict(np.array([0.5, 0.5]), fe, mixtures) == 1


# -------------------------------------------------------- evaluate_task


def test_evaluate_task_all_correct():
    fe = small_extractor()
    xs = np.array([[0.1, 0.2], [0.8, 0.9], [0.4, 0.6]])
    zs = fe.features_np(xs)
    mixtures = {c: mixture_at(zs[c].reshape(1, -1)) for c in range(3)}
    batch = Batch(features=xs, labels=np.array([0, 1, 2]))
    assert evaluate_task(batch, fe, mixtures) == 1.0


def test_evaluate_task_fractional_accuracy():
    fe = small_extractor()
    xs = np.array([[0.1, 0.2], [0.8, 0.9], [0.4, 0.6], [0.7, 0.3]])
    zs = fe.features_np(xs)
    mixtures = {0: mixture_at(zs[:1]), 1: mixture_at(zs[1:2])}
    # rows 2 and 3 are labelled with whatever they are NOT nearest to / are nearest to
    preds = [predict(x, fe, mixtures) for x in xs]
    labels = np.array([preds[0], preds[1], preds[2], 1 - preds[3]])
    batch = Batch(features=xs, labels=labels)
    assert evaluate_task(batch, fe, mixtures) == pytest.approx(0.75)


def test_evaluate_task_rejects_empty_mixtures():
    fe = small_extractor()
    batch = Batch(features=np.zeros((2, 2)), labels=np.array([0, 1]))
    with pytest.raises(ValueError):
        evaluate_task(batch, fe, {})


# ------------------------------------------------------------- metrics


def test_acc_matrix_shape_and_row_validation():
    acc = AccMatrix(3)
    assert acc.values.shape == (3, 3)
    assert np.all(np.isnan(acc.values))
    acc.set_row(0, [1.0])
    acc.set_row(1, [0.9, 0.8])
    assert acc.row(1).tolist() == [0.9, 0.8]
    with pytest.raises(ValueError):
        acc.set_row(2, [0.5, 0.5])  # needs 3 entries
    with pytest.raises(ValueError):
        acc.set_row(2, [0.5, 0.5, 1.5])  # out of range


def test_avg_accuracy_two_tasks():
    acc = AccMatrix(2)
    acc.set_row(0, [1.0])
    acc.set_row(1, [1.0, 0.8])
    assert avg_accuracy(acc, 2) == pytest.approx(0.9)


def test_avg_accuracy_single_task():
    acc = AccMatrix(1)
    acc.set_row(0, [0.73])
    assert avg_accuracy(acc, 1) == pytest.approx(0.73)


def test_avg_accuracy_rejects_unfilled_row():
    acc = AccMatrix(2)
    acc.set_row(0, [1.0])
    with pytest.raises(ValueError):
        avg_accuracy(acc, 2)


def test_avg_forgetting_two_tasks():
    acc = AccMatrix(2)
    acc.set_row(0, [0.9])
    acc.set_row(1, [0.7, 0.95])
    # only task 1 can be forgotten: 0.9 - 0.7
    assert avg_forgetting(acc, 2) == pytest.approx(0.2)


def test_avg_forgetting_zero_when_no_degradation():
    # the gap is unclamped, so F is zero exactly when the final accuracy
    # matches the best earlier accuracy on every old task
    acc = AccMatrix(2)
    acc.set_row(0, [0.8])
    acc.set_row(1, [0.8, 0.9])
    assert avg_forgetting(acc, 2) == pytest.approx(0.0)


def test_avg_forgetting_can_go_negative_on_backward_transfer():
    acc = AccMatrix(2)
    acc.set_row(0, [0.8])
    acc.set_row(1, [0.85, 0.9])
    assert avg_forgetting(acc, 2) == pytest.approx(-0.05)


def test_avg_forgetting_three_tasks_uses_running_max():
    acc = AccMatrix(3)
    acc.set_row(0, [0.9])
    acc.set_row(1, [0.95, 0.8])  # task 1 improves before dropping
    acc.set_row(2, [0.7, 0.75, 0.9])
    # task 1: max(0.9, 0.95) - 0.7 = 0.25; task 2: 0.8 - 0.75 = 0.05
    assert avg_forgetting(acc, 3) == pytest.approx((0.25 + 0.05) / 2)


def test_avg_forgetting_needs_two_tasks():
    acc = AccMatrix(1)
    acc.set_row(0, [1.0])
    with pytest.raises(ValueError):
        avg_forgetting(acc, 1)


# -------------------------------------------------------- full runs


def test_run_config_validation():
    with pytest.raises(ValueError):
        tiny_run_config(memory_size=0)
    with pytest.raises(ValueError):
        tiny_run_config(num_tasks=0)
    with pytest.raises(ValueError):
        tiny_run_config(seeds=())
    with pytest.raises(ValueError):
        RunConfig(dataset="synth", synth=None)  # synth data needs a spec
    with pytest.raises(ValueError):
        tiny_run_config(dataset="imagenet")


def test_run_experiment_learns_separable_classes(tmp_path):
    cfg = tiny_run_config(out_dir=str(tmp_path))
    mats, summary = run_experiment(cfg)
    assert avg_accuracy(mats[0], 1) >= 0.95
    assert summary["per_seed"]["0"]["avg_accuracy"] >= 0.95
    assert summary["per_seed"]["0"]["avg_forgetting"] is None  # undefined for one task
    assert summary["wall_clock_seconds"] > 0


def test_run_experiment_is_deterministic():
    cfg = tiny_run_config()
    mats_a, _ = run_experiment(cfg)
    mats_b, _ = run_experiment(tiny_run_config())
    assert np.array_equal(mats_a[0].values, mats_b[0].values, equal_nan=True)


def test_zero_step_config_leaves_model_untouched(tmp_path):
    pres = PreservationConfig(steps_l1=0, steps_l2=0)
    otmm = OtmmConfig(n_phi_steps=0, n_mix_steps=0)
    cfg = tiny_run_config(out_dir=str(tmp_path), preservation=pres, otmm=otmm)
    run_experiment(cfg)  # must not blow up even though nothing trains
    fe, _, _, _ = load_model(str(tmp_path / "checkpoint_seed0.npz"))
    # the extractor that came out of the run is bitwise the seed-0 init
    fresh = FeatureExtractor(2, cfg.feat_dim, seed=0, hidden=cfg.hidden_dim)
    for k, v in fresh.params.items():
        assert np.array_equal(fe.params[k].data, v.data)


def test_run_writes_metrics_and_summary(tmp_path):
    spec = SynthSpec(
        num_classes=4,
        modes_per_class=1,
        mode_centers=ring_centers(4, 1, radius=4.0),
        mode_scale=0.3,
        samples_per_class=200,
        seed=0,
    )
    cfg = tiny_run_config(out_dir=str(tmp_path), synth=spec, num_tasks=2, seeds=(0, 1))
    mats, summary = run_experiment(cfg)

    with open(tmp_path / "metrics.csv") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    assert lines[0] == "seed,task_index,eval_task,accuracy"
    # per seed: 1 + 2 lower-triangular entries
    assert len(lines) == 1 + 2 * 3
    for ln in lines[1:]:
        seed, t, j, a = ln.split(",")
        assert int(seed) in (0, 1)
        assert 1 <= int(j) <= int(t) <= 2
        np.testing.assert_allclose(float(a), mats[int(seed)].values[int(t) - 1, int(j) - 1])

    with open(tmp_path / "summary.json") as fh:
        s = json.load(fh)
    assert s["config"]["num_tasks"] == 2
    assert set(s["per_seed"]) == {"0", "1"}
    assert "mean_avg_accuracy" in s and "std_avg_accuracy" in s
    assert "mean_avg_forgetting" in s and "wall_clock_seconds" in s
    assert s == summary  # in-memory summary is exactly what was written


def test_run_saves_loadable_checkpoint(tmp_path):
    cfg = tiny_run_config(out_dir=str(tmp_path))
    mats, _ = run_experiment(cfg)
    fe, state, protos, meta = load_model(str(tmp_path / "checkpoint_seed0.npz"))
    assert meta["classes_per_task"] == 2 and meta["num_tasks"] == 1
    assert sorted(state.mixtures) == [0, 1]
    # the restored model reproduces the recorded final-task accuracy
    spec = separable_spec()
    from otcl.data import gen_synthetic

    _, test = gen_synthetic(spec)
    feats = np.stack([s.features for s in test])
    labels = np.array([s.label for s in test])
    acc = evaluate_task(Batch(features=feats, labels=labels), fe, state.mixtures)
    np.testing.assert_allclose(acc, mats[0].values[0, 0])


def test_eval_curve_written_when_requested(tmp_path):
    cfg = tiny_run_config(out_dir=str(tmp_path), eval_every_batch=True)
    run_experiment(cfg)
    path = tmp_path / "curve_seed0.csv"
    assert path.exists()
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    assert lines[0] == "task_index,batch_index,avg_accuracy_seen"
    assert len(lines) > 1
    last = lines[-1].split(",")
    assert 0.0 <= float(last[2]) <= 1.0


def test_random_insertion_ablation_runs(tmp_path):
    cfg = tiny_run_config(out_dir=str(tmp_path), random_insertion=True)
    mats, _ = run_experiment(cfg)
    assert avg_accuracy(mats[0], 1) >= 0.9  # easy data: ablation still learns


def test_partial_metrics_flushed_on_failure(tmp_path, monkeypatch):
    import otcl.harness as hz

    real = hz._run_single_seed

    def flaky(cfg, seed, on_row):
        if seed == 1:
            raise ValueError("synthetic mid-run failure")
        return real(cfg, seed, on_row)

    monkeypatch.setattr(hz, "_run_single_seed", flaky)
    cfg = tiny_run_config(out_dir=str(tmp_path), seeds=(0, 1))
    with pytest.raises(ValueError, match="mid-run failure"):
        run_experiment(cfg)
    # seed 0's rows reached disk, and the summary records the failure
    with open(tmp_path / "metrics.csv") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    assert lines[0] == "seed,task_index,eval_task,accuracy"
    assert len(lines) == 2 and lines[1].startswith("0,1,1,")
    with open(tmp_path / "summary.json") as fh:
        s = json.load(fh)
    assert "error" in s and "mid-run failure" in s["error"]


def test_missing_mnist_dir_raises_file_not_found(tmp_path):
    cfg = tiny_run_config(dataset="mnist", synth=None, data_dir=str(tmp_path / "nope"))
    with pytest.raises(FileNotFoundError):
        run_experiment(cfg)


def test_idx_dataset_runs_end_to_end(tmp_path):
    # image-shaped dataset through the IDX loader: 10 classes of constant
    # 8x8 tiles at distinct grey levels, easily separable
    from otcl.data import write_idx
    from otcl.harness import MNIST_FILES

    rng = default_rng(0)
    data_dir = tmp_path / "idx"
    data_dir.mkdir()
    patterns = rng.integers(0, 256, size=(10, 8, 8))

    def build(n_per_class):
        images, labels = [], []
        for c in range(10):
            tiles = np.clip(
                patterns[c] + rng.integers(-12, 13, size=(n_per_class, 8, 8)), 0, 255
            ).astype(np.uint8)
            images.append(tiles)
            labels += [c] * n_per_class
        return np.concatenate(images), np.array(labels)

    tr_imgs, tr_labs = build(20)
    te_imgs, te_labs = build(5)
    write_idx(data_dir / MNIST_FILES["train_images"],
              data_dir / MNIST_FILES["train_labels"], tr_imgs, tr_labs)
    write_idx(data_dir / MNIST_FILES["test_images"],
              data_dir / MNIST_FILES["test_labels"], te_imgs, te_labs)

    cfg = tiny_run_config(
        out_dir=str(tmp_path / "out"),
        dataset="mnist",
        synth=None,
        data_dir=str(data_dir),
        num_tasks=5,
        memory_size=60,
    )
    mats, summary = run_experiment(cfg)
    assert mats[0].values.shape == (5, 5)
    assert summary["mean_avg_accuracy"] >= 0.7  # far above the 0.1 chance level
    assert (tmp_path / "out" / "metrics.csv").exists()
