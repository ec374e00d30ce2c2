import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otcl import autodiff as ad
from otcl import losses as L
from otcl.autodiff import Tensor
from otcl.data import Batch
from otcl.model import ClassPrototypes, FeatureExtractor


def make_protos(feat_dim, class_ids, seed=0):
    p = ClassPrototypes(feat_dim)
    p.init_new_classes(class_ids, seed=seed)
    return p


def naive_separation(z, labels, protos):
    """Per-sample CE over all known prototypes, class-mean, summed."""
    known = protos.known()
    W = np.stack([protos.params[f"proto_{c}"].data[0] for c in known])
    per_class = {}
    for i, y in enumerate(labels):
        logits = W @ z[i]
        log_probs = logits - np.log(np.exp(logits - logits.max()).sum()) - logits.max()
        per_class.setdefault(int(y), []).append(-log_probs[known.index(int(y))])
    return sum(np.mean(v) for v in per_class.values())


class TestLossSeparation:
    def test_uniform_logits_give_ln_num_known_per_class(self):
        protos = make_protos(3, [0, 1])
        for c in (0, 1):
            protos.params[f"proto_{c}"].data[...] = 0.0
        z = Tensor(np.random.default_rng(0).normal(size=(4, 3)))
        loss = L.loss_separation(z, np.array([0, 0, 1, 1]), protos)
        assert loss.item() == pytest.approx(2 * np.log(2.0), abs=1e-12)

    def test_confident_correct_logit_drives_loss_to_zero(self):
        protos = make_protos(2, [0, 1])
        protos.params["proto_0"].data[...] = [[1000.0, 0.0]]
        protos.params["proto_1"].data[...] = [[0.0, 1000.0]]
        z = Tensor(np.eye(2))
        loss = L.loss_separation(z, np.array([0, 1]), protos)
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_matches_naive_per_sample_oracle(self):
        rng = np.random.default_rng(1)
        protos = make_protos(5, [0, 1, 2], seed=1)
        z = rng.normal(size=(9, 5))
        labels = np.array([0, 1, 2, 0, 1, 2, 0, 0, 1])
        got = L.loss_separation(Tensor(z), labels, protos).item()
        assert got == pytest.approx(naive_separation(z, labels, protos), abs=1e-10)

    def test_denominator_covers_unseen_in_batch_classes(self):
        # class 2 has a prototype but no sample; it must still eat probability mass
        protos = make_protos(2, [0, 1, 2], seed=2)
        z = np.random.default_rng(3).normal(size=(4, 2))
        labels = np.array([0, 0, 1, 1])
        got = L.loss_separation(Tensor(z), labels, protos).item()
        assert got == pytest.approx(naive_separation(z, labels, protos), abs=1e-10)

    def test_empty_batch_rejected(self):
        protos = make_protos(2, [0])
        with pytest.raises(ValueError, match="empty"):
            L.loss_separation(Tensor(np.zeros((0, 2))), np.array([]), protos)

    def test_missing_prototype_rejected(self):
        protos = make_protos(2, [0])
        with pytest.raises(KeyError):
            L.loss_separation(Tensor(np.zeros((1, 2))), np.array([5]), protos)

    @given(st.integers(0, 10_000))
    @settings(max_examples=20, deadline=None)
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        protos = make_protos(3, [0, 1], seed=seed)
        z = rng.normal(size=(6, 3))
        labels = rng.integers(0, 2, size=6)
        assert L.loss_separation(Tensor(z), labels, protos).item() >= 0.0

    def test_gradients_match_finite_diff(self):
        rng = np.random.default_rng(4)
        fe = FeatureExtractor(3, feat_dim=2, seed=4, hidden=4)
        protos = make_protos(2, [0, 1], seed=4)
        x = Tensor(rng.normal(size=(5, 3)))
        labels = np.array([0, 1, 0, 1, 0])

        both = ad.ParamSet()
        for name, t in list(fe.params.items()) + list(protos.params.items()):
            both._params[name] = t  # same underlying tensors, one sweep

        def loss_fn():
            return L.loss_separation(fe.forward(x), labels, protos)

        assert ad.finite_diff_check(loss_fn, both, h=1e-5) <= 1e-4


class TestApplyClipGrad:
    def _protos_with_grads(self, seed=0):
        rng = np.random.default_rng(seed)
        protos = make_protos(4, [0, 1, 2], seed=seed)
        for c in protos.known():
            protos.params[f"proto_{c}"].grad[:] = rng.normal(size=(1, 4))
        return protos

    def test_alpha_zero_freezes_old_bitwise(self):
        protos = self._protos_with_grads()
        before = {c: protos.params[f"proto_{c}"].data.tobytes() for c in (0, 1)}
        L.apply_clip_grad(protos, clip_alpha=0.0, lr_proto=0.5, old_classes=[0, 1])
        for c in (0, 1):
            assert protos.params[f"proto_{c}"].data.tobytes() == before[c]

    def test_alpha_one_treats_all_equally(self):
        pa = self._protos_with_grads(seed=1)
        pb = self._protos_with_grads(seed=1)
        L.apply_clip_grad(pa, clip_alpha=1.0, lr_proto=0.3, old_classes=[0, 1])
        L.apply_clip_grad(pb, clip_alpha=1.0, lr_proto=0.3, old_classes=[])
        for c in pa.known():
            assert (
                pa.params[f"proto_{c}"].data.tobytes()
                == pb.params[f"proto_{c}"].data.tobytes()
            )

    def test_alpha_tenth_scales_old_displacement_exactly(self):
        protos = self._protos_with_grads(seed=2)
        grads = {c: protos.params[f"proto_{c}"].grad.copy() for c in protos.known()}
        before = {c: protos.params[f"proto_{c}"].data.copy() for c in protos.known()}
        L.apply_clip_grad(protos, clip_alpha=0.1, lr_proto=0.2, old_classes=[0])
        moved = {
            c: protos.params[f"proto_{c}"].data - before[c] for c in protos.known()
        }
        # reconstructed displacement carries one rounding of the subtraction
        np.testing.assert_allclose(moved[0], -0.2 * 0.1 * grads[0], rtol=1e-12)
        np.testing.assert_allclose(moved[1], -0.2 * grads[1], rtol=1e-12)
        np.testing.assert_allclose(moved[2], -0.2 * grads[2], rtol=1e-12)

    def test_grads_zeroed_after(self):
        protos = self._protos_with_grads(seed=3)
        L.apply_clip_grad(protos, clip_alpha=0.5, lr_proto=0.1, old_classes=[0])
        for c in protos.known():
            assert not protos.params[f"proto_{c}"].grad.any()

    def test_bad_args_rejected(self):
        protos = self._protos_with_grads()
        with pytest.raises(ValueError):
            L.apply_clip_grad(protos, clip_alpha=1.5, lr_proto=0.1, old_classes=[])
        with pytest.raises(ValueError):
            L.apply_clip_grad(protos, clip_alpha=0.5, lr_proto=0.0, old_classes=[])


class TestMeanPrototypes:
    def test_single_sample_is_its_feature(self):
        f = np.array([[1.0, 2.0, 3.0]])
        means = L.compute_mean_prototypes(f, np.array([7]))
        np.testing.assert_array_equal(means[7], f[0])

    def test_symmetric_pair_averages_to_zero(self):
        f = np.array([[1.0, -2.0], [-1.0, 2.0]])
        means = L.compute_mean_prototypes(f, np.array([0, 0]))
        np.testing.assert_allclose(means[0], [0.0, 0.0], atol=1e-16)

    def test_matches_naive_average(self):
        rng = np.random.default_rng(5)
        f = rng.normal(size=(10, 4))
        labels = np.array([0, 1, 0, 2, 1, 0, 2, 2, 1, 0])
        means = L.compute_mean_prototypes(f, labels)
        for c in (0, 1, 2):
            rows = [f[i] for i in range(10) if labels[i] == c]
            naive = sum(rows) / len(rows)
            np.testing.assert_allclose(means[c], naive, atol=1e-12)

    def test_order_invariant(self):
        rng = np.random.default_rng(6)
        f = rng.normal(size=(8, 3))
        labels = np.array([0, 1, 0, 1, 0, 1, 0, 1])
        perm = rng.permutation(8)
        a = L.compute_mean_prototypes(f, labels)
        b = L.compute_mean_prototypes(f[perm], labels[perm])
        for c in (0, 1):
            np.testing.assert_allclose(a[c], b[c], atol=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            L.compute_mean_prototypes(np.zeros((0, 3)), np.array([]))


class TestLossCompression:
    def test_single_class_is_exactly_zero(self):
        rng = np.random.default_rng(7)
        z = rng.normal(size=(5, 3))
        means = {0: z.mean(axis=0)}
        loss = L.loss_compression(Tensor(z), np.zeros(5, dtype=int), means)
        assert loss.item() == 0.0

    def test_closed_form_two_classes_at_own_means(self):
        r2 = 3.7  # squared distance between the two anchors
        means = {0: np.array([0.0, 0.0]), 1: np.array([np.sqrt(r2), 0.0])}
        z = np.stack([means[0], means[1]])
        loss = L.loss_compression(Tensor(z), np.array([0, 1]), means)
        want = 2 * np.log(1 + np.exp(-r2))
        assert loss.item() == pytest.approx(want, rel=1e-12)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(8)
        z = rng.normal(size=(7, 4))
        labels = np.array([0, 1, 1, 0, 2, 2, 0])
        means = L.compute_mean_prototypes(z, labels)

        per_class = {}
        for i, y in enumerate(labels):
            d = {c: ((z[i] - m) ** 2).sum() for c, m in means.items()}
            denom = np.log(sum(np.exp(-v) for v in d.values()))
            per_class.setdefault(int(y), []).append(d[int(y)] + denom)
        want = sum(np.mean(v) for v in per_class.values())

        got = L.loss_compression(Tensor(z), labels, means).item()
        assert got == pytest.approx(want, abs=1e-10)

    def test_gradient_wrt_extractor_matches_finite_diff(self):
        rng = np.random.default_rng(9)
        fe = FeatureExtractor(3, feat_dim=2, seed=9, hidden=4)
        x = Tensor(rng.normal(size=(6, 3)))
        labels = np.array([0, 0, 1, 1, 0, 1])
        means = L.compute_mean_prototypes(fe.features_np(x.data), labels)

        def loss_fn():
            return L.loss_compression(fe.forward(x), labels, means)

        assert ad.finite_diff_check(loss_fn, fe.params, h=1e-5) <= 1e-4

    def test_missing_mean_rejected(self):
        with pytest.raises(KeyError, match="mean"):
            L.loss_compression(
                Tensor(np.zeros((2, 2))), np.array([0, 1]), {0: np.zeros(2)}
            )

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            L.loss_compression(Tensor(np.zeros((0, 2))), np.array([]), {})

    @given(st.integers(0, 10_000))
    @settings(max_examples=20, deadline=None)
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(6, 3))
        labels = rng.integers(0, 2, size=6)
        if len(np.unique(labels)) < 2:
            labels[0] = 1 - labels[0]
        means = L.compute_mean_prototypes(z, labels)
        assert L.loss_compression(Tensor(z), labels, means).item() >= -1e-12


class TestJoinBatches:
    def test_replay_rows_of_new_classes_dropped(self):
        new = Batch(np.ones((2, 3)), np.array([4, 5]))
        replay = Batch(
            np.arange(12.0).reshape(4, 3), np.array([1, 4, 2, 5])
        )
        joint = L.join_batches(new, replay)
        assert joint.labels.tolist() == [4, 5, 1, 2]
        np.testing.assert_array_equal(joint.features[2], replay.features[0])
        np.testing.assert_array_equal(joint.features[3], replay.features[2])

    def test_none_and_empty_replay(self):
        new = Batch(np.ones((2, 3)), np.array([0, 1]))
        assert L.join_batches(new, None) is new
        empty = Batch(np.zeros((0, 3)), np.array([], dtype=np.int64))
        assert L.join_batches(new, empty) is new

    def test_all_replay_dropped_when_classes_overlap_fully(self):
        new = Batch(np.ones((2, 3)), np.array([0, 1]))
        replay = Batch(np.zeros((2, 3)), np.array([1, 0]))
        assert L.join_batches(new, replay) is new


class TestDynamicPreservationStep:
    def _toy(self, seed=0):
        rng = np.random.default_rng(seed)
        fe = FeatureExtractor(2, feat_dim=2, seed=seed, hidden=8)
        protos = make_protos(2, [0, 1], seed=seed)
        x0 = rng.normal(loc=(-2.0, 0.0), scale=0.3, size=(5, 2))
        x1 = rng.normal(loc=(2.0, 0.0), scale=0.3, size=(5, 2))
        batch = Batch(
            np.concatenate([x0, x1]), np.array([0] * 5 + [1] * 5)
        )
        return fe, protos, batch

    def test_zero_steps_leave_model_bitwise_unchanged(self):
        fe, protos, batch = self._toy()
        cfg = L.PreservationConfig(steps_l1=0, steps_l2=0)
        before = {n: t.data.tobytes() for n, t in fe.params.items()}
        before |= {n: t.data.tobytes() for n, t in protos.params.items()}
        L.dynamic_preservation_step(batch, None, fe, protos, cfg)
        after = {n: t.data.tobytes() for n, t in fe.params.items()}
        after |= {n: t.data.tobytes() for n, t in protos.params.items()}
        assert after == before

    def test_separation_loss_decreases_on_separable_toy(self):
        fe, protos, batch = self._toy(seed=1)
        cfg = L.PreservationConfig(lr_theta=0.05, lr_proto=0.05, steps_l1=1, steps_l2=0)
        before = L.loss_separation(
            fe.forward(Tensor(batch.features)), batch.labels, protos
        ).item()
        L.dynamic_preservation_step(batch, None, fe, protos, cfg)
        after = L.loss_separation(
            fe.forward(Tensor(batch.features)), batch.labels, protos
        ).item()
        assert after < before

    def test_compression_tightens_clusters(self):
        fe, protos, batch = self._toy(seed=2)
        cfg = L.PreservationConfig(lr_theta=0.01, lr_proto=0.01, steps_l1=0, steps_l2=1)

        def within_class_spread():
            z = fe.features_np(batch.features)
            means = L.compute_mean_prototypes(z, batch.labels)
            return np.mean(
                [((z[i] - means[int(y)]) ** 2).sum() for i, y in enumerate(batch.labels)]
            )

        before = within_class_spread()
        L.dynamic_preservation_step(batch, None, fe, protos, cfg)
        assert within_class_spread() <= before + 1e-9

    def test_old_prototypes_move_less_under_clip(self):
        fe, protos, batch = self._toy(seed=3)
        protos.init_new_classes([2, 3], seed=3)
        new = Batch(
            np.random.default_rng(3).normal(size=(6, 2)), np.array([2, 3] * 3)
        )
        replay = batch  # classes 0, 1 act as the old data
        cfg = L.PreservationConfig(
            lr_theta=0.05, lr_proto=0.05, clip_alpha=0.0, steps_l1=2, steps_l2=0
        )
        before = {c: protos.params[f"proto_{c}"].data.copy() for c in protos.known()}
        L.dynamic_preservation_step(new, replay, fe, protos, cfg)
        for c in (0, 1):  # old: frozen at alpha = 0
            np.testing.assert_array_equal(protos.params[f"proto_{c}"].data, before[c])
        for c in (2, 3):  # new: must have moved
            assert not np.array_equal(protos.params[f"proto_{c}"].data, before[c])

    def test_traces_have_step_counts(self):
        fe, protos, batch = self._toy(seed=4)
        cfg = L.PreservationConfig(steps_l1=3, steps_l2=2)
        out = L.dynamic_preservation_step(batch, None, fe, protos, cfg)
        assert len(out["separation"]) == 3
        assert len(out["compression"]) == 2
        assert set(out["means"].keys()) == {0, 1}

    def test_config_validation(self):
        with pytest.raises(ValueError):
            L.PreservationConfig(lr_theta=0.0)
        with pytest.raises(ValueError):
            L.PreservationConfig(clip_alpha=2.0)
        with pytest.raises(ValueError):
            L.PreservationConfig(steps_l1=-1)
