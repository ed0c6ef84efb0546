import itertools

import numpy as np
import pytest

from melssl.audio import AlignmentFile
from melssl.cluster import (Codebook, LabelSeq, assign, distortion, kmeans_fit,
                            load_codebook, load_labels, purity, save_codebook,
                            save_labels)
from melssl.features import FeatureMatrix


def fm(data, period=10.0, utt="u"):
    return FeatureMatrix(np.asarray(data, dtype=np.float32), period, utt)


class TestKmeansFit:
    def test_exact_fit_k_points(self):
        pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        cb = kmeans_fit([fm(pts)], k=3, seed=0)
        assert distortion(cb, [fm(pts)]) == pytest.approx(0.0, abs=1e-12)
        found = {tuple(np.round(c, 6)) for c in cb.centroids}
        assert found == {(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)}

    def test_toy_2cluster_brute_force(self):
        # oracle: enumerate all 2-partitions, compute optimal distortion
        pts = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]])
        best = np.inf
        for mask in itertools.product([0, 1], repeat=4):
            mask = np.array(mask, dtype=bool)
            if mask.all() or not mask.any():
                continue
            d = 0.0
            for part in (pts[mask], pts[~mask]):
                d += ((part - part.mean(axis=0)) ** 2).sum()
            best = min(best, d)
        cb = kmeans_fit([fm(pts)], k=2, seed=0)
        assert distortion(cb, [fm(pts)]) == pytest.approx(best)
        assert best == pytest.approx(1.0)
        cents = sorted(tuple(np.round(c, 6)) for c in cb.centroids)
        assert cents == [(0.0, 0.5), (10.0, 0.5)]

    def test_monotone_distortion(self):
        # Lloyd never increases distortion; kmeans_fit asserts per iteration
        rng = np.random.default_rng(0)
        for seed in range(3):
            data = rng.normal(size=(300, 5))
            kmeans_fit([fm(data)], k=7, seed=seed)

    def test_fewer_frames_than_k(self):
        with pytest.raises(ValueError, match="frames"):
            kmeans_fit([fm(np.zeros((3, 2)))], k=5, seed=0)

    def test_nan_rejected(self):
        data = np.zeros((10, 2), dtype=np.float32)
        f = fm(np.ones((10, 2)))
        f.data = data.copy()
        f.data[3, 1] = np.nan
        with pytest.raises(ValueError):
            kmeans_fit([f], k=2, seed=0)

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        data = rng.normal(size=(200, 4))
        cb1 = kmeans_fit([fm(data)], k=7, seed=5)
        cb2 = kmeans_fit([fm(data)], k=7, seed=5)
        np.testing.assert_array_equal(cb1.centroids, cb2.centroids)


class TestAssign:
    def test_exact_centroid(self):
        cb = Codebook(np.eye(5, 4))
        seq = assign(cb, fm(np.eye(5, 4)[3:4]))
        assert seq.labels.tolist() == [3]

    def test_tie_break_lowest_index(self):
        cb = Codebook(np.array([[1.0, 0.0], [0.0, 0.0], [-1.0, 0.0], [0.0, 0.0]],
                               dtype=np.float32))
        # frame equidistant to centroids 1 and 3 (identical centroids)
        seq = assign(cb, fm([[0.0, 5.0]]))
        assert seq.labels.tolist() == [1]

    def test_matches_brute_force(self):
        rng = np.random.default_rng(2)
        cents = rng.normal(size=(16, 8))
        frames = rng.normal(size=(1000, 8))
        cb = Codebook(cents.astype(np.float32))
        seq = assign(cb, fm(frames))
        c64 = cb.centroids.astype(np.float64)
        f64 = frames.astype(np.float32).astype(np.float64)
        expected = np.array([np.argmin([((x - c) ** 2).sum() for c in c64])
                             for x in f64])
        np.testing.assert_array_equal(seq.labels, expected)

    def test_dim_mismatch(self):
        cb = Codebook(np.zeros((2, 3)))
        with pytest.raises(ValueError):
            assign(cb, fm(np.zeros((1, 4))))

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(3)
        cents = rng.normal(size=(6, 4)).astype(np.float32)
        frames = fm(rng.normal(size=(50, 4)))
        perm = rng.permutation(6)
        base = assign(Codebook(cents), frames).labels
        permuted = assign(Codebook(cents[perm]), frames).labels
        inverse = np.argsort(perm)
        np.testing.assert_array_equal(inverse[base], permuted)


class TestPurity:
    def test_perfect_alignment(self):
        ali = AlignmentFile(10.0, {"u": [(0, 3, 0), (3, 6, 1)]})
        seq = LabelSeq("u", np.array([0, 0, 0, 1, 1, 1]), 10.0)
        rep = purity([seq], ali)
        assert rep.phone_purity == 1.0
        assert rep.cluster_purity == 1.0

    def test_hand_joint_counts(self):
        # joint counts [[2,0],[1,1]] -> both purities 0.75
        ali = AlignmentFile(10.0, {"u": [(0, 3, 0), (3, 4, 1)]})
        seq = LabelSeq("u", np.array([0, 0, 1, 1]), 10.0)
        rep = purity([seq], ali)
        np.testing.assert_array_equal(rep.joint_counts, [[2, 0], [1, 1]])
        assert rep.phone_purity == pytest.approx(0.75)
        assert rep.cluster_purity == pytest.approx(0.75)

    def test_monte_carlo_recount(self):
        # independent recount oracle on random labels
        rng = np.random.default_rng(4)
        k, p, t = 20, 3, 500
        phones = rng.integers(0, p, t)
        labels = rng.integers(0, k, t)
        segs = [(i, i + 1, int(phones[i])) for i in range(t)]
        ali = AlignmentFile(10.0, {"u": segs})
        rep = purity([LabelSeq("u", labels, 10.0)], ali, k=k)
        counts = np.zeros((k, p))
        for c, ph in zip(labels, phones):
            counts[c, ph] += 1
        assert rep.phone_purity == pytest.approx(counts.max(axis=1).sum() / t)
        assert rep.cluster_purity == pytest.approx(counts.max(axis=0).sum() / t)

    def test_relabel_invariance(self):
        rng = np.random.default_rng(5)
        phones = rng.integers(0, 3, 200)
        labels = rng.integers(0, 6, 200)
        ali = AlignmentFile(10.0, {"u": [(i, i + 1, int(phones[i])) for i in range(200)]})
        rep1 = purity([LabelSeq("u", labels, 10.0)], ali, k=6)
        perm = rng.permutation(6)
        rep2 = purity([LabelSeq("u", perm[labels], 10.0)], ali, k=6)
        assert rep1.phone_purity == pytest.approx(rep2.phone_purity)
        assert rep1.cluster_purity == pytest.approx(rep2.cluster_purity)

    def test_frame_period_mismatch(self):
        ali = AlignmentFile(10.0, {"u": [(0, 2, 0)]})
        with pytest.raises(ValueError, match="frame period"):
            purity([LabelSeq("u", np.array([0, 1]), 20.0)], ali)

    def test_uncovered_frames_ignored(self):
        ali = AlignmentFile(10.0, {"u": [(0, 2, 0)]})
        rep = purity([LabelSeq("u", np.array([0, 0, 5, 5, 5]), 10.0)], ali, k=6)
        assert rep.num_frames == 2

    def test_no_overlap_errors(self):
        ali = AlignmentFile(10.0, {"v": [(0, 2, 0)]})
        with pytest.raises(ValueError):
            purity([LabelSeq("u", np.array([0, 0]), 10.0)], ali)


class TestFiles:
    def test_codebook_roundtrip(self, tmp_path):
        rng = np.random.default_rng(6)
        cb = Codebook(rng.normal(size=(5, 3)).astype(np.float32),
                      source="hidden", layer=2)
        path = str(tmp_path / "cb.bin")
        save_codebook(path, cb)
        back = load_codebook(path)
        np.testing.assert_array_equal(back.centroids, cb.centroids)
        assert back.source == "hidden" and back.layer == 2
        save_codebook(str(tmp_path / "cb2.bin"), back)
        assert open(path, "rb").read() == open(str(tmp_path / "cb2.bin"), "rb").read()

    def test_labels_roundtrip(self, tmp_path):
        seqs = [LabelSeq("a", np.array([1, 2, 3]), 20.0),
                LabelSeq("b", np.array([0]), 20.0)]
        path = str(tmp_path / "labels.txt")
        save_labels(path, seqs)
        back = load_labels(path)
        np.testing.assert_array_equal(back["a"].labels, [1, 2, 3])
        assert back["b"].frame_period_ms == 20.0
