"""Speech-unit quantizer: nearest-centroid contract, rate invariants,
codebook persistence."""

import numpy as np
import pytest

from vsrkit import corpus, units
from vsrkit.errors import ShapeError


def small_codebook(rng, v=4, a=2):
    feats = rng.normal(size=(50, a))
    return units.build_codebook(feats, size=v, seed=3)


class TestQuantize:
    def test_exact_centroid_maps_to_its_code(self, rng):
        cb = small_codebook(rng)
        feats = cb.centroids[[2, 0, 1, 3]]
        seq = units.quantize(feats, cb, num_frames=1)
        np.testing.assert_array_equal(seq.codes, [2, 0, 1, 3])

    def test_duplicated_rows_get_duplicated_codes(self, rng):
        cb = small_codebook(rng)
        row = rng.normal(size=2)
        feats = np.tile(row, (8, 1))
        seq = units.quantize(feats, cb)
        assert len(set(seq.codes.tolist())) == 1

    def test_matches_brute_force_nearest_neighbor(self, rng):
        cb = small_codebook(rng, v=4, a=2)
        feats = rng.normal(size=(8, 2))
        seq = units.quantize(feats, cb, num_frames=2)
        for i, row in enumerate(feats):
            dists = [float(((row - c) ** 2).sum()) for c in cb.centroids]
            assert seq.codes[i] == int(np.argmin(dists))

    def test_tie_breaks_toward_lowest_index(self):
        cents = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        cb = units.Codebook(centroids=cents, seed=0)
        seq = units.quantize(np.zeros((4, 2)), cb)
        np.testing.assert_array_equal(seq.codes, [0, 0, 0, 0])

    def test_rate_contract_enforced(self, rng):
        cb = small_codebook(rng)
        with pytest.raises(ShapeError):
            units.quantize(rng.normal(size=(7, 2)), cb)
        with pytest.raises(ShapeError):
            units.quantize(rng.normal(size=(8, 2)), cb, num_frames=3)
        with pytest.raises(ShapeError):
            units.quantize(rng.normal(size=(8, 3)), cb)

    def test_output_length_is_four_per_frame(self, rng):
        cb = small_codebook(rng)
        for t in (1, 3, 6):
            seq = units.quantize(rng.normal(size=(4 * t, 2)), cb,
                                 num_frames=t)
            assert len(seq.codes) == 4 * t

    def test_idempotent_on_centroids(self, rng):
        cb = small_codebook(rng, v=8)
        seq = units.quantize(cb.centroids, cb, num_frames=2)
        np.testing.assert_array_equal(seq.codes, np.arange(8))


class TestCodebook:
    def test_reproducible_from_seed(self, rng):
        feats = rng.normal(size=(200, 3))
        a = units.build_codebook(feats, size=16, seed=11)
        b = units.build_codebook(feats, size=16, seed=11)
        np.testing.assert_array_equal(a.centroids, b.centroids)

    def test_centroids_pairwise_distinct(self, rng):
        cb = units.build_codebook(rng.normal(size=(300, 4)), size=32, seed=5)
        d2 = ((cb.centroids[:, None] - cb.centroids[None]) ** 2).sum(-1)
        d2[np.diag_indices(32)] = np.inf
        assert d2.min() > 1e-12

    def test_file_round_trip(self, rng, tmp_path):
        cb = small_codebook(rng, v=8, a=3)
        path = tmp_path / "cb.vscb"
        units.save_codebook(path, cb)
        loaded = units.load_codebook(path)
        assert loaded.seed == cb.seed
        np.testing.assert_array_equal(loaded.centroids, cb.centroids)


class TestDegradationInvariance:
    def test_codes_ignore_visual_corruption(self, rng):
        """Audio is untouched by any visual degradation, so unit codes
        agree across all degraded variants of the same clip."""
        cb = units.build_codebook(rng.normal(size=(80, corpus.AUDIO_DIM)),
                                  size=8, seed=1)
        conds = [corpus.CLEAN_CONDITION,
                 corpus.ConditionLabel("D", "Y", "B", "L"),
                 corpus.ConditionLabel("B", "N", "M", "M")]
        clips = [corpus.generate_clip(["bat"], seed=5, cond=c)
                 for c in conds]
        codes = [units.quantize(c.audio_feats, cb).codes for c in clips]
        assert not np.array_equal(clips[0].frames, clips[1].frames)
        np.testing.assert_array_equal(codes[0], codes[1])
        np.testing.assert_array_equal(codes[0], codes[2])
