import math

import numpy as np
import pytest
from scipy import stats

from sdnc.augmentation import OrthogonalMatrix, apply_rotation, rotation_for, sample_orthogonal, speaker_shuffle
from sdnc.core import EmbeddingSequence
from sdnc.model import canonicalize, make_example
from sdnc.synth import SynthConfig, gen_corpus, gen_embeddings, gen_meeting, rng_for


def seq_from_blocks(blocks):
    """Segments k=1.. with the given per-window vectors."""
    seg, ivs, vec = [], [], []
    for k, rows in enumerate(blocks, start=1):
        for j, v in enumerate(rows):
            seg.append(k)
            ivs.append((10.0 * k + j, 10.0 * k + j + 1))
            vec.append(v)
    return EmbeddingSequence("m", np.array(seg), np.array(ivs), np.array(vec, dtype=float))


class TestSampleOrthogonal:
    def test_dim_one(self):
        assert sample_orthogonal(1, 5).entries[0, 0] in (1.0, -1.0)

    @pytest.mark.parametrize("seed", range(10))
    @pytest.mark.parametrize("dim", [2, 5, 16])
    def test_orthogonal_and_unit_determinant(self, seed, dim):
        q = sample_orthogonal(dim, seed).entries
        assert np.abs(q.T @ q - np.eye(dim)).max() <= 1e-6
        assert abs(abs(np.linalg.det(q)) - 1) <= 1e-6

    def test_deterministic(self):
        assert np.array_equal(sample_orthogonal(8, 3).entries, sample_orthogonal(8, 3).entries)
        assert not np.array_equal(sample_orthogonal(8, 3).entries, sample_orthogonal(8, 4).entries)

    def test_rotation_angle_uniform_in_2d(self):
        # Haar on O(2): the angle of Q e1 is uniform on [0, 2pi)
        angles = []
        for s in range(1000):
            q = sample_orthogonal(2, s).entries
            angles.append(math.atan2(q[1, 0], q[0, 0]) % (2 * math.pi))
        ks = stats.kstest(np.array(angles) / (2 * math.pi), "uniform")
        assert ks.statistic < 0.05

    def test_rejects_non_orthogonal(self):
        with pytest.raises(ValueError):
            OrthogonalMatrix(2, np.array([[1.0, 0.1], [0.0, 1.0]]))

    def test_rotation_for_varies_with_epoch_and_meeting(self):
        a = rotation_for(0, 0, 0, 4).entries
        assert not np.array_equal(a, rotation_for(0, 1, 0, 4).entries)
        assert not np.array_equal(a, rotation_for(0, 0, 1, 4).entries)
        assert np.array_equal(a, rotation_for(0, 0, 0, 4).entries)


class TestApplyRotation:
    def test_identity(self):
        seq = seq_from_blocks([[[1.0, 2.0]], [[3.0, 4.0]]])
        assert apply_rotation(seq, OrthogonalMatrix(2, np.eye(2))) == seq

    def test_zero_vector(self):
        seq = seq_from_blocks([[[0.0, 0.0, 0.0]]])
        out = apply_rotation(seq, sample_orthogonal(3, 1))
        assert np.array_equal(out.vectors, np.zeros((1, 3)))

    def test_preserves_inner_products_and_metadata(self):
        cfg = SynthConfig(seed=1)
        seq = gen_embeddings(gen_meeting(cfg, 0), cfg)
        out = apply_rotation(seq, sample_orthogonal(16, 7))
        assert np.abs(out.vectors @ out.vectors.T - seq.vectors @ seq.vectors.T).max() <= 1e-6
        assert np.array_equal(out.segment_ids, seq.segment_ids)
        assert np.array_equal(out.intervals, seq.intervals)

    def test_applies_q_times_x(self):
        seq = seq_from_blocks([[[1.0, 0.0]]])
        q = OrthogonalMatrix(2, np.array([[0.0, -1.0], [1.0, 0.0]]))
        assert np.allclose(apply_rotation(seq, q).vectors, [[0.0, 1.0]])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            apply_rotation(seq_from_blocks([[[1.0, 0.0]]]), sample_orthogonal(3, 0))


class TestSpeakerShuffle:
    def test_single_slot_speaker_unchanged(self):
        seq = seq_from_blocks([[[1, 0]], [[0, 1]]])
        assert speaker_shuffle(seq, ["A", "B"], 0) == seq

    def test_swap_equal_blocks(self):
        a1, b, a2 = [[1.0, 0.0], [2.0, 0.0]], [[0.0, 1.0]], [[3.0, 0.0], [4.0, 0.0]]
        seq = seq_from_blocks([a1, b, a2])
        seen = set()
        for s in range(20):
            out = speaker_shuffle(seq, ["A", "B", "A"], rng_for(s))
            first = tuple(map(tuple, out.vectors[out.segment_ids == 1]))
            third = tuple(map(tuple, out.vectors[out.segment_ids == 3]))
            assert {first, third} == {tuple(map(tuple, a1)), tuple(map(tuple, a2))}
            assert np.array_equal(out.vectors[out.segment_ids == 2], b)
            seen.add(first)
        assert len(seen) == 2

    def test_truncate_and_cyclic_extend(self):
        long_block = [[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]]
        short_block = [[9.0, 0.0]]
        seq = seq_from_blocks([long_block, short_block])
        for s in range(20):
            out = speaker_shuffle(seq, ["A", "A"], rng_for(s))
            if out.vectors[0, 0] == 9.0:
                assert np.array_equal(out.vectors[:, 0], [9.0, 9.0, 9.0, 1.0])
                return
        pytest.fail("swap never drawn")

    def test_none_targets_stay_put(self):
        seq = seq_from_blocks([[[1, 0]], [[2, 0]], [[3, 0]]])
        out = speaker_shuffle(seq, ["A", None, "A"], 1)
        assert np.array_equal(out.vectors[1], [2, 0])

    def test_target_length_checked(self):
        with pytest.raises(ValueError):
            speaker_shuffle(seq_from_blocks([[[1, 0]]]), ["A", "B"], 0)

    @pytest.mark.parametrize("stage", ["pretrain_first_speaker", "finetune_vad"])
    def test_canonical_target_unchanged_on_random_meetings(self, stage):
        cfg = SynthConfig(seed=4, embed_noise_sigma=0.0)
        for m in gen_corpus(cfg, 5):
            ex = make_example(m, stage, cfg)
            out = speaker_shuffle(ex.seq, ex.segment_speakers, rng_for(m.meeting_id))
            # with sigma=0 every window is its speaker's prototype, so the
            # speaker of each segment can be read back off the vectors
            protos = {}
            for sid, spk in zip(ex.seq.segment_order(), ex.segment_speakers):
                if spk is not None:
                    protos[spk] = ex.seq.vectors[ex.seq.segment_ids == sid][0]
            readback = []
            for sid, spk in zip(out.segment_order(), ex.segment_speakers):
                if spk is None:
                    readback.append(spk)
                    continue
                v = out.vectors[out.segment_ids == sid][0]
                readback.append(next(s for s, p in protos.items() if np.array_equal(p, v)))
            assert readback == list(ex.segment_speakers)
            assert canonicalize(ex.slot_speakers, ex.plan.slot_segment_ids) == ex.target


class TestShrinkNoise:
    def blocks(self, seed=0):
        rng = rng_for("shrink", seed)
        seq = seq_from_blocks([rng.standard_normal((3, 5)), rng.standard_normal((4, 5)), rng.standard_normal((2, 5))])
        owners = ["a"] * 3 + ["b"] * 4 + ["a"] * 2
        return seq, owners

    def test_alpha_one_only_normalizes(self):
        from sdnc.augmentation import shrink_noise

        seq, owners = self.blocks()
        out = shrink_noise(seq, owners, 1.0)
        assert np.allclose(out.vectors, seq.vectors / np.linalg.norm(seq.vectors, axis=1, keepdims=True))

    def test_alpha_zero_collapses_each_speaker(self):
        from sdnc.augmentation import shrink_noise

        seq, owners = self.blocks()
        out = shrink_noise(seq, owners, 0.0).vectors
        a = out[[o == "a" for o in owners]]
        assert np.allclose(a, a[0]) and np.isclose(np.linalg.norm(a[0]), 1.0)
        assert not np.allclose(out[3], a[0])

    def test_commutes_with_rotation(self):
        from sdnc.augmentation import shrink_noise

        seq, owners = self.blocks(1)
        q = sample_orthogonal(5, 3)
        lhs = shrink_noise(apply_rotation(seq, q), owners, 0.4).vectors
        rhs = apply_rotation(shrink_noise(seq, owners, 0.4), q).vectors
        assert np.allclose(lhs, rhs)

    def test_metadata_kept_and_inputs_checked(self):
        from sdnc.augmentation import shrink_noise

        seq, owners = self.blocks()
        out = shrink_noise(seq, owners, 0.5)
        assert np.array_equal(out.segment_ids, seq.segment_ids) and np.array_equal(out.intervals, seq.intervals)
        with pytest.raises(ValueError):
            shrink_noise(seq, owners[:-1], 0.5)
        with pytest.raises(ValueError):
            shrink_noise(seq, owners, 1.5)
