import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from ternq.packing import CorruptModelError, PackedTernaryTensor, pack, unpack
from ternq.quantizers import TernaryCodebook, TernaryPartition

CB = TernaryCodebook(1.25, 0.75)

sign_arrays = arrays(
    np.int8,
    shape=array_shapes(min_dims=1, max_dims=3, min_side=1, max_side=20),
    elements=st.sampled_from([-1, 0, 1]),
)


class TestPack:
    def test_low_byte_layout(self):
        packed = pack(TernaryPartition(np.array([1, -1, 0, 0])), CB)
        # weight 0 (code 01) sits in bits 0-1, weight 1 (code 10) in bits 2-3
        assert len(packed.words) == 1
        assert int(packed.words[0]) == 0b00001001

    def test_17_weights_use_two_words_with_zero_padding(self):
        signs = np.zeros(17, dtype=np.int8)
        signs[16] = 1
        packed = pack(TernaryPartition(signs), CB)
        assert len(packed.words) == 2
        assert int(packed.words[0]) == 0
        assert int(packed.words[1]) == 1  # one weight, 15 zero pad fields

    def test_shape_preserved(self, rng):
        signs = rng.integers(-1, 2, (5, 7)).astype(np.int8)
        packed = pack(TernaryPartition(signs), CB)
        assert packed.shape == (5, 7)
        assert packed.weight_count == 35

    def test_word_count_validation(self):
        with pytest.raises(ValueError, match="words needed"):
            PackedTernaryTensor((33,), np.zeros(2, dtype=np.uint32), CB)


class TestUnpack:
    def test_reserved_field_rejected_with_word_index(self):
        packed = pack(TernaryPartition(np.zeros(20, dtype=np.int8)), CB)
        packed.words[1] |= 0b11 << 4  # weight 18
        with pytest.raises(CorruptModelError, match="word 1") as exc:
            unpack(packed)
        assert exc.value.word_index == 1

    def test_nonzero_padding_rejected(self):
        packed = pack(TernaryPartition(np.zeros(17, dtype=np.int8)), CB)
        packed.words[1] |= 0b01 << 10  # pad lane
        with pytest.raises(CorruptModelError, match="padding"):
            unpack(packed)

    def test_all_zero_words_give_all_zero_partition(self):
        packed = PackedTernaryTensor((4, 4), np.zeros(1, dtype=np.uint32), CB)
        part, cb = unpack(packed)
        assert np.array_equal(part.signs, np.zeros((4, 4), dtype=np.int8))
        assert cb == CB

    def test_roundtrip_100_random_tensors(self, rng):
        for _ in range(100):
            shape = tuple(rng.integers(1, 12, rng.integers(1, 4)))
            signs = rng.integers(-1, 2, shape).astype(np.int8)
            part, cb = unpack(pack(TernaryPartition(signs), CB))
            assert np.array_equal(part.signs, signs)
            assert cb == CB

    @given(sign_arrays)
    def test_roundtrip_is_identity(self, signs):
        part, _ = unpack(pack(TernaryPartition(signs), CB))
        assert np.array_equal(part.signs, signs)

    def test_empty_shape_tensor(self):
        packed = pack(TernaryPartition(np.zeros((0,), dtype=np.int8)), CB)
        part, _ = unpack(packed)
        assert part.signs.shape == (0,)
