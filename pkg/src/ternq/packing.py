"""2-bit packed encoding of ternary weight tensors.

Sixteen weights per little-endian 32-bit word, weight i in bits 2i..2i+1
of word i//16. Field values: 00 zero, 01 positive, 10 negative. The 11
pattern is reserved so corruption stays detectable, and trailing pad
fields in the final word must be 00.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ternq.quantizers import TernaryCodebook, TernaryPartition

WEIGHTS_PER_WORD = 16

_CODE_FOR_SIGN = {0: 0, 1: 1, -1: 2}
_SIGN_FOR_CODE = np.array([0, 1, -1, 0], dtype=np.int8)  # code 3 trapped before use


class CorruptModelError(ValueError):
    """A reserved or inconsistent 2-bit field was found while unpacking."""

    def __init__(self, message, word_index=None):
        super().__init__(message)
        self.word_index = word_index


@dataclass
class PackedTernaryTensor:
    shape: tuple[int, ...]
    words: np.ndarray  # uint32, ceil(n/16) entries
    codebook: TernaryCodebook

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.words = np.asarray(self.words, dtype=np.uint32)
        expected = (self.weight_count + WEIGHTS_PER_WORD - 1) // WEIGHTS_PER_WORD
        if len(self.words) != expected:
            raise ValueError(f"{expected} words needed for shape {self.shape}, got {len(self.words)}")

    @property
    def weight_count(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 0

    @property
    def packed_bytes(self) -> int:
        return 4 * len(self.words)


def pack(partition: TernaryPartition, codebook: TernaryCodebook) -> PackedTernaryTensor:
    """Encode a sign partition losslessly at 2 bits per weight."""
    signs = partition.signs.ravel()
    n = signs.size
    codes = np.zeros(n, dtype=np.uint32)
    codes[signs == 1] = 1
    codes[signs == -1] = 2
    n_words = (n + WEIGHTS_PER_WORD - 1) // WEIGHTS_PER_WORD
    padded = np.zeros(n_words * WEIGHTS_PER_WORD, dtype=np.uint32)
    padded[:n] = codes
    lanes = padded.reshape(n_words, WEIGHTS_PER_WORD) << (2 * np.arange(WEIGHTS_PER_WORD, dtype=np.uint32))
    words = np.bitwise_or.reduce(lanes, axis=1).astype(np.uint32)
    return PackedTernaryTensor(partition.signs.shape, words, codebook)


def unpack(packed: PackedTernaryTensor) -> tuple[TernaryPartition, TernaryCodebook]:
    """Exact inverse of pack; rejects reserved fields and nonzero padding."""
    n = packed.weight_count
    if n == 0:
        return TernaryPartition(np.zeros(packed.shape, dtype=np.int8)), packed.codebook
    fields = (packed.words[:, None] >> (2 * np.arange(WEIGHTS_PER_WORD, dtype=np.uint32))) & 0x3
    flat = fields.reshape(-1)
    bad = np.nonzero(flat[:n] == 3)[0]
    if bad.size:
        word = int(bad[0]) // WEIGHTS_PER_WORD
        raise CorruptModelError(f"reserved 2-bit field 11 at weight {int(bad[0])} (word {word})", word)
    pad = flat[n:]
    if pad.size and pad.any():
        word = (n + int(np.nonzero(pad)[0][0])) // WEIGHTS_PER_WORD
        raise CorruptModelError(f"nonzero padding field in word {word}", word)
    signs = _SIGN_FOR_CODE[flat[:n]].reshape(packed.shape)
    return TernaryPartition(signs), packed.codebook
