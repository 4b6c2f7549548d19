"""SMILES tokenization, differential reaction fingerprints and Hamming retrieval.

The fingerprint is a token-shingle stand-in for DRFP: n-grams (1..n_max) of
SMILES tokens are collected per side, the symmetric difference between the
reactant and product shingle sets is hashed into a ``width``-bit vector.
Externally computed fingerprints (real DRFP, say) can be loaded instead via
:func:`load_fingerprints`.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from armor.domain import Reaction
from armor.errors import ArmorError
from armor.io import read_jsonl, write_jsonl

DEFAULT_WIDTH = 2048
DEFAULT_NMAX = 3
# blake2b key; changing it changes every fingerprint
HASH_KEY = b"armor-shingle-v1"

_ORGANIC_TWO = ("Cl", "Br")
_ORGANIC_ONE = frozenset("BCNOPSFIbcnops*")
_BONDS = frozenset("-=#$:/\\")


class SmilesError(ArmorError):
    code = "ValidationFailure"


class UnbalancedParenthesis(SmilesError):
    pass


class UnterminatedBracket(SmilesError):
    pass


class UnknownCharacter(SmilesError):
    def __init__(self, pos: int, char: str):
        super().__init__(f"unknown character {char!r} at position {pos}")
        self.pos = pos


class WidthMismatch(ArmorError):
    pass


def tokenize_smiles(s: str) -> list[str]:
    """Split a SMILES string into tokens; ``"".join(tokens) == s``.

    >>> tokenize_smiles("CC(=O)[O-].[Na+]")
    ['C', 'C', '(', '=', 'O', ')', '[O-]', '.', '[Na+]']
    """
    if not s:
        raise SmilesError("empty SMILES")
    tokens: list[str] = []
    depth = 0
    i, n = 0, len(s)
    while i < n:
        c = s[i]
        if c == "[":
            j = s.find("]", i + 1)
            if j < 0:
                raise UnterminatedBracket(f"unterminated bracket atom starting at position {i}")
            if j == i + 1:
                raise SmilesError(f"empty bracket atom at position {i}")
            tokens.append(s[i : j + 1])
            i = j + 1
            continue
        if s.startswith(_ORGANIC_TWO, i):
            tokens.append(s[i : i + 2])
            i += 2
            continue
        if c == "%":
            if i + 2 < n and s[i + 1 : i + 3].isdigit():
                tokens.append(s[i : i + 3])
                i += 3
                continue
            raise UnknownCharacter(i, c)
        if c == "(":
            depth += 1
        elif c == ")":
            depth -= 1
            if depth < 0:
                raise UnbalancedParenthesis(f"unmatched ')' at position {i}")
        elif not (c in _ORGANIC_ONE or c in _BONDS or c.isdigit() or c == "."):
            raise UnknownCharacter(i, c)
        tokens.append(c)
        i += 1
    if depth:
        raise UnbalancedParenthesis(f"{depth} unclosed '('")
    return tokens


def _ngrams(tokens: Sequence[str], n_max: int) -> set[str]:
    out: set[str] = set()
    # n-grams do not cross molecule boundaries
    molecule: list[str] = []
    for tok in list(tokens) + ["."]:
        if tok != ".":
            molecule.append(tok)
            continue
        for n in range(1, n_max + 1):
            for k in range(len(molecule) - n + 1):
                out.add(f"{n}:{''.join(molecule[k:k + n])}")
        molecule = []
    return out


def reaction_shingles(r: Reaction, n_max: int = DEFAULT_NMAX) -> set[str]:
    """Symmetric difference of reactant and product shingles, each tagged ``"<n>:<text>"``."""
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    left = _ngrams(tokenize_smiles(r.reactants), n_max)
    right = _ngrams(tokenize_smiles(r.product), n_max)
    return left ^ right


def shingle_hash(shingle: str) -> int:
    """Keyed 64-bit BLAKE2b of the UTF-8 shingle, read big-endian."""
    h = hashlib.blake2b(shingle.encode("utf-8"), digest_size=8, key=HASH_KEY)
    return int.from_bytes(h.digest(), "big")


@dataclass(frozen=True)
class Fingerprint:
    bits: int
    width: int = DEFAULT_WIDTH

    def __post_init__(self) -> None:
        if self.width <= 0 or self.width % 8:
            raise ValueError(f"fingerprint width must be a positive multiple of 8, got {self.width}")
        if self.bits < 0 or self.bits.bit_length() > self.width:
            raise ValueError("bit vector does not fit the declared width")

    @property
    def popcount(self) -> int:
        return bin(self.bits).count("1")

    def to_bytes(self) -> bytes:
        return self.bits.to_bytes(self.width // 8, "big")

    def to_hex(self) -> str:
        return format(self.bits, f"0{self.width // 4}x")

    @classmethod
    def from_hex(cls, text: str, width: int | None = None) -> "Fingerprint":
        width = width if width is not None else len(text) * 4
        if len(text) * 4 != width:
            raise WidthMismatch(f"hex string of length {len(text)} does not encode {width} bits")
        return cls(int(text, 16), width)


def fingerprint(r: Reaction, width: int = DEFAULT_WIDTH, n_max: int = DEFAULT_NMAX) -> Fingerprint:
    bits = 0
    for sh in reaction_shingles(r, n_max):
        bits |= 1 << (shingle_hash(sh) % width)
    return Fingerprint(bits, width)


def hamming_distance(a: Fingerprint, b: Fingerprint) -> int:
    if a.width != b.width:
        raise WidthMismatch(f"widths differ: {a.width} vs {b.width}")
    return bin(a.bits ^ b.bits).count("1")


_POPCOUNT8 = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint16)


class SimilarityIndex:
    """Exact linear-scan Hamming index over packed fingerprints. Immutable once built."""

    def __init__(self, entries: Iterable[tuple[int, Fingerprint]], width: int = DEFAULT_WIDTH):
        entries = list(entries)
        self.width = width
        idxs = [idx for idx, _ in entries]
        if len(set(idxs)) != len(idxs):
            raise ValueError("duplicate idx in similarity index")
        for idx, fp in entries:
            if fp.width != width:
                raise WidthMismatch(f"entry {idx} has width {fp.width}, index width is {width}")
        self._idxs = np.array(idxs, dtype=np.int64)
        self._fps = [fp for _, fp in entries]
        if entries:
            packed = b"".join(fp.to_bytes() for fp in self._fps)
            self._matrix = np.frombuffer(packed, dtype=np.uint8).reshape(len(entries), width // 8)
        else:
            self._matrix = np.zeros((0, width // 8), dtype=np.uint8)

    def __len__(self) -> int:
        return len(self._fps)

    @property
    def entries(self) -> list[tuple[int, Fingerprint]]:
        return list(zip(self._idxs.tolist(), self._fps))

    def distances(self, query: Fingerprint) -> np.ndarray:
        if query.width != self.width:
            raise WidthMismatch(f"query width {query.width} != index width {self.width}")
        q = np.frombuffer(query.to_bytes(), dtype=np.uint8)
        return _POPCOUNT8[np.bitwise_xor(self._matrix, q)].sum(axis=1, dtype=np.int64)

    def search(self, query: Fingerprint, k: int) -> list[tuple[int, int]]:
        return top_k_similar(self, query, k)


def top_k_similar(index: SimilarityIndex, query: Fingerprint, k: int) -> list[tuple[int, int]]:
    """The ``k`` nearest entries as ``(idx, distance)``, ascending, ties by idx."""
    if k < 1:
        raise ValueError("k must be positive")
    if len(index) == 0:
        return []
    dist = index.distances(query)
    order = np.lexsort((index._idxs, dist))[:k]
    return [(int(index._idxs[i]), int(dist[i])) for i in order]


def build_index(
    reactions: Iterable[Reaction],
    width: int = DEFAULT_WIDTH,
    n_max: int = DEFAULT_NMAX,
    precomputed: Mapping[int, Fingerprint] | None = None,
) -> SimilarityIndex:
    entries = []
    for r in reactions:
        fp = precomputed.get(r.idx) if precomputed else None
        entries.append((r.idx, fp if fp is not None else fingerprint(r, width, n_max)))
    return SimilarityIndex(entries, width)


def load_fingerprints(path: str | Path, width: int | None = None) -> dict[int, Fingerprint]:
    """Read ``{"idx": int, "bits": hex}`` JSONL lines."""
    out: dict[int, Fingerprint] = {}
    for row in read_jsonl(path):
        fp = Fingerprint.from_hex(row["bits"], width)
        if width is None:
            width = fp.width
        out[int(row["idx"])] = fp
    return out


def save_fingerprints(path: str | Path, fps: Mapping[int, Fingerprint]) -> None:
    write_jsonl(path, ({"idx": idx, "bits": fps[idx].to_hex()} for idx in sorted(fps)))
