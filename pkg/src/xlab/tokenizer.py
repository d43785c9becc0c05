"""BPE vocabularies and the three vocabulary manipulations of this lab:
cloning (full or partial, i.e. anchored), role relabelling, and merging of
independently trained vocabularies.

Pretokenization splits text on whitespace and prefixes every pretoken with a
word-begin marker character. There is no byte fallback: a character never seen
in training encodes to exactly one unk id. Vocabulary objects are immutable
after training and safe to share across threads.
"""

from __future__ import annotations

import hashlib
import heapq
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import DocumentStore, TokenStream

MARKER = "▁"  # word-begin marker, prefixed to every pretoken
UNK_PIECE = "<unk>"
VOCAB_FORMAT_VERSION = 1


class TokenizerError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    """An ordered piece list plus the merge rules that produced it.

    Piece order defines ids: unk first, then the base alphabet in sorted
    order, then merge results in merge order. Every merge result is itself a
    piece, and ``merges[k]`` produced piece ``n_base + k``.
    """

    pieces: tuple[str, ...]
    merges: tuple[tuple[str, str], ...]
    unk_id: int = 0
    marker: str = MARKER
    _piece_to_id: dict = field(default=None, repr=False, compare=False)
    _word_cache: dict = field(default=None, repr=False, compare=False)
    _merge_rank: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.pieces)) != len(self.pieces):
            raise TokenizerError("vocabulary pieces must be unique")
        object.__setattr__(self, "_piece_to_id", {p: i for i, p in enumerate(self.pieces)})
        object.__setattr__(self, "_word_cache", {})
        object.__setattr__(
            self, "_merge_rank", {pair: r for r, pair in enumerate(self.merges)}
        )
        for left, right in self.merges:
            if left + right not in self._piece_to_id:
                raise TokenizerError(f"merge result {left + right!r} is not a piece")

    def __len__(self) -> int:
        return len(self.pieces)

    def piece_id(self, piece: str) -> int | None:
        return self._piece_to_id.get(piece)


def _pretokenize(text: str, marker: str) -> list[str]:
    return [marker + w for w in text.split()]


def _merge_symbols(syms: list[str], left: str, right: str) -> list[str]:
    """Replace non-overlapping (left, right) adjacencies left-to-right."""
    out = []
    i = 0
    n = len(syms)
    while i < n:
        if i + 1 < n and syms[i] == left and syms[i + 1] == right:
            out.append(left + right)
            i += 2
        else:
            out.append(syms[i])
            i += 1
    return out


def _count_pairs(syms: Sequence[str]) -> dict[tuple[str, str], int]:
    counts: dict[tuple[str, str], int] = {}
    for pair in zip(syms, syms[1:]):
        counts[pair] = counts.get(pair, 0) + 1
    return counts


def train_bpe(store: DocumentStore, vocab_size: int) -> Vocabulary:
    """Train a BPE vocabulary of exactly ``vocab_size`` pieces.

    Merges are selected by descending adjacent-pair frequency at selection
    time, with a lexicographic (left, right) tie-break so training is
    bit-identical across platforms. The base symbol set counts the unk piece
    and the word-begin marker alongside the corpus alphabet, so the smallest
    legal vocab_size is ``2 + len(alphabet)``.
    """
    word_counts: dict[str, int] = {}
    for doc in store.documents:
        for w in _pretokenize(doc, MARKER):
            word_counts[w] = word_counts.get(w, 0) + 1

    alphabet = sorted({c for w in word_counts for c in w} | {MARKER})
    n_base = 1 + len(alphabet)  # unk + alphabet
    if vocab_size < n_base:
        raise TokenizerError(
            f"vocab_size {vocab_size} is smaller than the base symbol count "
            f"{n_base} (unk + marker + corpus alphabet)"
        )
    pieces: list[str] = [UNK_PIECE] + alphabet
    merges: list[tuple[str, str]] = []

    words = list(word_counts)
    freqs = [word_counts[w] for w in words]
    symbol_lists = [list(w) for w in words]

    # Pair bookkeeping: global counts, the words containing each pair, and a
    # lazy max-heap keyed (-count, left, right) so ties pop lexicographically.
    pair_counts: dict[tuple[str, str], int] = {}
    pair_words: dict[tuple[str, str], set[int]] = {}
    for wi, syms in enumerate(symbol_lists):
        for pair, c in _count_pairs(syms).items():
            pair_counts[pair] = pair_counts.get(pair, 0) + c * freqs[wi]
            pair_words.setdefault(pair, set()).add(wi)
    heap = [(-c, p[0], p[1]) for p, c in pair_counts.items()]
    heapq.heapify(heap)

    def push(pair: tuple[str, str]) -> None:
        heapq.heappush(heap, (-pair_counts[pair], pair[0], pair[1]))

    while len(pieces) < vocab_size:
        best = None
        while heap:
            negc, left, right = heapq.heappop(heap)
            if pair_counts.get((left, right), 0) == -negc and negc < 0:
                best = (left, right)
                break
        if best is None:
            raise TokenizerError(
                f"corpus exhausted after {len(merges)} merges; "
                f"cannot reach vocab_size {vocab_size}"
            )
        left, right = best
        merges.append(best)
        pieces.append(left + right)

        touched: set[tuple[str, str]] = set()
        for wi in sorted(pair_words.get(best, ())):
            syms = symbol_lists[wi]
            before = _count_pairs(syms)
            new_syms = _merge_symbols(syms, left, right)
            after = _count_pairs(new_syms)
            symbol_lists[wi] = new_syms
            f = freqs[wi]
            for pair in before.keys() | after.keys():
                delta = after.get(pair, 0) - before.get(pair, 0)
                if delta:
                    pair_counts[pair] = pair_counts.get(pair, 0) + delta * f
                    touched.add(pair)
                if after.get(pair, 0):
                    pair_words.setdefault(pair, set()).add(wi)
                elif pair in pair_words:
                    pair_words[pair].discard(wi)
        pair_counts.pop(best, None)
        pair_words.pop(best, None)
        for pair in touched:
            if pair_counts.get(pair, 0) <= 0:
                pair_counts.pop(pair, None)
            else:
                push(pair)

    return Vocabulary(pieces=tuple(pieces), merges=tuple(merges))


def _encode_word(vocab: Vocabulary, word: str) -> list[int]:
    cached = vocab._word_cache.get(word)
    if cached is not None:
        return cached
    syms = list(word)
    rank = vocab._merge_rank
    while len(syms) > 1:
        best_rank = None
        for pair in zip(syms, syms[1:]):
            r = rank.get(pair)
            if r is not None and (best_rank is None or r < best_rank):
                best_rank = r
        if best_rank is None:
            break
        left, right = vocab.merges[best_rank]
        syms = _merge_symbols(syms, left, right)
    ids = [vocab._piece_to_id.get(s, vocab.unk_id) for s in syms]
    vocab._word_cache[word] = ids
    return ids


def encode(vocab: Vocabulary, text: str) -> list[int]:
    """Greedy BPE encoding: merges apply in training order within each
    marker-prefixed pretoken; unseen characters map to unk, one id each."""
    ids: list[int] = []
    for word in _pretokenize(text, vocab.marker):
        ids.extend(_encode_word(vocab, word))
    return ids


def decode(vocab: Vocabulary, ids: Sequence[int]) -> str:
    """Inverse of encode on trained-domain text (up to unk substitution and
    whitespace normalisation: pretokens rejoin with single spaces)."""
    n = len(vocab.pieces)
    out = []
    for i in ids:
        if not 0 <= int(i) < n:
            raise TokenizerError(f"id {i} out of range for vocabulary of size {n}")
        out.append(vocab.pieces[int(i)])
    return "".join(out).replace(vocab.marker, " ").lstrip(" ")


def vocab_digest(vocab: Vocabulary) -> str:
    return hashlib.sha256(_serialize_vocab(vocab).encode("utf-8")).hexdigest()


def tokenize_store(vocab: Vocabulary, store: DocumentStore) -> TokenStream:
    """Encode every document; boundaries record each document's end offset."""
    ids: list[int] = []
    bounds: list[int] = []
    for doc in store.documents:
        ids.extend(encode(vocab, doc))
        bounds.append(len(ids))
    return TokenStream(
        ids=np.asarray(ids, dtype=np.uint32),
        doc_boundaries=np.asarray(bounds, dtype=np.uint64),
        vocab_digest=vocab_digest(vocab),
    )


def _serialize_vocab(vocab: Vocabulary) -> str:
    lines = [
        f"xlab-vocab version={VOCAB_FORMAT_VERSION} marker={vocab.marker} "
        f"unk={vocab.unk_id} pieces={len(vocab.pieces)} merges={len(vocab.merges)}"
    ]
    lines.extend(vocab.pieces)
    lines.extend(f"{l}\t{r}" for l, r in vocab.merges)
    return "\n".join(lines) + "\n"


def save_vocab(path: str | Path, vocab: Vocabulary) -> None:
    Path(path).write_text(_serialize_vocab(vocab), encoding="utf-8")


def load_vocab(path: str | Path) -> Vocabulary:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    header = dict(kv.split("=", 1) for kv in lines[0].split()[1:])
    if int(header["version"]) != VOCAB_FORMAT_VERSION:
        raise TokenizerError(f"unsupported vocabulary version {header['version']}")
    n_pieces, n_merges = int(header["pieces"]), int(header["merges"])
    pieces = tuple(lines[1 : 1 + n_pieces])
    merge_lines = lines[1 + n_pieces : 1 + n_pieces + n_merges]
    merges = tuple(tuple(l.split("\t", 1)) for l in merge_lines)
    return Vocabulary(
        pieces=pieces, merges=merges, unk_id=int(header["unk"]), marker=header["marker"]
    )


# ---------------------------------------------------------------------------
# Cloned vocabularies


@dataclass(frozen=True)
class ClonedVocabulary:
    """A base vocabulary replicated into N language id blocks.

    Anchored base ids are shared across all languages and occupy ids
    [0, A) ordered by base id; duplicated base ids get one copy per language:
    the copy of duplicated index j in language n sits at ``A + n*D + j`` where
    D = |base| - A. ``lut[n, t]`` is the final id of base id t in language n.
    """

    base: Vocabulary
    n_languages: int
    anchor_ids: np.ndarray  # sorted base ids
    lut: np.ndarray  # (n_languages, |base|) -> final id

    @property
    def n_anchors(self) -> int:
        return len(self.anchor_ids)

    @property
    def n_duplicated(self) -> int:
        return len(self.base) - self.n_anchors

    @property
    def total_size(self) -> int:
        return self.n_anchors + self.n_languages * self.n_duplicated

    def map_ids(self, base_ids: np.ndarray, language: int) -> np.ndarray:
        """Remap a base-id sequence into the given language's id block."""
        if not 0 <= language < self.n_languages:
            raise TokenizerError(f"language {language} out of range")
        return self.lut[language][np.asarray(base_ids, dtype=np.int64)]

    def to_base(self, ids: np.ndarray) -> np.ndarray:
        """Project final ids back to base ids (any language)."""
        inv = self._inverse_lut()
        return inv[np.asarray(ids, dtype=np.int64)]

    def map_language(self, ids: np.ndarray, to_language: int) -> np.ndarray:
        """Re-express a sequence in another language; anchors are unchanged."""
        return self.map_ids(self.to_base(ids), to_language)

    def _inverse_lut(self) -> np.ndarray:
        inv = np.empty(self.total_size, dtype=np.int64)
        for n in range(self.n_languages):
            inv[self.lut[n]] = np.arange(len(self.base))
        return inv

    def duplicated_base_ids(self) -> np.ndarray:
        mask = np.ones(len(self.base), dtype=bool)
        mask[self.anchor_ids] = False
        return np.nonzero(mask)[0]

    def language_slices(self) -> tuple[slice, list[slice]]:
        """(anchor block, per-language duplicated blocks) of the final id
        space; used for clone-permutation-invariant reductions."""
        a, d = self.n_anchors, self.n_duplicated
        return slice(0, a), [slice(a + n * d, a + (n + 1) * d) for n in range(self.n_languages)]


def _build_lut(n_base: int, n_languages: int, anchor_ids: np.ndarray) -> np.ndarray:
    a = len(anchor_ids)
    dup_ids = np.setdiff1d(np.arange(n_base), anchor_ids)
    d = len(dup_ids)
    lut = np.empty((n_languages, n_base), dtype=np.int64)
    lut[:, anchor_ids] = np.arange(a)
    for n in range(n_languages):
        lut[n, dup_ids] = a + n * d + np.arange(d)
    return lut


def clone_vocab(
    vocab: Vocabulary,
    n_languages: int,
    anchor_fraction: float = 0.0,
    seed: int = 0,
    selection: str = "uniform",
    counts: np.ndarray | None = None,
) -> ClonedVocabulary:
    """Clone a vocabulary into ``n_languages`` blocks sharing
    ``floor(anchor_fraction * |base|)`` anchors.

    Anchors are chosen uniformly at random (seeded) by default;
    ``selection="frequency"`` instead anchors the most frequent base ids and
    requires per-id ``counts``.
    """
    if n_languages < 1:
        raise TokenizerError("n_languages must be >= 1")
    if not 0 <= anchor_fraction <= 1:
        raise TokenizerError(f"anchor_fraction must be in [0, 1], got {anchor_fraction}")
    n_base = len(vocab)
    n_anchor = int(np.floor(anchor_fraction * n_base))
    if selection == "uniform":
        rng = np.random.default_rng(seed)
        anchor_ids = np.sort(rng.choice(n_base, size=n_anchor, replace=False))
    elif selection == "frequency":
        if counts is None:
            raise TokenizerError("frequency-stratified selection requires counts")
        order = np.lexsort((np.arange(n_base), -np.asarray(counts)))
        anchor_ids = np.sort(order[:n_anchor])
    else:
        raise TokenizerError(f"unknown anchor selection {selection!r}")
    return ClonedVocabulary(
        base=vocab,
        n_languages=n_languages,
        anchor_ids=anchor_ids.astype(np.int64),
        lut=_build_lut(n_base, n_languages, anchor_ids),
    )


def relabel(cv: ClonedVocabulary, permutation: Sequence[int]) -> ClonedVocabulary:
    """Permute language roles: the relabelled layout maps language n the way
    the original mapped ``permutation[n]``. Anchors are unchanged."""
    perm = np.asarray(permutation, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(cv.n_languages)):
        raise TokenizerError(
            f"permutation {permutation!r} is not a bijection over "
            f"{{0..{cv.n_languages - 1}}}"
        )
    return ClonedVocabulary(
        base=cv.base,
        n_languages=cv.n_languages,
        anchor_ids=cv.anchor_ids,
        lut=cv.lut[perm],
    )


# ---------------------------------------------------------------------------
# Merged vocabularies (real bilingual, anchored setting)


@dataclass(frozen=True)
class MergedVocabulary:
    """Union of two vocabularies where shared surface forms get one id.

    Final ids: all of A's pieces keep their order in [0, |A|), then B's
    non-shared pieces follow in B order. ``remap_a``/``remap_b`` translate each
    source id space into the merged space.
    """

    vocab_a: Vocabulary
    vocab_b: Vocabulary
    shared: frozenset[str]
    pieces: tuple[str, ...]
    remap_a: np.ndarray
    remap_b: np.ndarray

    @property
    def total_size(self) -> int:
        return len(self.pieces)


def merge_vocabs(vocab_a: Vocabulary, vocab_b: Vocabulary) -> MergedVocabulary:
    if vocab_a.marker != vocab_b.marker:
        raise TokenizerError(
            f"incompatible word-begin markers: {vocab_a.marker!r} vs {vocab_b.marker!r}"
        )
    shared = frozenset(vocab_a.pieces) & frozenset(vocab_b.pieces)
    pieces = list(vocab_a.pieces)
    index = {p: i for i, p in enumerate(pieces)}
    for p in vocab_b.pieces:
        if p not in index:
            index[p] = len(pieces)
            pieces.append(p)
    remap_a = np.arange(len(vocab_a.pieces), dtype=np.int64)
    remap_b = np.asarray([index[p] for p in vocab_b.pieces], dtype=np.int64)
    return MergedVocabulary(
        vocab_a=vocab_a,
        vocab_b=vocab_b,
        shared=shared,
        pieces=tuple(pieces),
        remap_a=remap_a,
        remap_b=remap_b,
    )
