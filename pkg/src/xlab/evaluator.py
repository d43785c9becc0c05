"""Sliding-window test perplexity.

Context never crosses document boundaries. Within one document of n tokens
the window layout is:

* first window starts at 0 and scores every predictable token it covers;
* each later window advances by ``stride`` and scores only its trailing
  ``stride`` targets;
* if a tail remains, one final window is right-aligned to the document end
  and scores exactly the not-yet-scored targets (their context is therefore
  at least ``window - stride`` tokens).

Every predictable token of every document is scored exactly once, and the
total negative log-likelihood is accumulated with exact (fsum) 64-bit
summation, so the perplexity is invariant under document order permutation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .corpus import TokenStream
from .mixer import JointIdSpace
from .model import ModelState, forward
from .tokenizer import ClonedVocabulary


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class EvalResult:
    ppl: float
    tokens_scored: int
    window: int
    stride: int

    def to_dict(self) -> dict:
        return {
            "ppl": self.ppl,
            "tokens_scored": self.tokens_scored,
            "window": self.window,
            "stride": self.stride,
        }


def window_spans(n: int, window: int, stride: int) -> list[tuple[int, int, int]]:
    """(window_start, first_scored_target, scored_end) spans for a document of
    n tokens; target p means predicting token p from tokens [start, p)."""
    if stride > window:
        raise EvalError(f"stride {stride} exceeds window {window}")
    if n < 2:
        return []
    if n <= window:
        return [(0, 1, n)]
    spans = [(0, 1, window)]
    s = stride
    while s + window <= n:
        spans.append((s, s + window - stride, s + window))
        s += stride
    if spans[-1][2] < n:
        spans.append((n - window, spans[-1][2], n))
    return spans


def _batched_window_logprobs(state: ModelState, windows: np.ndarray) -> np.ndarray:
    """Next-token log-probs for a (k, w) stack of equal-length windows;
    returns (k, w-1) in float64."""
    trace = forward(state, windows)
    logits = trace.logits.astype(np.float64)
    m = logits.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(logits - m).sum(axis=-1))
    k, w = windows.shape
    rows = np.arange(w - 1)
    targets = windows[:, 1:].astype(np.int64)
    picked = logits[np.arange(k)[:, None], rows[None, :], targets]
    return picked - lse[:, :-1]


def sliding_logprobs(
    state: ModelState,
    doc_ids: np.ndarray,
    window: int = 512,
    stride: int = 128,
    batch_windows: int = 8,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-token log-probabilities for one document under the sliding layout.

    Returns (target_positions, logprobs); position p is the index of the
    scored token within the document. Each predictable token appears once.
    """
    ids = np.asarray(doc_ids, dtype=np.int64)
    spans = window_spans(len(ids), window, stride)
    positions: list[np.ndarray] = []
    values: list[np.ndarray] = []
    for i in range(0, len(spans), batch_windows):
        chunk = spans[i : i + batch_windows]
        length = min(window, len(ids))
        stack = np.stack([ids[ws : ws + length] for ws, _, _ in chunk])
        lp = _batched_window_logprobs(state, stack)
        for row, (ws, first, end) in zip(lp, chunk):
            positions.append(np.arange(first, end))
            values.append(row[first - ws - 1 : end - ws - 1])
    if not positions:
        return np.empty(0, dtype=np.int64), np.empty(0)
    return np.concatenate(positions), np.concatenate(values)


def sliding_ppl(
    state: ModelState,
    stream: TokenStream,
    window: int = 512,
    stride: int = 128,
) -> EvalResult:
    """exp(mean negative log-likelihood) over every predictable token of every
    document, each document evaluated independently."""
    if len(stream) == 0:
        raise EvalError("cannot evaluate an empty token stream")
    nll_terms: list[float] = []
    scored = 0
    for i in range(stream.n_documents):
        _, lp = sliding_logprobs(state, stream.document(i), window, stride)
        nll_terms.extend((-lp).tolist())
        scored += len(lp)
    if scored == 0:
        raise EvalError("stream has no predictable tokens (all documents < 2 tokens)")
    ppl = math.exp(math.fsum(nll_terms) / scored)
    return EvalResult(ppl=ppl, tokens_scored=scored, window=window, stride=stride)


def per_language_eval(
    state: ModelState,
    layout: ClonedVocabulary | JointIdSpace,
    test,
    window: int = 512,
    stride: int = 128,
) -> dict[int, EvalResult]:
    """Per-language test perplexity.

    Cloned mode (layout is a ClonedVocabulary, test is one base-id stream):
    the whole test stream is encoded once per language, valid because clones
    are exact equivalents. Real mode (layout is a JointIdSpace, test is one
    stream per language): each language is evaluated on its own stream,
    remapped into the joint id space.
    """
    results: dict[int, EvalResult] = {}
    if isinstance(layout, ClonedVocabulary):
        stream: TokenStream = test
        for n in range(layout.n_languages):
            remapped = TokenStream(
                ids=layout.map_ids(stream.ids, n).astype(np.uint32),
                doc_boundaries=stream.doc_boundaries,
                vocab_digest=stream.vocab_digest,
            )
            results[n] = sliding_ppl(state, remapped, window, stride)
    else:
        for n, stream in enumerate(test):
            remapped = TokenStream(
                ids=layout.map_ids(stream.ids, n).astype(np.uint32),
                doc_boundaries=stream.doc_boundaries,
                vocab_digest=stream.vocab_digest,
            )
            results[n] = sliding_ppl(state, remapped, window, stride)
    return results
