import numpy as np
import pytest

from xlab import corpus, model, tokenizer


@pytest.fixture(scope="session")
def tiny_store() -> corpus.DocumentStore:
    docs = [
        "the cat sat on the mat and the dog ran to the cat " * 12,
        "a bird flew over the old barn while the cat slept " * 12,
        "the dog dug under the fence near the tall green tree " * 12,
    ]
    return corpus.DocumentStore.from_documents(docs)


@pytest.fixture(scope="session")
def tiny_vocab(tiny_store) -> tokenizer.Vocabulary:
    return tokenizer.train_bpe(tiny_store, vocab_size=60)


@pytest.fixture(scope="session")
def tiny_stream(tiny_vocab, tiny_store) -> corpus.TokenStream:
    return tokenizer.tokenize_store(tiny_vocab, tiny_store)


def make_vocab(n_pieces: int) -> tokenizer.Vocabulary:
    """A synthetic vocabulary of n unique single/multi-char pieces, no merges."""
    pieces = ["<unk>"] + [f"p{i}" for i in range(n_pieces - 1)]
    return tokenizer.Vocabulary(pieces=tuple(pieces), merges=())


def make_model(
    n_layers=1, d_model=16, n_heads=2, d_ff=32, vocab_size=23, max_seq_len=12,
    tie_embeddings=True, dtype="float64", seed=0,
) -> model.ModelState:
    cfg = model.ModelConfig(
        n_layers=n_layers, d_model=d_model, n_heads=n_heads, d_ff=d_ff,
        vocab_size=vocab_size, max_seq_len=max_seq_len,
        tie_embeddings=tie_embeddings, dtype=dtype,
    )
    return model.init(cfg, seed=seed)


def markov_stream(
    n_tokens: int, vocab_size: int, seed: int, peak: float = 0.85
) -> tuple[corpus.TokenStream, np.ndarray]:
    """A first-order Markov token stream with strongly peaked transitions, and
    its stationary unigram distribution (for baseline-loss oracles)."""
    rng = np.random.default_rng(seed)
    trans = np.full((vocab_size, vocab_size), (1 - peak) / (vocab_size - 1))
    nxt = rng.permutation(vocab_size)
    trans[np.arange(vocab_size), nxt] = peak
    ids = np.empty(n_tokens, dtype=np.uint32)
    s = 0
    for i in range(n_tokens):
        ids[i] = s
        s = int(rng.choice(vocab_size, p=trans[s]))
    # stationary distribution via power iteration
    pi = np.full(vocab_size, 1.0 / vocab_size)
    for _ in range(200):
        pi = pi @ trans
    stream = corpus.TokenStream(
        ids=ids,
        doc_boundaries=np.array([n_tokens], dtype=np.uint64),
        vocab_digest="0" * 64,
    )
    return stream, pi
