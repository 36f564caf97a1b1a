import numpy as np
import pytest

from mlmpipe.corpus import TokenSequence, Vocab, Window, pack_sequences

# specials: pad=0, sep=1, mask=2; ordinary tokens start at 3
VOCAB = Vocab(size=100, mask_id=2, pad_id=0, sep_id=1)


@pytest.fixture
def vocab():
    return VOCAB


def make_window(ids, word_starts=None):
    ids = np.asarray(ids, dtype=np.int64)
    if word_starts is None:
        word_starts = np.ones(len(ids), dtype=bool)
    return Window(ids=ids, word_starts=np.asarray(word_starts, dtype=bool))


def full_window(L=128, vocab=VOCAB, rng=None):
    """A window with no pad/sep: every position maskable."""
    rng = rng or np.random.default_rng(0)
    ids = rng.integers(3, vocab.size, size=L)
    return make_window(ids)


def random_docs(n_docs, doc_len, vocab=VOCAB, seed=0):
    rng = np.random.default_rng(seed)
    docs = []
    for d in range(n_docs):
        n = int(rng.integers(doc_len // 2, doc_len * 2))
        ids = rng.integers(3, vocab.size, size=n).tolist()
        ws = rng.random(n) < 0.7
        ws[0] = True
        docs.append(TokenSequence(ids=ids, word_starts=ws.tolist(), doc_index=d))
    return docs


def packed_dataset(n_docs=50, doc_len=100, seq_len=128, vocab=VOCAB, seed=0):
    return pack_sequences(random_docs(n_docs, doc_len, vocab, seed), seq_len, vocab)
