import json

import numpy as np
import pytest

from text2pose.errors import (
    EmptyCaption,
    InconsistentDimension,
    MissingEmbedding,
    UnknownTokenId,
)
from text2pose.text import (
    UNK_ID,
    Vocabulary,
    embed_learned,
    load_precomputed,
    lookup_precomputed,
    read_vocabulary_json,
    tokenize,
    write_vocabulary_json,
)


@pytest.fixture
def vocab():
    return Vocabulary.build(["a man riding a horse", "standing up"])


class TestTokenize:
    def test_known_words(self, vocab):
        ids = tokenize("A man riding a horse", vocab)
        assert len(ids) == 5
        assert UNK_ID not in ids

    def test_unknown_word_maps_to_unk(self, vocab):
        assert tokenize("zxqv", vocab) == [UNK_ID]

    def test_normalization(self, vocab):
        assert tokenize("Riding, a HORSE!", vocab) == tokenize("riding a horse", vocab)

    def test_empty_caption(self, vocab):
        with pytest.raises(EmptyCaption):
            tokenize("  ...  ", vocab)

    def test_vocab_json_round_trip(self, vocab, tmp_path):
        path = tmp_path / "vocab.json"
        write_vocabulary_json(vocab, path)
        assert read_vocabulary_json(path).token_to_id == vocab.token_to_id


class TestEmbedLearned:
    def test_single_token_returns_row(self):
        table = np.arange(12.0).reshape(4, 3)
        assert np.array_equal(embed_learned([2], table), table[2])

    def test_two_tokens_mean(self):
        table = np.arange(12.0).reshape(4, 3)
        assert np.allclose(embed_learned([1, 3], table), (table[1] + table[3]) / 2)

    def test_order_invariant(self):
        rng = np.random.default_rng(0)
        table = rng.normal(size=(6, 8))
        assert np.array_equal(embed_learned([0, 2, 5], table), embed_learned([5, 0, 2], table))

    def test_out_of_range_id(self):
        with pytest.raises(UnknownTokenId):
            embed_learned([9], np.zeros((4, 3)))

    def test_gradient_matches_finite_differences(self):
        # mean embedding: d(output . g)/d(table[r, c]) = count(r in ids) * g[c] / len
        rng = np.random.default_rng(1)
        table = rng.normal(size=(5, 4))
        ids = [1, 3, 3]
        g = rng.normal(size=4)
        eps = 1e-6
        analytic = np.zeros_like(table)
        for r in ids:
            analytic[r] += g / len(ids)
        for r in range(5):
            for c in range(4):
                plus, minus = table.copy(), table.copy()
                plus[r, c] += eps
                minus[r, c] -= eps
                fd = (embed_learned(ids, plus) @ g - embed_learned(ids, minus) @ g) / (2 * eps)
                assert fd == pytest.approx(analytic[r, c], rel=1e-4, abs=1e-8)


class TestPrecomputed:
    def test_load(self, tmp_path):
        path = tmp_path / "emb.json"
        path.write_text(json.dumps({f"c{i}": [0.1] * 768 for i in range(3)}))
        table = load_precomputed(path)
        assert len(table) == 3
        assert table["c0"].shape == (768,)

    def test_inconsistent_dimension(self, tmp_path):
        path = tmp_path / "emb.json"
        path.write_text(json.dumps({"a": [0.0] * 768, "b": [0.0] * 512}))
        with pytest.raises(InconsistentDimension):
            load_precomputed(path)

    def test_missing_id(self, tmp_path):
        path = tmp_path / "emb.json"
        path.write_text(json.dumps({"a": [0.0] * 8}))
        table = load_precomputed(path)
        with pytest.raises(MissingEmbedding):
            lookup_precomputed(table, "nope")
