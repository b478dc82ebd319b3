"""Caption tokenization and fixed-length sentence vectors.

A caption becomes a single vector either through a trainable closed-vocabulary
embedding table (mean over token rows) or by importing precomputed sentence
vectors from file.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass

import numpy as np

from .errors import (
    EmptyCaption,
    InconsistentDimension,
    MissingEmbedding,
    UnknownTokenId,
)

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_caption(caption: str) -> list:
    """Lowercase, strip punctuation, split on whitespace."""
    return caption.lower().translate(_PUNCT_TABLE).split()


@dataclass(frozen=True)
class Vocabulary:
    token_to_id: dict

    def __post_init__(self):
        if self.token_to_id.get(PAD_TOKEN) != PAD_ID or self.token_to_id.get(UNK_TOKEN) != UNK_ID:
            raise ValueError("vocabulary must reserve <pad>=0 and <unk>=1")
        ids = sorted(self.token_to_id.values())
        if ids != list(range(len(ids))):
            raise ValueError("token ids must be dense in [0, vocab_size)")

    @property
    def size(self) -> int:
        return len(self.token_to_id)

    @classmethod
    def build(cls, captions) -> "Vocabulary":
        """Closed vocabulary over every word appearing in the given captions."""
        tokens = {PAD_TOKEN: PAD_ID, UNK_TOKEN: UNK_ID}
        for caption in captions:
            for word in normalize_caption(caption):
                if word not in tokens:
                    tokens[word] = len(tokens)
        return cls(tokens)

    def to_json_dict(self) -> dict:
        ordered = sorted(self.token_to_id, key=self.token_to_id.get)
        return {"tokens": ordered}

    @classmethod
    def from_json_dict(cls, data: dict) -> "Vocabulary":
        return cls({tok: i for i, tok in enumerate(data["tokens"])})


def tokenize(caption: str, vocab: Vocabulary) -> list:
    words = normalize_caption(caption)
    if not words:
        raise EmptyCaption(f"caption {caption!r} is empty after normalization")
    return [vocab.token_to_id.get(w, UNK_ID) for w in words]


def embed_learned(token_ids, table: np.ndarray) -> np.ndarray:
    """Mean of the tokens' rows of the embedding table. The trainable path
    inside the denoiser mirrors this exactly (see model.CaptionEncoder)."""
    table = np.asarray(table)
    for i in token_ids:
        if not 0 <= i < table.shape[0]:
            raise UnknownTokenId(f"token id {i} outside table of {table.shape[0]} rows")
    # summation in sorted-id order keeps the mean bit-identical under
    # permutations of the caption's tokens
    return table[np.sort(np.asarray(token_ids))].mean(axis=0)


def load_precomputed(path) -> dict:
    """Read a JSON map caption_id -> sentence vector; all entries must share
    one dimension."""
    with open(path) as fh:
        raw = json.load(fh)
    out = {}
    dim = None
    for key, vec in raw.items():
        vec = np.asarray(vec, dtype=np.float64)
        if dim is None:
            dim = vec.shape[0]
        elif vec.shape[0] != dim:
            raise InconsistentDimension(
                f"entry {key!r} has dimension {vec.shape[0]}, expected {dim}"
            )
        out[key] = vec
    return out


def lookup_precomputed(table: dict, caption_id: str) -> np.ndarray:
    if caption_id not in table:
        raise MissingEmbedding(f"no precomputed embedding for {caption_id!r}")
    return table[caption_id]


def write_vocabulary_json(vocab: Vocabulary, path) -> None:
    with open(path, "w") as fh:
        json.dump(vocab.to_json_dict(), fh, indent=2)


def read_vocabulary_json(path) -> Vocabulary:
    with open(path) as fh:
        return Vocabulary.from_json_dict(json.load(fh))
