"""Interaction datasets and assembly of model-ready sequences.

Dataset file format: one line per user, ``user_id item_id_1 item_id_2 ...``
in interaction order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embeddings import EmbeddingCatalog
from .errors import DataError
from .fsq import FsqConfig, ItemTokenSequence, partition
from .model import TokenizedSequence


@dataclass
class InteractionDataset:
    sequences: list[tuple[str, list[str]]]
    domain_tag: str = ""

    def __post_init__(self):
        for user_id, items in self.sequences:
            if len(items) < 2:
                raise DataError(
                    f"user {user_id!r} has fewer than 2 interactions")

    def __len__(self):
        return len(self.sequences)

    def item_ids(self) -> set[str]:
        out: set[str] = set()
        for _, items in self.sequences:
            out.update(items)
        return out

    def validate_against(self, catalog: EmbeddingCatalog) -> None:
        for user_id, items in self.sequences:
            for item in items:
                if item not in catalog:
                    raise DataError(
                        f"user {user_id!r} references unknown item {item!r}")


def load_interactions(path, domain_tag: str = "") -> InteractionDataset:
    sequences = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for row, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            fields = line.split()
            user_id = fields[0]
            if user_id in seen:
                raise DataError(f"row {row}: duplicate user_id {user_id!r}")
            seen.add(user_id)
            if len(fields) < 3:
                raise DataError(
                    f"row {row}: user {user_id!r} needs at least 2 items")
            sequences.append((user_id, fields[1:]))
    return InteractionDataset(sequences, domain_tag)


def write_interactions(dataset: InteractionDataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for user_id, items in dataset.sequences:
            fh.write(user_id + " " + " ".join(items) + "\n")


@dataclass
class SequenceMaterializer:
    """Binds a token catalog and an embedding catalog to build model inputs.

    Per item, the auxiliary features are the raw contiguous sub-vectors of its
    embedding (one per token slot), matching the quantizer's partitioning.
    """

    token_map: dict[str, tuple[int, ...]]
    embeddings: EmbeddingCatalog
    fsq_config: FsqConfig
    _feat_cache: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @classmethod
    def from_token_sequences(cls, sequences: list[ItemTokenSequence],
                             embeddings: EmbeddingCatalog,
                             fsq_config: FsqConfig) -> "SequenceMaterializer":
        return cls({s.item_id: s.tokens for s in sequences}, embeddings,
                   fsq_config)

    def features_for(self, item_id: str) -> np.ndarray:
        cached = self._feat_cache.get(item_id)
        if cached is None:
            cached = partition(self.embeddings.vector(item_id), self.fsq_config)
            self._feat_cache[item_id] = cached
        return cached

    def sequence(self, item_ids: list[str], user_id: str = "") -> TokenizedSequence:
        tokens = np.empty((len(item_ids), self.fsq_config.num_subvectors),
                          dtype=np.int64)
        feats = np.empty((len(item_ids), self.fsq_config.num_subvectors,
                          self.fsq_config.sub_dim))
        for i, item in enumerate(item_ids):
            if item not in self.token_map:
                raise DataError(f"item {item!r} missing from token catalog")
            tokens[i] = self.token_map[item]
            feats[i] = self.features_for(item)
        return TokenizedSequence(tokens, feats, user_id)

    def dataset(self, data: InteractionDataset) -> list[TokenizedSequence]:
        return [self.sequence(items, user_id)
                for user_id, items in data.sequences]
