"""Evaluation protocols: splits, ranking metrics, zero-shot and cold-start.

Ranks always come from exhaustive full-catalog scoring (never beam-limited):
the target item's position in the deterministic total order over catalog
sequences (score desc, then token sequence, then item_id).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import InteractionDataset, SequenceMaterializer
from .decoder import CatalogTrie, build_trie, rank_for_dist
from .embeddings import EmbeddingCatalog
from .errors import ConfigError, DataError
from .fsq import FsqCodebook
from .model import SequenceModel

DEFAULT_CUTOFFS = (1, 3, 5, 10)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(
                f"train_fraction must be in (0, 1), got {self.train_fraction}")


def split_dataset(data: InteractionDataset, spec: SplitSpec
                  ) -> tuple[InteractionDataset, InteractionDataset]:
    """Seeded sequence-level shuffle; train size is floor(fraction * n)."""
    n = len(data)
    if n < 2:
        raise DataError("need at least 2 sequences to split")
    order = np.random.default_rng(spec.seed).permutation(n)
    n_train = math.floor(spec.train_fraction * n)
    train = [data.sequences[i] for i in order[:n_train]]
    test = [data.sequences[i] for i in order[n_train:]]
    return (InteractionDataset(train, data.domain_tag),
            InteractionDataset(test, data.domain_tag))


@dataclass
class MetricsReport:
    hit: dict[int, float]
    ndcg: dict[int, float]
    n_cases: int
    protocol_tag: str

    def to_dict(self) -> dict:
        return {"protocol": self.protocol_tag, "n_cases": self.n_cases,
                "hit": {str(n): v for n, v in self.hit.items()},
                "ndcg": {str(n): v for n, v in self.ndcg.items()}}


def compute_metrics(ranks, cutoffs=DEFAULT_CUTOFFS,
                    protocol_tag: str = "") -> MetricsReport:
    """Hit@N = P(rank <= N); NDCG@N = mean of 1/log2(rank+1) when rank <= N.

    With a single ground-truth item per case the ideal DCG is 1, so no
    further normalization applies.
    """
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise DataError("empty rank list")
    if ranks.min() < 1:
        raise DataError("ranks are 1-based and must be >= 1")
    hit = {}
    ndcg = {}
    gains = 1.0 / np.log2(ranks + 1.0)
    for n in cutoffs:
        within = ranks <= n
        hit[n] = float(within.mean())
        ndcg[n] = float(np.where(within, gains, 0.0).mean())
    return MetricsReport(hit, ndcg, int(ranks.size), protocol_tag)


def _prepare_target(codebook: FsqCodebook, target: InteractionDataset,
                    embeddings: EmbeddingCatalog
                    ) -> tuple[SequenceMaterializer, CatalogTrie]:
    item_ids = target.item_ids()
    missing = [i for i in sorted(item_ids) if i not in embeddings]
    if missing:
        raise DataError(
            f"{len(missing)} target items lack embeddings, first: "
            f"{missing[0]!r}")
    entries = [e for e in embeddings.entries if e.item_id in item_ids]
    catalog = EmbeddingCatalog(entries, embeddings.dim)
    token_seqs = codebook.tokenize_catalog(catalog)
    trie = build_trie(token_seqs, codebook.config.num_subvectors)
    materializer = SequenceMaterializer.from_token_sequences(
        token_seqs, catalog, codebook.config)
    return materializer, trie


def evaluate_zero_shot(model: SequenceModel, codebook: FsqCodebook,
                       target: InteractionDataset,
                       embeddings: EmbeddingCatalog,
                       cutoffs=DEFAULT_CUTOFFS) -> MetricsReport:
    """Rank each sequence's last item given the rest, over the full target
    catalog tokenized with the frozen codebook. No fine-tuning happens here.
    """
    if len(target) == 0:
        raise DataError("empty evaluation dataset")
    materializer, trie = _prepare_target(codebook, target, embeddings)
    ranks = []
    for user_id, items in target.sequences:
        history = materializer.sequence(items[:-1], user_id)
        dist = model.predict_next_item(history)
        ranks.append(rank_for_dist(dist, trie, items[-1]))
    return compute_metrics(ranks, cutoffs, protocol_tag="zero_shot")


def cold_start_prefix_lengths(lengths, seed: int,
                              max_prefix: int = 3) -> list[int]:
    """Seeded uniform choice in {1..max_prefix}, capped at length - 1."""
    rng = np.random.default_rng(seed)
    out = []
    for length in lengths:
        if length < 2:
            raise DataError("cold-start needs sequences of >= 2 items")
        draw = int(rng.integers(1, max_prefix + 1))
        out.append(min(draw, length - 1))
    return out


def evaluate_cold_start(model: SequenceModel, codebook: FsqCodebook,
                        target: InteractionDataset,
                        embeddings: EmbeddingCatalog, seed: int = 0,
                        cutoffs=DEFAULT_CUTOFFS) -> MetricsReport:
    """Truncate each history to a seeded 1-3 item prefix (capped at length-1)
    and rank the immediately following item over the full catalog."""
    if len(target) == 0:
        raise DataError("empty evaluation dataset")
    materializer, trie = _prepare_target(codebook, target, embeddings)
    prefix_lens = cold_start_prefix_lengths(
        [len(items) for _, items in target.sequences], seed)
    ranks = []
    for (user_id, items), plen in zip(target.sequences, prefix_lens):
        history = materializer.sequence(items[:plen], user_id)
        dist = model.predict_next_item(history)
        ranks.append(rank_for_dist(dist, trie, items[plen]))
    return compute_metrics(ranks, cutoffs, protocol_tag="cold_start")
