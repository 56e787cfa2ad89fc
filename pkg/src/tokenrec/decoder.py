"""Trie-constrained decoding of slot distributions into catalog items.

The trie encodes every catalog item's fixed-length token sequence; beam search
expands hypotheses slot by slot but only along branches that lead to real
items, so decoded recommendations always exist in the catalog. Full-catalog
ranking (used by the evaluation protocols) scores every sequence exhaustively
and never depends on the beam width.

Ordering is everywhere deterministic: hypotheses tie-break by smaller token
sequence, items inside a shared leaf by item_id.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .fsq import ItemTokenSequence
from .model import SequenceModel, TokenizedSequence


class TrieNode:
    __slots__ = ("children", "items")

    def __init__(self):
        self.children: dict[int, TrieNode] = {}
        self.items: list[str] = []


class CatalogTrie:
    """Depth-``depth`` prefix tree over item token sequences.

    Items with identical sequences share a leaf; leaf item lists are sorted.
    """

    def __init__(self, sequences: list[ItemTokenSequence], depth: int):
        self.depth = depth
        self.root = TrieNode()
        self.node_count = 1
        self.item_count = 0
        seen: set[str] = set()
        for seq in sequences:
            if len(seq.tokens) != depth:
                raise DataError(
                    f"item {seq.item_id!r} has {len(seq.tokens)} tokens, "
                    f"trie depth is {depth}")
            if seq.item_id in seen:
                raise DataError(f"duplicate item_id {seq.item_id!r}")
            seen.add(seq.item_id)
            node = self.root
            for tok in seq.tokens:
                child = node.children.get(tok)
                if child is None:
                    child = TrieNode()
                    node.children[tok] = child
                    self.node_count += 1
                node = child
            node.items.append(seq.item_id)
            self.item_count += 1

        self._leaf_tokens: list[tuple[int, ...]] = []
        self._leaf_items: list[list[str]] = []
        self._item_leaf: dict[str, int] = {}
        self._collect(self.root, ())
        self.leaf_tokens = (np.array(self._leaf_tokens, dtype=np.int64)
                            if self._leaf_tokens
                            else np.empty((0, depth), dtype=np.int64))

    def _collect(self, node: TrieNode, prefix: tuple[int, ...]) -> None:
        if len(prefix) == self.depth:
            node.items.sort()
            idx = len(self._leaf_tokens)
            self._leaf_tokens.append(prefix)
            self._leaf_items.append(node.items)
            for item in node.items:
                self._item_leaf[item] = idx
            return
        for tok in sorted(node.children):
            self._collect(node.children[tok], prefix + (tok,))

    @property
    def n_leaves(self) -> int:
        return len(self._leaf_items)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._item_leaf

    def tokens_of(self, item_id: str) -> tuple[int, ...]:
        try:
            return tuple(self._leaf_tokens[self._item_leaf[item_id]])
        except KeyError:
            raise DataError(f"item {item_id!r} not in catalog trie") from None


def build_trie(sequences: list[ItemTokenSequence],
               tokens_per_item: int | None = None) -> CatalogTrie:
    if tokens_per_item is None:
        if not sequences:
            raise ConfigError(
                "tokens_per_item is required for an empty catalog")
        tokens_per_item = len(sequences[0].tokens)
    return CatalogTrie(sequences, tokens_per_item)


@dataclass
class RankedRecommendations:
    """Ranked (item_id, log_score) entries plus an expansion counter."""

    entries: list[tuple[str, float]] = field(default_factory=list)
    expansions: int = 0

    def item_ids(self) -> list[str]:
        return [item for item, _ in self.entries]

    def records(self) -> str:
        """One `rank item_id log_score` line per recommendation."""
        return "".join(f"{rank} {item} {score!r}\n"
                       for rank, (item, score)
                       in enumerate(self.entries, start=1))


def _slot_logprobs(dist: np.ndarray, depth: int) -> np.ndarray:
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim != 2 or dist.shape[0] != depth:
        raise DataError(
            f"expected {depth} slot distributions, got shape {dist.shape}")
    with np.errstate(divide="ignore"):
        return np.log(dist)


def constrained_beam_search(dist: np.ndarray, trie: CatalogTrie,
                            beam_width: int, n: int) -> RankedRecommendations:
    """Top-n catalog items under the per-slot factorized distribution.

    ``dist`` holds one probability row per token slot. At each depth only the
    current trie node's children are considered; each node's children are
    sorted once by slot log-probability and consumed lazily through a heap, so
    materialized candidates stay within beam_width * branching per depth.
    """
    if beam_width <= 0:
        raise ConfigError("beam_width must be positive")
    logp = _slot_logprobs(dist, trie.depth)
    result = RankedRecommendations()
    # hypotheses: (neg_score, prefix, node), already sorted
    beam = [(0.0, (), trie.root)]
    for depth in range(trie.depth):
        slot = logp[depth]
        ordered_children = []
        for neg_score, prefix, node in beam:
            if not node.children:
                continue
            # sort by full candidate key so lazy consumption matches the
            # global tie-break even when this hypothesis is already at -inf
            kids = sorted(node.children,
                          key=lambda tok: (neg_score - slot[tok], tok))
            ordered_children.append((neg_score, prefix, node, kids))
        heap = []
        for hyp_idx, (neg_score, prefix, node, kids) in enumerate(ordered_children):
            tok = kids[0]
            result.expansions += 1
            heap.append((neg_score - slot[tok], prefix + (tok,), hyp_idx, 0))
        heapq.heapify(heap)
        next_beam = []
        while heap and len(next_beam) < beam_width:
            neg_score, prefix, hyp_idx, kid_rank = heapq.heappop(heap)
            parent = ordered_children[hyp_idx]
            next_beam.append((neg_score, prefix,
                              parent[2].children[prefix[-1]]))
            kids = parent[3]
            if kid_rank + 1 < len(kids):
                tok = kids[kid_rank + 1]
                result.expansions += 1
                heapq.heappush(heap, (parent[0] - slot[tok],
                                      parent[1] + (tok,), hyp_idx,
                                      kid_rank + 1))
        beam = next_beam
    for neg_score, prefix, node in beam:
        for item_id in node.items:
            if len(result.entries) >= n:
                return result
            result.entries.append((item_id, float(-neg_score)))
    return result


def decode_topn(history: TokenizedSequence, model: SequenceModel,
                trie: CatalogTrie, beam_width: int, n: int
                ) -> RankedRecommendations:
    """predict_next_item followed by constrained beam search."""
    if trie.depth != model.config.tokens_per_item:
        raise ConfigError(
            f"trie depth {trie.depth} does not match model tokens_per_item "
            f"{model.config.tokens_per_item}")
    dist = model.predict_next_item(history)
    return constrained_beam_search(dist, trie, beam_width, n)


def leaf_scores(dist: np.ndarray, trie: CatalogTrie) -> np.ndarray:
    """Exhaustive log-score of every distinct catalog sequence."""
    logp = _slot_logprobs(dist, trie.depth)
    if trie.n_leaves == 0:
        return np.empty(0)
    cols = np.arange(trie.depth)
    return logp[cols, trie.leaf_tokens].sum(axis=1)


def rank_for_dist(dist: np.ndarray, trie: CatalogTrie,
                  target_item_id: str) -> int:
    """1-based rank of the target under exhaustive full-catalog scoring.

    Total order: higher score first, then smaller token sequence, then
    smaller item_id. Never beam-limited.
    """
    if target_item_id not in trie:
        raise DataError(f"target item {target_item_id!r} not in catalog")
    scores = leaf_scores(dist, trie)
    t_leaf = trie._item_leaf[target_item_id]
    t_score = scores[t_leaf]
    t_tokens = tuple(trie.leaf_tokens[t_leaf])
    rank = 1
    higher = scores > t_score
    for li in np.nonzero(higher)[0]:
        rank += len(trie._leaf_items[li])
    for li in np.nonzero(scores == t_score)[0]:
        leaf_tok = tuple(trie.leaf_tokens[li])
        if leaf_tok < t_tokens:
            rank += len(trie._leaf_items[li])
        elif leaf_tok == t_tokens:
            for item in trie._leaf_items[li]:
                if item < target_item_id:
                    rank += 1
    return rank


def rank_of_item(history: TokenizedSequence, model: SequenceModel,
                 trie: CatalogTrie, target_item_id: str) -> int:
    dist = model.predict_next_item(history)
    return rank_for_dist(dist, trie, target_item_id)
