"""Deterministic multi-domain synthetic corpus with transferable structure.

Items belong to latent concepts shared across domains; an item's text is its
concept's phrase plus a short unique suffix, so stub embeddings of
same-concept items cluster regardless of domain. User sessions follow a
concept-level Markov chain (also shared across domains), which is what makes
next-item structure learned on one domain transfer to another.
"""

from __future__ import annotations

import string
from dataclasses import dataclass, field

import numpy as np

from .data import InteractionDataset
from .embeddings import EmbeddingCatalog, stub_embed
from .errors import ConfigError


@dataclass(frozen=True)
class CorpusSpec:
    domains: tuple[str, ...] = ("domain_a", "domain_b")
    items_per_domain: int = 100
    users_per_domain: int = 500
    n_concepts: int = 10
    seq_len_range: tuple[int, int] = (6, 12)
    embedding_dim: int = 64
    follow_prob: float = 0.85
    concept_weight: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.n_concepts < 2:
            raise ConfigError("need at least 2 concepts")
        if not self.domains or self.items_per_domain < 1 \
                or self.users_per_domain < 1:
            raise ConfigError("all corpus counts must be positive")
        if self.seq_len_range[0] < 2 or self.seq_len_range[1] < self.seq_len_range[0]:
            raise ConfigError("sequence length range must be >= 2 and ordered")
        if not 0.0 < self.follow_prob < 1.0:
            raise ConfigError("follow_prob must be in (0, 1)")
        if self.concept_weight < 1:
            raise ConfigError("concept_weight must be >= 1")


@dataclass
class SyntheticCorpus:
    spec: CorpusSpec
    embeddings: EmbeddingCatalog
    datasets: dict[str, InteractionDataset]
    item_concept: dict[str, int]
    domain_items: dict[str, list[str]] = field(default_factory=dict)
    transition_matrix: np.ndarray | None = None

    def catalog_for(self, domain: str) -> EmbeddingCatalog:
        wanted = set(self.domain_items[domain])
        entries = [e for e in self.embeddings.entries if e.item_id in wanted]
        return EmbeddingCatalog(entries, self.embeddings.dim)


def _pseudo_words(rng: np.random.Generator, count: int) -> list[str]:
    letters = np.array(list(string.ascii_lowercase))
    words = []
    for _ in range(count):
        length = int(rng.integers(4, 8))
        words.append("".join(rng.choice(letters, size=length)))
    return words


def concept_transitions(n_concepts: int, follow_prob: float,
                        rng: np.random.Generator) -> np.ndarray:
    """Row-stochastic matrix: a seeded derangement gets follow_prob mass, the
    rest spreads uniformly over the remaining concepts."""
    succ = rng.permutation(n_concepts)
    while np.any(succ == np.arange(n_concepts)):
        succ = rng.permutation(n_concepts)
    t = np.full((n_concepts, n_concepts),
                (1.0 - follow_prob) / (n_concepts - 1))
    t[np.arange(n_concepts), succ] = follow_prob
    return t


def generate_synthetic_corpus(spec: CorpusSpec) -> SyntheticCorpus:
    """Fully deterministic given spec.seed."""
    rng = np.random.default_rng(spec.seed)
    words = _pseudo_words(rng, 4 * spec.n_concepts)
    phrases = [" ".join(words[4 * c: 4 * c + 4]) for c in range(spec.n_concepts)]
    transitions = concept_transitions(spec.n_concepts, spec.follow_prob, rng)

    entries = []
    item_concept: dict[str, int] = {}
    domain_items: dict[str, list[str]] = {}
    concept_items: dict[str, list[list[str]]] = {}
    counter = 0
    for domain in spec.domains:
        ids = []
        per_concept: list[list[str]] = [[] for _ in range(spec.n_concepts)]
        for i in range(spec.items_per_domain):
            concept = i % spec.n_concepts
            item_id = f"{domain}:{i:05d}"
            # repeating the concept phrase weights shared n-grams against the
            # unique suffix, controlling how tightly concepts cluster
            phrase = " ".join([phrases[concept]] * spec.concept_weight)
            text = f"{phrase} u{counter:04d}"
            counter += 1
            entries.append(stub_embed(item_id, text, spec.embedding_dim,
                                      spec.seed))
            item_concept[item_id] = concept
            per_concept[concept].append(item_id)
            ids.append(item_id)
        domain_items[domain] = ids
        concept_items[domain] = per_concept

    datasets = {}
    for domain in spec.domains:
        per_concept = concept_items[domain]
        populated = [c for c in range(spec.n_concepts) if per_concept[c]]
        sequences = []
        for u in range(spec.users_per_domain):
            length = int(rng.integers(spec.seq_len_range[0],
                                      spec.seq_len_range[1] + 1))
            concept = int(rng.choice(populated))
            items = []
            for _ in range(length):
                items.append(str(rng.choice(per_concept[concept])))
                nxt = int(rng.choice(spec.n_concepts, p=transitions[concept]))
                # skip to a populated concept if item counts left a gap
                while not per_concept[nxt]:
                    nxt = (nxt + 1) % spec.n_concepts
                concept = nxt
            sequences.append((f"{domain}_user{u:05d}", items))
        datasets[domain] = InteractionDataset(sequences, domain_tag=domain)

    return SyntheticCorpus(spec, EmbeddingCatalog(entries, spec.embedding_dim),
                           datasets, item_concept, domain_items, transitions)
