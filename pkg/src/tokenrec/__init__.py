"""Text-token generative recommendation at desk scale.

Pipeline: continuous item embeddings -> finite scalar quantization into
fixed-length token sequences -> block-causal autoregressive sequence model ->
trie-constrained catalog decoding, plus the evaluation protocols (zero-shot,
cold-start, data-fraction scaling).
"""

__version__ = "0.1.0"
