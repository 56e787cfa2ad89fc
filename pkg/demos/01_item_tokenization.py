"""Turn item texts into discrete token sequences.

Walks the whole tokenizer path: deterministic stub embeddings from text,
training the finite-scalar quantizer on them, and inspecting how similar
items land on nearby token sequences.
"""

import numpy as np

from tokenrec.embeddings import EmbeddingCatalog, stub_embed
from tokenrec.fsq import (FsqConfig, QuantizerHyper, digits_to_token,
                          token_to_digits, train_quantizer)

ITEMS = [
    ("shoe-red-01", "bright red running shoes lightweight"),
    ("shoe-red-02", "bright red running shoes cushioned"),
    ("shoe-blue-01", "deep blue running shoes lightweight"),
    ("mug-01", "ceramic coffee mug glazed large"),
    ("mug-02", "ceramic coffee mug glazed small"),
    ("tent-01", "waterproof camping tent two person"),
]

print("== stub embeddings ==")
entries = [stub_embed(item_id, text, 64, seed=7) for item_id, text in ITEMS]
catalog = EmbeddingCatalog(entries, 64)
a, b, c = catalog.vector("shoe-red-01"), catalog.vector("shoe-red-02"), \
    catalog.vector("tent-01")
print(f"cos(shoe-red-01, shoe-red-02) = {a @ b:.3f}")
print(f"cos(shoe-red-01, tent-01)     = {a @ c:.3f}")

print("\n== quantizer training (levels [8,8,8,6,5], 15360-token codebook) ==")
config = FsqConfig(embedding_dim=64, num_subvectors=4, levels=(8, 8, 8, 6, 5))
codebook, trace = train_quantizer(catalog, config,
                                  QuantizerHyper(epochs=120, lr=0.03, seed=0))
print(f"reconstruction loss {trace[0]:.4f} -> {trace[-1]:.4f} "
      f"over {len(trace) - 1} epochs")

print("\n== token sequences ==")
for seq in codebook.tokenize_catalog(catalog):
    print(f"{seq.item_id:13s} {seq.tokens}")
print("similar items share slots; every token encodes 5 digits:")
tok = codebook.tokenize_catalog(catalog)[0].tokens[0]
digits = token_to_digits(tok, config)
print(f"token {tok} <-> digits {digits.tolist()} "
      f"(round-trip {digits_to_token(digits, config)})")

print("\n== reconstruction ==")
seq = codebook.tokenize_catalog(catalog)[0]
recon = codebook.reconstruct_tokens(np.array(seq.tokens))
err = np.abs(recon - catalog.vector(seq.item_id)).mean()
print(f"mean absolute reconstruction error for {seq.item_id}: {err:.4f}")
