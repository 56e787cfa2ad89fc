"""Data-fraction scaling and the power-law loss fit.

Trains the same configuration on 5%..100% of a synthetic corpus (nested
subsets, early stop on stabilized eval loss), then fits
loss ~ a * tokens^(-b) + c. Also verifies the fitter on a planted curve.
"""

import numpy as np

from tokenrec.data import SequenceMaterializer
from tokenrec.fsq import FsqConfig, QuantizerHyper, train_quantizer
from tokenrec.model import ModelConfig, ModelHyper
from tokenrec.scaling import fit_power_law, run_scaling_experiment
from tokenrec.synthetic import CorpusSpec, generate_synthetic_corpus

print("== planted-curve self test ==")
x = np.logspace(3, 6, 8)
planted = dict(a=5.0, b=0.4, c=0.8)
fit = fit_power_law(x, planted["a"] * x ** (-planted["b"]) + planted["c"])
print(f"planted b={planted['b']}, recovered b={fit.b:.4f}, "
      f"R^2={fit.r_squared:.4f}")

print("\n== scaling runs on a synthetic corpus ==")
spec = CorpusSpec(domains=("s",), items_per_domain=120,
                  users_per_domain=600, n_concepts=10,
                  seq_len_range=(5, 8), embedding_dim=64,
                  follow_prob=0.85, concept_weight=2, seed=5)
corpus = generate_synthetic_corpus(spec)
fsq_cfg = FsqConfig(embedding_dim=64, num_subvectors=4, levels=(6, 5, 4))
codebook, _ = train_quantizer(corpus.embeddings, fsq_cfg,
                              QuantizerHyper(epochs=60, lr=0.03, seed=0))
materializer = SequenceMaterializer.from_token_sequences(
    codebook.tokenize_catalog(corpus.embeddings), corpus.embeddings, fsq_cfg)
seqs = materializer.dataset(corpus.datasets["s"])
model_cfg = ModelConfig(vocab_size=fsq_cfg.codebook_size, width=32,
                        n_layers=2, n_heads=4, max_tokens=64,
                        tokens_per_item=4, feature_dim=16)
hyper = ModelHyper(epochs=30, lr=3e-3, seed=0, early_stop=True)
result = run_scaling_experiment([0.05, 0.10, 0.25, 0.50, 1.0],
                                seqs[:480], seqs[480:600], model_cfg, hyper)
print(f"{'fraction':>9s} {'tokens':>8s} {'eval loss':>10s}")
for frac, tok, loss in zip(result.fractions, result.tokens,
                           result.eval_losses):
    print(f"{frac:9.2f} {tok:8d} {loss:10.4f}")
if result.fit is not None:
    print(f"fit: loss ~ {result.fit.a:.2f} * tokens^(-{result.fit.b:.3f}) "
          f"+ {result.fit.c:.3f}   (R^2 {result.fit.r_squared:.3f})")
else:
    print(f"fit status: {result.fit_status}")
