"""Autoregressive sequence model over item token blocks.

Each item occupies ``tokens_per_item`` consecutive positions. Attention is
bidirectional inside an item's block and strictly causal across blocks, so a
single forward pass yields, at every slot of the latest item, the distribution
of the same slot of the *next* item. Inputs sum three streams per position:
layer-normalized token embeddings, layer-normalized projected continuous
sub-vector features, and learned positional rows. A BOS position (dedicated
embedding, zero feature vector, positional row 0) precedes the tokens, which
is why the positional table has ``max_tokens + 1`` rows.

Training minimizes mean negative log-likelihood of each item's tokens given
only the blocks strictly before it; the first item of a sequence is unscored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError, DataError, DivergenceError
from .serialize import load_checkpoint, save_checkpoint


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    width: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_tokens: int = 64
    tokens_per_item: int = 4
    feature_dim: int = 16

    def __post_init__(self):
        if self.max_tokens % self.tokens_per_item != 0:
            raise ConfigError(
                f"max_tokens {self.max_tokens} not divisible by "
                f"tokens_per_item {self.tokens_per_item}")
        if self.width % self.n_heads != 0:
            raise ConfigError(
                f"width {self.width} not divisible by n_heads {self.n_heads}")
        if min(self.vocab_size, self.width, self.n_layers, self.n_heads,
               self.max_tokens, self.tokens_per_item, self.feature_dim) <= 0:
            raise ConfigError("all model dimensions must be positive")

    @property
    def max_items(self) -> int:
        return self.max_tokens // self.tokens_per_item

    def to_dict(self) -> dict:
        return {"vocab_size": self.vocab_size, "width": self.width,
                "n_layers": self.n_layers, "n_heads": self.n_heads,
                "max_tokens": self.max_tokens,
                "tokens_per_item": self.tokens_per_item,
                "feature_dim": self.feature_dim}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


PAPER_MODEL = dict(width=768, n_layers=3, n_heads=12, max_tokens=1024,
                   tokens_per_item=4, vocab_size=15360, feature_dim=192)


@dataclass
class TokenizedSequence:
    """One user's item history as token blocks plus per-slot features.

    tokens: (n_items, tokens_per_item) int; features: matching float array of
    shape (n_items, tokens_per_item, feature_dim).
    """

    tokens: np.ndarray
    features: np.ndarray
    user_id: str = ""

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.tokens.ndim != 2:
            raise DataError("tokens must be (n_items, tokens_per_item)")
        if self.features.shape[:2] != self.tokens.shape:
            raise DataError(
                f"features shape {self.features.shape} does not match tokens "
                f"{self.tokens.shape}")

    @property
    def n_items(self) -> int:
        return self.tokens.shape[0]

    def truncated(self, max_items: int) -> "TokenizedSequence":
        """Keep the most recent items (suffix truncation)."""
        if self.n_items <= max_items:
            return self
        return TokenizedSequence(self.tokens[-max_items:],
                                 self.features[-max_items:], self.user_id)


def build_block_mask(n_items: int, tokens_per_item: int) -> np.ndarray:
    """Boolean (n_items*K + 1) square mask including the BOS position.

    Entry [p, q] is True iff position p may attend position q: block(q) <=
    block(p), where BOS is block 0 and token position p belongs to block
    1 + (p-1)//K. Bidirectional inside a block, causal across blocks.
    """
    if n_items < 1:
        raise ConfigError("n_items must be >= 1")
    k = tokens_per_item
    pos = np.arange(n_items * k + 1)
    block = np.where(pos == 0, 0, 1 + (pos - 1) // k)
    return block[None, :] <= block[:, None]


class SequenceModel:
    """Block-causal transformer with weight-tied output projection."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        self.wte = nn.Param(rng.normal(0.0, 0.02, size=(c.vocab_size, c.width)))
        self.bos = nn.Param(rng.normal(0.0, 0.02, size=c.width))
        self.wpe = nn.Param(rng.normal(0.0, 0.01,
                                       size=(c.max_tokens + 1, c.width)))
        self.w_aux = nn.Param(rng.normal(0.0, 1.0 / math.sqrt(c.feature_dim),
                                         size=(c.feature_dim, c.width)))
        self.ln_tok = nn.LayerNorm(c.width)
        self.ln_aux = nn.LayerNorm(c.width)
        resid_scale = 1.0 / (math.sqrt(c.width) * math.sqrt(2.0 * c.n_layers))
        self.blocks = [nn.TransformerBlock(c.width, c.n_heads, rng,
                                           out_scale=resid_scale)
                       for _ in range(c.n_layers)]
        self.ln_f = nn.LayerNorm(c.width)

    def params(self, prefix=""):
        yield prefix + "wte", self.wte
        yield prefix + "bos", self.bos
        yield prefix + "wpe", self.wpe
        yield prefix + "w_aux", self.w_aux
        yield from self.ln_tok.params(prefix + "ln_tok.")
        yield from self.ln_aux.params(prefix + "ln_aux.")
        for i, blk in enumerate(self.blocks):
            yield from blk.params(f"{prefix}block{i}.")
        yield from self.ln_f.params(prefix + "ln_f.")

    # -- input composition ----------------------------------------------------

    def _validate_batch(self, tokens: np.ndarray, features: np.ndarray):
        c = self.config
        if tokens.ndim != 2:
            raise DataError("expected tokens of shape (batch, positions)")
        n_pos = tokens.shape[1]
        if n_pos % c.tokens_per_item != 0 or n_pos == 0:
            raise DataError(
                f"{n_pos} positions is not a whole number of "
                f"{c.tokens_per_item}-token items")
        if n_pos > c.max_tokens:
            raise DataError(
                f"{n_pos} positions exceed max_tokens {c.max_tokens}")
        if tokens.min() < 0 or tokens.max() >= c.vocab_size:
            raise DataError(
                f"token id outside [0, {c.vocab_size})")
        if features.shape != tokens.shape + (c.feature_dim,):
            raise DataError(
                f"features shape {features.shape} inconsistent with tokens")

    def compose_inputs(self, tokens: np.ndarray, features: np.ndarray,
                       need_cache=False):
        """(B, P) tokens + (B, P, feature_dim) -> (B, P+1, width) inputs.

        Row 0 is the BOS position: dedicated token embedding, zero features.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        features = np.asarray(features, dtype=np.float64)
        self._validate_batch(tokens, features)
        b, p = tokens.shape
        c = self.config

        tok_stream = np.empty((b, p + 1, c.width))
        tok_stream[:, 0] = self.bos.value
        tok_stream[:, 1:] = self.wte.value[tokens]

        aux_stream = np.zeros((b, p + 1, c.width))
        aux_stream[:, 1:] = features @ self.w_aux.value

        tok_norm, c_tok = self.ln_tok.forward(tok_stream, need_cache)
        aux_norm, c_aux = self.ln_aux.forward(aux_stream, need_cache)
        x = tok_norm + aux_norm + self.wpe.value[None, :p + 1]
        cache = ((tokens, features, c_tok, c_aux) if need_cache else None)
        return x, cache

    def _compose_backward(self, dx, cache):
        tokens, features, c_tok, c_aux = cache
        p = tokens.shape[1]
        self.wpe.grad[:p + 1] += dx.sum(axis=0)
        dtok = self.ln_tok.backward(dx, c_tok)
        daux = self.ln_aux.backward(dx, c_aux)
        self.bos.grad += dtok[:, 0].sum(axis=0)
        np.add.at(self.wte.grad, tokens.reshape(-1),
                  dtok[:, 1:].reshape(-1, dtok.shape[-1]))
        flat_feat = features.reshape(-1, features.shape[-1])
        flat_daux = daux[:, 1:].reshape(-1, daux.shape[-1])
        self.w_aux.grad += flat_feat.T @ flat_daux

    # -- forward --------------------------------------------------------------

    def forward(self, tokens: np.ndarray, features: np.ndarray,
                need_cache=False, logit_rows: slice | None = None):
        """Logits over the vocabulary at each kept row of (BOS + tokens).

        logit_rows selects rows of the (P+1)-long hidden sequence before the
        output projection (default: all rows). Raises DivergenceError naming
        the layer if activations go non-finite.
        """
        x, c_comp = self.compose_inputs(tokens, features, need_cache)
        n_items = tokens.shape[1] // self.config.tokens_per_item
        mask = build_block_mask(n_items, self.config.tokens_per_item)
        h = x
        block_caches = []
        for i, blk in enumerate(self.blocks):
            h, cache = blk.forward(h, mask, need_cache)
            if not np.all(np.isfinite(h)):
                raise DivergenceError(f"non-finite activations after layer {i}")
            block_caches.append(cache)
        hn, c_ln = self.ln_f.forward(h, need_cache)
        rows = hn if logit_rows is None else hn[:, logit_rows]
        logits = rows @ self.wte.value.T
        cache = ((c_comp, block_caches, c_ln, rows, logit_rows, hn.shape)
                 if need_cache else None)
        return logits, cache

    def _forward_backward(self, dlogits, cache):
        c_comp, block_caches, c_ln, rows, logit_rows, hn_shape = cache
        self.wte.grad += dlogits.reshape(-1, dlogits.shape[-1]).T \
            @ rows.reshape(-1, rows.shape[-1])
        drows = dlogits @ self.wte.value
        if logit_rows is None:
            dhn = drows
        else:
            dhn = np.zeros(hn_shape)
            dhn[:, logit_rows] = drows
        dh = self.ln_f.backward(dhn, c_ln)
        for blk, c in zip(reversed(self.blocks), reversed(block_caches)):
            dh = blk.backward(dh, c)
        self._compose_backward(dh, c_comp)

    # -- objectives -----------------------------------------------------------

    def ar_loss(self, tokens: np.ndarray, features: np.ndarray,
                need_grad=False):
        """Mean NLL of items 2..n, each scored slot-aligned from the previous
        item's block. Returns (loss, per-scored-position log-probs).

        Position t (0-based, t >= K) is scored from hidden row 1 + t - K, so
        every prediction conditions only on blocks strictly before its item.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        features = np.asarray(features, dtype=np.float64)
        k = self.config.tokens_per_item
        if tokens.ndim != 2 or tokens.shape[1] < 2 * k:
            raise DataError("ar_loss needs at least 2 items per sequence")
        p = tokens.shape[1]
        n_scored = p - k
        logits, cache = self.forward(tokens, features, need_cache=need_grad,
                                     logit_rows=slice(1, n_scored + 1))
        targets = tokens[:, k:]
        b_idx = np.arange(tokens.shape[0])[:, None]
        p_idx = np.arange(n_scored)[None, :]
        # lean softmax: one big exp array, reused as the gradient buffer
        zmax = logits.max(axis=-1, keepdims=True)
        ez = np.exp(logits - zmax)
        denom = ez.sum(axis=-1, keepdims=True)
        logp = (logits[b_idx, p_idx, targets] - zmax[..., 0]
                - np.log(denom[..., 0]))
        loss = float(-logp.mean())
        if need_grad:
            ez /= denom * logp.size
            ez[b_idx, p_idx, targets] -= 1.0 / logp.size
            self._forward_backward(ez, cache)
        return loss, logp

    def predict_next_item(self, seq: TokenizedSequence) -> np.ndarray:
        """(tokens_per_item, vocab) probabilities for the next item's slots.

        One forward pass; slot k's distribution is the softmax of the logits
        at slot k of the final item's block.
        """
        if seq.n_items < 1:
            raise DataError("history must contain at least one item")
        seq = seq.truncated(self.config.max_items)
        k = self.config.tokens_per_item
        p = seq.n_items * k
        logits, _ = self.forward(seq.tokens[None].reshape(1, p),
                                 seq.features[None].reshape(1, p, -1),
                                 logit_rows=slice(p - k + 1, p + 1))
        return nn.softmax(logits[0])

    # -- persistence ----------------------------------------------------------

    def save(self, path, dtype="f8", meta=None) -> None:
        save_checkpoint(path, "sequence_model", self.config.to_dict(),
                        [(n, p.value) for n, p in self.params()],
                        dtype=dtype, meta=meta)

    @classmethod
    def load(cls, path) -> "SequenceModel":
        _, cfg_dict, tensors, _ = load_checkpoint(path, "sequence_model")
        model = cls(ModelConfig.from_dict(cfg_dict))
        for name, p in model.params():
            if name not in tensors:
                raise DataError(f"checkpoint missing tensor {name!r}")
            if tensors[name].shape != p.value.shape:
                raise DataError(
                    f"tensor {name!r} has shape {tensors[name].shape}, "
                    f"expected {p.value.shape}")
            p.value[...] = tensors[name]
        return model


# -- training ------------------------------------------------------------------


@dataclass
class ModelHyper:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 3e-3
    optimizer: str = "adam"
    seed: int = 0
    early_stop: bool = False
    early_stop_rel: float = 0.005
    early_stop_patience: int = 5


@dataclass
class TrainingTrace:
    train_losses: list = field(default_factory=list)
    eval_losses: list = field(default_factory=list)
    scored_tokens: int = 0
    stopped_early: bool = False

    def write(self, path) -> None:
        """One `epoch train_loss eval_loss` record per epoch; eval may be nan."""
        with open(path, "w", encoding="utf-8") as fh:
            for i, train in enumerate(self.train_losses):
                ev = self.eval_losses[i] if i < len(self.eval_losses) else float("nan")
                fh.write(f"{i} {train!r} {ev!r}\n")


def _bucket_batches(seqs, indices, batch_size):
    """Group same-length sequences into batches, preserving encounter order."""
    buckets: dict[int, list[int]] = {}
    for i in indices:
        buckets.setdefault(seqs[i].n_items, []).append(i)
    batches = []
    for n_items in sorted(buckets):
        idx = buckets[n_items]
        for s in range(0, len(idx), batch_size):
            batches.append(idx[s:s + batch_size])
    return batches


def _stack(seqs, idx):
    tokens = np.stack([seqs[i].tokens.reshape(-1) for i in idx])
    feats = np.stack([seqs[i].features.reshape(
        -1, seqs[i].features.shape[-1]) for i in idx])
    return tokens, feats


def evaluate_loss(model: SequenceModel, dataset: list[TokenizedSequence],
                  batch_size: int = 64) -> float:
    """Mean NLL over all scored positions of the dataset."""
    seqs = [s.truncated(model.config.max_items) for s in dataset]
    total, count = 0.0, 0
    for batch in _bucket_batches(seqs, range(len(seqs)), batch_size):
        tokens, feats = _stack(seqs, batch)
        loss, logp = model.ar_loss(tokens, feats)
        total += -logp.sum()
        count += logp.size
    if count == 0:
        raise DataError("no scored positions in evaluation dataset")
    return float(total / count)


def train_model(dataset: list[TokenizedSequence], model: SequenceModel,
                hyper: ModelHyper,
                eval_dataset: list[TokenizedSequence] | None = None
                ) -> tuple[SequenceModel, TrainingTrace]:
    """Minimize mean ar_loss by gradient descent over bucketed minibatches.

    Returns the model and per-epoch train/eval loss traces; training loss per
    epoch is the scored-position-weighted mean of batch losses.
    """
    if not dataset:
        raise DataError("empty training dataset")
    seqs = [s.truncated(model.config.max_items) for s in dataset]
    for s in seqs:
        if s.n_items < 2:
            raise DataError(
                f"sequence {s.user_id!r} has fewer than 2 items")
    rng = np.random.default_rng(hyper.seed)
    opt = nn.make_optimizer(hyper.optimizer, hyper.lr)
    params = list(model.params())
    trace = TrainingTrace()
    best_eval = math.inf
    stall = 0
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(seqs))
        total, count = 0.0, 0
        for batch in _bucket_batches(seqs, order, hyper.batch_size):
            tokens, feats = _stack(seqs, batch)
            nn.zero_grads(params)
            loss, logp = model.ar_loss(tokens, feats, need_grad=True)
            if not math.isfinite(loss):
                raise DivergenceError(
                    f"non-finite training loss at epoch {epoch}")
            opt.step(params)
            for name, prm in params:
                if not np.all(np.isfinite(prm.value)):
                    raise DivergenceError(
                        f"non-finite parameter {name!r} at epoch {epoch}")
            total += loss * logp.size
            count += logp.size
            trace.scored_tokens += logp.size
        trace.train_losses.append(total / count)
        if eval_dataset is not None:
            ev = evaluate_loss(model, eval_dataset, hyper.batch_size)
            trace.eval_losses.append(ev)
            if hyper.early_stop:
                if ev < best_eval * (1.0 - hyper.early_stop_rel):
                    best_eval = ev
                    stall = 0
                else:
                    best_eval = min(best_eval, ev)
                    stall += 1
                    if stall >= hyper.early_stop_patience:
                        trace.stopped_early = True
                        break
    return model, trace
