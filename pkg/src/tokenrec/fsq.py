"""Finite scalar quantization of item embeddings into fixed-length token ids.

An item embedding of dimension ``embedding_dim`` is partitioned into
``num_subvectors`` contiguous slices. Each slice is projected down to
``code_dim`` values, squashed through a sigmoid, scaled per dimension by
``levels[j] - 1``, and rounded, giving a digit vector. Digits encode to a
single token id by mixed radix (digit 0 most significant), so the implicit
codebook has ``prod(levels)`` entries and needs no learned code vectors.

Training optimizes the down/up projections and a small bidirectional
reconstruction decoder under a mean-absolute reconstruction loss, with the
straight-through estimator carrying gradients past the rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .embeddings import EmbeddingCatalog
from .errors import ConfigError, DataError, DivergenceError
from .serialize import load_checkpoint, save_checkpoint


@dataclass(frozen=True)
class FsqConfig:
    embedding_dim: int
    num_subvectors: int = 4
    levels: tuple[int, ...] = (8, 8, 8, 6, 5)
    decoder_width: int = 64
    decoder_layers: int = 2
    decoder_heads: int = 4

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(int(v) for v in self.levels))
        if self.embedding_dim <= 0 or self.num_subvectors <= 0:
            raise ConfigError("dimensions must be positive")
        if self.embedding_dim % self.num_subvectors != 0:
            raise ConfigError(
                f"embedding_dim {self.embedding_dim} not divisible by "
                f"num_subvectors {self.num_subvectors}")
        if any(v < 2 for v in self.levels):
            raise ConfigError(f"all levels must be >= 2, got {self.levels}")

    @property
    def code_dim(self) -> int:
        return len(self.levels)

    @property
    def sub_dim(self) -> int:
        return self.embedding_dim // self.num_subvectors

    @property
    def codebook_size(self) -> int:
        return int(np.prod(self.levels))

    def to_dict(self) -> dict:
        return {"embedding_dim": self.embedding_dim,
                "num_subvectors": self.num_subvectors,
                "levels": list(self.levels),
                "decoder_width": self.decoder_width,
                "decoder_layers": self.decoder_layers,
                "decoder_heads": self.decoder_heads}

    @classmethod
    def from_dict(cls, d: dict) -> "FsqConfig":
        return cls(embedding_dim=d["embedding_dim"],
                   num_subvectors=d["num_subvectors"],
                   levels=tuple(d["levels"]),
                   decoder_width=d["decoder_width"],
                   decoder_layers=d["decoder_layers"],
                   decoder_heads=d["decoder_heads"])


@dataclass(frozen=True)
class ItemTokenSequence:
    item_id: str
    tokens: tuple[int, ...]


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round half away from zero (np.round would round half to even)."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


# --- mixed-radix token codec -------------------------------------------------

def _radix_weights(levels: tuple[int, ...]) -> np.ndarray:
    w = np.ones(len(levels), dtype=np.int64)
    for j in range(len(levels) - 2, -1, -1):
        w[j] = w[j + 1] * levels[j + 1]
    return w


def digits_to_token(digits, config: FsqConfig) -> int | np.ndarray:
    """Mixed-radix encode, digit 0 most significant. Bijective on the digit box.

    Accepts a single digit vector or an array (..., code_dim); returns int64.
    """
    d = np.asarray(digits, dtype=np.int64)
    if d.shape[-1] != config.code_dim:
        raise DataError(
            f"expected {config.code_dim} digits, got {d.shape[-1]}")
    levels = np.array(config.levels, dtype=np.int64)
    if np.any(d < 0) or np.any(d >= levels):
        raise DataError("digit out of range for configured levels")
    tokens = d @ _radix_weights(config.levels)
    return int(tokens) if tokens.ndim == 0 else tokens


def token_to_digits(token, config: FsqConfig) -> np.ndarray:
    """Exact inverse of digits_to_token."""
    t = np.asarray(token, dtype=np.int64)
    if np.any(t < 0) or np.any(t >= config.codebook_size):
        raise DataError(
            f"token out of range [0, {config.codebook_size})")
    digits = np.empty(t.shape + (config.code_dim,), dtype=np.int64)
    rest = t.copy()
    for j in range(config.code_dim - 1, -1, -1):
        digits[..., j] = rest % config.levels[j]
        rest //= config.levels[j]
    return digits


# --- quantizer ---------------------------------------------------------------

def partition(vector: np.ndarray, config: FsqConfig) -> np.ndarray:
    """Split (..., embedding_dim) into (..., num_subvectors, sub_dim) slices."""
    v = np.asarray(vector, dtype=np.float64)
    if v.shape[-1] != config.embedding_dim:
        raise DataError(
            f"vector dimension {v.shape[-1]} does not match embedding_dim "
            f"{config.embedding_dim}")
    return v.reshape(v.shape[:-1] + (config.num_subvectors, config.sub_dim))


def linear_from(weight: np.ndarray) -> nn.Linear:
    """A Linear initialized to an exact weight matrix with zero bias."""
    lin = nn.Linear(weight.shape[0], weight.shape[1],
                    np.random.default_rng(0), scale=0.0)
    lin.W.value[...] = weight
    return lin


class ReconstructionDecoder:
    """Bidirectional transformer over the token slots, near-identity at init.

    Input/output per slot is ``sub_dim``-dimensional; internally the slots are
    lifted to ``width`` with a semi-orthogonal projection whose transpose maps
    back down, and residual blocks start with zeroed output weights, so the
    initial decoder is approximately the identity.
    """

    def __init__(self, config: FsqConfig, rng: np.random.Generator):
        w = config.decoder_width
        if w < config.sub_dim:
            raise ConfigError(
                f"decoder_width {w} smaller than sub_dim {config.sub_dim}")
        a = rng.normal(size=(w, config.sub_dim))
        q, _ = np.linalg.qr(a)  # (w, sub_dim), orthonormal columns
        self.in_proj = linear_from(q.T)
        self.pos = nn.Param(rng.normal(0.0, 0.01, size=(config.num_subvectors, w)))
        self.blocks = [nn.TransformerBlock(w, config.decoder_heads, rng,
                                           out_scale=0.0)
                       for _ in range(config.decoder_layers)]
        self.out_proj = linear_from(q)
        self._mask = np.ones((config.num_subvectors, config.num_subvectors),
                             dtype=bool)

    def params(self, prefix=""):
        yield from self.in_proj.params(prefix + "in_proj.")
        yield prefix + "pos", self.pos
        for i, blk in enumerate(self.blocks):
            yield from blk.params(f"{prefix}block{i}.")
        yield from self.out_proj.params(prefix + "out_proj.")

    def forward(self, slots, need_cache=False):
        """slots: (B, K, sub_dim) -> (B, K, sub_dim)."""
        h, c_in = self.in_proj.forward(slots, need_cache)
        h = h + self.pos.value
        block_caches = []
        for blk in self.blocks:
            h, c = blk.forward(h, self._mask, need_cache)
            block_caches.append(c)
        y, c_out = self.out_proj.forward(h, need_cache)
        return y, ((c_in, block_caches, c_out) if need_cache else None)

    def backward(self, dy, cache):
        c_in, block_caches, c_out = cache
        dh = self.out_proj.backward(dy, c_out)
        for blk, c in zip(reversed(self.blocks), reversed(block_caches)):
            dh = blk.backward(dh, c)
        self.pos.grad += dh.sum(axis=0) if dh.ndim == 3 else dh
        return self.in_proj.backward(dh, c_in)


class FsqCodebook:
    """Learned projections plus the implicit mixed-radix codebook."""

    def __init__(self, config: FsqConfig, rng: np.random.Generator,
                 input_rms: float = 1.0):
        self.config = config
        # scale chosen so pre-activations start with roughly unit variance
        in_scale = 1.0 / max(input_rms * math.sqrt(config.sub_dim), 1e-12)
        self.proj_in = nn.Linear(config.sub_dim, config.code_dim, rng,
                                 scale=in_scale)
        self.proj_out = nn.Linear(config.code_dim, config.sub_dim, rng,
                                  scale=0.1 / math.sqrt(config.code_dim))
        self.decoder = ReconstructionDecoder(config, rng)
        self._scale = np.array(config.levels, dtype=np.float64) - 1.0

    def params(self, prefix=""):
        yield from self.proj_in.params(prefix + "proj_in.")
        yield from self.proj_out.params(prefix + "proj_out.")
        yield from self.decoder.params(prefix + "decoder.")

    # -- quantization ---------------------------------------------------------

    def transform_in(self, subs: np.ndarray) -> np.ndarray:
        """Pre-activation z = W_in @ sub + b for (..., sub_dim) inputs."""
        z, _ = self.proj_in.forward(np.asarray(subs, dtype=np.float64))
        nn.check_finite(z, "quantizer pre-activation")
        return z

    def quantize_digits(self, subs: np.ndarray) -> np.ndarray:
        """Digits round((L_j - 1) * sigmoid(z_j)), each in [0, levels[j})."""
        u = self._scale * nn.sigmoid(self.transform_in(subs))
        return round_half_away(u).astype(np.int64)

    def ste_forward(self, subs: np.ndarray, need_cache=False,
                    code_offset: np.ndarray | None = None):
        """Quantized codes with the straight-through gradient contract.

        Forward value is the rounded code; the cached backward path
        differentiates the smooth surrogate (L-1)*sigmoid(z) as if no rounding
        occurred. ``code_offset`` replaces the rounding with a fixed additive
        offset (the rounding-free twin used by gradient tests).
        """
        z, c_in = self.proj_in.forward(np.asarray(subs, np.float64), need_cache)
        s = nn.sigmoid(z)
        u = self._scale * s
        if code_offset is None:
            codes = round_half_away(u)
        else:
            codes = u + code_offset
        cache = ((c_in, s) if need_cache else None)
        return codes, cache

    def ste_backward(self, dcodes, cache):
        c_in, s = cache
        dz = dcodes * self._scale * s * (1.0 - s)
        return self.proj_in.backward(dz, c_in)

    def tokenize(self, vector: np.ndarray) -> np.ndarray:
        """Token ids for one embedding (or a batch): (..., num_subvectors)."""
        digits = self.quantize_digits(partition(vector, self.config))
        return digits_to_token(digits, self.config)

    def tokenize_catalog(self, catalog: EmbeddingCatalog) -> list[ItemTokenSequence]:
        if catalog.dim != self.config.embedding_dim:
            raise ConfigError(
                f"catalog dimension {catalog.dim} does not match codebook "
                f"embedding_dim {self.config.embedding_dim}")
        tokens = self.tokenize(catalog.matrix())
        return [ItemTokenSequence(item_id, tuple(int(t) for t in row))
                for item_id, row in zip(catalog.item_ids(), tokens)]

    # -- reconstruction -------------------------------------------------------

    def reconstruct(self, codes: np.ndarray) -> np.ndarray:
        """Map (..., num_subvectors, code_dim) codes back to embeddings."""
        codes = np.asarray(codes, dtype=np.float64)
        if codes.shape[-2:] != (self.config.num_subvectors, self.config.code_dim):
            raise DataError(
                f"expected codes of shape (..., {self.config.num_subvectors}, "
                f"{self.config.code_dim}), got {codes.shape}")
        squeeze = codes.ndim == 2
        if squeeze:
            codes = codes[None]
        slots, _ = self.proj_out.forward(codes)
        out, _ = self.decoder.forward(slots)
        recon = out.reshape(out.shape[0], self.config.embedding_dim)
        return recon[0] if squeeze else recon

    def reconstruct_tokens(self, tokens) -> np.ndarray:
        return self.reconstruct(token_to_digits(tokens, self.config))

    def loss_and_grad(self, batch: np.ndarray, need_grad=True,
                      code_offset: np.ndarray | None = None) -> float:
        """Mean absolute reconstruction error over a (B, embedding_dim) batch.

        With need_grad, accumulates parameter gradients through the decoder,
        the output projection, and (via the straight-through path) the input
        projection.
        """
        batch = np.asarray(batch, dtype=np.float64)
        subs = partition(batch, self.config)
        codes, c_ste = self.ste_forward(subs, need_cache=need_grad,
                                        code_offset=code_offset)
        slots, c_out = self.proj_out.forward(codes, need_cache=need_grad)
        dec_out, c_dec = self.decoder.forward(slots, need_cache=need_grad)
        recon = dec_out.reshape(batch.shape)
        resid = recon - batch
        loss = float(np.abs(resid).mean())
        if need_grad:
            drecon = np.sign(resid) / resid.size
            ddec = drecon.reshape(dec_out.shape)
            dslots = self.decoder.backward(ddec, c_dec)
            dcodes = self.proj_out.backward(dslots, c_out)
            self.ste_backward(dcodes, c_ste)
        return loss

    # -- persistence ----------------------------------------------------------

    def save(self, path, dtype="f8", meta=None) -> None:
        save_checkpoint(path, "fsq_codebook", self.config.to_dict(),
                        [(n, p.value) for n, p in self.params()],
                        dtype=dtype, meta=meta)

    @classmethod
    def load(cls, path) -> "FsqCodebook":
        _, cfg_dict, tensors, _ = load_checkpoint(path, "fsq_codebook")
        config = FsqConfig.from_dict(cfg_dict)
        cb = cls(config, np.random.default_rng(0))
        for name, p in cb.params():
            if name not in tensors:
                raise DataError(f"checkpoint missing tensor {name!r}")
            if tensors[name].shape != p.value.shape:
                raise DataError(
                    f"tensor {name!r} has shape {tensors[name].shape}, "
                    f"expected {p.value.shape}")
            p.value[...] = tensors[name]
        return cb


# --- training ----------------------------------------------------------------

@dataclass
class QuantizerHyper:
    epochs: int = 200
    batch_size: int = 32
    lr: float = 0.03
    optimizer: str = "sgd"
    seed: int = 0


def train_quantizer(catalog: EmbeddingCatalog, config: FsqConfig,
                    hyper: QuantizerHyper) -> tuple[FsqCodebook, list[float]]:
    """Fit the quantizer by SGD on the straight-through reconstruction loss.

    Returns the codebook and a loss trace whose entry 0 is the pre-training
    loss over the full catalog, followed by one full-catalog loss per epoch.
    """
    if len(catalog) == 0:
        raise DataError("cannot train on an empty catalog")
    if catalog.dim != config.embedding_dim:
        raise ConfigError(
            f"catalog dimension {catalog.dim} does not match config "
            f"embedding_dim {config.embedding_dim}")
    rng = np.random.default_rng(hyper.seed)
    data = catalog.matrix()
    input_rms = float(np.sqrt(np.mean(data ** 2)))
    codebook = FsqCodebook(config, rng, input_rms=input_rms)
    opt = nn.make_optimizer(hyper.optimizer, hyper.lr)
    params = list(codebook.params())

    trace = [codebook.loss_and_grad(data, need_grad=False)]
    n = len(catalog)
    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        for start in range(0, n, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            nn.zero_grads(params)
            loss = codebook.loss_and_grad(data[idx])
            if not math.isfinite(loss):
                raise DivergenceError(
                    f"non-finite quantizer loss at epoch {epoch}")
            opt.step(params)
        epoch_loss = codebook.loss_and_grad(data, need_grad=False)
        if not math.isfinite(epoch_loss):
            raise DivergenceError(
                f"non-finite quantizer loss after epoch {epoch}")
        trace.append(epoch_loss)
    return codebook, trace


# --- token catalog file ------------------------------------------------------

def write_token_catalog(sequences: list[ItemTokenSequence], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for seq in sequences:
            fh.write(seq.item_id + " " + " ".join(str(t) for t in seq.tokens)
                     + "\n")


def load_token_catalog(path, config: FsqConfig) -> list[ItemTokenSequence]:
    out = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for row, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            fields = line.split()
            item_id = fields[0]
            if item_id in seen:
                raise DataError(f"row {row}: duplicate item_id {item_id!r}")
            seen.add(item_id)
            if len(fields) - 1 != config.num_subvectors:
                raise DataError(
                    f"row {row}: expected {config.num_subvectors} tokens, "
                    f"got {len(fields) - 1}")
            try:
                tokens = tuple(int(t) for t in fields[1:])
            except ValueError:
                raise DataError(f"row {row}: malformed token") from None
            if any(t < 0 or t >= config.codebook_size for t in tokens):
                raise DataError(f"row {row}: token out of range")
            out.append(ItemTokenSequence(item_id, tokens))
    return out
