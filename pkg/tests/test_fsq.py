import itertools
import math

import numpy as np
import pytest

from tokenrec import nn
from tokenrec.embeddings import EmbeddingCatalog, ItemEmbedding
from tokenrec.errors import ConfigError, DataError, DivergenceError
from tokenrec.fsq import (FsqCodebook, FsqConfig, ItemTokenSequence,
                          QuantizerHyper, digits_to_token, load_token_catalog,
                          partition, round_half_away, token_to_digits,
                          train_quantizer, write_token_catalog)
from conftest import finite_diff_grads, relative_grad_error

PAPER_LEVELS = (8, 8, 8, 6, 5)


def paper_config(dim=64, k=4):
    return FsqConfig(embedding_dim=dim, num_subvectors=k, levels=PAPER_LEVELS)


def tiny_config():
    return FsqConfig(embedding_dim=8, num_subvectors=2, levels=(4, 3),
                     decoder_width=8, decoder_layers=1, decoder_heads=2)


# --- config -------------------------------------------------------------


def test_config_codebook_size_paper_defaults():
    assert paper_config().codebook_size == 15360


def test_config_rejects_indivisible_dim():
    with pytest.raises(ConfigError):
        FsqConfig(embedding_dim=6, num_subvectors=4, levels=(4, 4))


def test_config_rejects_level_below_two():
    with pytest.raises(ConfigError):
        FsqConfig(embedding_dim=8, num_subvectors=2, levels=(4, 1))


# --- codec --------------------------------------------------------------


def test_codec_zero_and_max():
    cfg = paper_config()
    assert digits_to_token([0, 0, 0, 0, 0], cfg) == 0
    assert digits_to_token([7, 7, 7, 5, 4], cfg) == 15359


def test_codec_most_significant_digit_weight():
    # oracle: position of [1,0,0,0,0] in lexicographic enumeration of digits
    cfg = paper_config()
    enumerated = list(itertools.product(*[range(v) for v in PAPER_LEVELS]))
    assert enumerated.index((1, 0, 0, 0, 0)) == 1920
    assert digits_to_token([1, 0, 0, 0, 0], cfg) == 1920


def test_codec_matches_lexicographic_enumeration():
    cfg = FsqConfig(embedding_dim=4, num_subvectors=2, levels=(3, 4, 2))
    enumerated = list(itertools.product(*[range(v) for v in (3, 4, 2)]))
    for expected, digits in enumerate(enumerated):
        assert digits_to_token(list(digits), cfg) == expected
        assert tuple(token_to_digits(expected, cfg)) == digits


def test_codec_exhaustive_round_trip_paper_vocab():
    cfg = paper_config()
    tokens = np.arange(cfg.codebook_size)
    digits = token_to_digits(tokens, cfg)
    assert np.array_equal(digits_to_token(digits, cfg), tokens)


def test_codec_rejects_out_of_range():
    cfg = paper_config()
    with pytest.raises(DataError):
        token_to_digits(15360, cfg)
    with pytest.raises(DataError):
        digits_to_token([8, 0, 0, 0, 0], cfg)
    with pytest.raises(DataError):
        digits_to_token([-1, 0, 0, 0, 0], cfg)


def test_round_half_away():
    assert round_half_away(np.array([3.5]))[0] == 4.0
    assert round_half_away(np.array([2.5]))[0] == 3.0
    assert round_half_away(np.array([2.49]))[0] == 2.0


# --- partition ----------------------------------------------------------


def test_partition_contiguous_slices():
    cfg = FsqConfig(embedding_dim=8, num_subvectors=4, levels=(4, 4))
    subs = partition(np.arange(1.0, 9.0), cfg)
    assert subs.shape == (4, 2)
    assert np.array_equal(subs[0], [1.0, 2.0])
    assert np.array_equal(subs[3], [7.0, 8.0])
    assert np.array_equal(subs.reshape(-1), np.arange(1.0, 9.0))


def test_partition_identity_for_single_subvector():
    cfg = FsqConfig(embedding_dim=4, num_subvectors=1, levels=(4, 4))
    v = np.array([1.0, 2.0, 3.0, 4.0])
    assert np.array_equal(partition(v, cfg)[0], v)


def test_partition_rejects_wrong_dim():
    cfg = FsqConfig(embedding_dim=8, num_subvectors=4, levels=(4, 4))
    with pytest.raises(DataError):
        partition(np.zeros(6), cfg)


# --- quantization -------------------------------------------------------


def _codebook_with_identity_proj(cfg):
    """proj_in = identity-ish map so pre-activations are controllable."""
    cb = FsqCodebook(cfg, np.random.default_rng(0))
    cb.proj_in.W.value[...] = 0.0
    cb.proj_in.b.value[...] = 0.0
    for j in range(min(cfg.sub_dim, cfg.code_dim)):
        cb.proj_in.W.value[j, j] = 1.0
    return cb


def test_quantize_midpoint_rounds_away_from_zero():
    # sigmoid(0) = 0.5, levels 8 -> 7 * 0.5 = 3.5 -> digit 4
    cfg = FsqConfig(embedding_dim=2, num_subvectors=1, levels=(8, 8),
                    decoder_width=4, decoder_heads=2)
    cb = _codebook_with_identity_proj(cfg)
    digits = cb.quantize_digits(np.zeros((1, 2)))
    assert digits.tolist() == [[4, 4]]


def test_quantize_saturates_to_bounds():
    cfg = FsqConfig(embedding_dim=2, num_subvectors=1, levels=(8, 5),
                    decoder_width=4, decoder_heads=2)
    cb = _codebook_with_identity_proj(cfg)
    low = cb.quantize_digits(np.array([[-50.0, -50.0]]))
    high = cb.quantize_digits(np.array([[50.0, 50.0]]))
    assert low.tolist() == [[0, 0]]
    assert high.tolist() == [[7, 4]]


def test_quantize_digits_within_bounds_for_any_finite_input(rng):
    cfg = tiny_config()
    cb = FsqCodebook(cfg, rng)
    subs = rng.normal(scale=100.0, size=(64, cfg.sub_dim))
    digits = cb.quantize_digits(subs)
    for j, lv in enumerate(cfg.levels):
        assert digits[:, j].min() >= 0
        assert digits[:, j].max() <= lv - 1


def test_quantize_monotone_in_preactivation(rng):
    """Raising one pre-activation component never lowers that digit."""
    cfg = FsqConfig(embedding_dim=2, num_subvectors=1, levels=(8, 6),
                    decoder_width=4, decoder_heads=2)
    cb = _codebook_with_identity_proj(cfg)
    for _ in range(200):
        z = rng.normal(scale=2.0, size=2)
        j = rng.integers(2)
        bumped = z.copy()
        bumped[j] += abs(rng.normal())
        d0 = cb.quantize_digits(z[None])[0]
        d1 = cb.quantize_digits(bumped[None])[0]
        assert d1[j] >= d0[j]
        other = 1 - j
        assert d1[other] == d0[other]


def test_ste_forward_equals_quantize(rng):
    cfg = tiny_config()
    cb = FsqCodebook(cfg, rng)
    subs = rng.normal(size=(5, cfg.num_subvectors, cfg.sub_dim))
    codes, _ = cb.ste_forward(subs)
    assert np.array_equal(codes, cb.quantize_digits(subs).astype(float))
    # forward values are integers
    assert np.array_equal(codes, np.round(codes))


def test_ste_gradient_matches_smooth_surrogate(rng):
    """Backward of the STE path equals finite differences of the no-rounding
    twin (L-1)*sigmoid(T_in(.)), checked through a scalar readout."""
    cfg = tiny_config()
    cb = FsqCodebook(cfg, rng)
    subs = rng.normal(size=(3, cfg.num_subvectors, cfg.sub_dim))
    r = rng.normal(size=(3, cfg.num_subvectors, cfg.code_dim))

    params = [("W", cb.proj_in.W), ("b", cb.proj_in.b)]
    nn.zero_grads(params)
    codes, cache = cb.ste_forward(subs, need_cache=True)
    cb.ste_backward(r, cache)

    def surrogate():
        z, _ = cb.proj_in.forward(subs)
        u = (np.array(cfg.levels) - 1.0) * nn.sigmoid(z)
        return float((u * r).sum())

    numeric = finite_diff_grads(params, surrogate)
    for name, p in params:
        assert relative_grad_error(p.grad, numeric[name]) < 1e-4


def test_ste_at_rounding_boundary_keeps_smooth_gradient():
    """Pre-round value exactly x.5: forward takes the tie-broken digit while
    the backward path stays the sigmoid surrogate."""
    cfg = FsqConfig(embedding_dim=1, num_subvectors=1, levels=(8,),
                    decoder_width=4, decoder_heads=2)
    cb = _codebook_with_identity_proj(cfg)
    sub = np.zeros((1, 1, 1))  # z = 0 -> 7*sigmoid(0) = 3.5 exactly
    codes, cache = cb.ste_forward(sub, need_cache=True)
    assert codes[0, 0, 0] == 4.0
    nn.zero_grads([("W", cb.proj_in.W)])
    cb.ste_backward(np.ones_like(codes), cache)
    assert abs(cb.proj_in.b.grad[0] - 7.0 * 0.25) < 1e-12


def test_tokenize_deterministic(rng):
    cfg = tiny_config()
    cb = FsqCodebook(cfg, rng)
    v = rng.normal(size=cfg.embedding_dim)
    assert np.array_equal(cb.tokenize(v), cb.tokenize(v.copy()))


def test_tokenize_stable_under_sub_rounding_perturbation(rng):
    """A perturbation too small to cross any rounding boundary leaves all
    tokens unchanged."""
    cfg = tiny_config()
    cb = FsqCodebook(cfg, rng)
    v = rng.normal(size=cfg.embedding_dim)
    base = cb.tokenize(v)
    for _ in range(20):
        eps = rng.normal(scale=1e-9, size=cfg.embedding_dim)
        assert np.array_equal(cb.tokenize(v + eps), base)


# --- reconstruction ------------------------------------------------------


def test_reconstruct_output_dimension(rng):
    cfg = tiny_config()
    cb = FsqCodebook(cfg, rng)
    codes = rng.integers(0, 3, size=(cfg.num_subvectors, cfg.code_dim))
    out = cb.reconstruct(codes)
    assert out.shape == (cfg.embedding_dim,)


def test_reconstruct_linear_toy_error_bounded_by_cell_radius():
    """Hand-built linear case: identity decoder, T_out inverting the
    linearized quantizer around sigmoid's midpoint.

    With z = W_in e kept inside [-1, 1], u = 3*sigmoid(z) deviates from its
    linearization 1.5 + 0.75 z by at most 0.1443*z^2 (max |sigmoid''| is
    0.09623), and rounding moves u by at most 0.5. Mapping back through the
    inverse linearization bounds the reconstruction error by
    ||W_in^-1||_inf * (4/3) * (0.5 + 0.1443) per component.
    """
    cfg = FsqConfig(embedding_dim=2, num_subvectors=1, levels=(4, 4),
                    decoder_width=4, decoder_heads=2)
    cb = FsqCodebook(cfg, np.random.default_rng(0))
    w_in = np.array([[2.0, 0.0], [0.0, 0.5]])
    cb.proj_in.W.value[...] = w_in.T
    cb.proj_in.b.value[...] = 0.0
    w_inv = np.linalg.inv(w_in)
    # T_out(y) = W_in^-1 * (4/3) * (y - 1.5): inverse of the linearization
    cb.proj_out.W.value[...] = (4.0 / 3.0) * w_inv.T
    cb.proj_out.b.value[...] = w_inv @ ((4.0 / 3.0) * np.array([-1.5, -1.5]))
    # identity decoder: zero position embeddings, residual blocks already
    # initialized with zeroed output weights, in/out projections orthogonal
    cb.decoder.pos.value[...] = 0.0

    rng = np.random.default_rng(5)
    bound = np.abs(w_inv).sum(axis=1).max() * (4.0 / 3.0) * (0.5 + 0.1443)
    for _ in range(50):
        e = rng.uniform(-0.4, 0.4, size=2)  # keeps |z| <= 1 for this W_in
        codes = cb.quantize_digits(partition(e, cfg)).astype(float)
        recon = cb.reconstruct(codes[None, :, :].reshape(1, 2))
        err = np.abs(recon - e).max()
        assert err <= bound, (e, recon, err, bound)


def test_reconstruct_rejects_bad_shape(rng):
    cfg = tiny_config()
    cb = FsqCodebook(cfg, rng)
    with pytest.raises(DataError):
        cb.reconstruct(np.zeros((3, cfg.code_dim + 1)))


# --- training ------------------------------------------------------------


def _synthetic_catalog(rng, n=40, dim=8):
    entries = [ItemEmbedding(f"it{i}", rng.normal(size=dim)) for i in range(n)]
    return EmbeddingCatalog(entries, dim)


def test_quantizer_loss_gradients_match_finite_differences(rng):
    """Full L1 objective: every parameter group against central differences
    of the rounding-free twin (codes frozen to their offset at the base
    point)."""
    cfg = tiny_config()
    batch = rng.normal(size=(4, cfg.embedding_dim))
    cb = FsqCodebook(cfg, rng, input_rms=1.0)
    # keep residuals away from the L1 kink so differences stay two-sided
    base_recon = cb.reconstruct(
        cb.quantize_digits(partition(batch, cfg)).astype(float))
    assert np.abs(base_recon - batch).min() > 1e-4

    subs = partition(batch, cfg)
    z, _ = cb.proj_in.forward(subs)
    u = (np.array(cfg.levels) - 1.0) * nn.sigmoid(z)
    offset = round_half_away(u) - u

    params = list(cb.params())
    nn.zero_grads(params)
    analytic_loss = cb.loss_and_grad(batch)

    numeric = finite_diff_grads(
        params,
        lambda: cb.loss_and_grad(batch, need_grad=False, code_offset=offset),
        h=1e-6)
    worst = 0.0
    for name, p in params:
        if np.linalg.norm(numeric[name]) == 0 and np.linalg.norm(p.grad) == 0:
            continue
        err = relative_grad_error(p.grad, numeric[name])
        worst = max(worst, err)
        assert err < 1e-3, f"{name}: rel err {err}"
    assert math.isfinite(analytic_loss)


def test_train_quantizer_reduces_loss(rng):
    """Sanity on a tiny unstructured toy; the 0.5x ratio target lives in the
    acceptance suite against the structured desk-scale corpus."""
    catalog = _synthetic_catalog(rng, n=60, dim=8)
    cfg = tiny_config()
    cb, trace = train_quantizer(catalog, cfg,
                                QuantizerHyper(epochs=60, lr=0.05, seed=3))
    assert trace[-1] < trace[0]
    assert trace[-1] <= 0.8 * trace[0]
    assert all(math.isfinite(v) for v in trace)


def test_train_quantizer_single_item_loss_floor(rng):
    """One item: the decoder can overfit, but quantization keeps the loss at
    a nonzero floor in general."""
    catalog = _synthetic_catalog(rng, n=1, dim=8)
    cfg = tiny_config()
    cb, trace = train_quantizer(catalog, cfg,
                                QuantizerHyper(epochs=150, lr=0.05, seed=0))
    assert trace[-1] < trace[0]
    assert trace[-1] >= 0.0


def test_train_quantizer_rejects_empty():
    cfg = tiny_config()
    with pytest.raises(DataError):
        train_quantizer(EmbeddingCatalog([], cfg.embedding_dim), cfg,
                        QuantizerHyper(epochs=1))


def test_train_quantizer_rejects_dim_mismatch(rng):
    cfg = tiny_config()
    with pytest.raises(ConfigError):
        train_quantizer(_synthetic_catalog(rng, dim=16), cfg,
                        QuantizerHyper(epochs=1))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_quantizer_divergence_aborts(rng):
    catalog = _synthetic_catalog(rng, n=20, dim=8)
    cfg = tiny_config()
    with pytest.raises(DivergenceError):
        train_quantizer(catalog, cfg, QuantizerHyper(epochs=5, lr=1e9, seed=0))


def test_codebook_checkpoint_round_trip(tmp_path, rng):
    catalog = _synthetic_catalog(rng, n=30, dim=8)
    cfg = tiny_config()
    cb, _ = train_quantizer(catalog, cfg, QuantizerHyper(epochs=5, seed=1))
    path = tmp_path / "codebook.ckpt"
    cb.save(path)
    reloaded = FsqCodebook.load(path)
    orig_tokens = cb.tokenize(catalog.matrix())
    back_tokens = reloaded.tokenize(catalog.matrix())
    assert np.array_equal(orig_tokens, back_tokens)
    for (n1, p1), (n2, p2) in zip(cb.params(), reloaded.params()):
        assert n1 == n2
        assert np.array_equal(p1.value, p2.value)


def test_codebook_checkpoint_float32_mode(tmp_path, rng):
    """Compact float32 checkpoints load back with the declared precision."""
    cfg = tiny_config()
    cb = FsqCodebook(cfg, rng, input_rms=1.0)
    path = tmp_path / "codebook_f4.ckpt"
    cb.save(path, dtype="f4")
    reloaded = FsqCodebook.load(path)
    for (n1, p1), (n2, p2) in zip(cb.params(), reloaded.params()):
        assert np.array_equal(p1.value.astype(np.float32),
                              p2.value.astype(np.float32))


def test_decoder_position_sensitivity_after_training(rng):
    """Permuting the input codes changes the reconstruction (slots are not
    interchangeable once position embeddings train)."""
    catalog = _synthetic_catalog(rng, n=40, dim=8)
    cfg = tiny_config()
    cb, _ = train_quantizer(catalog, cfg, QuantizerHyper(epochs=30, seed=2))
    codes = rng.integers(0, 3, size=(cfg.num_subvectors, cfg.code_dim)).astype(float)
    codes[1] = codes[0] + 1.0  # ensure slots differ so a swap changes input
    swapped = codes[::-1].copy()
    out_a = cb.reconstruct(codes)
    out_b = cb.reconstruct(swapped)
    assert not np.allclose(out_a, out_b)


# --- token catalog file ---------------------------------------------------


def test_token_catalog_round_trip(tmp_path):
    cfg = tiny_config()
    seqs = [ItemTokenSequence("a", (0, 5)), ItemTokenSequence("b", (11, 3))]
    path = tmp_path / "tokens.txt"
    write_token_catalog(seqs, path)
    assert load_token_catalog(path, cfg) == seqs


def test_token_catalog_rejects_bad_rows(tmp_path):
    cfg = tiny_config()
    path = tmp_path / "tokens.txt"
    path.write_text("a 0 5\nb 99 3\n")
    with pytest.raises(DataError, match="row 2"):
        load_token_catalog(path, cfg)
    path.write_text("a 0\n")
    with pytest.raises(DataError, match="expected 2 tokens"):
        load_token_catalog(path, cfg)
