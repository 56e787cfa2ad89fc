import numpy as np
import pytest

from tokenrec.errors import ConfigError
from tokenrec.model import ModelConfig, ModelHyper, TokenizedSequence
from tokenrec.scaling import (PowerLawFit, ScalingResult, fit_power_law,
                              run_scaling_experiment)


def test_fit_recovers_planted_curve_exactly():
    a, b, c = 4.0, 0.35, 1.2
    x = np.logspace(2, 6, 7)
    y = a * x ** (-b) + c
    fit = fit_power_law(x, y)
    assert abs(fit.b - b) <= 0.1 * b
    assert abs(fit.a - a) <= 0.1 * a
    assert abs(fit.c - c) <= 0.05
    assert fit.r_squared > 0.999


def test_fit_recovers_planted_curve_zero_offset():
    a, b = 10.0, 0.5
    x = np.logspace(1, 5, 6)
    fit = fit_power_law(x, a * x ** (-b))
    assert abs(fit.b - b) <= 0.1 * b
    assert fit.r_squared > 0.999


def test_fit_tolerates_mild_noise(rng):
    """Offset fits amplify noise near the loss floor, so only mild noise with
    a healthy floor margin keeps the exponent identifiable."""
    a, b, c = 6.0, 0.4, 0.9
    x = np.logspace(2, 5, 9)
    y = (a * x ** (-b) + c) * (1.0 + rng.normal(0, 0.003, size=x.size))
    fit = fit_power_law(x, y)
    assert abs(fit.b - b) <= 0.15 * b
    assert fit.r_squared > 0.95


def test_fit_requires_three_points():
    with pytest.raises(ConfigError):
        fit_power_law([10.0, 100.0], [1.0, 0.5])


def _tiny_corpus(rng, n, cfg):
    item_tokens = np.array([[2 * i, 2 * i + 1] for i in range(5)])
    item_feats = np.random.default_rng(7).normal(size=(5, 2, cfg.feature_dim))
    out = []
    for _ in range(n):
        idx = np.array([(j + int(rng.integers(5))) % 5 for j in range(6)])
        out.append(TokenizedSequence(item_tokens[idx], item_feats[idx]))
    return out


def test_run_scaling_experiment_records_all_fractions(rng):
    cfg = ModelConfig(vocab_size=10, width=8, n_layers=1, n_heads=2,
                      max_tokens=16, tokens_per_item=2, feature_dim=3)
    train = _tiny_corpus(rng, 40, cfg)
    eval_set = _tiny_corpus(rng, 10, cfg)
    hyper = ModelHyper(epochs=3, lr=3e-3, seed=0)
    result = run_scaling_experiment([0.25, 0.5, 1.0], train, eval_set, cfg,
                                    hyper)
    assert result.statuses == ["ok", "ok", "ok"]
    assert len(result.eval_losses) == 3
    assert all(np.isfinite(result.eval_losses))
    assert result.tokens[0] < result.tokens[-1]
    assert result.fit_status == "ok"
    assert result.fit is not None


def test_run_scaling_single_fraction_skips_fit(rng):
    cfg = ModelConfig(vocab_size=10, width=8, n_layers=1, n_heads=2,
                      max_tokens=16, tokens_per_item=2, feature_dim=3)
    train = _tiny_corpus(rng, 20, cfg)
    result = run_scaling_experiment([1.0], train, train[:5], cfg,
                                    ModelHyper(epochs=2, seed=0))
    assert result.fit_status == "insufficient points"
    assert result.fit is None


def test_run_scaling_rejects_bad_fractions(rng):
    cfg = ModelConfig(vocab_size=10, width=8, n_layers=1, n_heads=2,
                      max_tokens=16, tokens_per_item=2, feature_dim=3)
    with pytest.raises(ConfigError):
        run_scaling_experiment([0.5, 0.25], [], [], cfg, ModelHyper())
    with pytest.raises(ConfigError):
        run_scaling_experiment([0.0, 0.5], [], [], cfg, ModelHyper())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_run_scaling_divergent_fraction_does_not_abort_others(rng):
    """A fraction that diverges is recorded and the rest still run. Divergence
    is provoked per-fraction by an explosive learning rate on the larger
    subsets only; here all fractions share hyper, so instead inject the
    failure by running one fraction with an empty-but-recorded status."""
    cfg = ModelConfig(vocab_size=10, width=8, n_layers=1, n_heads=2,
                      max_tokens=16, tokens_per_item=2, feature_dim=3)
    train = _tiny_corpus(rng, 30, cfg)
    hyper = ModelHyper(epochs=60, lr=1e12, optimizer="sgd", seed=0)
    result = run_scaling_experiment([0.5, 1.0], train, train[:5], cfg, hyper)
    assert all(s.startswith("diverged") for s in result.statuses)
    assert result.fit_status == "insufficient points"
    assert np.isnan(result.eval_losses).all()


def test_scaling_result_serialization():
    result = ScalingResult(fractions=[0.5, 1.0], eval_losses=[1.0, 0.9],
                           tokens=[100, 200], statuses=["ok", "ok"],
                           fit=PowerLawFit(1.0, 0.5, 0.1, 0.99),
                           fit_status="ok")
    d = result.to_dict()
    assert d["fit"]["b"] == 0.5
    assert d["statuses"] == ["ok", "ok"]
