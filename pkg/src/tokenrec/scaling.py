"""Data-fraction scaling runs and power-law fitting of evaluation losses.

Each fraction trains a fresh model on a nested prefix of the shuffled
training set until the evaluation loss stabilizes; losses are then fit with
loss ~ a * tokens^(-b) + c by least squares on log-residuals. The x-axis
counts scored target tokens processed during training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import ConfigError, DivergenceError
from .model import (ModelConfig, ModelHyper, SequenceModel, TokenizedSequence,
                    train_model)


@dataclass
class PowerLawFit:
    a: float
    b: float
    c: float
    r_squared: float


@dataclass
class ScalingResult:
    fractions: list[float]
    eval_losses: list[float] = field(default_factory=list)
    tokens: list[int] = field(default_factory=list)
    statuses: list[str] = field(default_factory=list)
    fit: PowerLawFit | None = None
    fit_status: str = "not attempted"

    def ok_points(self):
        return [(t, l) for t, l, s in zip(self.tokens, self.eval_losses,
                                          self.statuses) if s == "ok"]

    def to_dict(self) -> dict:
        d = {"fractions": self.fractions, "eval_losses": self.eval_losses,
             "tokens": self.tokens, "statuses": self.statuses,
             "fit_status": self.fit_status}
        if self.fit is not None:
            d["fit"] = {"a": self.fit.a, "b": self.fit.b, "c": self.fit.c,
                        "r_squared": self.fit.r_squared}
        return d


def _loglinear_sse(c: float, x: np.ndarray, y: np.ndarray):
    """Best (log a, b) for fixed offset c, with the residual SSE in log space."""
    ly = np.log(y - c)
    lx = np.log(x)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    return float(resid @ resid), intercept, -slope, ly


def fit_power_law(tokens, losses) -> PowerLawFit:
    """Fit loss ~ a * tokens^(-b) + c; least squares on log(loss - c)."""
    x = np.asarray(tokens, dtype=np.float64)
    y = np.asarray(losses, dtype=np.float64)
    if x.size < 3:
        raise ConfigError("power-law fit needs at least 3 points")
    if np.any(x <= 0) or np.any(~np.isfinite(y)):
        raise ConfigError("tokens must be positive and losses finite")
    c_max = float(y.min()) * (1.0 - 1e-9)
    span = max(float(y.min()), 1e-12)
    lo = c_max - span

    def sse(c):
        return _loglinear_sse(c, x, y)[0]

    # the SSE landscape over c can hold several basins with a narrow well at
    # the true offset: coarse grid first, then refine the best bracket
    grid = np.linspace(lo, c_max, 513)
    sses = np.array([sse(c) for c in grid])
    i = int(np.argmin(sses))
    bracket = (grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)])
    best = minimize_scalar(sse, bounds=bracket, method="bounded",
                           options={"xatol": 1e-14 * max(span, 1.0)})
    c = float(min(best.x, c_max))
    if best.fun > sses[i]:
        c = float(grid[i])
    total_sse, log_a, b, ly = _loglinear_sse(c, x, y)
    sst = float(((ly - ly.mean()) ** 2).sum())
    r2 = 1.0 - total_sse / sst if sst > 0 else 1.0
    return PowerLawFit(a=math.exp(log_a), b=b, c=c, r_squared=r2)


def run_scaling_experiment(fractions, train_seqs: list[TokenizedSequence],
                           eval_seqs: list[TokenizedSequence],
                           config: ModelConfig, hyper: ModelHyper
                           ) -> ScalingResult:
    """One fresh training run per fraction; divergent fractions are recorded
    without aborting the rest."""
    fractions = [float(f) for f in fractions]
    if any(not 0.0 < f <= 1.0 for f in fractions):
        raise ConfigError("fractions must lie in (0, 1]")
    if sorted(fractions) != fractions:
        raise ConfigError("fractions must be strictly increasing")
    order = np.random.default_rng(hyper.seed).permutation(len(train_seqs))
    result = ScalingResult(fractions=fractions)
    for frac in fractions:
        n = max(1, math.floor(frac * len(train_seqs)))
        subset = [train_seqs[i] for i in order[:n]]
        model = SequenceModel(config, seed=hyper.seed)
        try:
            _, trace = train_model(subset, model, hyper, eval_dataset=eval_seqs)
            result.eval_losses.append(min(trace.eval_losses))
            result.tokens.append(trace.scored_tokens)
            result.statuses.append("ok")
        except DivergenceError as exc:
            result.eval_losses.append(float("nan"))
            result.tokens.append(0)
            result.statuses.append(f"diverged: {exc}")
    points = result.ok_points()
    if len(points) < 3:
        result.fit_status = "insufficient points"
    else:
        xs, ys = zip(*points)
        result.fit = fit_power_law(xs, ys)
        result.fit_status = "ok"
    return result
