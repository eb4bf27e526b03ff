"""Treatment effect summaries from counterfactual posterior paths.

Every draw of the untreated path, subtracted from what was observed,
gives one draw of the pointwise effect trajectory. All reported numbers
are reductions of that draw matrix: posterior means, spread, credible
bands from empirical percentiles, cumulative and per-period averages,
and multiplicative effects for outcomes modeled on the log scale.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .dataset import fmt_float
from .hmc import CounterfactualSamples

UNCERTAINTY_TIERS = (
    "function",
    "function+noise",
    "function+loadings",
    "function+loadings+noise",
)


def credible_band(draws: np.ndarray, level: float = 0.95):
    """Equal-tailed empirical band across the draw axis (axis 0)."""
    if not 0 < level < 1:
        raise ValueError("level must be inside (0, 1)")
    half = 100.0 * (1.0 - level) / 2.0
    lower = np.percentile(draws, half, axis=0)
    upper = np.percentile(draws, 100.0 - half, axis=0)
    return lower, upper


class CausalEffects:
    """Effect draws for a treated series over the post-period horizon.

    Parameters
    ----------
    counterfactual : CounterfactualSamples or ndarray
        Posterior draws of the untreated outcome, one row per draw.
    y_observed : ndarray
        Observed treated outcomes over the same horizon.
    times : ndarray, optional
        Horizon time stamps; taken from the counterfactual object when
        available.
    tier : str
        Which uncertainty sources the draws integrate over.
    """

    def __init__(self, counterfactual, y_observed, times=None,
                 tier: str = "function+loadings"):
        if isinstance(counterfactual, CounterfactualSamples):
            samples = counterfactual.samples
            if times is None:
                times = counterfactual.times
        else:
            samples = np.atleast_2d(np.asarray(counterfactual, dtype=float))
        y_observed = np.asarray(y_observed, dtype=float)
        if samples.ndim != 2:
            raise ValueError("counterfactual draws must be a matrix")
        if y_observed.shape != (samples.shape[1],):
            raise ValueError("observed outcomes do not match the horizon")
        if samples.shape[0] < 2:
            raise ValueError("need at least two draws to summarize spread")
        if tier not in UNCERTAINTY_TIERS:
            raise ValueError(f"unknown uncertainty tier {tier!r}")
        self.times = (np.arange(1, samples.shape[1] + 1, dtype=float)
                      if times is None else np.asarray(times, dtype=float))
        if self.times.shape != (samples.shape[1],):
            raise ValueError("times do not match the horizon")
        self.tier = tier
        self.y_observed = y_observed
        self.delta = y_observed[None, :] - samples

    @property
    def n_draws(self) -> int:
        return self.delta.shape[0]

    @property
    def horizon(self) -> int:
        return self.delta.shape[1]

    @property
    def tau(self) -> np.ndarray:
        """Posterior mean pointwise effect at each horizon step."""
        return self.delta.mean(axis=0)

    @property
    def rho2(self) -> np.ndarray:
        """Posterior variance of the pointwise effect (unbiased)."""
        return self.delta.var(axis=0, ddof=1)

    def pointwise_band(self, level: float = 0.95):
        return credible_band(self.delta, level)

    def cumulative_draws(self) -> np.ndarray:
        """Running totals of the effect, one trajectory per draw."""
        return np.cumsum(self.delta, axis=1)

    def total_draws(self) -> np.ndarray:
        return self.delta.sum(axis=1)

    def average_draws(self) -> np.ndarray:
        return self.total_draws() / self.horizon

    def multiplicative_draws(self) -> np.ndarray:
        """Ratio-scale effects when the outcome lives on the log scale."""
        return np.exp(self.delta)

    def multiplicative_closed_form(self) -> np.ndarray:
        """Ratio-scale posterior mean assuming per-time normal effects."""
        return np.exp(self.tau + 0.5 * self.rho2)

    def summary(self, level: float = 0.95) -> dict:
        lo, hi = self.pointwise_band(level)
        cum = self.cumulative_draws()
        cum_lo, cum_hi = credible_band(cum, level)
        total = self.total_draws()
        total_lo, total_hi = credible_band(total[:, None], level)
        avg = self.average_draws()
        avg_lo, avg_hi = credible_band(avg[:, None], level)
        mult = self.multiplicative_draws()
        mult_lo, mult_hi = credible_band(mult, level)
        return {
            "level": level,
            "tier": self.tier,
            "n_draws": self.n_draws,
            "horizon": self.horizon,
            "times": self.times,
            "tau": self.tau,
            "rho2": self.rho2,
            "pointwise_lower": lo,
            "pointwise_upper": hi,
            "cumulative_mean": cum.mean(axis=0),
            "cumulative_lower": cum_lo,
            "cumulative_upper": cum_hi,
            "total_mean": float(total.mean()),
            "total_lower": float(total_lo[0]),
            "total_upper": float(total_hi[0]),
            "average_mean": float(avg.mean()),
            "average_lower": float(avg_lo[0]),
            "average_upper": float(avg_hi[0]),
            "multiplicative_mean": mult.mean(axis=0),
            "multiplicative_lower": mult_lo,
            "multiplicative_upper": mult_hi,
            "multiplicative_closed_form": self.multiplicative_closed_form(),
        }

    def report(self, level: float = 0.95) -> "CausalReport":
        return CausalReport(self.summary(level))


@dataclass
class CausalReport:
    """Serializable view of the effect summaries."""

    summary: dict = field(repr=False)

    _SCALARS = ("level", "tier", "n_draws", "horizon",
                "total_mean", "total_lower", "total_upper",
                "average_mean", "average_lower", "average_upper")

    def to_json_dict(self) -> dict:
        out = {k: self.summary[k] for k in self._SCALARS}
        return out

    def write(self, out_dir: str) -> dict:
        """Write effects.json plus per-horizon CSV curves; returns paths."""
        os.makedirs(out_dir, exist_ok=True)
        s = self.summary
        paths = {}

        paths["effects"] = os.path.join(out_dir, "effects.json")
        with open(paths["effects"], "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

        def curve(name, columns):
            path = os.path.join(out_dir, name)
            with open(path, "w") as fh:
                fh.write("time," + ",".join(columns) + "\n")
                for i, t in enumerate(s["times"]):
                    row = [fmt_float(t)] + [fmt_float(s[c][i]) for c in columns]
                    fh.write(",".join(row) + "\n")
            return path

        paths["pointwise"] = curve("pointwise.csv",
                                   ["tau", "rho2", "pointwise_lower", "pointwise_upper"])
        paths["cumulative"] = curve("cumulative.csv",
                                    ["cumulative_mean", "cumulative_lower",
                                     "cumulative_upper"])
        paths["multiplicative"] = curve("multiplicative.csv",
                                        ["multiplicative_mean", "multiplicative_lower",
                                         "multiplicative_upper",
                                         "multiplicative_closed_form"])
        return paths
