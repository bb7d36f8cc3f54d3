"""Adaptive random-walk Metropolis-Hastings over a bounded box."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InvalidRate, NonConvergenceWarning


@dataclass
class MhSettings:
    iterations: int = 6000
    burn_in: int | None = None  # default: a quarter of the iterations
    sigma: np.ndarray | None = None  # per-parameter proposal variances
    adapt_interval: int = 100
    target_acceptance: float = 0.23
    hist_bins: int = 50
    thin: int = 1
    seed: int = 0
    sigma_bounds: tuple[float, float] = (1e-8, 1.0)

    def __post_init__(self):
        if self.burn_in is None:
            self.burn_in = self.iterations // 4
        if not (self.iterations > self.burn_in >= 0):
            raise ValueError("need iterations > burn_in >= 0")
        if self.sigma is not None and np.any(np.asarray(self.sigma) <= 0):
            raise ValueError("proposal variances must be positive")
        if self.adapt_interval < 1 or self.thin < 1 or self.hist_bins < 1:
            raise ValueError("adapt_interval, thin and hist_bins must be >= 1")


@dataclass
class ChainResult:
    samples: np.ndarray  # post-burn-in, thinned
    estimate: np.ndarray
    accepted: np.ndarray  # per-iteration acceptance flags
    log_likelihood: np.ndarray  # per-iteration current log-likelihood
    sigma: np.ndarray
    acceptance_windows: list[float] = field(default_factory=list)

    def acceptance_rate(self, last: int | None = None) -> float:
        a = self.accepted if last is None else self.accepted[-last:]
        return float(np.mean(a)) if len(a) else 0.0

    def diagnostics(self) -> dict:
        return {
            "acceptance_windows": [round(a, 4) for a in self.acceptance_windows],
            "acceptance_overall": self.acceptance_rate(),
            "acceptance_final_2000": self.acceptance_rate(2000),
            "final_sigma": self.sigma.tolist(),
            "log_likelihood_trace": self.log_likelihood[:: max(1, len(self.log_likelihood) // 500)].tolist(),
            "n_samples": int(len(self.samples)),
        }


def histogram_mode(samples: np.ndarray, lo: np.ndarray, hi: np.ndarray, bins: int = 50) -> np.ndarray:
    """Per-parameter center of the fullest histogram bin over ``[lo, hi]``.

    Ties go to the bin whose center is nearest the sample median.
    """
    samples = np.atleast_2d(samples)
    out = np.empty(samples.shape[1])
    for j in range(samples.shape[1]):
        counts, edges = np.histogram(samples[:, j], bins=bins, range=(lo[j], hi[j]))
        centers = 0.5 * (edges[:-1] + edges[1:])
        best = np.flatnonzero(counts == counts.max())
        med = np.median(samples[:, j])
        out[j] = centers[best[np.argmin(np.abs(centers[best] - med))]]
    return out


def run_chain(
    log_likelihood: Callable[[np.ndarray], float],
    start: np.ndarray,
    lo: np.ndarray,
    hi: np.ndarray,
    settings: MhSettings,
    valid: Callable[[np.ndarray], bool] | None = None,
) -> ChainResult:
    """Gaussian random-walk MH with a uniform prior on the box ``[lo, hi]``.

    Proposals outside the box or failing ``valid`` are rejected without a
    likelihood evaluation; an ``InvalidRate`` raised by the likelihood also
    counts as a rejection. Every ``adapt_interval`` iterations all proposal
    variances are multiplied by ``exp(2 (acc - target))``.
    """
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    x = np.asarray(start, float).copy()
    if np.any(x < lo) or np.any(x > hi) or (valid is not None and not valid(x)):
        raise ValueError("chain must start inside the prior support")
    dim = len(x)
    sigma = (
        np.asarray(settings.sigma, float).copy()
        if settings.sigma is not None
        else (0.01 * (hi - lo)) ** 2
    )
    s_lo, s_hi = settings.sigma_bounds
    rng = np.random.default_rng(settings.seed)
    ll = log_likelihood(x)
    if not math.isfinite(ll):
        raise ValueError("log-likelihood at the starting point is not finite")

    n = settings.iterations
    accepted = np.zeros(n, dtype=bool)
    ll_trace = np.empty(n)
    kept = []
    windows = []
    for it in range(n):
        prop = x + rng.standard_normal(dim) * np.sqrt(sigma)
        log_u = math.log(rng.random() + 1e-300)
        ok = bool(np.all(prop >= lo) and np.all(prop <= hi)) and (valid is None or valid(prop))
        if ok:
            try:
                ll_prop = log_likelihood(prop)
            except InvalidRate:
                ll_prop = -math.inf
            if log_u < ll_prop - ll:
                x, ll = prop, ll_prop
                accepted[it] = True
        ll_trace[it] = ll
        if it >= settings.burn_in and (it - settings.burn_in) % settings.thin == 0:
            kept.append(x.copy())
        if (it + 1) % settings.adapt_interval == 0:
            acc = float(np.mean(accepted[it + 1 - settings.adapt_interval : it + 1]))
            windows.append(acc)
            sigma = np.clip(sigma * math.exp(2.0 * (acc - settings.target_acceptance)), s_lo, s_hi)

    samples = np.array(kept)
    post = float(np.mean(accepted[settings.burn_in :]))
    if not (0.05 <= post <= 0.60):
        warnings.warn(f"post-burn-in acceptance {post:.3f} outside [0.05, 0.60]", NonConvergenceWarning, stacklevel=2)
    estimate = histogram_mode(samples, lo, hi, settings.hist_bins)
    return ChainResult(samples, estimate, accepted, ll_trace, sigma, windows)
