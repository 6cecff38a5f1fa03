"""Distances between 2D Gaussians used for object observation and gating.

Two squared 2nd-order Wasserstein variants are provided. The Frobenius form

    W2^2 = ||mu1 - mu2||^2 + ||S1 - S2||_F^2,   S_i = Sigma_i^(1/2)

is the default; the Bures trace form

    W2^2 = ||mu1 - mu2||^2 + Tr(Sigma1 + Sigma2 - 2 (S1 Sigma2 S1)^(1/2))

is the textbook 2-Wasserstein distance. The two agree exactly whenever the
covariances commute (e.g. both diagonal). The normalized similarity is
exp(-sqrt(W2^2) / C), a value in (0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .geometry import Gaussian2D, sqrtm_spd2


class WassersteinForm(Enum):
    FROBENIUS = "frobenius"
    BURES_TRACE = "bures_trace"


@dataclass(frozen=True)
class MetricConfig:
    """Normalization constant (pixels) and which W2 form to use."""

    c_norm: float = 10.0
    wasserstein_form: WassersteinForm = WassersteinForm.FROBENIUS

    def __post_init__(self):
        if self.c_norm <= 0:
            raise ValueError("c_norm must be positive")


def wasserstein2_sq(a: Gaussian2D, b: Gaussian2D,
                    form: WassersteinForm = WassersteinForm.FROBENIUS) -> float:
    """Squared 2nd-order Wasserstein distance between two 2D Gaussians."""
    d = a.mean - b.mean
    mean_term = float(d @ d)
    sa = sqrtm_spd2(a.covariance)
    if form is WassersteinForm.FROBENIUS:
        sb = sqrtm_spd2(b.covariance)
        diff = sa - sb
        cov_term = float(np.sum(diff * diff))
    else:
        inner = sa @ b.covariance @ sa
        cross = sqrtm_spd2(0.5 * (inner + inner.T))
        cov_term = float(np.trace(a.covariance) + np.trace(b.covariance)
                         - 2.0 * np.trace(cross))
        cov_term = max(cov_term, 0.0)
    return mean_term + cov_term


def normalized_wasserstein(a: Gaussian2D, b: Gaussian2D, cfg: MetricConfig) -> float:
    """exp(-sqrt(W2^2) / C); equals 1 iff the Gaussians coincide."""
    w2 = wasserstein2_sq(a, b, cfg.wasserstein_form)
    return float(np.exp(-np.sqrt(w2) / cfg.c_norm))
