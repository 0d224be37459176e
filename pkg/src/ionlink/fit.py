"""Weighted Levenberg-Marquardt fit of the conversion-efficiency law."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .photonics import ConversionCurve, ReportRow

HALF_PI = 0.5 * np.pi


class FitError(RuntimeError):
    pass


@dataclass
class FitResult:
    curve: ConversionCurve
    covariance: np.ndarray
    residuals: np.ndarray
    chi2: float
    iterations: int

    @property
    def eta_peak_err(self) -> float:
        return float(np.sqrt(self.covariance[0, 0]))

    @property
    def p_max_err(self) -> float:
        return float(np.sqrt(self.covariance[1, 1]))

    def report(self) -> list[ReportRow]:
        dof = max(len(self.residuals) - 2, 1)
        return [
            ReportRow("eta_peak", self.curve.eta_peak, self.eta_peak_err),
            ReportRow("p_max_mW", self.curve.p_max, self.p_max_err),
            ReportRow("cov_eta_pmax", float(self.covariance[0, 1])),
            ReportRow("chi2", self.chi2),
            ReportRow("reduced_chi2", self.chi2 / dof),
            ReportRow("iterations", float(self.iterations)),
        ]


def _model(power, eta, p_max):
    phase = HALF_PI * np.sqrt(power / p_max)
    return eta * np.sin(phase) ** 2


def _jacobian(power, eta, p_max):
    phase = HALF_PI * np.sqrt(power / p_max)
    d_eta = np.sin(phase) ** 2
    d_pmax = -eta * np.sin(2.0 * phase) * phase / (2.0 * p_max)
    return np.column_stack([d_eta, d_pmax])


def fit_conversion_curve(power: Sequence[float], efficiency: Sequence[float],
                         sigma: Sequence[float] | None = None, *,
                         max_iter: int = 10, rtol: float = 1e-10) -> FitResult:
    """Fit ``eta * sin^2((pi/2) sqrt(P / P_m))`` to measured efficiencies.

    Starts from the largest observed efficiency and the power where it was
    seen. ``sigma`` are absolute one-sigma uncertainties; unit weights if
    omitted. Raises :class:`FitError` when the relative parameter change has
    not dropped below ``rtol`` within ``max_iter`` iterations.
    """
    x = np.asarray(power, dtype=float)
    y = np.asarray(efficiency, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("power and efficiency must be 1-d and the same length")
    if x.size < 3:
        raise ValueError("need at least 3 samples")
    if np.any(x < 0) or np.any(y < 0):
        raise ValueError("powers and efficiencies must be non-negative")
    if np.unique(x).size < 2 or np.all(x == 0):
        raise ValueError("degenerate samples: need at least two distinct non-zero powers")
    if sigma is None:
        w = np.ones_like(y)
    else:
        s = np.asarray(sigma, dtype=float)
        if s.shape != y.shape or np.any(s <= 0):
            raise ValueError("sigma must be positive and match the samples")
        w = 1.0 / s**2

    best = int(np.argmax(y))
    params = np.array([y[best], x[best] if x[best] > 0 else x.max()])

    def chi2_of(p):
        r = y - _model(x, *p)
        return float(np.sum(w * r * r))

    chi2 = chi2_of(params)
    lam = 1e-3
    for it in range(1, max_iter + 1):
        J = _jacobian(x, *params)
        r = y - _model(x, *params)
        A = J.T @ (w[:, None] * J)
        g = J.T @ (w * r)
        while True:
            damped = A + lam * np.diag(np.diag(A))
            try:
                step = np.linalg.solve(damped, g)
            except np.linalg.LinAlgError:
                raise FitError("normal equations are singular") from None
            trial = params + step
            if trial[1] > 0:
                trial_chi2 = chi2_of(trial)
                if trial_chi2 <= chi2:
                    break
            lam *= 10.0
            if lam > 1e12:
                raise FitError("damping diverged without reducing chi-square")
        change = np.max(np.abs(step) / np.maximum(np.abs(trial), 1e-300))
        params, chi2 = trial, trial_chi2
        lam = max(lam / 10.0, 1e-12)
        if change < rtol or chi2 == 0.0:
            break
    else:
        raise FitError(f"no convergence within {max_iter} iterations")

    J = _jacobian(x, *params)
    A = J.T @ (w[:, None] * J)
    try:
        cov = np.linalg.inv(A)
    except np.linalg.LinAlgError:
        raise FitError("singular covariance at the solution") from None
    if sigma is None:
        # unknown errors: scale by the residual variance
        cov = cov * chi2 / max(x.size - 2, 1)
    eta = float(np.clip(params[0], 0.0, 1.0))
    return FitResult(ConversionCurve(eta, float(params[1])), cov,
                     y - _model(x, *params), chi2, it)
