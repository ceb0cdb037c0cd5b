# pathkernel/lasso.py
"""
Lasso fit of a similarity matrix against periodic features of the sum difference

For a pair (x, x') with delta = sum(x) - sum(x'), features are
cos(2 pi delta / f) and sin(2 pi delta / f) for each period f in the range.
Columns are standardized, the intercept is unpenalized, and the solver is
cyclic coordinate descent on
    (1 / 2n) ||y - b - X w||^2 + lam ||w||_1
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from pathkernel.error_handling import ConvergenceError, InvalidInputError

logger = logging.getLogger(__name__)


def pair_targets(values: np.ndarray, sums: np.ndarray,
                 missing: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Upper-triangle pairs (i < j) of a similarity matrix: (deltas, targets)"""
    values = np.asarray(values, dtype=np.float64)
    sums = np.asarray(sums)
    if values.shape != (len(sums), len(sums)):
        raise InvalidInputError(f"similarity matrix {values.shape} does not match {len(sums)} sums")
    rows, cols = np.triu_indices(len(sums), k=1)
    if missing is not None:
        keep = ~missing[rows, cols]
        rows, cols = rows[keep], cols[keep]
    return (sums[rows] - sums[cols]).astype(np.float64), values[rows, cols]


def frequency_features(deltas: np.ndarray, freq_min: int, freq_max: int) -> Tuple[np.ndarray, List[str]]:
    """Columns cos_f, sin_f for f = freq_min..freq_max"""
    if freq_min < 1 or freq_min > freq_max:
        raise InvalidInputError(f"invalid frequency range {freq_min}..{freq_max}")
    columns, names = [], []
    for f in range(freq_min, freq_max + 1):
        angle = 2.0 * np.pi * deltas / f
        columns += [np.cos(angle), np.sin(angle)]
        names += [f"cos_{f}", f"sin_{f}"]
    return np.column_stack(columns), names


@dataclass
class LassoFit:
    """Coefficients on the original feature scale plus solver diagnostics"""

    names: List[str]
    coef: np.ndarray
    intercept: float
    penalty: float
    objective_history: List[float] = field(default_factory=list)
    sweeps: int = 0
    converged: bool = True
    gap: float = 0.0
    std_coef: Optional[np.ndarray] = None
    means: Optional[np.ndarray] = None
    scales: Optional[np.ndarray] = None

    @property
    def nonzero(self) -> Dict[str, float]:
        return {n: float(c) for n, c in zip(self.names, self.coef) if c != 0.0}

    @property
    def dominant(self) -> Optional[str]:
        """Feature with the largest standardized coefficient magnitude"""
        weights = self.std_coef if self.std_coef is not None else self.coef
        if not np.any(weights):
            return None
        return self.names[int(np.argmax(np.abs(weights)))]

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.intercept + features @ self.coef

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'feature': self.names,
            'coef': self.coef,
            'std_coef': self.std_coef if self.std_coef is not None else self.coef,
        })


def _standardize(features: np.ndarray):
    means = features.mean(axis=0)
    scales = features.std(axis=0)
    usable = scales > 1e-12
    standardized = np.zeros_like(features)
    standardized[:, usable] = (features[:, usable] - means[usable]) / scales[usable]
    return standardized, means, scales, usable


def _objective(residual: np.ndarray, weights: np.ndarray, penalty: float) -> float:
    return float(0.5 * np.mean(residual ** 2) + penalty * np.sum(np.abs(weights)))


def penalty_max(features: np.ndarray, targets: np.ndarray) -> float:
    """Smallest penalty at which every coefficient is zero"""
    standardized, _, _, usable = _standardize(features)
    centered = targets - targets.mean()
    if not np.any(usable):
        return 0.0
    return float(np.max(np.abs(standardized[:, usable].T @ centered)) / len(targets))


def lasso_fit(
    features: np.ndarray,
    targets: np.ndarray,
    penalty: float,
    names: Optional[List[str]] = None,
    tol: float = 1e-8,
    max_sweeps: int = 10000,
    warm_start: Optional[np.ndarray] = None,
    raise_on_failure: bool = True,
) -> LassoFit:
    """
    Coordinate-descent Lasso with standardized columns

    Zero-variance columns are skipped and get coefficient 0. Converged when
    the largest coefficient change in a sweep is at most `tol`.

    Raises:
        ConvergenceError: still moving after max_sweeps (gap = last max change)
    """
    features = np.asarray(features, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if penalty < 0:
        raise InvalidInputError(f"lasso penalty must be non-negative, got {penalty}")
    if len(targets) == 0:
        raise InvalidInputError("lasso needs at least one target")
    names = names or [f"x{i}" for i in range(features.shape[1])]
    standardized, means, scales, usable = _standardize(features)
    n = len(targets)
    intercept_std = float(targets.mean())
    weights = np.zeros(features.shape[1]) if warm_start is None else np.array(warm_start, dtype=np.float64)
    weights[~usable] = 0.0
    residual = targets - intercept_std - standardized @ weights

    history = [_objective(residual, weights, penalty)]
    gap, sweeps, converged = np.inf, 0, False
    active = np.flatnonzero(usable)
    while sweeps < max_sweeps:
        sweeps += 1
        gap = 0.0
        for j in active:
            column = standardized[:, j]
            old = weights[j]
            rho = column @ residual / n + old
            new = np.sign(rho) * max(abs(rho) - penalty, 0.0)
            if new != old:
                residual -= column * (new - old)
                weights[j] = new
                gap = max(gap, abs(new - old))
        history.append(_objective(residual, weights, penalty))
        if gap <= tol:
            converged = True
            break

    coef = np.zeros_like(weights)
    coef[usable] = weights[usable] / scales[usable]
    intercept = intercept_std - float(coef @ means)
    fit = LassoFit(
        names=names, coef=coef, intercept=intercept, penalty=penalty,
        objective_history=history, sweeps=sweeps, converged=converged, gap=float(gap),
        std_coef=weights, means=means, scales=scales,
    )
    if not converged:
        message = f"lasso did not converge in {max_sweeps} sweeps (last change {gap:.3e})"
        if raise_on_failure:
            raise ConvergenceError(message, gap=float(gap))
        logger.warning(message)
    return fit


def lasso_path(
    features: np.ndarray,
    targets: np.ndarray,
    names: List[str],
    n_lambdas: int = 30,
    min_ratio: float = 1e-3,
    max_sweeps: int = 10000,
) -> List[LassoFit]:
    """Fits on a geometric penalty grid from the all-zero penalty down, warm-started"""
    top = penalty_max(features, targets)
    if top == 0.0:
        return [lasso_fit(features, targets, 0.0, names=names, max_sweeps=max_sweeps)]
    grid = top * np.geomspace(1.0, min_ratio, n_lambdas)
    fits, warm = [], None
    for penalty in grid:
        fit = lasso_fit(features, targets, float(penalty), names=names, max_sweeps=max_sweeps, warm_start=warm)
        warm = fit.std_coef
        fits.append(fit)
    return fits


def select_stable(fits: List[LassoFit]) -> LassoFit:
    """Sparsest fit whose dominant feature stays dominant for the rest of the path"""
    dominants = [fit.dominant for fit in fits]
    for i, dominant in enumerate(dominants):
        if dominant is not None and all(d == dominant for d in dominants[i:]):
            return fits[i]
    return fits[-1]


def fit_similarity(
    values: np.ndarray,
    sums: np.ndarray,
    freq_min: int,
    freq_max: int,
    penalty: Optional[float] = None,
    missing: Optional[np.ndarray] = None,
    n_lambdas: int = 30,
    max_sweeps: int = 10000,
) -> Tuple[LassoFit, List[LassoFit]]:
    """
    Fit a similarity matrix; a given penalty fits once, otherwise the path
    is swept and the stable sparse fit selected

    Returns:
        (selected fit, all path fits)
    """
    deltas, targets = pair_targets(values, sums, missing)
    features, names = frequency_features(deltas, freq_min, freq_max)
    if penalty is not None:
        fit = lasso_fit(features, targets, penalty, names=names, max_sweeps=max_sweeps)
        return fit, [fit]
    fits = lasso_path(features, targets, names, n_lambdas=n_lambdas, max_sweeps=max_sweeps)
    selected = select_stable(fits)
    logger.info(f"✓ Lasso path of {len(fits)} fits; selected penalty {selected.penalty:.3e}, dominant {selected.dominant}")
    return selected, fits
