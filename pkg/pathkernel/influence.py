# pathkernel/influence.py
"""
Influence scores built from the EPK feature maps

psi_s(theta_i, x, x_k)  = sum_o phi_s^test(x)[o, i] * phi_s^train(x_k)[i]
Psi(Theta, x, X_train)  = sum over i in Theta, k and steps of psi
psi^reg(theta_i, x, s)  = sum_o phi_s^test(x)[o, i] * r_s[i]

Sums over parameters, samples and steps are plain sums, so any partition of
an axis adds back up to the coarser score.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from pathkernel.epk_engine import EPKSweep, StepMaps
from pathkernel.error_handling import InvalidInputError
from pathkernel.trajectory import TrajectoryLog

logger = logging.getLogger(__name__)

Window = Tuple[int, int]


def default_windows(n_steps: int, window_size: int) -> List[Window]:
    """Consecutive windows of `window_size` steps covering 1..n_steps"""
    return [(start, min(start + window_size - 1, n_steps)) for start in range(1, n_steps + 1, window_size)]


def _ranges(log: TrajectoryLog, components: Sequence[str]) -> List[Tuple[int, int]]:
    params = log.params(0)
    return [params.component_range(name) for name in components]


def _output_summed(maps: StepMaps, start: int, stop: int) -> np.ndarray:
    """(n, |Theta|) test map restricted to a component, summed over outputs"""
    if maps.reduction == "summed":
        return maps.test[:, start:stop]
    return maps.test[:, :, start:stop].sum(axis=1)


# ============================================================================
# INFLUENCE TABLE
# ============================================================================

@dataclass
class InfluenceTable:
    """
    Accumulated scores over component x window x test x train

    kernel: (C, W, n_test, M), or (C, W, n_test, O, M) with per_output
    reg:    (C, W, n_test),    or (C, W, n_test, O)
    vectors: (component, window) -> (n_test, |Theta|) per-parameter scores
    """

    components: List[str]
    windows: List[Window]
    kernel: np.ndarray
    reg: np.ndarray
    per_output: bool = False
    vectors: Dict[Tuple[str, Window], np.ndarray] = field(default_factory=dict)

    def kernel_total(self) -> np.ndarray:
        """Per test sample (and output with per_output), summed over components, windows and train samples"""
        return self.kernel.sum(axis=(0, 1, -1))

    def reg_total(self) -> np.ndarray:
        return self.reg.sum(axis=(0, 1))

    def component_scores(self) -> np.ndarray:
        """(C, W, n_test) Psi(Theta, x, X_train) per window"""
        scores = self.kernel.sum(axis=-1)
        return scores.sum(axis=-1) if self.per_output else scores

    def kernel_frame(self) -> pd.DataFrame:
        kernel = self.kernel.sum(axis=3) if self.per_output else self.kernel
        c, w, n, m = np.meshgrid(*[np.arange(d) for d in kernel.shape], indexing='ij')
        return pd.DataFrame({
            'component': np.array(self.components, dtype=object)[c.ravel()],
            'window_start': np.array([s for s, _ in self.windows], dtype=np.int64)[w.ravel()],
            'window_end': np.array([e for _, e in self.windows], dtype=np.int64)[w.ravel()],
            'test_index': n.ravel(),
            'train_index': m.ravel(),
            'kernel': kernel.ravel(),
        })

    def reg_frame(self) -> pd.DataFrame:
        reg = self.reg.sum(axis=3) if self.per_output else self.reg
        c, w, n = np.meshgrid(*[np.arange(d) for d in reg.shape], indexing='ij')
        return pd.DataFrame({
            'component': np.array(self.components, dtype=object)[c.ravel()],
            'window_start': np.array([s for s, _ in self.windows], dtype=np.int64)[w.ravel()],
            'window_end': np.array([e for _, e in self.windows], dtype=np.int64)[w.ravel()],
            'test_index': n.ravel(),
            'reg': reg.ravel(),
        })


def accumulate(
    log: TrajectoryLog,
    test_inputs: np.ndarray,
    components: Sequence[str],
    windows: Sequence[Window],
    T: int,
    per_output: bool = False,
    vector_components: Sequence[str] = (),
    workers: int = 1,
    progress: bool = True,
) -> InfluenceTable:
    """
    One sweep over the union of the windows, adding each step into every
    window that contains it

    Raises:
        UnknownComponentError: a component is not in the registry
    """
    components = list(components)
    windows = [tuple(w) for w in windows]
    ranges = _ranges(log, components)
    for name in vector_components:
        if name not in components:
            raise InvalidInputError(f"vector component '{name}' must also be accumulated")
    for start, end in windows:
        if not 1 <= start <= end <= log.n_steps:
            raise InvalidInputError(f"step window ({start}, {end}) outside 1..{log.n_steps}")

    n_test, n_train, n_out = len(test_inputs), len(log.train), log.model.n_outputs
    if per_output:
        kernel = np.zeros((len(components), len(windows), n_test, n_out, n_train))
        reg = np.zeros((len(components), len(windows), n_test, n_out))
    else:
        kernel = np.zeros((len(components), len(windows), n_test, n_train))
        reg = np.zeros((len(components), len(windows), n_test))
    vectors = {
        (name, window): np.zeros((n_test, stop - start))
        for name, (start, stop) in zip(components, ranges) if name in vector_components
        for window in windows
    }
    table = InfluenceTable(components, windows, kernel, reg, per_output, vectors)

    steps = sorted({s for start, end in windows for s in range(start, end + 1)})
    if not steps:
        return table
    reduction = "full" if per_output else "summed"
    for maps in EPKSweep(log, test_inputs, T, steps=steps, workers=workers, progress=progress, reduction=reduction):
        containing = [w for w, (start, end) in enumerate(windows) if start <= maps.step <= end]
        train_total = maps.train_total
        for c, (name, (start, stop)) in enumerate(zip(components, ranges)):
            train_c = maps.train[:, start:stop]
            if per_output:
                test_c = maps.test[:, :, start:stop]
                step_kernel = np.einsum("noi,ki->nok", test_c, train_c)
                step_reg = test_c @ maps.reg[start:stop]
                test_summed = test_c.sum(axis=1)
            else:
                test_summed = _output_summed(maps, start, stop)
                step_kernel = test_summed @ train_c.T
                step_reg = test_summed @ maps.reg[start:stop]
            for w in containing:
                kernel[c, w] += step_kernel
                reg[c, w] += step_reg
                if name in vector_components:
                    vectors[(name, windows[w])] += test_summed * train_total[start:stop]
    logger.info(f"✓ Accumulated influence over {len(components)} components, {len(windows)} windows")
    return table


def psi(log: TrajectoryLog, step: int, component: str, test_input: np.ndarray, k: int, T: int) -> np.ndarray:
    """Per-parameter scores of component on (x, x_k) at one step; test_input is a batch of 1"""
    start, stop = log.params(0).component_range(component)
    maps = next(iter(EPKSweep(log, test_input, T, steps=[step], progress=False, reduction="summed")))
    return _output_summed(maps, start, stop)[0] * maps.train[k, start:stop]


def reg_influence(log: TrajectoryLog, step: int, component: str, test_input: np.ndarray, T: int) -> float:
    """Psi_s^reg(Theta, x), without the weight-decay factor"""
    start, stop = log.params(0).component_range(component)
    maps = next(iter(EPKSweep(log, test_input, T, steps=[step], progress=False, reduction="summed")))
    return float(_output_summed(maps, start, stop)[0] @ maps.reg[start:stop])


def component_vectors(
    log: TrajectoryLog,
    test_inputs: np.ndarray,
    component: str,
    window: Window,
    T: int,
    workers: int = 1,
) -> np.ndarray:
    """p_Theta(x) for every test input, shape (n_test, |Theta|)"""
    table = accumulate(log, test_inputs, [component], [window], T,
                       vector_components=[component], workers=workers)
    return table.vectors[(component, tuple(window))]


def parameter_scores(log: TrajectoryLog, score_inputs: np.ndarray, T: int, workers: int = 1) -> np.ndarray:
    """Psi_S(theta_i) = sum_x |Psi_S(theta_i, x, X_train)| over all steps, shape (D,)"""
    per_sample = np.zeros((len(score_inputs), log.size))
    for maps in EPKSweep(log, score_inputs, T, workers=workers, reduction="summed"):
        per_sample += maps.test * maps.train_total
    return np.abs(per_sample).sum(axis=0)


# ============================================================================
# SIMILARITY
# ============================================================================

@dataclass
class SimilarityMatrix:
    """Cosine similarity of component vectors; `missing` marks rows/cols of zero vectors"""

    values: np.ndarray
    missing: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(np.where(self.missing, np.nan, self.values))


def similarity(vectors: np.ndarray) -> SimilarityMatrix:
    vectors = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(vectors, axis=1)
    nonzero = norms > 0
    unit = np.zeros_like(vectors)
    unit[nonzero] = vectors[nonzero] / norms[nonzero, None]
    values = np.clip(unit @ unit.T, -1.0, 1.0)
    missing = ~(nonzero[:, None] & nonzero[None, :])
    values[missing] = 0.0
    np.fill_diagonal(values, np.where(nonzero, 1.0, 0.0))
    return SimilarityMatrix(values=values, missing=missing)


def residue_contrast(values: np.ndarray, row_labels: np.ndarray, col_labels: np.ndarray,
                     missing: Optional[np.ndarray] = None) -> float:
    """Mean |value| over label-matching pairs divided by the mean over the rest"""
    same = row_labels[:, None] == col_labels[None, :]
    valid = np.ones_like(same) if missing is None else ~missing
    magnitude = np.abs(values)
    on, off = magnitude[same & valid], magnitude[~same & valid]
    if on.size == 0 or off.size == 0 or off.mean() == 0:
        return float('nan')
    return float(on.mean() / off.mean())


# ============================================================================
# STEP IMPORTANCE AND KERNEL SLICES
# ============================================================================

def step_importance(
    log: TrajectoryLog,
    test_inputs: np.ndarray,
    components: Sequence[str],
    T: int,
    workers: int = 1,
    progress: bool = True,
) -> pd.DataFrame:
    """
    Per step and component:
        psi     = sum_x |Psi_s(Theta, x, X_train)|
        psi_reg = sum_x |Psi_s^reg(Theta, x)|
        D       = sum_{theta in Theta} (sum_x |Psi_s(theta, x)| - sum_x |Psi_s^reg(theta, x)|)
    """
    components = list(components)
    ranges = _ranges(log, components)
    rows = []
    for maps in EPKSweep(log, test_inputs, T, workers=workers, progress=progress, reduction="summed"):
        train_total = maps.train_total
        for name, (start, stop) in zip(components, ranges):
            test_summed = _output_summed(maps, start, stop)
            kernel_params = test_summed * train_total[start:stop]
            reg_params = test_summed * maps.reg[start:stop]
            rows.append({
                'step': maps.step,
                'component': name,
                'psi': float(np.abs(kernel_params.sum(axis=1)).sum()),
                'psi_reg': float(np.abs(reg_params.sum(axis=1)).sum()),
                'D': float(np.abs(kernel_params).sum() - np.abs(reg_params).sum()),
            })
    return pd.DataFrame(rows, columns=['step', 'component', 'psi', 'psi_reg', 'D'])


@dataclass
class KernelSlice:
    """Test x train EPK values of one component summed over a step window"""

    values: np.ndarray
    component: str
    window: Window
    test_sums: np.ndarray
    test_labels: np.ndarray
    train_sums: np.ndarray
    train_labels: np.ndarray

    def sorted(self) -> "KernelSlice":
        """Rows and columns ordered by (a + b, label)"""
        rows = np.lexsort((self.test_labels, self.test_sums))
        cols = np.lexsort((self.train_labels, self.train_sums))
        return KernelSlice(
            values=self.values[np.ix_(rows, cols)],
            component=self.component,
            window=self.window,
            test_sums=self.test_sums[rows],
            test_labels=self.test_labels[rows],
            train_sums=self.train_sums[cols],
            train_labels=self.train_labels[cols],
        )

    def residue_contrast(self) -> float:
        return residue_contrast(self.values, self.test_labels, self.train_labels)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(
            self.values,
            index=[f"{s}->{y}" for s, y in zip(self.test_sums, self.test_labels)],
            columns=[f"{s}->{y}" for s, y in zip(self.train_sums, self.train_labels)],
        )
        frame.index.name = 'test'
        return frame


def kernel_slice(
    log: TrajectoryLog,
    test_inputs: np.ndarray,
    test_labels: np.ndarray,
    test_sums: Optional[np.ndarray],
    component: str,
    window: Window,
    T: int,
    workers: int = 1,
) -> KernelSlice:
    table = accumulate(log, test_inputs, [component], [window], T, workers=workers)
    train_sums = log.train.sums if log.train.sums is not None else np.zeros(len(log.train), dtype=np.int64)
    if test_sums is None:
        test_sums = np.zeros(len(test_inputs), dtype=np.int64)
    return KernelSlice(
        values=table.kernel[0, 0],
        component=component,
        window=tuple(window),
        test_sums=np.asarray(test_sums),
        test_labels=np.asarray(test_labels),
        train_sums=train_sums,
        train_labels=log.train.labels,
    ).sorted()
