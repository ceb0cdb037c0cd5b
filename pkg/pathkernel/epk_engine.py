# pathkernel/epk_engine.py
"""
Exact path kernel reconstruction of a recorded training run

For step s (segment theta_{s-1} -> theta_s):
    test map   phi_s^test(x)  = trapezoid over t in {0, 1/T, ..., 1} of J_x(theta(t))     (O, D)
    train map  phi_s^train(k) = optimizer-weighted history of -grad f_{y_k}(x_k) / |B_j|  (D,)
    reg term   r_s            = weight-decay part of the update

so that theta_s - theta_{s-1} = -sum_k phi_s^train(k) - lam r_s and

    f_{theta_N}(x) ~= f_{theta_0}(x) - sum_s sum_k phi_s^test(x) phi_s^train(k) - lam sum_s phi_s^test(x) r_s

Train maps are kept as running accumulators (M x D), so one pass over the log
serves every step without storing per-step histories.
"""

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from pathkernel.caching import ArrayCache
from pathkernel.config import ModelSpec
from pathkernel.error_handling import InvalidInputError, MissingInputError
from pathkernel.models import Model
from pathkernel.optimizers import adam_denominator, adam_step_scale
from pathkernel.trajectory import TrajectoryLog

logger = logging.getLogger(__name__)


def trapezoid_weights(T: int) -> np.ndarray:
    if T < 1:
        raise InvalidInputError(f"integration steps T must be >= 1, got {T}")
    weights = np.full(T + 1, 1.0 / T)
    weights[0] = weights[-1] = 0.5 / T
    return weights


# Per-sample reductions of a (O, D) segment integral
REDUCTIONS = ("full", "summed", "update")

# Budget for end Jacobians carried between adjacent steps
JACOBIAN_CACHE_BYTES = 1 << 30


def _reduced_shape(model: Model, reduction: str, vectors: Optional[np.ndarray]) -> Tuple[int, ...]:
    if reduction == "summed":
        return (model.size,)
    if reduction == "update":
        return (model.n_outputs, vectors.shape[1])
    return (model.n_outputs, model.size)


def _reduce(integral: np.ndarray, reduction: str, vectors: Optional[np.ndarray]) -> np.ndarray:
    if reduction == "summed":
        return integral.sum(axis=0)
    if reduction == "update":
        return integral @ vectors
    return integral


def segment_integrals(
    model: Model,
    theta_start: np.ndarray,
    theta_end: np.ndarray,
    inputs: np.ndarray,
    T: int,
    start_jacobians: Optional[Sequence[Optional[np.ndarray]]] = None,
    reduction: str = "full",
    vectors: Optional[np.ndarray] = None,
    keep_ends: int = 0,
) -> Tuple[np.ndarray, List[np.ndarray]]:
    """
    Path-integrated output Jacobians along a straight parameter segment

    Each sample's (O, D) integral is reduced before the next sample starts:
        full    kept as is                        (n, O, D)
        summed  summed over outputs               (n, D)
        update  contracted with vectors (D, r)    (n, O, r)

    Args:
        start_jacobians: per-sample Jacobians at theta_start, None entries are recomputed
        keep_ends: return the end Jacobians of the first keep_ends samples

    Returns:
        (reduced integrals, end Jacobians); the end Jacobians equal the start
        Jacobians of the following segment
    """
    if reduction not in REDUCTIONS:
        raise InvalidInputError(f"unknown reduction '{reduction}', expected one of {REDUCTIONS}")
    if reduction == "update" and (vectors is None or vectors.ndim != 2 or vectors.shape[0] != model.size):
        raise InvalidInputError(f"update reduction needs vectors of shape ({model.size}, r)")
    weights = trapezoid_weights(T)
    delta = theta_end - theta_start
    n = len(inputs)
    reduced = np.zeros((n,) + _reduced_shape(model, reduction, vectors))
    ends: List[np.ndarray] = []
    for i in range(n):
        sample = inputs[i:i + 1]
        start = None if start_jacobians is None else start_jacobians[i]
        integral = np.zeros((model.n_outputs, model.size))
        for node in range(T + 1):
            if node == 0 and start is not None:
                jac = start
            elif node == 0:
                jac = model.jacobian(theta_start, sample)[1]
            elif node == T:
                jac = model.jacobian(theta_end, sample)[1]
            else:
                jac = model.jacobian(theta_start + (node / T) * delta, sample)[1]
            integral += weights[node] * jac
        reduced[i] = _reduce(integral, reduction, vectors)
        if i < keep_ends:
            ends.append(jac)
    return reduced, ends


def _segment_worker(payload) -> Tuple[np.ndarray, List[np.ndarray]]:
    spec, theta_start, theta_end, inputs, T, start_jacobians, reduction, vectors, keep_ends = payload
    return segment_integrals(
        Model(ModelSpec.model_validate(spec)), theta_start, theta_end, inputs, T,
        start_jacobians, reduction, vectors, keep_ends,
    )


# ============================================================================
# TRAIN MAPS
# ============================================================================

class TrainMapAccumulator:
    """
    Running train feature maps for AdamW and SGD with momentum

    AdamW:    G_s = b1 G_{s-1} + (1 - b1) c_s,  phi_s = a_s scale_s G_s / denom_s,  r_s = a_s theta_{s-1}
    Momentum: G_s = beta G_{s-1} + c_s,         phi_s = a_s c G_s,              r_s = a_s c R_s,
              R_s = beta R_{s-1} + theta_{s-1}
    with c_s(k) = 1[k in B_s] / |B_s| * grad(-f_{y_k})(theta_{s-1}).
    """

    def __init__(self, log: TrajectoryLog):
        self.log = log
        self.model = log.model
        self.opt = log.config.optimizer
        self.history = np.zeros((len(log.train), log.size))
        self.reg_history = np.zeros(log.size)
        self.step = 0

    def advance(self) -> Tuple[np.ndarray, np.ndarray]:
        """Move to the next step; returns (train maps (M, D), reg term (D,))"""
        s = self.step + 1
        if s > self.log.n_steps:
            raise MissingInputError(f"no update recorded for step {s}")
        theta_prev = np.asarray(self.log.theta(s - 1))
        batch = self.log.batch_indices(s)
        lr = self.log.lr(s)
        grads = self.model.sample_loss_gradients(
            theta_prev, self.log.train.inputs[batch], self.log.train.labels[batch]
        )

        if self.opt.kind == "adamw":
            self.history *= self.opt.beta1
            self.history[batch] += (1.0 - self.opt.beta1) * grads / len(batch)
            scale = lr * adam_step_scale(self.opt.beta1, self.opt.beta2, s)
            denom = adam_denominator(np.asarray(self.log.v(s)), self.opt.eps, self.opt.beta2, s)
            train_maps = scale * self.history / denom
            reg = lr * theta_prev
        else:
            factor = self.opt.momentum if self.opt.momentum_scaled_step else 1.0
            self.history *= self.opt.momentum
            self.history[batch] += grads / len(batch)
            self.reg_history = self.opt.momentum * self.reg_history + theta_prev
            train_maps = lr * factor * self.history
            reg = lr * factor * self.reg_history
        self.step = s
        return train_maps, reg

    def advance_to(self, step: int) -> Tuple[np.ndarray, np.ndarray]:
        if step <= self.step:
            raise InvalidInputError(f"accumulator already at step {self.step}, cannot move to {step}")
        while self.step < step:
            result = self.advance()
        return result


# ============================================================================
# SWEEP
# ============================================================================

@dataclass
class StepMaps:
    """Feature maps of one step; test holds the sweep's reduction of phi_s^test"""

    step: int
    train: np.ndarray
    reg: np.ndarray
    test: Optional[np.ndarray] = None
    reduction: str = "full"

    @property
    def train_total(self) -> np.ndarray:
        """sum_k phi_s^train(k) in index order"""
        return np.sum(self.train, axis=0)


class EPKSweep:
    """
    One pass over a trajectory yielding StepMaps for the requested steps

    reduction picks what each test map becomes before it is stored:
    "full" (n, O, D), "summed" over outputs (n, D), or "update", the test map
    applied to [train_total, reg] (n, O, 2). Only "full" holds O x D per sample.

    End Jacobians are carried to the next step for at most
    cache_bytes / (O D 8) samples; the rest recompute their start node.

    Example:
        for maps in EPKSweep(log, test.inputs, T=100, steps=range(1, 51)):
            kernel = np.einsum("nod,kd->nk", maps.test, maps.train)
    """

    def __init__(
        self,
        log: TrajectoryLog,
        test_inputs: Optional[np.ndarray],
        T: int,
        steps: Optional[Iterable[int]] = None,
        workers: int = 1,
        progress: bool = True,
        reduction: str = "full",
        cache_bytes: int = JACOBIAN_CACHE_BYTES,
    ):
        trapezoid_weights(T)
        if reduction not in REDUCTIONS:
            raise InvalidInputError(f"unknown reduction '{reduction}', expected one of {REDUCTIONS}")
        self.log = log
        self.test_inputs = test_inputs
        self.T = T
        self.reduction = reduction
        self.steps = sorted(set(steps)) if steps is not None else list(range(1, log.n_steps + 1))
        for s in self.steps:
            if not 1 <= s <= log.n_steps:
                raise MissingInputError(f"step {s} outside the recorded steps 1..{log.n_steps}")
        self.workers = workers
        self.progress = progress
        n_test = 0 if test_inputs is None else len(test_inputs)
        jacobian_bytes = log.model.n_outputs * log.size * 8
        self.cache_items = int(min(n_test, max(cache_bytes, 0) // jacobian_bytes))
        self.cache = ArrayCache(max_items=max(self.cache_items, 1))
        if self.cache_items < n_test:
            logger.info(f"Jacobian cache holds {self.cache_items} of {n_test} test samples")

    def _test_maps(self, executor: Optional[ProcessPoolExecutor], s: int, vectors: Optional[np.ndarray]) -> np.ndarray:
        log, inputs = self.log, self.test_inputs
        theta_start, theta_end = np.asarray(log.theta(s - 1)), np.asarray(log.theta(s))
        n = len(inputs)
        starts = [self.cache.get((s - 1, i)) for i in range(self.cache_items)]
        starts += [None] * (n - self.cache_items)

        if executor is None:
            reduced, ends = segment_integrals(
                log.model, theta_start, theta_end, inputs, self.T, starts, self.reduction, vectors, self.cache_items
            )
        else:
            chunks = np.array_split(np.arange(n), min(self.workers, n))
            spec = log.config.model.model_dump(mode='json')
            payloads = [
                (spec, theta_start, theta_end, inputs[idx], self.T, [starts[i] for i in idx],
                 self.reduction, vectors, int(np.sum(idx < self.cache_items)))
                for idx in chunks
            ]
            parts = list(executor.map(_segment_worker, payloads))
            reduced = np.concatenate([p[0] for p in parts])
            ends = [end for p in parts for end in p[1]]

        self.cache.invalidate_prefix(s - 1)
        for i, end in enumerate(ends):
            self.cache.set((s, i), end)
        return reduced

    def __iter__(self) -> Iterator[StepMaps]:
        if not self.steps:
            return
        accumulator = TrainMapAccumulator(self.log)
        wanted = set(self.steps)
        use_pool = self.workers > 1 and self.test_inputs is not None and len(self.test_inputs) > 1
        executor = ProcessPoolExecutor(max_workers=self.workers) if use_pool else None
        disable = not (self.progress and logger.isEnabledFor(logging.INFO))
        try:
            for s in tqdm(range(1, self.steps[-1] + 1), desc=f"epk T={self.T}", disable=disable):
                train_maps, reg = accumulator.advance()
                if s not in wanted:
                    continue
                maps = StepMaps(step=s, train=train_maps, reg=reg, reduction=self.reduction)
                if self.test_inputs is not None:
                    vectors = np.column_stack([maps.train_total, reg]) if self.reduction == "update" else None
                    maps.test = self._test_maps(executor, s, vectors)
                yield maps
        finally:
            if executor is not None:
                executor.shutdown(wait=True)


def test_feature_map(log: TrajectoryLog, step: int, inputs: np.ndarray, T: int) -> np.ndarray:
    """phi_step^test for one sample given as a batch of 1, shape (O, D)"""
    if not 1 <= step <= log.n_steps:
        raise MissingInputError(f"step {step} outside the recorded steps 1..{log.n_steps}")
    integrals, _ = segment_integrals(
        log.model, np.asarray(log.theta(step - 1)), np.asarray(log.theta(step)), inputs[:1], T
    )
    return integrals[0]


test_feature_map.__test__ = False


def train_feature_map(log: TrajectoryLog, step: int, k: int) -> np.ndarray:
    """phi_step^train for train sample k, shape (D,)"""
    if not 0 <= k < len(log.train):
        raise InvalidInputError(f"train index {k} outside 0..{len(log.train) - 1}")
    train_maps, _ = TrainMapAccumulator(log).advance_to(step)
    return train_maps[k]


# ============================================================================
# RECONSTRUCTION AND FIDELITY
# ============================================================================

@dataclass
class EPKPrediction:
    """Per test sample: base output, per-step kernel and reg terms, reconstruction"""

    base: np.ndarray
    kernel: np.ndarray
    reg: np.ndarray
    weight_decay: float
    target: np.ndarray
    T: int

    @property
    def step_deltas(self) -> np.ndarray:
        """(N, n, O) predicted change f_{theta_s} - f_{theta_{s-1}}"""
        return -self.kernel - self.weight_decay * self.reg

    @property
    def reconstruction(self) -> np.ndarray:
        return self.base - np.sum(self.kernel, axis=0) - self.weight_decay * np.sum(self.reg, axis=0)

    @property
    def max_abs_error(self) -> float:
        return float(np.max(np.abs(self.reconstruction - self.target))) if self.target.size else 0.0


def reconstruct(
    log: TrajectoryLog,
    inputs: np.ndarray,
    T: int,
    workers: int = 1,
    progress: bool = True,
) -> EPKPrediction:
    model = log.model
    base = model.forward(np.asarray(log.theta(0)), inputs)
    target = model.forward(np.asarray(log.theta(log.n_steps)), inputs)
    kernel = np.zeros((log.n_steps,) + base.shape)
    reg = np.zeros_like(kernel)
    for maps in EPKSweep(log, inputs, T, workers=workers, progress=progress, reduction="update"):
        kernel[maps.step - 1] = maps.test[..., 0]
        reg[maps.step - 1] = maps.test[..., 1]
    return EPKPrediction(base=base, kernel=kernel, reg=reg, weight_decay=log.weight_decay, target=target, T=T)


def checkpoint_deltas(log: TrajectoryLog, inputs: np.ndarray) -> np.ndarray:
    """(N, n, O) observed change of the model outputs across each step"""
    outputs = np.stack([log.model.forward(np.asarray(log.theta(s)), inputs) for s in range(log.n_steps + 1)])
    return np.diff(outputs, axis=0)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def fidelity(prediction: EPKPrediction) -> Dict[str, float]:
    """Argmax agreement and mean KL(p_model || softmax(reconstruction))"""
    log_p = _log_softmax(prediction.target)
    log_q = _log_softmax(prediction.reconstruction)
    kl = np.sum(np.exp(log_p) * (log_p - log_q), axis=-1)
    agreement = np.argmax(prediction.reconstruction, axis=-1) == np.argmax(prediction.target, axis=-1)
    return {
        'T': prediction.T,
        'agreement': float(np.mean(agreement)),
        'mean_kl': float(np.mean(kl)),
        'max_abs_error': prediction.max_abs_error,
        'n_test': int(len(prediction.target)),
    }


def fidelity_report(
    log: TrajectoryLog,
    inputs: np.ndarray,
    T_values: List[int],
    workers: int = 1,
    progress: bool = True,
    timings: Optional[Dict[str, float]] = None,
) -> dict:
    """
    Fidelity for each T; the JSON emitted by `epk-verify`

    The report holds no clock values, so reruns write identical files.
    Runtimes go into `timings` (keyed "T=<T>") for the run manifest.
    """
    results = []
    for T in T_values:
        started = time.perf_counter()
        result = fidelity(reconstruct(log, inputs, T, workers=workers, progress=progress))
        elapsed = time.perf_counter() - started
        if timings is not None:
            timings[f"T={T}"] = elapsed
        logger.info(f"✓ T={T}: agreement {result['agreement']:.4f}, mean KL {result['mean_kl']:.3e} ({elapsed:.1f}s)")
        results.append(result)
    return {'n_steps': log.n_steps, 'n_test': int(len(inputs)), 'results': results}
