# pathkernel/optimizers.py
"""
Instrumented optimizers over flat parameter vectors

AdamW (decoupled decay):
    m_s = b1 m_{s-1} + (1 - b1) g_s
    v_s = b2 v_{s-1} + (1 - b2) g_s^2
    theta_s = theta_{s-1} - a_s lam theta_{s-1}
              - a_s sqrt(1 - b2^s) / (1 - b1^s) * m_s / (sqrt(v_s) + eps sqrt(1 - b2^s))

SGD with momentum (coupled decay, decay inside the buffer):
    b_s = beta b_{s-1} + g_s + lam theta_{s-1}
    theta_s = theta_{s-1} - a_s c b_s,   c = beta (scaled step) or 1

Both step functions are pure: they return new arrays and a new state.
"""

import logging
from dataclasses import dataclass, replace

import numpy as np

from pathkernel.config import OptimizerConfig, ScheduleConfig
from pathkernel.error_handling import InvalidInputError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerState:
    """Moments (m, v), step counter and the hyperparameters they evolve under"""

    kind: str
    m: np.ndarray
    v: np.ndarray
    step: int
    beta1: float
    beta2: float
    eps: float
    weight_decay: float
    momentum: float
    scaled_step: bool
    schedule: str

    @classmethod
    def initial(cls, config: OptimizerConfig, size: int) -> "OptimizerState":
        return cls(
            kind=config.kind,
            m=np.zeros(size),
            v=np.zeros(size),
            step=0,
            beta1=config.beta1,
            beta2=config.beta2,
            eps=config.eps,
            weight_decay=config.weight_decay,
            momentum=config.momentum,
            scaled_step=config.momentum_scaled_step,
            schedule=config.schedule.kind,
        )

    @property
    def step_factor(self) -> float:
        """c in theta_s = theta_{s-1} - a_s c b_s"""
        return self.momentum if self.scaled_step else 1.0


def schedule_rate(schedule: ScheduleConfig, step: int, total_steps: int) -> float:
    """
    Learning rate a_s for s = 1..total_steps

    linear_warmup_peak_decay rises linearly to `peak` at `peak_step` and then
    falls linearly, staying positive at the final step.
    """
    if step < 1:
        raise InvalidInputError(f"learning rate schedule starts at step 1, got {step}")
    if schedule.kind == "constant":
        return schedule.peak
    if step <= schedule.peak_step:
        return schedule.peak * step / schedule.peak_step
    remaining = max(total_steps, schedule.peak_step) + 1 - schedule.peak_step
    return schedule.peak * max(total_steps + 1 - step, 1) / remaining


def adam_step_scale(beta1: float, beta2: float, step: int) -> float:
    """sqrt(1 - b2^s) / (1 - b1^s)"""
    return float(np.sqrt(1.0 - beta2 ** step) / (1.0 - beta1 ** step))


def adam_denominator(v: np.ndarray, eps: float, beta2: float, step: int) -> np.ndarray:
    """sqrt(v_s) + eps sqrt(1 - b2^s), equal to sqrt(1 - b2^s) (sqrt(v_hat_s) + eps)"""
    return np.sqrt(v) + eps * np.sqrt(1.0 - beta2 ** step)


def _check_inputs(params: np.ndarray, state: OptimizerState, grad: np.ndarray, lr: float):
    if params.shape != grad.shape or params.shape != state.m.shape:
        raise ShapeError(
            f"optimizer: params {params.shape}, grad {grad.shape} and state {state.m.shape} differ"
        )
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("loss gradient is not finite", step=state.step + 1)
    if not lr > 0:
        raise InvalidInputError(f"learning rate must be positive at step {state.step + 1}, got {lr}")


def _check_update(new_params: np.ndarray, step: int):
    if not np.all(np.isfinite(new_params)):
        raise NonFiniteError("parameter update is not finite", step=step)


def adamw_step(params: np.ndarray, state: OptimizerState, grad: np.ndarray, lr: float):
    """One AdamW update; returns (new params, new state)"""
    _check_inputs(params, state, grad, lr)
    s = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    direction = m / adam_denominator(v, state.eps, state.beta2, s)
    new_params = params - lr * state.weight_decay * params - lr * adam_step_scale(state.beta1, state.beta2, s) * direction
    _check_update(new_params, s)
    return new_params, replace(state, m=m, v=v, step=s)


def sgd_momentum_step(params: np.ndarray, state: OptimizerState, grad: np.ndarray, lr: float):
    """One SGD-with-momentum update with the decay folded into the buffer (kept in m)"""
    _check_inputs(params, state, grad, lr)
    s = state.step + 1
    buffer = state.momentum * state.m + grad + state.weight_decay * params
    new_params = params - lr * state.step_factor * buffer
    _check_update(new_params, s)
    return new_params, replace(state, m=buffer, step=s)


STEP_FUNCTIONS = {
    "adamw": adamw_step,
    "sgd_momentum": sgd_momentum_step,
}


def optimizer_step(params: np.ndarray, state: OptimizerState, grad: np.ndarray, lr: float):
    return STEP_FUNCTIONS[state.kind](params, state, grad, lr)
