# pathkernel/experiments.py
"""
Downstream studies on trained models
- prune: keep the top-ceil(cD') prunable parameters by EPK score, magnitude or at random
- layer_swap: move components of the final model into an earlier checkpoint
- pipeline_reinit_train: retrain from donor components plus fresh initialization
- grokking_report: memorization and generalization steps from training curves
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from pathkernel.caching import ArrayCache
from pathkernel.config import RunConfig
from pathkernel.datasets import Sample, Split
from pathkernel.error_handling import InvalidInputError, ShapeError
from pathkernel.models import STREAM_BATCHES, STREAM_PRUNE, Model, ParamVector, rng_for
from pathkernel.optimizers import OptimizerState, optimizer_step, schedule_rate
from pathkernel.trajectory import TrajectoryLog, sample_batch, train

logger = logging.getLogger(__name__)

PROTECTED_COMPONENTS = ("decoder",)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def mean_kl(reference: np.ndarray, outputs: np.ndarray) -> float:
    """Mean KL(softmax(reference) || softmax(outputs)) over rows"""
    log_p, log_q = _log_softmax(reference), _log_softmax(outputs)
    return float(np.mean(np.sum(np.exp(log_p) * (log_p - log_q), axis=-1)))


def confusion_matrix(labels: np.ndarray, predicted: np.ndarray, n_classes: int) -> np.ndarray:
    """Counts indexed [true label, predicted label]"""
    matrix = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(matrix, (labels, predicted), 1)
    return matrix


# ============================================================================
# PRUNING
# ============================================================================

@dataclass
class PruneResult:
    strategy: str
    fraction: float
    keep_mask: np.ndarray
    accuracy: float
    kl: float
    seed: Optional[int] = None
    kept: int = 0
    prunable: int = 0

    def summary(self) -> dict:
        return {
            'strategy': self.strategy, 'fraction': self.fraction, 'seed': self.seed,
            'accuracy': self.accuracy, 'kl': self.kl, 'kept': self.kept, 'prunable': self.prunable,
        }


def prunable_mask(params: ParamVector, protected: Sequence[str] = PROTECTED_COMPONENTS) -> np.ndarray:
    mask = np.ones(params.size, dtype=bool)
    for name in protected:
        if name in params.component_names:
            start, stop = params.component_range(name)
            mask[start:stop] = False
    return mask


def ranking_scores(params: ParamVector, strategy: str, scores: Optional[np.ndarray] = None,
                   seed: int = 0) -> np.ndarray:
    if strategy == "epk_score":
        if scores is None or len(scores) != params.size:
            raise ShapeError("epk_score pruning needs one score per parameter")
        return np.abs(scores)
    if strategy == "magnitude":
        return np.abs(params.data)
    if strategy == "random":
        return rng_for(seed, STREAM_PRUNE).random(params.size)
    raise InvalidInputError(f"unknown pruning strategy '{strategy}'")


def keep_top(ranking: np.ndarray, prunable: np.ndarray, fraction: float) -> np.ndarray:
    """Keep mask: every protected entry plus the top-ceil(c D') prunable ones, ties by index"""
    if not 0 < fraction <= 1:
        raise InvalidInputError(f"sparsity fraction must lie in (0, 1], got {fraction}")
    candidates = np.flatnonzero(prunable)
    n_keep = math.ceil(fraction * len(candidates))
    order = np.argsort(-ranking[candidates], kind='stable')
    keep = ~prunable
    keep[candidates[order[:n_keep]]] = True
    return keep


def prune(
    model: Model,
    params: ParamVector,
    strategy: str,
    fraction: float,
    eval_split: Split,
    scores: Optional[np.ndarray] = None,
    seed: int = 0,
) -> PruneResult:
    """Zero all but the kept parameters and evaluate against the unpruned model"""
    prunable = prunable_mask(params)
    keep = keep_top(ranking_scores(params, strategy, scores, seed), prunable, fraction)
    pruned = np.where(keep, params.data, 0.0)
    reference = model.forward(params.data, eval_split.inputs)
    outputs = model.forward(pruned, eval_split.inputs)
    predicted = np.argmax(outputs[:, :model.spec.n_classes], axis=1)
    return PruneResult(
        strategy=strategy,
        fraction=fraction,
        keep_mask=keep,
        accuracy=float(np.mean(predicted == eval_split.labels)),
        kl=mean_kl(reference, outputs),
        seed=seed if strategy == "random" else None,
        kept=int(np.sum(keep & prunable)),
        prunable=int(np.sum(prunable)),
    )


def retrain_masked(model: Model, theta: np.ndarray, keep: np.ndarray, config: RunConfig,
                   train_split: Split, steps: int) -> np.ndarray:
    """Short retraining with pruned entries held at zero"""
    opt = config.optimizer
    state = OptimizerState.initial(opt, model.size)
    batch_rng = rng_for(opt.seed, STREAM_BATCHES)
    theta = np.where(keep, theta, 0.0)
    for s in range(1, steps + 1):
        batch = sample_batch(batch_rng, len(train_split), opt.batch_size)
        _, grad = model.loss_gradient(theta, train_split.inputs[batch], train_split.labels[batch])
        theta, state = optimizer_step(theta, state, grad * keep, schedule_rate(opt.schedule, s, steps))
        theta = np.where(keep, theta, 0.0)
    return theta


def iterative_magnitude_prune(
    model: Model,
    params: ParamVector,
    fraction: float,
    config: RunConfig,
    train_split: Split,
    eval_split: Split,
) -> PruneResult:
    """Magnitude pruning in rounds of growing sparsity with retraining in between"""
    exp = config.experiments
    prunable = prunable_mask(params)
    reference = model.forward(params.data, eval_split.inputs)
    theta = np.array(params.data)
    keep = np.ones(params.size, dtype=bool)
    for round_index in range(1, exp.iterative_rounds + 1):
        keep = keep_top(np.abs(theta), prunable, fraction ** (round_index / exp.iterative_rounds))
        theta = retrain_masked(model, theta, keep, config, train_split, exp.iterative_retrain_steps)
    outputs = model.forward(theta, eval_split.inputs)
    predicted = np.argmax(outputs[:, :model.spec.n_classes], axis=1)
    return PruneResult(
        strategy="iterative_magnitude", fraction=fraction, keep_mask=keep,
        accuracy=float(np.mean(predicted == eval_split.labels)), kl=mean_kl(reference, outputs),
        kept=int(np.sum(keep & prunable)), prunable=int(np.sum(prunable)),
    )


def prune_sweep(
    model: Model,
    params: ParamVector,
    config: RunConfig,
    eval_split: Split,
    scores: Optional[np.ndarray],
    train_split: Optional[Split] = None,
) -> pd.DataFrame:
    """All configured fractions x strategies x seeds, one row per run"""
    exp = config.experiments
    rows = []
    for fraction in exp.prune_fractions:
        for strategy in exp.prune_strategies:
            seeds = exp.prune_seeds if strategy == "random" else [0]
            for seed in seeds:
                if strategy == "epk_score" and scores is None:
                    continue
                rows.append(prune(model, params, strategy, fraction, eval_split, scores, seed).summary())
        if exp.iterative_magnitude and train_split is not None:
            rows.append(iterative_magnitude_prune(model, params, fraction, config, train_split, eval_split).summary())
    return pd.DataFrame(rows)


def summarize_runs(frame: pd.DataFrame, keys: List[str], metrics: List[str]) -> pd.DataFrame:
    """Mean and standard deviation of metrics per key group"""
    grouped = frame.groupby(keys, sort=True)[metrics].agg(['mean', 'std']).fillna(0.0)
    grouped.columns = [f"{metric}_{stat}" for metric, stat in grouped.columns]
    return grouped.reset_index()


# ============================================================================
# SURGERY
# ============================================================================

def transplant(target: ParamVector, donor: ParamVector, components: Sequence[str]) -> ParamVector:
    """Copy of target with the named components taken from donor"""
    if target.registry != donor.registry:
        raise ShapeError("parameter registries differ; swap needs models of the same spec")
    data = np.array(target.data)
    for name in components:
        start, stop = donor.component_range(name)
        data[start:stop] = donor.data[start:stop]
    return target.with_data(data)


@dataclass
class SwapResult:
    source_step: int
    target_step: int
    components: List[str]
    accuracy_before: float
    accuracy_after: float
    confusion_before: np.ndarray
    confusion_after: np.ndarray

    def summary(self) -> dict:
        return {
            'source_step': self.source_step, 'target_step': self.target_step,
            'components': '+'.join(self.components) or '-',
            'accuracy_before': self.accuracy_before, 'accuracy_after': self.accuracy_after,
        }


def layer_swap(
    model: Model,
    final: ParamVector,
    checkpoint: ParamVector,
    components: Sequence[str],
    eval_split: Split,
    source_step: int,
    target_step: int,
) -> SwapResult:
    swapped = transplant(checkpoint, final, components)
    n_classes = model.spec.n_classes
    before = model.predict_labels(checkpoint.data, eval_split.inputs)
    after = model.predict_labels(swapped.data, eval_split.inputs)
    return SwapResult(
        source_step=source_step,
        target_step=target_step,
        components=list(components),
        accuracy_before=float(np.mean(before == eval_split.labels)),
        accuracy_after=float(np.mean(after == eval_split.labels)),
        confusion_before=confusion_matrix(eval_split.labels, before, n_classes),
        confusion_after=confusion_matrix(eval_split.labels, after, n_classes),
    )


@dataclass
class ReinitRun:
    donors: List[str]
    source_step: int
    seeds: List[int]
    curves: pd.DataFrame
    summary: pd.DataFrame = field(default_factory=pd.DataFrame)


def pipeline_reinit_train(
    config: RunConfig,
    donor: ParamVector,
    donors: Sequence[str],
    source_step: int,
    seeds: Sequence[int],
    train_samples: List[Sample],
    test_samples: List[Sample],
    steps: Optional[int] = None,
) -> ReinitRun:
    """
    Train from donor components of checkpoint `source_step` with the rest
    freshly initialized per seed; curves are aggregated across seeds
    """
    model = Model(config.model)
    steps = config.experiments.reinit_steps if steps is None else steps
    frames = []
    for seed in seeds:
        fresh = model.init_params(seed)
        start = transplant(fresh, donor, donors)
        run_config = config.model_copy(deep=True)
        run_config.optimizer.seed = seed
        result = train(run_config, train_samples, test_samples, initial_params=start, steps=steps, progress=False)
        curves = result.curves.copy()
        curves['seed'] = seed
        frames.append(curves)
        logger.info(f"✓ Reinit seed {seed} ({'+'.join(donors) or 'no donor'} @ {source_step}): "
                    f"test acc {curves['test_acc'].iloc[-1]:.4f}")
    curves = pd.concat(frames, ignore_index=True)
    curves['donors'] = '+'.join(donors) or '-'
    curves['source_step'] = source_step
    summary = summarize_runs(curves, ['donors', 'source_step', 'step'],
                             ['train_acc', 'test_acc', 'train_loss', 'test_loss'])
    return ReinitRun(donors=list(donors), source_step=source_step, seeds=list(seeds), curves=curves, summary=summary)


# ============================================================================
# REPORTS
# ============================================================================

def _first_step(curves: pd.DataFrame, column: str, threshold: float) -> Optional[int]:
    hits = curves.loc[curves[column] >= threshold, 'step']
    return int(hits.iloc[0]) if len(hits) else None


def grokking_report(
    curves: pd.DataFrame,
    threshold: float = 0.99,
    importance: Optional[pd.DataFrame] = None,
) -> dict:
    """
    Phase summary of a training run

    Phases that never happen are reported as None ("not reached").
    """
    memorization = _first_step(curves, 'train_acc', 1.0)
    grok = _first_step(curves, 'test_acc', threshold)
    report = {
        'memorization_step': memorization,
        'grok_step': grok,
        'gap': grok - memorization if memorization is not None and grok is not None else None,
        'threshold': threshold,
        'final_train_acc': float(curves['train_acc'].iloc[-1]),
        'final_test_acc': float(curves['test_acc'].iloc[-1]),
    }
    if importance is not None and len(importance):
        peaks: Dict[str, dict] = {}
        for name, group in importance.groupby('component', sort=True):
            best = group.loc[group['psi'].idxmax()]
            peaks[name] = {'step': int(best['step']), 'psi': float(best['psi'])}
        report['importance_peaks'] = peaks
    return report


class CheckpointEvaluator:
    """Memoized predictions of trajectory checkpoints on one split"""

    def __init__(self, log: TrajectoryLog, split: Split, max_items: int = 64):
        self.log = log
        self.split = split
        self.cache = ArrayCache(max_items=max_items)
        self.predictions = self.cache.cached("predictions")(self._predictions)

    def _predictions(self, step: int) -> np.ndarray:
        return self.log.model.predict_labels(np.asarray(self.log.theta(step)), self.split.inputs)

    def accuracy(self, step: int) -> float:
        return float(np.mean(self.predictions(step) == self.split.labels))

    def confusion(self, step: int) -> np.ndarray:
        return confusion_matrix(self.split.labels, self.predictions(step), self.log.model.spec.n_classes)
