# pathkernel/cli.py
"""
Command-line surface
train -> epk-verify -> scores / kernel-matrix / similarity / step-importance
      -> prune / swap / reinit-train / lasso -> report

Every command reads one RunConfig (preset and/or JSON file plus overrides),
writes its artifacts under <output_dir>/<name>/ and a manifest next to them.
Exit codes: 0 success, 1 validation or numerical failure, 2 missing input.
"""

import functools
import logging
import time
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import click
import numpy as np
import pandas as pd

from pathkernel import artifacts
from pathkernel.config import DEFAULT_LOG_LEVEL, PRESETS, RunConfig, load_config
from pathkernel.datasets import Split, build_dataset, export_dataset_csv
from pathkernel.epk_engine import fidelity_report
from pathkernel.error_handling import ConfigError, MissingInputError, handle_cli_errors
from pathkernel.experiments import (
    CheckpointEvaluator,
    grokking_report,
    layer_swap,
    pipeline_reinit_train,
    prune_sweep,
    summarize_runs,
)
from pathkernel.influence import (
    accumulate,
    component_vectors,
    default_windows,
    kernel_slice,
    parameter_scores,
    residue_contrast,
    similarity,
    step_importance,
)
from pathkernel.lasso import fit_similarity, frequency_features, pair_targets
from pathkernel.trajectory import FileRecorder, TrajectoryLog, load_trajectory, replay_check, train

logger = logging.getLogger(__name__)

TRAJECTORY_FILE = "trajectory.epk"


# ============================================================================
# SHARED OPTIONS
# ============================================================================

def run_options(command):
    """--config/--preset/--out/--workers/--seed/--T/--steps/--set"""
    options = [
        click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None,
                     help='JSON run configuration'),
        click.option('--preset', type=click.Choice(sorted(PRESETS)), default=None,
                     help='Start from a named preset'),
        click.option('--out', 'output_dir', default=None, help='Output root directory'),
        click.option('--workers', type=int, default=None, help='Worker processes for EPK sweeps'),
        click.option('--seed', type=int, default=None, help='Training seed'),
        click.option('--T', 'T', type=int, default=None, help='Integration steps of the test map'),
        click.option('--steps', type=int, default=None, help='Training steps'),
        click.option('--set', 'overrides', multiple=True, metavar='KEY=VALUE',
                     help='Dotted config override, e.g. optimizer.schedule.peak=0.001'),
    ]
    for option in reversed(options):
        command = option(command)
    return command


def trajectory_option(command):
    return click.option('--trajectory', type=click.Path(dir_okay=False), default=None,
                        help=f'Trajectory file (default <run dir>/{TRAJECTORY_FILE})')(command)


def build_config(config_path, preset, output_dir, workers, seed, T, steps, overrides) -> RunConfig:
    values: Dict[str, str] = {}
    for item in overrides:
        if '=' not in item:
            raise ConfigError(f"override '{item}' must look like KEY=VALUE")
        key, value = item.split('=', 1)
        values[key.strip()] = value
    flags = {
        'output_dir': output_dir,
        'epk.workers': workers,
        'optimizer.seed': seed,
        'epk.T': T,
        'optimizer.steps': steps,
    }
    values.update({k: v for k, v in flags.items() if v is not None})
    return load_config(config_path, preset, values)


class RunContext:
    """Config, run directory and bookkeeping for one command invocation"""

    def __init__(self, command: str, config: RunConfig, trajectory: Optional[str] = None):
        self.command = command
        self.config = config
        self.run_dir = config.run_dir
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.trajectory_path = Path(trajectory) if trajectory else self.run_dir / TRAJECTORY_FILE
        self.outputs: List[Path] = []
        self.inputs: Dict[str, str] = {}
        self.started = time.perf_counter()
        self.timings: Dict[str, float] = {}
        self._log: Optional[TrajectoryLog] = None

    @property
    def log(self) -> TrajectoryLog:
        if self._log is None:
            if not self.trajectory_path.exists():
                raise MissingInputError(
                    f"trajectory not found: {self.trajectory_path} (run `pathkernel train` first)"
                )
            self._log = load_trajectory(self.trajectory_path)
            self.inputs['trajectory'] = str(self.trajectory_path)
        return self._log

    def test_split(self) -> Split:
        return self.log.test.head(self.config.epk.test_limit)

    def components(self) -> List[str]:
        return list(self.config.epk.components) or self.log.params(0).component_names

    def windows(self) -> List[Tuple[int, int]]:
        windows = [tuple(w) for w in self.config.epk.windows]
        return windows or default_windows(self.log.n_steps, self.config.epk.window_size)

    def last_window(self) -> Tuple[int, int]:
        windows = self.windows()
        if not windows:
            raise ConfigError("trajectory has no steps to analyze")
        return windows[-1]

    def path(self, name: str) -> Path:
        path = self.run_dir / name
        self.outputs.append(path)
        return path

    def finish(self):
        opt, data = self.config.optimizer, self.config.dataset
        artifacts.write_manifest(
            self.run_dir,
            self.command,
            self.config.model_dump(mode='json'),
            self.inputs,
            self.outputs,
            {'init': opt.seed, 'batches': opt.seed, 'dataset': data.seed},
            time.perf_counter() - self.started,
            timings=self.timings,
        )
        logger.info(f"✓ {self.command}: {len(self.outputs)} artifacts in {self.run_dir}")


def pathkernel_command(name: str, needs_trajectory: bool = True):
    """Register a command with the shared options, error handling and RunContext"""
    def decorator(func):
        @functools.wraps(func)
        def wrapper(config_path, preset, output_dir, workers, seed, T, steps, overrides,
                    trajectory=None, **kwargs):
            config = build_config(config_path, preset, output_dir, workers, seed, T, steps, overrides)
            ctx = RunContext(name, config, trajectory)
            if config_path:
                ctx.inputs['config'] = str(config_path)
            func(ctx, T=T, **kwargs)
            ctx.finish()

        command = handle_cli_errors(wrapper)
        if needs_trajectory:
            command = trajectory_option(command)
        return cli.command(name)(run_options(command))
    return decorator


@click.group()
@click.option('--log-level', default=DEFAULT_LOG_LEVEL, show_default=True,
              type=click.Choice(['DEBUG', 'INFO', 'WARNING', 'ERROR'], case_sensitive=False))
def cli(log_level: str):
    """Exact path kernel analysis of small trained models"""
    logging.basicConfig(
        level=getattr(logging, log_level.upper()),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        force=True,
    )


# ============================================================================
# COMMANDS
# ============================================================================

@pathkernel_command("train", needs_trajectory=False)
def train_command(ctx: RunContext, T=None):
    """Train the configured model and record its trajectory"""
    config = ctx.config
    train_samples, test_samples = build_dataset(config.dataset, config.model)
    export_dataset_csv(ctx.path("dataset.csv"), train_samples, test_samples)
    recorder = FileRecorder(ctx.path(TRAJECTORY_FILE))
    result = train(config, train_samples, test_samples, recorder=recorder)
    artifacts.write_csv(result.curves, ctx.path("curves.csv"))
    artifacts.curves_svg(result.curves, ctx.path("curves.svg"), title=config.name)
    final = result.curves.iloc[-1]
    click.echo(f"trained {config.optimizer.steps} steps: "
               f"train acc {final['train_acc']:.4f}, test acc {final['test_acc']:.4f}")


@pathkernel_command("epk-verify")
def epk_verify_command(ctx: RunContext, T=None):
    """Replay the trajectory and measure EPK reconstruction fidelity"""
    log = ctx.log
    replay_check(log, strict=True)
    T_values = [T] if T is not None else list(ctx.config.epk.T_values)
    test = ctx.test_split()
    report = fidelity_report(log, test.inputs, T_values, workers=ctx.config.epk.workers, timings=ctx.timings)
    report['replay_ok'] = True
    artifacts.write_json(report, ctx.path("fidelity.json"))
    for result in report['results']:
        click.echo(f"T={result['T']}: agreement {result['agreement']:.4f}, mean KL {result['mean_kl']:.3e}")


@pathkernel_command("scores")
def scores_command(ctx: RunContext, T=None):
    """Influence tables over components x windows x test x train"""
    epk = ctx.config.epk
    test = ctx.test_split()
    table = accumulate(ctx.log, test.inputs, ctx.components(), ctx.windows(), epk.T,
                       per_output=epk.per_output, workers=epk.workers)
    artifacts.write_csv(table.kernel_frame(), ctx.path("scores_kernel.csv"))
    artifacts.write_csv(table.reg_frame(), ctx.path("scores_reg.csv"))
    kernel_scores = table.component_scores()
    reg_scores = table.reg.sum(axis=-1) if table.per_output else table.reg
    rows = []
    for c, name in enumerate(table.components):
        for w, (start, end) in enumerate(table.windows):
            rows.append({
                'component': name, 'window_start': start, 'window_end': end,
                'psi': float(np.abs(kernel_scores[c, w]).sum()),
                'psi_reg': float(np.abs(reg_scores[c, w]).sum()),
            })
    artifacts.write_csv(pd.DataFrame(rows), ctx.path("scores_components.csv"))
    click.echo(f"scored {len(table.components)} components over {len(table.windows)} windows")


@pathkernel_command("kernel-matrix")
@click.option('--log-scale/--linear-scale', default=True, help='Color scale of the heatmaps')
def kernel_matrix_command(ctx: RunContext, T=None, log_scale=True):
    """Test x train kernel slices of one component per step window"""
    log, exp = ctx.log, ctx.config.experiments
    test = ctx.test_split()
    summary = []
    for start, end in ctx.windows():
        kslice = kernel_slice(log, test.inputs, test.labels, test.sums, exp.kernel_component,
                              (start, end), ctx.config.epk.T, workers=ctx.config.epk.workers)
        stem = f"kernel_{exp.kernel_component}_{start}-{end}"
        artifacts.write_csv(kslice.to_frame(), ctx.path(f"{stem}.csv"), index=True)
        artifacts.heatmap_svg(
            kslice.values, ctx.path(f"{stem}.svg"),
            title=f"EPK {exp.kernel_component}, steps {start}-{end}",
            row_labels=list(kslice.to_frame().index), col_labels=list(kslice.to_frame().columns),
            log_scale=log_scale,
        )
        summary.append({'window': [start, end], 'residue_contrast': kslice.residue_contrast()})
    artifacts.write_json({'component': exp.kernel_component, 'windows': summary}, ctx.path("kernel_matrix.json"))
    for row in summary:
        click.echo(f"steps {row['window'][0]}-{row['window'][1]}: residue contrast {row['residue_contrast']:.3f}")


def _similarity_for(ctx: RunContext, component: str):
    test = ctx.test_split()
    window = ctx.last_window()
    vectors = component_vectors(ctx.log, test.inputs, component, window, ctx.config.epk.T,
                                workers=ctx.config.epk.workers)
    return test, window, similarity(vectors)


@pathkernel_command("similarity")
def similarity_command(ctx: RunContext, T=None):
    """Cosine similarity of component influence vectors over the last window"""
    component = ctx.config.experiments.similarity_component
    test, window, matrix = _similarity_for(ctx, component)
    labels = [str(int(y)) for y in test.labels]
    artifacts.write_csv(artifacts.matrix_frame(matrix.to_frame().values, labels), ctx.path("similarity.csv"), index=True)
    artifacts.heatmap_svg(matrix.values, ctx.path("similarity.svg"),
                          title=f"similarity {component}, steps {window[0]}-{window[1]}")
    same = test.labels[:, None] == test.labels[None, :]
    off_diagonal = ~np.eye(len(test), dtype=bool) & ~matrix.missing
    report = {
        'component': component,
        'window': list(window),
        'mean_same_label': float(matrix.values[same & off_diagonal].mean()) if np.any(same & off_diagonal) else None,
        'mean_other_label': float(matrix.values[~same & off_diagonal].mean()) if np.any(~same & off_diagonal) else None,
        'missing_rows': int(np.sum(matrix.missing.all(axis=1))),
    }
    artifacts.write_json(report, ctx.path("similarity.json"))
    click.echo(f"same-label mean {report['mean_same_label']}, other-label mean {report['mean_other_label']}")


@pathkernel_command("step-importance")
def step_importance_command(ctx: RunContext, T=None):
    """Per-step absolute influence, regularization influence and D series"""
    test = ctx.test_split()
    frame = step_importance(ctx.log, test.inputs, ctx.components(), ctx.config.epk.T,
                            workers=ctx.config.epk.workers)
    artifacts.write_csv(frame, ctx.path("step_importance.csv"))
    artifacts.series_svg(frame, ctx.path("step_importance.svg"), 'psi', title="step importance", log_scale=True)
    artifacts.series_svg(frame, ctx.path("step_importance_reg.svg"), 'psi_reg', title="regularization influence",
                         log_scale=True)
    artifacts.series_svg(frame, ctx.path("step_importance_D.svg"), 'D', title="kernel minus regularization")
    if len(frame):
        peak = frame.loc[frame['psi'].idxmax()]
        click.echo(f"largest step importance: {peak['component']} at step {int(peak['step'])}")


@pathkernel_command("prune")
def prune_command(ctx: RunContext, T=None):
    """Pruning sweep: EPK scores against magnitude and random baselines"""
    log, config = ctx.log, ctx.config
    final = log.params(log.n_steps)
    scores = None
    if "epk_score" in config.experiments.prune_strategies:
        scores = parameter_scores(log, log.train.inputs, config.epk.T, workers=config.epk.workers)
        artifacts.write_csv(pd.DataFrame({'score': scores}), ctx.path("parameter_scores.csv"))
    frame = prune_sweep(log.model, final, config, log.test, scores, train_split=log.train)
    artifacts.write_csv(frame, ctx.path("prune.csv"))
    summary = summarize_runs(frame, ['strategy', 'fraction'], ['accuracy', 'kl'])
    artifacts.write_csv(summary, ctx.path("prune_summary.csv"))
    unpruned = log.model.accuracy(final.data, log.test.inputs, log.test.labels)
    artifacts.write_json({'unpruned_accuracy': unpruned, 'summary': summary.to_dict(orient='records')},
                         ctx.path("prune.json"))
    for row in summary.itertuples(index=False):
        click.echo(f"{row.strategy} c={row.fraction}: acc {row.accuracy_mean:.4f}, KL {row.kl_mean:.3e}")


@pathkernel_command("swap")
def swap_command(ctx: RunContext, T=None):
    """Swap components of the final model into earlier checkpoints"""
    log, exp = ctx.log, ctx.config.experiments
    if not exp.swap_steps:
        raise ConfigError("experiments.swap_steps is empty")
    final = log.params(log.n_steps)
    evaluator = CheckpointEvaluator(log, log.test)
    rows = []
    for step in exp.swap_steps:
        checkpoint = log.params(step)
        stem = f"confusion_step{step}"
        artifacts.write_csv(artifacts.matrix_frame(evaluator.confusion(step)), ctx.path(f"{stem}.csv"), index=True)
        artifacts.heatmap_svg(evaluator.confusion(step), ctx.path(f"{stem}.svg"), title=f"checkpoint {step}")
        for components in exp.swap_sets:
            result = layer_swap(log.model, final, checkpoint, components, log.test, log.n_steps, step)
            row = result.summary()
            row['final_accuracy'] = evaluator.accuracy(log.n_steps)
            rows.append(row)
            swapped = f"{stem}_{'+'.join(components) or 'none'}"
            artifacts.write_csv(artifacts.matrix_frame(result.confusion_after), ctx.path(f"{swapped}.csv"), index=True)
            artifacts.heatmap_svg(result.confusion_after, ctx.path(f"{swapped}.svg"),
                                  title=f"checkpoint {step} with final {'+'.join(components)}")
            click.echo(f"step {step} + {row['components']}: {result.accuracy_before:.4f} -> {result.accuracy_after:.4f}")
    artifacts.write_csv(pd.DataFrame(rows), ctx.path("swap.csv"))


@pathkernel_command("reinit-train")
def reinit_train_command(ctx: RunContext, T=None):
    """Retrain from donor components over the configured grid of sources and seeds"""
    log, exp = ctx.log, ctx.config.experiments
    if not exp.reinit_source_steps:
        raise ConfigError("experiments.reinit_source_steps is empty")
    config = log.config.model_copy(update={'experiments': exp})
    curves, summaries = [], []
    for source_step in exp.reinit_source_steps:
        donor = log.params(source_step)
        for donors in exp.reinit_donors:
            run = pipeline_reinit_train(config, donor, donors, source_step, exp.reinit_seeds,
                                        log.train.samples, log.test.samples)
            curves.append(run.curves)
            summaries.append(run.summary)
            final = run.summary.iloc[-1]
            click.echo(f"{'+'.join(donors) or 'none'} @ {source_step}: "
                       f"test acc {final['test_acc_mean']:.4f} +- {final['test_acc_std']:.4f}")
    summary = pd.concat(summaries, ignore_index=True)
    artifacts.write_csv(pd.concat(curves, ignore_index=True), ctx.path("reinit_curves.csv"))
    artifacts.write_csv(summary, ctx.path("reinit_summary.csv"))
    artifacts.band_svg(summary.assign(run=summary['donors'] + '@' + summary['source_step'].astype(str)),
                       ctx.path("reinit.svg"), 'run', 'test_acc', title="test accuracy after reinit")


@pathkernel_command("lasso")
@click.option('--penalty', type=float, default=None, help='Fixed Lasso penalty (default: sweep a path)')
def lasso_command(ctx: RunContext, T=None, penalty=None):
    """Fit the component similarity with periodic features of the input-sum difference"""
    exp = ctx.config.experiments
    test, window, matrix = _similarity_for(ctx, exp.lasso_component)
    if test.sums is None:
        raise ConfigError("lasso needs the mod-add dataset (samples with operand sums)")
    selected, fits = fit_similarity(
        matrix.values, test.sums, exp.lasso_freq_min, exp.lasso_freq_max,
        penalty=penalty, missing=matrix.missing, n_lambdas=exp.lasso_n_lambdas, max_sweeps=exp.lasso_max_sweeps,
    )
    path_rows = [{'penalty': f.penalty, 'dominant': f.dominant or '', 'nonzero': len(f.nonzero),
                  'objective': f.objective_history[-1], 'sweeps': f.sweeps} for f in fits]
    artifacts.write_csv(pd.DataFrame(path_rows), ctx.path("lasso_path.csv"))
    artifacts.write_csv(selected.to_frame(), ctx.path("lasso_coefficients.csv"))
    deltas, targets = pair_targets(matrix.values, test.sums, matrix.missing)
    features, _ = frequency_features(deltas, exp.lasso_freq_min, exp.lasso_freq_max)
    artifacts.write_csv(pd.DataFrame({'delta': deltas, 'similarity': targets,
                                      'prediction': selected.predict(features)}),
                        ctx.path("lasso_predictions.csv"))
    top = sorted(selected.nonzero.items(), key=lambda item: -abs(item[1]))[:10]
    artifacts.write_json({
        'component': exp.lasso_component, 'window': list(window), 'penalty': selected.penalty,
        'dominant': selected.dominant, 'intercept': selected.intercept, 'top_coefficients': dict(top),
    }, ctx.path("lasso.json"))
    click.echo(f"dominant feature {selected.dominant} at penalty {selected.penalty:.3e}")


@pathkernel_command("report", needs_trajectory=False)
def report_command(ctx: RunContext, T=None):
    """Grokking phase summary from curves.csv (and step_importance.csv when present)"""
    curves_path = ctx.run_dir / "curves.csv"
    if not curves_path.exists():
        raise MissingInputError(f"training curves not found: {curves_path}")
    ctx.inputs['curves'] = str(curves_path)
    curves = pd.read_csv(curves_path)
    importance_path = ctx.run_dir / "step_importance.csv"
    importance = None
    if importance_path.exists():
        importance = pd.read_csv(importance_path)
        ctx.inputs['step_importance'] = str(importance_path)
    report = grokking_report(curves, ctx.config.experiments.grok_threshold, importance)
    artifacts.write_json(report, ctx.path("report.json"))

    def _fmt(value):
        return "not reached" if value is None else value

    click.echo(f"memorization step: {_fmt(report['memorization_step'])}, "
               f"grok step: {_fmt(report['grok_step'])}, gap: {_fmt(report['gap'])}")


def main():
    cli(prog_name="pathkernel")


if __name__ == "__main__":
    main()
