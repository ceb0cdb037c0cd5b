# pathkernel/artifacts.py
"""
Artifact writers: CSV (pandas), JSON, SVG figures (matplotlib) and run manifests
Numbers are written with 17 significant digits so they read back exactly
"""

import json
import logging
import platform
from datetime import datetime
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, List, Optional

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import pytz  # noqa: E402
from matplotlib.colors import LogNorm  # noqa: E402

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
SVG_METADATA = {"Date": None}


def _prepare(path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def write_csv(frame: pd.DataFrame, path: Path, index: bool = False) -> Path:
    path = _prepare(path)
    frame.to_csv(path, index=index, float_format=FLOAT_FORMAT, na_rep="", lineterminator="\n")
    logger.debug(f"Wrote {path}")
    return path


def matrix_frame(matrix: np.ndarray, labels: Optional[List[str]] = None) -> pd.DataFrame:
    frame = pd.DataFrame(matrix, index=labels, columns=labels)
    frame.index.name = 'row'
    return frame


def _json_default(value: Any):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")


def write_json(data: Dict[str, Any], path: Path) -> Path:
    path = _prepare(path)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n")
    logger.debug(f"Wrote {path}")
    return path


# ============================================================================
# FIGURES
# ============================================================================

def _save(fig, path: Path) -> Path:
    path = _prepare(path)
    fig.savefig(path, format="svg", metadata=SVG_METADATA, bbox_inches="tight")
    plt.close(fig)
    logger.debug(f"Wrote {path}")
    return path


def heatmap_svg(
    matrix: np.ndarray,
    path: Path,
    title: str = "",
    row_labels: Optional[List[str]] = None,
    col_labels: Optional[List[str]] = None,
    log_scale: bool = False,
    cmap: str = "viridis",
) -> Path:
    """Heatmap with a linear color map, or of |values| on a log scale"""
    values = np.asarray(matrix, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(6, 5))
    if log_scale:
        magnitude = np.abs(values)
        positive = magnitude[magnitude > 0]
        floor = positive.min() if positive.size else 1.0
        image = ax.imshow(np.maximum(magnitude, floor), cmap=cmap, aspect="auto",
                          norm=LogNorm(vmin=floor, vmax=max(floor, magnitude.max())))
    else:
        image = ax.imshow(np.nan_to_num(values), cmap=cmap, aspect="auto")
    fig.colorbar(image, ax=ax, label="(log)" if log_scale else None)
    if row_labels is not None and len(row_labels) <= 60:
        ax.set_yticks(range(len(row_labels)))
        ax.set_yticklabels(row_labels, fontsize=5)
    if col_labels is not None and len(col_labels) <= 60:
        ax.set_xticks(range(len(col_labels)))
        ax.set_xticklabels(col_labels, fontsize=5, rotation=90)
    ax.set_title(title)
    return _save(fig, path)


def curves_svg(curves: pd.DataFrame, path: Path, title: str = "Training curves") -> Path:
    """Train/test accuracy and loss against step"""
    fig, (acc_ax, loss_ax) = plt.subplots(1, 2, figsize=(10, 4))
    for split in ("train", "test"):
        acc_ax.plot(curves['step'], curves[f'{split}_acc'], label=split)
        loss_ax.plot(curves['step'], curves[f'{split}_loss'], label=split)
    acc_ax.set_xlabel("step")
    acc_ax.set_ylabel("accuracy")
    loss_ax.set_xlabel("step")
    loss_ax.set_ylabel("loss")
    loss_ax.set_yscale("log")
    acc_ax.legend()
    fig.suptitle(title)
    return _save(fig, path)


def band_svg(summary: pd.DataFrame, path: Path, group: str, metric: str, title: str = "") -> Path:
    """Mean curve with a one-standard-deviation band per group"""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, frame in summary.groupby(group, sort=True):
        mean, std = frame[f"{metric}_mean"], frame[f"{metric}_std"]
        ax.plot(frame['step'], mean, label=str(name))
        ax.fill_between(frame['step'], mean - std, mean + std, alpha=0.2)
    ax.set_xlabel("step")
    ax.set_ylabel(metric)
    ax.legend(fontsize=7)
    ax.set_title(title)
    return _save(fig, path)


def series_svg(frame: pd.DataFrame, path: Path, value: str, group: str = "component",
               title: str = "", log_scale: bool = False) -> Path:
    """One line per group of a long-format per-step series"""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, part in frame.groupby(group, sort=True):
        ax.plot(part['step'], part[value], label=str(name))
    ax.set_xlabel("step")
    ax.set_ylabel(value)
    if log_scale:
        ax.set_yscale("symlog")
    ax.legend(fontsize=7)
    ax.set_title(title)
    return _save(fig, path)


# ============================================================================
# MANIFEST
# ============================================================================

def package_versions() -> Dict[str, str]:
    from pathkernel import __version__

    versions = {'pathkernel': __version__, 'python': platform.python_version()}
    for package in ('numpy', 'pandas', 'matplotlib', 'pydantic', 'click', 'tqdm'):
        try:
            versions[package] = metadata.version(package)
        except metadata.PackageNotFoundError:
            versions[package] = 'unknown'
    return versions


def write_manifest(
    run_dir: Path,
    command: str,
    config: Dict[str, Any],
    inputs: Dict[str, str],
    outputs: List[Path],
    seeds: Dict[str, int],
    wall_time: float,
    timings: Optional[Dict[str, float]] = None,
) -> Path:
    """manifest-<command>.json: what went in, what came out, how long it took"""
    manifest = {
        'command': command,
        'config': config,
        'inputs': inputs,
        'outputs': sorted(str(Path(p).name) for p in outputs),
        'seeds': seeds,
        'versions': package_versions(),
        'wall_time_seconds': round(wall_time, 3),
        'timings_seconds': {name: round(seconds, 3) for name, seconds in (timings or {}).items()},
        'finished_at': datetime.now(pytz.utc).isoformat(),
    }
    return write_json(manifest, Path(run_dir) / f"manifest-{command}.json")
