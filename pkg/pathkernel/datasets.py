# pathkernel/datasets.py
"""
Datasets for the study models
- modadd: all pairs a >= b of [a, +, b, mod p =] with label (a + b) mod p
- blobs: seeded Gaussian class clusters for the MLP and linear models
CSV export/import with columns a,b,label,split (blobs: x0..x{d-1},label,split)
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator

from pathkernel.config import DatasetConfig, ModelSpec
from pathkernel.error_handling import InvalidInputError, MissingInputError
from pathkernel.models import STREAM_DATASET, rng_for

logger = logging.getLogger(__name__)


class Sample(BaseModel):
    """One example; mod-add samples carry tokens, blob samples carry features"""
    label: int = Field(ge=0)
    tokens: Optional[List[int]] = None
    features: Optional[List[float]] = None
    a: Optional[int] = None
    b: Optional[int] = None

    @model_validator(mode='after')
    def check_sample(self):
        if (self.tokens is None) == (self.features is None):
            raise ValueError("a sample carries either tokens or features")
        if self.a is not None and self.b is not None and self.a < self.b:
            raise ValueError(f"mod-add samples enforce a >= b, got a={self.a}, b={self.b}")
        return self

    @classmethod
    def modadd(cls, a: int, b: int, p: int) -> "Sample":
        if not (0 <= b <= a < p):
            raise InvalidInputError(f"operands must satisfy 0 <= b <= a < {p}, got a={a}, b={b}")
        return cls(tokens=[a, p, b, p + 1], label=(a + b) % p, a=a, b=b)

    @property
    def sum(self) -> Optional[int]:
        """a + b, used to order kernel matrices"""
        if self.a is None or self.b is None:
            return None
        return self.a + self.b


@dataclass
class Split:
    """Array view of a list of samples, ready for batched evaluation"""

    samples: List[Sample]
    inputs: np.ndarray = field(init=False)
    labels: np.ndarray = field(init=False)
    sums: Optional[np.ndarray] = field(init=False)

    def __post_init__(self):
        if self.samples and self.samples[0].tokens is not None:
            self.inputs = np.array([s.tokens for s in self.samples], dtype=np.int64).reshape(-1, 4)
            self.sums = np.array([s.sum for s in self.samples], dtype=np.int64)
        else:
            width = len(self.samples[0].features) if self.samples else 0
            self.inputs = np.array([s.features for s in self.samples], dtype=np.float64).reshape(-1, width)
            self.sums = None
        self.labels = np.array([s.label for s in self.samples], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.samples)

    def head(self, limit: Optional[int]) -> "Split":
        if limit is None or limit >= len(self.samples):
            return self
        return Split(self.samples[:limit])


# ============================================================================
# GENERATORS
# ============================================================================

def _split_indices(n: int, train_fraction: float, seed: int,
                   train_size: Optional[int], test_size: Optional[int]) -> Tuple[np.ndarray, np.ndarray]:
    order = rng_for(seed, STREAM_DATASET).permutation(n)
    n_train = train_size if train_size is not None else int(round(train_fraction * n))
    n_train = min(max(n_train, 1), n - 1)
    train_idx, test_idx = order[:n_train], order[n_train:]
    if test_size is not None:
        test_idx = test_idx[:test_size]
    return train_idx, test_idx


def generate_dataset(
    p: int,
    train_fraction: float,
    seed: int,
    include_diagonal: bool = False,
    train_size: Optional[int] = None,
    test_size: Optional[int] = None,
) -> Tuple[List[Sample], List[Sample]]:
    """
    Enumerate the mod-add pairs and split them with a seeded shuffle

    Args:
        p: modulus
        train_fraction: share of pairs used for training (ignored with train_size)
        include_diagonal: keep a == b pairs (p(p+1)/2 pairs); the default drops them (p(p-1)/2, 6328 at p=113)
        train_size / test_size: absolute sizes; test is drawn from the remainder

    Example:
        generate_dataset(113, 0.3, 0, train_size=4000, test_size=2000)
        -> 4000 train / 2000 test out of 6328 pairs
    """
    if not 0 < train_fraction < 1:
        raise InvalidInputError(f"train fraction must lie in (0, 1), got {train_fraction}")
    pairs = [(a, b) for a in range(p) for b in range(a + 1) if include_diagonal or a != b]
    if len(pairs) < 2:
        raise InvalidInputError(f"p={p} yields {len(pairs)} pairs, need at least 2")
    train_idx, test_idx = _split_indices(len(pairs), train_fraction, seed, train_size, test_size)
    train = [Sample.modadd(*pairs[i], p) for i in train_idx]
    test = [Sample.modadd(*pairs[i], p) for i in test_idx]
    logger.info(f"✓ mod-{p} dataset: {len(pairs)} pairs, {len(train)} train / {len(test)} test")
    return train, test


def generate_blobs(
    n_samples: int,
    input_dim: int,
    n_classes: int,
    train_fraction: float,
    seed: int,
    separation: float = 2.0,
    noise: float = 1.0,
) -> Tuple[List[Sample], List[Sample]]:
    """Balanced Gaussian clusters with centers at distance `separation` from the origin"""
    if not 0 < train_fraction < 1:
        raise InvalidInputError(f"train fraction must lie in (0, 1), got {train_fraction}")
    rng = rng_for(seed, STREAM_DATASET)
    directions = rng.standard_normal((n_classes, input_dim))
    centers = separation * directions / np.linalg.norm(directions, axis=1, keepdims=True)
    labels = np.arange(n_samples) % n_classes
    features = centers[labels] + noise * rng.standard_normal((n_samples, input_dim))
    samples = [Sample(features=row.tolist(), label=int(y)) for row, y in zip(features, labels)]
    train_idx, test_idx = _split_indices(n_samples, train_fraction, seed, None, None)
    logger.info(f"✓ blobs dataset: {n_samples} samples in {n_classes} classes, dim {input_dim}")
    return [samples[i] for i in train_idx], [samples[i] for i in test_idx]


def build_dataset(config: DatasetConfig, spec: ModelSpec) -> Tuple[List[Sample], List[Sample]]:
    if config.kind == "modadd":
        return generate_dataset(
            config.p, config.train_fraction, config.seed,
            include_diagonal=config.include_diagonal,
            train_size=config.train_size, test_size=config.test_size,
        )
    return generate_blobs(
        config.n_samples, spec.input_dim, spec.output_dim, config.train_fraction, config.seed,
        separation=config.separation, noise=config.noise,
    )


# ============================================================================
# CSV
# ============================================================================

def dataset_frame(train: List[Sample], test: List[Sample]) -> pd.DataFrame:
    rows = []
    for split, samples in (("train", train), ("test", test)):
        for s in samples:
            if s.tokens is not None:
                rows.append({'a': s.a, 'b': s.b, 'label': s.label, 'split': split})
            else:
                row = {f"x{i}": v for i, v in enumerate(s.features)}
                row.update({'label': s.label, 'split': split})
                rows.append(row)
    return pd.DataFrame(rows)


def export_dataset_csv(path: Path, train: List[Sample], test: List[Sample]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dataset_frame(train, test).to_csv(path, index=False, float_format="%.17g")
    return path


def import_dataset_csv(path: Path, p: Optional[int] = None) -> Tuple[List[Sample], List[Sample]]:
    """Read a CSV written by export_dataset_csv; mod-add files need the modulus p"""
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"dataset file not found: {path}")
    frame = pd.read_csv(path)
    missing = {'label', 'split'} - set(frame.columns)
    if missing:
        raise InvalidInputError(f"dataset {path} lacks columns {sorted(missing)}")
    is_modadd = {'a', 'b'} <= set(frame.columns)
    if is_modadd and p is None:
        raise InvalidInputError("importing a mod-add dataset requires the modulus p")
    feature_cols = [c for c in frame.columns if c.startswith('x')]
    splits = {'train': [], 'test': []}
    for row in frame.itertuples(index=False):
        row = row._asdict()
        if is_modadd:
            sample = Sample.modadd(int(row['a']), int(row['b']), p)
        else:
            sample = Sample(features=[float(row[c]) for c in feature_cols], label=int(row['label']))
        splits.setdefault(row['split'], []).append(sample)
    return splits['train'], splits['test']
