# pathkernel/trajectory.py
"""
Training loop, trajectory recording and the on-disk trajectory format

File layout (all little-endian):
    b"EPKTRAJ\\n"                     8 bytes magic
    header length                    uint64
    JSON header                      space-padded to a multiple of 4096 bytes
    N + 1 records                    theta <f8[D], m <f8[D], v <f8[D], lr <f8, mask u1[ceil(M/8)]

Record s holds theta_s, the optimizer moments after update s, the rate a_s and
the batch of update s (record 0: initial parameters, a_0 = 0, empty batch).
The header is written when recording starts and rewritten with the final step
count when it ends, so an interrupted run still loads up to its last record.
"""

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from tqdm import tqdm

from pathkernel.config import RunConfig
from pathkernel.datasets import Sample, Split
from pathkernel.error_handling import (
    MissingInputError,
    NonFiniteError,
    ReplayMismatchError,
    TrajectoryFormatError,
)
from pathkernel.models import STREAM_BATCHES, Model, ParamVector, rng_for
from pathkernel.optimizers import OptimizerState, optimizer_step, schedule_rate

logger = logging.getLogger(__name__)

MAGIC = b"EPKTRAJ\n"
FORMAT_VERSION = 1
HEADER_ALIGN = 4096
ENDIANNESS = "little"


def record_dtype(size: int, n_train: int) -> np.dtype:
    return np.dtype([
        ('theta', '<f8', (size,)),
        ('m', '<f8', (size,)),
        ('v', '<f8', (size,)),
        ('lr', '<f8'),
        ('mask', 'u1', (max(1, math.ceil(n_train / 8)),)),
    ])


def pack_mask(indices: np.ndarray, n_train: int) -> np.ndarray:
    bits = np.zeros(n_train, dtype=bool)
    bits[indices] = True
    return np.packbits(bits, bitorder='little')


@dataclass
class TrajectoryLog:
    """Checkpoints 0..N of one training run plus everything needed to interpret them"""

    config: RunConfig
    records: np.ndarray
    train: Split
    test: Split

    def __post_init__(self):
        self.model = Model(self.config.model)

    @property
    def n_steps(self) -> int:
        return len(self.records) - 1

    @property
    def size(self) -> int:
        return self.model.size

    @property
    def weight_decay(self) -> float:
        return self.config.optimizer.weight_decay

    def _check_step(self, step: int):
        if not 0 <= step <= self.n_steps:
            raise MissingInputError(f"trajectory has no checkpoint for step {step} (steps 0..{self.n_steps})")

    def theta(self, step: int) -> np.ndarray:
        self._check_step(step)
        return self.records['theta'][step]

    def m(self, step: int) -> np.ndarray:
        self._check_step(step)
        return self.records['m'][step]

    def v(self, step: int) -> np.ndarray:
        self._check_step(step)
        return self.records['v'][step]

    def lr(self, step: int) -> float:
        self._check_step(step)
        return float(self.records['lr'][step])

    def batch_mask(self, step: int) -> np.ndarray:
        """Boolean membership of each train sample in the batch of update `step`"""
        self._check_step(step)
        bits = np.unpackbits(self.records['mask'][step], bitorder='little')
        return bits[:len(self.train)].astype(bool)

    def batch_indices(self, step: int) -> np.ndarray:
        return np.flatnonzero(self.batch_mask(step))

    def params(self, step: int) -> ParamVector:
        return self.model.wrap(np.array(self.theta(step)))

    def header(self) -> dict:
        return trajectory_header(self.config, self.size, len(self.train), self.n_steps, self.train, self.test)


def trajectory_header(config: RunConfig, size: int, n_train: int, n_steps: int,
                      train: Split, test: Split) -> dict:
    return {
        'format_version': FORMAT_VERSION,
        'endianness': ENDIANNESS,
        'D': size,
        'M': n_train,
        'N': n_steps,
        'spec': config.model.model_dump(mode='json'),
        'config': config.model_dump(mode='json'),
        'seeds': {
            'init': config.optimizer.seed,
            'batches': config.optimizer.seed,
            'dataset': config.dataset.seed,
        },
        'train': [s.model_dump(exclude_none=True) for s in train.samples],
        'test': [s.model_dump(exclude_none=True) for s in test.samples],
    }


# ============================================================================
# RECORDERS
# ============================================================================

class TrajectoryRecorder:
    """Collects records in memory; subclasses stream them somewhere"""

    def __init__(self):
        self.header: Optional[dict] = None
        self.dtype: Optional[np.dtype] = None
        self.rows: List[np.ndarray] = []
        self.count = 0

    def open(self, header: dict):
        self.header = dict(header)
        self.dtype = record_dtype(header['D'], header['M'])
        self.rows = []
        self.count = 0

    def _row(self, theta, m, v, lr, mask) -> np.ndarray:
        row = np.zeros(1, dtype=self.dtype)
        row['theta'][0] = theta
        row['m'][0] = m
        row['v'][0] = v
        row['lr'][0] = lr
        row['mask'][0] = mask
        return row

    def record(self, theta: np.ndarray, m: np.ndarray, v: np.ndarray, lr: float, mask: np.ndarray):
        self.rows.append(self._row(theta, m, v, lr, mask))
        self.count += 1

    def close(self) -> np.ndarray:
        """Finish recording and return the record array"""
        if not self.rows:
            return np.zeros(0, dtype=self.dtype)
        return np.concatenate(self.rows)


class FileRecorder(TrajectoryRecorder):
    """Streams each record to disk as soon as it is produced"""

    def __init__(self, path: Path):
        super().__init__()
        self.path = Path(path)
        self.handle = None
        self.header_length = 0

    def _encode_header(self, header: dict) -> bytes:
        return json.dumps(header, sort_keys=True).encode('utf-8')

    def open(self, header: dict):
        super().open(header)
        encoded = self._encode_header(header)
        self.header_length = math.ceil((len(encoded) + 64) / HEADER_ALIGN) * HEADER_ALIGN
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.handle = open(self.path, 'wb')
        self.handle.write(MAGIC)
        self.handle.write(np.uint64(self.header_length).astype('<u8').tobytes())
        self.handle.write(encoded.ljust(self.header_length, b' '))

    def record(self, theta, m, v, lr, mask):
        self.handle.write(self._row(theta, m, v, lr, mask).tobytes())
        self.count += 1

    def close(self) -> np.ndarray:
        if self.handle is None:
            raise TrajectoryFormatError("recorder closed before it was opened")
        self.header['N'] = self.count - 1
        encoded = self._encode_header(self.header)
        if len(encoded) > self.header_length:
            raise TrajectoryFormatError(f"final header of {len(encoded)} bytes exceeds reserved {self.header_length}")
        self.handle.seek(len(MAGIC) + 8)
        self.handle.write(encoded.ljust(self.header_length, b' '))
        self.handle.close()
        self.handle = None
        logger.info(f"✓ Trajectory written: {self.path} ({self.count} records)")
        return _read_records(self.path)[1]


def save_trajectory(log: TrajectoryLog, path: Path) -> Path:
    recorder = FileRecorder(path)
    recorder.open(log.header())
    for row in log.records:
        recorder.record(row['theta'], row['m'], row['v'], row['lr'], row['mask'])
    recorder.close()
    return Path(path)


def _read_records(path: Path):
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"trajectory file not found: {path}")
    file_size = path.stat().st_size
    with open(path, 'rb') as handle:
        magic = handle.read(len(MAGIC))
        if magic != MAGIC:
            raise TrajectoryFormatError(f"{path}: not a trajectory file (magic {magic!r}, expected {MAGIC!r})")
        raw_length = handle.read(8)
        if len(raw_length) != 8:
            raise TrajectoryFormatError(f"{path}: truncated before header length")
        header_length = int(np.frombuffer(raw_length, dtype='<u8')[0])
        raw_header = handle.read(header_length)
    if len(raw_header) != header_length:
        raise TrajectoryFormatError(f"{path}: truncated header ({len(raw_header)} of {header_length} bytes)")
    try:
        header = json.loads(raw_header.decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise TrajectoryFormatError(f"{path}: header is not valid JSON: {e}")

    if header.get('format_version') != FORMAT_VERSION:
        raise TrajectoryFormatError(
            f"{path}: format version mismatch (expected {FORMAT_VERSION}, found {header.get('format_version')})"
        )
    if header.get('endianness') != ENDIANNESS:
        raise TrajectoryFormatError(
            f"{path}: endianness mismatch (expected {ENDIANNESS}, found {header.get('endianness')})"
        )

    dtype = record_dtype(header['D'], header['M'])
    offset = len(MAGIC) + 8 + header_length
    expected = offset + (header['N'] + 1) * dtype.itemsize
    if file_size < expected:
        raise TrajectoryFormatError(f"{path}: truncated payload ({file_size} of {expected} bytes)")
    records = np.memmap(path, dtype=dtype, mode='r', offset=offset, shape=(header['N'] + 1,))
    return header, records


def load_trajectory(path: Path) -> TrajectoryLog:
    """Validate the header, then memory-map the record array"""
    header, records = _read_records(path)
    config = RunConfig.model_validate(header['config'])
    train = Split([Sample.model_validate(s) for s in header['train']])
    test = Split([Sample.model_validate(s) for s in header['test']])
    log = TrajectoryLog(config=config, records=records, train=train, test=test)
    if log.size != header['D']:
        raise TrajectoryFormatError(f"{path}: header D={header['D']} but the model spec has {log.size} parameters")
    logger.info(f"✓ Trajectory loaded: {path} (N={log.n_steps}, D={log.size})")
    return log


# ============================================================================
# TRAINING
# ============================================================================

@dataclass
class TrainResult:
    params: ParamVector
    curves: pd.DataFrame
    log: Optional[TrajectoryLog] = None
    wall_time: float = 0.0
    extra: Dict[str, float] = field(default_factory=dict)


def sample_batch(rng: np.random.Generator, n_train: int, batch_size: Optional[int]) -> np.ndarray:
    if batch_size is None or batch_size >= n_train:
        return np.arange(n_train)
    return np.sort(rng.choice(n_train, size=batch_size, replace=False))


def evaluate_split(model: Model, flat: np.ndarray, split: Split) -> Dict[str, float]:
    """Mean loss (-f[y]) and accuracy on a split"""
    if len(split) == 0:
        return {'loss': float('nan'), 'acc': float('nan')}
    outputs = model.forward(flat, split.inputs)
    loss = -float(np.mean(outputs[np.arange(len(split)), split.labels]))
    predicted = np.argmax(outputs[:, :model.spec.n_classes], axis=1)
    return {'loss': loss, 'acc': float(np.mean(predicted == split.labels))}


def _curve_row(model: Model, flat: np.ndarray, step: int, train: Split, test: Split) -> dict:
    tr = evaluate_split(model, flat, train)
    te = evaluate_split(model, flat, test)
    return {
        'step': step,
        'train_loss': tr['loss'], 'train_acc': tr['acc'],
        'test_loss': te['loss'], 'test_acc': te['acc'],
    }


def train(
    config: RunConfig,
    train_samples: List[Sample],
    test_samples: List[Sample],
    recorder: Optional[TrajectoryRecorder] = None,
    initial_params: Optional[ParamVector] = None,
    steps: Optional[int] = None,
    progress: bool = True,
) -> TrainResult:
    """
    Train the configured model and record every checkpoint

    Args:
        recorder: where records go; None keeps only the final parameters
        initial_params: start point (defaults to the seeded initialization)
        steps: overrides config.optimizer.steps

    Raises:
        NonFiniteError: loss or update stopped being finite; records up to the
            last finite step are kept by the recorder
    """
    opt = config.optimizer
    n_steps = opt.steps if steps is None else steps
    model = Model(config.model)
    train_split, test_split = Split(list(train_samples)), Split(list(test_samples))
    n_train = len(train_split)

    params = initial_params if initial_params is not None else model.init_params(opt.seed)
    theta = np.array(params.data, dtype=np.float64)
    state = OptimizerState.initial(opt, model.size)
    batch_rng = rng_for(opt.seed, STREAM_BATCHES)

    if recorder is not None:
        recorder.open(trajectory_header(config, model.size, n_train, n_steps, train_split, test_split))
        recorder.record(theta, state.m, state.v, 0.0, pack_mask(np.array([], dtype=np.int64), n_train))

    curves = [_curve_row(model, theta, 0, train_split, test_split)]
    started = time.perf_counter()
    logger.info(f"Training {config.model.kind} (D={model.size}) with {opt.kind} for {n_steps} steps")
    try:
        bar = tqdm(range(1, n_steps + 1), desc="train", disable=not (progress and logger.isEnabledFor(logging.INFO)))
        for s in bar:
            lr = schedule_rate(opt.schedule, s, n_steps)
            batch = sample_batch(batch_rng, n_train, opt.batch_size)
            try:
                _, grad = model.loss_gradient(theta, train_split.inputs[batch], train_split.labels[batch])
                theta, state = optimizer_step(theta, state, grad, lr)
            except NonFiniteError as e:
                if e.step is None:
                    raise NonFiniteError(str(e), step=s) from e
                raise
            if recorder is not None:
                recorder.record(theta, state.m, state.v, lr, pack_mask(batch, n_train))
            if s % opt.eval_every == 0 or s == n_steps:
                row = _curve_row(model, theta, s, train_split, test_split)
                curves.append(row)
                bar.set_postfix(train_acc=f"{row['train_acc']:.3f}", test_acc=f"{row['test_acc']:.3f}")
    finally:
        records = recorder.close() if recorder is not None else None

    wall_time = time.perf_counter() - started
    final = curves[-1]
    logger.info(
        f"✓ Training finished in {wall_time:.1f}s: "
        f"train acc {final['train_acc']:.4f}, test acc {final['test_acc']:.4f}"
    )
    log = None
    if records is not None:
        log = TrajectoryLog(config=config, records=records, train=train_split, test=test_split)
    return TrainResult(params=model.wrap(theta), curves=pd.DataFrame(curves), log=log, wall_time=wall_time)


def replay_check(log: TrajectoryLog, strict: bool = False) -> bool:
    """
    Re-execute every update from theta_0 with the recorded rates and batches

    Returns True iff every recomputed checkpoint is bit-identical to the stored
    one. The first divergent step is logged; strict=True raises instead.
    """
    model = log.model
    state = OptimizerState.initial(log.config.optimizer, model.size)
    theta = np.array(log.theta(0))
    for s in range(1, log.n_steps + 1):
        batch = log.batch_indices(s)
        _, grad = model.loss_gradient(theta, log.train.inputs[batch], log.train.labels[batch])
        theta, state = optimizer_step(theta, state, grad, log.lr(s))
        stored = log.theta(s)
        if not np.array_equal(theta, stored):
            diff = float(np.max(np.abs(theta - stored)))
            if strict:
                raise ReplayMismatchError(s, diff)
            logger.warning(f"Replay diverged at step {s} (max abs diff {diff:.3e})")
            return False
    logger.info(f"✓ Replay matches all {log.n_steps} stored checkpoints")
    return True
