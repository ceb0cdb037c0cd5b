# pathkernel/config.py
"""
Run configuration: pydantic models, presets and override handling
One JSON file per run; CLI overrides use dotted keys
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, model_validator

from pathkernel.error_handling import ConfigError, MissingInputError, UnknownComponentError

logger = logging.getLogger(__name__)

ROOT_DIR = Path(__file__).parent.parent
load_dotenv(ROOT_DIR / '.env')

DEFAULT_OUTPUT_ROOT = os.environ.get('PATHKERNEL_OUTPUT_ROOT', 'runs')
DEFAULT_LOG_LEVEL = os.environ.get('PATHKERNEL_LOG_LEVEL', 'INFO')

TRANSFORMER_COMPONENTS = ["embedding", "att_encoders", "att_decoders", "linear1", "linear2", "decoder"]


class ModelSpec(BaseModel):
    """Architecture of the model under study"""
    kind: Literal["modadd_transformer", "mlp", "linear"] = "modadd_transformer"
    p: int = Field(default=113, ge=2, description="Modulus of the addition task")
    d_model: int = Field(default=64, ge=1)
    n_heads: int = Field(default=4, ge=1)
    d_head: int = Field(default=16, ge=1)
    d_mlp: int = Field(default=512, ge=1)
    input_dim: int = Field(default=8, ge=1)
    hidden_dims: List[int] = Field(default_factory=lambda: [16])
    output_dim: int = Field(default=2, ge=1)

    @model_validator(mode='after')
    def check_heads(self):
        if self.kind == "modadd_transformer" and self.n_heads * self.d_head != self.d_model:
            raise ValueError(
                f"n_heads * d_head ({self.n_heads} * {self.d_head}) must equal d_model ({self.d_model})"
            )
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden_dims entries must be positive")
        return self

    @property
    def vocab_size(self) -> int:
        """Numbers 0..p-1, then '+' and 'mod p ='"""
        return self.p + 2

    @property
    def plus_token(self) -> int:
        return self.p

    @property
    def modeq_token(self) -> int:
        return self.p + 1

    @property
    def n_outputs(self) -> int:
        return self.vocab_size if self.kind == "modadd_transformer" else self.output_dim

    @property
    def n_classes(self) -> int:
        """Size of the label space used for accuracy and confusion matrices"""
        return self.p if self.kind == "modadd_transformer" else self.output_dim

    def component_names(self) -> List[str]:
        if self.kind == "modadd_transformer":
            return list(TRANSFORMER_COMPONENTS)
        if self.kind == "linear":
            return ["decoder"]
        return [f"linear{i + 1}" for i in range(len(self.hidden_dims))] + ["decoder"]


class ScheduleConfig(BaseModel):
    """Learning rate schedule alpha_s for s = 1..N"""
    kind: Literal["constant", "linear_warmup_peak_decay"] = "constant"
    peak: float = Field(default=1e-3, gt=0)
    peak_step: int = Field(default=1, ge=1)


class OptimizerConfig(BaseModel):
    kind: Literal["adamw", "sgd_momentum"] = "adamw"
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, ge=0)
    weight_decay: float = Field(default=0.0, ge=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    momentum_scaled_step: bool = Field(
        default=True,
        description="Use theta_s = theta_{s-1} - alpha_s * beta * b_s (false: - alpha_s * b_s)",
    )
    steps: int = Field(default=300, ge=0)
    batch_size: Optional[int] = Field(default=None, ge=1, description="None trains on the full batch")
    seed: int = 0
    eval_every: int = Field(default=1, ge=1)


class DatasetConfig(BaseModel):
    kind: Literal["modadd", "blobs"] = "modadd"
    p: int = Field(default=113, ge=2)
    train_fraction: float = Field(default=0.3, gt=0, lt=1)
    train_size: Optional[int] = Field(default=None, ge=1)
    test_size: Optional[int] = Field(default=None, ge=1)
    include_diagonal: bool = False
    seed: int = 0
    n_samples: int = Field(default=400, ge=2, description="Blob dataset size")
    separation: float = Field(default=2.0, ge=0)
    noise: float = Field(default=1.0, gt=0)


class EPKConfig(BaseModel):
    T: int = Field(default=100, ge=1, description="Integration steps of the test feature map")
    T_values: List[int] = Field(default_factory=lambda: [1, 10, 100])
    components: List[str] = Field(default_factory=list, description="Empty selects every component")
    windows: List[Tuple[int, int]] = Field(default_factory=list)
    window_size: int = Field(default=50, ge=1)
    test_limit: Optional[int] = Field(default=None, ge=1)
    per_output: bool = False
    workers: int = Field(default=1, ge=1)

    @model_validator(mode='after')
    def check_windows(self):
        for start, end in self.windows:
            if not 1 <= start <= end:
                raise ValueError(f"step window ({start}, {end}) must satisfy 1 <= start <= end")
        if any(t < 1 for t in self.T_values):
            raise ValueError("T_values entries must be >= 1")
        return self


class ExperimentConfig(BaseModel):
    prune_fractions: List[float] = Field(default_factory=lambda: [0.5])
    prune_strategies: List[Literal["epk_score", "magnitude", "random"]] = Field(
        default_factory=lambda: ["epk_score", "magnitude", "random"]
    )
    prune_seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    iterative_magnitude: bool = False
    iterative_rounds: int = Field(default=3, ge=1)
    iterative_retrain_steps: int = Field(default=20, ge=0)
    swap_sets: List[List[str]] = Field(default_factory=lambda: [["embedding", "linear2", "decoder"]])
    swap_steps: List[int] = Field(default_factory=list)
    reinit_donors: List[List[str]] = Field(default_factory=lambda: [["att_encoders", "att_decoders"]])
    reinit_source_steps: List[int] = Field(default_factory=list)
    reinit_seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    reinit_steps: int = Field(default=200, ge=0)
    similarity_component: str = "linear2"
    kernel_component: str = "decoder"
    lasso_component: str = "linear2"
    lasso_freq_min: int = Field(default=2, ge=2)
    lasso_freq_max: int = Field(default=113, ge=2)
    lasso_n_lambdas: int = Field(default=30, ge=1)
    lasso_max_sweeps: int = Field(default=10000, ge=1)
    grok_threshold: float = Field(default=0.99, gt=0, le=1)

    @model_validator(mode='after')
    def check_fractions(self):
        for c in self.prune_fractions:
            if not 0 < c <= 1:
                raise ValueError(f"prune fraction {c} must lie in (0, 1]")
        if self.lasso_freq_min > self.lasso_freq_max:
            raise ValueError("lasso_freq_min must not exceed lasso_freq_max")
        return self


class RunConfig(BaseModel):
    name: str = "run"
    model: ModelSpec = Field(default_factory=ModelSpec)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    epk: EPKConfig = Field(default_factory=EPKConfig)
    experiments: ExperimentConfig = Field(default_factory=ExperimentConfig)
    output_dir: str = Field(default_factory=lambda: DEFAULT_OUTPUT_ROOT)

    @model_validator(mode='after')
    def check_consistency(self):
        if self.model.kind == "modadd_transformer":
            if self.dataset.kind != "modadd":
                raise ValueError("the transformer trains on the modadd dataset")
            if self.dataset.p != self.model.p:
                raise ValueError(f"dataset p ({self.dataset.p}) differs from model p ({self.model.p})")
        elif self.dataset.kind != "blobs":
            raise ValueError(f"model kind {self.model.kind} trains on the blobs dataset")
        return self

    def validate_components(self):
        """Check every component name referenced by the config against the registry"""
        valid = self.model.component_names()
        referenced = list(self.epk.components)
        exp = self.experiments
        for group in exp.swap_sets + exp.reinit_donors:
            referenced.extend(group)
        if self.model.kind == "modadd_transformer":
            referenced += [exp.similarity_component, exp.kernel_component, exp.lasso_component]
        for name in referenced:
            if name not in valid:
                raise UnknownComponentError(name, valid)
        return self

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.name


# ============================================================================
# PRESETS
# ============================================================================

def desk_config() -> RunConfig:
    """Small mod-13 transformer, full-batch AdamW, 300 steps"""
    return RunConfig(
        name="desk",
        model=ModelSpec(kind="modadd_transformer", p=13, d_model=32, n_heads=4, d_head=8, d_mlp=128),
        optimizer=OptimizerConfig(
            kind="adamw",
            schedule=ScheduleConfig(kind="constant", peak=3e-3),
            beta1=0.9, beta2=0.98, eps=1e-8, weight_decay=1.0,
            steps=300, batch_size=None, seed=0,
        ),
        dataset=DatasetConfig(kind="modadd", p=13, train_fraction=0.6, include_diagonal=True, seed=0),
        epk=EPKConfig(T=100, T_values=[1, 10, 100], window_size=50),
        experiments=ExperimentConfig(
            swap_steps=[100, 200], reinit_source_steps=[300], reinit_steps=200,
            lasso_freq_max=13,
        ),
    )


def full_config() -> RunConfig:
    """Mod-113 transformer, full-batch AdamW for 4000 steps"""
    return RunConfig(
        name="full",
        model=ModelSpec(kind="modadd_transformer", p=113, d_model=64, n_heads=4, d_head=16, d_mlp=512),
        optimizer=OptimizerConfig(
            kind="adamw",
            schedule=ScheduleConfig(kind="constant", peak=1e-3),
            beta1=0.98, beta2=0.99, eps=1e-8, weight_decay=4.0,
            steps=4000, batch_size=None, seed=0, eval_every=10,
        ),
        dataset=DatasetConfig(
            kind="modadd", p=113, include_diagonal=False,
            train_size=4000, test_size=2000, seed=0,
        ),
        epk=EPKConfig(T=100, T_values=[10, 100], window_size=50),
        experiments=ExperimentConfig(
            swap_steps=[1100, 1700], reinit_source_steps=[1939], reinit_steps=200,
            lasso_freq_max=113,
        ),
    )


def mlp_desk_config() -> RunConfig:
    """MLP on two Gaussian blobs, mini-batch SGD with momentum and coupled decay"""
    return RunConfig(
        name="mlp_desk",
        model=ModelSpec(kind="mlp", input_dim=8, hidden_dims=[32], output_dim=2),
        optimizer=OptimizerConfig(
            kind="sgd_momentum",
            schedule=ScheduleConfig(kind="linear_warmup_peak_decay", peak=0.1, peak_step=20),
            momentum=0.9, weight_decay=0.005, momentum_scaled_step=True,
            steps=100, batch_size=32, seed=0,
        ),
        dataset=DatasetConfig(kind="blobs", n_samples=400, train_fraction=0.5, separation=2.0, seed=0),
        epk=EPKConfig(T=20, T_values=[1, 20]),
        experiments=ExperimentConfig(swap_sets=[], reinit_donors=[]),
    )


PRESETS = {
    "desk": desk_config,
    "full": full_config,
    "mlp_desk": mlp_desk_config,
}


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(data: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Set dotted keys (e.g. 'optimizer.schedule.peak') in a nested config dict"""
    for key, value in overrides.items():
        if isinstance(value, str):
            value = _parse_value(value)
        node = data
        parts = key.split('.')
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override '{key}': '{part}' is not a section")
        node[parts[-1]] = value
    return data


def load_config(
    path: Optional[str] = None,
    preset: Optional[str] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> RunConfig:
    """
    Build a RunConfig from a preset and/or a JSON file, then apply overrides

    Raises:
        MissingInputError: config file does not exist
        ConfigError: file does not parse or fails validation
        UnknownComponentError: config references a component the model lacks
    """
    data: Dict[str, Any] = {}
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset '{preset}'; choose from {', '.join(PRESETS)}")
        data = PRESETS[preset]().model_dump(mode='json')
    if path:
        config_path = Path(path)
        if not config_path.exists():
            raise MissingInputError(f"config file not found: {config_path}")
        try:
            file_data = json.loads(config_path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {config_path} is not valid JSON: {e}")
        data = _deep_merge(data, file_data)
    if overrides:
        data = apply_overrides(data, overrides)
    try:
        config = RunConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        where = '.'.join(str(x) for x in first['loc'])
        raise ConfigError(f"invalid config at '{where}': {first['msg']}")
    return config.validate_components()


def _deep_merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged
