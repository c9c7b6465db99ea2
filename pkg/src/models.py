"""
Core data models for the forecasting workbench.

Hyperparameter records default to the published configuration table so an
experiment cell can be built from a model name and a context length alone.
Result records round-trip through plain dicts for the JSON ledger.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional

from errors import ConfigurationError


MODEL_KINDS = ('vanilla', 'patchtst', 'raft')
SCHEDULES = ('step_decay', 'cosine')
PRECISIONS = ('f32', 'f64')


def _known_fields(cls, data: Dict[str, Any]) -> Dict[str, Any]:
    names = {f.name for f in fields(cls)}
    return {k: v for k, v in data.items() if k in names}


@dataclass
class VanillaConfig:
    """
    Encoder-decoder Transformer hyperparameters.

    The decoder sees the last ``label_len`` lookback rows followed by
    ``pred_len`` zero placeholders.
    """
    seq_len: int = 720
    pred_len: int = 96
    n_channels: int = 7
    label_len: int = 48
    d_model: int = 512
    n_heads: int = 8
    e_layers: int = 2
    d_layers: int = 1
    d_ff: int = 2048
    dropout: float = 0.1
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigurationError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )
        if self.label_len > self.seq_len:
            raise ConfigurationError(
                f"label_len={self.label_len} exceeds seq_len={self.seq_len}"
            )
        if min(self.seq_len, self.pred_len, self.n_channels, self.e_layers, self.d_layers) < 1:
            raise ConfigurationError(f"Non-positive dimension in {self}")


@dataclass
class PatchConfig:
    """
    Channel-independent patch Transformer hyperparameters.

    ``d_layers`` is carried for parity with the published table; it is read as
    the single linear forecast head, not as a decoder stack.
    """
    seq_len: int = 720
    pred_len: int = 96
    n_channels: int = 7
    d_model: int = 128
    n_heads: int = 16
    e_layers: int = 3
    d_layers: int = 1
    d_ff: int = 256
    dropout: float = 0.1
    patch_len: int = 16
    stride: int = 8
    instance_norm: bool = True
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigurationError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )
        if self.patch_len < self.stride:
            raise ConfigurationError(
                f"patch_len={self.patch_len} must be >= stride={self.stride}"
            )
        if self.patch_len > self.seq_len + self.stride:
            raise ConfigurationError(
                f"patch_len={self.patch_len} exceeds seq_len + stride "
                f"({self.seq_len} + {self.stride})"
            )

    @property
    def n_patches(self) -> int:
        # one stride of replication padding on the right, then unfold
        return (self.seq_len + self.stride - self.patch_len) // self.stride + 1


def _raft_base() -> PatchConfig:
    return PatchConfig(seq_len=720, d_model=128, n_heads=8, e_layers=2, d_ff=256)


@dataclass
class RaftConfig:
    """
    Retrieval-augmented forecaster: a patch encoder plus a top-k retrieval
    branch fused through a per-horizon-step sigmoid gate.
    """
    base: PatchConfig = field(default_factory=_raft_base)
    top_k: int = 5
    temperature: float = 0.1
    retrieval_len: Optional[int] = None
    retrieval_stride: int = 1
    channel_independent_retrieval: bool = False

    def __post_init__(self):
        if isinstance(self.base, dict):
            self.base = PatchConfig(**_known_fields(PatchConfig, self.base))
        if self.top_k < 1:
            raise ConfigurationError(f"top_k must be >= 1, got {self.top_k}")
        if self.temperature <= 0:
            raise ConfigurationError(f"temperature must be > 0, got {self.temperature}")
        if self.retrieval_len is not None and not 1 <= self.retrieval_len <= self.base.seq_len:
            raise ConfigurationError(
                f"retrieval_len={self.retrieval_len} must lie in [1, {self.base.seq_len}]"
            )

    @property
    def query_len(self) -> int:
        return self.retrieval_len or self.base.seq_len


@dataclass
class TrainConfig:
    """
    Optimisation protocol for one cell.

    Defaults are the benchmark protocol: Adam at 1e-4, batch 32, 10 epochs,
    patience 3, seed 2021, step decay.
    """
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 10
    patience: int = 3
    seed: int = 2021
    schedule: str = 'step_decay'
    loss: str = 'mse'
    micro_batch_size: Optional[int] = None
    restore_best: bool = True

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigurationError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.patience >= self.epochs:
            raise ConfigurationError(
                f"patience={self.patience} must be smaller than epochs={self.epochs}"
            )
        if self.schedule not in SCHEDULES:
            raise ConfigurationError(f"Unknown schedule {self.schedule!r}; expected one of {SCHEDULES}")
        if self.loss != 'mse':
            raise ConfigurationError(f"Only the MSE loss is supported, got {self.loss!r}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.micro_batch_size is not None and not 1 <= self.micro_batch_size <= self.batch_size:
            raise ConfigurationError(
                f"micro_batch_size={self.micro_batch_size} must lie in [1, {self.batch_size}]"
            )


@dataclass
class TrainRecord:
    """Per-epoch losses and timing for one training run."""
    train_losses: List[float] = field(default_factory=list)
    val_losses: List[float] = field(default_factory=list)
    learning_rates: List[float] = field(default_factory=list)
    wall_seconds: float = 0.0
    stopped_epoch: int = 0
    best_epoch: int = 0
    best_val_loss: float = float('inf')
    early_stopped: bool = False
    restored_best: bool = False
    checkpoint_path: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'TrainRecord':
        return cls(**_known_fields(cls, data))


@dataclass
class AttentionStats:
    """
    Attention entropy summary for one model at one context length.

    ``layer_head_entropy[l][h]`` is the mean normalized entropy of head ``h``
    in encoder layer ``l``.
    """
    context_length: int
    n_keys: int
    samples: int
    layer_head_entropy: List[List[float]]
    layer_entropy: List[float]
    layer_effective_rank: List[float]
    mean_entropy: float
    mean_effective_rank: float

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'AttentionStats':
        return cls(**_known_fields(cls, data))


@dataclass
class CellResult:
    """One row of the results grid."""
    cell_id: str
    model: str
    dataset: str
    seq_len: int
    pred_len: int
    seed: int
    mse: Optional[float] = None
    mae: Optional[float] = None
    train_seconds: Optional[float] = None
    status: str = 'ok'
    error: Optional[str] = None
    stopped_epoch: Optional[int] = None
    best_epoch: Optional[int] = None
    baseline_mse: Optional[float] = None
    baseline_mae: Optional[float] = None
    precision: str = 'f64'
    entropy: Optional[AttentionStats] = None
    per_channel_mse: Optional[List[float]] = None
    # fingerprint of the spec that produced this result
    spec_fingerprint: Optional[str] = None

    def __post_init__(self):
        if isinstance(self.entropy, dict):
            self.entropy = AttentionStats.from_dict(self.entropy)

    @property
    def ok(self) -> bool:
        return self.status == 'ok'

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'CellResult':
        return cls(**_known_fields(cls, data))


@dataclass
class DegradationRow:
    """MSE change from the shortest context of a group to a longer one."""
    model: str
    dataset: str
    pred_len: int
    seed: int
    base_cell: str
    extended_cell: str
    base_seq_len: int
    extended_seq_len: int
    base_mse: float
    extended_mse: float
    degradation_pct: float

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'DegradationRow':
        return cls(**_known_fields(cls, data))


@dataclass
class ExperimentSpec:
    """
    One cell of the experiment matrix.

    ``model_overrides`` holds manifest keys applied on top of the model's
    default configuration.
    """
    dataset: str
    model: str
    seq_len: int
    pred_len: int = 96
    label_len: int = 48
    train: TrainConfig = field(default_factory=TrainConfig)
    model_overrides: Dict[str, Any] = field(default_factory=dict)
    probe_entropy: bool = False
    probe_samples: int = 64
    precision: str = 'f64'
    window_stride: int = 1
    out_dir: str = 'results'

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig(**_known_fields(TrainConfig, self.train))
        if self.model not in MODEL_KINDS:
            raise ConfigurationError(f"Unknown model {self.model!r}; expected one of {MODEL_KINDS}")
        if self.precision not in PRECISIONS:
            raise ConfigurationError(f"Unknown precision {self.precision!r}; expected one of {PRECISIONS}")
        if self.window_stride < 1:
            raise ConfigurationError(f"window_stride must be >= 1, got {self.window_stride}")

    @property
    def cell_id(self) -> str:
        return f"{self.dataset}_{self.model}_L{self.seq_len}_H{self.pred_len}_s{self.train.seed}"

    @property
    def fingerprint(self) -> str:
        """
        Short digest of everything that shapes the result: training protocol,
        model overrides, probing, precision and windowing. ``out_dir`` is left out.
        """
        data = self.to_dict()
        data.pop('out_dir', None)
        canonical = json.dumps(data, sort_keys=True, default=str)
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:12]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ExperimentSpec':
        return cls(**_known_fields(cls, data))


@dataclass
class ExperimentReport:
    """
    Everything a report emits: the cells, the degradation table, entropy
    statistics keyed by cell id and the literature comparison rows.
    """
    cells: List[CellResult] = field(default_factory=list)
    degradation: List[DegradationRow] = field(default_factory=list)
    entropy: Dict[str, AttentionStats] = field(default_factory=dict)
    reference_rows: List[Dict[str, Any]] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)

    @property
    def failed_cells(self) -> List[CellResult]:
        return [c for c in self.cells if not c.ok]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'cells': [c.to_dict() for c in self.cells],
            'degradation': [d.to_dict() for d in self.degradation],
            'entropy': {k: v.to_dict() for k, v in self.entropy.items()},
            'reference_rows': list(self.reference_rows),
            'notes': list(self.notes),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ExperimentReport':
        return cls(
            cells=[CellResult.from_dict(c) for c in data.get('cells', [])],
            degradation=[DegradationRow.from_dict(d) for d in data.get('degradation', [])],
            entropy={k: AttentionStats.from_dict(v) for k, v in data.get('entropy', {}).items()},
            reference_rows=list(data.get('reference_rows', [])),
            notes=list(data.get('notes', [])),
        )
