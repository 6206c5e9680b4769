"""
Pydantic Schemas for Wire Protocol, Files and Reports
Type-safe validation for everything STAND reads or writes
"""

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Optional, List, Dict
from pathlib import Path

from app.core.config import settings, DRAFT_MODES, STORE_SCOPES


STORE_FORMAT = "stand-store"
TREE_FORMAT = "stand-tree"
TREE_STATS_FORMAT = "stand-tree-stats"
TRAJECTORY_FORMAT = "stand-trajectories"
METRICS_FORMAT = "stand-metrics"
OVERLAP_FORMAT = "stand-overlap"
PROBE_FORMAT = "stand-probe"
FORMAT_VERSION = 1


# ============================================================================
# BASE SCHEMAS
# ============================================================================

class BaseSchema(BaseModel):
    """Base schema with common configuration"""
    model_config = ConfigDict(
        from_attributes=True,
        use_enum_values=True,
        arbitrary_types_allowed=True,
    )


class VersionedSchema(BaseSchema):
    """File header shared by every persisted artifact"""
    format: str
    version: int = FORMAT_VERSION


# ============================================================================
# LOGIT SERVER WIRE PROTOCOL
# ============================================================================

class NextDistRequest(BaseSchema):
    """POST /v1/next_dist body"""
    context: List[int]
    temperature: float = Field(..., gt=0)


class NextDistResponse(BaseSchema):
    """Sparse next-token distribution; omitted ids are zero"""
    vocab_size: int = Field(..., ge=2)
    ids: List[int]
    probs: List[float]

    @model_validator(mode="after")
    def check_lengths(self):
        if len(self.ids) != len(self.probs):
            raise ValueError("ids and probs must have the same length")
        return self


# ============================================================================
# MODEL SPEC FILE
# ============================================================================

class PatternSpec(BaseSchema):
    """Repeated phrase mixed into the Markov rows"""
    tokens: List[int] = Field(..., min_length=2)
    prob: float = Field(..., ge=0, le=1)


class ModelSpecFile(BaseSchema):
    """Markov target model file"""
    format: Optional[str] = None
    version: Optional[int] = None
    vocab_size: int = Field(..., ge=2)
    order: int = Field(1, ge=1)
    rows: Dict[str, List[float]] = {}
    patterns: List[PatternSpec] = []


# ============================================================================
# NGRAM STORE FILE
# ============================================================================

class StoreHeader(VersionedSchema):
    """First line of a store export"""
    format: str = STORE_FORMAT
    vocab_size: int


class StoreRecord(BaseSchema):
    """One n-gram entry"""
    n: int = Field(..., ge=1)
    key: List[int]
    count: int = Field(..., ge=1)
    ids: List[int]
    probs: List[float]

    @model_validator(mode="after")
    def check_shape(self):
        if len(self.key) != self.n:
            raise ValueError(f"key length {len(self.key)} does not match n={self.n}")
        if len(self.ids) != len(self.probs):
            raise ValueError("ids and probs must have the same length")
        return self


# ============================================================================
# DRAFT TREE FILES
# ============================================================================

class TreeNodeRecord(BaseSchema):
    """Tree node; parent is null for level-1 nodes"""
    id: int = Field(..., ge=0)
    parent: Optional[int] = None
    children: List[int] = []


class TreeFile(VersionedSchema):
    """Static draft tree topology"""
    format: str = TREE_FORMAT
    nodes: List[TreeNodeRecord]


class NodeStatsRecord(BaseSchema):
    accept: int = Field(..., ge=0)
    visit: int = Field(..., ge=0)


class TreeStatsFile(VersionedSchema):
    """Per-node acceptance statistics keyed by node id"""
    format: str = TREE_STATS_FORMAT
    nodes: Dict[str, NodeStatsRecord]


# ============================================================================
# TRAJECTORY FILES
# ============================================================================

class TrajectoryHeader(VersionedSchema):
    format: str = TRAJECTORY_FORMAT


class TrajectoryRecord(BaseSchema):
    tokens: List[int]


# ============================================================================
# REPORTS
# ============================================================================

class TrajectoryMetricsReport(BaseSchema):
    """Metrics of one trajectory"""
    problem: int
    trajectory: int
    tokens: int
    rounds: int
    accept_len_mean: float
    target_positions: int
    target_positions_per_token: float
    calls_per_token: float
    wall_ms: float
    throughput_tps: float


class MetricsReport(VersionedSchema):
    """Decode metrics report"""
    format: str = METRICS_FORMAT
    mode: str
    topology: str
    store_scope: str
    tokens: int
    rounds: int
    accept_len_mean: float
    target_positions: int
    target_positions_per_token: float
    calls_per_token: float
    wall_ms: float
    throughput_tps: float
    per_trajectory: List[TrajectoryMetricsReport]
    per_trajectory_index_accept_len: List[float] = []


class OverlapRow(BaseSchema):
    """Overlap statistic for the first k trajectories at gram length n"""
    k: int
    n: int
    overlap_pct: float
    distinct_overlap_pct: float
    occurrences: int
    repeated_occurrences: int


class OverlapReportFile(VersionedSchema):
    format: str = OVERLAP_FORMAT
    trajectories: int
    token_counts: List[int]
    rows: List[OverlapRow]


class ProbeModeResult(BaseSchema):
    mode: str
    mean_acceptance: float
    contexts: int


class ProbeReportFile(VersionedSchema):
    """Depth-1, width-3 acceptance probe across draft modes"""
    format: str = PROBE_FORMAT
    results: List[ProbeModeResult]
    gap_mean: float
    gap_ci_low: float
    gap_ci_high: float


# ============================================================================
# RUN CONFIG
# ============================================================================

class RunConfig(BaseSchema):
    """
    Everything a CLI run needs.

    Defaults come from settings; a --config JSON file overlays them and
    explicit flags overlay the file.
    """
    model_config = ConfigDict(extra="forbid")

    model: Optional[str] = None  # spec path, corpus:<file> or synthetic:<family>[:seed]
    remote: Optional[str] = None
    topology: str = "builtin:optimized-80"
    mode: str = settings.DRAFT_MODE
    trajectories: int = Field(settings.TRAJECTORIES, ge=1)
    problems: int = Field(1, ge=1)
    prompt_length: int = Field(8, ge=1)
    prompts: Optional[str] = None  # trajectory-format file of prompts
    max_tokens: int = Field(settings.MAX_TOKENS, ge=0)
    stop_tokens: List[int] = []
    temperature: float = Field(settings.TEMPERATURE, gt=0)
    seed: int = settings.SEED
    scope: str = settings.STORE_SCOPE
    prefill_seeding: bool = settings.PREFILL_SEEDING
    parallel_problems: int = Field(1, ge=1)
    output_dir: str = "outputs"
    no_wall_time: bool = False

    @field_validator("mode")
    @classmethod
    def check_mode(cls, v):
        if v not in DRAFT_MODES:
            raise ValueError(f"mode must be one of {DRAFT_MODES}")
        return v

    @field_validator("scope")
    @classmethod
    def check_scope(cls, v):
        if v not in STORE_SCOPES:
            raise ValueError(f"scope must be one of {STORE_SCOPES}")
        return v

    @model_validator(mode="after")
    def check_sources(self):
        if (self.model is None) == (self.remote is None):
            raise ValueError("exactly one of model or remote must be given")
        if self.model and not self.model.startswith("synthetic:"):
            path = self.model[len("corpus:"):] if self.model.startswith("corpus:") else self.model
            if not Path(path).is_file():
                raise ValueError(f"model file not found: {path}")
        if self.prompts and not Path(self.prompts).is_file():
            raise ValueError(f"prompts file not found: {self.prompts}")
        topo = self.topology
        if not topo.startswith("builtin:") and not Path(topo).is_file():
            raise ValueError(f"topology file not found: {topo}")
        return self
