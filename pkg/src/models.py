from typing import List, Dict, Optional, Literal, Tuple
from enum import Enum

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic_core import PydanticCustomError


class LinkMode(str, Enum):
    SU = "SU"
    MU = "MU"


class GuardInterval(str, Enum):
    LONG = "long"
    SHORT = "short"


class PolicyKind(str, Enum):
    RL_TRAINED = "rl_trained"
    ORACLE = "oracle"
    ALL_SU = "all_su"
    GREEDY_SNR = "greedy_snr"
    RANDOM = "random"


class BaselineKind(str, Enum):
    ALL_SU = "all_su"
    GREEDY_SNR = "greedy_snr"
    RANDOM = "random"


class RewardKind(str, Enum):
    SUM = "sum"
    MIN = "min"


class SweepAxis(str, Enum):
    N_MOBILE = "n_mobile"
    N_LOW_SNR = "n_low_snr"


class OutputFormat(str, Enum):
    CSV = "csv"
    JSON = "json"


class _ConfigModel(BaseModel):
    """Strict, immutable base for everything read from a scenario file"""
    model_config = ConfigDict(extra="forbid", frozen=True, allow_inf_nan=False)


class ApConfig(_ConfigModel):
    """Access point: antennas (N_t), channel width and sounding cadence"""
    n_tx_antennas: int = Field(4, ge=1, le=8)
    bandwidth_mhz: Literal[20, 40, 80, 160] = 20
    max_group_size: int = Field(4, ge=1)
    sounding_period_ms: float = Field(100.0, gt=0)
    carrier_ghz: float = Field(5.18, gt=0)


class UserProfile(_ConfigModel):
    """A receiver with N_r antennas decoding S_g spatial streams"""
    id: int = Field(..., ge=0)
    base_snr_db: float = Field(..., ge=-10, le=60)  # SU SNR at last sounding
    speed_mps: float = Field(0.0, ge=0)
    n_rx_antennas: int = Field(1, ge=1, le=8)
    n_streams: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _streams_within_antennas(self):
        if self.n_streams > self.n_rx_antennas:
            raise PydanticCustomError("streams", "n_streams exceeds n_rx_antennas")
        return self


class McsEntry(_ConfigModel):
    """One row of the MCS table"""
    index: int = Field(..., ge=0, le=9)
    bits_per_subcarrier: int = Field(..., ge=1)
    coding_rate: float = Field(..., gt=0, le=1)
    snr_req_db: float


# 802.11ac VHT MCS 0-9; thresholds are simulator defaults
DEFAULT_MCS_ENTRIES: Tuple[Tuple[int, int, float, float], ...] = (
    (0, 1, 1 / 2, 2.0),
    (1, 2, 1 / 2, 5.0),
    (2, 2, 3 / 4, 9.0),
    (3, 4, 1 / 2, 11.0),
    (4, 4, 3 / 4, 15.0),
    (5, 6, 2 / 3, 18.0),
    (6, 6, 3 / 4, 20.0),
    (7, 6, 5 / 6, 25.0),
    (8, 8, 3 / 4, 29.0),
    (9, 8, 5 / 6, 31.0),
)


def _default_mcs_entries() -> List[McsEntry]:
    return [
        McsEntry(index=i, bits_per_subcarrier=b, coding_rate=r, snr_req_db=s)
        for i, b, r, s in DEFAULT_MCS_ENTRIES
    ]


class McsTable(_ConfigModel):
    """Ordered MCS table; thresholds and bits x rate strictly increase with the index"""
    entries: List[McsEntry] = Field(default_factory=_default_mcs_entries, min_length=1)

    @model_validator(mode="after")
    def _check_order(self):
        for position, entry in enumerate(self.entries):
            if entry.index != position:
                raise PydanticCustomError("mcs_order", "indices must run 0..n-1 in order")
        for prev, cur in zip(self.entries, self.entries[1:]):
            if cur.snr_req_db <= prev.snr_req_db:
                raise PydanticCustomError("mcs_order", "snr_req_db must strictly increase")
            if cur.bits_per_subcarrier * cur.coding_rate <= prev.bits_per_subcarrier * prev.coding_rate:
                raise PydanticCustomError("mcs_order", "bits x coding_rate must strictly increase")
        return self

    @property
    def max_index(self) -> int:
        return len(self.entries) - 1

    def entry(self, index: int) -> McsEntry:
        if not 0 <= index < len(self.entries):
            raise ValueError(f"Invalid MCS index: {index}")
        return self.entries[index]


class TimingParams(_ConfigModel):
    """Sounding frame durations in milliseconds"""
    t_ndpa_ms: float = Field(0.1, ge=0)
    t_ndp_ms: float = Field(0.1, ge=0)
    t_report_ms: float = Field(0.5, ge=0)
    t_poll_ms: float = Field(0.05, ge=0)


class LossModel(_ConfigModel):
    """Knobs of the MU/staleness loss, PER curve and mobility detector"""
    eta_db: float = Field(1.0, ge=0)
    c_stale: float = Field(200.0, ge=0)  # dB per (m/s * s)
    cap_db: float = Field(30.0, ge=0)
    k_per: float = Field(2.0, gt=0)
    g50_db: float = -1.0
    margin_db: float = Field(1.0, ge=0)
    csi_dimension: int = Field(16, ge=1)
    mobility_threshold: float = Field(0.9, ge=0, le=1)
    guard_interval: GuardInterval = GuardInterval.LONG


def _unit_interval(value: float, low_open: bool = False) -> float:
    if low_open and not 0 < value <= 1:
        raise PydanticCustomError("range", "out of (0,1]")
    if not low_open and not 0 <= value <= 1:
        raise PydanticCustomError("range", "out of [0,1]")
    return value


class RlHyperParams(_ConfigModel):
    """Q-learning hyperparameters and epsilon schedule"""
    alpha: float = 0.1
    gamma: float = 0.9
    epsilon0: float = 1.0
    eps_decay: float = 0.995
    eps_min: float = 0.05
    episodes: int = Field(5000, ge=1)
    epochs_per_episode: int = Field(10, ge=1)
    reward: RewardKind = RewardKind.SUM
    snr_buckets: bool = False

    @field_validator("alpha")
    @classmethod
    def _alpha_range(cls, v):
        return _unit_interval(v, low_open=True)

    @field_validator("gamma", "epsilon0", "eps_decay", "eps_min")
    @classmethod
    def _closed_range(cls, v):
        return _unit_interval(v)


class BitrateLadder(_ConfigModel):
    """Video rates every segment is encoded at"""
    rates_mbps: List[float] = Field(default_factory=lambda: [1.0, 2.5, 5.0, 8.0, 16.0], min_length=1)
    segment_s: float = Field(2.0, gt=0)

    @field_validator("rates_mbps")
    @classmethod
    def _strictly_increasing(cls, v):
        if any(r <= 0 for r in v):
            raise PydanticCustomError("ladder", "rates must be positive")
        if any(b <= a for a, b in zip(v, v[1:])):
            raise PydanticCustomError("ladder", "rates must strictly increase")
        return v


class QoeTargets(_ConfigModel):
    """Long-run event budgets per segment and the utility weight V"""
    rho_loss: float = Field(0.01, ge=0, le=1)
    rho_und: float = Field(0.02, ge=0, le=1)
    rho_sw: float = Field(0.15, ge=0, le=1)
    V: float = Field(10.0, gt=0)


class SessionParams(_ConfigModel):
    """Player-side constants"""
    buffer_cap_s: float = Field(30.0, gt=0)
    deadline_slack: float = Field(0.5, ge=0)
    ewma_weight: float = Field(0.3, gt=0, le=1)
    total_segments: Optional[int] = Field(None, ge=1)


class SimConfig(_ConfigModel):
    """A complete scenario"""
    ap: ApConfig
    users: List[UserProfile] = Field(..., min_length=1)
    timing: TimingParams = Field(default_factory=TimingParams)
    mcs_table: McsTable = Field(default_factory=McsTable)
    loss: LossModel = Field(default_factory=LossModel)
    rl: RlHyperParams = Field(default_factory=RlHyperParams)
    ladder: BitrateLadder = Field(default_factory=BitrateLadder)
    targets: QoeTargets = Field(default_factory=QoeTargets)
    session: SessionParams = Field(default_factory=SessionParams)
    policy: PolicyKind = PolicyKind.RL_TRAINED
    airtime_policy: Literal["equal_share"] = "equal_share"
    duration_epochs: int = Field(100, ge=1)
    abr_tick_ms: float = Field(10.0, gt=0)
    seed: Optional[int] = Field(None, ge=0)

    @field_validator("users")
    @classmethod
    def _unique_ids(cls, v):
        ids = [u.id for u in v]
        if len(set(ids)) != len(ids):
            raise PydanticCustomError("users", "user ids must be unique")
        return v

    @model_validator(mode="after")
    def _cross_checks(self):
        ticks = self.ap.sounding_period_ms / self.abr_tick_ms
        if abs(ticks - round(ticks)) > 1e-9:
            raise PydanticCustomError("tick", "abr_tick_ms must divide ap.sounding_period_ms")
        for user in self.users:
            if user.n_streams > self.ap.n_tx_antennas:
                raise PydanticCustomError(
                    "streams", f"user {user.id} n_streams exceeds ap.n_tx_antennas"
                )
        if self.session.buffer_cap_s < self.ladder.segment_s:
            raise PydanticCustomError(
                "buffer", "session.buffer_cap_s must be at least ladder.segment_s"
            )
        return self

    @property
    def ticks_per_epoch(self) -> int:
        return int(round(self.ap.sounding_period_ms / self.abr_tick_ms))


class UserEpochRecord(BaseModel):
    """Link outcome of one user during one epoch"""
    user_id: int
    mode: LinkMode
    eff_snr_db: float
    mcs: int
    goodput_mbps: float
    csi_correlation: float
    is_mobile: bool


class EpochRecord(BaseModel):
    """Grouping decision and per-user goodput of one sounding epoch"""
    epoch: int
    partition: str
    users: List[UserEpochRecord]
    aggregate_mbps: float


class QoeSummary(BaseModel):
    """Per-user QoE outcome of a run"""
    user_id: int
    segments: int
    loss_rate: float
    underflow_rate: float
    switch_rate: float
    mean_bitrate_mbps: float
    no_segments: bool = False


class SegmentLogRow(BaseModel):
    """One completed or lost segment"""
    user_id: int
    segment: int
    bitrate_idx: int
    bitrate_mbps: float
    outcome: str
    switched: bool
    underflow: bool


class MetricsReport(BaseModel):
    """Everything a run produces"""
    seed: int
    config_digest: str
    policy: PolicyKind
    epochs: List[EpochRecord] = []
    qoe: List[QoeSummary] = []
    segments: List[SegmentLogRow] = []
    metadata: Dict[str, str] = {}

    @property
    def mean_user_throughput_mbps(self) -> float:
        """Mean over epochs and users of per-user goodput"""
        values = [u.goodput_mbps for e in self.epochs for u in e.users]
        return sum(values) / len(values) if values else 0.0


class SweepRow(BaseModel):
    """One (level, seed, arm) cell of a trend sweep"""
    axis: SweepAxis
    level: int
    seed: int
    arm: str
    mean_throughput_mbps: float
