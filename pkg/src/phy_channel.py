import math
import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from .models import GuardInterval, LinkMode, LossModel, McsTable, UserProfile

logger = logging.getLogger("muvis")

SPEED_OF_LIGHT = 2.998e8

# Data subcarriers per channel width (VHT)
N_SD = {
    20: 52,
    40: 108,
    80: 234,
    160: 468,
}

# OFDM symbol duration in microseconds, 3.2 us + guard
T_SYM_US = {
    GuardInterval.LONG: Fraction(4),
    GuardInterval.SHORT: Fraction(18, 5),
}

NO_TX = -1


@dataclass(frozen=True)
class CsiSnapshot:
    """Flat complex channel vector captured at a sounding instant"""
    coeffs: np.ndarray
    timestamp_ms: float

    @property
    def dimension(self) -> int:
        return int(self.coeffs.shape[0])


@dataclass(frozen=True)
class LinkState:
    """Per-user PHY outcome for one epoch"""
    user_id: int
    mode: LinkMode
    eff_snr_db: float
    mcs_index: int
    phy_rate_mbps: float
    per: float


def coherence_distance(carrier_ghz: float) -> float:
    """Half a wavelength, in metres"""
    return (SPEED_OF_LIGHT / (carrier_ghz * 1e9)) / 2


def csi_decay(speed_mps: float, dt_ms: float, carrier_ghz: float) -> float:
    """Gauss-Markov correlation coefficient after moving speed*dt metres"""
    displacement = speed_mps * dt_ms / 1000.0
    return math.exp(-displacement / coherence_distance(carrier_ghz))


def _complex_noise(dimension: int, rng: np.random.Generator) -> np.ndarray:
    # unit-variance circular complex gaussian
    draws = rng.standard_normal((2, dimension))
    return (draws[0] + 1j * draws[1]) / math.sqrt(2)


def initial_csi(dimension: int, rng: np.random.Generator, timestamp_ms: float = 0.0) -> CsiSnapshot:
    """Draw a fresh channel for a user joining the network"""
    if dimension < 1:
        raise ValueError(f"CSI dimension must be positive, got {dimension}")
    return CsiSnapshot(coeffs=_complex_noise(dimension, rng), timestamp_ms=timestamp_ms)


def synthesize_csi(
    prev: CsiSnapshot,
    speed_mps: float,
    dt_ms: float,
    carrier_ghz: float,
    rng: np.random.Generator,
) -> CsiSnapshot:
    """
    Evolve a channel snapshot by dt_ms for a user moving at speed_mps

    Args:
        prev: Snapshot at the previous sounding
        speed_mps: Scalar speed of the user
        dt_ms: Elapsed time
        carrier_ghz: Carrier frequency, fixes the coherence distance
        rng: Caller-owned generator; one noise vector is drawn per call

    Returns:
        h' = rho*h + sqrt(1 - rho^2)*w with the timestamp advanced by dt_ms
    """
    if dt_ms < 0:
        raise ValueError(f"dt_ms must be non-negative, got {dt_ms}")
    rho = csi_decay(speed_mps, dt_ms, carrier_ghz)
    noise = _complex_noise(prev.dimension, rng)
    coeffs = rho * prev.coeffs + math.sqrt(max(0.0, 1.0 - rho * rho)) * noise
    return CsiSnapshot(coeffs=coeffs, timestamp_ms=prev.timestamp_ms + dt_ms)


def csi_correlation(a: CsiSnapshot, b: CsiSnapshot) -> float:
    """|<a,b>| / (|a| |b|), clipped into [0, 1]"""
    if a.dimension != b.dimension:
        raise ValueError(f"CSI dimension mismatch: {a.dimension} != {b.dimension}")
    energy_a = float(np.vdot(a.coeffs, a.coeffs).real)
    energy_b = float(np.vdot(b.coeffs, b.coeffs).real)
    if energy_a == 0.0 or energy_b == 0.0:
        raise ValueError("CSI snapshot has zero norm")
    value = abs(complex(np.vdot(a.coeffs, b.coeffs))) / math.sqrt(energy_a * energy_b)
    return min(1.0, max(0.0, value))


def effective_snr(
    user: UserProfile,
    group_size: int,
    total_group_streams: int,
    t_since_sound_ms: float,
    loss: Optional[LossModel] = None,
) -> float:
    """
    Post-precoding SNR of a user inside a group

    The zero-forcing power split costs 10*log10(S_tot/S_i), every other
    member adds eta dB of residual interference, and a moving user loses
    c_stale*speed*t dB (capped) because its beam was computed from stale CSI.
    A group of one is plain SU transmission and keeps base_snr_db.
    """
    loss = loss or LossModel()
    if group_size < 1:
        raise ValueError(f"group size must be >= 1, got {group_size}")
    if total_group_streams < user.n_streams:
        raise ValueError(
            f"group streams {total_group_streams} below user {user.id} streams {user.n_streams}"
        )
    if t_since_sound_ms < 0:
        raise ValueError(f"t_since_sound_ms must be non-negative, got {t_since_sound_ms}")

    snr = user.base_snr_db
    if total_group_streams != user.n_streams:
        snr -= 10 * math.log10(total_group_streams / user.n_streams)
    if group_size > 1:
        snr -= loss.eta_db * (group_size - 1)
        snr -= min(loss.c_stale * user.speed_mps * (t_since_sound_ms / 1000.0), loss.cap_db)
    return snr


def select_mcs(eff_snr_db: float, table: McsTable, margin_db: float) -> int:
    """Highest MCS whose threshold is met with margin, or NO_TX"""
    budget = eff_snr_db - margin_db
    chosen = NO_TX
    for entry in table.entries:
        if entry.snr_req_db <= budget:
            chosen = entry.index
        else:
            break
    return chosen


def phy_rate_exact(
    mcs_index: int,
    bandwidth_mhz: int,
    n_streams: int,
    guard: GuardInterval,
    table: McsTable,
) -> Fraction:
    """Rate in Mbps as an exact fraction"""
    if mcs_index == NO_TX:
        return Fraction(0)
    if bandwidth_mhz not in N_SD:
        raise ValueError(f"Invalid channel width: {bandwidth_mhz}")
    if n_streams < 1:
        raise ValueError(f"Invalid number of spatial streams: {n_streams}")
    entry = table.entry(mcs_index)
    coding_rate = Fraction(entry.coding_rate).limit_denominator(64)
    bits = n_streams * N_SD[bandwidth_mhz] * entry.bits_per_subcarrier * coding_rate
    return bits / T_SYM_US[GuardInterval(guard)]


def phy_rate(
    mcs_index: int,
    bandwidth_mhz: int,
    n_streams: int,
    guard: GuardInterval = GuardInterval.LONG,
    table: Optional[McsTable] = None,
) -> float:
    """
    802.11ac data rate: streams x N_sd x bits x R / T_sym

    Args:
        mcs_index: MCS index, NO_TX gives 0
        bandwidth_mhz: 20, 40, 80 or 160
        n_streams: Spatial streams
        guard: Long (4 us symbol) or short (3.6 us) guard interval
        table: MCS table supplying modulation and coding rate

    Returns:
        Rate in Mbps
    """
    return float(phy_rate_exact(mcs_index, bandwidth_mhz, n_streams, guard, table or McsTable()))


def per(eff_snr_db: float, mcs_index: int, table: McsTable, loss: Optional[LossModel] = None) -> float:
    """Logistic packet error rate in the SNR gap to the MCS threshold"""
    if mcs_index == NO_TX:
        return 1.0
    loss = loss or LossModel()
    gap = eff_snr_db - table.entry(mcs_index).snr_req_db
    z = loss.k_per * (gap - loss.g50_db)
    # numerically stable logistic 1 / (1 + e^z)
    if z >= 0:
        e = math.exp(-z)
        return e / (1.0 + e)
    return 1.0 / (1.0 + math.exp(z))


def link_state(
    user: UserProfile,
    group_size: int,
    total_group_streams: int,
    t_since_sound_ms: float,
    bandwidth_mhz: int,
    table: McsTable,
    loss: LossModel,
) -> LinkState:
    """
    Link outcome of a user in a group

    Rate adaptation picks the MCS from the SNR measured at sounding time;
    the PER is taken at the SNR the user actually sees t_since_sound_ms later.
    """
    fresh_snr = effective_snr(user, group_size, total_group_streams, 0.0, loss)
    eff_snr = effective_snr(user, group_size, total_group_streams, t_since_sound_ms, loss)
    mcs = select_mcs(fresh_snr, table, loss.margin_db)
    rate = phy_rate(mcs, bandwidth_mhz, user.n_streams, loss.guard_interval, table)
    error_rate = per(eff_snr, mcs, table, loss)
    mode = LinkMode.MU if group_size > 1 else LinkMode.SU
    return LinkState(
        user_id=user.id,
        mode=mode,
        eff_snr_db=eff_snr,
        mcs_index=mcs,
        phy_rate_mbps=rate,
        per=error_rate,
    )
