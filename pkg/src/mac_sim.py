import logging
from typing import Dict, List, Mapping

from pydantic import BaseModel

from .errors import SimulationError
from .grouping import Partition
from .models import TimingParams
from .phy_channel import LinkState

logger = logging.getLogger("muvis")


class GoodputReport(BaseModel):
    """Outcome of scheduling one epoch"""
    goodput_mbps: Dict[int, float]
    airtime_fraction: List[float]  # one entry per group, partition order
    overhead_ms: float
    epoch_ms: float

    @property
    def overhead_fraction(self) -> float:
        return self.overhead_ms / self.epoch_ms

    @property
    def aggregate_mbps(self) -> float:
        return sum(self.goodput_mbps[uid] for uid in sorted(self.goodput_mbps))


def sounding_overhead(group_size: int, timing: TimingParams) -> float:
    """
    Duration of one sounding exchange for a group

    NDPA, NDP, a compressed beamforming report from every member and a
    report poll for each member after the first.
    """
    if group_size < 1:
        raise ValueError(f"group size must be >= 1, got {group_size}")
    return (
        timing.t_ndpa_ms
        + timing.t_ndp_ms
        + group_size * timing.t_report_ms
        + (group_size - 1) * timing.t_poll_ms
    )


def schedule_epoch(
    partition: Partition,
    link_states: Mapping[int, LinkState],
    epoch_ms: float,
    timing: TimingParams,
) -> GoodputReport:
    """
    Share one sounding period between the groups of a partition

    Every group is sounded once, the remaining data time is split equally
    between groups, and all members of a group transmit concurrently at
    their own PHY rate scaled by (1 - PER).

    Args:
        partition: Grouping to schedule
        link_states: Link state of every scheduled user, keyed by user id
        epoch_ms: Length of the epoch (the sounding period)
        timing: Sounding frame durations

    Returns:
        GoodputReport with per-user goodput and per-group airtime
    """
    if not partition.groups:
        raise ValueError("Cannot schedule an empty partition")

    seen = set()
    for group in partition.groups:
        for uid in group:
            if uid in seen:
                raise ValueError(f"User {uid} appears in more than one group")
            if uid not in link_states:
                raise ValueError(f"No link state for user {uid}")
            seen.add(uid)

    overhead_ms = sum(sounding_overhead(len(group), timing) for group in partition.groups)
    if overhead_ms >= epoch_ms:
        raise SimulationError(
            f"Sounding overhead {overhead_ms:.3f} ms leaves no data time in a {epoch_ms} ms epoch"
        )

    data_ms = epoch_ms - overhead_ms
    share_ms = data_ms / len(partition.groups)
    fraction = share_ms / epoch_ms

    goodput: Dict[int, float] = {}
    for group in partition.groups:
        for uid in group:
            link = link_states[uid]
            goodput[uid] = link.phy_rate_mbps * (1.0 - link.per) * fraction

    return GoodputReport(
        goodput_mbps=goodput,
        airtime_fraction=[fraction] * len(partition.groups),
        overhead_ms=overhead_ms,
        epoch_ms=epoch_ms,
    )
