"""
Phase II: per-user video sessions and QoE-constrained bitrate control.

Each user plays a segmented video. Bitrates are chosen by a drift-plus-penalty
rule: log utility of the video rate, weighted by V, minus the virtual queue of
every QoE factor (lost segments, buffer underflows, rate switches) times the
indicator that the candidate rate would cause that event.
"""
import math
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple

from .models import BitrateLadder, LinkMode, QoeSummary, QoeTargets, SegmentLogRow

logger = logging.getLogger("muvis")

DEFAULT_EWMA_WEIGHT = 0.3
DEFAULT_DEADLINE_SLACK = 0.5
BIT_EPSILON = 1e-6
QUEUE_EPSILON = 1e-9


class EventKind(str, Enum):
    COMPLETED = "completed"
    LOST = "lost"
    UNDERFLOW = "underflow"


@dataclass(frozen=True)
class SessionEvent:
    kind: EventKind
    segment: Optional[int] = None
    bitrate_idx: Optional[int] = None
    switched: bool = False
    underflow: bool = False  # an underflow happened since the previous segment outcome


@dataclass(frozen=True)
class QoeEvents:
    """0/1 indicators of one completed or lost segment"""
    loss: int = 0
    underflow: int = 0
    switch: int = 0

    @classmethod
    def from_event(cls, event: SessionEvent) -> "QoeEvents":
        return cls(
            loss=int(event.kind == EventKind.LOST),
            underflow=int(event.underflow),
            switch=int(event.switched),
        )


@dataclass
class VideoSession:
    """Player state of one user"""
    user_id: int
    buffer_cap_s: float = 30.0
    total_segments: Optional[int] = None
    buffer_s: float = 0.0
    last_bitrate_idx: Optional[int] = None
    inflight_idx: Optional[int] = None
    download_progress_bits: float = 0.0
    download_elapsed_s: float = 0.0
    losses: int = 0
    underflows: int = 0
    switches: int = 0
    segments_played: int = 0
    segments_requested: int = 0
    goodput_ewma_mbps: Optional[float] = None
    current_mode: Optional[LinkMode] = None
    bits_delivered: float = 0.0
    bits_credited: float = 0.0
    pending_underflow: bool = False
    log: List[SessionEvent] = field(default_factory=list)

    @property
    def segments_done(self) -> int:
        return self.segments_played + self.losses

    @property
    def content_remaining(self) -> bool:
        return self.total_segments is None or self.segments_done < self.total_segments


@dataclass
class VirtualQueues:
    z_loss: float = 0.0
    z_und: float = 0.0
    z_sw: float = 0.0


def estimate_goodput(
    session: VideoSession,
    observed_goodput_mbps: float,
    mode: LinkMode,
    weight: float = DEFAULT_EWMA_WEIGHT,
) -> VideoSession:
    """
    Fold a goodput observation into the session's EWMA

    A change between SU and MU mode discards the history: the estimate
    restarts from the new observation.
    """
    if observed_goodput_mbps < 0:
        raise ValueError(f"Observed goodput must be non-negative, got {observed_goodput_mbps}")
    mode = LinkMode(mode)
    if session.goodput_ewma_mbps is None or (session.current_mode is not None and mode != session.current_mode):
        session.goodput_ewma_mbps = observed_goodput_mbps
    else:
        session.goodput_ewma_mbps = (1 - weight) * session.goodput_ewma_mbps + weight * observed_goodput_mbps
    session.current_mode = mode
    return session


def choose_bitrate(
    session: VideoSession,
    queues: VirtualQueues,
    targets: QoeTargets,
    ladder: BitrateLadder,
    slack: float = DEFAULT_DEADLINE_SLACK,
) -> int:
    """
    Drift-plus-penalty bitrate for the next segment

    score(j) = V*ln(r_j) - z_sw*[j != last] - z_und*[tau*r_j/g > buffer]
               - z_loss*[tau*r_j/g > tau*(1 + slack)]

    Args:
        session: Player state; needs a goodput estimate
        queues: Current virtual queues
        targets: Supplies the utility weight V
        ladder: Available rates and segment duration
        slack: Relative deadline slack defining a lost segment

    Returns:
        Ladder index, lowest on ties
    """
    estimate = session.goodput_ewma_mbps
    if estimate is None:
        raise ValueError(f"User {session.user_id} has no goodput estimate yet")
    if estimate <= 0:
        logger.warning(f"User {session.user_id} has zero goodput estimate; choosing lowest rate")
        return 0

    tau = ladder.segment_s
    deadline = tau * (1 + slack)
    best_index = 0
    best_score = -math.inf
    for index, rate in enumerate(ladder.rates_mbps):
        download_s = tau * rate / estimate
        score = targets.V * math.log(rate)
        if session.last_bitrate_idx is not None and index != session.last_bitrate_idx:
            score -= queues.z_sw
        if download_s > session.buffer_s:
            score -= queues.z_und
        if download_s > deadline:
            score -= queues.z_loss
        if score > best_score:
            best_index, best_score = index, score
    return best_index


def needs_segment(session: VideoSession, ladder: BitrateLadder) -> bool:
    """True when the player would request a new segment now"""
    if session.inflight_idx is not None:
        return False
    if session.total_segments is not None and session.segments_requested >= session.total_segments:
        return False
    return session.buffer_s <= session.buffer_cap_s - ladder.segment_s


def start_segment(session: VideoSession, bitrate_idx: int, ladder: BitrateLadder) -> VideoSession:
    """Open the download of the next segment at the given ladder index"""
    if session.inflight_idx is not None:
        raise ValueError(f"User {session.user_id} already downloading a segment")
    if not 0 <= bitrate_idx < len(ladder.rates_mbps):
        raise ValueError(f"Bitrate index {bitrate_idx} outside ladder")
    session.inflight_idx = bitrate_idx
    session.download_progress_bits = 0.0
    session.download_elapsed_s = 0.0
    session.segments_requested += 1
    return session


def _close_download(session: VideoSession) -> None:
    session.inflight_idx = None
    session.download_progress_bits = 0.0
    session.download_elapsed_s = 0.0


def advance_session(
    session: VideoSession,
    dt_s: float,
    delivered_bits: float,
    ladder: BitrateLadder,
    slack: float = DEFAULT_DEADLINE_SLACK,
) -> Tuple[VideoSession, List[SessionEvent]]:
    """
    Move a session forward by dt_s seconds of wall time

    Delivered bits feed the in-flight segment. A completed segment credits
    one segment duration of buffer (excess over the cap is dropped); a
    download running past tau*(1+slack) is abandoned as lost. Playback then
    drains the buffer, and the moment it empties while content remains
    counts as one underflow.

    Args:
        session: Player state, updated in place
        dt_s: Elapsed wall time
        delivered_bits: Bits the link delivered to this user during dt_s
        ladder: Bitrate ladder
        slack: Relative deadline slack

    Returns:
        The session and the events raised during this step
    """
    if dt_s < 0:
        raise ValueError(f"dt_s must be non-negative, got {dt_s}")
    if delivered_bits < 0:
        raise ValueError(f"delivered_bits must be non-negative, got {delivered_bits}")

    events: List[SessionEvent] = []
    session.bits_delivered += delivered_bits
    tau = ladder.segment_s

    if session.inflight_idx is not None:
        index = session.inflight_idx
        session.download_progress_bits += delivered_bits
        session.download_elapsed_s += dt_s
        needed_bits = tau * ladder.rates_mbps[index] * 1e6
        segment_no = session.segments_done

        if session.download_progress_bits >= needed_bits - BIT_EPSILON:
            switched = session.last_bitrate_idx is not None and index != session.last_bitrate_idx
            session.buffer_s = min(session.buffer_s + tau, session.buffer_cap_s)
            session.bits_credited += min(needed_bits, session.download_progress_bits)
            session.segments_played += 1
            if switched:
                session.switches += 1
            session.last_bitrate_idx = index
            event = SessionEvent(
                kind=EventKind.COMPLETED,
                segment=segment_no,
                bitrate_idx=index,
                switched=switched,
                underflow=session.pending_underflow,
            )
            events.append(event)
            session.log.append(event)
            session.pending_underflow = False
            _close_download(session)
        elif session.download_elapsed_s > tau * (1 + slack):
            session.losses += 1
            event = SessionEvent(
                kind=EventKind.LOST,
                segment=segment_no,
                bitrate_idx=index,
                underflow=session.pending_underflow,
            )
            events.append(event)
            session.log.append(event)
            session.pending_underflow = False
            logger.debug(f"User {session.user_id} lost segment {segment_no} at index {index}")
            _close_download(session)

    if session.buffer_s > 0 and dt_s > 0:
        session.buffer_s = max(session.buffer_s - dt_s, 0.0)
        if session.buffer_s == 0.0 and session.content_remaining:
            session.underflows += 1
            session.pending_underflow = True
            events.append(SessionEvent(kind=EventKind.UNDERFLOW))

    return session, events


def update_virtual_queues(queues: VirtualQueues, events: QoeEvents, targets: QoeTargets) -> VirtualQueues:
    """z <- max(z + event - rho, 0) for each QoE factor, once per segment outcome"""
    queues.z_loss = _drain(queues.z_loss, events.loss, targets.rho_loss)
    queues.z_und = _drain(queues.z_und, events.underflow, targets.rho_und)
    queues.z_sw = _drain(queues.z_sw, events.switch, targets.rho_sw)
    return queues


def _drain(z: float, event: int, target: float) -> float:
    value = z + event - target
    # rounding residue of repeated subtraction counts as empty
    return value if value > QUEUE_EPSILON else 0.0


def count_switches(log: Sequence[SessionEvent]) -> int:
    """Consecutive completed segments played at different rates"""
    completed = [e.bitrate_idx for e in log if e.kind == EventKind.COMPLETED]
    return sum(1 for a, b in zip(completed, completed[1:]) if a != b)


def qoe_summary(session: VideoSession, ladder: BitrateLadder) -> QoeSummary:
    """Per-user QoE rates over all segments that completed or were lost"""
    done = session.segments_done
    if done == 0:
        return QoeSummary(
            user_id=session.user_id,
            segments=0,
            loss_rate=0.0,
            underflow_rate=0.0,
            switch_rate=0.0,
            mean_bitrate_mbps=0.0,
            no_segments=True,
        )
    rates = [ladder.rates_mbps[e.bitrate_idx] for e in session.log if e.kind != EventKind.UNDERFLOW]
    return QoeSummary(
        user_id=session.user_id,
        segments=done,
        loss_rate=session.losses / done,
        underflow_rate=session.underflows / done,
        switch_rate=session.switches / done,
        mean_bitrate_mbps=sum(rates) / len(rates),
    )


def segment_log_rows(session: VideoSession, ladder: BitrateLadder) -> List[SegmentLogRow]:
    return [
        SegmentLogRow(
            user_id=session.user_id,
            segment=event.segment,
            bitrate_idx=event.bitrate_idx,
            bitrate_mbps=ladder.rates_mbps[event.bitrate_idx],
            outcome=event.kind.value,
            switched=event.switched,
            underflow=event.underflow,
        )
        for event in session.log
    ]
