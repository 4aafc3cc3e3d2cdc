import math

import numpy as np
import pytest

from src.abr import (
    EventKind,
    QoeEvents,
    SessionEvent,
    VideoSession,
    VirtualQueues,
    advance_session,
    choose_bitrate,
    count_switches,
    estimate_goodput,
    needs_segment,
    qoe_summary,
    segment_log_rows,
    start_segment,
    update_virtual_queues,
)
from src.models import BitrateLadder, LinkMode, QoeTargets


@pytest.fixture
def ladder():
    return BitrateLadder()


@pytest.fixture
def targets():
    return QoeTargets()


def _play(session, queues, ladder, targets, goodput_at, dt_s, max_ticks):
    """Drive a session until its content is exhausted; goodput_at(tick) gives Mbps"""
    for tick in range(max_ticks):
        if not session.content_remaining:
            break
        goodput = goodput_at(tick)
        if tick % 10 == 0:
            estimate_goodput(session, goodput, LinkMode.SU)
        if needs_segment(session, ladder):
            start_segment(session, choose_bitrate(session, queues, targets, ladder), ladder)
        _, events = advance_session(session, dt_s, goodput * 1e6 * dt_s, ladder)
        for event in events:
            if event.kind != EventKind.UNDERFLOW:
                update_virtual_queues(queues, QoeEvents.from_event(event), targets)
    return session


def test_first_observation_seeds_estimate():
    """The first sample becomes the estimate as is"""
    session = estimate_goodput(VideoSession(user_id=0), 12.5, LinkMode.SU)
    assert session.goodput_ewma_mbps == 12.5
    assert session.current_mode == LinkMode.SU


def test_ewma_same_mode():
    """0.7 * 10 + 0.3 * 20"""
    session = VideoSession(user_id=0, goodput_ewma_mbps=10.0, current_mode=LinkMode.SU)
    estimate_goodput(session, 20.0, LinkMode.SU)
    assert session.goodput_ewma_mbps == pytest.approx(13.0)


def test_ewma_resets_on_mode_change():
    """SU to MU drops the history"""
    session = VideoSession(user_id=0, goodput_ewma_mbps=10.0, current_mode=LinkMode.SU)
    estimate_goodput(session, 20.0, LinkMode.MU)
    assert session.goodput_ewma_mbps == 20.0
    assert session.current_mode == LinkMode.MU


def test_negative_goodput_rejected():
    """Goodput below zero is invalid"""
    with pytest.raises(ValueError):
        estimate_goodput(VideoSession(user_id=0), -0.1, LinkMode.SU)


def test_choose_highest_without_penalties(ladder, targets):
    """Empty queues and a fast link pick the top rate"""
    session = VideoSession(user_id=0, goodput_ewma_mbps=1e9, buffer_s=10.0)
    assert choose_bitrate(session, VirtualQueues(), targets, ladder) == 4


def test_choose_keeps_last_rate_under_switch_pressure(ladder, targets):
    """A large switch queue pins the previous bitrate"""
    session = VideoSession(user_id=0, goodput_ewma_mbps=1e9, buffer_s=10.0, last_bitrate_idx=2)
    assert choose_bitrate(session, VirtualQueues(z_sw=1e9), targets, ladder) == 2


def test_choose_avoids_underflow(ladder, targets):
    """g=6, buffer 4 s: 16 Mbps would drain the buffer, 8 Mbps wins"""
    session = VideoSession(user_id=0, goodput_ewma_mbps=6.0, buffer_s=4.0)
    queues = VirtualQueues(z_und=50.0)
    assert choose_bitrate(session, queues, targets, ladder) == 3
    assert 10 * math.log(8.0) == pytest.approx(20.79, abs=0.01)


def test_choose_avoids_loss(ladder, targets):
    """Downloads longer than 3 s are penalised by z_loss"""
    session = VideoSession(user_id=0, goodput_ewma_mbps=6.0, buffer_s=30.0)
    assert choose_bitrate(session, VirtualQueues(z_loss=100.0), targets, ladder) == 3


def test_choose_degenerate_link(ladder, targets):
    """Zero goodput falls back to the lowest rate; no estimate at all is an error"""
    session = VideoSession(user_id=0, goodput_ewma_mbps=0.0)
    assert choose_bitrate(session, VirtualQueues(z_sw=5.0), targets, ladder) == 0
    with pytest.raises(ValueError):
        choose_bitrate(VideoSession(user_id=1), VirtualQueues(), targets, ladder)


def test_choose_is_deterministic(ladder, targets):
    """Same inputs, same index"""
    session = VideoSession(user_id=0, goodput_ewma_mbps=7.3, buffer_s=3.1, last_bitrate_idx=1)
    queues = VirtualQueues(z_loss=1.0, z_und=2.0, z_sw=3.0)
    assert choose_bitrate(session, queues, targets, ladder) == choose_bitrate(session, queues, targets, ladder)


def test_pure_drain(ladder):
    """Playback without download drains the buffer by dt"""
    session, events = advance_session(VideoSession(user_id=0, buffer_s=5.0), 2.0, 0.0, ladder)
    assert session.buffer_s == 3.0
    assert events == []


def test_underflow_is_edge_triggered(ladder):
    """One event when the buffer empties, none while it stays empty"""
    session, events = advance_session(VideoSession(user_id=0, buffer_s=0.5), 1.0, 0.0, ladder)
    assert session.buffer_s == 0.0
    assert [e.kind for e in events] == [EventKind.UNDERFLOW]
    session, events = advance_session(session, 1.0, 0.0, ladder)
    assert events == []
    assert session.underflows == 1


def test_startup_is_not_underflow(ladder):
    """An empty buffer before the first segment is not a stall"""
    session, events = advance_session(VideoSession(user_id=0), 1.0, 0.0, ladder)
    assert events == []
    assert session.underflows == 0


def test_no_underflow_after_last_segment(ladder):
    """Running dry at the end of the content is not a stall"""
    session = VideoSession(user_id=0, total_segments=1, buffer_s=1.0, segments_played=1, segments_requested=1)
    session, events = advance_session(session, 2.0, 0.0, ladder)
    assert session.buffer_s == 0.0
    assert events == []


def test_completion_credits_one_segment(ladder):
    """5 Mbps x 2 s needs exactly 10^7 bits"""
    session = start_segment(VideoSession(user_id=0), 2, ladder)
    session, events = advance_session(session, 0.0, 1e7, ladder)
    assert session.buffer_s == 2.0
    assert session.inflight_idx is None
    assert session.segments_played == 1
    assert [e.kind for e in events] == [EventKind.COMPLETED]
    assert not events[0].switched


def test_partial_download_does_not_complete(ladder):
    """Bits short of a segment stay in progress"""
    session = start_segment(VideoSession(user_id=0), 2, ladder)
    session, events = advance_session(session, 0.5, 9.9e6, ladder)
    assert events == []
    assert session.download_progress_bits == 9.9e6


def test_completion_capped_at_buffer_limit(ladder):
    """Buffer never grows past buffer_cap_s"""
    session = start_segment(VideoSession(user_id=0, buffer_s=29.0), 0, ladder)
    session, _ = advance_session(session, 0.0, 2e6, ladder)
    assert session.buffer_s == 30.0


def test_deadline_miss_is_a_loss(ladder):
    """A 16 Mbps segment still incomplete after 3 s is abandoned"""
    session = start_segment(VideoSession(user_id=0, buffer_s=10.0), 4, ladder)
    kinds = []
    for _ in range(7):
        session, events = advance_session(session, 0.5, 1e6, ladder)
        kinds.extend(e.kind for e in events)
    assert kinds == [EventKind.LOST]
    assert session.losses == 1
    assert session.inflight_idx is None
    assert session.download_progress_bits == 0.0


def test_switch_flag_on_completion(ladder):
    """Only a change of index is flagged as a switch"""
    session = VideoSession(user_id=0)
    for index in (1, 1, 3):
        start_segment(session, index, ladder)
        session, events = advance_session(session, 0.0, ladder.rates_mbps[index] * 2e6, ladder)
    assert [e.switched for e in session.log] == [False, False, True]
    assert session.switches == 1


def test_underflow_carried_to_next_outcome(ladder):
    """A stall is charged to the next finished segment"""
    session = VideoSession(user_id=0, buffer_s=0.1)
    start_segment(session, 0, ladder)
    session, events = advance_session(session, 0.2, 0.0, ladder)
    assert [e.kind for e in events] == [EventKind.UNDERFLOW]
    session, events = advance_session(session, 0.0, 2e6, ladder)
    assert events[0].kind == EventKind.COMPLETED
    assert events[0].underflow
    assert QoeEvents.from_event(events[0]) == QoeEvents(loss=0, underflow=1, switch=0)


def test_start_segment_errors(ladder):
    """One segment in flight at a time and the index must exist"""
    session = start_segment(VideoSession(user_id=0), 0, ladder)
    with pytest.raises(ValueError):
        start_segment(session, 1, ladder)
    with pytest.raises(ValueError):
        start_segment(VideoSession(user_id=1), 5, ladder)


def test_advance_rejects_negative_inputs(ladder):
    """Negative dt or bits"""
    with pytest.raises(ValueError):
        advance_session(VideoSession(user_id=0), -1.0, 0.0, ladder)
    with pytest.raises(ValueError):
        advance_session(VideoSession(user_id=0), 1.0, -5.0, ladder)


def test_needs_segment(ladder):
    """Request only with buffer room, content left and nothing in flight"""
    assert needs_segment(VideoSession(user_id=0), ladder)
    assert not needs_segment(VideoSession(user_id=0, buffer_s=28.5), ladder)
    assert not needs_segment(VideoSession(user_id=0, total_segments=2, segments_requested=2), ladder)
    assert not needs_segment(start_segment(VideoSession(user_id=0), 0, ladder), ladder)


def test_virtual_queue_clamped_at_zero(targets):
    """Clean segments never push a queue below zero"""
    queues = update_virtual_queues(VirtualQueues(), QoeEvents(), targets)
    assert (queues.z_loss, queues.z_und, queues.z_sw) == (0.0, 0.0, 0.0)


def test_virtual_queue_underflow_event(targets):
    """One stall adds 1 - rho_und"""
    queues = update_virtual_queues(VirtualQueues(), QoeEvents(underflow=1), targets)
    assert queues.z_und == pytest.approx(0.98)
    assert queues.z_loss == 0.0


def test_virtual_queue_linear_drain(targets):
    """From 0.98 the underflow queue empties on the 49th clean segment"""
    queues = VirtualQueues(z_und=0.98)
    for _ in range(48):
        update_virtual_queues(queues, QoeEvents(), targets)
    assert queues.z_und > 0.0
    update_virtual_queues(queues, QoeEvents(), targets)
    assert queues.z_und == 0.0


def test_qoe_summary_rates(ladder):
    """Rates are per completed segment"""
    completed = [SessionEvent(kind=EventKind.COMPLETED, segment=i, bitrate_idx=2) for i in range(100)]
    session = VideoSession(user_id=3, segments_played=100, underflows=2, log=completed)
    summary = qoe_summary(session, ladder)
    assert summary.segments == 100
    assert summary.underflow_rate == pytest.approx(0.02)
    assert summary.switch_rate == 0.0
    assert summary.mean_bitrate_mbps == 5.0
    assert not summary.no_segments


def test_qoe_summary_alternating_rates(ladder):
    """Alternating every segment gives (n-1)/n switches"""
    session = VideoSession(user_id=0)
    n = 10
    for i in range(n):
        index = 1 if i % 2 else 3
        start_segment(session, index, ladder)
        advance_session(session, 0.0, ladder.rates_mbps[index] * 2e6, ladder)
    summary = qoe_summary(session, ladder)
    assert summary.switch_rate == pytest.approx((n - 1) / n)
    assert summary.mean_bitrate_mbps == pytest.approx((2.5 + 8.0) / 2)


def test_qoe_summary_without_segments(ladder):
    """A session that never finished a segment reports zeros"""
    summary = qoe_summary(VideoSession(user_id=4), ladder)
    assert summary.no_segments
    assert summary.loss_rate == summary.underflow_rate == summary.switch_rate == 0.0


def test_segment_log_rows(ladder):
    """Completed segments are exported with their bitrate"""
    session = start_segment(VideoSession(user_id=2), 4, ladder)
    advance_session(session, 0.0, 32e6, ladder)
    rows = segment_log_rows(session, ladder)
    assert len(rows) == 1
    assert rows[0].bitrate_mbps == 16.0
    assert rows[0].outcome == "completed"


def test_stationary_session_is_stable(ladder, targets):
    """Goodput twice the top rate: no underflow, no loss, queues stay empty"""
    segments = 2000
    session = VideoSession(user_id=0, total_segments=segments)
    queues = VirtualQueues()
    _play(session, queues, ladder, targets, lambda tick: 32.0, 0.05, 200_000)

    summary = qoe_summary(session, ladder)
    assert session.segments_done == segments
    assert summary.underflow_rate <= 0.02
    assert summary.loss_rate <= 0.01
    for z in (queues.z_loss, queues.z_und, queues.z_sw):
        assert z / segments < 0.01
    assert 0.0 <= session.buffer_s <= session.buffer_cap_s
    assert session.bits_credited <= session.bits_delivered


def test_switch_recount_matches_counter(ladder):
    """Switches recounted from the segment log equal the session counter"""
    for seed in range(100):
        rng = np.random.default_rng(seed)
        trace = rng.uniform(0.5, 30.0, size=400)
        targets = QoeTargets(V=float(rng.uniform(1.0, 20.0)))
        session = VideoSession(user_id=0, total_segments=int(rng.integers(5, 40)))
        queues = VirtualQueues()
        _play(session, queues, ladder, targets, lambda tick: float(trace[(tick // 10) % 400]), 0.1, 4000)

        rows = segment_log_rows(session, ladder)
        completed = [r.bitrate_idx for r in rows if r.outcome == "completed"]
        recount = sum(1 for a, b in zip(completed, completed[1:]) if a != b)
        assert recount == session.switches
        assert count_switches(session.log) == session.switches
        assert session.bits_credited <= session.bits_delivered
        assert min(queues.z_loss, queues.z_und, queues.z_sw) >= 0.0
