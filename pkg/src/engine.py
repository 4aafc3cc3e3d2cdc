"""
Scenario loop tying the channel, MAC, grouping and ABR modules together.

One epoch is one sounding period: advance every user's CSI, detect mobility,
pick a grouping, schedule the MAC with the staleness taken at the middle of
the period, then play every user's video session forward tick by tick on
the goodput it was granted.
"""
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .abr import (
    EventKind,
    QoeEvents,
    VideoSession,
    VirtualQueues,
    advance_session,
    choose_bitrate,
    estimate_goodput,
    needs_segment,
    qoe_summary,
    segment_log_rows,
    start_segment,
    update_virtual_queues,
)
from .config_loader import config_digest
from .errors import SimulationError
from .grouping import (
    MobilityReport,
    Partition,
    QTable,
    TrainingResult,
    baseline_grouping,
    detect_mobility,
    encode_state,
    enumerate_actions,
    expected_mobility,
    greedy_action,
    mobility_filter,
    oracle_best,
    train,
)
from .mac_sim import GoodputReport, schedule_epoch
from .models import (
    BaselineKind,
    EpochRecord,
    LinkMode,
    MetricsReport,
    PolicyKind,
    SimConfig,
    SweepAxis,
    SweepRow,
    UserEpochRecord,
    UserProfile,
)
from .phy_channel import CsiSnapshot, LinkState, initial_csi, link_state, synthesize_csi

logger = logging.getLogger("muvis")

SWEEP_MOBILE_SPEED_MPS = 1.0
SWEEP_LOW_SNR_DB = 12.0
ARM_FULL_MU = "full_mu"
ARM_ALL_SU = "all_su"


class EngineEnvironment:
    """
    The simulated network as seen by the grouping agent

    With sounded CSI (the default) every observe_mobility() call evolves each
    user's channel by one sounding period and compares the last two
    snapshots. With sounded=False mobility is judged from the expected
    decay and no CSI is drawn.
    """

    def __init__(self, config: SimConfig, rng: np.random.Generator, sounded: bool = True):
        self.config = config
        self.users: List[UserProfile] = sorted(config.users, key=lambda u: u.id)
        self.rng = rng
        self.sounded = sounded
        self.time_ms = 0.0
        self.epochs_observed = 0
        self._link_cache: Dict[Partition, Dict[int, LinkState]] = {}
        self._goodput_cache: Dict[Partition, GoodputReport] = {}
        self._csi: Dict[int, List[CsiSnapshot]] = {}
        self._expected: Optional[MobilityReport] = None
        if sounded:
            for user in self.users:
                self._csi[user.id] = [initial_csi(config.loss.csi_dimension, rng)]

    @property
    def staleness_ms(self) -> float:
        return self.config.ap.sounding_period_ms / 2

    def observe_mobility(self) -> MobilityReport:
        ap = self.config.ap
        threshold = self.config.loss.mobility_threshold
        self.epochs_observed += 1
        self.time_ms += ap.sounding_period_ms
        if not self.sounded:
            if self._expected is None:
                self._expected = expected_mobility(self.users, ap, threshold)
            return self._expected

        for user in self.users:
            history = self._csi[user.id]
            fresh = synthesize_csi(history[-1], user.speed_mps, ap.sounding_period_ms, ap.carrier_ghz, self.rng)
            self._csi[user.id] = [history[-1], fresh]
        report = detect_mobility(self._csi, threshold, [u.id for u in self.users])
        if report.mobile_ids:
            logger.debug(f"Epoch {self.epochs_observed}: mobile users {report.mobile_ids} held in SU mode")
        return report

    def link_states(self, partition: Partition) -> Dict[int, LinkState]:
        """Link state of every user under a grouping, staleness at mid period"""
        cached = self._link_cache.get(partition)
        if cached is not None:
            return cached
        by_id = {u.id: u for u in self.users}
        config = self.config
        states: Dict[int, LinkState] = {}
        for group in partition.groups:
            members = [by_id[uid] for uid in group]
            total_streams = sum(u.n_streams for u in members)
            for user in members:
                states[user.id] = link_state(
                    user,
                    len(group),
                    total_streams,
                    self.staleness_ms,
                    config.ap.bandwidth_mhz,
                    config.mcs_table,
                    config.loss,
                )
        self._link_cache[partition] = states
        return states

    def evaluate(self, partition: Partition) -> GoodputReport:
        cached = self._goodput_cache.get(partition)
        if cached is None:
            cached = schedule_epoch(
                partition,
                self.link_states(partition),
                self.config.ap.sounding_period_ms,
                self.config.timing,
            )
            self._goodput_cache[partition] = cached
        return cached


@dataclass
class _Player:
    session: VideoSession
    queues: VirtualQueues


def _spawn_streams(seed: int) -> Tuple[np.random.Generator, np.random.Generator, np.random.SeedSequence]:
    csi_seq, policy_seq, train_seq = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(csi_seq), np.random.default_rng(policy_seq), train_seq


def train_policy(config: SimConfig, seed: int, sounded: bool = True) -> TrainingResult:
    """Phase I training against a fresh environment, ABR off"""
    _, _, train_seq = _spawn_streams(seed)
    env_seq, explore_seq = train_seq.spawn(2)
    env = EngineEnvironment(config, np.random.default_rng(env_seq), sounded=sounded)
    return train(env, env.users, config.ap, config.rl, np.random.default_rng(explore_seq))


def _play_epoch(players: Dict[int, _Player], goodput: GoodputReport, modes: Dict[int, LinkMode], config: SimConfig) -> None:
    ladder = config.ladder
    params = config.session
    dt_s = config.abr_tick_ms / 1000.0
    for uid, player in players.items():
        estimate_goodput(player.session, goodput.goodput_mbps[uid], modes[uid], params.ewma_weight)

    for _ in range(config.ticks_per_epoch):
        for uid, player in players.items():
            session = player.session
            if needs_segment(session, ladder):
                index = choose_bitrate(session, player.queues, config.targets, ladder, params.deadline_slack)
                start_segment(session, index, ladder)
            bits = goodput.goodput_mbps[uid] * 1e6 * dt_s
            _, events = advance_session(session, dt_s, bits, ladder, params.deadline_slack)
            for event in events:
                if event.kind != EventKind.UNDERFLOW:
                    update_virtual_queues(player.queues, QoeEvents.from_event(event), config.targets)


def _simulate(
    config: SimConfig,
    seed: int,
    qtable: Optional[QTable] = None,
    forced: Optional[Partition] = None,
    with_abr: bool = True,
) -> MetricsReport:
    csi_rng, policy_rng, _ = _spawn_streams(seed)
    env = EngineEnvironment(config, csi_rng)
    users = env.users
    actions = enumerate_actions(users, config.ap)
    action_index = {p: i for i, p in enumerate(actions)}
    policy = PolicyKind(config.policy)

    if forced is None and policy == PolicyKind.RL_TRAINED and qtable is None:
        qtable = train_policy(config, seed).qtable
    if qtable is not None and qtable.n_actions != len(actions):
        raise SimulationError(
            f"Q-table covers {qtable.n_actions} groupings but the scenario has {len(actions)}"
        )

    players = {
        u.id: _Player(
            session=VideoSession(
                user_id=u.id,
                buffer_cap_s=config.session.buffer_cap_s,
                total_segments=config.session.total_segments,
            ),
            queues=VirtualQueues(),
        )
        for u in users
    }

    current = actions.index(Partition.singletons([u.id for u in users]))
    oracle_cache: Dict[Tuple[int, ...], Partition] = {}
    records: List[EpochRecord] = []
    ids = [u.id for u in users]

    for epoch in range(config.duration_epochs):
        report = env.observe_mobility()
        if forced is not None:
            partition = forced
        elif policy == PolicyKind.RL_TRAINED:
            legal = mobility_filter(actions, report)
            state = encode_state(current, users, report, config.rl.snr_buckets)
            partition = actions[greedy_action(qtable, state, legal)]
        elif policy == PolicyKind.ORACLE:
            mask = report.mask(ids)
            if mask not in oracle_cache:
                oracle_cache[mask] = oracle_best(users, config.ap, env, report)
            partition = oracle_cache[mask]
        else:
            partition = baseline_grouping(BaselineKind(policy.value), users, config.ap, policy_rng, report)
        current = action_index.get(partition, current)
        logger.debug(f"Epoch {epoch}: grouping {partition}")

        goodput = env.evaluate(partition)
        links = env.link_states(partition)
        user_records = [
            UserEpochRecord(
                user_id=uid,
                mode=links[uid].mode,
                eff_snr_db=links[uid].eff_snr_db,
                mcs=links[uid].mcs_index,
                goodput_mbps=goodput.goodput_mbps[uid],
                csi_correlation=report.entries[uid].correlation,
                is_mobile=report.entries[uid].is_mobile,
            )
            for uid in ids
        ]
        records.append(
            EpochRecord(
                epoch=epoch,
                partition=partition.canonical(),
                users=user_records,
                aggregate_mbps=sum(r.goodput_mbps for r in user_records),
            )
        )
        if with_abr:
            _play_epoch(players, goodput, {uid: links[uid].mode for uid in ids}, config)

    qoe = []
    segments = []
    if with_abr:
        for uid in ids:
            qoe.append(qoe_summary(players[uid].session, config.ladder))
            segments.extend(segment_log_rows(players[uid].session, config.ladder))

    return MetricsReport(
        seed=seed,
        config_digest=config_digest(config),
        policy=policy,
        epochs=records,
        qoe=qoe,
        segments=segments,
        metadata={
            "duration_epochs": str(config.duration_epochs),
            "n_users": str(len(users)),
            "n_groupings": str(len(actions)),
            "grouping": "forced" if forced is not None else policy.value,
        },
    )


def run_sim(config: SimConfig, seed: int, qtable: Optional[QTable] = None) -> MetricsReport:
    """
    Simulate a scenario end to end

    Args:
        config: Validated scenario
        seed: Master seed; CSI, policy and training draw from independent
            child streams of it
        qtable: Trained Q-table for the rl_trained policy; trained on the
            spot when omitted

    Returns:
        MetricsReport with one EpochRecord per epoch and the QoE of every user
    """
    logger.info(f"Running {config.duration_epochs} epochs, {len(config.users)} users, policy={config.policy.value}, seed={seed}")
    report = _simulate(config, seed, qtable=qtable)
    logger.info(f"Run finished: mean user throughput {report.mean_user_throughput_mbps:.3f} Mbps")
    return report


def full_mu_partition(users: Sequence[UserProfile]) -> Partition:
    return Partition.from_groups([[u.id for u in users]])


def sweep_config(base_config: SimConfig, axis: SweepAxis, level: int) -> SimConfig:
    """Base scenario with the first `level` users (by id) made mobile or weak"""
    axis = SweepAxis(axis)
    if not 0 <= level <= len(base_config.users):
        raise ValueError(f"Sweep level {level} outside 0..{len(base_config.users)}")
    ordered = sorted(base_config.users, key=lambda u: u.id)
    changed = {u.id for u in ordered[:level]}
    if axis == SweepAxis.N_MOBILE:
        update = {"speed_mps": SWEEP_MOBILE_SPEED_MPS}
    else:
        update = {"base_snr_db": SWEEP_LOW_SNR_DB}
    users = [u.model_copy(update=update) if u.id in changed else u for u in base_config.users]
    return base_config.model_copy(update={"users": users})


def _sweep_cell(task: Tuple[SimConfig, SweepAxis, int, int]) -> List[SweepRow]:
    base_config, axis, level, seed = task
    config = sweep_config(base_config, axis, level)
    arms = (
        (ARM_FULL_MU, full_mu_partition(config.users)),
        (ARM_ALL_SU, Partition.singletons([u.id for u in config.users])),
    )
    rows = []
    for arm, partition in arms:
        report = _simulate(config, seed, forced=partition, with_abr=False)
        rows.append(
            SweepRow(
                axis=axis,
                level=level,
                seed=seed,
                arm=arm,
                mean_throughput_mbps=report.mean_user_throughput_mbps,
            )
        )
    return rows


def sweep(
    base_config: SimConfig,
    axis: SweepAxis,
    levels: Sequence[int],
    seeds: Sequence[int],
    workers: int = 1,
) -> List[SweepRow]:
    """
    Paired full-MU vs all-SU runs across mobility or low-SNR levels

    Args:
        base_config: Scenario whose users get modified level by level
        axis: n_mobile sets speed to 1 m/s, n_low_snr sets base SNR to 12 dB
        levels: Number of modified users per row group
        seeds: Seeds to repeat each level with
        workers: Process count; results do not depend on it

    Returns:
        One row per (level, seed, arm), in level, seed, arm order
    """
    axis = SweepAxis(axis)
    for level in levels:
        if not 0 <= level <= len(base_config.users):
            raise ValueError(f"Sweep level {level} exceeds {len(base_config.users)} users")
    tasks = [(base_config, axis, level, seed) for level in levels for seed in seeds]
    logger.info(f"Sweeping {axis.value} over levels {list(levels)} with {len(seeds)} seeds")
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_sweep_cell, tasks))
    else:
        chunks = [_sweep_cell(task) for task in tasks]
    return [row for chunk in chunks for row in chunk]
