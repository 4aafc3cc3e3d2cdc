"""
Phase I: MU-MIMO group and mode selection.

Enumerates the legal groupings of a user set, excludes moving users from MU
groups, and learns which grouping maximises downlink throughput with tabular
Q-learning. A brute-force oracle and simple baselines sit alongside for
comparison.
"""
import json
import math
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Mapping, Optional, Protocol, Sequence, Tuple, TYPE_CHECKING

import numpy as np

from .models import ApConfig, BaselineKind, LinkMode, RewardKind, RlHyperParams, UserProfile
from .phy_channel import CsiSnapshot, csi_correlation, csi_decay

if TYPE_CHECKING:
    from .mac_sim import GoodputReport

logger = logging.getLogger("muvis")

# 802.11ac serves at most four users per MU transmission
MAX_MU_USERS = 4
ORACLE_MAX_USERS = 8
QTABLE_VERSION = 1


@dataclass(frozen=True)
class Partition:
    """Users split into groups; a singleton is SU, anything larger is MU"""
    groups: Tuple[Tuple[int, ...], ...]

    @classmethod
    def from_groups(cls, groups: Sequence[Sequence[int]]) -> "Partition":
        ordered = sorted(tuple(sorted(g)) for g in groups if len(g) > 0)
        return cls(groups=tuple(ordered))

    @classmethod
    def singletons(cls, user_ids: Sequence[int]) -> "Partition":
        return cls.from_groups([[uid] for uid in user_ids])

    @property
    def modes(self) -> Tuple[LinkMode, ...]:
        return tuple(LinkMode.MU if len(g) > 1 else LinkMode.SU for g in self.groups)

    @property
    def user_ids(self) -> List[int]:
        return sorted(uid for g in self.groups for uid in g)

    def group_of(self, user_id: int) -> Tuple[int, ...]:
        for group in self.groups:
            if user_id in group:
                return group
        raise KeyError(f"User {user_id} not in partition {self.canonical()}")

    def canonical(self) -> str:
        """e.g. "[0,2][1]" """
        return "".join("[" + ",".join(str(uid) for uid in g) + "]" for g in self.groups)

    def __str__(self) -> str:
        return self.canonical()


@dataclass(frozen=True)
class MobilityEntry:
    correlation: float
    is_mobile: bool
    missing: bool = False


@dataclass(frozen=True)
class MobilityReport:
    """Per-user CSI correlation between the last two soundings"""
    entries: Mapping[int, MobilityEntry]

    def is_mobile(self, user_id: int) -> bool:
        entry = self.entries.get(user_id)
        return True if entry is None else entry.is_mobile

    @property
    def mobile_ids(self) -> List[int]:
        return sorted(uid for uid, e in self.entries.items() if e.is_mobile)

    def mask(self, user_ids: Sequence[int]) -> Tuple[int, ...]:
        return tuple(1 if self.is_mobile(uid) else 0 for uid in user_ids)


@dataclass(frozen=True)
class StateKey:
    """Agent state: previous grouping, user count, streams and mobility bits"""
    grouping_index: int
    n_users: int
    streams_vec: Tuple[int, ...]
    mobility_mask: Tuple[int, ...]
    snr_buckets: Tuple[int, ...] = ()

    def render(self) -> str:
        text = (
            f"g={self.grouping_index}|n={self.n_users}"
            f"|s={','.join(map(str, self.streams_vec))}"
            f"|m={','.join(map(str, self.mobility_mask))}"
        )
        if self.snr_buckets:
            text += f"|b={','.join(map(str, self.snr_buckets))}"
        return text

    @classmethod
    def parse(cls, text: str) -> "StateKey":
        fields = dict(part.split("=", 1) for part in text.split("|"))

        def ints(key: str) -> Tuple[int, ...]:
            raw = fields.get(key, "")
            return tuple(int(x) for x in raw.split(",")) if raw else ()

        return cls(
            grouping_index=int(fields["g"]),
            n_users=int(fields["n"]),
            streams_vec=ints("s"),
            mobility_mask=ints("m"),
            snr_buckets=ints("b"),
        )


class QTable:
    """Action values per state; unseen states read as all zeros"""

    def __init__(self, n_actions: int):
        if n_actions < 1:
            raise ValueError(f"QTable needs at least one action, got {n_actions}")
        self.n_actions = n_actions
        self._values: Dict[StateKey, np.ndarray] = {}
        self._zeros = np.zeros(n_actions)
        self._zeros.flags.writeable = False

    def __len__(self) -> int:
        return len(self._values)

    def __contains__(self, state: StateKey) -> bool:
        return state in self._values

    def states(self) -> List[StateKey]:
        return list(self._values)

    def values(self, state: StateKey) -> np.ndarray:
        """Read-only view of Q(s, .)"""
        row = self._values.get(state)
        return self._zeros if row is None else row

    def row(self, state: StateKey) -> np.ndarray:
        """Writable Q(s, .), created on first use"""
        row = self._values.get(state)
        if row is None:
            row = np.zeros(self.n_actions)
            self._values[state] = row
        return row

    def max_abs(self) -> float:
        if not self._values:
            return 0.0
        return max(float(np.max(np.abs(v))) for v in self._values.values())

    def to_json(self) -> str:
        states = {
            state.render(): [float(f"{v:.9g}") for v in row]
            for state, row in self._values.items()
        }
        document = {"version": QTABLE_VERSION, "n_actions": self.n_actions, "states": states}
        return json.dumps(document, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "QTable":
        document = json.loads(text)
        if document.get("version") != QTABLE_VERSION:
            raise ValueError(f"Unsupported QTable version: {document.get('version')}")
        table = cls(int(document["n_actions"]))
        for key, values in document["states"].items():
            if len(values) != table.n_actions:
                raise ValueError(f"State {key} has {len(values)} values, expected {table.n_actions}")
            if not all(math.isfinite(v) for v in values):
                raise ValueError(f"State {key} holds non-finite values")
            table._values[StateKey.parse(key)] = np.array(values, dtype=float)
        return table


class GroupingEnvironment(Protocol):
    """What the learner needs from the network"""

    def observe_mobility(self) -> MobilityReport:
        """Advance to the next sounding and report user mobility"""
        ...

    def evaluate(self, partition: Partition) -> "GoodputReport":
        """Per-user goodput of one epoch under the given grouping"""
        ...


@dataclass
class TrainingResult:
    qtable: QTable
    actions: List[Partition]
    best_index: int
    best_partition: Partition
    best_reward: float
    greedy_partition: Optional[Partition] = None
    episode_rewards: List[float] = field(default_factory=list)


def _group_cap(ap: ApConfig) -> int:
    return min(ap.max_group_size, MAX_MU_USERS)


def _grow_partitions(
    ids: Sequence[int],
    streams: Mapping[int, int],
    cap: int,
    n_tx: int,
) -> Iterator[List[List[int]]]:
    """Set partitions of ids whose blocks respect the size and stream limits"""

    def extend(position: int, blocks: List[List[int]], loads: List[int]):
        if position == len(ids):
            yield blocks
            return
        uid = ids[position]
        need = streams[uid]
        for n, block in enumerate(blocks):
            if len(block) < cap and loads[n] + need <= n_tx:
                yield from extend(
                    position + 1,
                    blocks[:n] + [block + [uid]] + blocks[n + 1:],
                    loads[:n] + [loads[n] + need] + loads[n + 1:],
                )
        yield from extend(position + 1, blocks + [[uid]], loads + [need])

    yield from extend(0, [], [])


def enumerate_actions(users: Sequence[UserProfile], ap: ApConfig) -> List[Partition]:
    """
    All legal groupings of the user set in canonical order

    Args:
        users: Users to schedule
        ap: Access point limits (N_t, group size cap)

    Returns:
        Partitions with blocks sorted by smallest member, sorted lexicographically
    """
    if not users:
        raise ValueError("Need at least one user to enumerate groupings")
    for user in users:
        if user.n_streams > ap.n_tx_antennas:
            raise ValueError(
                f"User {user.id} needs {user.n_streams} streams but the AP has {ap.n_tx_antennas} antennas"
            )
    ids = sorted(u.id for u in users)
    streams = {u.id: u.n_streams for u in users}
    partitions = [
        Partition(groups=tuple(tuple(block) for block in blocks))
        for blocks in _grow_partitions(ids, streams, _group_cap(ap), ap.n_tx_antennas)
    ]
    partitions.sort(key=lambda p: p.groups)
    logger.debug(f"Enumerated {len(partitions)} groupings for {len(ids)} users")
    return partitions


def detect_mobility(
    csi_history: Mapping[int, Sequence[CsiSnapshot]],
    threshold: float = 0.9,
    user_ids: Optional[Sequence[int]] = None,
) -> MobilityReport:
    """
    Flag users whose channel decorrelated between the last two soundings

    A user without two snapshots is treated as mobile and marked missing.
    """
    ids = sorted(csi_history) if user_ids is None else list(user_ids)
    entries: Dict[int, MobilityEntry] = {}
    for uid in ids:
        history = csi_history.get(uid, ())
        if len(history) < 2:
            logger.warning(f"User {uid} has {len(history)} CSI snapshots; treating as mobile")
            entries[uid] = MobilityEntry(correlation=0.0, is_mobile=True, missing=True)
            continue
        correlation = csi_correlation(history[-2], history[-1])
        entries[uid] = MobilityEntry(correlation=correlation, is_mobile=correlation < threshold)
    return MobilityReport(entries=entries)


def expected_mobility(users: Sequence[UserProfile], ap: ApConfig, threshold: float = 0.9) -> MobilityReport:
    """Noise-free mobility report: the correlation is the decay over one sounding period"""
    entries = {}
    for user in users:
        rho = csi_decay(user.speed_mps, ap.sounding_period_ms, ap.carrier_ghz)
        entries[user.id] = MobilityEntry(correlation=rho, is_mobile=rho < threshold)
    return MobilityReport(entries=entries)


def mobility_filter(actions: Sequence[Partition], report: MobilityReport) -> List[int]:
    """
    Positions in actions of the groupings that keep every mobile user in SU mode

    The result is a list of action indices, not partitions; look them up in
    actions to get the groupings. Order is preserved and the all-singleton
    grouping always survives.
    """
    if not actions:
        raise ValueError("No actions to filter")
    mobile = set(report.mobile_ids)
    legal = []
    for index, partition in enumerate(actions):
        if any(len(g) > 1 and mobile.intersection(g) for g in partition.groups):
            continue
        legal.append(index)
    return legal


def snr_bucket(snr_db: float) -> int:
    if snr_db < 15:
        return 0
    if snr_db < 25:
        return 1
    return 2


def encode_state(
    current_partition_index: int,
    users: Sequence[UserProfile],
    report: MobilityReport,
    with_snr_buckets: bool = False,
) -> StateKey:
    """Positional state key; users keep the order they are given in"""
    if current_partition_index < 0:
        raise ValueError(f"Invalid grouping index: {current_partition_index}")
    ids = [u.id for u in users]
    return StateKey(
        grouping_index=current_partition_index,
        n_users=len(users),
        streams_vec=tuple(u.n_streams for u in users),
        mobility_mask=report.mask(ids),
        snr_buckets=tuple(snr_bucket(u.base_snr_db) for u in users) if with_snr_buckets else (),
    )


def greedy_action(q: QTable, state: StateKey, legal: Sequence[int]) -> int:
    """argmax of Q(s, .) over the legal actions, lowest index on ties"""
    if not legal:
        raise ValueError("No legal actions to choose from")
    candidates = sorted(legal)
    row = q.values(state)
    return candidates[int(np.argmax(row[candidates]))]


def select_action(
    q: QTable,
    state: StateKey,
    epsilon: float,
    legal: Sequence[int],
    rng: np.random.Generator,
) -> int:
    """Epsilon-greedy choice among the legal actions"""
    if not legal:
        raise ValueError("No legal actions to choose from")
    if rng.random() < epsilon:
        return legal[int(rng.integers(len(legal)))]
    return greedy_action(q, state, legal)


def greedy_partition(
    q: QTable,
    actions: Sequence[Partition],
    users: Sequence[UserProfile],
    report: MobilityReport,
    start_index: Optional[int] = None,
    with_snr_buckets: bool = False,
) -> Partition:
    """
    Grouping the greedy policy settles on under a fixed mobility report

    Starting from start_index (the all-singleton grouping by default), the
    greedy action is applied repeatedly until it chooses the grouping already
    in use. This is what a run with the learned table plays once it has left
    its first epoch behind. Stops after len(actions) steps if the policy cycles.
    """
    legal = mobility_filter(actions, report)
    if start_index is None:
        start_index = list(actions).index(Partition.singletons([u.id for u in users]))
    current = start_index
    for _ in range(len(actions)):
        action = greedy_action(q, encode_state(current, users, report, with_snr_buckets), legal)
        if action == current:
            break
        current = action
    return actions[current]


def q_update(
    q: QTable,
    state: StateKey,
    action: int,
    reward: float,
    next_state: StateKey,
    legal_next: Sequence[int],
    hp: RlHyperParams,
) -> QTable:
    """Q(s,a) <- Q(s,a) + alpha * (r + gamma * max_a' Q(s',a') - Q(s,a))"""
    if not math.isfinite(reward):
        raise ValueError(f"Reward must be finite, got {reward}")
    if hp.gamma > 0 and legal_next:
        future = float(np.max(q.values(next_state)[list(legal_next)]))
    else:
        future = 0.0
    row = q.row(state)
    row[action] += hp.alpha * (reward + hp.gamma * future - row[action])
    return q


def reward_of(report: "GoodputReport", kind: RewardKind = RewardKind.SUM) -> float:
    if kind == RewardKind.MIN:
        return min(report.goodput_mbps.values())
    return report.aggregate_mbps


def epsilon_at(hp: RlHyperParams, episode: int) -> float:
    return max(hp.eps_min, hp.epsilon0 * hp.eps_decay ** episode)


def train(
    env: GroupingEnvironment,
    users: Sequence[UserProfile],
    ap: ApConfig,
    hp: RlHyperParams,
    rng: np.random.Generator,
) -> TrainingResult:
    """
    Learn a grouping policy against an environment

    Each episode starts from a legal grouping drawn uniformly at random and
    runs hp.epochs_per_episode steps: observe mobility, drop groupings that
    put a mobile user in an MU group, pick a grouping epsilon-greedily,
    collect the epoch's downlink throughput as reward and apply the Bellman
    update. The first pick of an episode is always uniform so that every
    (grouping, next grouping) pair keeps being revisited after epsilon has
    decayed.

    Args:
        env: Source of mobility reports and per-epoch goodput
        users: Users being grouped
        ap: Access point limits
        hp: Learning rate, discount, epsilon schedule and episode counts
        rng: Generator used for exploration

    Returns:
        TrainingResult with the Q-table, g, the grouping that yielded the
        highest reward observed, and the grouping the greedy policy settles
        on from the all-singleton start
    """
    actions = enumerate_actions(users, ap)
    start_index = actions.index(Partition.singletons([u.id for u in users]))
    q = QTable(len(actions))
    legal_cache: Dict[Tuple[int, ...], List[int]] = {}
    ids = [u.id for u in users]

    def legal_for(report: MobilityReport) -> List[int]:
        mask = report.mask(ids)
        if mask not in legal_cache:
            legal_cache[mask] = mobility_filter(actions, report)
        return legal_cache[mask]

    best_index = start_index
    best_reward = -math.inf
    episode_rewards: List[float] = []

    logger.info(f"Training over {len(actions)} groupings for {hp.episodes} episodes")
    report = env.observe_mobility()
    for episode in range(hp.episodes):
        epsilon = epsilon_at(hp, episode)
        legal = legal_for(report)
        state = encode_state(legal[int(rng.integers(len(legal)))], users, report, hp.snr_buckets)
        total = 0.0
        for step in range(hp.epochs_per_episode):
            action = select_action(q, state, 1.0 if step == 0 else epsilon, legal, rng)
            reward = reward_of(env.evaluate(actions[action]), hp.reward)
            total += reward
            if reward > best_reward or (reward == best_reward and action < best_index):
                best_reward, best_index = reward, action

            report = env.observe_mobility()
            next_state = encode_state(action, users, report, hp.snr_buckets)
            legal_next = legal_for(report)
            q_update(q, state, action, reward, next_state, legal_next, hp)
            state, legal = next_state, legal_next

        episode_rewards.append(total / hp.epochs_per_episode)
        if (episode + 1) % 500 == 0:
            logger.info(
                f"Episode {episode + 1}/{hp.episodes}: epsilon={epsilon:.3f}, "
                f"mean reward={episode_rewards[-1]:.3f}, best={actions[best_index]} ({best_reward:.3f})"
            )

    return TrainingResult(
        qtable=q,
        actions=actions,
        best_index=best_index,
        best_partition=actions[best_index],
        best_reward=best_reward,
        greedy_partition=greedy_partition(q, actions, users, report, start_index, hp.snr_buckets),
        episode_rewards=episode_rewards,
    )


def oracle_best(
    users: Sequence[UserProfile],
    ap: ApConfig,
    env: GroupingEnvironment,
    report: Optional[MobilityReport] = None,
    threshold: float = 0.9,
) -> Partition:
    """
    Exhaustive search for the highest aggregate throughput grouping

    Without a report, mobility is judged from the expected decay over one
    sounding period.
    """
    if len(users) > ORACLE_MAX_USERS:
        raise ValueError(f"Oracle enumeration limited to {ORACLE_MAX_USERS} users, got {len(users)}")
    actions = enumerate_actions(users, ap)
    report = report or expected_mobility(users, ap, threshold)
    best: Optional[Partition] = None
    best_value = -math.inf
    for index in mobility_filter(actions, report):
        value = env.evaluate(actions[index]).aggregate_mbps
        if value > best_value:
            best, best_value = actions[index], value
    logger.debug(f"Oracle picked {best} at {best_value:.3f} Mbps")
    return best


def baseline_grouping(
    kind: BaselineKind,
    users: Sequence[UserProfile],
    ap: ApConfig,
    rng: np.random.Generator,
    report: Optional[MobilityReport] = None,
) -> Partition:
    """
    Reference groupings

    all_su puts everyone in SU mode; greedy_snr fills a single MU group with
    the strongest users the AP can serve together; random draws uniformly
    among the legal groupings. With a report, mobile users stay out of MU
    groups.
    """
    kind = BaselineKind(kind)
    ids = [u.id for u in users]
    if kind == BaselineKind.ALL_SU:
        return Partition.singletons(ids)

    if kind == BaselineKind.GREEDY_SNR:
        cap = _group_cap(ap)
        group: List[int] = []
        load = 0
        for user in sorted(users, key=lambda u: (-u.base_snr_db, u.id)):
            if report is not None and report.is_mobile(user.id):
                continue
            if len(group) < cap and load + user.n_streams <= ap.n_tx_antennas:
                group.append(user.id)
                load += user.n_streams
        rest = [[uid] for uid in ids if uid not in group]
        return Partition.from_groups(([group] if group else []) + rest)

    actions = enumerate_actions(users, ap)
    legal = mobility_filter(actions, report) if report is not None else list(range(len(actions)))
    return actions[legal[int(rng.integers(len(legal)))]]
