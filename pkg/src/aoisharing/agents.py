"""DQN and D3QN learners plus the fixed comparison policies."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _fast
from .env import N_ACTIONS, Action, EnvConfig, EnvState, NOT_SENSED_DBM, Observation, SpectrumEnv
from .nn import Adam, DenseNet

STATE_DIM = 4


def encode_state(state: EnvState, cfg: EnvConfig) -> np.ndarray:
    """Scale the observable tuple to O(1) network inputs."""
    s = cfg.sensing
    if state.p_r_dbm == NOT_SENSED_DBM:
        pr = 0.0
    else:
        pr = (state.p_r_dbm - s.n0_dbm) / (s.n_th_dbm - s.n0_dbm)
    return np.array([
        state.aoi / cfg.a_max,
        state.battery / cfg.b_max,
        state.harvested / cfg.harvest.scale,
        pr,
    ])


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    x: int
    r: float
    s_next: np.ndarray
    done: bool = False
    next_mask: np.ndarray | None = None


class ReplayBuffer:
    """Fixed-capacity FIFO memory backed by preallocated arrays."""

    def __init__(self, capacity: int = 2000, state_dim: int = STATE_DIM, n_actions: int = N_ACTIONS):
        self.capacity = int(capacity)
        self.s = np.zeros((capacity, state_dim))
        self.x = np.zeros(capacity, dtype=np.int64)
        self.r = np.zeros(capacity)
        self.s_next = np.zeros((capacity, state_dim))
        self.done = np.zeros(capacity, dtype=bool)
        self.next_mask = np.ones((capacity, n_actions), dtype=bool)
        self.size = 0
        self._head = 0  # next write position

    def __len__(self) -> int:
        return self.size

    def push(self, t: Transition) -> None:
        i = self._head
        self.s[i] = t.s
        self.x[i] = t.x
        self.r[i] = t.r
        self.s_next[i] = t.s_next
        self.done[i] = t.done
        self.next_mask[i] = True if t.next_mask is None else t.next_mask
        self._head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def _order(self) -> np.ndarray:
        start = (self._head - self.size) % self.capacity
        return (start + np.arange(self.size)) % self.capacity

    def __iter__(self):
        for i in self._order():
            yield Transition(self.s[i].copy(), int(self.x[i]), float(self.r[i]),
                             self.s_next[i].copy(), bool(self.done[i]), self.next_mask[i].copy())

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if self.size < batch_size:
            raise ValueError("warmup incomplete: buffer holds fewer transitions than the batch size")
        return rng.integers(0, self.size, size=batch_size)

    def sample(self, batch_size: int, rng: np.random.Generator) -> "Batch":
        idx = self.sample_indices(batch_size, rng)
        return Batch(self.s[idx], self.x[idx], self.r[idx], self.s_next[idx], self.done[idx],
                     self.next_mask[idx])


@dataclass
class Batch:
    s: np.ndarray
    x: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray
    next_mask: np.ndarray

    @classmethod
    def from_transitions(cls, items) -> "Batch":
        items = list(items)
        n_actions = next((len(t.next_mask) for t in items if t.next_mask is not None), N_ACTIONS)
        return cls(
            np.array([t.s for t in items], dtype=float),
            np.array([t.x for t in items], dtype=np.int64),
            np.array([t.r for t in items], dtype=float),
            np.array([t.s_next for t in items], dtype=float),
            np.array([t.done for t in items], dtype=bool),
            np.array([np.ones(n_actions, bool) if t.next_mask is None else t.next_mask for t in items]),
        )


@dataclass(frozen=True)
class EpsilonSchedule:
    start: float = 1.0
    decay: float = 0.99986
    floor: float = 0.001

    def __call__(self, t: int) -> float:
        return max(self.floor, self.start * self.decay ** t)

    def first_floor_step(self) -> int:
        """Smallest t with start * decay**t <= floor."""
        t = max(0, math.ceil(math.log(self.floor / self.start) / math.log(self.decay)))
        while t > 0 and self.start * self.decay ** (t - 1) <= self.floor:
            t -= 1
        while self.start * self.decay ** t > self.floor:
            t += 1
        return t


@dataclass(frozen=True)
class AgentConfig:
    gamma: float = 0.95
    lr: float = 0.01
    batch_size: int = 32
    memory: int = 2000
    target_sync: int = 35
    episodes: int = 200
    horizon: int = 300
    epsilon: EpsilonSchedule = field(default_factory=EpsilonSchedule)
    warmup: int | None = None  # transitions stored before learning starts; None means `memory`
    hidden: tuple[int, ...] = (64, 64)
    bootstrap_on_done: bool = False
    # Rewards are divided by this before storage; any positive value leaves the greedy policy unchanged.
    reward_scale: float = 1.0
    fast: bool = True  # fused compiled TD update instead of the numpy reference path

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        for name in ("lr", "batch_size", "memory", "target_sync", "horizon", "reward_scale"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.episodes < 0:
            raise ValueError("episodes must be >= 0")

    @property
    def warmup_size(self) -> int:
        w = self.memory if self.warmup is None else self.warmup
        return max(w, self.batch_size)


def masked_argmax(q: np.ndarray, mask: np.ndarray | None) -> np.ndarray | int:
    """Argmax over allowed entries, lowest index on ties."""
    if mask is None:
        return np.argmax(q, axis=-1)
    return np.argmax(np.where(mask, q, -np.inf), axis=-1)


def select_action(net: DenseNet, state: np.ndarray, mask, eps: float, rng: np.random.Generator) -> int:
    mask = np.asarray(mask, dtype=bool)
    allowed = np.flatnonzero(mask)
    if allowed.size == 0:
        raise ValueError("empty action mask")
    if rng.random() < eps:
        return int(allowed[rng.integers(allowed.size)])
    return int(masked_argmax(net.predict(state), mask))


def _bootstrap(batch: Batch, gamma: float, values: np.ndarray) -> np.ndarray:
    return batch.r + gamma * np.where(batch.done, 0.0, values)


def dqn_targets(batch: Batch, online: DenseNet, target: DenseNet, gamma: float) -> np.ndarray:
    q_next = target.forward(batch.s_next, cache=False)
    best = np.where(batch.next_mask, q_next, -np.inf).max(axis=1)
    return _bootstrap(batch, gamma, best)


def double_targets(batch: Batch, online: DenseNet, target: DenseNet, gamma: float) -> np.ndarray:
    """Online network picks the next action, target network scores it."""
    pick = masked_argmax(online.forward(batch.s_next, cache=False), batch.next_mask)
    q_next = target.forward(batch.s_next, cache=False)
    return _bootstrap(batch, gamma, q_next[np.arange(len(pick)), pick])


class QAgent:
    """Online/target network pair trained from replay.

    ``double=True, dueling=True`` is D3QN; both False is the plain DQN.
    """

    def __init__(self, cfg: AgentConfig | None = None, *, double: bool = False, dueling: bool = False,
                 seed: int = 0, state_dim: int = STATE_DIM, n_actions: int = N_ACTIONS):
        self.cfg = cfg or AgentConfig()
        self.double = double
        self.dueling = dueling
        seeds = np.random.SeedSequence(seed).spawn(2)
        init_seed = int(seeds[0].generate_state(1)[0])
        self.rng = np.random.Generator(np.random.Philox(seeds[1]))
        self.online = DenseNet(state_dim, n_actions, self.cfg.hidden, dueling=dueling, seed=init_seed)
        self.target = self.online.copy()
        self.opt = Adam(self.online.flat.size, lr=self.cfg.lr)
        self.buffer = ReplayBuffer(self.cfg.memory, state_dim, n_actions)
        self.steps = 0  # environment steps taken in training mode
        self.updates = 0  # gradient steps
        self.syncs = 0

    @property
    def name(self) -> str:
        return "d3qn" if (self.double and self.dueling) else ("dqn" if not (self.double or self.dueling) else "custom")

    @property
    def epsilon(self) -> float:
        return self.cfg.epsilon(self.steps)

    def act(self, state_vec, mask, greedy: bool = False) -> int:
        eps = 0.0 if greedy else self.epsilon
        return select_action(self.online, state_vec, mask, eps, self.rng)

    def targets(self, batch: Batch) -> np.ndarray:
        fn = double_targets if self.double else dqn_targets
        return fn(batch, self.online, self.target, self.cfg.gamma)

    def train_step(self, batch: Batch) -> float:
        """One Adam step on the mean squared TD error; returns the pre-step loss."""
        if self.cfg.fast:
            return self._train_step_fast(batch)
        y = self.targets(batch)
        q = self.online.forward(batch.s)
        rows = np.arange(len(y))
        err = y - q[rows, batch.x]
        loss = float(np.mean(err * err))
        grad_out = np.zeros_like(q)
        grad_out[rows, batch.x] = -2.0 * err / len(y)
        self.opt.step(self.online.flat, self.online.backward_flat(grad_out))
        self.updates += 1
        return loss

    def _train_step_fast(self, batch: Batch) -> float:
        opt, net = self.opt, self.online
        opt.t += 1
        loss = _fast.td_update(
            net.flat, self.target.flat, net.layout, net.n_trunk, self.dueling, self.double, self.cfg.gamma,
            np.ascontiguousarray(batch.s, dtype=float), np.ascontiguousarray(batch.x, dtype=np.int64),
            np.ascontiguousarray(batch.r, dtype=float), np.ascontiguousarray(batch.s_next, dtype=float),
            np.ascontiguousarray(batch.done, dtype=bool), np.ascontiguousarray(batch.next_mask, dtype=bool),
            opt.m, opt.v, opt.t, opt.lr, opt.beta1, opt.beta2, opt.eps,
        )
        self.updates += 1
        return float(loss)

    def sync_target(self) -> None:
        self.target.load_params_from(self.online)
        self.syncs += 1

    def observe(self, t: Transition) -> float | None:
        """Store a transition, learn once warm, and keep the target in step."""
        self.buffer.push(t)
        self.steps += 1
        loss = None
        if len(self.buffer) >= self.cfg.warmup_size:
            loss = self.train_step(self.buffer.sample(self.cfg.batch_size, self.rng))
        if self.steps % self.cfg.target_sync == 0:
            self.sync_target()
        return loss


# ---------------------------------------------------------------------------
# fixed policies
# ---------------------------------------------------------------------------


def baseline_overlay_policy(state: EnvState | None, observation: Observation | None, mask) -> Action:
    """Overlay-only reference scheme.

    With ``observation=None`` this is the plan handed to the environment
    before sensing; with a reading it is the action that plan resolves to.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask[Action.SILENT]:
        return Action.NO_SENSE
    if observation is None:
        return Action.OVERLAY if mask[Action.OVERLAY] else Action.SILENT
    if observation is Observation.IDLE and mask[Action.OVERLAY]:
        return Action.OVERLAY
    return Action.SILENT


class BaselinePolicy:
    name = "baseline"

    def act(self, state_vec, mask, greedy: bool = False, state: EnvState | None = None) -> int:
        return int(baseline_overlay_policy(state, None, mask))


class RandomPolicy:
    name = "random"

    def __init__(self, seed: int = 0):
        self.rng = np.random.Generator(np.random.Philox(seed))

    def act(self, state_vec, mask, greedy: bool = False, state: EnvState | None = None) -> int:
        allowed = np.flatnonzero(mask)
        return int(allowed[self.rng.integers(allowed.size)])


class GreedyPolicy:
    """Frozen network acting greedily, e.g. a loaded checkpoint."""

    def __init__(self, net: DenseNet, name: str = "greedy"):
        self.net = net
        self.name = name
        self.rng = np.random.default_rng(0)  # unused at eps=0, kept for select_action's signature

    def act(self, state_vec, mask, greedy: bool = True, state: EnvState | None = None) -> int:
        return select_action(self.net, state_vec, mask, 0.0, self.rng)


class FixedPolicy:
    """Always the same action when allowed, otherwise NoSense."""

    def __init__(self, action: Action):
        self.action = Action(action)
        self.name = self.action.name.lower()

    def act(self, state_vec, mask, greedy: bool = False, state: EnvState | None = None) -> int:
        return int(self.action) if mask[self.action] else int(Action.NO_SENSE)


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------


@dataclass
class EpisodeRecord:
    reward: np.ndarray
    aoi: np.ndarray
    rate: np.ndarray
    action: np.ndarray  # realised action per slot
    chosen: np.ndarray  # action picked by the policy
    case: np.ndarray
    loss: list = field(default_factory=list)

    @property
    def total_reward(self) -> float:
        return float(self.reward.sum())


def run_episode(agent, env: SpectrumEnv, train: bool = False, horizon: int | None = None) -> EpisodeRecord:
    """Play one episode from a fresh reset.

    In training mode a :class:`QAgent` stores every transition and learns;
    otherwise actions are greedy and no parameter changes.
    """
    if horizon is None:
        horizon = agent.cfg.horizon if isinstance(agent, QAgent) else 300
    learner = train and isinstance(agent, QAgent)
    cfg = env.cfg
    state = env.reset()
    mask = env.mask()
    vec = encode_state(state, cfg)
    rec = {k: np.zeros(horizon) for k in ("reward", "aoi", "rate")}
    acts = np.zeros(horizon, dtype=np.int8)
    chosen = np.zeros(horizon, dtype=np.int8)
    cases = np.zeros(horizon, dtype=np.int8)
    losses = []
    for t in range(horizon):
        x = agent.act(vec, mask, greedy=not train) if isinstance(agent, QAgent) else agent.act(vec, mask, state=state)
        out = env.step(x)
        rec["reward"][t] = out.reward
        rec["aoi"][t] = state.aoi
        rec["rate"][t] = out.rate
        acts[t] = out.action
        chosen[t] = x
        cases[t] = out.case_id
        state = out.next_state
        next_mask = env.mask()
        next_vec = encode_state(state, cfg)
        if learner:
            done = agent.cfg.bootstrap_on_done and t == horizon - 1
            loss = agent.observe(Transition(vec, x, out.reward / agent.cfg.reward_scale, next_vec, done, next_mask))
            if loss is not None:
                losses.append(loss)
        vec, mask = next_vec, next_mask
    return EpisodeRecord(rec["reward"], rec["aoi"], rec["rate"], acts, chosen, cases, losses)


def train_agent(agent: QAgent, env: SpectrumEnv, episodes: int | None = None) -> list[EpisodeRecord]:
    n = agent.cfg.episodes if episodes is None else episodes
    return [run_episode(agent, env, train=True) for _ in range(n)]


def make_agent(scheme: str, cfg: AgentConfig | None = None, seed: int = 0):
    if scheme == "dqn":
        return QAgent(cfg, double=False, dueling=False, seed=seed)
    if scheme == "d3qn":
        return QAgent(cfg, double=True, dueling=True, seed=seed)
    if scheme == "baseline":
        return BaselinePolicy()
    if scheme == "random":
        return RandomPolicy(seed)
    raise ValueError(f"unknown scheme {scheme!r}")
