"""Energy-harvesting secondary user sharing a primary user's band.

Everything physical lives here: the two-state PU activity chain, imperfect
sensing, Rayleigh block fading, log-distance path loss with shadowing,
harvesting, battery and AoI bookkeeping, the central entity's power grant,
Shannon rate and the per-slot reward.

Randomness is drawn from independent Philox streams (one per physical
quantity), so a trajectory depends only on the seed and configuration, and
every stream is consumed the same number of times per slot whatever the
agent does. That keeps random numbers common across sweep points.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

SPEED_OF_LIGHT = 3e8
NOT_SENSED_DBM = 0.0  # p_r placeholder carried in the state when Z = 0


class CausalityError(ValueError):
    """Raised when an action would spend more energy than the battery holds."""


class GeometryError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PuChain:
    """Row-stochastic two-state chain; rows index the current PU state."""

    p_ia: float = 0.4  # inactive -> active
    p_ai: float = 0.3  # active -> inactive

    def __post_init__(self):
        for name in ("p_ia", "p_ai"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")

    @property
    def p_ii(self) -> float:
        return 1.0 - self.p_ia

    @property
    def p_aa(self) -> float:
        return 1.0 - self.p_ai

    def matrix(self) -> np.ndarray:
        """2x2 transition matrix with state order (inactive, active)."""
        return np.array([[self.p_ii, self.p_ia], [self.p_ai, self.p_aa]])

    def stationary_active(self) -> float:
        total = self.p_ia + self.p_ai
        return 0.5 if total == 0 else self.p_ia / total


@dataclass(frozen=True)
class SensingModel:
    p_f: float = 0.1
    p_d: float = 0.9
    n0_dbm: float = -80.0
    n_th_dbm: float = -60.0
    # Opt-in: an active PU whose signal arrives below the noise floor looks
    # idle to an energy detector. By default p_d applies wherever the PU is.
    noise_limited: bool = False

    def __post_init__(self):
        if not 0.0 <= self.p_f < self.p_d <= 1.0:
            raise ValueError(f"need 0 <= p_f < p_d <= 1, got p_f={self.p_f}, p_d={self.p_d}")
        if not self.n0_dbm < self.n_th_dbm:
            raise ValueError("noise floor must be below the underlay threshold")


@dataclass(frozen=True)
class Harvester:
    mode: str = "poisson"  # "poisson" | "normal"
    mean: float = 3.0
    std: float = 0.5

    def __post_init__(self):
        if self.mode not in ("poisson", "normal"):
            raise ValueError(f"unknown harvest mode {self.mode!r}")
        if self.mean <= 0:
            raise ValueError("harvest mean must be positive")
        if self.mode == "normal" and self.mean < 4 * self.std:
            raise ValueError("normal harvesting needs mean >= 4 * std")

    @property
    def scale(self) -> float:
        """Upper reference used when normalising harvested energy."""
        return self.mean + 4 * (math.sqrt(self.mean) if self.mode == "poisson" else self.std)


@dataclass(frozen=True)
class EnergyCosts:
    alpha: float = 3.0  # sensing
    delta: float = 1.0  # location report

    def __post_init__(self):
        if self.alpha <= 0 or self.delta <= 0:
            raise ValueError("alpha and delta must be positive")

    @staticmethod
    def update_cost(h: float) -> float:
        return 1.0 / h


@dataclass
class Battery:
    level: float
    capacity: float

    def __post_init__(self):
        if not 0.0 <= self.level <= self.capacity:
            raise ValueError(f"battery level {self.level} outside [0, {self.capacity}]")


@dataclass(frozen=True)
class Geometry:
    pu_pos: tuple[float, float] = (0.0, 0.0)
    su_pos: tuple[float, float] = (50.0, 0.0)
    d0: float = 1.0
    omega: float = 3.0
    shadow_var_db: float = 6.0
    freq_hz: float = 2.4e9
    p_pu_dbm: float = 10.0
    p_full_dbm: float = 20.0
    # SU placement annulus around the PU, redrawn at every episode reset
    r_min: float = 2.0
    r_max: float = 100.0

    def __post_init__(self):
        if self.d0 <= 0:
            raise ValueError("reference distance must be positive")
        if self.omega < 2:
            raise ValueError("path-loss exponent must be >= 2")
        if not 0 < self.r_min < self.r_max:
            raise ValueError("need 0 < r_min < r_max")

    @property
    def distance(self) -> float:
        return math.hypot(self.pu_pos[0] - self.su_pos[0], self.pu_pos[1] - self.su_pos[1])

    @property
    def k_db(self) -> float:
        """Free-space constant 20*log10(lambda / (4*pi*d0))."""
        lam = SPEED_OF_LIGHT / self.freq_hz
        return 20.0 * math.log10(lam / (4.0 * math.pi * self.d0))

    def mean_rx_dbm(self, p_tx_dbm: float, d: float) -> float:
        """Received power at distance ``d`` with zero shadowing."""
        return p_tx_dbm + self.k_db - 10.0 * self.omega * math.log10(d / self.d0)


class Action(enum.IntEnum):
    NO_SENSE = 0
    SILENT = 1
    OVERLAY = 2
    UNDERLAY = 3
    UNDERLAY_DENIED = 4

    @property
    def tuple(self) -> tuple[int, int, int, int]:
        """The (Z, L, W, U) decision tuple."""
        return _TUPLES[self]

    @property
    def z(self) -> int:
        return _TUPLES[self][0]

    @property
    def l(self) -> int:  # noqa: E743
        return _TUPLES[self][1]

    @property
    def u(self) -> int:
        return _TUPLES[self][3]

    @classmethod
    def from_tuple(cls, zlwu) -> "Action":
        for a, t in _TUPLES.items():
            if t == tuple(zlwu):
                return a
        raise ValueError(f"{tuple(zlwu)} is not an admissible decision tuple")


_TUPLES = {
    Action.NO_SENSE: (0, 0, 0, 0),
    Action.SILENT: (1, 0, 0, 0),
    Action.OVERLAY: (1, 0, 0, 1),
    Action.UNDERLAY: (1, 1, 1, 1),
    Action.UNDERLAY_DENIED: (1, 1, 1, 0),
}
N_ACTIONS = len(Action)
TRANSMIT_ACTIONS = frozenset({Action.OVERLAY, Action.UNDERLAY})


class Observation(enum.IntEnum):
    IDLE = 0
    ACTIVE_BELOW = 1  # PU sensed, P_r < N_th
    ACTIVE_ABOVE = 2  # PU sensed, P_r >= N_th


@dataclass(frozen=True, slots=True)
class EnvState:
    aoi: int
    battery: float
    harvested: float
    p_r_dbm: float = NOT_SENSED_DBM


@dataclass(frozen=True, slots=True)
class WorldState:
    pu_active: bool
    channel_gain: float
    shadow_db: float

    def __post_init__(self):
        if not self.channel_gain > 0:
            raise ValueError("channel gain must be positive")


@dataclass(frozen=True, slots=True)
class StepOutcome:
    next_state: EnvState
    reward: float
    case_id: int
    rate: float
    collided: bool
    action: Action  # realised tuple after the sensing branch
    observation: Observation | None
    ack: bool


@dataclass(frozen=True)
class EnvConfig:
    pu: PuChain = field(default_factory=PuChain)
    sensing: SensingModel = field(default_factory=SensingModel)
    harvest: Harvester = field(default_factory=Harvester)
    costs: EnergyCosts = field(default_factory=EnergyCosts)
    geometry: Geometry = field(default_factory=Geometry)
    b_max: float = 10.0
    b0: float | None = None  # initial level; None means a full battery
    a_max: int = 100
    xi: float = 1.0
    rayleigh_scale: float = 1.0

    def __post_init__(self):
        if self.b_max <= 0:
            raise ValueError("battery capacity must be positive")
        if self.a_max < 1:
            raise ValueError("a_max must be >= 1")
        if self.rayleigh_scale <= 0:
            raise ValueError("Rayleigh scale must be positive")

    @property
    def initial_level(self) -> float:
        return self.b_max if self.b0 is None else float(self.b0)


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------


def step_pu(pu_active: bool, chain: PuChain, rng: np.random.Generator) -> bool:
    """Draw the next PU activity from the Markov row of ``pu_active``."""
    p_active = chain.p_aa if pu_active else chain.p_ia
    return bool(rng.random() < p_active)


def sample_channel(scale: float, rng: np.random.Generator) -> float:
    return float(rng.rayleigh(scale))


def sample_energy(h: Harvester, rng: np.random.Generator) -> float:
    if h.mode == "poisson":
        return float(rng.poisson(h.mean))
    return max(0.0, float(rng.normal(h.mean, h.std)))


def sample_shadow(geom: Geometry, rng: np.random.Generator) -> float:
    return float(rng.normal(0.0, math.sqrt(geom.shadow_var_db)))


def received_power(geom: Geometry, pu_active: bool, shadow_db: float) -> float:
    """PU power seen at the SU in dBm, or ``-inf`` when the PU is silent."""
    d = geom.distance
    if d <= 0:
        raise GeometryError("degenerate geometry: PU and SU coincide")
    if not pu_active:
        return -math.inf
    return geom.mean_rx_dbm(geom.p_pu_dbm, d) - shadow_db


def sense_from_uniform(pu_active: bool, p_r_dbm: float, model: SensingModel, u: float) -> Observation:
    # A false alarm has no PU signal to compare with N_th, so it reads as below.
    detectable = pu_active and (p_r_dbm > model.n0_dbm or not model.noise_limited)
    if not detectable:
        return Observation.ACTIVE_BELOW if u < model.p_f else Observation.IDLE
    if u >= model.p_d:
        return Observation.IDLE
    return Observation.ACTIVE_BELOW if p_r_dbm < model.n_th_dbm else Observation.ACTIVE_ABOVE


def sense(pu_active: bool, p_r_dbm: float, model: SensingModel, rng: np.random.Generator) -> Observation:
    """One energy-detector reading of the channel."""
    return sense_from_uniform(pu_active, p_r_dbm, model, float(rng.random()))


def update_cost(h: float, capacity: float) -> float:
    # 1/h is unbounded near deep fades; anything above capacity is unaffordable anyway
    return min(EnergyCosts.update_cost(h), capacity)


def action_cost(action: Action, h: float, costs: EnergyCosts, capacity: float) -> float:
    z, l, _, u = action.tuple
    cost = costs.alpha * z + costs.delta * l
    if u:
        cost += update_cost(h, capacity)
    return cost


def check_causality(battery: Battery, action: Action, h: float, costs: EnergyCosts) -> bool:
    return action_cost(action, h, costs, battery.capacity) <= battery.level


def update_battery(battery: Battery, e: float, action: Action, h: float, costs: EnergyCosts) -> Battery:
    """Spend against the current level first, then credit the slot's harvest."""
    remaining = battery.level - action_cost(action, h, costs, battery.capacity)
    if remaining < 0:
        raise CausalityError("causality violated")
    return Battery(min(remaining + e, battery.capacity), battery.capacity)


def update_aoi(aoi: int, action: Action, ack: bool, a_max: int) -> int:
    if action in TRANSMIT_ACTIONS and ack:
        return 1
    return min(aoi + 1, a_max)


def protection_radius(geom: Geometry, model: SensingModel) -> float:
    """Distance at which the PU's mean received power falls to the noise floor."""
    return geom.d0 * 10.0 ** ((geom.p_pu_dbm + geom.k_db - model.n0_dbm) / (10.0 * geom.omega))


def allocate_power(geom: Geometry, model: SensingModel) -> float | None:
    """Central entity's underlay grant in dBm; ``None`` is the zero grant.

    The grant is the largest SU power whose mean-path-loss level at the PU does
    not exceed the noise floor, capped at the SU's full power.
    """
    d = geom.distance
    if d - protection_radius(geom, model) <= 0:
        return None
    p_lim = model.n0_dbm - geom.k_db + 10.0 * geom.omega * math.log10(d / geom.d0)
    return min(p_lim, geom.p_full_dbm)


def rate(p_tx_dbm: float | None, h: float, noise_dbm: float) -> float:
    """Spectral efficiency log2(1 + P|h|^2 / sigma^2) in bps/Hz."""
    if p_tx_dbm is None:
        return 0.0
    snr = 10.0 ** ((p_tx_dbm - noise_dbm) / 10.0) * h * h
    return math.log2(1.0 + snr)


def reward(state: EnvState, case_id: int, rate_bps: float, xi: float) -> float:
    if case_id in (2, 6):
        return xi * rate_bps - state.aoi
    return -float(state.aoi)


def valid_actions(state: EnvState, h: float, costs: EnergyCosts, capacity: float) -> list[Action]:
    battery = Battery(state.battery, capacity)
    out = [Action.NO_SENSE]
    out.extend(a for a in list(Action)[1:] if check_causality(battery, a, h, costs))
    return out


def action_mask(state: EnvState, h: float, costs: EnergyCosts, capacity: float) -> np.ndarray:
    """Boolean vector over :class:`Action`; same rule as :func:`valid_actions`."""
    b = state.battery
    sense = costs.alpha
    report = sense + costs.delta
    phi = update_cost(h, capacity)
    return np.array([True, sense <= b, sense + phi <= b, report + phi <= b, report <= b])


def resolve(action: Action, obs: Observation | None, pu_active: bool, p_r_dbm: float,
            grant_dbm: float | None, sensing: SensingModel) -> tuple[Action, int, bool, bool]:
    """Map the chosen action and the sensing result to what actually happens.

    Returns ``(realised_action, case_id, ack, collided)``. The chosen tuple is a
    plan: overlay needs an idle reading; underlay also transmits at full power
    on an idle reading (no location report needed) and otherwise asks the
    central entity for a grant when the reading is below the threshold.
    """
    if action is Action.NO_SENSE:
        return Action.NO_SENSE, 1, False, False
    if obs is Observation.ACTIVE_ABOVE:
        return Action.SILENT, 5, False, False
    if obs is Observation.IDLE:
        if action in (Action.OVERLAY, Action.UNDERLAY):
            collided = pu_active and p_r_dbm > sensing.n_th_dbm
            return Action.OVERLAY, (3 if collided else 2), not collided, collided
        return Action.SILENT, 4, False, False
    # ACTIVE_BELOW
    if action is Action.UNDERLAY:
        if grant_dbm is None:
            return Action.UNDERLAY_DENIED, 8, False, False
        return Action.UNDERLAY, 6, True, False
    if action is Action.UNDERLAY_DENIED:
        return Action.UNDERLAY_DENIED, 8, False, False
    return Action.SILENT, 7, False, False


@dataclass
class Streams:
    """Independent generators, one per random quantity."""

    pu: np.random.Generator
    sense: np.random.Generator
    channel: np.random.Generator
    energy: np.random.Generator
    shadow: np.random.Generator
    placement: np.random.Generator

    @classmethod
    def from_seed(cls, seed) -> "Streams":
        seqs = np.random.SeedSequence(seed).spawn(6)
        return cls(*(np.random.Generator(np.random.Philox(s)) for s in seqs))


def env_step(state: EnvState, world: WorldState, action: Action, cfg: EnvConfig,
             geom: Geometry, streams: Streams) -> tuple[StepOutcome, WorldState]:
    """Advance one slot.

    The chosen action must be affordable at ``world.channel_gain``. Every
    stream is consumed exactly once per call regardless of the branch taken.
    """
    h = world.channel_gain
    battery = Battery(state.battery, cfg.b_max)
    if not check_causality(battery, action, h, cfg.costs):
        raise CausalityError("causality violated")

    p_r = received_power(geom, world.pu_active, world.shadow_db)
    u_sense = float(streams.sense.random())
    obs = None
    if action.z:
        obs = sense_from_uniform(world.pu_active, p_r, cfg.sensing, u_sense)

    grant = None
    if action in (Action.UNDERLAY, Action.UNDERLAY_DENIED) and obs is Observation.ACTIVE_BELOW:
        grant = allocate_power(geom, cfg.sensing)
    realised, case_id, ack, collided = resolve(action, obs, world.pu_active, p_r, grant, cfg.sensing)

    if case_id == 2:
        r = rate(geom.p_full_dbm, h, cfg.sensing.n0_dbm)
    elif case_id == 6:
        r = rate(grant, h, cfg.sensing.n0_dbm)
    else:
        r = 0.0

    new_battery = update_battery(battery, state.harvested, realised, h, cfg.costs)
    new_aoi = update_aoi(state.aoi, realised, ack, cfg.a_max)
    rew = reward(state, case_id, r, cfg.xi)

    if obs is None:
        seen = NOT_SENSED_DBM
    elif obs is Observation.IDLE:
        seen = cfg.sensing.n0_dbm
    elif world.pu_active and p_r > cfg.sensing.n0_dbm:
        seen = p_r
    else:
        seen = cfg.sensing.n0_dbm

    next_world = WorldState(
        pu_active=step_pu(world.pu_active, cfg.pu, streams.pu),
        channel_gain=sample_channel(cfg.rayleigh_scale, streams.channel),
        shadow_db=sample_shadow(geom, streams.shadow),
    )
    next_state = EnvState(
        aoi=new_aoi,
        battery=new_battery.level,
        harvested=sample_energy(cfg.harvest, streams.energy),
        p_r_dbm=seen,
    )
    outcome = StepOutcome(next_state, rew, case_id, r, collided, realised, obs, ack)
    return outcome, next_world


def place_su(geom: Geometry, rng: np.random.Generator) -> Geometry:
    """Uniform-by-area position in the placement annulus around the PU."""
    radius = math.sqrt(rng.uniform(geom.r_min ** 2, geom.r_max ** 2))
    theta = rng.uniform(0.0, 2.0 * math.pi)
    x0, y0 = geom.pu_pos
    return replace(geom, su_pos=(x0 + radius * math.cos(theta), y0 + radius * math.sin(theta)))


class SpectrumEnv:
    """Stateful wrapper around :func:`env_step` with per-episode placement."""

    def __init__(self, cfg: EnvConfig | None = None, seed=0):
        self.cfg = cfg or EnvConfig()
        self.streams = Streams.from_seed(seed)
        self.geom = self.cfg.geometry
        self.state: EnvState | None = None
        self.world: WorldState | None = None

    def reset(self) -> EnvState:
        cfg = self.cfg
        self.geom = place_su(cfg.geometry, self.streams.placement)
        pu0 = bool(self.streams.pu.random() < cfg.pu.stationary_active())
        self.world = WorldState(
            pu_active=pu0,
            channel_gain=sample_channel(cfg.rayleigh_scale, self.streams.channel),
            shadow_db=sample_shadow(self.geom, self.streams.shadow),
        )
        self.state = EnvState(
            aoi=1,
            battery=cfg.initial_level,
            harvested=sample_energy(cfg.harvest, self.streams.energy),
        )
        return self.state

    def mask(self) -> np.ndarray:
        return action_mask(self.state, self.world.channel_gain, self.cfg.costs, self.cfg.b_max)

    def step(self, action) -> StepOutcome:
        out, self.world = env_step(self.state, self.world, Action(action), self.cfg, self.geom, self.streams)
        self.state = out.next_state
        return out
