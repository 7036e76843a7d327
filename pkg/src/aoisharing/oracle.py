"""Exact finite-MDP reference for the spectrum-sharing environment.

The oracle sees the PU state, the AoI and a binned battery level. Everything
else the environment draws inside a slot (the sensing outcome, the collision,
the channel gain that sets the update cost, the harvest) is marginalised into
the transition tensor. The SU position is held at ``cfg.geometry.su_pos``.

Within a slot the PU state is the current one, the chosen action is resolved
exactly as :func:`aoisharing.env.resolve` does, the cost is spent and the
harvest credited, then the PU moves on its chain.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, stats

from .env import (N_ACTIONS, TRANSMIT_ACTIONS, Action, EnvConfig, Observation, allocate_power,
                  protection_radius, resolve)

_ROW_TOL = 1e-9


@dataclass(frozen=True)
class DiscreteMdp:
    """Tabular MDP with an action-validity mask.

    States are indexed ``((aoi - 1) * n_battery + battery) * 2 + pu`` when built
    by :func:`build_mdp`; ``labels`` holds the ``(aoi, battery_bin, pu)`` tuples.
    """

    transition: np.ndarray  # (S, X, S)
    reward: np.ndarray  # (S, X)
    discount: float
    valid: np.ndarray | None = None  # (S, X) bool; None means all valid
    labels: tuple = ()

    def __post_init__(self):
        p = np.asarray(self.transition, dtype=float)
        r = np.asarray(self.reward, dtype=float)
        if p.ndim != 3 or p.shape[0] != p.shape[2] or r.shape != p.shape[:2]:
            raise ValueError("transition must be (S, X, S) and reward (S, X)")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError(f"discount must lie in [0, 1), got {self.discount}")
        if not np.all(np.isfinite(r)):
            raise ValueError("rewards must be finite")
        valid = np.ones(r.shape, dtype=bool) if self.valid is None else np.asarray(self.valid, dtype=bool)
        if not valid.any(axis=1).all():
            raise ValueError("every state needs at least one valid action")
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "valid", valid)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def row_error(self) -> float:
        """Largest deviation of a valid row's mass from 1."""
        sums = self.transition.sum(axis=2)[self.valid]
        return float(np.max(np.abs(sums - 1.0))) if sums.size else 0.0

    def with_reward(self, reward) -> "DiscreteMdp":
        return DiscreteMdp(self.transition, reward, self.discount, self.valid, self.labels)

    def with_discount(self, discount: float) -> "DiscreteMdp":
        return DiscreteMdp(self.transition, self.reward, discount, self.valid, self.labels)


@dataclass
class ValueTable:
    v: np.ndarray
    q: np.ndarray  # invalid entries are -inf
    policy: np.ndarray
    residuals: list = field(default_factory=list)  # sup-norm change per sweep


# ---------------------------------------------------------------------------
# discretisation
# ---------------------------------------------------------------------------


def _bin_of(x: float, width: float) -> int:
    """Nearest bin, ties toward the lower one."""
    return max(0, math.ceil(x / width - 0.5 - 1e-12))


def harvest_pmf(cfg: EnvConfig, width: float, top: int) -> np.ndarray:
    """Mass of the harvest on bins ``0..top``; the top bin collects the tail."""
    hv = cfg.harvest
    pmf = np.zeros(top + 1)
    if hv.mode == "poisson":
        # integer draws; walk until the remaining mass is negligible
        k, mass = 0, 0.0
        hi = int(hv.mean + 20 * math.sqrt(hv.mean) + 20)
        for k in range(hi + 1):
            p = float(stats.poisson.pmf(k, hv.mean))
            b = min(_bin_of(k, width), top)
            pmf[b] += p
            mass += p
        pmf[top] += max(0.0, 1.0 - mass)
    else:
        # negative draws are clipped to 0, so they land in bin 0
        cdf = stats.norm(hv.mean, hv.std).cdf
        prev = 0.0
        for b in range(top):
            cur = float(cdf((b + 0.5) * width))
            pmf[b] = cur - prev
            prev = cur
        pmf[top] = 1.0 - prev
    return pmf


def update_cost_bins(cfg: EnvConfig, width: float, top: int):
    """Distribution of the binned update cost ``min(1/h, B_max)``.

    Returns ``(pmf, edges)`` where bin ``k`` holds channel gains in
    ``[edges[k + 1], edges[k])`` (gains fall as the cost rises).
    """
    sigma = cfg.rayleigh_scale
    edges = [math.inf]
    for k in range(top):
        hi_cost = (k + 0.5) * width
        edges.append(1.0 / hi_cost if hi_cost < cfg.b_max else 0.0)
    edges.append(0.0)
    edges = np.array(edges)
    sf = np.exp(-(edges ** 2) / (2 * sigma ** 2))  # P(h >= edge)
    sf[0] = 0.0
    pmf = np.diff(sf)
    return pmf, edges


def _rate_mass(p_dbm: float | None, lo: float, hi: float, sigma: float, n0_dbm: float) -> float:
    """E[rate * 1{lo <= h < hi}] for Rayleigh h."""
    if p_dbm is None or hi <= lo:
        return 0.0
    g = 10.0 ** ((p_dbm - n0_dbm) / 10.0)

    def f(h):
        return math.log2(1.0 + g * h * h) * h / sigma ** 2 * math.exp(-h * h / (2 * sigma ** 2))

    val, _ = integrate.quad(f, lo, hi, limit=200)
    return val


def observation_outcomes(cfg: EnvConfig, pu_active: bool) -> list[tuple[float, Observation, float]]:
    """``(probability, reading, received dBm stand-in)`` triples for one slot.

    The dBm stand-in only needs to land on the right side of the collision
    threshold, so each outcome carries a representative value.
    """
    s = cfg.sensing
    if not pu_active:
        return [(1.0 - s.p_f, Observation.IDLE, -math.inf), (s.p_f, Observation.ACTIVE_BELOW, -math.inf)]
    geom = cfg.geometry
    mean = geom.mean_rx_dbm(geom.p_pu_dbm, geom.distance)
    sd = math.sqrt(geom.shadow_var_db)
    q_th = float(stats.norm.sf(s.n_th_dbm, mean, sd)) if sd > 0 else float(mean > s.n_th_dbm)
    q_n0 = float(stats.norm.sf(s.n0_dbm, mean, sd)) if sd > 0 else float(mean > s.n0_dbm)
    above, below = s.n_th_dbm + 1.0, s.n0_dbm + 1.0
    out = [
        ((1 - s.p_d) * q_th, Observation.IDLE, above),
        (s.p_d * q_th, Observation.ACTIVE_ABOVE, above),
    ]
    if s.noise_limited:
        out += [
            ((1 - s.p_d) * (q_n0 - q_th), Observation.IDLE, below),
            (s.p_d * (q_n0 - q_th), Observation.ACTIVE_BELOW, below),
            ((1 - q_n0) * (1 - s.p_f), Observation.IDLE, s.n0_dbm - 1.0),
            ((1 - q_n0) * s.p_f, Observation.ACTIVE_BELOW, s.n0_dbm - 1.0),
        ]
    else:
        out += [
            ((1 - s.p_d) * (1 - q_th), Observation.IDLE, below),
            (s.p_d * (1 - q_th), Observation.ACTIVE_BELOW, below),
        ]
    return [o for o in out if o[0] > 0]


def state_index(aoi: int, battery: int, pu: int, n_battery: int) -> int:
    return ((aoi - 1) * n_battery + battery) * 2 + pu


def build_mdp(cfg: EnvConfig, bins, discount: float = 0.95) -> DiscreteMdp:
    """Discretise ``cfg`` into an exact finite MDP.

    ``bins`` is ``(n_aoi, n_battery)``: AoI takes values ``1..n_aoi`` (saturating)
    and the battery ``n_battery`` evenly spaced levels from 0 to ``B_max``.
    Costs and harvests map to the nearest level, ties toward the lower one.
    The channel gain is not part of the state, so an update whose realised
    cost exceeds the battery is skipped and only the sensing (and location)
    energy is spent.
    """
    n_aoi, n_bat = (int(b) for b in bins)
    if n_aoi < 2 or n_bat < 2:
        raise ValueError("need at least 2 bins per axis")
    top = n_bat - 1
    width = cfg.b_max / top
    alpha = _bin_of(cfg.costs.alpha, width)
    report = _bin_of(cfg.costs.alpha + cfg.costs.delta, width)
    if report > top:
        raise ValueError("discretization too coarse: sensing plus location cost exceeds the top battery bin")

    e_pmf = harvest_pmf(cfg, width, top)
    c_pmf, edges = update_cost_bins(cfg, width, top)
    chain = cfg.pu.matrix()
    n0 = cfg.sensing.n0_dbm
    grant = allocate_power(cfg.geometry, cfg.sensing)
    sigma = cfg.rayleigh_scale
    need_rate = cfg.xi != 0.0
    rate_full = np.zeros(top + 1)
    rate_grant = np.zeros(top + 1)
    if need_rate:
        for k in range(top + 1):
            lo, hi = edges[k + 1], edges[k]
            rate_full[k] = _rate_mass(cfg.geometry.p_full_dbm, lo, hi, sigma, n0)
            rate_grant[k] = _rate_mass(grant, lo, hi, sigma, n0)

    n_s = n_aoi * n_bat * 2
    P = np.zeros((n_s, N_ACTIONS, n_s))
    R = np.zeros((n_s, N_ACTIONS))
    valid = np.zeros((n_s, N_ACTIONS), dtype=bool)
    labels = []
    outcomes = {pu: observation_outcomes(cfg, bool(pu)) for pu in (0, 1)}
    plan_cost = {Action.NO_SENSE: 0, Action.SILENT: alpha, Action.OVERLAY: alpha,
                 Action.UNDERLAY: report, Action.UNDERLAY_DENIED: report}

    for aoi in range(1, n_aoi + 1):
        for b in range(n_bat):
            for pu in (0, 1):
                s = state_index(aoi, b, pu, n_bat)
                labels.append((aoi, b, pu))
                for x in Action:
                    # the update cost is unknown when choosing, so validity
                    # only covers the fixed sensing and location energy
                    if plan_cost[x] > b:
                        continue
                    valid[s, x] = True
                    # (probability, next aoi, spend, expected rate mass)
                    branches = []
                    if x is Action.NO_SENSE:
                        branches.append((1.0, min(aoi + 1, n_aoi), 0, 0.0))
                    else:
                        for p_o, obs, p_r in outcomes[pu]:
                            realised, case, ack, _ = resolve(x, obs, bool(pu), p_r, grant, cfg.sensing)
                            if realised not in TRANSMIT_ACTIONS:
                                spend = report if realised is Action.UNDERLAY_DENIED else alpha
                                branches.append((p_o, min(aoi + 1, n_aoi), spend, 0.0))
                                continue
                            fixed = report if realised is Action.UNDERLAY else alpha
                            rates = rate_grant if realised is Action.UNDERLAY else rate_full
                            for k in range(top + 1):
                                if c_pmf[k] <= 0:
                                    continue
                                if fixed + k <= b:
                                    nxt = 1 if ack else min(aoi + 1, n_aoi)
                                    r_mass = rates[k] if case in (2, 6) else 0.0
                                    branches.append((p_o * c_pmf[k], nxt, fixed + k, p_o * r_mass))
                                else:
                                    branches.append((p_o * c_pmf[k], min(aoi + 1, n_aoi), fixed, 0.0))
                    r_exp = -float(aoi)
                    for p_br, nxt, spend, r_mass in branches:
                        r_exp += cfg.xi * r_mass
                        left = b - spend
                        for e_bin, p_e in enumerate(e_pmf):
                            if p_e <= 0:
                                continue
                            b_next = min(left + e_bin, top)
                            for pu_next in (0, 1):
                                p = p_br * p_e * chain[pu, pu_next]
                                if p > 0:
                                    P[s, x, state_index(nxt, b_next, pu_next, n_bat)] += p
                    R[s, x] = r_exp
    mdp = DiscreteMdp(P, R, discount, valid, tuple(labels))
    if mdp.row_error() > _ROW_TOL:
        raise ValueError(f"transition rows not stochastic (error {mdp.row_error():.3g})")
    return mdp


# ---------------------------------------------------------------------------
# solvers
# ---------------------------------------------------------------------------


def _check_rows(mdp: DiscreteMdp) -> None:
    if mdp.row_error() > _ROW_TOL:
        raise ValueError("transition rows are not stochastic")
    if np.any(mdp.transition < 0):
        raise ValueError("transition tensor has negative entries")


def greedy(q: np.ndarray) -> np.ndarray:
    """Argmax per row, ties to the lowest index (``-inf`` marks invalid)."""
    return np.argmax(q, axis=1)


def bellman_q(mdp: DiscreteMdp, v: np.ndarray) -> np.ndarray:
    q = mdp.reward + mdp.discount * (mdp.transition @ v)
    return np.where(mdp.valid, q, -np.inf)


def value_iteration(mdp: DiscreteMdp, tol: float = 1e-10, max_iter: int = 1_000_000) -> ValueTable:
    """Solve the Bellman optimality equation to a sup-norm residual below ``tol``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    _check_rows(mdp)
    v = np.zeros(mdp.n_states)
    residuals = []
    for _ in range(max_iter):
        v_new = bellman_q(mdp, v).max(axis=1)
        diff = float(np.max(np.abs(v_new - v)))
        residuals.append(diff)
        v = v_new
        # residual of v_new is at most gamma * diff
        if mdp.discount * diff < tol:
            break
    else:
        raise RuntimeError("value iteration did not converge")
    q = bellman_q(mdp, v)
    return ValueTable(q.max(axis=1), q, greedy(q), residuals)


def bellman_residual(mdp: DiscreteMdp, v: np.ndarray) -> float:
    return float(np.max(np.abs(bellman_q(mdp, v).max(axis=1) - v)))


def policy_agreement(q_ref: np.ndarray, actions, tol: float = 1e-9) -> np.ndarray:
    """Per state: is ``actions[s]`` within ``tol`` (absolute) of optimal under ``q_ref``?

    Any member of the optimal set counts as a match, so exact ties never read
    as disagreements.
    """
    actions = np.asarray(actions)
    best = q_ref.max(axis=1)
    chosen = q_ref[np.arange(len(actions)), actions]
    return chosen >= best - tol


class MdpEnv:
    """Sampler over a :class:`DiscreteMdp` with the environment's reset/step shape."""

    def __init__(self, mdp: DiscreteMdp, seed=0, start=None):
        self.mdp = mdp
        self.rng = np.random.default_rng(seed)
        self.start = start
        self.state = 0
        self._cum = np.cumsum(mdp.transition, axis=2)

    @property
    def n_states(self) -> int:
        return self.mdp.n_states

    @property
    def n_actions(self) -> int:
        return self.mdp.n_actions

    def reset(self) -> int:
        if self.start is None:
            self.state = int(self.rng.integers(self.mdp.n_states))
        else:
            self.state = int(self.start)
        return self.state

    def mask(self) -> np.ndarray:
        return self.mdp.valid[self.state]

    def step(self, x: int) -> tuple[int, float]:
        s = self.state
        if not self.mdp.valid[s, x]:
            raise ValueError(f"action {x} invalid in state {s}")
        cum = self._cum[s, x]
        nxt = int(min(np.searchsorted(cum, self.rng.random() * cum[-1], side="right"), len(cum) - 1))
        self.state = nxt
        return nxt, float(self.mdp.reward[s, x])


def sample_next(mdp: DiscreteMdp, rng: np.random.Generator, cum=None) -> np.ndarray:
    """One next state for every (s, x) pair, drawn independently."""
    cum = np.cumsum(mdp.transition, axis=2) if cum is None else cum
    u = rng.random(cum.shape[:2] + (1,)) * cum[:, :, -1:]
    idx = (cum <= u).sum(axis=2)
    return np.minimum(idx, mdp.n_states - 1)


def tabular_q(model, episodes: int, beta: float = 0.1, gamma: float | None = None, epsilon=0.1,
              rng: np.random.Generator | None = None, *, mode: str = "episodic", horizon: int = 100,
              schedule: str = "constant") -> ValueTable:
    """Sample-based Q-learning.

    ``mode="sync"`` needs a :class:`DiscreteMdp` and treats it as a generative
    model: each episode updates every valid (s, x) pair once from a fresh
    next-state draw. ``mode="episodic"`` runs ``episodes`` trajectories of
    ``horizon`` steps with epsilon-greedy exploration against ``model``,
    which is either a :class:`DiscreteMdp` or an object with ``reset()``,
    ``mask()``, ``step(x) -> (s', r)``, ``n_states`` and ``n_actions``.

    ``schedule="constant"`` uses ``beta`` throughout; ``"rescaled_linear"``
    uses ``beta / (1 + (1 - gamma) * n)`` with ``n`` the pair's prior updates.
    ``epsilon`` is a number or a callable of the global step.
    """
    if not 0.0 < beta <= 1.0:
        raise ValueError("beta must lie in (0, 1]")
    rng = rng if rng is not None else np.random.default_rng(0)
    if mode == "sync":
        if not isinstance(model, DiscreteMdp):
            raise TypeError("sync mode needs a DiscreteMdp")
        mdp = model
        gamma = mdp.discount if gamma is None else gamma
        # invalid pairs are parked at a large negative value during updates
        low = float(np.min(mdp.reward)) / (1.0 - gamma) * 10.0 - 1.0
        q = np.where(mdp.valid, 0.0, low)
        cum = np.cumsum(mdp.transition, axis=2)
        for k in range(episodes):
            nxt = sample_next(mdp, rng, cum)
            target = mdp.reward + gamma * q.max(axis=1)[nxt]
            step = beta if schedule == "constant" else beta / (1.0 + (1.0 - gamma) * k)
            q += step * (target - q)
            q[~mdp.valid] = low
        q = np.where(mdp.valid, q, -np.inf)
        return ValueTable(q.max(axis=1), q, greedy(q))
    if mode != "episodic":
        raise ValueError(f"unknown mode {mode!r}")

    env = MdpEnv(model, seed=rng) if isinstance(model, DiscreteMdp) else model
    n_s = model.n_states
    n_x = model.n_actions
    if gamma is None:
        gamma = model.discount
    q = np.zeros((n_s, n_x))
    counts = np.zeros((n_s, n_x))
    eps_fn = epsilon if callable(epsilon) else (lambda t: epsilon)
    t = 0
    for _ in range(episodes):
        s = env.reset()
        mask = env.mask()
        for _ in range(horizon):
            allowed = np.flatnonzero(mask)
            if rng.random() < eps_fn(t):
                x = int(rng.choice(allowed))
            else:
                x = int(allowed[np.argmax(q[s, allowed])])
            s_next, r = env.step(x)
            next_mask = env.mask()
            step = beta if schedule == "constant" else beta / (1.0 + (1.0 - gamma) * counts[s, x])
            boot = q[s_next, next_mask].max()
            q[s, x] += step * (r + gamma * boot - q[s, x])
            counts[s, x] += 1
            s, mask = s_next, next_mask
            t += 1
    valid = model.valid if isinstance(model, DiscreteMdp) else counts > 0
    q = np.where(valid, q, -np.inf)
    return ValueTable(q.max(axis=1), q, greedy(q))


def toy_config(**overrides) -> EnvConfig:
    """Small integer-energy configuration used for oracle comparisons.

    Battery 0..3 in unit bins, sensing and location both cost 1, Poisson(1)
    harvest, AoI capped at 5, SU at 50 m, where the underlay grant is
    positive at the default PU power.
    """
    from .env import EnergyCosts, Harvester

    base = dict(b_max=3.0, a_max=5, xi=0.0, costs=EnergyCosts(alpha=1.0, delta=1.0),
                harvest=Harvester("poisson", 1.0))
    base.update(overrides)
    return EnvConfig(**base)


def underlay_feasible(cfg: EnvConfig) -> bool:
    return cfg.geometry.distance > protection_radius(cfg.geometry, cfg.sensing)


def state_features(mdp: DiscreteMdp) -> np.ndarray:
    """Network inputs for the labelled states: (aoi/A, battery/top, pu)."""
    lab = np.array(mdp.labels, dtype=float)
    return np.column_stack([lab[:, 0] / lab[:, 0].max(), lab[:, 1] / lab[:, 1].max(), lab[:, 2]])


def train_dqn_on_mdp(mdp: DiscreteMdp, steps: int = 120_000, seed: int = 0, *, lr=(3e-3, 3e-5),
                     batch_size: int = 64, horizon: int = 20, double: bool = False, dueling: bool = False):
    """Fit a Q-network to a fully observed MDP from sampled transitions.

    Behaviour is uniform over valid actions from uniformly random starts
    (Q-learning is off-policy), the replay keeps every transition, and the
    Adam step decays geometrically from ``lr[0]`` to ``lr[1]`` so that the
    fit settles instead of hovering at the sampling noise of a fixed step.
    Returns ``(agent, greedy_actions)``.
    """
    from .agents import AgentConfig, EpsilonSchedule, QAgent, Transition

    feats = state_features(mdp)
    cfg = AgentConfig(gamma=mdp.discount, lr=lr[0], batch_size=batch_size, memory=steps, warmup=200,
                      epsilon=EpsilonSchedule(1.0, 1.0, 1.0))
    agent = QAgent(cfg, double=double, dueling=dueling, seed=seed, state_dim=feats.shape[1],
                   n_actions=mdp.n_actions)
    env = MdpEnv(mdp, seed=[seed, 1])
    ratio = lr[1] / lr[0]
    k = 0
    while k < steps:
        s = env.reset()
        mask = env.mask()
        for _ in range(min(horizon, steps - k)):
            agent.opt.lr = lr[0] * ratio ** (k / steps)
            x = agent.act(feats[s], mask)
            s_next, r = env.step(x)
            next_mask = env.mask()
            agent.observe(Transition(feats[s], x, r, feats[s_next], False, next_mask))
            s, mask = s_next, next_mask
            k += 1
    actions = np.array([agent.act(feats[s], mdp.valid[s], greedy=True) for s in range(mdp.n_states)])
    return agent, actions
