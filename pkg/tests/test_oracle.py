import math
from dataclasses import replace

import numpy as np
import pytest

from aoisharing.env import (Action, Battery, EnergyCosts, Observation, action_cost, allocate_power,
                            check_causality, resolve, sense_from_uniform, update_aoi, update_battery)
from aoisharing.oracle import (DiscreteMdp, MdpEnv, bellman_residual, build_mdp, harvest_pmf, policy_agreement,
                               state_index, tabular_q, toy_config, underlay_feasible, update_cost_bins,
                               value_iteration)


def brute_force_transitions(cfg, n_aoi):
    """Enumerate every (harvest, cost bin, reading, PU move) combination through
    the environment's own primitives on an integer energy grid."""
    assert cfg.b_max == int(cfg.b_max)
    top = int(cfg.b_max)
    n_bat = top + 1
    sigma = cfg.rayleigh_scale
    cdf = lambda h: 1.0 - math.exp(-h * h / (2 * sigma * sigma))  # noqa: E731
    # cost bin k holds update costs in [k - 0.5, k + 0.5); the top bin also
    # takes every clamped cost
    cost_bins = [(1e20 if k == 0 else 1.0 / k,
                  (1 - cdf(2.0)) if k == 0 else
                  (cdf(1 / (k - 0.5)) if k == top else cdf(1 / (k - 0.5)) - cdf(1 / (k + 0.5))))
                 for k in range(top + 1)]
    lam = cfg.harvest.mean
    e_pmf = [math.exp(-lam) * lam ** e / math.factorial(e) for e in range(top)]
    e_pmf.append(1.0 - sum(e_pmf))

    geom, sens = cfg.geometry, cfg.sensing
    mean = geom.mean_rx_dbm(geom.p_pu_dbm, geom.distance)
    q_above = 0.5 * math.erfc((sens.n_th_dbm - mean) / math.sqrt(2 * geom.shadow_var_db))
    readings = {}
    for pu in (0, 1):
        levels = [(1.0, -math.inf)] if not pu else [(q_above, sens.n_th_dbm + 1), (1 - q_above, sens.n_th_dbm - 1)]
        out = []
        for p_lvl, p_r in levels:
            # split the unit interval at p_f and p_d so each reading gets its mass
            cuts = sorted({0.0, sens.p_f, sens.p_d, 1.0})
            for lo, hi in zip(cuts, cuts[1:]):
                out.append((p_lvl * (hi - lo), sense_from_uniform(bool(pu), p_r, sens, (lo + hi) / 2), p_r))
        readings[pu] = out

    grant = allocate_power(geom, sens)
    chain = cfg.pu.matrix()
    n_s = n_aoi * n_bat * 2
    P = np.zeros((n_s, 5, n_s))
    for aoi in range(1, n_aoi + 1):
        for b in range(n_bat):
            for pu in (0, 1):
                s = state_index(aoi, b, pu, n_bat)
                for x in Action:
                    if action_cost(x, 1e9, cfg.costs, cfg.b_max) > b + 1e-9:
                        continue
                    branches = []
                    if x is Action.NO_SENSE:
                        branches = [(1.0, Action.NO_SENSE, False, 1e9)]
                    else:
                        for p_o, obs, p_r in readings[pu]:
                            realised, _, ack, _ = resolve(x, obs, bool(pu), p_r, grant, sens)
                            for h, p_h in cost_bins:
                                branches.append((p_o * p_h, realised, ack, h))
                    for p_br, realised, ack, h in branches:
                        battery = Battery(float(b), cfg.b_max)
                        if realised in (Action.OVERLAY, Action.UNDERLAY) and not check_causality(
                                battery, realised, h, cfg.costs):
                            realised = Action.SILENT if realised is Action.OVERLAY else Action.UNDERLAY_DENIED
                            ack = False
                        nxt_aoi = update_aoi(aoi, realised, ack, n_aoi)
                        for e, p_e in enumerate(e_pmf):
                            level = update_battery(battery, float(e), realised, h, cfg.costs).level
                            for pu_next in (0, 1):
                                t = state_index(nxt_aoi, round(level), pu_next, n_bat)
                                P[s, x, t] += p_br * p_e * chain[pu, pu_next]
    return P


# -- construction ------------------------------------------------------------


def test_toy_has_feasible_underlay():
    assert underlay_feasible(toy_config())


def test_rows_are_stochastic():
    mdp = build_mdp(toy_config(), (5, 4))
    assert mdp.n_states == 40 and mdp.n_actions == 5
    assert mdp.row_error() < 1e-9
    assert np.all(mdp.transition >= 0)


@pytest.mark.parametrize("overrides", [{}, {"harvest": toy_config().harvest.__class__("poisson", 2.0)}])
def test_matches_brute_force_enumeration(overrides):
    cfg = toy_config(**overrides)
    mdp = build_mdp(cfg, (4, 4))
    ref = brute_force_transitions(cfg, 4)
    assert np.max(np.abs(mdp.transition - ref)) < 1e-12
    assert np.allclose(mdp.reward[mdp.valid], -np.array([lab[0] for lab in mdp.labels])[np.nonzero(mdp.valid)[0]])


def test_overlay_with_certain_ack_refreshes_aoi():
    # no false alarms, PU idle, and a channel so strong the update is free
    cfg = toy_config(sensing=replace(toy_config().sensing, p_f=0.0), rayleigh_scale=1e9)
    mdp = build_mdp(cfg, (5, 4))
    s = state_index(3, 3, 0, 4)
    fresh = [i for i, lab in enumerate(mdp.labels) if lab[0] == 1]
    assert mdp.transition[s, Action.OVERLAY, fresh].sum() == pytest.approx(1.0, abs=1e-12)


def test_no_sense_ages_and_only_harvests():
    mdp = build_mdp(toy_config(), (5, 4))
    s = state_index(2, 0, 1, 4)
    row = mdp.transition[s, Action.NO_SENSE]
    assert all(mdp.labels[t][0] == 3 for t in np.flatnonzero(row))
    assert not mdp.valid[s, Action.SILENT]


def test_invalid_bins_rejected():
    with pytest.raises(ValueError, match="at least 2"):
        build_mdp(toy_config(), (1, 4))


def test_too_coarse_discretisation_rejected():
    cfg = toy_config(costs=EnergyCosts(alpha=3.0, delta=1.0))
    with pytest.raises(ValueError, match="discretization too coarse"):
        build_mdp(cfg, (3, 4))


def test_harvest_and_cost_pmfs_sum_to_one():
    cfg = toy_config()
    assert harvest_pmf(cfg, 1.0, 3).sum() == pytest.approx(1.0, abs=1e-12)
    pmf, edges = update_cost_bins(cfg, 1.0, 3)
    assert pmf.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(np.diff(edges) <= 0)
    normal = toy_config(harvest=cfg.harvest.__class__("normal", 2.0, 0.5))
    assert harvest_pmf(normal, 1.0, 3).sum() == pytest.approx(1.0, abs=1e-12)


def test_default_env_builds():
    from aoisharing.env import EnvConfig
    mdp = build_mdp(EnvConfig(), (6, 11))
    assert mdp.row_error() < 1e-9


# -- value iteration -----------------------------------------------------------


def single_state(r, gamma):
    return DiscreteMdp(np.ones((1, 1, 1)), np.array([[r]]), gamma)


def test_single_state_value():
    vt = value_iteration(single_state(2.0, 0.9), tol=1e-12)
    assert vt.v[0] == pytest.approx(20.0, abs=1e-9)


def test_zero_discount_picks_best_reward():
    P = np.full((2, 3, 2), 0.5)
    R = np.array([[1.0, 5.0, -2.0], [0.0, -1.0, 3.0]])
    vt = value_iteration(DiscreteMdp(P, R, 0.0))
    assert np.array_equal(vt.v, [5.0, 3.0]) and list(vt.policy) == [1, 2]


def test_non_stochastic_rows_rejected():
    P = np.full((2, 1, 2), 0.4)
    with pytest.raises(ValueError, match="not stochastic"):
        value_iteration(DiscreteMdp(P, np.zeros((2, 1)), 0.9))


def test_residual_below_tolerance_and_contraction():
    mdp = build_mdp(toy_config(), (5, 4))
    vt = value_iteration(mdp, tol=1e-10)
    assert bellman_residual(mdp, vt.v) < 1e-10
    r = np.array(vt.residuals)
    assert np.all(r[1:] <= mdp.discount * r[:-1] + 1e-12)


def test_affine_reward_keeps_policy():
    mdp = build_mdp(toy_config(xi=1.0), (5, 4))
    base = value_iteration(mdp)
    shifted = value_iteration(mdp.with_reward(2.5 * mdp.reward - 7.0))
    assert np.all(policy_agreement(shifted.q, base.policy, tol=1e-7))
    assert np.allclose(shifted.v, 2.5 * base.v - 7.0 / (1 - mdp.discount), atol=1e-6)


def monte_carlo_values(mdp, policy, rollouts, length, rng):
    """Discounted returns of ``policy`` from every start state, ``rollouts`` in total."""
    n = mdp.n_states
    cum = np.cumsum(mdp.transition[np.arange(n), policy], axis=1)
    r = mdp.reward[np.arange(n), policy]
    start = np.arange(rollouts) % n
    s = start.copy()
    total = np.zeros(rollouts)
    disc = 1.0
    for _ in range(length):
        total += disc * r[s]
        disc *= mdp.discount
        u = rng.random(rollouts)
        nxt = np.empty_like(s)
        for k in range(n):
            sel = s == k
            nxt[sel] = np.searchsorted(cum[k], u[sel] * cum[k, -1], side="right")
        s = np.minimum(nxt, n - 1)
    return np.bincount(start, weights=total, minlength=n) / np.bincount(start, minlength=n)


def test_value_iteration_matches_monte_carlo():
    # 3 AoI levels x 3 battery levels, rewards with the rate term switched on
    mdp = build_mdp(toy_config(b_max=2.0, xi=0.1), (3, 3))
    vt = value_iteration(mdp, tol=1e-12)
    # 0.95**200 leaves a truncated tail far below the 2% budget
    mc = monte_carlo_values(mdp, vt.policy, 1_000_000, 200, np.random.default_rng(0))
    rel = np.abs(mc - vt.v) / np.abs(vt.v)
    assert rel.max() < 0.02


# -- tabular Q ---------------------------------------------------------------------


def two_state_chain(gamma=0.9):
    # action 0 stays, action 1 switches; deterministic
    P = np.zeros((2, 2, 2))
    P[0, 0, 0] = P[0, 1, 1] = P[1, 0, 1] = P[1, 1, 0] = 1.0
    R = np.array([[0.0, 1.0], [2.0, 0.0]])
    return DiscreteMdp(P, R, gamma)


def test_tabular_q_deterministic_chain():
    mdp = two_state_chain()
    vt = value_iteration(mdp, tol=1e-12)
    qt = tabular_q(mdp, 1000, beta=0.1, epsilon=0.3, horizon=100, rng=np.random.default_rng(0))
    assert np.max(np.abs(qt.q - vt.q)) < 1e-2


def test_tabular_q_full_step_overwrites():
    mdp = two_state_chain()
    env = MdpEnv(mdp, start=0)
    qt = tabular_q(env, 1, beta=1.0, gamma=0.9, epsilon=0.0, horizon=1)
    assert qt.q[0, 0] == 0.0 and qt.q[1].max() == -np.inf


def test_tabular_q_greedy_agreement_on_toy():
    mdp = build_mdp(toy_config(b_max=2.0), (3, 3), discount=0.5)
    vt = value_iteration(mdp, tol=1e-12)
    qt = tabular_q(mdp, 20_000, beta=1.0, mode="sync", schedule="rescaled_linear", rng=np.random.default_rng(1))
    assert policy_agreement(vt.q, qt.policy, tol=1e-2).mean() >= 0.95
    assert np.max(np.abs(qt.q[mdp.valid] - vt.q[mdp.valid])) < 5e-2


def test_tabular_q_rejects_bad_step():
    with pytest.raises(ValueError):
        tabular_q(two_state_chain(), 1, beta=0.0)
    with pytest.raises(ValueError):
        tabular_q(two_state_chain(), 1, beta=1.5)


def test_policy_agreement_counts_ties():
    q = np.array([[1.0, 1.0, -np.inf], [0.0, 2.0, 1.995]])
    assert list(policy_agreement(q, [1, 2])) == [True, False]
    assert list(policy_agreement(q, [1, 2], tol=1e-2)) == [True, True]


def test_mdp_env_rejects_invalid_action():
    mdp = build_mdp(toy_config(), (3, 4))
    env = MdpEnv(mdp, start=state_index(1, 0, 0, 4))
    env.reset()
    with pytest.raises(ValueError):
        env.step(int(Action.OVERLAY))
    assert env.mask()[0]


def test_observation_mass_sums_to_one():
    from aoisharing.oracle import observation_outcomes
    for limited in (False, True):
        cfg = toy_config(sensing=replace(toy_config().sensing, noise_limited=limited))
        for pu in (False, True):
            outs = observation_outcomes(cfg, pu)
            assert sum(p for p, _, _ in outs) == pytest.approx(1.0, abs=1e-12)
            assert all(isinstance(o, Observation) for _, o, _ in outs)
