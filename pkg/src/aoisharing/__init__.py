"""Age-of-information driven spectrum sharing for an energy-harvesting secondary user.

Modules: :mod:`~aoisharing.env` (simulator), :mod:`~aoisharing.nn` (dense
networks and Adam), :mod:`~aoisharing.agents` (DQN, D3QN, baseline),
:mod:`~aoisharing.oracle` (exact MDP reference) and :mod:`~aoisharing.harness`
(sweeps and figure data).
"""
from .agents import AgentConfig, EpsilonSchedule, QAgent, ReplayBuffer, Transition, make_agent, run_episode, train_agent
from .env import Action, EnvConfig, EnvState, Observation, SpectrumEnv, env_step
from .nn import Adam, DenseNet

__version__ = "0.1.0"

__all__ = [
    "Action", "Adam", "AgentConfig", "DenseNet", "EnvConfig", "EnvState", "EpsilonSchedule", "Observation",
    "QAgent", "ReplayBuffer", "SpectrumEnv", "Transition", "env_step", "make_agent", "run_episode", "train_agent",
]
