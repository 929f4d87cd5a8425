"""Reinforcement-learning spectrum scheduling."""
from .agents import (DQN_VARIANTS, DqnAgent, DqnConfig, EpisodeStep, Experience, QNetwork, QTable,
                     ReplayBuffer, allocate_multi, dqn_targets, dqn_train_step, encode_state, episode_means,
                     epsilon_schedule, select_action, soft_update, tabular_q_update, toy_mdp, train_dqn,
                     train_tabular, value_iteration, write_episode_log)
from .env import (IDLE, MdpEnv, NoisyObserver, SensingObserver, StepInfo, TruthObserver, admissible_mask,
                  default_snr_table_db, feasible_allocations, oracle_allocation, snr_table_from_channel,
                  state_index)

__all__ = [n for n in dir() if not n.startswith("_")]
