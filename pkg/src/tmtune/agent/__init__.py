"""Masked encoder-decoder actor, dropout critics, replay and the training loop."""
from .bowl import QuadraticBowlEnv, default_bowl_target
from .config import AgentConfig
from .droq import DroQAgent
from .networks import ACTION_SHAPE, Actor, Encoder, QNetwork, squashed_gaussian
from .replay import BufferUnderflow, EpisodeRecord, ReplayBuffer, encode_observation
from .train import (LOG_COLUMNS, TrainResult, read_log, select_best, stabilization_episode,
                    train)
