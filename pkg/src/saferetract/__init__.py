"""Safety verification of reinforcement-learning policies for a tissue retraction task.

Interval bound propagation and branch-and-bound verification of ReLU policy
networks, plus the environment and a from-scratch PPO trainer that produce them.
"""
__version__ = "0.1.0"

from .environment import EnvConfig, TissueRetractionEnv, VectorEnv
from .interval import Box, Interval, propagate
from .network import Network, argmax_action, forward
from .property import PropertySuite, SafetyProperty, default_suite, load_suite
from .trainer import PPOAgent, TrainConfig, train
from .verifier import IntervalVerifier, VerificationReport, grid_oracle, verify

__all__ = [
    "Box", "EnvConfig", "Interval", "IntervalVerifier", "Network", "PPOAgent", "PropertySuite",
    "SafetyProperty", "TissueRetractionEnv", "TrainConfig", "VectorEnv", "VerificationReport",
    "argmax_action", "default_suite", "forward", "grid_oracle", "load_suite", "propagate", "train", "verify",
]
