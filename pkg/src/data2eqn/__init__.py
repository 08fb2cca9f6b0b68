"""Data-to-equation symbolic regression with reinforcement finetuning."""

from .expr import DEFAULT_VOCAB, Vocabulary, evaluate, evaluate_tokens, parse, tokenize
from .model import Policy, load, save
from .nn import ModelConfig
from .reel import FinetuneConfig, run_reel

__version__ = "0.1.0"

__all__ = ["DEFAULT_VOCAB", "FinetuneConfig", "ModelConfig", "Policy", "Vocabulary",
           "evaluate", "evaluate_tokens", "load", "parse", "run_reel", "save", "tokenize"]
