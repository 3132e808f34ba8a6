"""Energy-based latent reasoning: encoder, trajectory energy, inference-time planner."""

from .config import ExperimentConfig, load_config

__all__ = ["ExperimentConfig", "load_config"]
__version__ = "0.1.0"
