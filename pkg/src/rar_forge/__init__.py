"""Retrieval-augmented reasoning rollouts for personalized QA, trained with baseline-relative GRPO."""

from .dataset import SyntheticWorldConfig, TrainingInstance, generate_synthetic, load_dataset, save_dataset, split
from .optimizer import GrpoConfig, advantages, group_stats, grpo_loss, kl_step, lr_at, surrogate_step
from .protocol import ProtocolConfig, parse, render_prompt, render_segments
from .retrieval import HashedBowEmbedder, RetrievalConfig, build_index, format_information, search
from .reward import SyntheticJudge, normalize, reward_trajectory, score_synthetic
from .trainer import Environment, evaluate, train

__version__ = "0.1.0"
