"""Rebuild a De-Pois style poisoning defence and break it with composite
FGSM (white-box) and distilled shadow models (black-box)."""

__version__ = "0.1.0"

from .attacks import AttackConfig, AttackMode, attack_dataset, compose_attack, fgsm_classifier, fgsm_critic
from .data import ImageDataset, SplitSpec, load_idx, split_trusted, synth_digits, write_idx
from .defense import (
    REJECTED,
    CriticScorer,
    DefenseBundle,
    Verdict,
    WganConfig,
    augment_synthetic,
    calibrate_boundary,
    depois_predict,
    gradient_penalty_fd,
    train_classifier,
    train_wgan_critic,
)
from .distill import DistillConfig, TeacherOracle, build_shadow_bundle, distill_classifier, distill_critic
from .metrics import SweepRecord, critic_accuracy, depois_accuracy, run_sweep
from .nn import Network, backward, forward, kl_divergence, optimizer_step, softmax_temperature
