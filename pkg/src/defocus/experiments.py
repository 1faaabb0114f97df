"""The desk-scale ablation: plain causal vs fixed decay vs learnable bandpass models."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diagnostics import attention_gini, attention_map_approx
from .network import DefocusBlockConfig, DropPathSchedule, ModelConfig
from .training import TrainConfig, evaluate, make_synthetic_dataset, train

__all__ = ["ABLATIONS", "ablation_config", "load_ablation_data", "run_ablation", "AblationRun"]

# name -> (block flags, aux loss weight, drop-path end rate)
ABLATIONS = {
    "plain": (dict(use_decay=False, use_rope=False), 0.0, 0.1),
    "none": (dict(use_decay=False, use_rope=False), 1.0, 0.7),
    "fixed": (dict(use_decay=True, learn_decay=False, use_rope=False), 1.0, 0.7),
    "defocus": (dict(), 1.0, 0.7),
}


def ablation_config(name: str, steps: int = 2000, seed: int = 0, variant: str = "vit",
                    depth: int = 2) -> tuple[ModelConfig, TrainConfig]:
    """Model and training configs for one ablation arm.

    ``plain`` is the bare causal model (no decay, no rotation, no auxiliary
    loss, constant drop path 0.1); the other arms share the auxiliary loss and
    the linear 0.1 -> 0.7 drop-path schedule.  Parameter counts are equal
    across arms since disabled filters stay in the model as frozen tensors.
    """
    if name not in ABLATIONS:
        raise KeyError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
    flags, aux, end = ABLATIONS[name]
    block = DefocusBlockConfig(variant=variant, **flags)
    model = ModelConfig(image_size=16, patch_size=4, depth=depth, block=block, aux_loss_weight=aux)
    return model, TrainConfig(total_steps=steps, seed=seed, drop_path=DropPathSchedule(0.1, end, steps))


def load_ablation_data(n_train: int = 2000, n_test: int = 500):
    xtr, ytr = make_synthetic_dataset(n_train, seed=100)
    xte, yte = make_synthetic_dataset(n_test, seed=200)
    return (xtr / 255.0, ytr), (xte / 255.0, yte)


@dataclass
class AblationRun:
    name: str
    seed: int
    test_accuracy: float
    train_accuracy: float
    gini: float
    model: object


def run_ablation(name: str, seed: int, data=None, steps: int = 2000, gini_images: int = 32) -> AblationRun:
    """Train one arm and score it: test accuracy and last-layer attention Gini."""
    (xtr, ytr), (xte, yte) = data or load_ablation_data()
    mc, tc = ablation_config(name, steps, seed)
    model = train(mc, tc, data=(xtr, ytr)).model
    last = mc.depth - 1
    g = [attention_gini(attention_map_approx(model, xte[i], last)) for i in range(gini_images)]
    return AblationRun(name, seed, evaluate(model, xte, yte), evaluate(model, xtr, ytr), float(np.mean(g)), model)
