"""Reference training recipe for the grid-caption task.

Stage 1 trains only the projector; stage 2 trains everything; the optional
FIM stage continues from stage 2 on a 20% subset with ``[S]...[FIM]`` runs
inserted into the answers.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import torch

from .model import DiffusionVLM, ModelConfig
from .tasks import ToyTask, default_vocab
from .trainer import TrainConfig, Trainer, fim_subset
from .vocab import Vocab

REFERENCE_TASK = ToyTask("grid-caption", seed=0, n_train=4000, n_val=200, L=32, max_objects=2)
REFERENCE_MODEL = dict(n_layers=3, n_heads=4, d_model=64, d_ff=256, max_context=320)
REFERENCE_STAGE1 = TrainConfig(stage="1", steps=100, lr=1e-3)
REFERENCE_STAGE2 = TrainConfig(stage="2", steps=4000, lr=1e-3, warmup=50)
REFERENCE_FIM = TrainConfig(stage="fim", steps=3000, lr=1e-3, warmup=20)


@dataclass
class RecipeResult:
    model: DiffusionVLM
    vocab: Vocab
    seconds: dict = field(default_factory=dict)
    final_loss: dict = field(default_factory=dict)


def build_model(vocab: Vocab, seed: int = 0, **overrides) -> DiffusionVLM:
    torch.manual_seed(seed)
    return DiffusionVLM(ModelConfig(vocab_size=vocab.size, **{**REFERENCE_MODEL, **overrides}))


def _run(result: RecipeResult, name: str, cfg: TrainConfig, examples) -> None:
    t0 = time.perf_counter()
    rows = Trainer(result.model, result.vocab, cfg).fit(examples)
    result.seconds[name] = time.perf_counter() - t0
    result.final_loss[name] = sum(r["loss"] for r in rows[-50:]) / len(rows[-50:])


def train_reference(seed: int = 0, task: ToyTask = REFERENCE_TASK, vocab: Optional[Vocab] = None) -> RecipeResult:
    """Stage 1 then stage 2 on the task's training split."""
    vocab = vocab or default_vocab()
    train, _ = task.build(vocab)
    result = RecipeResult(build_model(vocab, seed), vocab)
    _run(result, "stage1", TrainConfig(**{**vars(REFERENCE_STAGE1), "seed": seed}), train)
    _run(result, "stage2", TrainConfig(**{**vars(REFERENCE_STAGE2), "seed": seed}), train)
    return result


def train_fim(result: RecipeResult, seed: int = 0, task: ToyTask = REFERENCE_TASK) -> RecipeResult:
    """Continue a trained model on a FIM-transformed 20% subset (in place)."""
    train, _ = task.build(result.vocab)
    cfg = TrainConfig(**{**vars(REFERENCE_FIM), "seed": seed})
    _run(result, "fim", cfg, fim_subset(train, cfg.fim_fraction, seed))
    return result
