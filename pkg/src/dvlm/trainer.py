"""Training loop for the diffusion VLM.

Each example is corrupted twice with complementary masks so every answer
token lands in exactly one member's loss. The image is encoded once and the
embeddings are copied to both members.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch

from .diffusion import (
    EPS,
    ComplementaryPair,
    LossValue,
    NoisedAnswer,
    complementary_pair,
    dlm_loss,
    forward_mask,
)
from .errors import InvalidInputError, NonFiniteLossError
from .model import DiffusionVLM, PlanKind, build_plan
from .tasks import TrainExample
from .vocab import Vocab

log = logging.getLogger(__name__)

Seed = Union[int, np.random.Generator]

METRIC_COLUMNS = ("step", "loss", "lr", "tokens_in_loss")


@dataclass
class TrainConfig:
    stage: str = "2"  # "1": projector only, "2" and "fim": everything
    steps: int = 1000
    batch_size: int = 16
    lr: float = 3e-4
    min_lr_ratio: float = 0.1
    warmup: int = 0
    weight_decay: float = 0.01
    grad_accum: int = 1
    grad_clip: float = 1.0
    masking: str = "complementary"  # or "independent"
    complement_weight: str = "own"  # or "shared"
    weight_mode: str = "inverse-t"
    include_padding: bool = True
    fim_fraction: float = 0.2
    fim_max_run: int = 8
    seed: int = 0

    def __post_init__(self):
        self.stage = str(self.stage)
        if self.stage not in ("1", "2", "fim"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.masking not in ("complementary", "independent"):
            raise ValueError(f"unknown masking {self.masking!r}")
        if self.complement_weight not in ("own", "shared"):
            raise ValueError(f"unknown complement_weight {self.complement_weight!r}")


def _rng(seed: Seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_timestep(seed: Seed, eps: float = EPS) -> float:
    """t ~ Uniform[eps, 1]."""
    return float(eps + (1.0 - eps) * _rng(seed).random())


def insert_fim(x0: Sequence[int], vocab: Vocab, pos: int, n: int, L: Optional[int] = None) -> list[int]:
    """Insert ``n`` [S] tokens and one [FIM] before content position ``pos``."""
    content = _content(x0, vocab)
    out = content[:pos] + [vocab.fill_id] * n + [vocab.fim_id] + content[pos:]
    return vocab.pad_answer(out, len(x0) if L is None else L)


def _content(x0: Sequence[int], vocab: Vocab) -> list[int]:
    out = []
    for tok in x0:
        tok = int(tok)
        if tok in (vocab.eos_id, vocab.pad_id):
            break
        if tok in vocab.special_ids:
            raise InvalidInputError(f"unexpected special token {vocab.token(tok)} in FIM source")
        out.append(tok)
    return out


def make_fim_example(x0: Sequence[int], vocab: Vocab, seed: Seed, max_run: int = 8, L: Optional[int] = None) -> list[int]:
    """Insert a random-length ``[S]...[S][FIM]`` run at a random interior
    position, then re-pad to the original length (or ``L``)."""
    content = _content(x0, vocab)
    if len(content) < 2:
        return list(x0)
    rng = _rng(seed)
    pos = int(rng.integers(1, len(content)))
    n = int(rng.integers(0, max_run + 1))
    return insert_fim(x0, vocab, pos, n, L)


def pick_round(conversation: Sequence[tuple[Sequence[int], Sequence[int]]], seed: Seed) -> tuple[list[int], list[int]]:
    """Pick one round as the answer; earlier rounds plus its prompt become the prompt."""
    if not conversation:
        raise ValueError("empty conversation")
    r = int(_rng(seed).integers(len(conversation)))
    prompt: list[int] = []
    for p, a in conversation[:r]:
        prompt += list(p) + list(a)
    prompt += list(conversation[r][0])
    return prompt, list(conversation[r][1])


def fim_subset(examples: Sequence, fraction: float, seed: int) -> list:
    n = math.floor(fraction * len(examples))
    idx = np.random.default_rng(seed).choice(len(examples), size=n, replace=False)
    return [examples[i] for i in sorted(idx)]


@dataclass
class TrainBatch:
    examples: list[TrainExample]
    x0: torch.Tensor  # (B, L)
    prompt: torch.Tensor  # (B, P), left padded
    members: list[list[NoisedAnswer]]  # per example: [a, b] or [a]
    vision: Optional[torch.Tensor]  # (B, n_img, d), encoded once
    ids: list[int] = field(default_factory=list)

    @property
    def pairs(self) -> list[ComplementaryPair]:
        return [ComplementaryPair(*m) for m in self.members if len(m) == 2]


def _stack_prompts(prompts: Sequence[Sequence[int]], pad_id: int) -> torch.Tensor:
    P = max(len(p) for p in prompts)
    return torch.tensor([[pad_id] * (P - len(p)) + list(p) for p in prompts], dtype=torch.long)


def make_batch(
    model: DiffusionVLM,
    vocab: Vocab,
    examples: Sequence[TrainExample],
    cfg: TrainConfig,
    rng: np.random.Generator,
    ids: Optional[list[int]] = None,
) -> TrainBatch:
    answers = []
    for ex in examples:
        a = list(ex.answer)
        if cfg.stage == "fim":
            a = make_fim_example(a, vocab, rng, cfg.fim_max_run)
        answers.append(a)
    x0 = torch.tensor(answers, dtype=torch.long)
    members = []
    for row in x0:
        t = sample_timestep(rng)
        seed = int(rng.integers(2**31 - 1))
        if cfg.masking == "complementary":
            p = complementary_pair(row, t, mask_id=vocab.mask_id, seed=seed)
            members.append([p.a, p.b])
        else:
            members.append([forward_mask(row, t, mask_id=vocab.mask_id, seed=seed)])
    vision = None
    if examples[0].img is not None:
        vision = model.encode_image(np.stack([ex.img for ex in examples]))
    prompt = _stack_prompts([ex.prompt for ex in examples], vocab.pad_id)
    return TrainBatch(list(examples), x0, prompt, members, vision, ids or list(range(len(examples))))


def batch_loss(model: DiffusionVLM, vocab: Vocab, batch: TrainBatch, cfg: TrainConfig) -> LossValue:
    """Mean over examples of the summed member losses (Full attention plan)."""
    rows, x0s, prompts, owners = [], [], [], []
    for i, ms in enumerate(batch.members):
        for m in ms:
            if cfg.complement_weight == "shared" and m is not ms[0]:
                m = NoisedAnswer(m.tokens, m.masked, ms[0].t)
            rows.append(m)
            owners.append(i)
    owner = torch.tensor(owners)
    xt = torch.stack([m.tokens for m in rows])
    # copy, not re-encode: both members share the same vision embeddings
    vision = None if batch.vision is None else batch.vision[owner]
    prompt = batch.prompt[owner]
    plan = build_plan(PlanKind.FULL, 0 if vision is None else vision.shape[1], prompt.shape[1], xt.shape[1])
    logp = model(xt, plan, vision=vision, prompt=prompt).log_softmax(-1)
    total = logp.new_zeros(())
    count = 0
    for j, m in enumerate(rows):
        lv = dlm_loss(logp[j], batch.x0[owners[j]], m, weight_mode=cfg.weight_mode,
                      include_padding=cfg.include_padding, pad_id=vocab.pad_id)
        total = total + lv.value
        count += lv.token_count
    return LossValue(total / len(batch.members), count)


def set_stage(model: DiffusionVLM, stage: str) -> list[torch.nn.Parameter]:
    """Freeze everything but the projector for stage 1; return trainable params."""
    proj = {id(p) for p in model.projector_parameters()}
    params = []
    for p in model.parameters():
        p.requires_grad_(stage != "1" or id(p) in proj)
        if p.requires_grad:
            params.append(p)
    return params


def train_step(
    model: DiffusionVLM,
    vocab: Vocab,
    batch: TrainBatch,
    optimizer: torch.optim.Optimizer,
    cfg: TrainConfig,
    step: int = 0,
    scheduler=None,
) -> LossValue:
    optimizer.zero_grad(set_to_none=True)
    lv = batch_loss(model, vocab, batch, cfg)
    _check_finite(lv, step, batch)
    lv.value.backward()
    _apply(model, optimizer, cfg, scheduler)
    return lv


def _check_finite(lv: LossValue, step: int, batch: TrainBatch) -> None:
    if not math.isfinite(float(lv)):
        raise NonFiniteLossError(f"non-finite loss {float(lv)} at step {step}, examples {batch.ids}")


def _apply(model, optimizer, cfg, scheduler) -> None:
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_([p for p in model.parameters() if p.grad is not None], cfg.grad_clip)
    optimizer.step()
    if scheduler is not None:
        scheduler.step()


def cosine_lambda(cfg: TrainConfig):
    def f(step: int) -> float:
        if cfg.warmup and step < cfg.warmup:
            return (step + 1) / cfg.warmup
        prog = min(1.0, (step - cfg.warmup) / max(1, cfg.steps - cfg.warmup))
        return cfg.min_lr_ratio + (1 - cfg.min_lr_ratio) * 0.5 * (1 + math.cos(math.pi * prog))

    return f


class Trainer:
    def __init__(self, model: DiffusionVLM, vocab: Vocab, cfg: TrainConfig):
        self.model = model
        self.vocab = vocab
        self.cfg = cfg
        params = set_stage(model, cfg.stage)
        self.optimizer = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.scheduler = torch.optim.lr_scheduler.LambdaLR(self.optimizer, cosine_lambda(cfg))
        self.rng = np.random.default_rng(cfg.seed)
        self.step_idx = 0

    def step(self, examples: Sequence[TrainExample]) -> LossValue:
        cfg = self.cfg
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        total, count = 0.0, 0
        for _ in range(cfg.grad_accum):
            idx = self.rng.choice(len(examples), size=min(cfg.batch_size, len(examples)), replace=False)
            batch = make_batch(self.model, self.vocab, [examples[i] for i in idx], cfg, self.rng, idx.tolist())
            lv = batch_loss(self.model, self.vocab, batch, cfg)
            _check_finite(lv, self.step_idx, batch)
            if lv.value.requires_grad:
                (lv.value / cfg.grad_accum).backward()
            total += float(lv) / cfg.grad_accum
            count += lv.token_count
        _apply(self.model, self.optimizer, cfg, self.scheduler)
        self.step_idx += 1
        return LossValue(torch.tensor(total), count)

    def fit(self, examples: Sequence[TrainExample], metrics_path: Optional[Path] = None, log_every: int = 0) -> list[dict]:
        rows = []
        for _ in range(self.cfg.steps):
            lr = self.optimizer.param_groups[0]["lr"]
            lv = self.step(examples)
            row = {"step": self.step_idx, "loss": float(lv), "lr": lr, "tokens_in_loss": lv.token_count}
            rows.append(row)
            if log_every and self.step_idx % log_every == 0:
                log.info("step %d loss %.4f lr %.2e", self.step_idx, row["loss"], lr)
        if metrics_path is not None:
            write_metrics(metrics_path, rows)
        self.model.eval()
        return rows


def write_metrics(path: Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r["step"], f"{r['loss']:.6f}", f"{r['lr']:.6e}", r["tokens_in_loss"]])


@torch.no_grad()
def eval_loss(
    model: DiffusionVLM,
    vocab: Vocab,
    examples: Sequence[TrainExample],
    ts: Sequence[float] = (0.1, 0.3, 0.5, 0.7, 0.9),
    seed: int = 0,
) -> float:
    """Mean per-token masked NLL at fixed noise levels with fixed masks."""
    model.eval()
    nll, tokens = 0.0, 0
    for i in range(0, len(examples), 64):
        chunk = examples[i : i + 64]
        vision = None if chunk[0].img is None else model.encode_image(np.stack([e.img for e in chunk]))
        prompt = _stack_prompts([e.prompt for e in chunk], vocab.pad_id)
        x0 = torch.tensor([e.answer for e in chunk], dtype=torch.long)
        for k, t in enumerate(ts):
            xt = [forward_mask(r, t, mask_id=vocab.mask_id, seed=seed * 1000 + (i + j) * 10 + k) for j, r in enumerate(x0)]
            plan = build_plan(PlanKind.FULL, 0 if vision is None else vision.shape[1], prompt.shape[1], x0.shape[1])
            logp = model(torch.stack([m.tokens for m in xt]), plan, vision=vision, prompt=prompt).log_softmax(-1)
            for j, m in enumerate(xt):
                lv = dlm_loss(logp[j], x0[j], m, weight_mode="unit")
                nll += float(lv)
                tokens += lv.token_count
    return nll / max(tokens, 1)
