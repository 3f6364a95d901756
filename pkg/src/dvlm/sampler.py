"""Reverse-process generation and infilling."""
from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import torch

from .diffusion import NoisedAnswer, reveal
from .errors import ConfigError
from .model import DiffusionVLM, KVCache, PlanKind, build_plan
from .schedules import DiscreteSchedule, ScheduleSpec, discretize, steps_for_nfe
from .vocab import Vocab


@dataclass
class GenRequest:
    prompt: Sequence[int]
    L: int
    schedule: DiscreteSchedule
    vision: Optional[torch.Tensor] = None  # (1, n_img, d_model) projected embeddings
    remask: str = "confidence"
    temperature: float = 0.0
    use_cache: bool = True
    attention: str = "prefix"  # "full" is the uncacheable bidirectional baseline
    seed: int = 0
    trace: bool = False
    keep_logits: bool = False

    def __post_init__(self):
        if self.schedule.L != self.L:
            raise ConfigError(f"schedule built for L={self.schedule.L}, request has L={self.L}")
        if self.attention not in ("prefix", "full"):
            raise ConfigError(f"unknown attention {self.attention!r}")
        if self.use_cache and self.attention != "prefix":
            raise ConfigError("the KV cache requires the prefix attention plan")


@dataclass
class InfillRequest:
    draft: Sequence[int]
    prompt: Sequence[int] = ()
    spec: ScheduleSpec = field(default_factory=ScheduleSpec)
    nfe: float = 1.0
    vision: Optional[torch.Tensor] = None
    remask: str = "confidence"
    temperature: float = 0.0
    use_cache: bool = True
    attention: str = "prefix"
    seed: int = 0
    trace: bool = False
    keep_logits: bool = False


@dataclass
class GenResult:
    tokens: list[int]  # raw answer, length L
    text_ids: list[int]  # cleaned
    forward_passes: int
    trace: list[dict] = field(default_factory=list)
    logits: list[torch.Tensor] = field(default_factory=list)

    def text(self, vocab: Vocab) -> str:
        return vocab.decode(self.text_ids)


def clean(ids: Sequence[int], vocab: Vocab) -> list[int]:
    """Cut at the first [EOS]; drop [PAD], [S] fillers and [FIM] terminators."""
    out = []
    drop = {vocab.pad_id, vocab.fill_id, vocab.fim_id}
    for tok in ids:
        tok = int(tok)
        if tok == vocab.eos_id:
            break
        if tok not in drop:
            out.append(tok)
    return out


def _denoise(
    model: DiffusionVLM,
    vocab: Vocab,
    start: NoisedAnswer,
    trajectory: Sequence[int],
    *,
    prompt: Sequence[int],
    vision: Optional[torch.Tensor],
    remask: str,
    temperature: float,
    use_cache: bool,
    attention: str,
    seed: int,
    trace: bool,
    keep_logits: bool,
) -> GenResult:
    prompt_t = torch.as_tensor(list(prompt), dtype=torch.long).view(1, -1)
    n_img = 0 if vision is None else vision.shape[1]
    kind = PlanKind.PREFIX if attention == "prefix" else PlanKind.FULL
    plan = build_plan(kind, n_img, prompt_t.shape[1], start.length)
    cache: Optional[KVCache] = None
    x = start
    records, kept = [], []
    passes = 0
    with torch.no_grad():
        if use_cache:
            cache = model.prefill(vision, prompt_t)
        for step, n_remaining in enumerate(trajectory):
            if cache is not None:
                logits = model(x.tokens, plan, cache=cache)[0]
            else:
                logits = model(x.tokens, plan, vision=vision, prompt=prompt_t)[0]
            passes += 1
            if keep_logits:
                kept.append(logits.clone())
            probs = logits.double().softmax(-1)
            x, info = reveal(x, probs, n_remaining, mask_id=vocab.mask_id, policy=remask,
                             temperature=temperature, seed=seed * 1_000_003 + step)
            if trace:
                records.append({
                    "step": step,
                    "revealed": info.revealed,
                    "tokens": [vocab.token(int(x.tokens[p])) for p in info.revealed],
                    "confidence": [round(c, 6) for c in info.confidence],
                    "masked_remaining": n_remaining,
                })
    tokens = x.tokens.tolist()
    return GenResult(tokens, clean(tokens, vocab), passes, records, kept)


def generate(model: DiffusionVLM, vocab: Vocab, req: GenRequest) -> GenResult:
    """Decode ``req.L`` tokens from an all-mask answer along the discrete schedule."""
    L = req.L
    start = NoisedAnswer(torch.full((L,), vocab.mask_id, dtype=torch.long), torch.ones(L, dtype=torch.bool), 1.0)
    return _denoise(
        model, vocab, start, req.schedule.masked_trajectory()[1:],
        prompt=req.prompt, vision=req.vision, remask=req.remask, temperature=req.temperature,
        use_cache=req.use_cache, attention=req.attention, seed=req.seed, trace=req.trace, keep_logits=req.keep_logits,
    )


def infill(model: DiffusionVLM, vocab: Vocab, req: InfillRequest) -> GenResult:
    """Fill the [M] slots of a draft, starting at t = L_M / L.

    The sub-problem of L_M masks gets its own schedule (same family,
    K' = ceil(nfe * L_M)). Non-mask draft tokens are never modified.
    """
    draft = torch.as_tensor(list(req.draft), dtype=torch.long)
    masked = draft == vocab.mask_id
    n_mask = int(masked.sum())
    if n_mask == 0:
        tokens = draft.tolist()
        return GenResult(tokens, clean(tokens, vocab), 0)
    sub = discretize(req.spec, n_mask, steps_for_nfe(req.nfe, n_mask))
    start = NoisedAnswer(draft, masked, n_mask / draft.shape[0])
    return _denoise(
        model, vocab, start, sub.masked_trajectory()[1:],
        prompt=req.prompt, vision=req.vision, remask=req.remask, temperature=req.temperature,
        use_cache=req.use_cache, attention=req.attention, seed=req.seed, trace=req.trace, keep_logits=req.keep_logits,
    )


def fim_spans(ids: Sequence[int], vocab: Vocab) -> list[tuple[int, int]]:
    """(start, fim_index) for each [FIM] marker; the span is the contiguous
    run of masks (or their fills) immediately before the marker."""
    spans = []
    for i, tok in enumerate(ids):
        if int(tok) == vocab.fim_id:
            j = i
            while j > 0 and int(ids[j - 1]) == vocab.mask_id:
                j -= 1
            spans.append((j, i))
    return spans


def write_trace(path: Path, records: Sequence[dict]) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")


@dataclass
class LatencyRecord:
    mean: float
    variance: float
    median: float
    forward_passes: int
    samples: list[float]


def measure_latency(model: DiffusionVLM, vocab: Vocab, req: GenRequest, repeats: int = 5) -> LatencyRecord:
    """Seconds per sample after one warm-up run; prefill is inside the timing."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    res = generate(model, vocab, req)
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        res = generate(model, vocab, req)
        samples.append(time.perf_counter() - t0)
    var = statistics.pvariance(samples) if len(samples) > 1 else 0.0
    return LatencyRecord(statistics.fmean(samples), var, statistics.median(samples), res.forward_passes, samples)
