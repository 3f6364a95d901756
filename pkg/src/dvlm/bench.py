"""Metrics and experiment drivers: speed/quality sweeps, cache benchmark,
constraint satisfaction and FIM pattern checks.

Latency cells run serially in this process; nothing else should share the
CPU while a sweep is timing.
"""
from __future__ import annotations

import csv
import json
import statistics
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from .model import DiffusionVLM
from .sampler import GenRequest, InfillRequest, clean, fim_spans, generate, infill, measure_latency
from .schedules import ScheduleSpec, discretize, steps_for_nfe
from .tasks import NEWLINE, TrainExample, acrostic_constraints, acrostic_draft, parse_caption
from .vocab import Vocab

DEFAULT_NFES = (0.25, 0.5, 0.75, 1.0)
DEFAULT_SPECS = (
    ScheduleSpec("cosine"),
    ScheduleSpec("linear"),
    ScheduleSpec("shift", 3.0),
    ScheduleSpec("shift", 1 / 3),
)

SWEEP_COLUMNS = ("family", "alpha", "nfe", "K", "seed", "n", "exact_match", "token_f1", "latency_s", "forward_passes")
CACHE_COLUMNS = ("ratio", "prefix_len", "answer_len", "cached_s", "uncached_s", "speedup", "outputs_identical")


def exact_match(pred: Sequence[int], ref: Sequence[int]) -> float:
    return float(list(pred) == list(ref))


def token_f1(pred: Sequence[int], ref: Sequence[int]) -> float:
    """Bag-of-tokens F1."""
    if not pred and not ref:
        return 1.0
    common = 0
    counts: dict[int, int] = {}
    for t in ref:
        counts[t] = counts.get(t, 0) + 1
    for t in pred:
        if counts.get(t, 0) > 0:
            common += 1
            counts[t] -= 1
    if common == 0:
        return 0.0
    p, r = common / len(pred), common / len(ref)
    return 2 * p * r / (p + r)


@dataclass
class ConstraintRow:
    sentence_rate: float
    sample_ok: int
    n_lines: int


@dataclass
class ConstraintReport:
    sentence_rate: float
    sample_rate: float
    n: int

    def row(self, name: str) -> str:
        return f"{name:<20} {self.sentence_rate:.2f} {self.sample_rate:.2f}"


def split_lines(ids: Sequence[int], vocab: Vocab) -> list[list[int]]:
    nl = vocab.id(NEWLINE)
    lines: list[list[int]] = [[]]
    for t in ids:
        if int(t) == nl:
            lines.append([])
        else:
            lines[-1].append(int(t))
    return lines


def check_acrostic(text_ids: Sequence[int], constraints: Sequence[int], vocab: Vocab) -> ConstraintRow:
    """Line i must start with token ``constraints[i]``; missing lines fail."""
    if not constraints:
        raise ValueError("constraints must be non-empty")
    lines = split_lines(text_ids, vocab)
    ok = sum(1 for i, c in enumerate(constraints) if i < len(lines) and lines[i][:1] == [int(c)])
    return ConstraintRow(ok / len(constraints), int(ok == len(constraints)), len(lines))


def aggregate(rows: Iterable[ConstraintRow]) -> ConstraintReport:
    rows = list(rows)
    if not rows:
        return ConstraintReport(0.0, 0.0, 0)
    return ConstraintReport(
        statistics.fmean(r.sentence_rate for r in rows), statistics.fmean(r.sample_ok for r in rows), len(rows)
    )


def fim_pattern_ok(raw: Sequence[int], draft: Sequence[int], vocab: Vocab) -> bool:
    """Each [FIM] span reads <clean tokens>[S]*[FIM]; everything else is untouched."""
    raw, draft = [int(t) for t in raw], [int(t) for t in draft]
    if len(raw) != len(draft):
        return False
    in_span = [False] * len(draft)
    for start, end in fim_spans(draft, vocab):
        if raw[end] != vocab.fim_id:
            return False
        seg = raw[start:end]
        k = 0
        while k < len(seg) and seg[k] not in vocab.special_ids:
            k += 1
        if any(t != vocab.fill_id for t in seg[k:]):
            return False
        for i in range(start, end):
            in_span[i] = True
    return all(in_span[i] or raw[i] == draft[i] for i in range(len(draft)))


def _vision(model: DiffusionVLM, ex: TrainExample) -> Optional[torch.Tensor]:
    if ex.img is None:
        return None
    with torch.no_grad():
        return model.encode_image(ex.img)


def caption_eval(
    model: DiffusionVLM,
    vocab: Vocab,
    examples: Sequence[TrainExample],
    spec: ScheduleSpec,
    nfe: float,
    L: Optional[int] = None,
    use_cache: bool = True,
) -> dict:
    """Greedy decode every example; returns exact match, token F1, median
    seconds per sample (after one untimed warm-up) and forward passes per
    sample."""
    L = L or len(examples[0].answer)
    sched = discretize(spec, L, steps_for_nfe(nfe, L))
    em, f1, secs, passes = [], [], [], 0
    generate(model, vocab, GenRequest(examples[0].prompt, L, sched, vision=_vision(model, examples[0]),
                                      use_cache=use_cache))
    for ex in examples:
        ref = clean(ex.answer, vocab)
        vision = _vision(model, ex)
        t0 = time.perf_counter()
        res = generate(model, vocab, GenRequest(ex.prompt, L, sched, vision=vision, use_cache=use_cache))
        secs.append(time.perf_counter() - t0)
        em.append(exact_match(res.text_ids, ref))
        f1.append(token_f1(res.text_ids, ref))
        passes = res.forward_passes
    return {
        "K": sched.K,
        "n": len(examples),
        "exact_match": statistics.fmean(em),
        "token_f1": statistics.fmean(f1),
        "latency_s": statistics.median(secs),
        "forward_passes": passes,
    }


def seeded_subset(pool: Sequence, n: int, seed: int) -> list:
    idx = np.random.default_rng(seed).choice(len(pool), size=min(n, len(pool)), replace=False)
    return [pool[i] for i in idx]


def sweep_speed_quality(
    model: DiffusionVLM,
    vocab: Vocab,
    pool: Sequence[TrainExample],
    nfes: Sequence[float] = DEFAULT_NFES,
    specs: Sequence[ScheduleSpec] = DEFAULT_SPECS,
    seeds: Sequence[int] = (0,),
    n_eval: int = 50,
) -> list[dict]:
    """One row per (schedule, NFE, seed); the seed picks the evaluation subset."""
    rows = []
    for spec in specs:
        for nfe in nfes:
            for seed in seeds:
                r = caption_eval(model, vocab, seeded_subset(pool, n_eval, seed), spec, nfe)
                rows.append({"family": spec.family, "alpha": spec.alpha if spec.family == "shift" else "",
                             "nfe": nfe, "seed": seed, **r})
    return rows


def pad_prefix(vision: torch.Tensor, prompt: Sequence[int], prefix_len: int) -> tuple[Optional[torch.Tensor], list[int]]:
    """Stretch (by tiling) or trim the vision prefix so vision + prompt has
    ``prefix_len`` positions. Zero length drops both."""
    prompt = list(prompt)
    if prefix_len < len(prompt):
        return None, prompt[len(prompt) - prefix_len :] if prefix_len else []
    n_vis = prefix_len - len(prompt)
    if n_vis == 0:
        return None, prompt
    reps = -(-n_vis // vision.shape[1])
    return vision.repeat(1, reps, 1)[:, :n_vis], prompt


def bench_cache(
    model: DiffusionVLM,
    vocab: Vocab,
    examples: Sequence[TrainExample],
    ratios: Sequence[float] = (0, 1, 2, 4, 8),
    nfe: float = 1.0,
    repeats: int = 5,
    spec: ScheduleSpec = ScheduleSpec("shift", 1 / 3),
) -> list[dict]:
    """Cached vs uncached prefix-plan decoding at several prefix/answer ratios.

    Latency is the median of ``repeats`` timed runs after one warm-up, per
    example, averaged over examples.
    """
    L = len(examples[0].answer)
    sched = discretize(spec, L, steps_for_nfe(nfe, L))
    rows = []
    for ratio in ratios:
        P = int(round(ratio * L))
        cached, uncached, same = [], [], True
        for ex in examples:
            vision, prompt = pad_prefix(_vision(model, ex), ex.prompt, P)
            reqs = {
                c: GenRequest(prompt, L, sched, vision=vision, use_cache=c) for c in (True, False)
            }
            lc = measure_latency(model, vocab, reqs[True], repeats)
            lu = measure_latency(model, vocab, reqs[False], repeats)
            cached.append(lc.median)
            uncached.append(lu.median)
            same &= generate(model, vocab, reqs[True]).tokens == generate(model, vocab, reqs[False]).tokens
        c, u = statistics.fmean(cached), statistics.fmean(uncached)
        rows.append({"ratio": ratio, "prefix_len": P, "answer_len": L, "cached_s": c, "uncached_s": u,
                     "speedup": u / c, "outputs_identical": same})
    return rows


def acrostic_report(
    model: DiffusionVLM,
    vocab: Vocab,
    examples: Sequence[TrainExample],
    nfe: float = 1.0,
    spec: ScheduleSpec = ScheduleSpec("shift", 1 / 3),
) -> tuple[ConstraintReport, list[list[int]]]:
    """Infill drafts whose line-initial words are the constraints."""
    rows, outputs = [], []
    for ex in examples:
        words = acrostic_constraints(parse_caption(ex.text))
        cons = vocab.encode(words)
        draft = acrostic_draft(vocab, words, len(ex.answer))
        res = infill(model, vocab, InfillRequest(draft, ex.prompt, spec, nfe, vision=_vision(model, ex)))
        rows.append(check_acrostic(res.text_ids, cons, vocab))
        outputs.append(res.tokens)
    return aggregate(rows), outputs


def free_generation_report(
    model: DiffusionVLM,
    vocab: Vocab,
    examples: Sequence[TrainExample],
    constraints: Sequence[Sequence[str]],
    nfe: float = 1.0,
    spec: ScheduleSpec = ScheduleSpec("shift", 1 / 3),
) -> ConstraintReport:
    """Baseline: unconstrained generation scored against the same constraints."""
    L = len(examples[0].answer)
    sched = discretize(spec, L, steps_for_nfe(nfe, L))
    rows = []
    for ex, cons in zip(examples, constraints):
        res = generate(model, vocab, GenRequest(ex.prompt, L, sched, vision=_vision(model, ex)))
        rows.append(check_acrostic(res.text_ids, vocab.encode(list(cons)), vocab))
    return aggregate(rows)


def write_csv(path: Path, rows: Sequence[dict], columns: Sequence[str], comment: str = "") -> None:
    with open(path, "w", newline="") as f:
        if comment:
            for line in comment.splitlines():
                f.write(f"# {line}\n")
        w = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in columns})


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return v


def write_jsonl(path: Path, rows: Sequence[dict]) -> None:
    with open(path, "w") as f:
        for r in rows:
            f.write(json.dumps(r) + "\n")


def read_csv(path: Path) -> list[dict]:
    with open(path) as f:
        return list(csv.DictReader(line for line in f if not line.startswith("#")))


def report_dict(report: ConstraintReport) -> dict:
    return asdict(report)
