"""Masked (absorbing-state) discrete diffusion kernel.

Corruption replaces tokens with ``[M]``; the reverse process reveals masked
positions from a per-position categorical prediction and never touches a
position once it holds a clean token.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Optional

import torch

from .errors import DomainError, InvalidInputError

EPS = 1e-3

MaskMode = Literal["exact", "bernoulli"]
RemaskPolicy = Literal["confidence", "random"]
WeightMode = Literal["inverse-t", "unit"]


@dataclass(frozen=True)
class NoisedAnswer:
    tokens: torch.Tensor  # (L,) int64
    masked: torch.Tensor  # (L,) bool
    t: float

    @property
    def length(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def n_masked(self) -> int:
        return int(self.masked.sum())

    def masked_positions(self) -> list[int]:
        return torch.nonzero(self.masked).flatten().tolist()


@dataclass(frozen=True)
class ComplementaryPair:
    a: NoisedAnswer
    b: NoisedAnswer


@dataclass
class LossValue:
    value: torch.Tensor  # scalar, differentiable
    token_count: int

    def __float__(self) -> float:
        return float(self.value.detach())


@dataclass(frozen=True)
class StepInfo:
    revealed: list[int]
    confidence: list[float]


def _check_time(t: float, name: str = "t") -> None:
    if not (0.0 <= t <= 1.0):  # also rejects NaN
        raise DomainError(f"{name}={t} outside [0, 1]")


def _generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def masked_count(t: float, length: int) -> int:
    return math.floor(t * length)


def forward_mask(
    x0: torch.Tensor,
    t: float,
    *,
    mask_id: int,
    mode: MaskMode = "exact",
    seed: int = 0,
) -> NoisedAnswer:
    """Corrupt ``x0`` to time ``t``.

    ``exact`` masks exactly floor(t*L) positions drawn without replacement;
    ``bernoulli`` masks each position independently with probability t.
    """
    _check_time(t)
    x0 = torch.as_tensor(x0, dtype=torch.long)
    if x0.dim() != 1:
        raise InvalidInputError("x0 must be a 1-D token sequence")
    if bool((x0 == mask_id).any()):
        raise InvalidInputError("x0 already contains mask tokens")
    L = x0.shape[0]
    g = _generator(seed)
    if mode == "exact":
        masked = torch.zeros(L, dtype=torch.bool)
        masked[torch.randperm(L, generator=g)[: masked_count(t, L)]] = True
    elif mode == "bernoulli":
        masked = torch.rand(L, generator=g) < t
    else:
        raise ValueError(f"unknown mask mode {mode!r}")
    tokens = torch.where(masked, torch.full_like(x0, mask_id), x0)
    return NoisedAnswer(tokens, masked, float(t))


def complementary_pair(x0: torch.Tensor, t: float, *, mask_id: int, seed: int = 0) -> ComplementaryPair:
    """Two corruptions of ``x0`` whose masked sets partition all positions.

    Member ``b`` carries its own effective time, the fraction of positions it
    masks, so each member is a valid draw at its own noise level.
    """
    a = forward_mask(x0, t, mask_id=mask_id, mode="exact", seed=seed)
    x0 = torch.as_tensor(x0, dtype=torch.long)
    masked = ~a.masked
    L = a.length
    tokens = torch.where(masked, torch.full_like(x0, mask_id), x0)
    t_b = float(masked.sum()) / L if L else 0.0
    return ComplementaryPair(a, NoisedAnswer(tokens, masked, t_b))


def reveal(
    xt: NoisedAnswer,
    probs: torch.Tensor,
    n_remaining: int,
    *,
    mask_id: int,
    policy: RemaskPolicy = "confidence",
    temperature: float = 0.0,
    seed: int = 0,
) -> tuple[NoisedAnswer, StepInfo]:
    """Reveal masked positions until exactly ``n_remaining`` stay masked.

    Every masked position gets a candidate token (argmax, or a temperature
    sample); ``policy`` picks which candidates are kept. ``confidence`` keeps
    the largest max-probabilities, ties to the lowest position.
    """
    idx = torch.nonzero(xt.masked).flatten()
    n_reveal = idx.numel() - n_remaining
    if n_remaining < 0 or n_reveal < 0:
        raise DomainError(f"cannot go from {idx.numel()} to {n_remaining} masked positions")
    if n_reveal == 0:
        return NoisedAnswer(xt.tokens.clone(), xt.masked.clone(), n_remaining / xt.length), StepInfo([], [])
    probs = torch.as_tensor(probs)
    if probs.dim() != 2 or probs.shape[0] != xt.length:
        raise InvalidInputError(f"probs must have shape (L, V), got {tuple(probs.shape)}")
    p = probs[idx].to(torch.float64)
    if not bool(torch.isfinite(p).all()) or bool((p < 0).any()):
        raise InvalidInputError("probs missing or invalid at a masked position")
    p[:, mask_id] = 0.0
    total = p.sum(-1, keepdim=True)
    if bool((total <= 0).any()):
        raise InvalidInputError("probs put no mass on any clean token at a masked position")
    p = p / total

    g = _generator(seed)
    if temperature and temperature > 0:
        q = p ** (1.0 / temperature)
        cand = torch.multinomial(q / q.sum(-1, keepdim=True), 1, generator=g).flatten()
    else:
        cand = p.argmax(-1)
    conf = p.max(-1).values

    if policy == "confidence":
        order = torch.sort(-conf, stable=True).indices
    elif policy == "random":
        order = torch.randperm(idx.numel(), generator=g)
    else:
        raise ValueError(f"unknown remask policy {policy!r}")
    keep = order[:n_reveal].sort().values

    tokens = xt.tokens.clone()
    masked = xt.masked.clone()
    pos = idx[keep]
    tokens[pos] = cand[keep]
    masked[pos] = False
    info = StepInfo(pos.tolist(), [float(c) for c in conf[keep]])
    return NoisedAnswer(tokens, masked, n_remaining / xt.length), info


def reverse_transition(
    xt: NoisedAnswer,
    probs: torch.Tensor,
    s: float,
    *,
    mask_id: int,
    policy: RemaskPolicy = "confidence",
    temperature: float = 0.0,
    seed: int = 0,
) -> NoisedAnswer:
    """One reverse step from time ``xt.t`` to ``s``; floor(s*L) positions stay masked."""
    _check_time(s, "s")
    if s >= xt.t:
        raise DomainError(f"reverse step needs s < t, got s={s}, t={xt.t}")
    out, _ = reveal(
        xt, probs, masked_count(s, xt.length), mask_id=mask_id, policy=policy, temperature=temperature, seed=seed
    )
    return NoisedAnswer(out.tokens, out.masked, float(s))


def dlm_loss(
    log_probs: torch.Tensor,
    x0: torch.Tensor,
    xt: NoisedAnswer,
    *,
    weight_mode: WeightMode = "inverse-t",
    include_padding: bool = True,
    pad_id: Optional[int] = None,
    eps: float = EPS,
) -> LossValue:
    """Weighted negative log-likelihood of the clean tokens over masked positions."""
    x0 = torch.as_tensor(x0, dtype=torch.long, device=log_probs.device)
    use = xt.masked.to(log_probs.device)
    if not include_padding:
        if pad_id is None:
            raise ValueError("pad_id is required when include_padding is False")
        use = use & (x0 != pad_id)
    count = int(use.sum())
    if count == 0:
        return LossValue(log_probs.new_zeros(()), 0)
    pos = torch.nonzero(use).flatten()
    nll = -log_probs[pos, x0[pos]].sum()
    if weight_mode == "inverse-t":
        w = 1.0 / max(xt.t, eps)
    elif weight_mode == "unit":
        w = 1.0
    else:
        raise ValueError(f"unknown weight mode {weight_mode!r}")
    return LossValue(nll * w, count)
