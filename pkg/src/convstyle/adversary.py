"""Phone-level adversarial speaker classifier behind a gradient reversal layer."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.autograd import Function
from torch.nn import functional as F

from .errors import SpeakerOutOfRange


@dataclass
class AdversaryConfig:
    lam: float = 1.0            # reversal strength
    hidden: int = 256
    num_speakers: int = 4
    warmup_steps: int = 0       # 0 = constant lambda

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError('lambda must be non-negative')
        if self.num_speakers < 2:
            raise ValueError('adversarial training needs at least two speakers')

    def lambda_at(self, step: int) -> float:
        if self.warmup_steps <= 0:
            return self.lam
        return self.lam * min(1.0, step / self.warmup_steps)


class GradientReversalFunction(Function):
    @staticmethod
    def forward(ctx, x, lambda_):
        ctx.lambda_ = lambda_
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grads):
        return -ctx.lambda_ * grads, None


def reverse_gradient(x: torch.Tensor, lam: float) -> torch.Tensor:
    """Identity forward; backward multiplies the upstream gradient by ``-lam``."""
    return GradientReversalFunction.apply(x, float(lam))


class SpeakerAdversary(nn.Module):
    """Two-layer per-symbol speaker classifier on front-end encoder outputs."""

    def __init__(self, in_dim: int, num_speakers: int, hidden: int = 256):
        super().__init__()
        self.num_speakers = num_speakers
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(),
                                 nn.Linear(hidden, num_speakers))

    def forward(self, fe: torch.Tensor, lam: float = 1.0, reverse: bool = True) -> torch.Tensor:
        if reverse:
            fe = reverse_gradient(fe, lam)
        return self.net(fe)


def speaker_adversarial_loss(logits: torch.Tensor, speaker_id: torch.Tensor,
                             mask: torch.Tensor | None = None) -> torch.Tensor:
    """Cross-entropy averaged over (valid) symbol positions.

    ``logits`` is ``[B, L, K]`` (or ``[L, K]``), ``speaker_id`` one id per
    utterance.
    """
    if logits.dim() == 2:
        logits = logits.unsqueeze(0)
        if mask is not None:
            mask = mask.unsqueeze(0)
    B, L, K = logits.shape
    speaker_id = torch.as_tensor(speaker_id, device=logits.device).reshape(-1)
    if speaker_id.numel() == 1 and B > 1:
        speaker_id = speaker_id.expand(B)
    if speaker_id.min() < 0 or speaker_id.max() >= K:
        raise SpeakerOutOfRange(f'speaker id outside [0, {K})')
    target = speaker_id[:, None].expand(B, L)
    ce = F.cross_entropy(logits.reshape(B * L, K), target.reshape(-1), reduction='none')
    if mask is None:
        return ce.mean()
    mask = mask.reshape(-1).to(ce.dtype)
    return (ce * mask).sum() / mask.sum()
