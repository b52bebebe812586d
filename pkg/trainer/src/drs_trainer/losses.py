"""Masked negative-log-likelihood matching the mask-artifact semantics.

The loss sums -log p only over mask-1 positions; everything else contributes
exactly zero, to the gradient as well as to the value.
"""

from __future__ import annotations

import torch


class ShapeMismatch(ValueError):
    pass


def masked_loss(logprobs: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """-sum of per-position log-probabilities where the mask bit is 1.

    Shapes must match exactly; [T] or [B, T] both work.
    """
    if logprobs.shape != mask.shape:
        raise ShapeMismatch(f"logprobs {tuple(logprobs.shape)} vs mask {tuple(mask.shape)}")
    return -(logprobs * mask.to(logprobs.dtype)).sum()


def gather_logprobs(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Per-position log p(target) from raw logits; [B, T, V] -> [B, T]."""
    if logits.shape[:-1] != targets.shape:
        raise ShapeMismatch(f"logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    logp = torch.log_softmax(logits, dim=-1)
    return logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)


def sequence_masked_nll(
    logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor
) -> torch.Tensor:
    """Masked NLL straight from logits; the training objective."""
    return masked_loss(gather_logprobs(logits, targets), mask)
