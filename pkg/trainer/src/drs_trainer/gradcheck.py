"""Gradient contract checks for the masked objective.

Masked-out positions must receive exactly zero gradient at the logits; the
loss never reads them, so any nonzero value there means the mask leaked.
In-scope gradients are compared against central finite differences of the
loss as a function of the logits.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

import torch

from .losses import sequence_masked_nll
from .model import ToyByteLM, shift_inputs


class GradientLeak(AssertionError):
    def __init__(self, position):
        super().__init__(f"nonzero gradient at masked position {position}")
        self.position = position


@dataclass
class GradientReport:
    checked_positions: int = 0
    max_rel_error: float = 0.0
    fd_errors: list[float] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= 1e-4


def _loss_from_logits(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return sequence_masked_nll(logits, targets, mask)


def check_gradients(
    model: ToyByteLM,
    target_bytes: torch.Tensor,
    mask: torch.Tensor,
    *,
    expected_mask: torch.Tensor | None = None,
    n_positions: int = 10,
    fd_step: float = 1e-5,
    rng: random.Random | None = None,
) -> GradientReport:
    """Verify zero gradients off-mask and FD agreement on-mask.

    target_bytes and mask are [B, T]; gradients are taken with respect to the
    per-position logits, which is where a leaking mask would first show up.
    The loss runs with ``mask`` (e.g. a mask read from an artifact file) while
    zero positions are judged against ``expected_mask`` (the trusted mask),
    so a corrupted artifact bit surfaces as a GradientLeak.
    """
    rng = rng or random.Random(0)
    if expected_mask is None:
        expected_mask = mask
    logits = model(shift_inputs(target_bytes))
    loss = _loss_from_logits(logits, target_bytes, mask)
    (grad,) = torch.autograd.grad(loss, logits)

    masked_out = (expected_mask == 0).nonzero(as_tuple=False)
    for b, t in masked_out.tolist():
        row = grad[b, t]
        if bool((row != 0).any()):
            raise GradientLeak((b, t))

    report = GradientReport()
    base = logits.detach().clone()
    in_scope = ((mask == 1) & (expected_mask == 1)).nonzero(as_tuple=False).tolist()
    if not in_scope:
        return report
    vocab = logits.shape[-1]
    for _ in range(n_positions):
        b, t = in_scope[rng.randrange(len(in_scope))]
        v = rng.randrange(vocab)
        plus = base.clone()
        plus[b, t, v] += fd_step
        minus = base.clone()
        minus[b, t, v] -= fd_step
        fd = (
            _loss_from_logits(plus, target_bytes, mask)
            - _loss_from_logits(minus, target_bytes, mask)
        ).item() / (2 * fd_step)
        analytic = grad[b, t, v].item()
        rel = abs(fd - analytic) / max(abs(analytic), 1e-8)
        report.fd_errors.append(rel)
        report.max_rel_error = max(report.max_rel_error, rel)
        report.checked_positions += 1
    return report
