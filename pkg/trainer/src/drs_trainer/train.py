"""Staged training loop over mask artifacts, honoring a phase plan.

Phases run in plan order with the plan's learning rates and schedules;
ablation plans (stages removed or reordered) run unchanged.  The metrics log
is one JSON line per optimizer step: {"phase", "step", "masked_nll"}, where
masked_nll is the batch loss per supervised token.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .artifacts import MissingPhaseArtifacts, PhaseEntry, TrainSample
from .losses import sequence_masked_nll
from .model import ToyByteLM, shift_inputs


@dataclass
class TrainConfig:
    base_epochs: float = 8.0
    batch_size: int = 8
    seed: int = 0
    weight_decay: float = 0.05
    max_grad_norm: float = 1.0
    # Plan learning rates are adapter-tuning magnitudes for pretrained models;
    # a from-scratch toy needs them scaled up.  The plan's LR ratios, phase
    # order, multipliers, schedules and warmups are honored unchanged.
    lr_scale: float = 200.0


@dataclass
class StepLog:
    phase: int
    step: int
    masked_nll: float

    def to_json(self) -> str:
        return json.dumps({"phase": self.phase, "step": self.step, "masked_nll": self.masked_nll})


@dataclass
class TrainResult:
    logs: list[StepLog] = field(default_factory=list)
    initial_full_nll: float = 0.0
    final_full_nll: float = 0.0
    phase_order: list[int] = field(default_factory=list)


def _warmup_steps(entry: PhaseEntry, total_steps: int) -> int:
    if "steps" in entry.warmup:
        return min(int(entry.warmup["steps"]), total_steps)
    return int(round(float(entry.warmup["fraction"]) * total_steps))


def _lr_at(entry: PhaseEntry, step: int, total_steps: int) -> float:
    warmup = _warmup_steps(entry, total_steps)
    if warmup > 0 and step < warmup:
        return entry.learning_rate * (step + 1) / warmup
    if entry.schedule == "constant" or total_steps <= warmup:
        return entry.learning_rate
    progress = (step - warmup) / max(1, total_steps - warmup)
    return entry.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


def _batch_tensors(batch: list[TrainSample], phase_id: int, device: str):
    longest = max(sample.length for sample in batch)
    tokens = torch.zeros(len(batch), longest, dtype=torch.long, device=device)
    mask = torch.zeros(len(batch), longest, dtype=torch.long, device=device)
    for row, sample in enumerate(batch):
        bits = sample.masks.get(phase_id)
        if bits is None:
            raise MissingPhaseArtifacts(f"{sample.sample_id}: no mask for phase {phase_id}")
        tokens[row, : sample.length] = torch.tensor(list(sample.data), dtype=torch.long)
        mask[row, : sample.length] = torch.tensor(bits, dtype=torch.long)
    return tokens, mask


def full_supervision_nll(model: ToyByteLM, samples: list[TrainSample], device: str = "cpu") -> float:
    """Total phase-4 masked NLL over the corpus, for before/after comparisons."""
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(samples), 16):
            batch = samples[start : start + 16]
            tokens, mask = _batch_tensors(batch, 4, device)
            logits = model(shift_inputs(tokens))
            total += sequence_masked_nll(logits, tokens, mask).item()
    return total


def staged_train(
    plan: list[PhaseEntry],
    samples: list[TrainSample],
    model: ToyByteLM | None = None,
    config: TrainConfig | None = None,
    log_path: str | Path | None = None,
    device: str = "cpu",
) -> TrainResult:
    config = config or TrainConfig()
    rng = random.Random(config.seed)
    torch.manual_seed(config.seed)
    if model is None:
        max_len = max(sample.length for sample in samples) + 1
        model = ToyByteLM(max_len=max(max_len, 16))
    for entry in plan:
        for sample in samples:
            if entry.phase_id not in sample.masks:
                raise MissingPhaseArtifacts(
                    f"{sample.sample_id}: no mask for phase {entry.phase_id}"
                )

    result = TrainResult(phase_order=[entry.phase_id for entry in plan])
    result.initial_full_nll = full_supervision_nll(model, samples, device)
    steps_per_epoch = math.ceil(len(samples) / config.batch_size)

    for entry in plan:
        epochs = entry.resolved_epochs(config.base_epochs)
        total_steps = int(round(epochs * steps_per_epoch))
        if total_steps <= 0:
            continue
        optimizer = torch.optim.AdamW(
            model.parameters(),
            lr=entry.learning_rate * config.lr_scale,
            weight_decay=config.weight_decay,
        )
        order: list[TrainSample] = []
        step = 0
        while step < total_steps:
            if len(order) < config.batch_size:
                refill = list(samples)
                rng.shuffle(refill)
                order.extend(refill)
            batch, order = order[: config.batch_size], order[config.batch_size :]
            tokens, mask = _batch_tensors(batch, entry.phase_id, device)
            lr = _lr_at(entry, step, total_steps) * config.lr_scale
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.zero_grad()
            logits = model(shift_inputs(tokens))
            loss = sequence_masked_nll(logits, tokens, mask)
            supervised = int(mask.sum().item())
            (loss / max(1, supervised)).backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.max_grad_norm)
            optimizer.step()
            step += 1
            result.logs.append(
                StepLog(entry.phase_id, step, loss.item() / max(1, supervised))
            )

    result.final_full_nll = full_supervision_nll(model, samples, device)
    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            for entry_log in result.logs:
                fh.write(entry_log.to_json() + "\n")
    return result
