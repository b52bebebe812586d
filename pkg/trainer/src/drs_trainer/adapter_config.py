"""Fine-tuning descriptor emitted for real-trainer handoff.

The toy loop proves the masked-gradient mechanism; production training runs
elsewhere, so we only emit the adapter settings a real stack needs, taking
the per-phase learning rates and schedules from the plan file.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .artifacts import PhaseEntry


@dataclass(frozen=True)
class AdapterConfig:
    lora_rank: int = 16
    lora_alpha: int = 16
    lora_dropout: float = 0.2
    target_modules: tuple[str, ...] = ("q_proj", "k_proj", "v_proj", "o_proj")
    gradient_accumulation: int = 4
    weight_decay: float = 0.05
    max_grad_norm: float = 1.0
    max_seq_len: int = 8192
    frozen_modules: tuple[str, ...] = ("vision_encoder", "aligner", "embed_tokens", "lm_head")
    phases: tuple[dict[str, Any], ...] = field(default_factory=tuple)

    @classmethod
    def from_plan(cls, plan: list[PhaseEntry], **overrides) -> "AdapterConfig":
        phases = tuple(
            {
                "phase_id": entry.phase_id,
                "learning_rate": entry.learning_rate,
                "schedule": entry.schedule,
                "warmup": entry.warmup,
                "epoch_multiplier": entry.epoch_multiplier,
                "mix_replay": entry.mix_replay,
            }
            for entry in plan
        )
        return cls(phases=phases, **overrides)

    def to_dict(self) -> dict[str, Any]:
        return {
            "lora_rank": self.lora_rank,
            "lora_alpha": self.lora_alpha,
            "lora_dropout": self.lora_dropout,
            "target_modules": list(self.target_modules),
            "gradient_accumulation": self.gradient_accumulation,
            "weight_decay": self.weight_decay,
            "max_grad_norm": self.max_grad_norm,
            "max_seq_len": self.max_seq_len,
            "frozen_modules": list(self.frozen_modules),
            "phases": [dict(p) for p in self.phases],
        }

    def emit(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
