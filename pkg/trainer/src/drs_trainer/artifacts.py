"""File-format consumers: phase-plan JSON and mask-artifact JSONL.

These are the only coupling to the dataset-construction side; everything
arrives through files.  For byte-level training every token must cover
exactly one byte so mask bits map one-to-one onto model positions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any


class MissingPhaseArtifacts(ValueError):
    pass


class BadArtifact(ValueError):
    pass


@dataclass(frozen=True)
class PhaseEntry:
    phase_id: int
    unlocked_fields: tuple[str, ...]
    epoch_multiplier: float
    learning_rate: float
    schedule: str
    warmup: dict[str, Any]
    mix_replay: bool
    epochs: float | None = None  # baked value from the plan file, informational

    def resolved_epochs(self, base_epochs: float) -> float:
        return self.epoch_multiplier * base_epochs


def load_plan(path: str | Path) -> list[PhaseEntry]:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    entries = []
    for phase in obj["phases"]:
        entries.append(
            PhaseEntry(
                phase_id=int(phase["phase_id"]),
                unlocked_fields=tuple(phase["unlocked_fields"]),
                epoch_multiplier=float(phase["epoch_multiplier"]),
                learning_rate=float(phase["learning_rate"]),
                schedule=phase["schedule"],
                warmup=dict(phase["warmup"]),
                mix_replay=bool(phase.get("mix_replay", False)),
                epochs=float(phase["epochs"]) if "epochs" in phase else None,
            )
        )
    if not entries:
        raise BadArtifact(f"{path}: plan has no phases")
    return entries


@dataclass
class TrainSample:
    """One training sequence: raw bytes plus the per-phase mask bits."""

    sample_id: str
    data: bytes
    masks: dict[int, tuple[int, ...]]

    @property
    def length(self) -> int:
        return len(self.data)


def load_samples(path: str | Path, *, require_phases: tuple[int, ...] = (1, 2, 3, 4)) -> list[TrainSample]:
    """Group mask-artifact records by sample; byte-level tokenization required."""
    by_sample: dict[str, TrainSample] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            sample_id = record["sample_id"]
            data = record["target_text"].encode("utf-8")
            offsets = record["token_offsets"]
            if any(end - start != 1 for start, end in offsets):
                raise BadArtifact(f"{path}:{line_no}: {sample_id} is not byte-level tokenized")
            if len(offsets) != len(data):
                raise BadArtifact(f"{path}:{line_no}: {sample_id} offsets do not cover the text")
            mask = tuple(int(b) for b in record["mask"])
            if len(mask) != len(data):
                raise BadArtifact(f"{path}:{line_no}: {sample_id} mask length mismatch")
            sample = by_sample.get(sample_id)
            if sample is None:
                sample = TrainSample(sample_id, data, {})
                by_sample[sample_id] = sample
            elif sample.data != data:
                raise BadArtifact(f"{path}:{line_no}: {sample_id} target text differs across phases")
            sample.masks[int(record["phase"])] = mask
    samples = [by_sample[key] for key in sorted(by_sample)]
    for sample in samples:
        missing = [phase for phase in require_phases if phase not in sample.masks]
        if missing:
            raise MissingPhaseArtifacts(f"{sample.sample_id}: no mask for phase(s) {missing}")
    return samples
