"""Training-phase plans and the replay mixing sampler.

The default plan has four phases, each unlocking one more supervised field.
Ablation plans drop and/or reorder phases; removed phases' epoch multipliers
are redistributed proportionally onto the survivors so the total number of
training epochs is unchanged.

Base epochs per model are not fixed here: multipliers are symbolic (x base)
and resolved when a plan file is written.
"""

from __future__ import annotations

import itertools
import json
import random
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterator, Sequence

from .schema import FIELD_BY_TAG, FIELD_TAGS


class CurriculumError(ValueError):
    pass


class EmptyStageList(CurriculumError):
    pass


class UnknownStage(CurriculumError):
    pass


class ReplayPoolTooSmall(CurriculumError):
    pass


class Schedule(str, Enum):
    COSINE = "cosine"
    CONSTANT = "constant"


@dataclass(frozen=True)
class Warmup:
    """Either a fraction of the phase's steps or an absolute step count."""

    fraction: float | None = None
    steps: int | None = None

    def __post_init__(self):
        if (self.fraction is None) == (self.steps is None):
            raise CurriculumError("warmup needs exactly one of fraction/steps")

    def to_dict(self) -> dict[str, Any]:
        if self.fraction is not None:
            return {"fraction": self.fraction}
        return {"steps": self.steps}

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "Warmup":
        return cls(fraction=obj.get("fraction"), steps=obj.get("steps"))


@dataclass(frozen=True)
class PhaseSpec:
    phase_id: int
    unlocked_fields: tuple[str, ...]  # F-tags, e.g. ("F1", "F2")
    epoch_multiplier: float
    learning_rate: float
    schedule: Schedule
    warmup: Warmup
    mix_replay: bool = False

    def __post_init__(self):
        object.__setattr__(self, "unlocked_fields", tuple(self.unlocked_fields))
        if self.epoch_multiplier <= 0:
            raise CurriculumError(f"phase {self.phase_id}: epoch multiplier must be positive")
        for tag in self.unlocked_fields:
            if tag not in FIELD_TAGS:
                raise CurriculumError(f"phase {self.phase_id}: unknown field tag {tag!r}")

    @property
    def field_names(self) -> tuple[str, ...]:
        return tuple(FIELD_BY_TAG[tag] for tag in self.unlocked_fields)

    def to_dict(self, base_epochs: float | None = None) -> dict[str, Any]:
        obj: dict[str, Any] = {
            "phase_id": self.phase_id,
            "unlocked_fields": list(self.unlocked_fields),
            "epoch_multiplier": self.epoch_multiplier,
            "learning_rate": self.learning_rate,
            "schedule": self.schedule.value,
            "warmup": self.warmup.to_dict(),
            "mix_replay": self.mix_replay,
        }
        if base_epochs is not None:
            obj["epochs"] = self.epoch_multiplier * base_epochs
        return obj

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "PhaseSpec":
        return cls(
            phase_id=int(obj["phase_id"]),
            unlocked_fields=tuple(obj["unlocked_fields"]),
            epoch_multiplier=float(obj["epoch_multiplier"]),
            learning_rate=float(obj["learning_rate"]),
            schedule=Schedule(obj["schedule"]),
            warmup=Warmup.from_dict(obj["warmup"]),
            mix_replay=bool(obj.get("mix_replay", False)),
        )


@dataclass(frozen=True)
class PhasePlan:
    phases: tuple[PhaseSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "phases", tuple(self.phases))
        if not self.phases:
            raise EmptyStageList("a plan needs at least one phase")

    def phase(self, phase_id: int) -> PhaseSpec:
        for spec in self.phases:
            if spec.phase_id == phase_id:
                return spec
        raise UnknownStage(f"no phase {phase_id} in plan")

    @property
    def total_epoch_multiplier(self) -> float:
        return sum(spec.epoch_multiplier for spec in self.phases)

    def to_dict(self, base_epochs: float | None = None) -> dict[str, Any]:
        obj: dict[str, Any] = {"phases": [p.to_dict(base_epochs) for p in self.phases]}
        if base_epochs is not None:
            obj["base_epochs"] = base_epochs
        return obj

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "PhasePlan":
        return cls(tuple(PhaseSpec.from_dict(p) for p in obj["phases"]))


def save_plan(plan: PhasePlan, path: str | Path, base_epochs: float = 1.0) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(plan.to_dict(base_epochs), fh, indent=2, sort_keys=False)
        fh.write("\n")


def load_plan(path: str | Path) -> PhasePlan:
    with open(path, "r", encoding="utf-8") as fh:
        return PhasePlan.from_dict(json.load(fh))


def default_plan() -> PhasePlan:
    """The stock four-phase schedule.

    P1 supervises entities only at a high LR, P2 adds the scene graph, P3 the
    reasoning chain, and P4 unlocks the answer at a very low LR with replay
    mixing to protect general capability.
    """
    return PhasePlan(
        (
            PhaseSpec(1, ("F1",), 0.5, 5e-5, Schedule.COSINE, Warmup(fraction=0.10)),
            PhaseSpec(2, ("F1", "F2"), 1.0, 4e-5, Schedule.CONSTANT, Warmup(steps=20)),
            PhaseSpec(3, ("F1", "F2", "F3"), 1.0, 3e-5, Schedule.CONSTANT, Warmup(steps=30)),
            PhaseSpec(
                4,
                ("F1", "F2", "F3", "F4"),
                1.0,
                3e-6,
                Schedule.COSINE,
                Warmup(fraction=0.05),
                mix_replay=True,
            ),
        )
    )


def _normalize_stage(stage: Any) -> int:
    if isinstance(stage, int):
        return stage
    text = str(stage).strip().upper()
    if text.startswith("S"):
        text = text[1:]
    try:
        return int(text)
    except ValueError:
        raise UnknownStage(f"cannot parse stage id {stage!r}") from None


def ablation_plan(stages: Sequence[Any], base_plan: PhasePlan | None = None) -> PhasePlan:
    """A plan running only the given stages, in the given order.

    Removed stages' epoch multipliers are redistributed proportionally to the
    survivors' own multipliers, so the plan total is preserved exactly.
    """
    plan = base_plan if base_plan is not None else default_plan()
    if not stages:
        raise EmptyStageList("stage list is empty")
    ids = [_normalize_stage(s) for s in stages]
    known = {spec.phase_id for spec in plan.phases}
    for pid in ids:
        if pid not in known:
            raise UnknownStage(f"stage S{pid} is not in the base plan")
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate stage in {stages!r}")
    survivors = [plan.phase(pid) for pid in ids]
    scale = plan.total_epoch_multiplier / sum(spec.epoch_multiplier for spec in survivors)
    return PhasePlan(
        tuple(replace(spec, epoch_multiplier=spec.epoch_multiplier * scale) for spec in survivors)
    )


def random_stage_orders(seed: int, count: int = 3, n_stages: int = 4) -> list[tuple[int, ...]]:
    """Seeded random stage permutations, excluding the canonical order."""
    canonical = tuple(range(1, n_stages + 1))
    candidates = [p for p in itertools.permutations(canonical) if p != canonical]
    rng = random.Random(seed)
    return rng.sample(candidates, count)


# ---------------------------------------------------------------------------
# Replay mixing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MixConfig:
    replay_size: int = 15_000
    ratio: tuple[int, int] = (1, 1)  # domain : replay
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ratio", tuple(self.ratio))
        domain, replay = self.ratio
        if domain < 1 or replay < 0:
            raise CurriculumError(f"bad mix ratio {self.ratio}")
        if self.replay_size < 0:
            raise CurriculumError("replay_size must be >= 0")


DOMAIN_SOURCE = "domain"
REPLAY_SOURCE = "replay"


def _cycle_shuffled(items: list, rng: random.Random) -> Iterator:
    while True:
        order = list(items)
        rng.shuffle(order)
        yield from order


def mix_sampler(
    dr_pool: Sequence, replay_pool: Sequence, cfg: MixConfig
) -> Iterator[tuple[str, Any]]:
    """Deterministic interleaved stream of (source, item) pairs.

    The replay subset is drawn once, seeded, without replacement.  Sources
    alternate in the ratio's repeating pattern (strict alternation at 1:1);
    each source reshuffles its pool every full pass.
    """
    dr_items = list(dr_pool)
    if not dr_items:
        raise CurriculumError("domain pool is empty")
    rng = random.Random(cfg.seed)
    domain_n, replay_n = cfg.ratio
    dr_seed = rng.randrange(2**32)
    replay_seed = rng.randrange(2**32)
    replay_items: list = []
    if replay_n > 0:
        pool = list(replay_pool)
        if len(pool) < cfg.replay_size:
            raise ReplayPoolTooSmall(
                f"replay pool has {len(pool)} items, need {cfg.replay_size}"
            )
        replay_items = rng.sample(pool, cfg.replay_size)
    pattern = (DOMAIN_SOURCE,) * domain_n + (REPLAY_SOURCE,) * replay_n
    streams = {DOMAIN_SOURCE: _cycle_shuffled(dr_items, random.Random(dr_seed))}
    if replay_n > 0:
        streams[REPLAY_SOURCE] = _cycle_shuffled(replay_items, random.Random(replay_seed))
    while True:
        for source in pattern:
            yield source, next(streams[source])
