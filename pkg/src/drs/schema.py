"""Structured supervision targets and benchmark question records.

A supervision target carries four fields in a fixed order: key entities,
scene-graph edges, a four-step reasoning chain, and the final answer.  The
canonical serialization is a single UTF-8 line with a stable key order and
fixed ", " / ": " separators, because downstream mask generation depends on
byte-exact field offsets.

Field spans tile the entire rendered text: each field's span starts at its
JSON key and absorbs the separator that follows its value; the opening brace
belongs to the first field and the closing brace to the last.  This keeps the
per-phase supervised region an exact byte prefix of the target.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Iterator

FIELD_ORDER = ("key_objects", "scene_graph", "reasoning_chain", "answer")
FIELD_TAGS = ("F1", "F2", "F3", "F4")
FIELD_BY_TAG = dict(zip(FIELD_TAGS, FIELD_ORDER))
TAG_BY_FIELD = dict(zip(FIELD_ORDER, FIELD_TAGS))


class AnnotationError(ValueError):
    """Base class for annotation parse/validation failures."""


class MalformedSyntax(AnnotationError):
    """Input is not a strict single JSON object with the expected shape."""


class MissingField(AnnotationError):
    def __init__(self, name: str):
        super().__init__(f"missing field: {name}")
        self.name = name


class WrongStageCount(AnnotationError):
    def __init__(self, count: int):
        super().__init__(f"reasoning_chain must have exactly 4 steps, got {count}")
        self.count = count


class BadEdgeSyntax(AnnotationError):
    def __init__(self, raw_edge: str):
        super().__init__(f"bad scene-graph edge: {raw_edge!r}")
        self.raw_edge = raw_edge


class StagesOutOfOrder(AnnotationError):
    """Reasoning-chain stages are not exactly Perception/Relation/Logic/Conclusion in order."""


class InvalidRecord(ValueError):
    """A question record violates its structural invariants."""


# ---------------------------------------------------------------------------
# Enumerations
# ---------------------------------------------------------------------------


class Stage(str, Enum):
    PERCEPTION = "Perception"
    RELATION = "Relation"
    LOGIC = "Logic"
    CONCLUSION = "Conclusion"


STAGE_ORDER = (Stage.PERCEPTION, Stage.RELATION, Stage.LOGIC, Stage.CONCLUSION)


class Source(str, Enum):
    HYPERSIM = "hypersim"
    CITYSCAPES = "cityscapes"


class Category(str, Enum):
    PERCEPTION = "Perception"
    SPATIAL_REASONING = "SpatialReasoning"
    AFFORDANCE_REASONING = "AffordanceReasoning"
    ANOMALY_DETECTION = "AnomalyDetection"
    FALSE_PREMISE_REJECTION = "FalsePremiseRejection"


# Tolerated spellings seen in model output; canonical enum value on the right.
_CATEGORY_ALIASES = {
    "perception": Category.PERCEPTION,
    "spatialreasoning": Category.SPATIAL_REASONING,
    "spatial reasoning": Category.SPATIAL_REASONING,
    "spatial_reasoning": Category.SPATIAL_REASONING,
    "affordancereasoning": Category.AFFORDANCE_REASONING,
    "affordance reasoning": Category.AFFORDANCE_REASONING,
    "affordance_reasoning": Category.AFFORDANCE_REASONING,
    "anomalydetection": Category.ANOMALY_DETECTION,
    "anomaly detection": Category.ANOMALY_DETECTION,
    "anomaly_detection": Category.ANOMALY_DETECTION,
    "falsepremiserejection": Category.FALSE_PREMISE_REJECTION,
    "false premise rejection": Category.FALSE_PREMISE_REJECTION,
    "false_premise_rejection": Category.FALSE_PREMISE_REJECTION,
}


def parse_category(value: str) -> Category:
    try:
        return Category(value)
    except ValueError:
        alias = _CATEGORY_ALIASES.get(str(value).strip().lower())
        if alias is None:
            raise InvalidRecord(f"unknown category: {value!r}") from None
        return alias


class QType(str, Enum):
    SINGLE_CHOICE = "single_choice"
    MULTI_SELECT = "multi_select"
    OPEN_ENDED = "open_ended"


OPTION_LETTERS = ("A", "B", "C", "D")


# ---------------------------------------------------------------------------
# Supervision-target value types
# ---------------------------------------------------------------------------

_EDGE_RE = re.compile(r"\A(.*?)--(.*?)-->(.*)\Z", re.DOTALL)
_STEP_RE = re.compile(r"\A\[([^\]]+)\]: (.*)\Z", re.DOTALL)


@dataclass(frozen=True)
class Triplet:
    """One scene-graph edge: head entity, relation predicate, tail entity.

    Slots are stored trimmed.  "--" is forbidden inside a slot because it is
    the edge-string delimiter and would break round-tripping.
    """

    head: str
    relation: str
    tail: str

    def __post_init__(self):
        for slot in ("head", "relation", "tail"):
            value = getattr(self, slot)
            if not isinstance(value, str):
                raise BadEdgeSyntax(f"{slot}={value!r}")
            trimmed = value.strip()
            if not trimmed or "--" in trimmed:
                raise BadEdgeSyntax(f"{slot}={value!r}")
            if trimmed != value:
                object.__setattr__(self, slot, trimmed)

    @classmethod
    def from_edge(cls, raw_edge: str) -> "Triplet":
        if not isinstance(raw_edge, str):
            raise BadEdgeSyntax(repr(raw_edge))
        m = _EDGE_RE.match(raw_edge)
        if m is None:
            raise BadEdgeSyntax(raw_edge)
        head, relation, tail = (g.strip() for g in m.groups())
        if not head or not relation or not tail:
            raise BadEdgeSyntax(raw_edge)
        return cls(head, relation, tail)

    def to_edge(self) -> str:
        return f"{self.head} --{self.relation}--> {self.tail}"


@dataclass(frozen=True)
class StagedStep:
    """One reasoning-chain step, serialized as "[<Stage>]: <text>"."""

    stage: Stage
    text: str

    def __post_init__(self):
        if not isinstance(self.stage, Stage):
            object.__setattr__(self, "stage", Stage(self.stage))
        if not isinstance(self.text, str) or not self.text.strip():
            raise MalformedSyntax(f"empty step text for stage {self.stage}")

    @classmethod
    def from_string(cls, raw: str) -> "StagedStep":
        if not isinstance(raw, str):
            raise MalformedSyntax(f"step is not a string: {raw!r}")
        m = _STEP_RE.match(raw)
        if m is None:
            raise MalformedSyntax(f"step does not look like '[Stage]: text': {raw!r}")
        tag, text = m.groups()
        try:
            stage = Stage(tag)
        except ValueError:
            raise StagesOutOfOrder(f"unknown stage tag: {tag!r}") from None
        return cls(stage, text)

    def serialize(self) -> str:
        return f"[{self.stage.value}]: {self.text}"


@dataclass(frozen=True)
class StructuredAnnotation:
    """The four supervision fields of one sample."""

    key_objects: tuple[str, ...]
    scene_graph: tuple[Triplet, ...]
    reasoning_chain: tuple[StagedStep, ...]
    answer: str

    def __post_init__(self):
        object.__setattr__(self, "key_objects", tuple(self.key_objects))
        object.__setattr__(self, "scene_graph", tuple(self.scene_graph))
        object.__setattr__(self, "reasoning_chain", tuple(self.reasoning_chain))
        if not self.key_objects:
            raise MissingField("key_objects")
        for entity in self.key_objects:
            if not isinstance(entity, str) or not entity.strip():
                raise MalformedSyntax(f"empty entity in key_objects: {entity!r}")
        for edge in self.scene_graph:
            if not isinstance(edge, Triplet):
                raise MalformedSyntax(f"scene_graph entry is not a Triplet: {edge!r}")
        if len(self.reasoning_chain) != 4:
            raise WrongStageCount(len(self.reasoning_chain))
        stages = tuple(step.stage for step in self.reasoning_chain)
        if stages != STAGE_ORDER:
            raise StagesOutOfOrder(f"stages are {[s.value for s in stages]}")
        if not isinstance(self.answer, str):
            raise MalformedSyntax(f"answer is not a string: {self.answer!r}")

    @property
    def conclusion(self) -> StagedStep:
        return self.reasoning_chain[3]

    def to_dict(self) -> dict[str, Any]:
        return {
            "key_objects": list(self.key_objects),
            "scene_graph": [t.to_edge() for t in self.scene_graph],
            "reasoning_chain": [s.serialize() for s in self.reasoning_chain],
            "answer": self.answer,
        }


# ---------------------------------------------------------------------------
# Parse / render / consistency
# ---------------------------------------------------------------------------

_ALLOWED_KEYS = frozenset(FIELD_ORDER)


def parse_annotation(raw: str, answer: str | None = None) -> StructuredAnnotation:
    """Parse a strict-JSON annotation into a validated StructuredAnnotation.

    The input must be a single JSON object with keys key_objects, scene_graph,
    reasoning_chain and (usually) answer; anything else is rejected.  Field
    generators are allowed to omit "answer" because they are handed the ground
    truth, so callers that know the answer can supply it via the ``answer``
    argument; an explicit "answer" key always wins.
    """
    try:
        obj = json.loads(raw)
    except (json.JSONDecodeError, TypeError) as exc:
        raise MalformedSyntax(f"not valid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise MalformedSyntax(f"expected a JSON object, got {type(obj).__name__}")
    extra = set(obj) - _ALLOWED_KEYS
    if extra:
        raise MalformedSyntax(f"unexpected key(s): {sorted(extra)}")
    for name in ("key_objects", "scene_graph", "reasoning_chain"):
        if name not in obj:
            raise MissingField(name)

    key_objects = obj["key_objects"]
    if not isinstance(key_objects, list):
        raise MalformedSyntax("key_objects must be a list of strings")

    raw_edges = obj["scene_graph"]
    if not isinstance(raw_edges, list):
        raise MalformedSyntax("scene_graph must be a list of edge strings")
    scene_graph = tuple(Triplet.from_edge(edge) for edge in raw_edges)

    raw_chain = obj["reasoning_chain"]
    if not isinstance(raw_chain, list):
        raise MalformedSyntax("reasoning_chain must be a list of step strings")
    if len(raw_chain) != 4:
        raise WrongStageCount(len(raw_chain))
    chain = tuple(StagedStep.from_string(step) for step in raw_chain)

    if "answer" in obj:
        final_answer = obj["answer"]
    elif answer is not None:
        final_answer = answer
    else:
        raise MissingField("answer")

    return StructuredAnnotation(tuple(key_objects), scene_graph, chain, final_answer)


@dataclass(frozen=True)
class FieldSpanTable:
    """Half-open [start, end) byte spans of the four fields in a rendered target.

    Spans are contiguous and tile the whole serialization: end of one field is
    the start of the next, the first span starts at byte 0 and the last ends
    at the total byte length.
    """

    key_objects: tuple[int, int]
    scene_graph: tuple[int, int]
    reasoning_chain: tuple[int, int]
    answer: tuple[int, int]

    def span(self, field: str) -> tuple[int, int]:
        if field not in FIELD_ORDER:
            raise KeyError(field)
        return getattr(self, field)

    def end_of(self, field: str) -> int:
        return self.span(field)[1]

    @property
    def total_bytes(self) -> int:
        return self.answer[1]

    def ordered(self) -> Iterator[tuple[str, tuple[int, int]]]:
        for field in FIELD_ORDER:
            yield field, self.span(field)

    def to_dict(self) -> dict[str, list[int]]:
        return {field: list(span) for field, span in self.ordered()}

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "FieldSpanTable":
        return cls(**{field: tuple(obj[field]) for field in FIELD_ORDER})


def _jtext(value: Any) -> str:
    return json.dumps(value, ensure_ascii=False, separators=(", ", ": "))


def render_target(a: StructuredAnnotation) -> tuple[str, FieldSpanTable]:
    """Serialize an annotation to its canonical single-line form plus byte spans.

    The output is valid JSON and parse_annotation(render_target(a)[0]) == a.
    """
    segments = (
        '{"key_objects": ' + _jtext(list(a.key_objects)) + ", ",
        '"scene_graph": ' + _jtext([t.to_edge() for t in a.scene_graph]) + ", ",
        '"reasoning_chain": ' + _jtext([s.serialize() for s in a.reasoning_chain]) + ", ",
        '"answer": ' + _jtext(a.answer) + "}",
    )
    spans = []
    cursor = 0
    for segment in segments:
        end = cursor + len(segment.encode("utf-8"))
        spans.append((cursor, end))
        cursor = end
    return "".join(segments), FieldSpanTable(*spans)


ENTITY_NOT_IN_KEY_OBJECTS = "entity_not_in_key_objects"
CONCLUSION_ANSWER_MISMATCH = "conclusion_answer_mismatch"


@dataclass(frozen=True)
class Flag:
    kind: str
    detail: str


_CHOICE_ANSWER_RE = re.compile(r"\A[A-D](?:\s*,\s*[A-D])*\Z")


def choice_letters(answer: str) -> tuple[str, ...] | None:
    """Letters of a choice-shaped answer ("A", "A,C"), or None for free text."""
    stripped = answer.strip()
    if not _CHOICE_ANSWER_RE.match(stripped):
        return None
    return tuple(part.strip() for part in stripped.split(","))


def _contains_letter(text: str, letter: str) -> bool:
    # Standalone uppercase letter only; lowercase would collide with the
    # article "a" in ordinary prose.
    return re.search(rf"(?<![A-Za-z0-9]){letter}(?![A-Za-z0-9])", text) is not None


def validate_consistency(a: StructuredAnnotation, gt_answer: str) -> list[Flag]:
    """Structural cross-field checks; semantic entailment is a judge concern.

    Flags every scene-graph entity missing from key_objects (compared after
    trim + casefold) and, for letter-shaped ground truths, a Conclusion step
    that does not contain the answer letter(s).
    """
    flags: list[Flag] = []
    known = {entity.strip().casefold() for entity in a.key_objects}
    seen: set[str] = set()
    for edge in a.scene_graph:
        for entity in (edge.head, edge.tail):
            folded = entity.strip().casefold()
            if folded not in known and folded not in seen:
                seen.add(folded)
                flags.append(Flag(ENTITY_NOT_IN_KEY_OBJECTS, entity))
    letters = choice_letters(gt_answer)
    if letters is not None:
        conclusion_text = a.conclusion.text
        if not all(_contains_letter(conclusion_text, letter) for letter in letters):
            flags.append(Flag(CONCLUSION_ANSWER_MISMATCH, gt_answer))
    return flags


# ---------------------------------------------------------------------------
# Question records and the benchmark sample file
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuestionRecord:
    """One benchmark question with its answer and lifecycle-relevant metadata."""

    id: str
    source: Source
    category: Category
    qtype: QType
    question: str
    options: tuple[tuple[str, str], ...] | None
    answer: str
    image_ref: str

    def __post_init__(self):
        if not self.id or not isinstance(self.id, str):
            raise InvalidRecord("id must be a nonempty string")
        if not isinstance(self.question, str) or not self.question.strip():
            raise InvalidRecord(f"{self.id}: empty question")
        if self.options is not None:
            object.__setattr__(self, "options", tuple(tuple(pair) for pair in self.options))
        self._check_options_and_answer()

    def _check_options_and_answer(self):
        if self.qtype is QType.OPEN_ENDED:
            if self.options is not None:
                raise InvalidRecord(f"{self.id}: open_ended question must not carry options")
            if not self.answer.strip():
                raise InvalidRecord(f"{self.id}: empty answer")
            return
        if not self.options:
            raise InvalidRecord(f"{self.id}: {self.qtype.value} question requires options")
        letters = [letter for letter, _ in self.options]
        if letters != list(OPTION_LETTERS[: len(letters)]):
            raise InvalidRecord(f"{self.id}: option letters must be A.. in order, got {letters}")
        for letter, text in self.options:
            if not isinstance(text, str) or not text.strip():
                raise InvalidRecord(f"{self.id}: empty option text for {letter}")
        answer_letters = choice_letters(self.answer)
        if answer_letters is None:
            raise InvalidRecord(f"{self.id}: answer {self.answer!r} is not a letter sequence")
        if self.answer != ",".join(answer_letters):
            raise InvalidRecord(f"{self.id}: answer must be canonical letters, got {self.answer!r}")
        if any(letter not in letters for letter in answer_letters):
            raise InvalidRecord(f"{self.id}: answer letter outside options")
        if self.qtype is QType.SINGLE_CHOICE and len(answer_letters) != 1:
            raise InvalidRecord(f"{self.id}: single_choice answer must be one letter")
        if self.qtype is QType.MULTI_SELECT:
            if list(answer_letters) != sorted(set(answer_letters)):
                raise InvalidRecord(f"{self.id}: multi_select letters must be ascending and unique")

    @property
    def options_map(self) -> dict[str, str]:
        return dict(self.options or ())

    @staticmethod
    def normalize_answer(qtype: QType, raw: str) -> str:
        """Canonicalize a letter answer ("c , a" -> "A,C"); free text passes through."""
        if qtype is QType.OPEN_ENDED:
            return raw.strip()
        letters = sorted({part.strip().upper() for part in raw.split(",") if part.strip()})
        return ",".join(letters)

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "QuestionRecord":
        try:
            qtype = QType(obj["qtype"])
            options = obj.get("options")
            options_t = tuple(sorted(options.items())) if options else None
            return cls(
                id=obj["id"],
                source=Source(obj["source"]),
                category=parse_category(obj["category"]),
                qtype=qtype,
                question=obj["question"],
                options=options_t,
                answer=obj["answer"],
                image_ref=obj["image_ref"],
            )
        except KeyError as exc:
            raise InvalidRecord(f"missing record field: {exc.args[0]}") from None
        except ValueError as exc:
            if isinstance(exc, InvalidRecord):
                raise
            raise InvalidRecord(str(exc)) from None

    def to_dict(self) -> dict[str, Any]:
        obj: dict[str, Any] = {
            "id": self.id,
            "source": self.source.value,
            "category": self.category.value,
            "qtype": self.qtype.value,
            "question": self.question,
        }
        if self.options is not None:
            obj["options"] = dict(self.options)
        obj["answer"] = self.answer
        obj["image_ref"] = self.image_ref
        return obj


@dataclass(frozen=True)
class DatasetSample:
    """A question record plus its optional gold structured annotation."""

    record: QuestionRecord
    annotation: StructuredAnnotation | None = None

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "DatasetSample":
        record = QuestionRecord.from_dict(obj)
        annotation = None
        if all(key in obj for key in ("key_objects", "scene_graph", "reasoning_chain")):
            annotation = parse_annotation(
                json.dumps(
                    {
                        "key_objects": obj["key_objects"],
                        "scene_graph": obj["scene_graph"],
                        "reasoning_chain": obj["reasoning_chain"],
                    }
                ),
                answer=record.answer,
            )
        return cls(record, annotation)

    def to_dict(self) -> dict[str, Any]:
        obj = self.record.to_dict()
        if self.annotation is not None:
            ann = self.annotation.to_dict()
            obj["key_objects"] = ann["key_objects"]
            obj["scene_graph"] = ann["scene_graph"]
            obj["reasoning_chain"] = ann["reasoning_chain"]
        return obj


def load_samples(path: str | Path) -> list[DatasetSample]:
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                samples.append(DatasetSample.from_dict(json.loads(line)))
            except (json.JSONDecodeError, AnnotationError, InvalidRecord) as exc:
                raise InvalidRecord(f"{path}:{line_no}: {exc}") from None
    return samples


def dump_samples(samples: Iterable[DatasetSample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sample in samples:
            fh.write(json.dumps(sample.to_dict(), ensure_ascii=False) + "\n")
