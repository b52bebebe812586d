"""Prompt templates and strict-JSON reply schemas for every provider call.

Each request body embeds the question/record id so scripted mocks can match
calls per item regardless of processing order.
"""

from __future__ import annotations

import json
from typing import Any

from .schema import QuestionRecord, QType

# ---------------------------------------------------------------------------
# Reply schemas (jsonschema)
# ---------------------------------------------------------------------------

QUESTIONS_REPLY_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["questions"],
    "additionalProperties": False,
    "properties": {
        "questions": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "type", "category", "question", "answer"],
                "properties": {
                    "id": {"type": ["string", "integer"]},
                    "type": {"type": "string"},
                    "category": {"type": "string"},
                    "question": {"type": "string"},
                    "options": {"type": ["object", "null"]},
                    "answer": {"type": "string"},
                },
            },
        }
    },
}

BLIND_ANSWER_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["answer"],
    "additionalProperties": False,
    "properties": {"answer": {"type": "string"}},
}

SIMILAR_REPLY_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["similar"],
    "additionalProperties": False,
    "properties": {"similar": {"type": "boolean"}},
}

ENTAILS_REPLY_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["entails"],
    "additionalProperties": False,
    "properties": {"entails": {"type": "boolean"}},
}

SCENE_SUMMARY_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["room_type", "scene_summary", "camera_tilt"],
    "additionalProperties": False,
    "properties": {
        "room_type": {"type": "string", "minLength": 1},
        "scene_summary": {"type": "string", "minLength": 1},
        "camera_tilt": {"enum": ["none", "slight", "strong"]},
    },
}

SCENE_FILTER_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["results"],
    "additionalProperties": False,
    "properties": {
        "results": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["id", "bad_question", "reason"],
                "properties": {
                    "id": {"type": "string"},
                    "bad_question": {"type": "boolean"},
                    "reason": {"type": "string"},
                },
            },
        }
    },
}

REVERIFY_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["results"],
    "additionalProperties": False,
    "properties": {
        "results": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["id", "bad_question", "is_modified", "reason"],
                "properties": {
                    "id": {"type": "string"},
                    "bad_question": {"type": "boolean"},
                    "is_modified": {"type": "boolean"},
                    "question": {"type": "string"},
                    "answer": {"type": "string"},
                    "options": {"type": ["object", "null"]},
                    "reason": {"type": "string"},
                },
            },
        }
    },
}

FIELD_GEN_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["key_objects", "scene_graph", "reasoning_chain"],
    "additionalProperties": False,
    "properties": {
        "key_objects": {"type": "array", "items": {"type": "string"}},
        "scene_graph": {"type": "array", "items": {"type": "string"}},
        "reasoning_chain": {"type": "array", "items": {"type": "string"}},
        "answer": {"type": "string"},
    },
}

VERIFY_REPLY_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["pass"],
    "additionalProperties": False,
    "properties": {
        "pass": {"type": "boolean"},
        "feedback": {"type": "string"},
        "hint": {"type": "string"},
    },
}


# ---------------------------------------------------------------------------
# Templates
# ---------------------------------------------------------------------------

_CATEGORY_RULES = """Each question belongs to exactly one category:
1. Perception - attribute of an entity reached through a multi-hop referring chain; single_choice or multi_select.
2. SpatialReasoning - spatial layout discovered from the scene, optionally with simple physics.
3. AffordanceReasoning - how objects are used in this scene's context, driven by object relationships.
4. AnomalyDetection - unsafe or out-of-place arrangements, grounded in visible evidence.
5. FalsePremiseRejection - ask about a plausible but absent object/relation as if present, anchored to visible referents; the answer must reject the premise from evidence. No hypothetical phrasing."""

_QUALITY_RULES = """Rules:
- Anchor only on large, clearly visible objects; answers must be uniquely supported by visible evidence.
- Never ask anything answerable by common sense without the image; distractors must be excludable visually.
- Prefer multi-hop spatial referring chains in the question text.
- Question "type" is one of: single_choice, multi_select, open_ended. Choice questions carry an "options" map with letters A..D; answers are the letter(s), multi_select letters ascending like "A,C".
Output strict JSON only, no markdown, shaped as:
{"questions": [{"id", "type", "category", "question", "options", "answer"}, ...]}"""


def question_generation(image_ref: str, source: str) -> tuple[str, str]:
    """(system, user) for the per-image question generation call."""
    if source == "hypersim":
        system = (
            "You are an expert multimodal reasoning annotator for dense indoor scenes. "
            "Generate exactly 15 reasoning questions about the given image, "
            "at least 2 per category and at least 4 open_ended.\n\n"
            + _CATEGORY_RULES
            + "\n\n"
            + _QUALITY_RULES
        )
    else:
        system = (
            "You are an expert multimodal reasoning annotator for urban driving scenes. "
            "Generate 8-10 reasoning questions about the given dash-cam image, covering "
            "the categories below. Skip targets that are too small, ambiguous, or "
            "unclear in color.\n\n" + _CATEGORY_RULES + "\n\n" + _QUALITY_RULES
        )
    return system, f"Image: {image_ref}\nGenerate the questions now."


def _options_block(record: QuestionRecord) -> str:
    if not record.options:
        return ""
    lines = [f"{letter}. {text}" for letter, text in record.options]
    return "Options:\n" + "\n".join(lines) + "\n"


_BLIND_FORMAT = {
    QType.SINGLE_CHOICE: 'exactly one letter among the options, e.g. {"answer": "B"}',
    QType.MULTI_SELECT: 'comma-separated letters, ascending, no spaces, e.g. {"answer": "A,C"}',
    QType.OPEN_ENDED: 'a short precise English phrase, e.g. {"answer": "white"}',
}


def blind_answer(record: QuestionRecord) -> tuple[str, str]:
    """(system, user) asking a text-only model to answer without the image."""
    system = (
        "You are answering a visual question WITHOUT seeing the image. Use only the "
        "question text and options; pick the most likely answer anyway. "
        f"Output strict JSON with a single field, {_BLIND_FORMAT[record.qtype]}. "
        "Nothing outside the JSON object."
    )
    user = f"Question id: {record.id}\n{record.question}\n{_options_block(record)}"
    return system, user


def answer_judge(question_id: str, question: str, reference: str, candidate: str) -> tuple[str, str]:
    """(system, user) asking the judge whether two answers mean the same thing."""
    system = (
        "You decide whether two answers to the same visual question are semantically "
        'equivalent. Output strict JSON only: {"similar": true} when they mean the '
        'same or nearly the same, {"similar": false} otherwise. Nothing outside the JSON.'
    )
    user = (
        f"Question id: {question_id}\n"
        f"Question: {question}\n"
        f"Reference answer: {reference}\n"
        f"Candidate answer: {candidate}\n"
    )
    return system, user


def entailment_judge(chain_text: str, gold_answer: str) -> tuple[str, str]:
    """(system, user) asking whether a reasoning chain entails the gold answer."""
    system = (
        "You check whether a step-by-step reasoning chain logically entails a given "
        'ground-truth answer. Output strict JSON only: {"entails": true} or '
        '{"entails": false}. Nothing outside the JSON.'
    )
    user = f"Reasoning chain:\n{chain_text}\n\nGround-truth answer: {gold_answer}\n"
    return system, user


def scene_summary(image_ref: str) -> tuple[str, str]:
    """(system, user) for the room-type/scene summary call (vision)."""
    system = (
        "You identify the TYPE of scene or room in the image. Do not enumerate objects; "
        "mentally re-level a tilted photo first. Output strict JSON only:\n"
        '{"room_type": "<short phrase>", "scene_summary": "<1-2 sentences>", '
        '"camera_tilt": "none" | "slight" | "strong"}'
    )
    return system, f"Image: {image_ref}"


def scene_context_filter(record: QuestionRecord, room_type: str, summary: str) -> tuple[str, str]:
    """(system, user) for the text-only scene-plausibility filter."""
    system = (
        "You are a strict text-only reviewer; you do NOT see the image. Decide from "
        "common sense whether the question is clearly bad for this kind of scene. "
        "Delete only when it plainly presupposes an object that does not belong in the "
        "scene, relies on physical or numeric inference a photo cannot support, or "
        "contradicts its own options/answer. Otherwise keep it for visual review. "
        'Output strict JSON only: {"results": [{"id", "bad_question", "reason"}]}'
    )
    user = (
        f"Scene type: {room_type}\nScene summary: {summary}\n\n"
        f"Item id: {record.id}\nQuestion: {record.question}\n"
        f"{_options_block(record)}Answer: {record.answer}\n"
    )
    return system, user


def visual_reverify(record: QuestionRecord, gt_context: str) -> tuple[str, str]:
    """(system, user) for the vision re-verification with ground-truth labels."""
    cityscapes_rules = ""
    if record.source.value == "cityscapes":
        cityscapes_rules = (
            "\nStreet-scene rules: delete or tighten the question when the target is too "
            "small or far to identify reliably, its location is ambiguous among several "
            "candidates, or its color/identity is unclear from lighting or blur."
        )
    system = (
        "You are a visual QA reviewer. The image plus the provided ground-truth "
        "annotation context are the source of truth. For the item, choose exactly one: "
        "pass unchanged (bad_question=false, is_modified=false); pass with a small fix "
        "(bad_question=false, is_modified=true, rewriting question/options/answer only); "
        "or delete (bad_question=true). Keep choice answers as letters. Never output "
        "id/type/category changes." + cityscapes_rules + "\n"
        'Output strict JSON only: {"results": [{"id", "bad_question", "is_modified", '
        '"question", "answer", "options", "reason"}]}'
    )
    user = (
        f"Ground-truth annotation context: {gt_context}\n\n"
        f"Item id: {record.id}\nQuestion: {record.question}\n"
        f"{_options_block(record)}Answer: {record.answer}\n"
    )
    return system, user


def field_generation(
    record: QuestionRecord, feedback: list[dict[str, str]] | None = None
) -> tuple[str, str]:
    """(system, user) for structured-field generation; feedback from failed rounds is appended."""
    system = (
        "You fill structured supervision fields for ONE visual QA item; the image is "
        "your perceptual ground. The given answer is the only ground truth: key_objects, "
        "scene_graph and reasoning_chain must all support exactly that answer, and "
        "distractor options may appear only inside elimination logic.\n"
        "Output strict JSON, no markdown, no extra keys:\n"
        '{"key_objects": [...], "scene_graph": ["A --pred--> B", ...], '
        '"reasoning_chain": ["[Perception]: ...", "[Relation]: ...", "[Logic]: ...", '
        '"[Conclusion]: ..."]}\n'
        "reasoning_chain: EXACTLY 4 strings, in that stage order; [Conclusion] must state "
        "the ground-truth answer (same letter(s) or phrase). scene_graph predicates are "
        "short snake_case relations (left_of, on, attached_to, ...). key_objects: the "
        "minimal task-relevant set, including every entity used in scene_graph."
    )
    user = (
        f"Item id: {record.id}\nQuestion: {record.question}\n"
        f"{_options_block(record)}Ground-truth answer: {record.answer}\n"
    )
    for i, entry in enumerate(feedback or (), start=1):
        user += f"\nReviewer feedback (round {i}): {entry['feedback']}"
        if entry.get("hint"):
            user += f"\nHint: {entry['hint']}"
    return system, user


def consistency_verify(record: QuestionRecord, annotation_json: dict[str, Any]) -> tuple[str, str]:
    """(system, user) for the text-only cross-field consistency check."""
    system = (
        "You are a strict logic reviewer for multimodal QA labels; you do NOT see the "
        "image and the given answer is always correct. Flag contradictions between "
        "scene_graph and key_objects, a [Conclusion] that does not state the answer, or "
        "distractor options treated as correct.\n"
        'Output strict JSON only: {"pass": true} or '
        '{"pass": false, "feedback": "what is wrong", "hint": "how the fields should change"}'
    )
    user = (
        f"Item id: {record.id}\nQuestion: {record.question}\n"
        f"{_options_block(record)}Ground-truth answer: {record.answer}\n\n"
        f"Proposed fields:\n{json.dumps(annotation_json, ensure_ascii=False)}\n"
    )
    return system, user
