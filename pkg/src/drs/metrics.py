"""Evaluation metrics: letter accuracy, judge-based open-ended accuracy,
scene-graph F1 via optimal soft triplet matching, and reasoning validity.

Soft matching: each triplet slot is compared by the Dice coefficient of its
case-folded word sets, triplet similarity is the mean over the three slots,
and pairs at or above the threshold enter an exact maximum-cardinality
assignment (ties broken toward larger total similarity).  The similarity
function and threshold are deliberate, configurable choices; nothing here
depends on external embeddings.
"""

from __future__ import annotations

import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

from . import prompts, provider
from .assignment import max_weight_assignment
from .schema import (
    AnnotationError,
    Category,
    DatasetSample,
    QType,
    QuestionRecord,
    StagedStep,
    StructuredAnnotation,
    Triplet,
    choice_letters,
    parse_annotation,
)


class MetricsError(ValueError):
    pass


class UnknownQuestionId(MetricsError):
    pass


class JudgeUnavailable(RuntimeError):
    pass


class MalformedJudgeReply(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Choice scoring
# ---------------------------------------------------------------------------

_LEAD_LETTER_RE = re.compile(r"\A\s*([A-D])\s*(?:[.)]|\Z)")


def extract_letters(text: str, qtype: QType) -> str | None:
    """Canonical letter answer recovered from model output, or None.

    Handles comma lists in any case/spacing and, for free-text replies, a
    leading standalone capital letter followed by '.', ')' or end of string
    ("A. 1 car" -> "A").
    """
    upper = text.strip().upper()
    parts = [part.strip() for part in upper.split(",")]
    if parts and all(len(p) == 1 and p in "ABCD" for p in parts):
        if qtype is QType.SINGLE_CHOICE and len(parts) != 1:
            return None
        return ",".join(sorted(set(parts)))
    m = _LEAD_LETTER_RE.match(text.strip())
    if m:
        return m.group(1)
    return None


def score_choice(pred: str, gold: str, qtype: QType) -> bool:
    """Exact letter-set match after normalization; unparsable scores False."""
    pred_letters = extract_letters(pred, qtype)
    gold_letters = extract_letters(gold, qtype)
    return pred_letters is not None and pred_letters == gold_letters


# ---------------------------------------------------------------------------
# Judge-backed scoring
# ---------------------------------------------------------------------------


def _ask_judge(judge: provider.ProviderHandle, system: str, user: str, schema: Any, key: str) -> bool:
    try:
        reply = provider.complete(judge, provider.ChatRequest(system=system, user=user, schema=schema))
    except provider.MalformedReply as exc:
        raise MalformedJudgeReply(str(exc)) from exc
    except provider.ProviderError as exc:
        raise JudgeUnavailable(str(exc)) from exc
    return bool(reply.parsed[key])


def score_open_ended(
    question: str, ref: str, cand: str, judge: provider.ProviderHandle, question_id: str = ""
) -> bool:
    """Judge-decided semantic match; byte-equal answers skip the judge."""
    if cand == ref:
        return True
    system, user = prompts.answer_judge(question_id, question, ref, cand)
    return _ask_judge(judge, system, user, prompts.SIMILAR_REPLY_SCHEMA, "similar")


def reasoning_validity(
    chain: Sequence[StagedStep], gold_answer: str, judge: provider.ProviderHandle
) -> bool:
    """Whether the chain's conclusion entails the gold answer.

    Empty chains are invalid without a judge call; a conclusion containing the
    gold letter(s) of a choice question short-circuits to True.
    """
    if not chain:
        return False
    conclusion = chain[-1].text
    letters = choice_letters(gold_answer)
    if letters is not None and all(
        re.search(rf"(?<![A-Za-z0-9]){letter}(?![A-Za-z0-9])", conclusion) for letter in letters
    ):
        return True
    chain_text = "\n".join(step.serialize() for step in chain)
    system, user = prompts.entailment_judge(chain_text, gold_answer)
    return _ask_judge(judge, system, user, prompts.ENTAILS_REPLY_SCHEMA, "entails")


# ---------------------------------------------------------------------------
# Scene-graph F1
# ---------------------------------------------------------------------------


def _word_set(text: str) -> frozenset[str]:
    return frozenset(text.casefold().split())


def _dice(a: frozenset[str], b: frozenset[str]) -> float:
    if not a and not b:
        return 1.0
    if not a or not b:
        return 0.0
    return 2.0 * len(a & b) / (len(a) + len(b))


def triplet_similarity(pred: Triplet, gold: Triplet) -> float:
    """Mean Dice coefficient over the head/relation/tail word sets."""
    return (
        _dice(_word_set(pred.head), _word_set(gold.head))
        + _dice(_word_set(pred.relation), _word_set(gold.relation))
        + _dice(_word_set(pred.tail), _word_set(gold.tail))
    ) / 3.0


@dataclass(frozen=True)
class SceneGraphScore:
    precision: float
    recall: float
    f1: float
    matched: int
    total_similarity: float


def scene_graph_f1(
    pred: Sequence[Triplet], gold: Sequence[Triplet], tau: float = 0.5
) -> SceneGraphScore:
    """Precision/recall/F1 of the optimal one-to-one soft matching.

    Eligible pairs have similarity >= tau; the assignment maximizes matched
    count first and total similarity second.  Two empty graphs score 1.0
    (vacuously perfect); one empty side scores 0.
    """
    if not 0.0 < tau <= 1.0:
        raise MetricsError(f"tau must be in (0, 1], got {tau}")
    if not pred and not gold:
        return SceneGraphScore(1.0, 1.0, 1.0, 0, 0.0)
    if not pred or not gold:
        return SceneGraphScore(0.0, 0.0, 0.0, 0, 0.0)
    sims = [[triplet_similarity(p, g) for g in gold] for p in pred]
    # Big-M weighting makes maximum cardinality dominate; the similarity term
    # (< M in total) then breaks ties toward the most similar matching.
    big_m = float(min(len(pred), len(gold)) + 1)
    weights = [
        [big_m + sims[i][j] if sims[i][j] >= tau else 0.0 for j in range(len(gold))]
        for i in range(len(pred))
    ]
    pairs = [(i, j) for i, j in max_weight_assignment(weights) if sims[i][j] >= tau]
    matched = len(pairs)
    precision = matched / len(pred)
    recall = matched / len(gold)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return SceneGraphScore(precision, recall, f1, matched, sum(sims[i][j] for i, j in pairs))


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Prediction:
    question_id: str
    raw_answer: str
    structured: StructuredAnnotation | None = None

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "Prediction":
        structured = None
        if obj.get("structured"):
            try:
                structured = parse_annotation(
                    json.dumps(obj["structured"]), answer=obj["structured"].get("answer", "")
                )
            except AnnotationError:
                structured = None  # an unparsable schema simply scores as absent
        return cls(obj["question_id"], obj.get("raw_answer", ""), structured)


def load_predictions(path: str | Path) -> list[Prediction]:
    preds = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                preds.append(Prediction.from_dict(json.loads(line)))
    return preds


@dataclass(frozen=True)
class EvalReport:
    per_category: dict[str, float]
    mcq_letter_acc: float
    open_ended_acc: float
    combined_acc: float
    scene_graph_f1: float
    reasoning_validity: float
    counts: dict[str, int]
    flagged: tuple[tuple[str, str], ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "per_category": dict(self.per_category),
            "mcq_letter_acc": self.mcq_letter_acc,
            "open_ended_acc": self.open_ended_acc,
            "combined_acc": self.combined_acc,
            "scene_graph_f1": self.scene_graph_f1,
            "reasoning_validity": self.reasoning_validity,
            "counts": dict(self.counts),
            "flagged": [list(pair) for pair in self.flagged],
        }


_CATEGORY_COLUMNS = (
    (Category.PERCEPTION, "Percept."),
    (Category.SPATIAL_REASONING, "Spatial"),
    (Category.AFFORDANCE_REASONING, "Afford."),
    (Category.ANOMALY_DETECTION, "Anomaly"),
    (Category.FALSE_PREMISE_REJECTION, "FPR."),
)


def render_report(report: EvalReport, name: str = "model") -> str:
    """Two fixed-layout tables: MCQ-L / OE / Comb., then the five categories."""
    def pct(x: float) -> str:
        return f"{100.0 * x:5.1f}"

    lines = [
        f"{'Model':<20} {'MCQ-L':>7} {'OE':>7} {'Comb.':>7}",
        f"{name:<20} {pct(report.mcq_letter_acc):>7} {pct(report.open_ended_acc):>7} "
        f"{pct(report.combined_acc):>7}",
        "",
        f"{'Model':<20} " + " ".join(f"{label:>8}" for _, label in _CATEGORY_COLUMNS) + f" {'Overall':>8}",
        f"{name:<20} "
        + " ".join(f"{pct(report.per_category.get(cat.value, 0.0)):>8}" for cat, _ in _CATEGORY_COLUMNS)
        + f" {pct(report.combined_acc):>8}",
        "",
        f"Scene Graph F1: {pct(report.scene_graph_f1).strip()}   "
        f"Reasoning Validity: {pct(report.reasoning_validity).strip()}",
    ]
    return "\n".join(lines)


def aggregate(
    predictions: Sequence[Prediction],
    records: Iterable[DatasetSample | QuestionRecord],
    judge: provider.ProviderHandle | None,
    *,
    tau: float = 0.5,
    judge_concurrency: int = 8,
) -> EvalReport:
    """Score every prediction against its record and fill the report.

    Scene-graph F1 is macro-averaged over predictions whose record carries a
    gold scene graph (a missing predicted graph scores 0); reasoning validity
    covers every prediction, with a missing chain counting as invalid.
    """
    samples: dict[str, DatasetSample] = {}
    for item in records:
        sample = item if isinstance(item, DatasetSample) else DatasetSample(item)
        samples[sample.record.id] = sample
    for pred in predictions:
        if pred.question_id not in samples:
            raise UnknownQuestionId(pred.question_id)

    flagged: list[tuple[str, str]] = []
    correct: dict[str, bool] = {}
    choice_preds = [p for p in predictions if samples[p.question_id].record.qtype is not QType.OPEN_ENDED]
    open_preds = [p for p in predictions if samples[p.question_id].record.qtype is QType.OPEN_ENDED]

    for pred in choice_preds:
        record = samples[pred.question_id].record
        source = pred.raw_answer
        if pred.structured is not None and pred.structured.answer.strip():
            source = pred.structured.answer
        if extract_letters(source, record.qtype) is None:
            flagged.append((pred.question_id, "unparsable letters"))
        correct[pred.question_id] = score_choice(source, record.answer, record.qtype)

    def _score_open(pred: Prediction) -> bool:
        record = samples[pred.question_id].record
        answer = pred.raw_answer
        if pred.structured is not None and pred.structured.answer.strip():
            answer = pred.structured.answer
        if judge is None:
            if answer == record.answer:
                return True
            flagged.append((pred.question_id, "no judge configured"))
            return False
        try:
            return score_open_ended(record.question, record.answer, answer, judge, record.id)
        except (JudgeUnavailable, MalformedJudgeReply) as exc:
            flagged.append((pred.question_id, f"judge failure: {exc}"))
            return False

    def _score_validity(pred: Prediction) -> bool:
        record = samples[pred.question_id].record
        chain = pred.structured.reasoning_chain if pred.structured else ()
        if not chain:
            return False
        if judge is None:
            letters = choice_letters(record.answer)
            contained = letters is not None and all(
                re.search(rf"(?<![A-Za-z0-9]){letter}(?![A-Za-z0-9])", chain[-1].text)
                for letter in letters
            )
            if contained:
                return True
            flagged.append((pred.question_id, "no judge configured"))
            return False
        try:
            return reasoning_validity(chain, record.answer, judge)
        except (JudgeUnavailable, MalformedJudgeReply) as exc:
            flagged.append((pred.question_id, f"judge failure: {exc}"))
            return False

    with ThreadPoolExecutor(max_workers=max(1, judge_concurrency)) as pool:
        open_results = list(pool.map(_score_open, open_preds))
        validity_results = list(pool.map(_score_validity, predictions))
    for pred, ok in zip(open_preds, open_results):
        correct[pred.question_id] = ok

    n_mcq, n_oe = len(choice_preds), len(open_preds)
    mcq_acc = sum(correct[p.question_id] for p in choice_preds) / n_mcq if n_mcq else 0.0
    oe_acc = sum(correct[p.question_id] for p in open_preds) / n_oe if n_oe else 0.0
    combined = (n_mcq * mcq_acc + n_oe * oe_acc) / (n_mcq + n_oe) if n_mcq + n_oe else 0.0

    per_category: dict[str, float] = {}
    for category in Category:
        members = [p for p in predictions if samples[p.question_id].record.category is category]
        per_category[category.value] = (
            sum(correct[p.question_id] for p in members) / len(members) if members else 0.0
        )

    sg_scores = []
    for pred in predictions:
        gold_ann = samples[pred.question_id].annotation
        if gold_ann is None or not gold_ann.scene_graph:
            continue
        pred_graph = pred.structured.scene_graph if pred.structured else ()
        sg_scores.append(scene_graph_f1(pred_graph, gold_ann.scene_graph, tau).f1)
    sg_f1 = sum(sg_scores) / len(sg_scores) if sg_scores else 0.0

    validity = sum(validity_results) / len(predictions) if predictions else 0.0

    counts = {
        QType.SINGLE_CHOICE.value: sum(
            1 for p in predictions if samples[p.question_id].record.qtype is QType.SINGLE_CHOICE
        ),
        QType.MULTI_SELECT.value: sum(
            1 for p in predictions if samples[p.question_id].record.qtype is QType.MULTI_SELECT
        ),
        QType.OPEN_ENDED.value: n_oe,
    }
    return EvalReport(
        per_category=per_category,
        mcq_letter_acc=mcq_acc,
        open_ended_acc=oe_acc,
        combined_acc=combined,
        scene_graph_f1=sg_f1,
        reasoning_validity=validity,
        counts=counts,
        flagged=tuple(flagged),
    )
