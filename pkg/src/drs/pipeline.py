"""Benchmark construction and quality control, event-sourced and resumable.

Per-record flow:

    generate -> blind_filter -> [stage_a, indoor only] -> stage_b
             -> [stage_c, skipped for FalsePremiseRejection] -> annotate/verify
             -> human audit

Every step outcome appends Transition lines to an append-only JSONL log; the
in-memory state is only ever produced by applying those transitions, so
replaying the log reconstructs the run exactly and a resumed run continues
from the last completed step of each record.  A record interrupted inside a
step is re-processed from that step's start; provider errors park the record
for retry and never consume verification rounds.

Timestamps come from the store's clock.  Use a logical clock when every
provider is a mock to get byte-stable logs.
"""

from __future__ import annotations

import hashlib
import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

from . import prompts, provider
from .schema import (
    AnnotationError,
    Category,
    InvalidRecord,
    QType,
    QuestionRecord,
    Source,
    StructuredAnnotation,
    parse_annotation,
    validate_consistency,
)


class PipelineError(RuntimeError):
    pass


class RecordState(str, Enum):
    GENERATED = "generated"
    BLIND_CHECKED = "blind_checked"
    STAGE_A_DONE = "stageA_done"
    STAGE_B_DONE = "stageB_done"
    STAGE_C_DONE = "stageC_done"
    ANNOTATED = "annotated"
    VERIFIED = "verified"
    AUDITED = "audited"
    DISCARDED = "discarded"


RUN_RECORD_ID = "__run__"
MAX_REVISION_ROUNDS = 5

STEP_GENERATE = "generate"
STEP_GENERATE_BATCH = "generate_batch"
STEP_BLIND_FILTER = "blind_filter"
STEP_STAGE_A = "stage_a"
STEP_STAGE_B = "stage_b"
STEP_STAGE_C = "stage_c"
STEP_ANNOTATE_ROUND = "annotate_round"
STEP_ANNOTATE_VERIFY = "annotate_verify"
STEP_AUDIT = "audit"

RETENTION_STEPS = (
    STEP_GENERATE,
    STEP_BLIND_FILTER,
    STEP_STAGE_A,
    STEP_STAGE_B,
    STEP_STAGE_C,
    STEP_ANNOTATE_VERIFY,
    STEP_AUDIT,
)


def _payload_digest(payload: dict[str, Any]) -> str:
    canonical = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Transition:
    record_id: str
    seq: int
    step: str
    state: str
    timestamp: float
    actor: str
    reason: str
    payload: dict[str, Any]
    digest: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "record_id": self.record_id,
            "seq": self.seq,
            "step": self.step,
            "state": self.state,
            "timestamp": self.timestamp,
            "actor": self.actor,
            "reason": self.reason,
            "digest": self.digest,
            "payload": self.payload,
        }

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "Transition":
        return cls(
            record_id=obj["record_id"],
            seq=int(obj["seq"]),
            step=obj["step"],
            state=obj["state"],
            timestamp=float(obj["timestamp"]),
            actor=obj["actor"],
            reason=obj["reason"],
            payload=obj["payload"],
            digest=obj["digest"],
        )


@dataclass
class PipelineRecord:
    question: QuestionRecord
    state: RecordState = RecordState.GENERATED
    history: list[Transition] = field(default_factory=list)
    annotation: StructuredAnnotation | None = None
    revision_round: int = 0
    discard_reason: str = ""

    @property
    def id(self) -> str:
        return self.question.id

    def transitions(self, step: str) -> list[Transition]:
        return [t for t in self.history if t.step == step]

    def to_dict(self) -> dict[str, Any]:
        return {
            "question": self.question.to_dict(),
            "state": self.state.value,
            "revision_round": self.revision_round,
            "discard_reason": self.discard_reason,
            "annotation": self.annotation.to_dict() if self.annotation else None,
            "history": [t.to_dict() for t in self.history],
        }


def _revised_question(question: QuestionRecord, change: dict[str, Any]) -> QuestionRecord:
    obj = question.to_dict()
    for key in ("question", "answer", "options"):
        if key in change and change[key] is not None:
            obj[key] = change[key]
    if "answer" in change and change["answer"] is not None:
        obj["answer"] = QuestionRecord.normalize_answer(question.qtype, str(change["answer"]))
    return QuestionRecord.from_dict(obj)


class StateStore:
    """Single-writer append-only transition log with optional snapshots.

    All state mutation goes through apply(); load() replays the log through
    the same function, which is what makes resumption exact.
    """

    def __init__(
        self,
        log_path: str | Path,
        *,
        snapshot_path: str | Path | None = None,
        snapshot_every: int = 0,
        clock: Callable[[], float] | None = None,
    ):
        self.log_path = Path(log_path)
        self.snapshot_path = Path(snapshot_path) if snapshot_path else None
        self.snapshot_every = snapshot_every
        self.clock = clock if clock is not None else _wall_clock
        self.records: dict[str, PipelineRecord] = {}
        self.run_events: list[dict[str, Any]] = []
        self._seq = 0
        self._lock = threading.Lock()
        self._fh = None
        if self.log_path.exists():
            with open(self.log_path, "r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        self._apply(Transition.from_dict(json.loads(line)))

    def __enter__(self) -> "StateStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None

    def append(
        self,
        record_id: str,
        step: str,
        state: RecordState | str,
        actor: str,
        reason: str,
        payload: dict[str, Any] | None = None,
    ) -> Transition:
        payload = payload or {}
        with self._lock:
            self._seq += 1
            transition = Transition(
                record_id=record_id,
                seq=self._seq,
                step=step,
                state=state.value if isinstance(state, RecordState) else state,
                timestamp=self.clock(),
                actor=actor,
                reason=reason,
                payload=payload,
                digest=_payload_digest(payload),
            )
            if self._fh is None:
                self._fh = open(self.log_path, "a", encoding="utf-8")
            self._fh.write(json.dumps(transition.to_dict(), ensure_ascii=False) + "\n")
            self._fh.flush()
            self._apply(transition)
            if self.snapshot_every and self._seq % self.snapshot_every == 0:
                self._write_snapshot()
        return transition

    def _apply(self, t: Transition) -> None:
        self._seq = max(self._seq, t.seq)
        if t.record_id == RUN_RECORD_ID:
            self.run_events.append(t.payload)
            return
        if t.step == STEP_GENERATE:
            # Re-generation after a crash mid-batch resets the record.
            question = QuestionRecord.from_dict(t.payload["question"])
            record = PipelineRecord(question=question)
            record.history.append(t)
            self.records[t.record_id] = record
            return
        record = self.records.get(t.record_id)
        if record is None:
            raise PipelineError(f"transition for unknown record {t.record_id}: {t.step}")
        record.history.append(t)
        record.state = RecordState(t.state)
        if t.step == STEP_STAGE_C and t.payload.get("revised"):
            record.question = _revised_question(record.question, t.payload["revised"])
        elif t.step == STEP_ANNOTATE_ROUND:
            record.revision_round = int(t.payload["round"])
        elif t.step == STEP_ANNOTATE_VERIFY:
            if record.state is RecordState.ANNOTATED:
                record.annotation = parse_annotation(
                    json.dumps(t.payload["annotation"]), answer=record.question.answer
                )
                record.revision_round = int(t.payload["revision_round"])
            elif record.state is RecordState.DISCARDED:
                record.revision_round = len(t.payload.get("rounds", ()))
        elif t.step == STEP_AUDIT and t.payload.get("revision"):
            change = t.payload["revision"]
            record.question = _revised_question(record.question, {change["field"]: change["new"]})
            if change["field"] == "answer" and record.annotation is not None:
                record.annotation = StructuredAnnotation(
                    record.annotation.key_objects,
                    record.annotation.scene_graph,
                    record.annotation.reasoning_chain,
                    record.question.answer,
                )
        if record.state is RecordState.DISCARDED and t.reason:
            record.discard_reason = t.reason

    def _write_snapshot(self) -> None:
        if self.snapshot_path is None:
            return
        tmp = self.snapshot_path.with_suffix(self.snapshot_path.suffix + ".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            for record_id in sorted(self.records):
                fh.write(json.dumps(self.records[record_id].to_dict(), ensure_ascii=False) + "\n")
        tmp.replace(self.snapshot_path)

    def generated_images(self) -> set[str]:
        return {event["image_ref"] for event in self.run_events if "image_ref" in event}

    def state_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for record in self.records.values():
            counts[record.state.value] = counts.get(record.state.value, 0) + 1
        return counts


def _wall_clock() -> float:
    import time

    return time.time()


class LogicalClock:
    """Monotonic counter clock for byte-stable logs under mock providers."""

    def __init__(self, start: float = 0.0):
        self._t = start
        self._lock = threading.Lock()

    def __call__(self) -> float:
        with self._lock:
            self._t += 1.0
            return self._t


# ---------------------------------------------------------------------------
# Runner
# ---------------------------------------------------------------------------


class Parked(Exception):
    """Provider failed for this record; retry later without consuming rounds."""


@dataclass
class RunnerConfig:
    source: Source
    workers: int = 1
    retry_passes: int = 3
    hypersim_count: int = 15
    hypersim_min_per_category: int = 2
    hypersim_min_open_ended: int = 4
    cityscapes_min: int = 8
    cityscapes_max: int = 10
    gt_context: str = "per-pixel semantic instance annotations for the image"


_PROVIDER_FAILURES = (provider.Timeout, provider.RateLimited, provider.MalformedReply)


def next_step(record: PipelineRecord) -> str | None:
    """The step a record still owes; None when it waits on a human or is done."""
    state = record.state
    if state is RecordState.GENERATED:
        return STEP_BLIND_FILTER
    if state is RecordState.BLIND_CHECKED:
        if record.question.source is Source.HYPERSIM:
            return STEP_STAGE_A
        return STEP_STAGE_B
    if state is RecordState.STAGE_A_DONE:
        return STEP_STAGE_B
    if state is RecordState.STAGE_B_DONE:
        if record.question.category is Category.FALSE_PREMISE_REJECTION:
            return STEP_ANNOTATE_VERIFY
        return STEP_STAGE_C
    if state is RecordState.STAGE_C_DONE:
        return STEP_ANNOTATE_VERIFY
    if state is RecordState.ANNOTATED:
        # Interrupted between the annotated and verified lines: redo the step.
        return STEP_ANNOTATE_VERIFY
    return None


class PipelineRunner:
    def __init__(
        self,
        store: StateStore,
        handles: Mapping[provider.Role, provider.ProviderHandle],
        config: RunnerConfig,
    ):
        self.store = store
        self.handles = dict(handles)
        self.config = config
        self.parked: dict[str, str] = {}
        self._summaries: dict[str, dict[str, str]] = {}

    def _handle(self, role: provider.Role) -> provider.ProviderHandle:
        handle = self.handles.get(role)
        if handle is None:
            raise PipelineError(f"no provider configured for role {role.value}")
        return handle

    # -- generation ---------------------------------------------------------

    def build_dataset(self, images: Iterable[str]) -> None:
        """Generate questions for any image not yet done, then drain all steps."""
        done = self.store.generated_images()
        for image_ref in images:
            if image_ref not in done:
                self.generate_questions(image_ref)
        self.process_pending()

    def generate_questions(self, image_ref: str) -> list[PipelineRecord]:
        source = self.config.source
        system, user = prompts.question_generation(image_ref, source.value)
        reply = provider.complete(
            self._handle(provider.Role.GENERATOR_VLM),
            provider.ChatRequest(
                system=system, user=user, images=(image_ref,), schema=prompts.QUESTIONS_REPLY_SCHEMA
            ),
        )
        items = reply.parsed["questions"]
        stem = Path(image_ref).stem
        kept: list[QuestionRecord] = []
        dropped: list[dict[str, str]] = []
        seen_ids: set[str] = set()
        for item in items:
            record_id = f"{stem}#{item.get('id', '?')}"
            try:
                if record_id in seen_ids:
                    raise InvalidRecord(f"{record_id}: duplicate id")
                qtype = QType(str(item["type"]))
                options = item.get("options") or None
                record = QuestionRecord.from_dict(
                    {
                        "id": record_id,
                        "source": source.value,
                        "category": item["category"],
                        "qtype": qtype.value,
                        "question": item["question"],
                        "options": options,
                        "answer": QuestionRecord.normalize_answer(qtype, str(item["answer"])),
                        "image_ref": image_ref,
                    }
                )
            except (InvalidRecord, AnnotationError, KeyError, ValueError) as exc:
                dropped.append({"id": record_id, "reason": str(exc)})
                continue
            seen_ids.add(record_id)
            kept.append(record)
        flags = self._quota_flags(kept)
        for record in kept:
            self.store.append(
                record.id,
                STEP_GENERATE,
                RecordState.GENERATED,
                actor=provider.Role.GENERATOR_VLM.value,
                reason="question generated",
                payload={"question": record.to_dict()},
            )
        # The batch marker commits the image; a crash before this line makes
        # the resume regenerate the image and overwrite the partial records.
        self.store.append(
            RUN_RECORD_ID,
            STEP_GENERATE_BATCH,
            "n/a",
            actor=provider.Role.GENERATOR_VLM.value,
            reason="generation batch complete",
            payload={
                "image_ref": image_ref,
                "received": len(items),
                "kept": len(kept),
                "dropped": dropped,
                "quota_flags": flags,
            },
        )
        return [self.store.records[r.id] for r in kept]

    def _quota_flags(self, kept: list[QuestionRecord]) -> list[str]:
        flags: list[str] = []
        cfg = self.config
        if cfg.source is Source.HYPERSIM:
            if len(kept) != cfg.hypersim_count:
                flags.append(f"QuotaUnmet: expected {cfg.hypersim_count} questions, kept {len(kept)}")
            for category in Category:
                n = sum(1 for r in kept if r.category is category)
                if n < cfg.hypersim_min_per_category:
                    flags.append(f"QuotaUnmet: category {category.value} has {n}")
            n_open = sum(1 for r in kept if r.qtype is QType.OPEN_ENDED)
            if n_open < cfg.hypersim_min_open_ended:
                flags.append(f"QuotaUnmet: only {n_open} open_ended questions")
        else:
            if not cfg.cityscapes_min <= len(kept) <= cfg.cityscapes_max:
                flags.append(
                    f"QuotaUnmet: expected {cfg.cityscapes_min}-{cfg.cityscapes_max}, kept {len(kept)}"
                )
        return flags

    # -- per-record steps ---------------------------------------------------

    def process_pending(self) -> None:
        """Drain every record to verified/discarded; parked records get retry passes."""
        for _ in range(max(1, self.config.retry_passes)):
            self.parked = {}
            pending = [
                self.store.records[record_id]
                for record_id in sorted(self.store.records)
                if next_step(self.store.records[record_id]) is not None
            ]
            if not pending:
                return
            if self.config.workers <= 1:
                for record in pending:
                    self._advance(record)
            else:
                with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
                    list(pool.map(self._advance, pending))
            if not self.parked:
                return

    def _advance(self, record: PipelineRecord) -> None:
        dispatch = {
            STEP_BLIND_FILTER: self._blind_filter,
            STEP_STAGE_A: self._stage_a,
            STEP_STAGE_B: self._stage_b,
            STEP_STAGE_C: self._stage_c,
            STEP_ANNOTATE_VERIFY: self._annotate_verify,
        }
        while (step := next_step(record)) is not None:
            try:
                dispatch[step](record)
            except _PROVIDER_FAILURES as exc:
                self.parked[record.id] = f"{step}: {exc}"
                return

    def _blind_filter(self, record: PipelineRecord) -> None:
        question = record.question
        answers: list[str] = []
        for role in (provider.Role.BLIND_LLM_1, provider.Role.BLIND_LLM_2):
            system, user = prompts.blind_answer(question)
            reply = provider.complete(
                self._handle(role),
                provider.ChatRequest(system=system, user=user, schema=prompts.BLIND_ANSWER_SCHEMA),
            )
            answers.append(str(reply.parsed["answer"]))
        judged: list[bool] = []
        judge_flags: list[str] = []
        for answer in answers:
            system, user = prompts.answer_judge(question.id, question.question, question.answer, answer)
            try:
                reply = provider.complete(
                    self._handle(provider.Role.JUDGE_LLM),
                    provider.ChatRequest(system=system, user=user, schema=prompts.SIMILAR_REPLY_SCHEMA),
                )
                judged.append(bool(reply.parsed["similar"]))
            except _PROVIDER_FAILURES as exc:
                # Conservative: an unusable judge verdict keeps the question.
                judged.append(False)
                judge_flags.append(str(exc))
        payload = {"blind_answers": answers, "judged_correct": judged, "judge_flags": judge_flags}
        if len(judged) == 2 and all(judged):
            self.store.append(
                question.id,
                STEP_BLIND_FILTER,
                RecordState.DISCARDED,
                actor=provider.Role.JUDGE_LLM.value,
                reason="answerable without the image",
                payload=payload,
            )
        else:
            self.store.append(
                question.id,
                STEP_BLIND_FILTER,
                RecordState.BLIND_CHECKED,
                actor=provider.Role.JUDGE_LLM.value,
                reason="kept: not blind-answerable by both models",
                payload=payload,
            )

    def _stage_a(self, record: PipelineRecord) -> None:
        image_ref = record.question.image_ref
        summary = self._summaries.get(image_ref)
        if summary is None:
            system, user = prompts.scene_summary(image_ref)
            reply = provider.complete(
                self._handle(provider.Role.GENERATOR_VLM),
                provider.ChatRequest(
                    system=system, user=user, images=(image_ref,), schema=prompts.SCENE_SUMMARY_SCHEMA
                ),
            )
            summary = dict(reply.parsed)
            self._summaries[image_ref] = summary
        self.store.append(
            record.id,
            STEP_STAGE_A,
            RecordState.STAGE_A_DONE,
            actor=provider.Role.GENERATOR_VLM.value,
            reason="scene summary attached",
            payload={"summary": summary},
        )

    def _scene_context(self, record: PipelineRecord) -> tuple[str, str]:
        for t in record.transitions(STEP_STAGE_A):
            summary = t.payload.get("summary", {})
            return summary.get("room_type", ""), summary.get("scene_summary", "")
        return "outdoor street", "Ego-centric urban driving scene."

    def _stage_b(self, record: PipelineRecord) -> None:
        room_type, summary = self._scene_context(record)
        system, user = prompts.scene_context_filter(record.question, room_type, summary)
        reply = provider.complete(
            self._handle(provider.Role.JUDGE_LLM),
            provider.ChatRequest(system=system, user=user, schema=prompts.SCENE_FILTER_SCHEMA),
        )
        result = self._result_for(reply.parsed["results"], record.id)
        if result["bad_question"]:
            self.store.append(
                record.id,
                STEP_STAGE_B,
                RecordState.DISCARDED,
                actor=provider.Role.JUDGE_LLM.value,
                reason=f"implausible for scene: {result['reason']}",
                payload={"result": result},
            )
        else:
            self.store.append(
                record.id,
                STEP_STAGE_B,
                RecordState.STAGE_B_DONE,
                actor=provider.Role.JUDGE_LLM.value,
                reason="plausible for scene",
                payload={"result": result},
            )

    def _stage_c(self, record: PipelineRecord) -> None:
        question = record.question
        system, user = prompts.visual_reverify(question, self.config.gt_context)
        reply = provider.complete(
            self._handle(provider.Role.REVIEWER_VLM),
            provider.ChatRequest(
                system=system, user=user, images=(question.image_ref,), schema=prompts.REVERIFY_SCHEMA
            ),
        )
        result = self._result_for(reply.parsed["results"], question.id)
        if result["bad_question"]:
            self.store.append(
                question.id,
                STEP_STAGE_C,
                RecordState.DISCARDED,
                actor=provider.Role.REVIEWER_VLM.value,
                reason=f"failed visual re-verification: {result['reason']}",
                payload={"result": result},
            )
            return
        if result.get("is_modified"):
            change = {
                "question": result.get("question"),
                "answer": result.get("answer"),
                "options": result.get("options"),
            }
            try:
                revised = _revised_question(question, change)
            except InvalidRecord as exc:
                self.store.append(
                    question.id,
                    STEP_STAGE_C,
                    RecordState.DISCARDED,
                    actor=provider.Role.REVIEWER_VLM.value,
                    reason=f"invalid revision: {exc}",
                    payload={"result": result},
                )
                return
            self.store.append(
                question.id,
                STEP_STAGE_C,
                RecordState.STAGE_C_DONE,
                actor=provider.Role.REVIEWER_VLM.value,
                reason=f"revised: {result['reason']}",
                payload={
                    "result": result,
                    "revised": change,
                    "before": {"question": question.question, "answer": question.answer},
                    "after": {"question": revised.question, "answer": revised.answer},
                },
            )
        else:
            self.store.append(
                question.id,
                STEP_STAGE_C,
                RecordState.STAGE_C_DONE,
                actor=provider.Role.REVIEWER_VLM.value,
                reason="passed visual re-verification",
                payload={"result": result},
            )

    @staticmethod
    def _result_for(results: list[dict[str, Any]], record_id: str) -> dict[str, Any]:
        for result in results:
            if result.get("id") == record_id:
                return result
        raise provider.MalformedReply(f"review reply carries no result for {record_id}")

    def _annotate_verify(self, record: PipelineRecord) -> None:
        question = record.question
        rounds: list[dict[str, str]] = []
        for round_no in range(1, MAX_REVISION_ROUNDS + 1):
            system, user = prompts.field_generation(question, rounds)
            reply = provider.complete(
                self._handle(provider.Role.GENERATOR_VLM),
                provider.ChatRequest(
                    system=system,
                    user=user,
                    images=(question.image_ref,),
                    schema=prompts.FIELD_GEN_SCHEMA,
                ),
            )
            failure: dict[str, str] | None = None
            annotation: StructuredAnnotation | None = None
            try:
                annotation = parse_annotation(reply.raw, answer=question.answer)
            except AnnotationError as exc:
                failure = {"source": "parse", "feedback": f"fields were rejected: {exc}", "hint": ""}
            if annotation is not None:
                flags = validate_consistency(annotation, question.answer)
                if flags:
                    detail = "; ".join(f"{flag.kind}({flag.detail})" for flag in flags)
                    failure = {
                        "source": "structural",
                        "feedback": f"consistency flags: {detail}",
                        "hint": "make key_objects cover the scene graph and state the answer in [Conclusion]",
                    }
            if annotation is not None and failure is None:
                system, user = prompts.consistency_verify(question, annotation.to_dict())
                verdict = provider.complete(
                    self._handle(provider.Role.JUDGE_LLM),
                    provider.ChatRequest(system=system, user=user, schema=prompts.VERIFY_REPLY_SCHEMA),
                ).parsed
                if verdict["pass"]:
                    self.store.append(
                        question.id,
                        STEP_ANNOTATE_VERIFY,
                        RecordState.ANNOTATED,
                        actor=provider.Role.GENERATOR_VLM.value,
                        reason="annotation accepted",
                        payload={"annotation": annotation.to_dict(), "revision_round": round_no},
                    )
                    self.store.append(
                        question.id,
                        STEP_ANNOTATE_VERIFY,
                        RecordState.VERIFIED,
                        actor=provider.Role.JUDGE_LLM.value,
                        reason="consistency verified",
                        payload={"rounds": rounds},
                    )
                    return
                failure = {
                    "source": "verifier",
                    "feedback": verdict.get("feedback", ""),
                    "hint": verdict.get("hint", ""),
                }
            rounds.append(failure)
            self.store.append(
                question.id,
                STEP_ANNOTATE_ROUND,
                record.state,
                actor=provider.Role.JUDGE_LLM.value,
                reason=f"round {round_no} failed ({failure['source']})",
                payload={"round": round_no, **failure},
            )
        self.store.append(
            question.id,
            STEP_ANNOTATE_VERIFY,
            RecordState.DISCARDED,
            actor=provider.Role.JUDGE_LLM.value,
            reason=f"unresolved after {MAX_REVISION_ROUNDS} rounds",
            payload={"rounds": rounds},
        )


# ---------------------------------------------------------------------------
# Human audit
# ---------------------------------------------------------------------------


def audit_session(
    store: StateStore,
    input_fn: Callable[[str], str] = input,
    echo: Callable[[str], None] = print,
) -> dict[str, int]:
    """Sequential accept/revise/delete review of verified records.

    The session is resumable: quitting leaves unreviewed records in the
    verified state and a later session picks them up.
    """
    counts = {"accepted": 0, "revised": 0, "deleted": 0, "skipped": 0}
    pending = [r for _, r in sorted(store.records.items()) if r.state is RecordState.VERIFIED]
    for record in pending:
        echo(f"--- {record.id} [{record.question.category.value} / {record.question.qtype.value}]")
        echo(f"Q: {record.question.question}")
        for letter, text in record.question.options or ():
            echo(f"   {letter}. {text}")
        echo(f"A: {record.question.answer}")
        if record.annotation is not None:
            echo(f"entities: {', '.join(record.annotation.key_objects)}")
            for edge in record.annotation.scene_graph:
                echo(f"edge: {edge.to_edge()}")
            for step in record.annotation.reasoning_chain:
                echo(f"  {step.serialize()}")
        command = input_fn("[a]ccept / [r]evise / [d]elete / [s]kip / [q]uit > ").strip().lower()
        if command == "q":
            break
        if command == "s":
            counts["skipped"] += 1
            continue
        if command == "a":
            store.append(record.id, STEP_AUDIT, RecordState.AUDITED, "human", "accepted", {})
            counts["accepted"] += 1
        elif command == "r":
            fieldname = input_fn("field to edit (question/answer) > ").strip().lower()
            if fieldname not in ("question", "answer"):
                echo(f"cannot edit field {fieldname!r}; skipping")
                counts["skipped"] += 1
                continue
            new_value = input_fn("new value > ")
            old_value = getattr(record.question, fieldname)
            try:
                _revised_question(record.question, {fieldname: new_value})
            except InvalidRecord as exc:
                echo(f"rejected revision: {exc}")
                counts["skipped"] += 1
                continue
            store.append(
                record.id,
                STEP_AUDIT,
                RecordState.AUDITED,
                "human",
                f"revised {fieldname}",
                {"revision": {"field": fieldname, "old": old_value, "new": new_value}},
            )
            counts["revised"] += 1
        elif command == "d":
            reason = input_fn("reason > ").strip() or "rejected by human audit"
            store.append(record.id, STEP_AUDIT, RecordState.DISCARDED, "human", reason, {})
            counts["deleted"] += 1
        else:
            echo(f"unknown command {command!r}; skipping")
            counts["skipped"] += 1
    return counts


# ---------------------------------------------------------------------------
# Retention report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RetentionRow:
    step: str
    n_in: int
    n_out: int

    @property
    def retention(self) -> float:
        return self.n_out / self.n_in if self.n_in else 0.0


@dataclass(frozen=True)
class RetentionReport:
    rows: tuple[RetentionRow, ...]
    distribution: dict[tuple[str, str], int]  # (category, source) -> surviving count

    def row(self, step: str) -> RetentionRow:
        for row in self.rows:
            if row.step == step:
                return row
        raise KeyError(step)


def retention_report(store: StateStore) -> RetentionReport:
    rows: list[RetentionRow] = []
    received = sum(event.get("received", 0) for event in store.run_events)
    kept = sum(event.get("kept", 0) for event in store.run_events)
    rows.append(RetentionRow(STEP_GENERATE, received, kept))
    for step in RETENTION_STEPS[1:]:
        entered = [r for r in store.records.values() if r.transitions(step)]
        lost = sum(
            1
            for r in entered
            if any(t.state == RecordState.DISCARDED.value for t in r.transitions(step))
        )
        rows.append(RetentionRow(step, len(entered), len(entered) - lost))
    distribution: dict[tuple[str, str], int] = {}
    for record in store.records.values():
        if record.state is RecordState.DISCARDED:
            continue
        key = (record.question.category.value, record.question.source.value)
        distribution[key] = distribution.get(key, 0) + 1
    return RetentionReport(tuple(rows), distribution)


def render_retention(report: RetentionReport) -> str:
    lines = [f"{'Step':<18} {'In':>6} {'Out':>6} {'Retention':>10}"]
    for row in report.rows:
        rate = f"{100.0 * row.retention:>9.1f}%" if row.n_in else f"{'n/a':>10}"
        lines.append(f"{row.step:<18} {row.n_in:>6} {row.n_out:>6} {rate}")
    lines.append("")
    sources = (Source.HYPERSIM.value, Source.CITYSCAPES.value)
    header = f"{'Category':<24}" + "".join(f"{s:>12}" for s in sources) + f"{'Total':>12}"
    lines.append(header)
    totals = {s: 0 for s in sources}
    for category in Category:
        counts = [report.distribution.get((category.value, s), 0) for s in sources]
        for s, n in zip(sources, counts):
            totals[s] += n
        lines.append(
            f"{category.value:<24}" + "".join(f"{n:>12}" for n in counts) + f"{sum(counts):>12}"
        )
    lines.append(
        f"{'Total':<24}"
        + "".join(f"{totals[s]:>12}" for s in sources)
        + f"{sum(totals.values()):>12}"
    )
    return "\n".join(lines)
