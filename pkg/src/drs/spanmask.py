"""Phase gradient masks over tokenized supervision targets.

A tokenization is an externally supplied list of half-open byte ranges that
tiles the rendered target text.  The phase-k mask selects every token that
overlaps the byte prefix [0, end(F_k)), where F_k is the highest unlocked
field; boundary tokens straddling a field edge are included, which keeps the
masks monotone in k and the supervised prefix syntactically coherent.

Reference tokenizers (greedy byte chunking and whitespace splitting) ship for
tests; production offset lists come from the real model tokenizer.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping

from .schema import FIELD_ORDER, FieldSpanTable, StructuredAnnotation, render_target


class SpanMaskError(ValueError):
    pass


class CoverageMismatch(SpanMaskError):
    """Tokenization does not tile the target text."""


class BadPhase(SpanMaskError):
    pass


class LengthMismatch(SpanMaskError):
    pass


@dataclass(frozen=True)
class Tokenization:
    """Sorted, non-overlapping byte ranges covering [0, n_bytes)."""

    offsets: tuple[tuple[int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "offsets", tuple(tuple(pair) for pair in self.offsets))
        cursor = 0
        for start, end in self.offsets:
            if start != cursor:
                raise CoverageMismatch(f"gap or overlap at byte {cursor}: token starts at {start}")
            if end <= start:
                raise CoverageMismatch(f"empty token at byte {start}")
            cursor = end

    @property
    def n_tokens(self) -> int:
        return len(self.offsets)

    @property
    def n_bytes(self) -> int:
        return self.offsets[-1][1] if self.offsets else 0


def chunk_tokenization(text: str, chunk_bytes: int = 4) -> Tokenization:
    """Greedy fixed-size byte chunks; the last chunk may be shorter."""
    if chunk_bytes < 1:
        raise ValueError("chunk_bytes must be >= 1")
    n = len(text.encode("utf-8"))
    return Tokenization(tuple((i, min(i + chunk_bytes, n)) for i in range(0, n, chunk_bytes)))


_WS_BYTES = frozenset(b" \t\r\n")


def whitespace_tokenization(text: str) -> Tokenization:
    """Whitespace-split tokens; each token absorbs the whitespace run after it.

    Leading whitespace attaches to the first token so the ranges tile the text.
    """
    data = text.encode("utf-8")
    if not data:
        return Tokenization(())
    starts = [0]
    for i in range(1, len(data)):
        if data[i] not in _WS_BYTES and data[i - 1] in _WS_BYTES:
            starts.append(i)
    bounds = starts + [len(data)]
    return Tokenization(tuple((bounds[i], bounds[i + 1]) for i in range(len(starts))))


# ---------------------------------------------------------------------------
# Masks
# ---------------------------------------------------------------------------

PHASES = (1, 2, 3, 4)


def in_scope_prefix(spans: FieldSpanTable, phase: int) -> int:
    """End of the supervised byte prefix at the given phase."""
    if phase not in PHASES:
        raise BadPhase(f"phase must be 1..4, got {phase}")
    return spans.end_of(FIELD_ORDER[phase - 1])


def compute_mask(spans: FieldSpanTable, tok: Tokenization, phase: int) -> tuple[int, ...]:
    """Per-token bits: 1 when the token overlaps the phase's byte prefix."""
    prefix_end = in_scope_prefix(spans, phase)
    if tok.n_bytes != spans.total_bytes:
        raise CoverageMismatch(
            f"tokenization covers {tok.n_bytes} bytes, target has {spans.total_bytes}"
        )
    return tuple(1 if start < prefix_end else 0 for start, _ in tok.offsets)


@dataclass(frozen=True)
class LogProbTrace:
    """Per-token natural-log probabilities aligned to a tokenization."""

    values: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        for v in self.values:
            if not math.isfinite(v) or v > 0.0:
                raise ValueError(f"log-probability must be finite and <= 0, got {v}")

    def __len__(self) -> int:
        return len(self.values)


def masked_nll(trace: LogProbTrace | Iterable[float], mask: Iterable[int]) -> float:
    """Negative sum of the log-probabilities at mask-1 positions.

    Summation is plain left-to-right in double precision; determinism is
    preferred over compensated summation for these short sequences.
    """
    values = trace.values if isinstance(trace, LogProbTrace) else tuple(trace)
    bits = tuple(mask)
    if len(values) != len(bits):
        raise LengthMismatch(f"trace has {len(values)} entries, mask has {len(bits)}")
    loss = 0.0
    for value, bit in zip(values, bits):
        if bit:
            loss -= value
    return loss


# ---------------------------------------------------------------------------
# Mask artifacts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MaskArtifact:
    sample_id: str
    phase: int
    target_text: str
    token_offsets: Tokenization
    mask: tuple[int, ...]
    field_spans: FieldSpanTable

    def __post_init__(self):
        object.__setattr__(self, "mask", tuple(int(b) for b in self.mask))
        if len(self.mask) != self.token_offsets.n_tokens:
            raise LengthMismatch(
                f"{self.sample_id}: mask has {len(self.mask)} bits for "
                f"{self.token_offsets.n_tokens} tokens"
            )

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "sample_id": self.sample_id,
            "phase": self.phase,
            "target_text": self.target_text,
            "token_offsets": [list(pair) for pair in self.token_offsets.offsets],
            "mask": list(self.mask),
            "field_spans": self.field_spans.to_dict(),
        }

    def json_line(self) -> str:
        return json.dumps(self.to_json_dict(), ensure_ascii=False, separators=(",", ":"))

    @classmethod
    def from_json_dict(cls, obj: dict[str, Any]) -> "MaskArtifact":
        return cls(
            sample_id=obj["sample_id"],
            phase=int(obj["phase"]),
            target_text=obj["target_text"],
            token_offsets=Tokenization(tuple(tuple(pair) for pair in obj["token_offsets"])),
            mask=tuple(obj["mask"]),
            field_spans=FieldSpanTable.from_dict(obj["field_spans"]),
        )


@dataclass(frozen=True)
class RenderedTarget:
    """A canonical target text with its field spans, keyed by sample id."""

    sample_id: str
    text: str
    spans: FieldSpanTable

    @classmethod
    def from_annotation(cls, sample_id: str, annotation: StructuredAnnotation) -> "RenderedTarget":
        text, spans = render_target(annotation)
        return cls(sample_id, text, spans)


@dataclass(frozen=True)
class EmitFailure:
    sample_id: str
    phase: int | None
    reason: str


def build_artifacts(
    targets: Iterable[RenderedTarget],
    tokenizations: Mapping[str, Tokenization | Iterable[tuple[int, int]]],
    phases: Iterable[int] = PHASES,
) -> tuple[list[MaskArtifact], list[EmitFailure]]:
    """Masks for every (sample, phase), ordered by (sample_id, phase).

    Tokenizations may be given as Tokenization values or raw offset pairs.
    Per-sample failures (missing or non-tiling tokenization, bad phase) are
    collected instead of aborting the stream.
    """
    artifacts: list[MaskArtifact] = []
    failures: list[EmitFailure] = []
    phase_list = sorted(set(int(p) for p in phases))
    for target in sorted(targets, key=lambda t: t.sample_id):
        raw_tok = tokenizations.get(target.sample_id)
        if raw_tok is None:
            failures.append(EmitFailure(target.sample_id, None, "no tokenization supplied"))
            continue
        try:
            tok = raw_tok if isinstance(raw_tok, Tokenization) else Tokenization(tuple(raw_tok))
        except SpanMaskError as exc:
            failures.append(EmitFailure(target.sample_id, None, str(exc)))
            continue
        for phase in phase_list:
            try:
                mask = compute_mask(target.spans, tok, phase)
            except SpanMaskError as exc:
                failures.append(EmitFailure(target.sample_id, phase, str(exc)))
                continue
            artifacts.append(
                MaskArtifact(target.sample_id, phase, target.text, tok, mask, target.spans)
            )
    return artifacts, failures


def emit_artifacts(
    targets: Iterable[RenderedTarget],
    tokenizations: Mapping[str, Tokenization],
    phases: Iterable[int],
    out_path: str | Path,
) -> tuple[int, list[EmitFailure]]:
    """Write the mask-artifact JSONL; reruns on the same input are byte-identical."""
    artifacts, failures = build_artifacts(targets, tokenizations, phases)
    with open(out_path, "w", encoding="utf-8") as fh:
        for artifact in artifacts:
            fh.write(artifact.json_line() + "\n")
    return len(artifacts), failures


def load_artifacts(path: str | Path) -> list[MaskArtifact]:
    artifacts = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                artifacts.append(MaskArtifact.from_json_dict(json.loads(line)))
    return artifacts


def load_tokenizations(path: str | Path) -> dict[str, tuple[tuple[int, int], ...]]:
    """Read a tokenization JSONL: {"sample_id": ..., "offsets": [[s, e], ...]}.

    Offsets are returned raw; validation happens when masks are built so a
    malformed entry fails only its own sample.
    """
    out: dict[str, tuple[tuple[int, int], ...]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            out[obj["sample_id"]] = tuple(tuple(p) for p in obj["offsets"])
    return out
