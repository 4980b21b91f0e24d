"""Field-level consensus and final spec assembly.

Claims from all phases are grouped per field by canonical value; the winning
group is chosen by majority with a deterministic tie ladder, graded against
retrieved context, and scored with a weighted confidence blend. An optional
model-backed consistency pass can then adjust the drafted values; if it fails
in any way the draft stands.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any

from . import gateway
from .core import (
    PHASE_RESEARCH,
    ExtractionResult,
    FieldClaim,
    SpecSchema,
    canonicalize_value,
)
from .gateway import PromptRequest, ProviderResponse
from .retrieval import RetrievedContext

if TYPE_CHECKING:
    from .orchestrator import EnsembleConfig

logger = logging.getLogger(__name__)

__all__ = [
    "DEFAULT_CONFIDENCE_WEIGHTS",
    "TIE_NONE",
    "TIE_MEAN_CONFIDENCE",
    "TIE_RAG",
    "TIE_MODEL_ORDER",
    "QuorumNotMet",
    "ResolvedField",
    "SynthesizedSpec",
    "field_confidence",
    "rag_alignment_indicator",
    "resolve_field",
    "schema_instruction_text",
    "synthesize_spec",
]

DEFAULT_CONFIDENCE_WEIGHTS = (0.4, 0.4, 0.2)

TIE_NONE = "none"
TIE_MEAN_CONFIDENCE = "mean_confidence"
TIE_RAG = "rag"
TIE_MODEL_ORDER = "model_order"


class QuorumNotMet(RuntimeError):
    """Fewer schema-valid extraction results than the configured minimum."""

    def __init__(self, successes: int, min_quorum: int) -> None:
        super().__init__(f"{successes} schema-valid results, need {min_quorum}")
        self.successes = successes
        self.min_quorum = min_quorum


@dataclass(frozen=True)
class ResolvedField:
    """Consensus outcome for a single field."""

    field: str
    value: str
    canonical_value: str
    agreement: float
    mean_confidence: float
    rag_aligned: int
    confidence: float
    supporters: tuple[tuple[str, str], ...]
    tie_break_used: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "field": self.field,
            "value": self.value,
            "canonical_value": self.canonical_value,
            "agreement": self.agreement,
            "mean_confidence": self.mean_confidence,
            "rag_aligned": self.rag_aligned,
            "confidence": self.confidence,
            "supporters": [list(pair) for pair in self.supporters],
            "tie_break_used": self.tie_break_used,
        }


@dataclass(frozen=True)
class SynthesizedSpec:
    """Final extracted specification with per-field provenance."""

    description_id: str
    fields: Mapping[str, ResolvedField]
    overall_confidence: float
    consensus_ratio: float
    rag_validation_ratio: float
    provenance: Mapping[str, Any]

    def field_names(self) -> frozenset[str]:
        return frozenset(self.fields)

    def to_dict(self) -> dict[str, Any]:
        return {
            "description_id": self.description_id,
            "fields": {name: resolved.to_dict() for name, resolved in sorted(self.fields.items())},
            "overall_confidence": self.overall_confidence,
            "consensus_ratio": self.consensus_ratio,
            "rag_validation_ratio": self.rag_validation_ratio,
            "provenance": self.provenance,
        }


def _clamp01(value: float) -> float:
    return 0.0 if value < 0.0 else 1.0 if value > 1.0 else value


def field_confidence(
    agreement: float,
    mean_confidence: float,
    rag_aligned: int,
    weights: Sequence[float] = DEFAULT_CONFIDENCE_WEIGHTS,
) -> float:
    """Weighted blend of agreement, claim confidence, and grounding.

    The three weights follow that order; results clamp into [0, 1].
    """
    w_agreement, w_confidence, w_rag = weights
    return _clamp01(
        w_agreement * agreement + w_confidence * mean_confidence + w_rag * rag_aligned
    )


def rag_alignment_indicator(canonical_value: str, context: RetrievedContext) -> int:
    """1 when any retrieved snippet contains the canonical value, else 0."""
    for hit in context.hits:
        if canonical_value in canonicalize_value(hit.snippet):
            return 1
    return 0


def resolve_field(
    claims: Sequence[FieldClaim],
    context: RetrievedContext,
    weights: Sequence[float] = DEFAULT_CONFIDENCE_WEIGHTS,
    roster_order: Sequence[str] = (),
) -> ResolvedField:
    """Pick one value for a field from competing claims.

    Groups share a canonical value; the largest group wins. Ties break by
    higher mean confidence, then grounded over ungrounded, then by the
    earliest supporting model in roster order (unknown models sort after the
    roster, alphabetically). `tie_break_used` records the deciding rung.
    """
    if not claims:
        raise ValueError("resolve_field needs at least one claim")
    field_names = {claim.field for claim in claims}
    if len(field_names) != 1:
        raise ValueError(f"claims span multiple fields: {sorted(field_names)}")
    field_name = claims[0].field

    rank = {model_id: position for position, model_id in enumerate(roster_order)}

    def model_rank(model_id: str) -> tuple[int, str]:
        return (rank.get(model_id, len(rank)), model_id)

    groups: dict[str, list[FieldClaim]] = {}
    for claim in claims:
        groups.setdefault(claim.canonical_value, []).append(claim)

    stats: dict[str, tuple[int, float, int, tuple[int, str]]] = {}
    for canonical, members in groups.items():
        # fsum keeps the mean identical under any claim ordering.
        mean_conf = math.fsum(member.confidence for member in members) / len(members)
        aligned = rag_alignment_indicator(canonical, context)
        earliest = min(model_rank(member.source_model) for member in members)
        stats[canonical] = (len(members), mean_conf, aligned, earliest)

    candidates = list(stats)
    tie_break = TIE_NONE
    for rung, key in (
        (TIE_NONE, lambda c: stats[c][0]),
        (TIE_MEAN_CONFIDENCE, lambda c: stats[c][1]),
        (TIE_RAG, lambda c: stats[c][2]),
    ):
        best = max(key(c) for c in candidates)
        survivors = [c for c in candidates if key(c) == best]
        if len(survivors) < len(candidates):
            tie_break = rung
        candidates = survivors
        if len(candidates) == 1:
            break
    if len(candidates) > 1:
        tie_break = TIE_MODEL_ORDER
        candidates.sort(key=lambda c: (stats[c][3], c))
    winner_canonical = candidates[0]
    winner = groups[winner_canonical]
    count, mean_conf, aligned, _earliest = stats[winner_canonical]

    # Surface form: the most confident supporter's raw value, settled
    # deterministically on confidence ties.
    surface = min(
        winner,
        key=lambda claim: (-claim.confidence, model_rank(claim.source_model), claim.phase, claim.value),
    )
    agreement = count / len(claims)
    supporters = tuple(
        sorted(
            ((claim.source_model, claim.phase) for claim in winner),
            key=lambda pair: (model_rank(pair[0]), pair[1]),
        )
    )
    return ResolvedField(
        field=field_name,
        value=surface.value,
        canonical_value=winner_canonical,
        agreement=agreement,
        mean_confidence=mean_conf,
        rag_aligned=aligned,
        confidence=field_confidence(agreement, mean_conf, aligned, weights),
        supporters=supporters,
        tie_break_used=tie_break,
    )


def schema_instruction_text(schema: SpecSchema) -> str:
    """System prompt text describing the output contract for one schema."""
    lines = [
        "You extract structured industrial part specifications.",
        "Respond with a single JSON object and nothing else.",
        "Required fields:",
    ]
    for name in schema.required_fields:
        lines.append(f"- {name} ({schema.kind_of(name)})")
    optional = sorted(schema.known_fields - set(schema.required_fields))
    if optional:
        lines.append("Optional fields:")
        for name in optional:
            lines.append(f"- {name} ({schema.kind_of(name)})")
    lines.append(
        'A field value may be written as {"value": ..., "confidence": 0.0-1.0} '
        "to report how certain you are."
    )
    return "\n".join(lines)


def synthesize_spec(
    results: Sequence[ExtractionResult],
    context: RetrievedContext,
    config: "EnsembleConfig",
    schema: SpecSchema,
    description_id: str = "",
    *,
    invoke_fn: Callable[..., Any] | None = gateway.invoke,
    env: Mapping[str, str] | None = None,
) -> SynthesizedSpec:
    """Merge per-model results into one spec and run the consistency pass.

    Claims from every supplied result (valid or not) feed consensus; the
    quorum check counts only schema-valid results. The consistency pass asks
    the configured synthesis model to review the draft: a schema-valid reply
    replaces drafted values (grounding and confidence are recomputed), any
    failure leaves the draft standing, and provenance records which happened.
    """
    valid_count = sum(1 for result in results if result.schema_valid)
    if valid_count < config.min_quorum:
        raise QuorumNotMet(valid_count, config.min_quorum)

    by_field: dict[str, list[FieldClaim]] = {}
    for result in results:
        for claim in result.claims:
            by_field.setdefault(claim.field, []).append(claim)

    roster_order = config.roster_order()
    weights = config.confidence_weights
    resolved = {
        name: resolve_field(claims, context, weights, roster_order)
        for name, claims in by_field.items()
    }

    resolved, pass_note = _consistency_pass(
        resolved, context, config, schema, invoke_fn=invoke_fn, env=env
    )

    total = len(resolved)
    overall = math.fsum(r.confidence for r in resolved.values()) / total if total else 0.0
    consensus = sum(1 for r in resolved.values() if r.agreement >= 0.5) / total if total else 0.0
    grounded = sum(1 for r in resolved.values() if r.rag_aligned) / total if total else 0.0
    provenance = {
        "fields": {
            name: [list(pair) for pair in resolved[name].supporters] for name in sorted(resolved)
        },
        "synthesis_pass": pass_note,
    }
    return SynthesizedSpec(
        description_id=description_id,
        fields=resolved,
        overall_confidence=overall,
        consensus_ratio=consensus,
        rag_validation_ratio=grounded,
        provenance=provenance,
    )


def _consistency_pass(
    resolved: dict[str, ResolvedField],
    context: RetrievedContext,
    config: "EnsembleConfig",
    schema: SpecSchema,
    *,
    invoke_fn: Callable[..., Any] | None,
    env: Mapping[str, str] | None,
) -> tuple[dict[str, ResolvedField], str]:
    if invoke_fn is None:
        return resolved, "skipped"
    provider = config.provider(config.synthesis_model)
    if provider is None or not resolved:
        return resolved, "skipped"

    draft_lines = [f"{name}: {resolved[name].value}" for name in sorted(resolved)]
    request = PromptRequest(
        system_text=schema_instruction_text(schema)
        + "\nReview the draft for internal consistency and return the corrected full object.",
        user_text="DRAFT SPECIFICATION:\n" + "\n".join(draft_lines),
        response_schema=schema,
    )
    outcome = invoke_fn(provider, request, env=env)
    if not isinstance(outcome, ProviderResponse):
        kind = getattr(outcome, "kind", "error")
        logger.warning("consistency pass failed (%s); keeping draft", kind)
        return resolved, f"fallback: {kind}"
    checked = gateway.parse_structured_output(outcome, schema, PHASE_RESEARCH)
    if not checked.schema_valid:
        reason = checked.failure.kind if checked.failure else "invalid_output"
        logger.warning("consistency pass output rejected (%s); keeping draft", reason)
        return resolved, f"fallback: {reason}"

    weights = config.confidence_weights
    adjusted: dict[str, ResolvedField] = dict(resolved)
    for claim in checked.claims:
        current = adjusted.get(claim.field)
        if current is None or claim.canonical_value == current.canonical_value:
            continue
        aligned = rag_alignment_indicator(claim.canonical_value, context)
        adjusted[claim.field] = ResolvedField(
            field=current.field,
            value=claim.value,
            canonical_value=claim.canonical_value,
            agreement=current.agreement,
            mean_confidence=current.mean_confidence,
            rag_aligned=aligned,
            confidence=field_confidence(current.agreement, current.mean_confidence, aligned, weights),
            supporters=current.supporters,
            tie_break_used=current.tie_break_used,
        )
    return adjusted, f"applied: {config.synthesis_model}"
