"""Shared domain types, value canonicalization, and model-output validation.

Every other module depends only on the types defined here. All types are
immutable after construction and all operations are pure functions, so
everything in this module is safe to share across concurrent tasks.
"""

from __future__ import annotations

import json
import re
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

__all__ = [
    "SCALAR_TEXT",
    "QUANTITY_WITH_UNIT",
    "NESTED_MAP",
    "FIELD_KINDS",
    "PHASE_EXTRACTION",
    "PHASE_RESEARCH",
    "DEFAULT_UNIT_TABLE",
    "MISSING_FIELD",
    "KIND_MISMATCH",
    "PartDescription",
    "SpecSchema",
    "FieldClaim",
    "ValidationIssue",
    "Failure",
    "ExtractionResult",
    "build_unit_table",
    "canonicalize_value",
    "canonicalize_field_name",
    "render_nested_value",
    "validate_spec_document",
]

# Field kinds a schema may declare.
SCALAR_TEXT = "scalar-text"
QUANTITY_WITH_UNIT = "quantity-with-unit"
NESTED_MAP = "nested-map"
FIELD_KINDS = frozenset({SCALAR_TEXT, QUANTITY_WITH_UNIT, NESTED_MAP})

# Pipeline phases a claim can originate from.
PHASE_EXTRACTION = "extraction"
PHASE_RESEARCH = "research"

# Validation issue kinds.
MISSING_FIELD = "missing_field"
KIND_MISMATCH = "kind_mismatch"

_WS_RUN = re.compile(r"\s+")
_NAME_SEPARATORS = re.compile(r"[\s\-]")
_NAME_STRIP = re.compile(r"[^a-z0-9_]")

# Built-in unit token table. Keys are matched against whitespace-delimited
# tokens after case folding; values must be fixed points of the table so
# canonicalization stays idempotent. Extend via build_unit_table().
DEFAULT_UNIT_TABLE: Mapping[str, str] = {
    "mm": "mm",
    "in": "in",
    "v": "v",
    "a": "a",
    "kg": "kg",
    "psi": "psi",
}


def build_unit_table(extra: Mapping[str, str]) -> Mapping[str, str]:
    """Merge extra unit mappings into the built-in table.

    Keys are case-folded. Every value must map to itself (directly or by
    absence), otherwise canonicalization would not be idempotent.
    """
    table = dict(DEFAULT_UNIT_TABLE)
    for key, value in extra.items():
        table[key.casefold()] = value
    for value in table.values():
        if table.get(value, value) != value:
            raise ValueError(f"unit table is not idempotent: {value!r} -> {table[value]!r}")
    return table


def canonicalize_value(raw: str, unit_table: Mapping[str, str] | None = None) -> str:
    """Lexically canonicalize a field value.

    Trims, collapses whitespace runs, case-folds, and normalizes unit tokens
    through the (built-in or supplied) unit table. Idempotent; no unit
    conversion is attempted.
    """
    table = DEFAULT_UNIT_TABLE if unit_table is None else unit_table
    folded = _WS_RUN.sub(" ", raw.strip()).casefold()
    if not folded:
        return ""
    return " ".join(table.get(token, token) for token in folded.split(" "))


def canonicalize_field_name(raw: str) -> str:
    """Canonicalize a field name to [a-z0-9_].

    Case-folds, turns whitespace and hyphens into underscores, and drops
    everything else. Idempotent.
    """
    folded = _NAME_SEPARATORS.sub("_", raw.casefold())
    return _NAME_STRIP.sub("", folded)


@dataclass(frozen=True)
class PartDescription:
    """One unstructured part description, the pipeline input unit."""

    id: str
    text: str
    category: str | None = None

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError(f"description {self.id!r} has empty text")


@dataclass(frozen=True)
class SpecSchema:
    """The shared output schema all models are asked to follow.

    ``required_fields`` is an ordered, duplicate-free tuple of canonical
    names; ``field_kinds`` maps canonical names (required or optional) to a
    member of FIELD_KINDS. Required fields without a declared kind default
    to scalar-text.
    """

    required_fields: tuple[str, ...]
    field_kinds: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.required_fields:
            raise ValueError("schema requires at least one required field")
        seen: set[str] = set()
        for name in self.required_fields:
            if canonicalize_field_name(name) != name:
                raise ValueError(f"required field {name!r} is not canonical")
            if name in seen:
                raise ValueError(f"duplicate required field {name!r}")
            seen.add(name)
        for name, kind in self.field_kinds.items():
            if canonicalize_field_name(name) != name:
                raise ValueError(f"schema field {name!r} is not canonical")
            if kind not in FIELD_KINDS:
                raise ValueError(f"unknown field kind {kind!r} for {name!r}")

    def kind_of(self, name: str) -> str | None:
        """Declared kind for a recognized field, None for unrecognized."""
        kind = self.field_kinds.get(name)
        if kind is None and name in self.required_fields:
            return SCALAR_TEXT
        return kind

    @property
    def known_fields(self) -> frozenset[str]:
        return frozenset(self.required_fields) | frozenset(self.field_kinds)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> SpecSchema:
        """Load from the documented JSON shape with exact key names."""
        unknown = set(data) - {"required_fields", "field_kinds"}
        if unknown:
            raise ValueError(f"unknown schema keys: {sorted(unknown)}")
        required = data.get("required_fields")
        if not isinstance(required, Sequence) or isinstance(required, str):
            raise ValueError("required_fields must be an array of field names")
        kinds = data.get("field_kinds", {})
        if not isinstance(kinds, Mapping):
            raise ValueError("field_kinds must be an object")
        return cls(tuple(str(name) for name in required), dict(kinds))

    @classmethod
    def from_file(cls, path: str | Path) -> SpecSchema:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def default(cls) -> SpecSchema:
        """Minimal built-in schema for part specifications."""
        return cls(
            required_fields=("part_name", "manufacturer", "part_number", "specifications"),
            field_kinds={
                "part_name": SCALAR_TEXT,
                "manufacturer": SCALAR_TEXT,
                "part_number": SCALAR_TEXT,
                "specifications": NESTED_MAP,
            },
        )


@dataclass(frozen=True)
class FieldClaim:
    """One model's assertion about one field in one phase."""

    field: str
    value: str
    canonical_value: str
    confidence: float
    source_model: str
    phase: str
    in_schema: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    @classmethod
    def make(
        cls,
        field: str,
        value: str,
        confidence: float,
        source_model: str,
        phase: str,
        in_schema: bool = True,
    ) -> FieldClaim:
        """Build a claim with the canonical value derived from the raw one."""
        return cls(
            field=field,
            value=value,
            canonical_value=canonicalize_value(value),
            confidence=confidence,
            source_model=source_model,
            phase=phase,
            in_schema=in_schema,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "field": self.field,
            "value": self.value,
            "canonical_value": self.canonical_value,
            "confidence": self.confidence,
            "source_model": self.source_model,
            "phase": self.phase,
            "in_schema": self.in_schema,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> FieldClaim:
        value = str(data["value"])
        return cls(
            field=str(data["field"]),
            value=value,
            canonical_value=str(data.get("canonical_value", canonicalize_value(value))),
            confidence=float(data.get("confidence", 1.0)),
            source_model=str(data.get("source_model", "")),
            phase=str(data.get("phase", PHASE_EXTRACTION)),
            in_schema=bool(data.get("in_schema", True)),
        )


@dataclass(frozen=True)
class ValidationIssue:
    """One problem found while validating a model document."""

    kind: str  # MISSING_FIELD or KIND_MISMATCH
    path: str
    expected: str = ""
    found: str = ""

    def to_dict(self) -> dict[str, str]:
        return {"kind": self.kind, "path": self.path, "expected": self.expected, "found": self.found}


@dataclass(frozen=True)
class Failure:
    """Terminal failure descriptor attached to an ExtractionResult."""

    kind: str
    detail: str = ""

    def to_dict(self) -> dict[str, str]:
        return {"kind": self.kind, "detail": self.detail}


@dataclass(frozen=True)
class ExtractionResult:
    """One model's structured output for one description in one phase."""

    model_id: str
    phase: str
    claims: tuple[FieldClaim, ...]
    schema_valid: bool
    raw_output: str = ""
    failure: Failure | None = None
    issues: tuple[ValidationIssue, ...] = ()

    def __post_init__(self) -> None:
        if self.failure is not None and (self.claims or self.schema_valid):
            raise ValueError("failed results must carry no claims and be schema-invalid")
        names = [claim.field for claim in self.claims]
        if len(names) != len(set(names)):
            raise ValueError("claims must be duplicate-free by field name")

    def field_names(self) -> frozenset[str]:
        return frozenset(claim.field for claim in self.claims)

    def to_dict(self) -> dict[str, Any]:
        return {
            "model_id": self.model_id,
            "phase": self.phase,
            "claims": [claim.to_dict() for claim in self.claims],
            "schema_valid": self.schema_valid,
            "raw_output": self.raw_output,
            "failure": self.failure.to_dict() if self.failure else None,
            "issues": [issue.to_dict() for issue in self.issues],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ExtractionResult:
        failure = data.get("failure")
        return cls(
            model_id=str(data["model_id"]),
            phase=str(data.get("phase", PHASE_EXTRACTION)),
            claims=tuple(FieldClaim.from_dict(claim) for claim in data.get("claims", ())),
            schema_valid=bool(data.get("schema_valid", False)),
            raw_output=str(data.get("raw_output", "")),
            failure=Failure(**failure) if failure else None,
            issues=tuple(ValidationIssue(**issue) for issue in data.get("issues", ())),
        )


def render_nested_value(mapping: Mapping[str, Any]) -> str:
    """Render a nested map as a flat "key: value | key: value" string.

    Keys are canonicalized, nesting uses dotted paths, and entries are
    sorted so the rendering is deterministic for any traversal order.
    """
    leaves, _issues = _nested_leaves(mapping)
    return " | ".join(f"{path}: {value}" for path, value, _conf in sorted(leaves))


def _nested_leaves(
    mapping: Mapping[str, Any], prefix: str = ""
) -> tuple[list[tuple[str, str, float | None]], list[ValidationIssue]]:
    """Flatten a nested map into (dotted path, value, own confidence) leaves."""
    leaves: list[tuple[str, str, float | None]] = []
    issues: list[ValidationIssue] = []
    for key, value in mapping.items():
        name = canonicalize_field_name(str(key))
        if not name:
            continue
        path = f"{prefix}.{name}" if prefix else name
        wrapped = _is_envelope(value)
        leaf, confidence, conf_issues = _unwrap(value, path, default_confidence=1.0)
        issues.extend(conf_issues)
        if isinstance(leaf, Mapping):
            inner, inner_issues = _nested_leaves(leaf, path)
            leaves.extend(inner)
            issues.extend(inner_issues)
        else:
            leaves.append((path, _stringify(leaf), confidence if wrapped else None))
    return leaves, issues


def _stringify(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Mapping):
        return render_nested_value(value)
    if isinstance(value, (list, tuple)):
        return ", ".join(_stringify(item) for item in value)
    return str(value)


def _is_envelope(value: Any) -> bool:
    """True for a {"value": ...} or {"value": ..., "confidence": ...} wrapper."""
    return isinstance(value, Mapping) and "value" in value and set(value) <= {"value", "confidence"}


def _unwrap(
    value: Any, path: str, default_confidence: float
) -> tuple[Any, float, list[ValidationIssue]]:
    """Unwrap an optional {"value": ..., "confidence": ...} envelope.

    A mapping is treated as an envelope only when "value" is its sole key
    besides an optional "confidence"; anything else passes through with the
    default confidence. Out-of-range confidences are clamped and reported
    rather than rejected.
    """
    if not _is_envelope(value):
        return value, default_confidence, []
    issues: list[ValidationIssue] = []
    confidence = value.get("confidence", default_confidence)
    if isinstance(confidence, bool) or not isinstance(confidence, (int, float)):
        issues.append(
            ValidationIssue(
                KIND_MISMATCH,
                path=f"{path}.confidence",
                expected="number in [0, 1]",
                found=repr(confidence),
            )
        )
        confidence = default_confidence
    elif not 0.0 <= confidence <= 1.0:
        issues.append(
            ValidationIssue(
                KIND_MISMATCH,
                path=f"{path}.confidence",
                expected="number in [0, 1]",
                found=repr(float(confidence)),
            )
        )
        confidence = min(1.0, max(0.0, float(confidence)))
    return value["value"], float(confidence), issues


def _has_digit(text: str) -> bool:
    return any(ch.isdigit() for ch in text)


def validate_spec_document(
    document: Any,
    schema: SpecSchema,
    model_id: str,
    phase: str,
    raw_output: str | None = None,
) -> ExtractionResult:
    """Validate one parsed model document against the shared schema.

    Returns schema_valid=True iff every required field is present with its
    declared kind. Claims are populated for every field in the document;
    fields the schema does not know are retained with in_schema=False so
    surplus attributes stay countable. Never raises: structural problems
    are collected into the issues report instead.
    """
    if raw_output is None:
        raw_output = (
            json.dumps(document, sort_keys=True) if isinstance(document, Mapping) else str(document)
        )
    if not isinstance(document, Mapping):
        return ExtractionResult(
            model_id=model_id,
            phase=phase,
            claims=(),
            schema_valid=False,
            raw_output=raw_output,
            failure=Failure("parse_error", "top-level value is not an object"),
        )

    issues: list[ValidationIssue] = []
    claims: list[FieldClaim] = []
    bad_required: set[str] = set()

    for key, raw_value in document.items():
        name = canonicalize_field_name(str(key))
        if not name:
            issues.append(
                ValidationIssue(
                    KIND_MISMATCH,
                    path=str(key),
                    expected="field name containing word characters",
                    found=repr(key),
                )
            )
            continue
        kind = schema.kind_of(name)
        in_schema = kind is not None
        leaf, confidence, conf_issues = _unwrap(raw_value, name, default_confidence=1.0)
        issues.extend(conf_issues)

        if isinstance(leaf, Mapping):
            # Nested payload: one claim for the parent plus one per leaf, so
            # consensus and detail counting both have handles.
            if in_schema and kind != NESTED_MAP:
                issues.append(
                    ValidationIssue(KIND_MISMATCH, path=name, expected=kind, found="nested map")
                )
                if name in schema.required_fields:
                    bad_required.add(name)
            leaves, leaf_issues = _nested_leaves(leaf, name)
            issues.extend(leaf_issues)
            rendered = " | ".join(f"{path}: {value}" for path, value, _conf in sorted(leaves))
            claims.append(FieldClaim.make(name, rendered, confidence, model_id, phase, in_schema))
            for path, value, leaf_conf in leaves:
                claims.append(
                    FieldClaim.make(
                        path,
                        value,
                        confidence if leaf_conf is None else leaf_conf,
                        model_id,
                        phase,
                        path in schema.known_fields,
                    )
                )
        else:
            text = _stringify(leaf)
            if in_schema and kind == NESTED_MAP:
                issues.append(
                    ValidationIssue(KIND_MISMATCH, path=name, expected=kind, found=type(leaf).__name__)
                )
                if name in schema.required_fields:
                    bad_required.add(name)
            elif in_schema and kind == QUANTITY_WITH_UNIT and not _has_digit(text):
                issues.append(
                    ValidationIssue(KIND_MISMATCH, path=name, expected=kind, found=repr(text))
                )
                if name in schema.required_fields:
                    bad_required.add(name)
            elif isinstance(leaf, (list, tuple)):
                issues.append(
                    ValidationIssue(
                        KIND_MISMATCH, path=name, expected=kind or SCALAR_TEXT, found="array"
                    )
                )
                if name in schema.required_fields:
                    bad_required.add(name)
            claims.append(FieldClaim.make(name, text, confidence, model_id, phase, in_schema))

    deduped = _collapse_duplicates(claims)
    present = {claim.field for claim in deduped}
    missing = [name for name in schema.required_fields if name not in present]
    for name in missing:
        issues.append(ValidationIssue(MISSING_FIELD, path=name))

    schema_valid = not missing and not bad_required
    return ExtractionResult(
        model_id=model_id,
        phase=phase,
        claims=tuple(deduped),
        schema_valid=schema_valid,
        raw_output=raw_output,
        issues=tuple(issues),
    )


def _collapse_duplicates(claims: list[FieldClaim]) -> list[FieldClaim]:
    """Keep one claim per field: highest confidence, earliest on ties."""
    best: dict[str, FieldClaim] = {}
    for claim in claims:
        current = best.get(claim.field)
        if current is None or claim.confidence > current.confidence:
            best[claim.field] = claim
    # Preserve first-seen document order of the surviving fields.
    ordered: list[FieldClaim] = []
    seen: set[str] = set()
    for claim in claims:
        if claim.field not in seen:
            seen.add(claim.field)
            ordered.append(best[claim.field])
    return ordered
