"""Three-phase extraction pipeline.

Phase 1 fans one retrieval-grounded prompt out to every extraction provider
in parallel. Phase 2 re-queries research providers about poorly covered
required fields. Phase 3 hands everything to synthesis. Provider trouble is
recorded per model; the pipeline itself never crashes because of it.
"""

from __future__ import annotations

import json
import logging
import re
import time
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .core import (
    PHASE_EXTRACTION,
    PHASE_RESEARCH,
    ExtractionResult,
    Failure,
    PartDescription,
    SpecSchema,
)
from .gateway import (
    ROLE_EXTRACTION,
    ROLE_RESEARCH,
    ROLE_SYNTHESIS,
    PromptRequest,
    ProviderConfig,
    ProviderResponse,
    failure_to_result,
    invoke,
    parse_structured_output,
)
from .retrieval import FlatIndex, RetrievedContext, search_top_k
from .synthesis import (
    DEFAULT_CONFIDENCE_WEIGHTS,
    SynthesizedSpec,
    schema_instruction_text,
    synthesize_spec,
)

logger = logging.getLogger(__name__)

__all__ = [
    "ConfigError",
    "EnsembleConfig",
    "QuorumFailure",
    "PipelineResult",
    "build_prompt",
    "extract_phase",
    "identify_gaps",
    "research_phase",
    "run_pipeline",
]

DEFAULT_K = 5
DEFAULT_THRESHOLD = 0.25
DEFAULT_MIN_QUORUM = 2
DEFAULT_GAP_CONFIDENCE_FLOOR = 0.6

_ENV_NAME = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")

_CONFIG_KEYS = {
    "roster",
    "synthesis_model",
    "research_models",
    "k",
    "threshold",
    "min_quorum",
    "gap_confidence_floor",
    "confidence_weights",
}
_PROVIDER_KEYS = {
    "model_id",
    "kind",
    "endpoint",
    "credentials_env",
    "timeout",
    "max_retries",
    "role_tags",
    "fixtures_dir",
}


class ConfigError(ValueError):
    """Invalid ensemble configuration."""


@dataclass(frozen=True)
class EnsembleConfig:
    """Static description of the ensemble: who to call and how to combine.

    Credentials never live here; each provider names an environment variable
    instead. Loading rejects unknown keys outright so a secret pasted into a
    config file fails fast instead of being silently shipped around.
    """

    roster: tuple[ProviderConfig, ...]
    synthesis_model: str
    research_models: tuple[str, ...] = ()
    k: int = DEFAULT_K
    threshold: float = DEFAULT_THRESHOLD
    min_quorum: int = DEFAULT_MIN_QUORUM
    gap_confidence_floor: float = DEFAULT_GAP_CONFIDENCE_FLOOR
    confidence_weights: tuple[float, float, float] = DEFAULT_CONFIDENCE_WEIGHTS

    def __post_init__(self) -> None:
        if not self.roster:
            raise ConfigError("roster must be non-empty")
        ids = [provider.model_id for provider in self.roster]
        if len(set(ids)) != len(ids):
            raise ConfigError("roster model ids must be unique")
        by_id = {provider.model_id: provider for provider in self.roster}
        synth = by_id.get(self.synthesis_model)
        if synth is None:
            raise ConfigError(f"synthesis_model {self.synthesis_model!r} is not in the roster")
        if ROLE_SYNTHESIS not in synth.role_tags:
            raise ConfigError(f"synthesis_model {self.synthesis_model!r} lacks the synthesis role")
        for model_id in self.research_models:
            provider = by_id.get(model_id)
            if provider is None:
                raise ConfigError(f"research model {model_id!r} is not in the roster")
            if ROLE_RESEARCH not in provider.role_tags:
                raise ConfigError(f"research model {model_id!r} lacks the research role")
        if self.k < 0:
            raise ConfigError("k must be >= 0")
        if not 1 <= self.min_quorum <= len(self.roster):
            raise ConfigError(
                f"min_quorum must be within [1, {len(self.roster)}], got {self.min_quorum}"
            )
        if not 0.0 <= self.gap_confidence_floor <= 1.0:
            raise ConfigError("gap_confidence_floor must be within [0, 1]")
        weights = tuple(float(w) for w in self.confidence_weights)
        if len(weights) != 3 or any(w < 0 for w in weights):
            raise ConfigError("confidence_weights must be three non-negative numbers")
        if abs(sum(weights) - 1.0) > 1e-9:
            raise ConfigError(f"confidence_weights must sum to 1, got {sum(weights)}")
        object.__setattr__(self, "confidence_weights", weights)
        object.__setattr__(self, "research_models", tuple(self.research_models))

    def provider(self, model_id: str) -> ProviderConfig | None:
        for provider in self.roster:
            if provider.model_id == model_id:
                return provider
        return None

    def roster_order(self) -> tuple[str, ...]:
        return tuple(provider.model_id for provider in self.roster)

    def extraction_providers(self) -> tuple[ProviderConfig, ...]:
        return tuple(p for p in self.roster if ROLE_EXTRACTION in p.role_tags)

    def research_providers(self) -> tuple[ProviderConfig, ...]:
        if self.research_models:
            wanted = set(self.research_models)
            return tuple(p for p in self.roster if p.model_id in wanted)
        return tuple(p for p in self.roster if ROLE_RESEARCH in p.role_tags)

    @classmethod
    def from_dict(
        cls, data: Mapping[str, Any], base_dir: str | Path | None = None
    ) -> EnsembleConfig:
        """Build from the documented JSON shape; unknown keys are errors.

        Relative fixtures_dir paths resolve against base_dir (normally the
        config file's directory) so configs stay relocatable.
        """
        if not isinstance(data, Mapping):
            raise ConfigError("config must be a JSON object")
        unknown = set(data) - _CONFIG_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        raw_roster = data.get("roster")
        if not isinstance(raw_roster, Sequence) or isinstance(raw_roster, (str, bytes)):
            raise ConfigError("roster must be an array of provider objects")
        roster = tuple(_provider_from_dict(entry, base_dir) for entry in raw_roster)
        if "synthesis_model" not in data:
            raise ConfigError("synthesis_model is required")
        research = data.get("research_models")
        if research is None:
            research = tuple(
                p.model_id for p in roster if ROLE_RESEARCH in p.role_tags
            )
        try:
            return cls(
                roster=roster,
                synthesis_model=str(data["synthesis_model"]),
                research_models=tuple(str(m) for m in research),
                k=int(data.get("k", DEFAULT_K)),
                threshold=float(data.get("threshold", DEFAULT_THRESHOLD)),
                min_quorum=int(data.get("min_quorum", DEFAULT_MIN_QUORUM)),
                gap_confidence_floor=float(
                    data.get("gap_confidence_floor", DEFAULT_GAP_CONFIDENCE_FLOOR)
                ),
                confidence_weights=tuple(
                    data.get("confidence_weights", DEFAULT_CONFIDENCE_WEIGHTS)
                ),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path: str | Path) -> EnsembleConfig:
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        return cls.from_dict(data, base_dir=path.parent)


def _provider_from_dict(
    entry: Any, base_dir: str | Path | None
) -> ProviderConfig:
    if not isinstance(entry, Mapping):
        raise ConfigError("each roster entry must be an object")
    unknown = set(entry) - _PROVIDER_KEYS
    if unknown:
        raise ConfigError(f"unknown provider keys: {sorted(unknown)}")
    credentials_env = entry.get("credentials_env")
    if credentials_env is not None and not _ENV_NAME.fullmatch(str(credentials_env)):
        # Refuse anything that is not an environment variable NAME: this is
        # where a pasted literal API key would otherwise end up.
        raise ConfigError(
            f"credentials_env {str(credentials_env)[:8]!r}... must name an environment "
            "variable; never put key material in a config file"
        )
    fixtures_dir = entry.get("fixtures_dir")
    if fixtures_dir is not None and base_dir is not None:
        fixtures_path = Path(fixtures_dir)
        if not fixtures_path.is_absolute():
            fixtures_dir = str(Path(base_dir) / fixtures_path)
    try:
        return ProviderConfig(
            model_id=str(entry.get("model_id", "")),
            kind=str(entry.get("kind", "")),
            endpoint=entry.get("endpoint"),
            credentials_env=credentials_env,
            timeout=float(entry.get("timeout", 60.0)),
            max_retries=int(entry.get("max_retries", 2)),
            role_tags=frozenset(entry.get("role_tags", (ROLE_EXTRACTION,))),
            fixtures_dir=fixtures_dir,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


@dataclass(frozen=True)
class QuorumFailure:
    """Recorded when too few schema-valid results arrived to synthesize."""

    successes: int
    min_quorum: int

    def to_dict(self) -> dict[str, int]:
        return {"successes": self.successes, "min_quorum": self.min_quorum}


@dataclass(frozen=True)
class PipelineResult:
    """Everything one pipeline run produced, serializable for audit.

    Timings are wall-clock and therefore excluded from serialization by
    default: with replay providers the rest of the result is byte-for-byte
    reproducible.
    """

    description_id: str
    phase1_results: tuple[ExtractionResult, ...]
    phase2_results: tuple[ExtractionResult, ...]
    extraction_context: RetrievedContext
    research_context: RetrievedContext | None
    final: SynthesizedSpec | None
    quorum_failure: QuorumFailure | None
    timings: Mapping[str, float] = field(default_factory=dict)

    def to_dict(self, include_timings: bool = False) -> dict[str, Any]:
        data: dict[str, Any] = {
            "description_id": self.description_id,
            "phase1_results": [result.to_dict() for result in self.phase1_results],
            "phase2_results": [result.to_dict() for result in self.phase2_results],
            "context_used": {
                "extraction": self.extraction_context.to_dict(),
                "research": self.research_context.to_dict() if self.research_context else None,
            },
            "final": self.final.to_dict() if self.final else None,
            "quorum_failure": self.quorum_failure.to_dict() if self.quorum_failure else None,
        }
        if include_timings:
            data["timings"] = dict(self.timings)
        return data

    def to_json(self, include_timings: bool = False, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(include_timings), indent=indent, sort_keys=True)


def build_prompt(
    description: PartDescription,
    context: RetrievedContext,
    schema: SpecSchema,
    focus_fields: Sequence[str] = (),
    phase: str = PHASE_EXTRACTION,
) -> PromptRequest:
    """Assemble the deterministic prompt for one description.

    The user text is a DESCRIPTION block, one REFERENCE block per retrieved
    hit (similarity to four decimals, descending), and for the research
    phase a FOCUS block listing the fields to pin down.
    """
    blocks = [f"DESCRIPTION:\n{description.text.strip()}"]
    for position, hit in enumerate(context.hits, start=1):
        blocks.append(f"REFERENCE {position} (similarity {hit.similarity:.4f}):\n{hit.snippet}")
    if phase == PHASE_RESEARCH and focus_fields:
        focus = "\n".join(f"- {name}" for name in focus_fields)
        blocks.append(f"FOCUS:\n{focus}")
    return PromptRequest(
        system_text=schema_instruction_text(schema),
        user_text="\n\n".join(blocks),
        response_schema=schema,
    )


def _fan_out(
    providers: Sequence[ProviderConfig],
    request: PromptRequest,
    schema: SpecSchema,
    phase: str,
    invoke_fn: Callable[..., Any],
    env: Mapping[str, str] | None,
) -> list[ExtractionResult]:
    """Call every provider concurrently; results come back in roster order."""

    def call(provider: ProviderConfig) -> ExtractionResult:
        try:
            outcome = invoke_fn(provider, request, env=env)
            if isinstance(outcome, ProviderResponse):
                return parse_structured_output(outcome, schema, phase)
            return failure_to_result(outcome, phase)
        except Exception as exc:  # noqa: BLE001 - one bad provider must not sink the phase
            logger.warning("provider %s raised %s", provider.model_id, exc)
            return ExtractionResult(
                model_id=provider.model_id,
                phase=phase,
                claims=(),
                schema_valid=False,
                failure=Failure("transport", f"unhandled provider error: {exc}"),
            )

    if not providers:
        return []
    with ThreadPoolExecutor(max_workers=len(providers)) as pool:
        return list(pool.map(call, providers))


def extract_phase(
    description: PartDescription,
    config: EnsembleConfig,
    index: FlatIndex,
    schema: SpecSchema,
    *,
    invoke_fn: Callable[..., Any] = invoke,
    env: Mapping[str, str] | None = None,
) -> tuple[list[ExtractionResult], RetrievedContext]:
    """Phase 1: one grounded prompt to every extraction provider, in parallel."""
    context = search_top_k(index, description.text, config.k, config.threshold)
    request = build_prompt(description, context, schema, (), PHASE_EXTRACTION)
    results = _fan_out(
        config.extraction_providers(), request, schema, PHASE_EXTRACTION, invoke_fn, env
    )
    return results, context


def identify_gaps(
    results: Sequence[ExtractionResult],
    schema: SpecSchema,
    config: EnsembleConfig,
) -> list[str]:
    """Required fields still needing research after phase 1.

    A field counts as covered by an output only with a non-empty value (an
    empty string is schema-tolerable but carries no information). A field is
    a gap when fewer than half of the schema-valid outputs cover it, or when
    no covering claim reaches the configured confidence floor.
    """
    valid = [result for result in results if result.schema_valid]
    gaps: list[str] = []
    for name in schema.required_fields:
        covering = [
            claim
            for result in valid
            for claim in result.claims
            if claim.field == name and claim.canonical_value
        ]
        holders = len({claim.source_model for claim in covering})
        best = max((claim.confidence for claim in covering), default=0.0)
        if 2 * holders < len(valid) or best < config.gap_confidence_floor:
            gaps.append(name)
    return sorted(gaps)


def research_phase(
    description: PartDescription,
    gaps: Sequence[str],
    config: EnsembleConfig,
    index: FlatIndex,
    schema: SpecSchema,
    *,
    invoke_fn: Callable[..., Any] = invoke,
    env: Mapping[str, str] | None = None,
) -> tuple[list[ExtractionResult], RetrievedContext]:
    """Phase 2: re-retrieve with the gap fields appended and ask researchers."""
    query = description.text + " " + " ".join(gaps)
    context = search_top_k(index, query, config.k, config.threshold)
    request = build_prompt(description, context, schema, tuple(gaps), PHASE_RESEARCH)
    results = _fan_out(
        config.research_providers(), request, schema, PHASE_RESEARCH, invoke_fn, env
    )
    return results, context


def run_pipeline(
    description: PartDescription,
    config: EnsembleConfig,
    index: FlatIndex,
    schema: SpecSchema,
    *,
    invoke_fn: Callable[..., Any] = invoke,
    env: Mapping[str, str] | None = None,
) -> PipelineResult:
    """Run extraction, optional research, and synthesis for one description.

    Too few schema-valid phase-1 outputs short-circuits to a quorum failure
    (research and synthesis are skipped); `final` is present exactly when
    the quorum was met.
    """
    t0 = time.perf_counter()
    phase1, extraction_context = extract_phase(
        description, config, index, schema, invoke_fn=invoke_fn, env=env
    )
    t1 = time.perf_counter()

    successes = sum(1 for result in phase1 if result.schema_valid)
    if successes < config.min_quorum:
        logger.warning(
            "quorum not met for %s: %d of %d required",
            description.id,
            successes,
            config.min_quorum,
        )
        return PipelineResult(
            description_id=description.id,
            phase1_results=tuple(phase1),
            phase2_results=(),
            extraction_context=extraction_context,
            research_context=None,
            final=None,
            quorum_failure=QuorumFailure(successes, config.min_quorum),
            timings={"extraction": t1 - t0, "research": 0.0, "synthesis": 0.0, "total": t1 - t0},
        )

    gaps = identify_gaps(phase1, schema, config)
    phase2: list[ExtractionResult] = []
    research_context: RetrievedContext | None = None
    if gaps:
        phase2, research_context = research_phase(
            description, gaps, config, index, schema, invoke_fn=invoke_fn, env=env
        )
    t2 = time.perf_counter()

    final = synthesize_spec(
        list(phase1) + phase2,
        extraction_context,
        config,
        schema,
        description_id=description.id,
        invoke_fn=invoke_fn,
        env=env,
    )
    t3 = time.perf_counter()
    return PipelineResult(
        description_id=description.id,
        phase1_results=tuple(phase1),
        phase2_results=tuple(phase2),
        extraction_context=extraction_context,
        research_context=research_context,
        final=final,
        quorum_failure=None,
        timings={
            "extraction": t1 - t0,
            "research": t2 - t1,
            "synthesis": t3 - t2,
            "total": t3 - t0,
        },
    )
