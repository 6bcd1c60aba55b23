"""Prompt refinement machinery: instruction building, reply parsing, history.

The refinement instruction is a fixed text asset with named placeholders
(``<subject>``, ``<current_prompt>``, ``<memory_to_replace>``, ...).
Building an instruction substitutes every occurrence of every
placeholder; when there is no previous generation the segment "B" line
is dropped, and when memory is disabled every line mentioning the
history placeholder is dropped.  Any placeholder the builder does not
know is an error, never silently left in.

Replies come back as free text that should contain one JSON object with
an "analysis" block and a "refined_prompt".  The parser extracts the
first balanced-brace object outside string literals, so code fences and
surrounding prose are fine.  All parse failures are retryable: the
caller may simply ask the model again.

Refined prompts only get accepted when they still contain the fixed
subject and environment (case-insensitive, whitespace-normalized
substring).  A violating reply keeps the previous prompt.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

TEMPLATE_RESOURCE = "instruction.txt"
MEMORY_EMPTY = "none"
COMPARISON_DIGEST_LIMIT = 500

_PLACEHOLDER_RE = re.compile(r"<([a-z_]+)>")
_KNOWN_PLACEHOLDERS = frozenset(
    {
        "desired_visual_effect",
        "last_text_prompt",
        "current_text_prompt",
        "subject",
        "environment",
        "current_prompt",
        "memory_to_replace",
    }
)
_B_SEGMENT_MARKER = '"B" (middle, if present)'
_MEMORY_MARKER = "<memory_to_replace>"


class TemplateError(ValueError):
    """Instruction template contains a placeholder the builder cannot fill."""


class VlmParseError(ValueError):
    """Reply could not be turned into a valid analysis; safe to re-ask."""


class NoJsonObjectError(VlmParseError):
    pass


class MissingKeysError(VlmParseError):
    pass


class EmptyRefinedPromptError(VlmParseError):
    pass


class UnexpectedKeyError(VlmParseError):
    pass


class TrajectoryError(ValueError):
    """History update violates the append-only contract."""


@dataclass(frozen=True)
class PromptState:
    """Fixed and moving prompt pieces for one optimization run."""

    subject: str
    environment: str
    desired_effect: str
    current_prompt: str
    last_prompt: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.current_prompt:
            raise ValueError("current_prompt must be non-empty")


@dataclass(frozen=True)
class VlmAnalysis:
    reference_description: str
    new_generated_description: str
    comparison: str
    refined_prompt: str
    last_generated_description: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.refined_prompt:
            raise EmptyRefinedPromptError("refined_prompt must be non-empty")

    def to_dict(self) -> dict:
        out = {
            "reference_description": self.reference_description,
            "new_generated_description": self.new_generated_description,
            "comparison": self.comparison,
            "refined_prompt": self.refined_prompt,
        }
        if self.last_generated_description is not None:
            out["last_generated_description"] = self.last_generated_description
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "VlmAnalysis":
        return cls(
            reference_description=data.get("reference_description", ""),
            new_generated_description=data.get("new_generated_description", ""),
            comparison=data.get("comparison", ""),
            refined_prompt=data["refined_prompt"],
            last_generated_description=data.get("last_generated_description"),
        )


@dataclass(frozen=True)
class TrajectoryEntry:
    iteration: int
    prompt: str
    analysis: VlmAnalysis
    video_ref: str
    accepted: bool = True


@dataclass
class Trajectory:
    """Append-only refinement history, capped at the configured iteration budget."""

    max_length: int
    entries: list = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.max_length < 1:
            raise ValueError(f"max_length must be >= 1, got {self.max_length}")

    def __len__(self) -> int:
        return len(self.entries)


def update_history(
    trajectory: Trajectory,
    prompt: str,
    analysis: VlmAnalysis,
    video_ref: str,
    accepted: bool = True,
) -> TrajectoryEntry:
    """Append the next entry; iterations stay contiguous from zero."""
    if len(trajectory.entries) >= trajectory.max_length:
        raise TrajectoryError(f"trajectory already holds {trajectory.max_length} entries")
    entry = TrajectoryEntry(
        iteration=len(trajectory.entries),
        prompt=prompt,
        analysis=analysis,
        video_ref=video_ref,
        accepted=accepted,
    )
    trajectory.entries.append(entry)
    return entry


def memory_digest(trajectory: Trajectory) -> str:
    """Plain-text history the instruction embeds; one numbered line per entry."""
    if not trajectory.entries:
        return MEMORY_EMPTY
    lines = []
    for entry in trajectory.entries:
        comparison = entry.analysis.comparison[:COMPARISON_DIGEST_LIMIT]
        lines.append(f"iteration {entry.iteration} - prompt: {entry.prompt} | comparison: {comparison}")
    return "\n".join(lines)


def select_visual_context(reference, current, previous=None) -> list:
    """The clips the VLM sees: reference, previous generation (if any), current."""
    context = [reference]
    if previous is not None:
        context.append(previous)
    context.append(current)
    return context


def load_instruction_template() -> str:
    return (
        resources.files("vfxopt.templates").joinpath(TEMPLATE_RESOURCE).read_text(encoding="utf-8")
    )


def build_instruction(
    state: PromptState,
    digest: str,
    has_previous: bool,
    template: Optional[str] = None,
    include_memory: bool = True,
) -> str:
    """Fill the instruction template for one refinement call.

    `digest` is the serialized history (see memory_digest).  With
    has_previous False the segment "B" input line is dropped; with
    include_memory False every history line is dropped instead of
    substituted.
    """
    text = template if template is not None else load_instruction_template()

    unknown = set(_PLACEHOLDER_RE.findall(text)) - _KNOWN_PLACEHOLDERS
    if unknown:
        raise TemplateError(f"template has unfillable placeholders: {sorted(unknown)}")

    lines = []
    for line in text.splitlines():
        if not has_previous and _B_SEGMENT_MARKER in line:
            continue
        if not include_memory and _MEMORY_MARKER in line:
            continue
        lines.append(line)
    text = "\n".join(lines)

    values = {
        "desired_visual_effect": state.desired_effect,
        "last_text_prompt": state.last_prompt or "",
        "current_text_prompt": state.current_prompt,
        "subject": state.subject,
        "environment": state.environment,
        "current_prompt": state.current_prompt,
        "memory_to_replace": digest,
    }
    for name, value in values.items():
        text = text.replace(f"<{name}>", value)

    leftover = set(_PLACEHOLDER_RE.findall(text)) & _KNOWN_PLACEHOLDERS
    if leftover:
        raise TemplateError(f"placeholders survived substitution: {sorted(leftover)}")
    return text


def _scan_balanced_object(text: str, start: int) -> Optional[str]:
    depth = 0
    in_string = False
    escaped = False
    for j in range(start, len(text)):
        ch = text[j]
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
        elif ch == '"':
            in_string = True
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return text[start : j + 1]
    return None


def extract_first_json_object(text: str) -> dict:
    """First balanced {...} (braces inside strings ignored) that parses as JSON."""
    i = text.find("{")
    while i != -1:
        candidate = _scan_balanced_object(text, i)
        if candidate is not None:
            try:
                parsed = json.loads(candidate)
                if isinstance(parsed, dict):
                    return parsed
            except json.JSONDecodeError:
                pass
        i = text.find("{", i + 1)
    raise NoJsonObjectError("no parseable JSON object in reply")


def parse_vlm_response(raw: str, has_previous: Optional[bool] = None) -> VlmAnalysis:
    """Validate a reply into a VlmAnalysis.

    When `has_previous` is given, the presence of
    last_generated_description must match it exactly.
    """
    payload = extract_first_json_object(raw)
    missing = {"analysis", "refined_prompt"} - set(payload)
    if missing:
        raise MissingKeysError(f"reply lacks keys: {sorted(missing)}")
    analysis = payload["analysis"]
    if not isinstance(analysis, dict):
        raise MissingKeysError("analysis must be a JSON object")
    refined = payload["refined_prompt"]
    if not isinstance(refined, str) or not refined.strip():
        raise EmptyRefinedPromptError("refined_prompt is empty")

    has_last = "last_generated_description" in analysis
    if has_previous is True and not has_last:
        raise MissingKeysError("last_generated_description required when a previous video exists")
    if has_previous is False and has_last:
        raise UnexpectedKeyError("last_generated_description present without a previous video")

    return VlmAnalysis(
        reference_description=str(analysis.get("reference_description", "")),
        new_generated_description=str(analysis.get("new_generated_description", "")),
        comparison=str(analysis.get("comparison", "")),
        refined_prompt=refined,
        last_generated_description=(
            str(analysis["last_generated_description"]) if has_last else None
        ),
    )


def _normalize(text: str) -> str:
    return " ".join(text.split()).lower()


@dataclass(frozen=True)
class ConstraintCheck:
    accepted: bool
    prompt: str
    violations: tuple = ()


def enforce_content_constraints(state: PromptState, refined_prompt: str) -> ConstraintCheck:
    """Accept the refined prompt only if subject and environment survive in it.

    On violation the previous prompt is carried forward unchanged.
    """
    haystack = _normalize(refined_prompt)
    violations = []
    for name, needle in (("subject", state.subject), ("environment", state.environment)):
        if needle and _normalize(needle) not in haystack:
            violations.append(name)
    if violations:
        return ConstraintCheck(accepted=False, prompt=state.current_prompt, violations=tuple(violations))
    return ConstraintCheck(accepted=True, prompt=refined_prompt)
