"""The eight approach configurations and their execution loops.

Simple variants make one generation call over engineered (or minimal)
context. Agent variants alternate generation with sandboxed command
execution until a final answer or the step limit. Both record a trajectory:
the strictly ordered list of prompt, generations, tool calls, tool outputs,
and a terminal final_answer or failure event.

Answer protocol: every prompt instructs the model to end with a line
``ANSWER: <category>``; extraction is case-insensitive against the allowed
set and falls back to a bare category name (the no-CoT reply shape).
"""

from __future__ import annotations

import re
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Protocol, Sequence

from . import accounting, tasks
from .gateway import (
    RUN_BASH_TOOL,
    ContextOverflowError,
    FailureKind,
    GenerationParams,
    Message,
    ProviderError,
    StopReason,
    Turn,
    Usage,
)
from .sandbox import ExecutionLimits, ToolResult


class ApproachKind(str, Enum):
    SIMPLE_COT = "simple_cot"
    SIMPLE_NOCOT = "simple_nocot"
    SIMPLE_MEMORIZATION = "simple_memorization"
    AGENT_STOPSEQ = "agent_stopseq"
    AGENT_NATIVE = "agent_native"

    @property
    def is_agent(self) -> bool:
        return self in (ApproachKind.AGENT_STOPSEQ, ApproachKind.AGENT_NATIVE)

    @property
    def is_simple(self) -> bool:
        return not self.is_agent

    @property
    def context_kind(self) -> str:
        if self is ApproachKind.SIMPLE_MEMORIZATION:
            return "memorization"
        return "agent" if self.is_agent else "simple"

    @property
    def eligible_for_triage(self) -> bool:
        """Non-experimental approaches only: memorization and no-CoT are
        excluded from disagreement analysis."""
        return self not in (ApproachKind.SIMPLE_NOCOT, ApproachKind.SIMPLE_MEMORIZATION)


@dataclass(frozen=True)
class ApproachVariant:
    name: str
    kind: ApproachKind
    model_id: str
    step_limit: int = 50

    def __post_init__(self) -> None:
        if self.step_limit < 1:
            raise ValueError("step_limit must be >= 1")


#: The eight configurations compared in the shipped fixtures.
DEFAULT_VARIANTS: tuple[ApproachVariant, ...] = (
    ApproachVariant("simple-sonnet", ApproachKind.SIMPLE_COT, "claude-3.7-sonnet"),
    ApproachVariant("simple-sonnet-nocot", ApproachKind.SIMPLE_NOCOT, "claude-3.7-sonnet"),
    ApproachVariant("simple-sonnet-memo", ApproachKind.SIMPLE_MEMORIZATION, "claude-3.7-sonnet"),
    ApproachVariant("simple-llama", ApproachKind.SIMPLE_COT, "llama-3.3-70b"),
    ApproachVariant("simple-mistral", ApproachKind.SIMPLE_COT, "mistral-large-3"),
    ApproachVariant("agent-sonnet-native", ApproachKind.AGENT_NATIVE, "claude-3.7-sonnet"),
    ApproachVariant("agent-sonnet-stopseq", ApproachKind.AGENT_STOPSEQ, "claude-3.7-sonnet"),
    ApproachVariant("agent-mistral", ApproachKind.AGENT_NATIVE, "mistral-large-3"),
)


def variants_from_specs(specs: Sequence[dict[str, Any]]) -> tuple[ApproachVariant, ...]:
    out = []
    for spec in specs:
        out.append(ApproachVariant(
            name=spec["name"],
            kind=ApproachKind(spec["kind"]),
            model_id=spec["model"],
            step_limit=int(spec.get("step_limit", 50)),
        ))
    return tuple(out)


BASH_OPEN = "<bash>"
BASH_CLOSE = "</bash>"

#: Per-turn generation parameters. 4096 output tokens everywhere except the
#: no-CoT variant (16); the stop-sequence agent halts generation at the
#: closing tag.
def params_for(variant: ApproachVariant) -> GenerationParams:
    if variant.kind is ApproachKind.SIMPLE_NOCOT:
        return GenerationParams(temperature=1.0, max_output_tokens=16)
    stops = (BASH_CLOSE,) if variant.kind is ApproachKind.AGENT_STOPSEQ else ()
    return GenerationParams(temperature=1.0, max_output_tokens=4096, stop_sequences=stops)


class EventKind(str, Enum):
    PROMPT = "prompt"
    GENERATION = "generation"
    TOOL_CALL = "tool_call"
    TOOL_OUTPUT = "tool_output"
    FINAL_ANSWER = "final_answer"
    FAILURE = "failure"


@dataclass(frozen=True)
class TrajectoryEvent:
    index: int
    kind: EventKind
    payload: str
    usage: Usage | None = None


def check_event_order(events: Sequence[TrajectoryEvent]) -> None:
    """Assert the trajectory ordering invariant: indices strictly ordered,
    every tool_call followed by exactly one tool_output, and at most one
    terminal final_answer/failure event, in last position."""
    for i, ev in enumerate(events):
        if ev.index != i:
            raise AssertionError(f"event {i} has index {ev.index}")
    terminal = [e for e in events if e.kind in (EventKind.FINAL_ANSWER, EventKind.FAILURE)]
    if len(terminal) > 1:
        raise AssertionError("more than one terminal event")
    if terminal and events[-1] is not terminal[0]:
        raise AssertionError("terminal event is not last")
    for i, ev in enumerate(events):
        if ev.kind is EventKind.TOOL_CALL:
            if i + 1 >= len(events) or events[i + 1].kind is not EventKind.TOOL_OUTPUT:
                raise AssertionError(f"tool_call at {i} not followed by tool_output")
        if ev.kind is EventKind.TOOL_OUTPUT:
            if i == 0 or events[i - 1].kind is not EventKind.TOOL_CALL:
                raise AssertionError(f"tool_output at {i} not preceded by tool_call")


@dataclass(frozen=True)
class Outcome:
    predicted: str | None
    failure: FailureKind | None
    steps_used: int
    command_count: int
    usage_total: Usage
    wall_time_s: float

    def __post_init__(self) -> None:
        if (self.predicted is None) == (self.failure is None):
            raise ValueError("exactly one of predicted/failure must be set")


class WorkspaceLike(Protocol):
    def execute(self, command: str, limits: ExecutionLimits | None = None) -> ToolResult: ...


# ---------------------------------------------------------------------------
# Parsing helpers


def parse_stop_sequence_call(text: str) -> str | None:
    """Extract the verbatim content between the first ``<bash>`` and its
    closing tag; None when no well-formed pair exists (unclosed tags are
    treated as non-call generations)."""
    start = text.find(BASH_OPEN)
    if start < 0:
        return None
    end = text.find(BASH_CLOSE, start + len(BASH_OPEN))
    if end < 0:
        return None
    return text[start + len(BASH_OPEN): end]


_ANSWER_RE = re.compile(r"answer\s*:\s*(.+)", re.IGNORECASE)


def _clean_candidate(raw: str) -> str:
    return raw.strip().strip("*_`'\"").rstrip(".!,;:").strip().lower()


def extract_answer(text: str, task: tasks.Task, variant_kind: ApproachKind | str) -> str | None:
    """Match the final declared answer against the allowed category set,
    case-insensitively. Memorization never allows 'unclear'. Returns the
    canonical category name, or None when nothing matches (invalid)."""
    kind = ApproachKind(variant_kind)
    include_unclear = task.allow_unclear and kind is not ApproachKind.SIMPLE_MEMORIZATION
    allowed = {c.lower(): c for c in task.answer_options(include_unclear=include_unclear)}

    matches = _ANSWER_RE.findall(text)
    if matches:
        return allowed.get(_clean_candidate(matches[-1]))
    # No marker: accept a bare category (the no-CoT reply shape).
    stripped = _clean_candidate(text)
    if stripped in allowed:
        return allowed[stripped]
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if lines:
        return allowed.get(_clean_candidate(lines[-1]))
    return None


def frame_tool_output(result: ToolResult) -> str:
    """Fixed framing so the model can tell tool output from its own text.
    Deterministic: no timing information is included."""
    parts = [f"[tool output, exit code {result.exit_code}"
             + (", timed out" if result.timed_out else "") + "]"]
    if result.stdout:
        parts.append(result.stdout)
    if result.stderr:
        parts.append("[stderr]\n" + result.stderr)
    if not result.stdout and not result.stderr:
        parts.append("(no output)")
    return "\n".join(parts)


# ---------------------------------------------------------------------------
# Execution


class _Recorder:
    def __init__(self) -> None:
        self.events: list[TrajectoryEvent] = []

    def add(self, kind: EventKind, payload: str, usage: Usage | None = None) -> None:
        self.events.append(TrajectoryEvent(len(self.events), kind, payload, usage))


def render_messages(messages: Sequence[Message]) -> str:
    return "\n".join(f"<<{m.role}{' cache' if m.cache else ''}>>\n{m.content}"
                     for m in messages)


def _finish(rec: _Recorder, predicted: str | None, failure: FailureKind | None,
            steps: int, commands: int, usage: Usage, started: float,
            detail: str = "") -> tuple[Outcome, list[TrajectoryEvent]]:
    if failure is None:
        rec.add(EventKind.FINAL_ANSWER, predicted or "")
    else:
        rec.add(EventKind.FAILURE, failure.value + (f": {detail}" if detail else ""))
    outcome = Outcome(
        predicted=predicted,
        failure=failure,
        steps_used=steps,
        command_count=commands,
        usage_total=usage,
        wall_time_s=time.perf_counter() - started,
    )
    return outcome, rec.events


def run_simple(task: tasks.Task, sample: tasks.Sample, variant: ApproachVariant,
               gateway: Any) -> tuple[Outcome, list[TrajectoryEvent]]:
    """One generation over the engineered or minimal prompt; the answer is
    extracted from the single reply."""
    if not variant.kind.is_simple:
        raise ValueError(f"run_simple got agent variant {variant.name!r}")
    started = time.perf_counter()
    rec = _Recorder()

    bundle = tasks.assemble_context(task, sample, variant.kind.context_kind)
    messages = tasks.build_prompt(task, bundle, variant)
    rec.add(EventKind.PROMPT, render_messages(messages))

    try:
        turn: Turn = gateway.generate(messages, params_for(variant))
    except ContextOverflowError as exc:
        return _finish(rec, None, FailureKind.CONTEXT_OVERFLOW, 0, 0, Usage(),
                       started, str(exc))
    except ProviderError as exc:
        return _finish(rec, None, FailureKind.PROVIDER_ERROR, 0, 0, Usage(),
                       started, str(exc))

    rec.add(EventKind.GENERATION, turn.text, turn.usage)
    predicted = extract_answer(turn.text, task, variant.kind)
    if predicted is None:
        return _finish(rec, None, FailureKind.INVALID_CATEGORY, 0, 0, turn.usage, started)
    return _finish(rec, predicted, None, 0, 0, turn.usage, started)


def _native_call_text(turn: Turn) -> str:
    assert turn.native_tool_call is not None
    _, args = turn.native_tool_call
    command = str(args.get("command", ""))
    call = f'<tool_call name="run-bash">{command}</tool_call>'
    return (turn.text + "\n" + call) if turn.text else call


def run_agent(task: tasks.Task, sample: tasks.Sample, variant: ApproachVariant,
              gateway: Any, workspace: WorkspaceLike,
              limits: ExecutionLimits | None = None,
              cache_grid_step: int | None = None) -> tuple[Outcome, list[TrajectoryEvent]]:
    """The agentic loop: generate, extract a command, execute it in the
    sandbox, append the output, repeat until a final answer or the step
    limit. Tool errors are appended as output and never abort the loop.

    ``cache_grid_step`` enables grid cache marking for backends that support
    it (stop-sequence agents on caching models).
    """
    if not variant.kind.is_agent:
        raise ValueError(f"run_agent got simple variant {variant.name!r}")
    started = time.perf_counter()
    rec = _Recorder()
    stopseq = variant.kind is ApproachKind.AGENT_STOPSEQ
    params = params_for(variant)

    bundle = tasks.assemble_context(task, sample, "agent")
    messages: list[Message] = list(tasks.build_prompt(task, bundle, variant))
    rec.add(EventKind.PROMPT, render_messages(messages))

    usage_total = Usage()
    steps = 0
    commands = 0

    while True:
        request = (accounting.mark_cache_points(messages, cache_grid_step)
                   if cache_grid_step else messages)
        try:
            if stopseq:
                turn: Turn = gateway.generate(request, params)
            else:
                turn = gateway.generate_with_tools(request, [RUN_BASH_TOOL], params)
        except ContextOverflowError as exc:
            return _finish(rec, None, FailureKind.CONTEXT_OVERFLOW, steps, commands,
                           usage_total, started, str(exc))
        except ProviderError as exc:
            return _finish(rec, None, FailureKind.PROVIDER_ERROR, steps, commands,
                           usage_total, started, str(exc))

        usage_total = usage_total + turn.usage
        rec.add(EventKind.GENERATION, turn.text, turn.usage)

        if stopseq:
            command = parse_stop_sequence_call(turn.text)
            assistant_text = turn.text
        elif turn.stop_reason is StopReason.TOOL_CALL:
            command = str(turn.native_tool_call[1].get("command", ""))  # type: ignore[index]
            assistant_text = _native_call_text(turn)
        else:
            command = None
            assistant_text = turn.text

        if command is None:
            predicted = extract_answer(turn.text, task, variant.kind)
            if predicted is None:
                return _finish(rec, None, FailureKind.INVALID_CATEGORY, steps, commands,
                               usage_total, started)
            return _finish(rec, predicted, None, steps, commands, usage_total, started)

        rec.add(EventKind.TOOL_CALL, command)
        result = workspace.execute(command, limits)
        framed = frame_tool_output(result)
        rec.add(EventKind.TOOL_OUTPUT, framed)

        messages.append(Message(role="assistant", content=assistant_text))
        messages.append(Message(role="user", content=framed))
        steps += 1
        commands += count_stages(command)

        if steps >= variant.step_limit:
            return _finish(rec, None, FailureKind.STEP_LIMIT, steps, commands,
                           usage_total, started, f"step limit {variant.step_limit} reached")


def count_stages(command: str) -> int:
    """Number of shell stages in one invocation (pipes and chains count each
    stage; quoting is not parsed)."""
    from .analysis import split_command

    stages, _ = split_command(command)
    return sum(1 for s in stages if s.strip())
