"""Classification tasks, their samples, context assembly, and baselines.

Tasks and samples come from declarative config: a YAML file with task
definitions (question, categories, per-approach context recipe, guideline
file) plus a JSONL file of samples. Guideline texts ship as editable files
and are loaded verbatim into prompts so that all approaches see identical
labeling instructions.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Sequence

import yaml

from .gateway import Message, estimate_tokens
from .sandbox import RepoSpec

UNCLEAR = "unclear"

#: Context sources resolvable from sample aux blobs, keyed to the file name
#: the sandbox places under aux/.
AUX_SOURCE_FILES = {
    "diff-hunk-with-marked-line": "diff_hunk.txt",
    "pr-metadata-dump": "pr_metadata.json",
    "commit-message": "commit_message.txt",
    "review-comment": "review_comment.txt",
}

_DERIVED_SOURCES = ("directory-listing", "readme-file")
_KNOWN_SOURCES = set(AUX_SOURCE_FILES) | set(_DERIVED_SOURCES) | {"minimal-identifier"}

_LISTING_CAP = 500  # max entries inlined for the directory-listing source


class ConfigError(Exception):
    pass


class Unit(str, Enum):
    REPOSITORY = "repository"
    LINE = "line"
    REVIEW = "review"
    COMMIT = "commit"


_FOCUS_KIND_FOR_UNIT = {
    Unit.REPOSITORY: "none",
    Unit.LINE: "file_line",
    Unit.REVIEW: "review",
    Unit.COMMIT: "commit",
}


@dataclass(frozen=True)
class Focus:
    """Unit-specific anchor identifying the artifact within the repository."""

    kind: str  # none | file_line | commit | review
    path: str | None = None
    line: int | None = None
    commit: str | None = None
    review_id: str | None = None

    def render(self) -> str:
        if self.kind == "file_line":
            return f"file {self.path}, line {self.line}"
        if self.kind == "commit":
            return f"commit {self.commit}"
        if self.kind == "review":
            return f"review {self.review_id}"
        return ""


@dataclass(frozen=True)
class Task:
    id: str
    unit: Unit
    question: str
    categories: tuple[str, ...]
    allow_unclear: bool
    context_recipe: dict[str, tuple[str, ...]]  # approach kind -> sources
    guidelines: str
    guideline_path: str | None = None

    def __post_init__(self) -> None:
        if not self.categories:
            raise ConfigError(f"task {self.id!r}: categories must be non-empty")
        if len(set(self.categories)) != len(self.categories):
            raise ConfigError(f"task {self.id!r}: duplicate categories")
        if UNCLEAR in self.categories:
            raise ConfigError(
                f"task {self.id!r}: {UNCLEAR!r} is appended automatically, "
                "never listed in categories")

    @property
    def k(self) -> int:
        """Number of answer options, the K of the uniform-random baseline."""
        return len(self.categories) + (1 if self.allow_unclear else 0)

    def answer_options(self, include_unclear: bool | None = None) -> tuple[str, ...]:
        if include_unclear is None:
            include_unclear = self.allow_unclear
        return self.categories + ((UNCLEAR,) if include_unclear else ())


@dataclass(frozen=True)
class Sample:
    id: str
    task_id: str
    repo_spec: RepoSpec
    aux_files: dict[str, str]
    focus: Focus
    ground_truth: str
    repo_size_mb: float = 0.0


@dataclass(frozen=True)
class ContextBundle:
    kind: str  # engineered | agent_manifest | minimal_id
    parts: tuple[tuple[str, str], ...]  # (label, text)

    @property
    def estimated_tokens(self) -> int:
        return sum(estimate_tokens(label) + estimate_tokens(text)
                   for label, text in self.parts)


@dataclass(frozen=True)
class TaskSet:
    tasks: dict[str, Task]
    samples: dict[str, Sample]
    approach_specs: tuple[dict[str, Any], ...] = ()

    def samples_for(self, task_id: str) -> list[Sample]:
        return [s for s in self.samples.values() if s.task_id == task_id]

    def task_ids(self) -> list[str]:
        return list(self.tasks)


# ---------------------------------------------------------------------------
# Loading


def _load_task(raw: dict[str, Any], base: Path, guidelines_dir: Path) -> Task:
    try:
        task_id = raw["id"]
        unit = Unit(raw["unit"])
        question = raw["question"]
        categories = tuple(raw["categories"])
    except KeyError as exc:
        raise ConfigError(f"task definition missing key {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"task {raw.get('id')!r}: bad unit: {exc}") from exc

    recipe: dict[str, tuple[str, ...]] = {}
    for kind, sources in (raw.get("context_recipe") or {}).items():
        if kind not in ("simple", "agent", "memorization"):
            raise ConfigError(f"task {task_id!r}: unknown context_recipe key {kind!r}")
        sources = tuple(sources or ())
        for src in sources:
            if src not in _KNOWN_SOURCES:
                raise ConfigError(f"task {task_id!r}: unknown context source {src!r}")
        recipe[kind] = sources

    guideline_file = raw.get("guideline_file")
    guidelines = ""
    guideline_path = None
    if guideline_file:
        path = (guidelines_dir / guideline_file)
        if not path.is_absolute():
            path = base / path
        try:
            guidelines = path.read_text(encoding="utf-8").strip()
        except OSError as exc:
            raise ConfigError(f"task {task_id!r}: cannot read guideline_file: {exc}") from exc
        guideline_path = str(path)

    return Task(
        id=task_id,
        unit=unit,
        question=question,
        categories=categories,
        allow_unclear=bool(raw.get("allow_unclear", True)),
        context_recipe=recipe,
        guidelines=guidelines,
        guideline_path=guideline_path,
    )


def _load_sample(raw: dict[str, Any], base: Path, tasks: dict[str, Task]) -> Sample:
    try:
        sample_id = raw["id"]
        task_id = raw["task_id"]
        repo = raw["repo"]
        ground_truth = raw["ground_truth"]
    except KeyError as exc:
        raise ConfigError(f"sample {raw.get('id')!r}: missing key {exc}") from exc

    if task_id not in tasks:
        raise ConfigError(f"sample {sample_id!r}: unknown task_id {task_id!r}")
    task = tasks[task_id]

    allowed = task.answer_options(include_unclear=True)
    if ground_truth not in allowed:
        raise ConfigError(
            f"sample {sample_id!r}: ground_truth {ground_truth!r} not in {allowed}")

    repo_path = Path(repo["path"])
    if not repo_path.is_absolute():
        repo_path = base / repo_path
    spec = RepoSpec(name=repo.get("name", repo["path"]),
                    path=str(repo_path), revision=repo.get("revision"))

    focus_raw = raw.get("focus") or {"kind": "none"}
    focus = Focus(
        kind=focus_raw.get("kind", "none"),
        path=focus_raw.get("path"),
        line=focus_raw.get("line"),
        commit=focus_raw.get("commit"),
        review_id=focus_raw.get("review_id"),
    )
    expected = _FOCUS_KIND_FOR_UNIT[task.unit]
    if focus.kind != expected:
        raise ConfigError(
            f"sample {sample_id!r}: focus kind {focus.kind!r} does not match "
            f"unit {task.unit.value!r} (expected {expected!r})")

    size = float(raw.get("repo_size_mb", 0.0))
    if size < 0:
        raise ConfigError(f"sample {sample_id!r}: repo_size_mb must be >= 0")

    return Sample(
        id=sample_id,
        task_id=task_id,
        repo_spec=spec,
        aux_files=dict(raw.get("aux_files") or {}),
        focus=focus,
        ground_truth=ground_truth,
        repo_size_mb=size,
    )


def load_tasks(config_path: str | os.PathLike[str]) -> TaskSet:
    """Load a task/sample configuration file; rejects duplicate ids and
    samples that violate task invariants."""
    config_path = Path(config_path)
    try:
        with open(config_path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read task config: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed task config: {exc}") from exc

    base = config_path.parent
    guidelines_dir = Path(data.get("guidelines_dir", "guidelines"))

    tasks: dict[str, Task] = {}
    for raw in data.get("tasks") or []:
        task = _load_task(raw, base, guidelines_dir)
        if task.id in tasks:
            raise ConfigError(f"duplicate task id {task.id!r}")
        tasks[task.id] = task

    raw_samples: Iterable[dict[str, Any]]
    samples_ref = data.get("samples")
    if samples_ref is None:
        raw_samples = []
    elif isinstance(samples_ref, str):
        samples_path = Path(samples_ref)
        if not samples_path.is_absolute():
            samples_path = base / samples_path
        try:
            with open(samples_path, encoding="utf-8") as fh:
                raw_samples = [json.loads(line) for line in fh if line.strip()]
        except OSError as exc:
            raise ConfigError(f"cannot read samples file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed samples line: {exc}") from exc
    else:
        raw_samples = samples_ref

    samples: dict[str, Sample] = {}
    for raw in raw_samples:
        sample = _load_sample(raw, base, tasks)
        if sample.id in samples:
            raise ConfigError(f"duplicate sample id {sample.id!r}")
        samples[sample.id] = sample

    return TaskSet(tasks=tasks, samples=samples,
                   approach_specs=tuple(data.get("approaches") or ()))


# ---------------------------------------------------------------------------
# Context assembly


def _list_template(repo_path: Path) -> list[str]:
    root = Path(repo_path)
    if not root.is_dir():
        return []
    entries = []
    for p in sorted(root.rglob("*")):
        rel = p.relative_to(root).as_posix()
        if rel == ".git" or rel.startswith(".git/"):
            continue
        entries.append(rel + "/" if p.is_dir() else rel)
    return entries


def _absent(source: str, reason: str) -> str:
    return f"[absent: {reason}]"


def _resolve_source(source: str, sample: Sample) -> tuple[str, str]:
    if source == "directory-listing":
        entries = _list_template(Path(sample.repo_spec.path))
        if not entries:
            return "Directory listing", _absent(source, "empty repository")
        if len(entries) > _LISTING_CAP:
            entries = entries[:_LISTING_CAP] + [f"... ({len(entries) - _LISTING_CAP} more)"]
        return "Directory listing", "\n".join(entries)
    if source == "readme-file":
        root = Path(sample.repo_spec.path)
        candidates = sorted(p for p in root.glob("*") if p.is_file()
                            and p.name.lower().startswith("readme"))
        if not candidates:
            return "README", _absent(source, "no README found")
        return "README", candidates[0].read_text(encoding="utf-8", errors="replace")
    aux_name = AUX_SOURCE_FILES[source]
    label = source.replace("-", " ").capitalize()
    if aux_name not in sample.aux_files:
        return label, _absent(source, f"no {aux_name} provided")
    return label, sample.aux_files[aux_name]


def minimal_identifier(task: Task, sample: Sample) -> str:
    anchor = sample.focus.render()
    base = f"repository {sample.repo_spec.name}"
    return f"{base}, {anchor}" if anchor else base


def workspace_manifest(sample: Sample) -> str:
    """Names the workspace entry points without inlining any file contents."""
    top = sorted({e.split("/", 1)[0] + ("/" if "/" in e or e.endswith("/") else "")
                  for e in _list_template(Path(sample.repo_spec.path))})
    lines = ["Repository working copy at ./ with top-level entries:"]
    lines += [f"  {e}" for e in top] or ["  (empty)"]
    if sample.aux_files:
        lines.append("Auxiliary files:")
        lines += [f"  aux/{name}" for name in sorted(sample.aux_files)]
    return "\n".join(lines)


def assemble_context(task: Task, sample: Sample, approach_kind: str) -> ContextBundle:
    """Build the context for one (sample, approach-kind) pair.

    simple        -> engineered parts per the task recipe
    agent         -> target anchor + workspace manifest (+ inline anchors the
                     recipe demands, e.g. the marked diff hunk)
    memorization  -> the minimal artifact identifier and nothing else
    """
    if sample.task_id != task.id:
        raise ValueError(f"sample {sample.id!r} does not belong to task {task.id!r}")

    if approach_kind == "memorization":
        return ContextBundle(kind="minimal_id",
                             parts=(("Artifact", minimal_identifier(task, sample)),))

    recipe = task.context_recipe.get(approach_kind, ())
    parts = [_resolve_source(src, sample) for src in recipe if src != "minimal-identifier"]

    if approach_kind == "agent":
        head: list[tuple[str, str]] = []
        anchor = sample.focus.render()
        if anchor:
            head.append(("Target", anchor))
        head.append(("Workspace", workspace_manifest(sample)))
        return ContextBundle(kind="agent_manifest", parts=tuple(head + parts))

    if approach_kind != "simple":
        raise ValueError(f"unknown approach kind {approach_kind!r}")
    return ContextBundle(kind="engineered", parts=tuple(parts))


# ---------------------------------------------------------------------------
# Prompt construction

_BUNDLE_FOR_KIND = {
    "simple_cot": "engineered",
    "simple_nocot": "engineered",
    "simple_memorization": "minimal_id",
    "agent_stopseq": "agent_manifest",
    "agent_native": "agent_manifest",
}

_COT_INSTRUCTION = (
    "Think the classification through step by step, then end your reply with "
    "a final line of the form:\nANSWER: <category>")

_NOCOT_INSTRUCTION = (
    "Reply with the single category name and nothing else. No reasoning, no "
    "explanation, no punctuation.")

_STOPSEQ_INSTRUCTION = (
    "You are connected to a sandboxed shell whose working directory is the "
    "repository working copy. There is no network access. Explore as much as "
    "you need: to run one bash command, write it between tags like\n"
    "<bash>command</bash>\n"
    "and wait for its output before continuing. One command per step (pipes "
    "and chaining inside the command are fine). When you have enough "
    "evidence, write a final line of the form\nANSWER: <category>\n"
    "instead of another command.")

_NATIVE_INSTRUCTION = (
    "You are connected to a sandboxed shell whose working directory is the "
    "repository working copy. There is no network access. Use the run-bash "
    "tool to execute one bash command per step (pipes and chaining inside "
    "the command are fine). When you have enough evidence, reply without a "
    "tool call, ending with a final line of the form\nANSWER: <category>")

_INSTRUCTIONS = {
    "simple_cot": _COT_INSTRUCTION,
    "simple_memorization": _COT_INSTRUCTION,
    "simple_nocot": _NOCOT_INSTRUCTION,
    "agent_stopseq": _STOPSEQ_INSTRUCTION,
    "agent_native": _NATIVE_INSTRUCTION,
}


def build_prompt(task: Task, bundle: ContextBundle, variant: Any) -> list[Message]:
    """Render the full prompt for one experiment. Pure: identical inputs
    yield identical message bytes."""
    kind = str(getattr(variant, "kind", variant))
    expected = _BUNDLE_FOR_KIND.get(kind)
    if expected is None:
        raise ValueError(f"unknown approach kind {kind!r}")
    if bundle.kind != expected:
        raise ValueError(f"bundle kind {bundle.kind!r} incompatible with variant {kind!r}")

    include_unclear = task.allow_unclear and kind != "simple_memorization"
    options = task.answer_options(include_unclear=include_unclear)

    system_parts = ["You label software-repository artifacts."]
    if task.guidelines:
        system_parts.append(task.guidelines)
    system_parts.append(f"Question: {task.question}")
    system_parts.append("Allowed categories:\n" + "\n".join(f"- {c}" for c in options))
    system_parts.append(_INSTRUCTIONS[kind])

    body = "\n\n".join(f"## {label}\n\n{text}" for label, text in bundle.parts)
    return [
        Message(role="system", content="\n\n".join(system_parts)),
        Message(role="user", content=body or "(no additional context)"),
    ]


# ---------------------------------------------------------------------------
# Baselines


@dataclass(frozen=True)
class BaselineRates:
    random_rate: float
    majority_rate: float
    majority_label: str
    k: int
    n: int


def baseline_rates(task: Task, samples: Sequence[Sample]) -> BaselineRates:
    """Uniform-random (1/K) and always-majority baselines over the samples.
    Majority ties break by declared category order, unclear last."""
    if not samples:
        raise ValueError(f"baseline_rates needs samples for task {task.id!r}")
    order = task.answer_options(include_unclear=True)
    counts = {c: 0 for c in order}
    for s in samples:
        counts[s.ground_truth] += 1
    majority_label = max(order, key=lambda c: (counts[c], -order.index(c)))
    return BaselineRates(
        random_rate=1.0 / task.k,
        majority_rate=counts[majority_label] / len(samples),
        majority_label=majority_label,
        k=task.k,
        n=len(samples),
    )
