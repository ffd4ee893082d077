"""
LLM Prompting

Builds labeling prompts from three parts, rendered through the task template:

    task instruction     fixed wording in templates/task.txt
    technique guide      "T1059 — Command and Scripting Interpreter" lines (optional)
    worked examples      0, 1 or 2 labeled rules (in-context examples)

and runs them against a ChatClient, either single-shot or as competition
questioning: query once per catalog batch, union the answers, then re-ask
up to `rounds` times restricted to the surviving candidates, intersecting
each answer with the previous pool.
"""

import hashlib
import json
import re
import time
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from jinja2 import Environment, FileSystemLoader, StrictUndefined, TemplateNotFound
from pydantic import BaseModel, ConfigDict, Field, field_validator

from nidslabel.attack.catalog import AttackCatalog, TechniqueEntry, technique_batches
from nidslabel.core.errors import (
    LabelingError,
    NidsLabelError,
    PromptError,
    ProviderError,
    TransportError,
)
from nidslabel.core.logging import get_logger
from nidslabel.data.dataset import LabeledDataset, label_frequencies
from nidslabel.rules.parser import SnortRule, serialize_rule
from nidslabel.services.chat import ChatClient, ChatRequest, ProviderSettings

logger = get_logger(__name__)

TEMPLATE_DIR = Path(__file__).parent / "templates"
TASK_TEMPLATE = "task.txt"
# Named slots every task template may use
TEMPLATE_SLOTS = ("RULE", "TECHNIQUE_LIST", "EXAMPLES")

# Plain-text prompts: no HTML escaping, undefined variables are errors
templates = Environment(
    loader=FileSystemLoader(TEMPLATE_DIR),
    undefined=StrictUndefined,
    keep_trailing_newline=True,
    autoescape=False,
)

TECHNIQUE_PATTERN = re.compile(r"\bT\d{4}(?:\.\d{3})?\b")
_REASON_LINE = re.compile(r"^\s*REASON:\s*(.+?)\s*$", re.MULTILINE | re.IGNORECASE)

GUIDE_HEADER = "Choose only from these techniques:"
EXAMPLES_HEADER = "Examples of correctly labeled rules:"


class CompetitionConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    batch_count: int = Field(default=11, ge=1)
    rounds: int = Field(default=3, ge=1)


class PromptConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    use_technique_guide: bool = True
    icl_count: int = Field(default=0, ge=0, le=2)
    competition: CompetitionConfig | None = None
    temperature: float = Field(default=0.0, ge=0.0, le=2.0)

    @property
    def name(self) -> str:
        parts = ["guide" if self.use_technique_guide else "noguide", f"icl{self.icl_count}"]
        if self.competition is not None:
            parts.append(f"comp{self.competition.batch_count}x{self.competition.rounds}")
        return "-".join(parts)


class IclExample(BaseModel):
    model_config = ConfigDict(frozen=True)

    rule_text: str = Field(min_length=1)
    technique_ids: frozenset[str] = Field(min_length=1)


@dataclass(frozen=True)
class Prompt:
    task_spec: str
    context: str | None
    guidance: str | None
    rule_text: str
    rendered: str


class PredictionSet(BaseModel):
    sid: int | None = None
    technique_ids: frozenset[str] = frozenset()
    raw_response: str = ""
    explanation: str | None = None
    responses: list[str] = Field(default_factory=list)
    retries: int = 0
    requests: int = 0
    discarded: list[str] = Field(default_factory=list)
    diagnostics: list[str] = Field(default_factory=list)

    @field_validator("discarded")
    @classmethod
    def _sorted(cls, value: list[str]) -> list[str]:
        return sorted(set(value))

    def to_record(self) -> dict[str, object]:
        """JSON-ready record with sorted technique ids."""
        return {
            "sid": self.sid,
            "techniques": sorted(self.technique_ids),
            "explanation": self.explanation,
            "raw_response": self.raw_response,
            "retries": self.retries,
            "requests": self.requests,
            "discarded": self.discarded,
            "diagnostics": self.diagnostics,
        }


@dataclass(frozen=True)
class RetryPolicy:
    """Bounded exponential backoff on transport errors."""

    max_retries: int = 3
    base_delay: float = 1.0
    max_delay: float = 30.0
    sleep: Callable[[float], None] = time.sleep

    @classmethod
    def from_settings(cls, settings: ProviderSettings) -> "RetryPolicy":
        return cls(settings.max_retries, settings.backoff_base_s, settings.backoff_max_s)

    def delay(self, attempt: int) -> float:
        return min(self.base_delay * (2**attempt), self.max_delay)


# ── Templates ────────────────────────────────────────────────────────────────


def load_template(name: str = TASK_TEMPLATE) -> str:
    """Template source text."""
    try:
        source, _, _ = templates.loader.get_source(templates, name)  # type: ignore[union-attr]
    except TemplateNotFound:
        raise PromptError(f"prompt template not found: {name}") from None
    return source


def template_version(name: str = TASK_TEMPLATE) -> str:
    """Template name plus a short content digest, recorded in run manifests."""
    digest = hashlib.sha256(load_template(name).encode("utf-8")).hexdigest()[:12]
    return f"{name}@{digest}"


def render_template(name: str, **values: str) -> str:
    """Render a prompt template; values are inserted verbatim, never re-evaluated."""
    try:
        return templates.get_template(name).render(**values)
    except TemplateNotFound:
        raise PromptError(f"prompt template not found: {name}") from None


def technique_guide(entries: Sequence[TechniqueEntry]) -> str:
    return "\n".join(f"{e.id} — {e.name}" for e in entries)


def example_block(index: int, example: IclExample) -> str:
    return (
        f"Example {index}:\nRule: {example.rule_text}\n"
        f"TECHNIQUES: {', '.join(sorted(example.technique_ids))}"
    )


# ── Prompt construction ──────────────────────────────────────────────────────


def build_prompt(
    config: PromptConfig,
    rule: SnortRule,
    catalog: AttackCatalog,
    examples: Sequence[IclExample],
    technique_subset: Sequence[TechniqueEntry] | None = None,
) -> Prompt:
    """
    Render the labeling prompt for one rule.

    The technique guide lists the active catalog entries when
    use_technique_guide is set; an explicit technique_subset always
    produces a guide restricted to those entries. The first icl_count
    examples are included in the given order.

    Raises:
        PromptError: icl_count exceeds the number of examples
    """
    if config.icl_count > len(examples):
        raise PromptError(
            f"icl_count={config.icl_count} but only {len(examples)} example(s) available"
        )

    context: str | None = None
    if technique_subset is not None:
        context = technique_guide(technique_subset)
    elif config.use_technique_guide:
        context = technique_guide(catalog.sorted_entries(active_only=True))

    guidance: str | None = None
    if config.icl_count:
        chosen = examples[: config.icl_count]
        guidance = "\n\n".join(example_block(i, ex) for i, ex in enumerate(chosen, start=1))

    rule_text = rule.raw.strip() or serialize_rule(rule)
    rendered = render_template(
        TASK_TEMPLATE,
        RULE=rule_text,
        TECHNIQUE_LIST=f"\n{GUIDE_HEADER}\n{context}\n" if context is not None else "",
        EXAMPLES=f"\n{EXAMPLES_HEADER}\n\n{guidance}\n" if guidance is not None else "",
    )
    return Prompt(
        task_spec=load_template(),
        context=context,
        guidance=guidance,
        rule_text=rule_text,
        rendered=rendered,
    )


def prompt_tokens(
    config: PromptConfig, rule: SnortRule, catalog: AttackCatalog, examples: Sequence[IclExample]
) -> int:
    """Whitespace token count of the single-shot prompt for a rule."""
    return len(build_prompt(config, rule, catalog, examples).rendered.split())


# ── Response parsing ─────────────────────────────────────────────────────────


def extract_technique_ids(text: str, catalog: AttackCatalog) -> tuple[frozenset[str], list[str]]:
    """Pattern matches in text split into (catalog ids, discarded non-catalog ids)."""
    found = set(TECHNIQUE_PATTERN.findall(text))
    kept = frozenset(t for t in found if t in catalog)
    discarded = sorted(found - kept)
    if discarded:
        logger.debug("Discarded %d id(s) absent from catalog: %s", len(discarded), discarded)
    return kept, discarded


def parse_techniques(text: str, catalog: AttackCatalog) -> frozenset[str]:
    """All technique ids in a reply that exist in the catalog, deduplicated."""
    return extract_technique_ids(text, catalog)[0]


def parse_explanation(text: str) -> str | None:
    match = _REASON_LINE.search(text)
    return match.group(1) if match else None


# ── Labeling ─────────────────────────────────────────────────────────────────


def _ask(
    client: ChatClient,
    prompt: Prompt,
    temperature: float,
    retry: RetryPolicy,
    sid: int | None,
) -> tuple[str, int]:
    """Send one prompt with retries; returns (reply text, retries used)."""
    request = ChatRequest.user(prompt.rendered, temperature=temperature)
    attempt = 0
    while True:
        try:
            return client.send(request).text, attempt
        except TransportError as exc:
            if attempt >= retry.max_retries:
                raise LabelingError(
                    f"transport failed after {attempt + 1} attempt(s): {exc.message}",
                    sid=sid,
                    attempts=attempt + 1,
                ) from exc
            delay = retry.delay(attempt)
            logger.warning(
                "Transport error (attempt %d), retrying in %.1fs",
                attempt + 1,
                delay,
                extra={"sid": sid},
            )
            retry.sleep(delay)
            attempt += 1
        except ProviderError as exc:
            raise LabelingError(exc.message, sid=sid, attempts=attempt + 1) from exc


def label_with_llm(
    client: ChatClient,
    config: PromptConfig,
    rule: SnortRule,
    catalog: AttackCatalog,
    examples: Sequence[IclExample],
    retry: RetryPolicy | None = None,
) -> PredictionSet:
    """
    Single-shot labeling: build the prompt, send it, parse the reply.

    Raises:
        LabelingError: Transport failure after max retries, or provider error;
            carries the rule sid
    """
    retry = retry or RetryPolicy()
    prompt = build_prompt(config, rule, catalog, examples)
    text, retries = _ask(client, prompt, config.temperature, retry, rule.sid)
    ids, discarded = extract_technique_ids(text, catalog)
    return PredictionSet(
        sid=rule.sid,
        technique_ids=ids,
        raw_response=text,
        explanation=parse_explanation(text),
        responses=[text],
        retries=retries,
        requests=retries + 1,
        discarded=discarded,
    )


def competition_label(
    client: ChatClient,
    rule: SnortRule,
    catalog: AttackCatalog,
    config: PromptConfig,
    examples: Sequence[IclExample] = (),
    retry: RetryPolicy | None = None,
) -> PredictionSet:
    """
    Competition questioning for one rule.

    Stage 1 asks once per batch of active techniques and unions the parsed
    answers into the candidate pool; a failed batch contributes nothing and
    leaves a diagnostic. Stage 2 re-asks up to `rounds` times restricted to
    the pool and keeps only answers already in it, so the pool never grows.
    Stage 2 is skipped when stage 1 found nothing; once started it runs all
    `rounds` queries, even after the pool empties.

    Raises:
        PromptError: config has no competition settings
        LabelingError: A refinement query failed after retries
    """
    if config.competition is None:
        raise PromptError("competition_label needs a competition configuration")
    retry = retry or RetryPolicy()
    active = len(catalog.sorted_entries(active_only=True))
    batch_count = min(config.competition.batch_count, active)

    selected: set[str] = set()
    responses: list[str] = []
    discarded: set[str] = set()
    diagnostics: list[str] = []
    retries = 0
    requests = 0

    for index, batch in enumerate(technique_batches(catalog, batch_count, active_only=True), 1):
        prompt = build_prompt(config, rule, catalog, examples, technique_subset=batch)
        try:
            text, used = _ask(client, prompt, config.temperature, retry, rule.sid)
        except LabelingError as exc:
            diagnostics.append(f"batch {index}: {exc.message}")
            retries += max(exc.attempts - 1, 0)
            requests += exc.attempts
            continue
        retries += used
        requests += used + 1
        responses.append(text)
        ids, dropped = extract_technique_ids(text, catalog)
        selected |= ids
        discarded.update(dropped)

    rounds = config.competition.rounds if selected else 0
    for round_number in range(1, rounds + 1):
        subset = [catalog.entry(t) for t in sorted(selected)]
        prompt = build_prompt(config, rule, catalog, examples, technique_subset=subset)
        text, used = _ask(client, prompt, config.temperature, retry, rule.sid)
        retries += used
        requests += used + 1
        responses.append(text)
        ids, dropped = extract_technique_ids(text, catalog)
        discarded.update(dropped)
        discarded.update(ids - selected)
        selected &= ids
        logger.debug("Refinement round %d: %d candidate(s) left", round_number, len(selected))

    last = responses[-1] if responses else ""
    return PredictionSet(
        sid=rule.sid,
        technique_ids=frozenset(selected),
        raw_response=last,
        explanation=parse_explanation(last),
        responses=responses,
        retries=retries,
        requests=requests,
        discarded=sorted(discarded),
        diagnostics=diagnostics,
    )


def label_rule(
    client: ChatClient,
    config: PromptConfig,
    rule: SnortRule,
    catalog: AttackCatalog,
    examples: Sequence[IclExample],
    retry: RetryPolicy | None = None,
) -> PredictionSet:
    """Competition questioning when configured, otherwise single-shot."""
    if config.competition is not None:
        return competition_label(client, rule, catalog, config, examples, retry)
    return label_with_llm(client, config, rule, catalog, examples, retry)


def label_many(
    client: ChatClient,
    config: PromptConfig,
    rules: Sequence[SnortRule],
    catalog: AttackCatalog,
    examples: Sequence[IclExample],
    jobs: int = 1,
    retry: RetryPolicy | None = None,
) -> list[PredictionSet | NidsLabelError]:
    """
    Label many rules; results come back in input order.

    Per-rule failures are returned in place of a PredictionSet. Rules run on
    up to `jobs` threads unless the client is sequential (scripted or
    recording clients depend on request order).
    """

    def one(rule: SnortRule) -> PredictionSet | NidsLabelError:
        try:
            return label_rule(client, config, rule, catalog, examples, retry)
        except NidsLabelError as exc:
            logger.warning("Labeling failed: %s", exc.message, extra={"sid": rule.sid})
            return exc

    if jobs <= 1 or getattr(client, "sequential", True):
        return [one(rule) for rule in rules]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, rules))


# ── Examples and prompt grid ─────────────────────────────────────────────────


def select_icl_examples(train: LabeledDataset, count: int = 2) -> list[IclExample]:
    """
    Fixed examples covering the most frequent training techniques.

    Techniques are visited by descending frequency (ties by id); for each,
    the lowest-sid rule carrying it that is not already chosen is added.
    """
    frequencies = label_frequencies(train)
    ordered = sorted(frequencies, key=lambda t: (-frequencies[t], t))
    by_sid = sorted(train, key=lambda item: item.sid)

    chosen: list[IclExample] = []
    used: set[int] = set()
    for technique in ordered:
        if len(chosen) >= count:
            break
        for item in by_sid:
            if technique in item.technique_ids and item.sid not in used:
                used.add(item.sid)
                chosen.append(
                    IclExample(rule_text=item.rule.raw.strip(), technique_ids=item.technique_ids)
                )
                break
    return chosen


def save_examples(path: str | Path, examples: Sequence[IclExample]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        json.dumps({"rule": ex.rule_text, "techniques": sorted(ex.technique_ids)}, sort_keys=True)
        for ex in examples
    ]
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def load_examples(path: str | Path, catalog: AttackCatalog) -> list[IclExample]:
    """
    Read ICL examples from JSONL {rule, techniques}, in file order.

    Raises:
        PromptError: Malformed line or technique ids absent from the catalog
    """
    examples: list[IclExample] = []
    for number, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            example = IclExample(rule_text=record["rule"], technique_ids=record["techniques"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise PromptError(f"{path}:{number}: malformed example: {exc}") from exc
        unknown = sorted(t for t in example.technique_ids if t not in catalog)
        if unknown:
            raise PromptError(f"{path}:{number}: technique id(s) not in catalog: {unknown}")
        examples.append(example)
    return examples


def standard_prompt_grid(include_competition: bool = False) -> list[PromptConfig]:
    """{no guide, guide} x {0, 1, 2 examples}, optionally plus a competition variant."""
    grid = [
        PromptConfig(use_technique_guide=guide, icl_count=count)
        for guide in (False, True)
        for count in (0, 1, 2)
    ]
    if include_competition:
        grid.append(
            PromptConfig(use_technique_guide=True, icl_count=2, competition=CompetitionConfig())
        )
    return grid
