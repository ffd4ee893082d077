"""
Snort Rule Parser

Parses Snort 2.x community-style rules into a fixed 7-field header plus an
ordered list of keyword/value options, and renders the canonical feature text
used by the supervised pipeline.

    action proto src_addr src_port direction dst_addr dst_port (kw:value; kw; ...)

Address and port expressions (variables, lists, negation) are kept as opaque
strings. Unknown option keywords are accepted verbatim.
"""

import re
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path

from nidslabel.core.errors import RuleParseError, RuleSerializationError
from nidslabel.core.logging import get_logger

logger = get_logger(__name__)


class Action(StrEnum):
    ALERT = "alert"
    LOG = "log"
    PASS = "pass"
    DROP = "drop"
    REJECT = "reject"
    SDROP = "sdrop"


class Protocol(StrEnum):
    TCP = "tcp"
    UDP = "udp"
    ICMP = "icmp"
    IP = "ip"


class Direction(StrEnum):
    UNIDIRECTIONAL = "->"
    BIDIRECTIONAL = "<>"


HEADER_ARITY = 7

_MSG_UNESCAPE = re.compile(r"\\(.)")


@dataclass(frozen=True)
class RuleHeader:
    action: Action
    protocol: Protocol
    src_addr: str
    src_port: str
    direction: Direction
    dst_addr: str
    dst_port: str

    def tokens(self) -> list[str]:
        return [
            self.action.value,
            self.protocol.value,
            self.src_addr,
            self.src_port,
            self.direction.value,
            self.dst_addr,
            self.dst_port,
        ]


@dataclass(frozen=True)
class RuleOption:
    """A keyword option; flag-style options (nocase, fast_pattern) have value None."""

    keyword: str
    value: str | None = None


@dataclass(frozen=True)
class SnortRule:
    """One parsed rule. Equality ignores raw text, so re-serialized rules compare equal."""

    header: RuleHeader
    options: tuple[RuleOption, ...]
    sid: int | None = None
    msg: str | None = None
    raw: str = field(default="", compare=False)

    def option_values(self, keyword: str) -> list[str | None]:
        return [opt.value for opt in self.options if opt.keyword == keyword]


@dataclass(frozen=True)
class ParseDiagnostic:
    line: int
    message: str
    text: str


def _unquote(value: str) -> str:
    if len(value) >= 2 and value.startswith('"') and value.endswith('"'):
        return value[1:-1]
    return value


def _unescape(value: str) -> str:
    return _MSG_UNESCAPE.sub(r"\1", _unquote(value))


def split_options(body: str) -> list[str]:
    """
    Split an option body on top-level semicolons.

    Semicolons inside double-quoted strings, and any backslash-escaped
    character, never split.

    Raises:
        RuleParseError: If a quoted string is not terminated
    """
    segments: list[str] = []
    current: list[str] = []
    in_quote = False
    i = 0
    while i < len(body):
        ch = body[i]
        if ch == "\\" and i + 1 < len(body):
            current.append(body[i : i + 2])
            i += 2
            continue
        if ch == '"':
            in_quote = not in_quote
        if ch == ";" and not in_quote:
            segments.append("".join(current))
            current = []
        else:
            current.append(ch)
        i += 1

    if in_quote:
        raise RuleParseError("unterminated quoted string in options")

    tail = "".join(current)
    if tail.strip():
        segments.append(tail)
    return [s.strip() for s in segments if s.strip()]


def _parse_option(segment: str) -> RuleOption:
    keyword, sep, value = segment.partition(":")
    keyword = keyword.strip()
    if not keyword:
        raise RuleParseError(f"option without keyword: {segment!r}")
    return RuleOption(keyword=keyword, value=value.strip() if sep else None)


def header_tokens(text: str) -> list[str]:
    """
    Split a rule header on whitespace outside brackets.

    Address and port lists, nested or negated (`[1.1.1.1,![2.2.2.2,2.2.2.3]]`),
    stay one token.

    Raises:
        RuleParseError: If brackets are unbalanced
    """
    tokens: list[str] = []
    current: list[str] = []
    depth = 0
    for ch in text:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
            if depth < 0:
                raise RuleParseError("unbalanced ']' in header")
        if ch.isspace() and depth == 0:
            if current:
                tokens.append("".join(current))
                current = []
            continue
        current.append(ch)
    if depth:
        raise RuleParseError("unterminated '[' list in header")
    if current:
        tokens.append("".join(current))
    return tokens


def _parse_header(text: str) -> RuleHeader:
    tokens = header_tokens(text)
    if len(tokens) != HEADER_ARITY:
        raise RuleParseError(f"header has {len(tokens)} tokens, expected {HEADER_ARITY}")

    action, protocol, src_addr, src_port, direction, dst_addr, dst_port = tokens
    try:
        return RuleHeader(
            action=Action(action.lower()),
            protocol=Protocol(protocol.lower()),
            src_addr=src_addr,
            src_port=src_port,
            direction=Direction(direction),
            dst_addr=dst_addr,
            dst_port=dst_port,
        )
    except ValueError as exc:
        raise RuleParseError(f"invalid header: {exc}") from exc


def parse_rule(text: str) -> SnortRule:
    """
    Parse a single logical rule.

    Args:
        text: One rule, continuation lines already joined

    Returns:
        SnortRule with raw text preserved verbatim

    Raises:
        RuleParseError: Missing parenthesized body, header arity other than 7,
            unknown action/protocol/direction, unterminated quote, or bad sid
    """
    stripped = text.strip()
    open_idx = stripped.find("(")
    if open_idx < 0 or not stripped.endswith(")"):
        raise RuleParseError("missing parenthesized option body")

    header = _parse_header(stripped[:open_idx])
    options = tuple(_parse_option(s) for s in split_options(stripped[open_idx + 1 : -1]))

    sid: int | None = None
    msg: str | None = None
    for opt in options:
        if opt.keyword == "sid" and sid is None:
            if opt.value is None or not opt.value.isdigit():
                raise RuleParseError(f"sid must be a non-negative integer, got {opt.value!r}")
            sid = int(opt.value)
        elif opt.keyword == "msg" and msg is None and opt.value is not None:
            msg = _unescape(opt.value)

    return SnortRule(header=header, options=options, sid=sid, msg=msg, raw=text)


def _logical_lines(text: str) -> list[tuple[int, str]]:
    """Join backslash-continued lines; returns (starting line number, text) pairs."""
    logical: list[tuple[int, str]] = []
    buffer: list[str] = []
    start = 0
    for number, line in enumerate(text.splitlines(), start=1):
        if not buffer:
            start = number
        stripped = line.rstrip()
        if stripped.endswith("\\"):
            buffer.append(stripped[:-1])
            continue
        buffer.append(line)
        logical.append((start, "".join(buffer)))
        buffer = []
    if buffer:
        logical.append((start, "".join(buffer)))
    return logical


def parse_ruleset(text: str) -> tuple[list[SnortRule], list[ParseDiagnostic]]:
    """
    Parse a whole ruleset, collecting diagnostics instead of aborting.

    Blank lines and '#' comment lines (including commented-out rules) are
    skipped. Backslash-continued lines are joined first. A rule repeating an
    earlier sid is reported and dropped; the first occurrence wins.

    Returns:
        (rules in file order, one diagnostic per malformed logical line)
    """
    rules: list[SnortRule] = []
    diagnostics: list[ParseDiagnostic] = []
    first_seen: dict[int, int] = {}
    for number, line in _logical_lines(text):
        content = line.strip()
        if not content or content.startswith("#"):
            continue
        try:
            rule = parse_rule(content)
        except RuleParseError as exc:
            diagnostics.append(ParseDiagnostic(line=number, message=exc.message, text=content))
            continue
        if rule.sid is not None:
            if rule.sid in first_seen:
                message = f"duplicate sid {rule.sid}, first defined on line {first_seen[rule.sid]}"
                diagnostics.append(ParseDiagnostic(line=number, message=message, text=content))
                continue
            first_seen[rule.sid] = number
        rules.append(rule)

    if diagnostics:
        logger.warning("Ruleset parsed with %d diagnostic(s)", len(diagnostics))
    return rules, diagnostics


def parse_ruleset_file(path: str | Path) -> tuple[list[SnortRule], list[ParseDiagnostic]]:
    """Read a UTF-8 .rules file and parse it. I/O errors propagate."""
    return parse_ruleset(Path(path).read_text(encoding="utf-8"))


def feature_text(rule: SnortRule) -> str:
    """
    Canonical text for vectorization.

    Action, protocol and direction, then each option keyword followed by its
    value with double quotes stripped; single-space separated.
    """
    parts = [rule.header.action.value, rule.header.protocol.value, rule.header.direction.value]
    for opt in rule.options:
        parts.append(opt.keyword)
        if opt.value is not None:
            parts.append(opt.value.replace('"', ""))
    return " ".join(" ".join(parts).split())


def serialize_rule(rule: SnortRule) -> str:
    """
    Render a rule back to Snort syntax. Option values are written verbatim,
    so escapes survive a parse/serialize/parse round-trip.

    Raises:
        RuleSerializationError: If the rule has no options
    """
    if not rule.options:
        raise RuleSerializationError("a rule without options cannot be represented")
    body = " ".join(
        f"{opt.keyword}:{opt.value};" if opt.value is not None else f"{opt.keyword};"
        for opt in rule.options
    )
    return f"{' '.join(rule.header.tokens())} ({body})"
