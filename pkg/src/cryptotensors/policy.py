"""Deployment policy model and evaluator.

Files carry a local policy (gates loading) and a remote policy (gates key
release by the broker), both inside the signed header. The evaluable language
here is "ct-json-v1", a small JSON combinator grammar; "rego" texts are
carried opaquely and only usable through a registered external evaluator.
"""

from __future__ import annotations

import json
import platform
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Callable, Mapping, Optional

from .errors import (
    MalformedPolicy,
    ProviderFailure,
    UnknownOperator,
    UnsupportedLanguage,
)

LANG_CT_JSON = "ct-json-v1"
LANG_REGO = "rego"
KNOWN_LANGS = (LANG_CT_JSON, LANG_REGO)

MEASUREMENT_REF_PREFIX = "$m."
MAX_POLICY_DEPTH = 64

_COMBINATORS = ("all", "any", "not")
_COMPARISONS = ("eq", "ne", "in", "time_before", "time_after")


@dataclass(frozen=True)
class PolicyText:
    lang: str
    text: str

    def __post_init__(self):
        if self.lang not in KNOWN_LANGS:
            raise UnsupportedLanguage(f"unknown policy language {self.lang!r}")


@dataclass(frozen=True)
class PolicyDoc:
    """Local + remote policy halves; an absent half means allow-all."""

    local: Optional[PolicyText] = None
    remote: Optional[PolicyText] = None

    def is_empty(self) -> bool:
        return self.local is None and self.remote is None

    def to_json_obj(self) -> dict:
        obj = {}
        if self.local is not None:
            obj["local"] = {"lang": self.local.lang, "text": self.local.text}
        if self.remote is not None:
            obj["remote"] = {"lang": self.remote.lang, "text": self.remote.text}
        return obj

    @classmethod
    def from_json_obj(cls, obj) -> "PolicyDoc":
        if not isinstance(obj, dict):
            raise MalformedPolicy("policy document must be an object")
        halves = {}
        for half in ("local", "remote"):
            part = obj.get(half)
            if part is None:
                continue
            if not isinstance(part, dict) or not isinstance(part.get("lang"), str) or not isinstance(
                part.get("text"), str
            ):
                raise MalformedPolicy(f"{half} policy must carry string lang and text")
            halves[half] = PolicyText(lang=part["lang"], text=part["text"])
        return cls(local=halves.get("local"), remote=halves.get("remote"))


@dataclass(frozen=True)
class Decision:
    allow: bool
    reason: str = ""

    def __post_init__(self):
        if self.allow and self.reason:
            raise ValueError("allow decisions carry no reason")
        if not self.allow and not self.reason:
            raise ValueError("deny decisions must carry a reason")


ALLOW = Decision(allow=True)


@dataclass(frozen=True)
class PolicyNode:
    """One AST node. ``path`` is the stable document-order label used in deny
    reasons (e.g. "all[1].eq"); ``source`` is the node's compact JSON."""

    op: str
    path: str
    source: str
    children: tuple = ()
    operands: tuple = ()


PolicyAst = PolicyNode


def _parse_node(obj, path_prefix: str, depth: int) -> PolicyNode:
    if depth > MAX_POLICY_DEPTH:
        raise MalformedPolicy(f"policy nesting exceeds {MAX_POLICY_DEPTH} levels")
    if not isinstance(obj, dict) or len(obj) != 1:
        raise MalformedPolicy("each policy node must be an object with exactly one operator key")
    op, arg = next(iter(obj.items()))
    path = f"{path_prefix}{op}"
    source = json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":"))
    if op in ("all", "any"):
        if not isinstance(arg, list):
            raise MalformedPolicy(f"{path}: operand must be a list of nodes")
        children = tuple(
            _parse_node(child, f"{path}[{i}].", depth + 1) for i, child in enumerate(arg)
        )
        return PolicyNode(op=op, path=path, source=source, children=children)
    if op == "not":
        child = _parse_node(arg, f"{path}.", depth + 1)
        return PolicyNode(op=op, path=path, source=source, children=(child,))
    if op in ("eq", "ne"):
        if not isinstance(arg, list) or len(arg) != 2:
            raise MalformedPolicy(f"{path}: operand must be a two-element list")
        _check_operand_types(path, arg)
        return PolicyNode(op=op, path=path, source=source, operands=tuple(arg))
    if op == "in":
        if not isinstance(arg, list) or len(arg) != 2 or not isinstance(arg[1], list):
            raise MalformedPolicy(f"{path}: operand must be [item, [candidates...]]")
        _check_operand_types(path, [arg[0]] + list(arg[1]))
        return PolicyNode(op=op, path=path, source=source, operands=(arg[0], tuple(arg[1])))
    if op in ("time_before", "time_after"):
        if not isinstance(arg, str):
            raise MalformedPolicy(f"{path}: operand must be an RFC 3339 timestamp string")
        parse_rfc3339(arg, where=path)
        return PolicyNode(op=op, path=path, source=source, operands=(arg,))
    raise UnknownOperator(f"unknown policy operator {op!r}")


def _check_operand_types(path: str, operands) -> None:
    for v in operands:
        if not isinstance(v, (str, int, float, bool)) and v is not None:
            raise MalformedPolicy(f"{path}: operands must be scalars or measurement references")


def parse_policy(text: PolicyText) -> PolicyAst:
    """Parse a policy into an AST. Only "ct-json-v1" is directly evaluable;
    other languages yield an opaque node routed to a registered external
    evaluator, or UnsupportedLanguage when none is registered."""
    if text.lang != LANG_CT_JSON:
        if text.lang in _EXTERNAL_EVALUATORS:
            return PolicyNode(op="external", path=text.lang, source=text.text, operands=(text.lang,))
        raise UnsupportedLanguage(f"cannot evaluate {text.lang!r} policies without a plug-in evaluator")
    try:
        obj = json.loads(text.text)
    except json.JSONDecodeError as e:
        raise MalformedPolicy(f"policy text is not valid JSON: {e}") from None
    return _parse_node(obj, "", 0)


def parse_rfc3339(value: str, where: str = "timestamp") -> datetime:
    """Parse an RFC 3339 timestamp into an aware UTC datetime."""
    text = value.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    try:
        ts = datetime.fromisoformat(text)
    except ValueError:
        raise MalformedPolicy(f"{where}: {value!r} is not an RFC 3339 timestamp") from None
    if ts.tzinfo is None:
        raise MalformedPolicy(f"{where}: {value!r} must carry a UTC offset")
    return ts.astimezone(timezone.utc)


def _resolve(operand, measurements: Mapping[str, str]):
    """Resolve a measurement reference. Returns (ok, value); unknown keys fail
    the containing comparison (fail-closed)."""
    if isinstance(operand, str) and operand.startswith(MEASUREMENT_REF_PREFIX):
        key = operand[len(MEASUREMENT_REF_PREFIX):]
        if key in measurements:
            return True, measurements[key]
        return False, None
    return True, operand


def _eval_node(node: PolicyNode, m: Mapping[str, str], now: datetime) -> tuple[bool, str | None]:
    """Returns (holds, failing_path). failing_path is the first node in
    document order responsible for a failure, None on success."""
    if node.op == "all":
        for child in node.children:
            ok, path = _eval_node(child, m, now)
            if not ok:
                return False, path
        return True, None
    if node.op == "any":
        first_fail = None
        for child in node.children:
            ok, path = _eval_node(child, m, now)
            if ok:
                return True, None
            if first_fail is None:
                first_fail = path
        # vacuous any: no child holds; an empty any fails at the node itself
        return False, first_fail or node.path
    if node.op == "not":
        ok, _ = _eval_node(node.children[0], m, now)
        return (not ok), (node.path if ok else None)
    if node.op in ("eq", "ne"):
        ok_a, a = _resolve(node.operands[0], m)
        ok_b, b = _resolve(node.operands[1], m)
        if not (ok_a and ok_b):
            return False, node.path
        holds = (a == b) if node.op == "eq" else (a != b)
        return holds, None if holds else node.path
    if node.op == "in":
        ok_item, item = _resolve(node.operands[0], m)
        if not ok_item:
            return False, node.path
        candidates = []
        for c in node.operands[1]:
            ok_c, v = _resolve(c, m)
            if not ok_c:
                return False, node.path
            candidates.append(v)
        holds = item in candidates
        return holds, None if holds else node.path
    if node.op in ("time_before", "time_after"):
        bound = parse_rfc3339(node.operands[0], where=node.path)
        holds = now < bound if node.op == "time_before" else now > bound
        return holds, None if holds else node.path
    raise UnknownOperator(node.op)  # unreachable for parsed ASTs


def _describe(root: PolicyNode, path: str) -> str:
    if root.path == path:
        return root.source
    for child in root.children:
        if path == child.path or path.startswith(child.path + ".") or path.startswith(child.path + "["):
            return _describe(child, path)
    return root.source


def evaluate(ast: PolicyAst, measurements: Mapping[str, str], now: datetime) -> Decision:
    """Evaluate an AST against measurements at time ``now``. Never raises for
    parsed ASTs; all failures are deny Decisions with a stable reason."""
    if ast.op == "external":
        evaluator = _EXTERNAL_EVALUATORS.get(ast.operands[0])
        if evaluator is None:
            raise UnsupportedLanguage(
                f"no evaluator registered for policy language {ast.operands[0]!r}"
            )
        return evaluator(ast.source, measurements, now)
    holds, failing = _eval_node(ast, measurements, now)
    if holds:
        return ALLOW
    return Decision(allow=False, reason=f"{failing}: {_describe(ast, failing)}")


# ---------------------------------------------------------------------------
# External evaluators (e.g. an OPA sidecar for rego)
# ---------------------------------------------------------------------------

ExternalEvaluator = Callable[[str, Mapping[str, str], datetime], Decision]
_EXTERNAL_EVALUATORS: dict[str, ExternalEvaluator] = {}


def register_external_evaluator(lang: str, fn: ExternalEvaluator) -> None:
    _EXTERNAL_EVALUATORS[lang] = fn


def unregister_external_evaluator(lang: str) -> None:
    _EXTERNAL_EVALUATORS.pop(lang, None)


def decide(
    policy: Optional[PolicyText], measurements: Mapping[str, str], now: datetime
) -> Decision:
    """Decision for one policy half; an absent policy allows."""
    if policy is None:
        return ALLOW
    return evaluate(parse_policy(policy), measurements, now)


# ---------------------------------------------------------------------------
# Measurements
# ---------------------------------------------------------------------------

def utcnow() -> datetime:
    return datetime.now(timezone.utc)


def rfc3339(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")


@dataclass(frozen=True)
class StaticMeasurementProvider:
    """Fixed measurement map, for tests and pinned deployments."""

    entries: Mapping[str, str]

    def collect(self) -> dict[str, str]:
        return dict(self.entries)


@dataclass(frozen=True)
class DefaultMeasurementProvider:
    """Emits device_id, os and an RFC 3339 timestamp. Clock and identity are
    injected so collection is pure and testable."""

    clock: Callable[[], datetime] = utcnow
    device_id: str = field(default_factory=lambda: platform.node() or "unknown")
    os_name: str = field(default_factory=platform.system)

    def collect(self) -> dict[str, str]:
        return {
            "device_id": self.device_id,
            "os": self.os_name,
            "timestamp": rfc3339(self.clock()),
        }


def collect_measurements(provider) -> dict[str, str]:
    """Run a provider and validate its output shape."""
    try:
        entries = provider.collect()
    except Exception as e:
        raise ProviderFailure(f"measurement provider failed: {e}") from e
    if not isinstance(entries, Mapping):
        raise ProviderFailure("measurement provider must return a mapping")
    out = {}
    for k, v in entries.items():
        if not isinstance(k, str) or not k:
            raise ProviderFailure(f"measurement key {k!r} must be a non-empty string")
        if not isinstance(v, str):
            raise ProviderFailure(f"measurement value for {k!r} must be a string")
        out[k] = v
    return out
