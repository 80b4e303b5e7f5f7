"""Parsing of chain-of-thought completions into structured reasoning steps.

A completion carries calculation spans wrapped in << >> plus a final answer
after a #### marker. Two surface grammars are supported:

* infix: binary arithmetic over + - * / with decimal literals, standard
  precedence (* and / bind tighter), left associativity, optional parentheses,
  optional "=result" suffix (e.g. ``<<10*.5=5>>``);
* program: named operations ``name(arg, ...)`` whose arguments are numeric
  literals, problem-number references ``n<k>``, prior-step references
  ``#<k>``, or named constants ``const_<x>`` (e.g. ``<<divide(n0,n1)>>``).

Infix expressions flatten into a single operator with an ordered operand
list: same-operator chains keep every operand (1+2+3 -> +[1,2,3]; a-b-c is
the left-associative chain -[a,b,c]), while sub-expressions under a different
operator (or parenthesized groups that are not part of the chain) are
evaluated to a literal. The flat step form round-trips through
:func:`render_step`.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

FINAL_MARKER = "####"

INFIX_OPERATORS = ("+", "-", "*", "/")
COMMUTATIVE_OPERATORS = frozenset({"+", "*", "add", "multiply"})


class RationaleFormat(Enum):
    GSM8K = "gsm8k"
    MATHQA = "mathqa"


class OperandKind(Enum):
    LITERAL = "literal"
    PROBLEM_REF = "problem"
    STEP_REF = "step"
    CONST = "const"


class ParseError(ValueError):
    """Base class for rationale parsing failures."""


class MalformedStep(ParseError):
    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class MissingFinalAnswer(ParseError):
    """Raised when a completion lacks the final-answer marker.

    Carries the partially parsed rationale (steps and diagnostics) so callers
    can degrade gracefully instead of discarding the record.
    """

    def __init__(self, message: str, rationale: "Rationale"):
        super().__init__(message)
        self.rationale = rationale


class UnresolvedReference(ParseError):
    """A problem or step reference points outside the available values."""


class UnknownOperator(ParseError):
    pass


class UnknownConstant(ParseError):
    pass


@dataclass(frozen=True)
class Operand:
    kind: OperandKind
    value: object

    @classmethod
    def literal(cls, value: float) -> "Operand":
        return cls(OperandKind.LITERAL, float(value))

    @classmethod
    def problem_ref(cls, index: int) -> "Operand":
        return cls(OperandKind.PROBLEM_REF, int(index))

    @classmethod
    def step_ref(cls, index: int) -> "Operand":
        return cls(OperandKind.STEP_REF, int(index))

    @classmethod
    def const(cls, name: str) -> "Operand":
        return cls(OperandKind.CONST, name)

    def render(self) -> str:
        if self.kind is OperandKind.LITERAL:
            return format_number(self.value)
        if self.kind is OperandKind.PROBLEM_REF:
            return f"n{self.value}"
        if self.kind is OperandKind.STEP_REF:
            return f"#{self.value}"
        return f"const_{self.value}"


@dataclass(frozen=True)
class ReasoningStep:
    """One flat calculation: an operator applied to ordered operands.

    ``operator`` is one of "+", "-", "*", "/" for infix steps or the verbatim
    lowercase name for program steps. ``stated_result`` keeps the annotated
    result verbatim when the surface form carried one; it is never checked
    against a re-evaluation here.
    """

    operator: str
    operands: tuple[Operand, ...]
    stated_result: float | None = None

    def __post_init__(self) -> None:
        if not self.operands:
            raise MalformedStep("step must have at least one operand")

    @property
    def is_named(self) -> bool:
        return self.operator not in INFIX_OPERATORS

    @property
    def is_commutative(self) -> bool:
        return self.operator in COMMUTATIVE_OPERATORS


@dataclass
class Rationale:
    """Parsed completion: ordered steps, final answer, parse diagnostics."""

    steps: tuple[ReasoningStep, ...]
    final_answer: str | None
    final_value: float | None
    diagnostics: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "steps": [step_to_dict(s) for s in self.steps],
            "final_answer": self.final_answer,
            "final_value": self.final_value,
            "diagnostics": list(self.diagnostics),
        }


def step_to_dict(step: ReasoningStep) -> dict:
    return {
        "operator": step.operator,
        "operands": [{"kind": o.kind.value, "value": o.value} for o in step.operands],
        "stated_result": step.stated_result,
    }


def format_number(value: float) -> str:
    """Render a numeral without leading dot, trailing zeros, or separators."""
    value = float(value)
    if value == 0.0:
        return "0"
    if value == int(value) and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


_NUMBER_RE = re.compile(r"\d{1,3}(?:,\d{3})+(?:\.\d*)?|\d+\.\d*|\.\d+|\d+")


class _InfixParser:
    """Recursive-descent parser for the infix step grammar."""

    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def _skip_ws(self) -> None:
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def _peek(self) -> str:
        self._skip_ws()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def parse(self) -> tuple:
        node = self._expr()
        self._skip_ws()
        if self.pos != len(self.text):
            raise MalformedStep(f"unexpected character {self.text[self.pos]!r}", self.pos)
        return node

    def _expr(self) -> tuple:
        node = self._term()
        while self._peek() in ("+", "-"):
            op = self.text[self.pos]
            self.pos += 1
            node = (op, node, self._term())
        return node

    def _term(self) -> tuple:
        node = self._factor()
        while self._peek() in ("*", "/"):
            op = self.text[self.pos]
            self.pos += 1
            node = (op, node, self._factor())
        return node

    def _factor(self) -> tuple:
        ch = self._peek()
        if ch == "(":
            self.pos += 1
            node = self._expr()
            if self._peek() != ")":
                raise MalformedStep("unbalanced parenthesis", self.pos)
            self.pos += 1
            return ("group", node)
        if ch == "-":
            self.pos += 1
            inner = self._factor()
            if inner[0] == "num":
                return ("num", -inner[1])
            return ("neg", inner)
        if ch == "":
            raise MalformedStep("expression ended unexpectedly", self.pos)
        m = _NUMBER_RE.match(self.text, self.pos)
        if not m:
            raise MalformedStep(f"expected a number, found {ch!r}", self.pos)
        self.pos = m.end()
        return ("num", float(m.group().replace(",", "")))


def _eval_node(node: tuple, offset: int) -> float:
    kind = node[0]
    if kind == "num":
        return node[1]
    if kind == "group":
        return _eval_node(node[1], offset)
    if kind == "neg":
        return -_eval_node(node[1], offset)
    op, left, right = node
    a = _eval_node(left, offset)
    b = _eval_node(right, offset)
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if b == 0.0:
        raise MalformedStep("division by zero inside a nested expression", offset)
    return a / b


def _flatten(node: tuple, offset: int) -> ReasoningStep:
    """Collapse a parse tree into one operator with an ordered operand list.

    Same-operator chains keep all operands: + and * flatten on both sides
    (associativity), - and / flatten only their left spine so the list reads
    back left-associatively. Any other subtree becomes a literal holding its
    evaluated value.
    """
    op = node[0]
    commutative = op in ("+", "*")

    def leaf(n: tuple) -> list[Operand]:
        if n[0] == "num":
            return [Operand.literal(n[1])]
        return [Operand.literal(_eval_node(n, offset))]

    def collect(n: tuple, spine: bool) -> list[Operand]:
        if n[0] == op and (spine or commutative):
            return collect(n[1], spine or commutative) + collect(n[2], commutative)
        if n[0] == "group":
            inner = n[1]
            if inner[0] == op and (spine or commutative):
                return collect(inner, spine)
            return leaf(n)
        return leaf(n)

    return ReasoningStep(op, tuple(collect(node, True)))


def _parse_infix_step(span: str) -> ReasoningStep:
    if span.count("=") > 1:
        raise MalformedStep("more than one '=' in step", span.index("="))
    stated: float | None = None
    expr = span
    if "=" in span:
        expr, result_text = span.split("=", 1)
        result_text = result_text.strip().replace(",", "")
        if not result_text:
            raise MalformedStep("empty stated result", span.index("=") + 1)
        try:
            stated = float(result_text)
        except ValueError:
            raise MalformedStep(
                f"stated result {result_text!r} is not a number", span.index("=") + 1
            ) from None
    node = _InfixParser(expr).parse()
    while node[0] == "group":
        node = node[1]
    if node[0] in ("num", "neg"):
        raise MalformedStep("step contains no operator", 0)
    step = _flatten(node, 0)
    if stated is not None:
        step = ReasoningStep(step.operator, step.operands, stated)
    return step


_PROGRAM_RE = re.compile(r"\s*([A-Za-z_][A-Za-z0-9_]*)\s*\((.*)\)\s*$", re.DOTALL)
_PROBLEM_REF_RE = re.compile(r"n(\d+)$")
_STEP_REF_RE = re.compile(r"#(\d+)$")
_CONST_RE = re.compile(r"const_([A-Za-z0-9_]+)$")


def _parse_program_arg(arg: str, offset: int) -> Operand:
    arg = arg.strip()
    if not arg:
        raise MalformedStep("empty argument", offset)
    m = _PROBLEM_REF_RE.match(arg)
    if m:
        return Operand.problem_ref(int(m.group(1)))
    m = _STEP_REF_RE.match(arg)
    if m:
        return Operand.step_ref(int(m.group(1)))
    m = _CONST_RE.match(arg)
    if m:
        return Operand.const(m.group(1).lower())
    try:
        return Operand.literal(float(arg.replace(",", "")))
    except ValueError:
        raise MalformedStep(f"unrecognized argument {arg!r}", offset) from None


def _parse_program_step(span: str) -> ReasoningStep:
    m = _PROGRAM_RE.match(span)
    if not m:
        raise MalformedStep("expected name(arguments)", 0)
    name = m.group(1).lower()
    body = m.group(2)
    if "(" in body:
        raise MalformedStep("nested calls are not supported", span.index("(") + 1)
    args = body.split(",") if body.strip() else []
    if not args:
        raise MalformedStep("operation needs at least one argument", m.end(1))
    operands = tuple(_parse_program_arg(a, m.start(2)) for a in args)
    return ReasoningStep(name, operands)


def parse_step(span: str, fmt: RationaleFormat) -> ReasoningStep:
    """Parse the inside of one << >> span under the given surface grammar.

    ``fmt`` may be a :class:`RationaleFormat` member or its string value.
    """
    if RationaleFormat(fmt) is RationaleFormat.GSM8K:
        return _parse_infix_step(span)
    return _parse_program_step(span)


_SPAN_RE = re.compile(r"<<(.*?)>>", re.DOTALL)


def parse_rationale(text: str, fmt: RationaleFormat) -> Rationale:
    """Parse a full completion into steps plus the final answer.

    ``fmt`` may be a :class:`RationaleFormat` member or its string value.
    Malformed spans degrade to diagnostics; a missing #### marker raises
    :class:`MissingFinalAnswer` carrying the partial rationale.
    """
    fmt = RationaleFormat(fmt)
    steps: list[ReasoningStep] = []
    diagnostics: list[str] = []
    for i, m in enumerate(_SPAN_RE.finditer(text)):
        try:
            steps.append(parse_step(m.group(1), fmt))
        except MalformedStep as exc:
            diagnostics.append(f"step {i} at char {m.start()}: {exc}")
    marker = text.find(FINAL_MARKER)
    if marker < 0:
        partial = Rationale(tuple(steps), None, None, tuple(diagnostics))
        raise MissingFinalAnswer("completion has no final-answer marker", partial)
    tail = text[marker + len(FINAL_MARKER) :].strip()
    final = tail.split()[0] if tail else ""
    value = normalize_final_answer(final)
    return Rationale(
        tuple(steps),
        final,
        value if isinstance(value, float) else None,
        tuple(diagnostics),
    )


@dataclass(frozen=True)
class PoisonedValue:
    """Sentinel for a value ruined by division by zero or a domain error.

    Any step consuming a poisoned operand is itself poisoned; the sentinel
    never silently turns back into a number.
    """

    origin: int

    def __float__(self):  # pragma: no cover - defensive
        raise TypeError("poisoned values cannot be coerced to float")


NAMED_CONSTANTS = {"pi": math.pi, "e": math.e}

_NUMERIC_CONST_RE = re.compile(r"^\d+(?:_\d+)?$")


def resolve_constant(name: str) -> float:
    """Resolve const_<name>: known names, else digits with an optional
    underscore read as a decimal point (1 -> 1, 100 -> 100, 0_25 -> 0.25)."""
    if name in NAMED_CONSTANTS:
        return NAMED_CONSTANTS[name]
    if _NUMERIC_CONST_RE.match(name):
        return float(name.replace("_", ".", 1))
    raise UnknownConstant(f"unknown constant const_{name}")


def _apply_operator(op: str, args: list[float], index: int) -> float | PoisonedValue:
    try:
        if op in ("+", "add"):
            return math.fsum(args)
        if op in ("-", "subtract"):
            result = args[0]
            for a in args[1:]:
                result -= a
            return result
        if op in ("*", "multiply"):
            result = 1.0
            for a in args:
                result *= a
            return result
        if op in ("/", "divide"):
            result = args[0]
            for a in args[1:]:
                if a == 0.0:
                    return PoisonedValue(index)
                result /= a
            return result
        if op == "power":
            _need(op, args, 2)
            return float(args[0] ** args[1])
        if op == "sqrt":
            _need(op, args, 1)
            return math.sqrt(args[0])
        if op == "log":
            _need(op, args, 1)
            return math.log(args[0])
        if op == "negate":
            _need(op, args, 1)
            return -args[0]
        if op == "inverse":
            _need(op, args, 1)
            if args[0] == 0.0:
                return PoisonedValue(index)
            return 1.0 / args[0]
        if op == "max":
            return max(args)
        if op == "min":
            return min(args)
        if op == "floor":
            _need(op, args, 1)
            return float(math.floor(args[0]))
    except (ValueError, OverflowError):
        return PoisonedValue(index)
    raise UnknownOperator(f"unknown operator {op!r}")


def _need(op: str, args: list[float], arity: int) -> None:
    if len(args) != arity:
        raise UnknownOperator(f"operator {op!r} takes {arity} argument(s), got {len(args)}")


def evaluate_program(
    steps: Sequence[ReasoningStep], problem_numbers: Sequence[float] = ()
) -> list[float | PoisonedValue]:
    """Evaluate steps in order, resolving references against prior values.

    Division by zero (and any numeric domain error) yields a
    :class:`PoisonedValue` that propagates to every dependent step.
    """
    values: list[float | PoisonedValue] = []
    for index, step in enumerate(steps):
        args: list[float] = []
        poisoned: PoisonedValue | None = None
        for operand in step.operands:
            if operand.kind is OperandKind.LITERAL:
                args.append(float(operand.value))
            elif operand.kind is OperandKind.PROBLEM_REF:
                k = int(operand.value)
                if not 0 <= k < len(problem_numbers):
                    raise UnresolvedReference(
                        f"step {index} references problem number n{k}, "
                        f"but only {len(problem_numbers)} are available"
                    )
                args.append(float(problem_numbers[k]))
            elif operand.kind is OperandKind.STEP_REF:
                k = int(operand.value)
                if not 0 <= k < index:
                    raise UnresolvedReference(
                        f"step {index} references step #{k}, which is not a prior step"
                    )
                prior = values[k]
                if isinstance(prior, PoisonedValue):
                    poisoned = prior
                else:
                    args.append(float(prior))
            else:
                args.append(resolve_constant(str(operand.value)))
        if poisoned is not None:
            values.append(poisoned)
            continue
        values.append(_apply_operator(step.operator, args, index))
    return values


def render_step(step: ReasoningStep) -> str:
    """Surface form that reparses to an identical step (numerals normalized)."""
    if step.is_named:
        return f"{step.operator}({','.join(o.render() for o in step.operands)})"
    body = step.operator.join(o.render() for o in step.operands)
    if step.stated_result is not None:
        body += f"={format_number(step.stated_result)}"
    return body


def canonicalize_step(step: ReasoningStep, commutative: bool = False) -> str:
    """Deterministic matching key: operator plus normalized operands.

    With ``commutative`` set and a commutative operator, operands sort
    lexicographically so reordered forms share one key. The stated result
    never participates.
    """
    rendered = [o.render() for o in step.operands]
    if commutative and step.is_commutative:
        rendered = sorted(rendered)
    if step.is_named:
        return f"{step.operator}({','.join(rendered)})"
    return step.operator.join(rendered)


def normalize_final_answer(text: str) -> float | str:
    """Comparable form of a final answer.

    Strips whitespace and thousands separators; numeric strings (including a
    trailing .0) become floats, anything else becomes trimmed lowercase text.
    """
    cleaned = text.strip().replace(",", "")
    try:
        return float(cleaned)
    except ValueError:
        return cleaned.lower()
