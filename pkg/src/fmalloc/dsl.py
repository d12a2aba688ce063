"""Mini-language for foundation-model programs.

A program is a single function of one streamed input whose body interleaves
symbolic control flow with calls to generic neural functions::

    program check(x) default "no":
      cat = find(x, "cat")
      laptop = find(x, "laptop")
      if cat and laptop:
        return vqa(x, "Is the cat on the laptop?")
      else:
        return "no"

Blocks are indentation-delimited (two spaces per level), ``#`` starts a
comment, and ``while`` loops carry an explicit ``bound N`` annotation.  Every
lexical neural-call expression becomes one call site; sites are numbered from
1 in source order.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Iterator, Union

RETURN_KINDS = ("detections", "text", "boolean", "number")
INDENT_WIDTH = 2

KEYWORDS = frozenset(
    {"program", "default", "if", "else", "while", "bound", "return", "and", "or", "not", "true", "false"}
)


class DSLSyntaxError(Exception):
    """Raised for malformed source, unknown functions and arity mismatches."""

    def __init__(self, message: str, line: int = 0, col: int = 0):
        self.message = message
        self.line = line
        self.col = col
        super().__init__(f"{line}:{col}: {message}" if line else message)


@dataclass(frozen=True)
class GenericFunction:
    name: str
    arity: int
    return_kind: str

    def __post_init__(self):
        if self.arity < 1:
            raise ValueError(f"function {self.name!r}: arity must be >= 1 (first argument is the input)")
        if self.return_kind not in RETURN_KINDS:
            raise ValueError(f"function {self.name!r}: unknown return kind {self.return_kind!r}")

    @property
    def id(self) -> str:
        return self.name


def default_functions() -> list[GenericFunction]:
    return [
        GenericFunction("find", 2, "boolean"),
        GenericFunction("detect", 2, "detections"),
        GenericFunction("count", 2, "number"),
        GenericFunction("vqa", 2, "text"),
        GenericFunction("answer", 2, "text"),
    ]


def function_table(registry) -> dict[str, GenericFunction]:
    """Accept a list of functions or a mapping and return name -> function."""
    if isinstance(registry, dict):
        return dict(registry)
    table: dict[str, GenericFunction] = {}
    for fn in registry:
        if fn.name in table:
            raise ValueError(f"duplicate generic function {fn.name!r}")
        table[fn.name] = fn
    return table


# ---------------------------------------------------------------------------
# IR nodes.  Source positions are carried for diagnostics but excluded from
# equality so that structurally equal programs compare equal.


@dataclass(frozen=True)
class Literal:
    value: Union[str, int, float, bool]
    line: int = field(default=0, compare=False, repr=False)
    col: int = field(default=0, compare=False, repr=False)


@dataclass(frozen=True)
class Name:
    id: str
    line: int = field(default=0, compare=False, repr=False)
    col: int = field(default=0, compare=False, repr=False)


@dataclass(frozen=True)
class Unary:
    op: str  # "-" or "not"
    operand: "Expr"
    line: int = field(default=0, compare=False, repr=False)
    col: int = field(default=0, compare=False, repr=False)


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Expr"
    right: "Expr"
    line: int = field(default=0, compare=False, repr=False)
    col: int = field(default=0, compare=False, repr=False)


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple
    site: int
    line: int = field(default=0, compare=False, repr=False)
    col: int = field(default=0, compare=False, repr=False)


Expr = Union[Literal, Name, Unary, Binary, Call]


@dataclass(frozen=True)
class Assign:
    target: str
    value: Expr
    line: int = field(default=0, compare=False, repr=False)
    col: int = field(default=0, compare=False, repr=False)


@dataclass(frozen=True)
class If:
    test: Expr
    body: tuple
    orelse: tuple = ()
    line: int = field(default=0, compare=False, repr=False)
    col: int = field(default=0, compare=False, repr=False)


@dataclass(frozen=True)
class While:
    test: Expr
    bound: int | None
    body: tuple
    line: int = field(default=0, compare=False, repr=False)
    col: int = field(default=0, compare=False, repr=False)


@dataclass(frozen=True)
class Return:
    value: Expr
    line: int = field(default=0, compare=False, repr=False)
    col: int = field(default=0, compare=False, repr=False)


Stmt = Union[Assign, If, While, Return]


@dataclass(frozen=True)
class CallSite:
    index: int
    function_id: str
    static_args: tuple = ()


@dataclass(frozen=True)
class ProgramIR:
    name: str
    param: str
    body: tuple
    call_sites: tuple
    default: Literal | None = None
    functions: dict = field(default_factory=dict, compare=False, repr=False, hash=False)

    @property
    def n_sites(self) -> int:
        return len(self.call_sites)


# ---------------------------------------------------------------------------
# Lexer

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ ]+)
  | (?P<comment>\#.*)
  | (?P<number>\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)
  | (?P<string>"(?:[^"\\]|\\.)*")
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>==|!=|<=|>=|[-+*/%<>=():,])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str  # NAME KEYWORD NUMBER STRING OP NEWLINE INDENT DEDENT EOF
    text: str
    value: object
    line: int
    col: int


def tokenize(source: str) -> list[Token]:
    tokens: list[Token] = []
    indents = [0]
    lineno = 0
    for lineno, raw in enumerate(source.splitlines(), start=1):
        if "\t" in raw[: len(raw) - len(raw.lstrip())]:
            raise DSLSyntaxError("tabs are not allowed in indentation", lineno, 1)
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        indent = len(raw) - len(raw.lstrip(" "))
        if indent > indents[-1]:
            if indent != indents[-1] + INDENT_WIDTH:
                raise DSLSyntaxError(f"indentation must increase by {INDENT_WIDTH} spaces", lineno, 1)
            indents.append(indent)
            tokens.append(Token("INDENT", "", None, lineno, 1))
        else:
            while indent < indents[-1]:
                indents.pop()
                tokens.append(Token("DEDENT", "", None, lineno, 1))
            if indent != indents[-1]:
                raise DSLSyntaxError("inconsistent dedent", lineno, 1)
        pos = indent
        while pos < len(raw):
            m = _TOKEN_RE.match(raw, pos)
            if m is None:
                raise DSLSyntaxError(f"unexpected character {raw[pos]!r}", lineno, pos + 1)
            kind = m.lastgroup
            text = m.group()
            col = pos + 1
            pos = m.end()
            if kind in ("ws", "comment"):
                continue
            if kind == "number":
                value = float(text) if any(c in text for c in ".eE") else int(text)
                tokens.append(Token("NUMBER", text, value, lineno, col))
            elif kind == "string":
                try:
                    value = json.loads(text)
                except json.JSONDecodeError as exc:
                    raise DSLSyntaxError(f"bad string literal: {exc.msg}", lineno, col) from None
                tokens.append(Token("STRING", text, value, lineno, col))
            elif kind == "name":
                tokens.append(Token("KEYWORD" if text in KEYWORDS else "NAME", text, text, lineno, col))
            else:
                tokens.append(Token("OP", text, text, lineno, col))
        tokens.append(Token("NEWLINE", "", None, lineno, len(raw) + 1))
    end = lineno + 1
    while len(indents) > 1:
        indents.pop()
        tokens.append(Token("DEDENT", "", None, end, 1))
    tokens.append(Token("EOF", "", None, end, 1))
    return tokens


# ---------------------------------------------------------------------------
# Parser

_COMPARE_OPS = ("==", "!=", "<", "<=", ">", ">=")


class _Parser:
    def __init__(self, tokens: list[Token], functions: dict[str, GenericFunction]):
        self.tokens = tokens
        self.pos = 0
        self.functions = functions
        self.sites: list[CallSite] = []

    def peek(self) -> Token:
        return self.tokens[self.pos]

    def advance(self) -> Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def at(self, kind: str, text: str | None = None) -> bool:
        tok = self.peek()
        return tok.kind == kind and (text is None or tok.text == text)

    def expect(self, kind: str, text: str | None = None) -> Token:
        tok = self.peek()
        if not self.at(kind, text):
            want = repr(text) if text else kind.lower()
            got = repr(tok.text) if tok.text else tok.kind.lower()
            raise DSLSyntaxError(f"expected {want}, found {got}", tok.line, tok.col)
        return self.advance()

    def program(self) -> ProgramIR:
        self.expect("KEYWORD", "program")
        name = self.expect("NAME").text
        self.expect("OP", "(")
        param = self.expect("NAME").text
        self.expect("OP", ")")
        default = None
        if self.at("KEYWORD", "default"):
            self.advance()
            default = self.literal()
        self.expect("OP", ":")
        self.expect("NEWLINE")
        body = self.block()
        self.expect("EOF")
        return ProgramIR(name, param, body, tuple(self.sites), default, self.functions)

    def literal(self) -> Literal:
        tok = self.peek()
        if tok.kind in ("NUMBER", "STRING"):
            self.advance()
            return Literal(tok.value, tok.line, tok.col)
        if tok.kind == "KEYWORD" and tok.text in ("true", "false"):
            self.advance()
            return Literal(tok.text == "true", tok.line, tok.col)
        if tok.kind == "OP" and tok.text == "-" and self.tokens[self.pos + 1].kind == "NUMBER":
            self.advance()
            num = self.advance()
            return Literal(-num.value, tok.line, tok.col)
        raise DSLSyntaxError("expected a literal", tok.line, tok.col)

    def block(self) -> tuple:
        self.expect("INDENT")
        stmts = []
        while not self.at("DEDENT") and not self.at("EOF"):
            stmts.append(self.statement())
        self.expect("DEDENT")
        return tuple(stmts)

    def statement(self) -> Stmt:
        tok = self.peek()
        if self.at("KEYWORD", "if"):
            self.advance()
            test = self.expr()
            self.expect("OP", ":")
            self.expect("NEWLINE")
            body = self.block()
            orelse: tuple = ()
            if self.at("KEYWORD", "else"):
                self.advance()
                self.expect("OP", ":")
                self.expect("NEWLINE")
                orelse = self.block()
            return If(test, body, orelse, tok.line, tok.col)
        if self.at("KEYWORD", "while"):
            self.advance()
            test = self.expr()
            bound = None
            if self.at("KEYWORD", "bound"):
                self.advance()
                btok = self.expect("NUMBER")
                if not isinstance(btok.value, int):
                    raise DSLSyntaxError("loop bound must be an integer", btok.line, btok.col)
                bound = btok.value
            self.expect("OP", ":")
            self.expect("NEWLINE")
            return While(test, bound, self.block(), tok.line, tok.col)
        if self.at("KEYWORD", "return"):
            self.advance()
            value = self.expr()
            self.expect("NEWLINE")
            return Return(value, tok.line, tok.col)
        if tok.kind == "NAME" and self.tokens[self.pos + 1].text == "=":
            self.advance()
            self.advance()
            value = self.expr()
            self.expect("NEWLINE")
            return Assign(tok.text, value, tok.line, tok.col)
        raise DSLSyntaxError(f"expected a statement, found {tok.text or tok.kind.lower()!r}", tok.line, tok.col)

    # precedence climbing, lowest first: or, and, not, comparison, +/-, */%, unary -
    def expr(self) -> Expr:
        left = self.and_expr()
        while self.at("KEYWORD", "or"):
            tok = self.advance()
            left = Binary("or", left, self.and_expr(), tok.line, tok.col)
        return left

    def and_expr(self) -> Expr:
        left = self.not_expr()
        while self.at("KEYWORD", "and"):
            tok = self.advance()
            left = Binary("and", left, self.not_expr(), tok.line, tok.col)
        return left

    def not_expr(self) -> Expr:
        if self.at("KEYWORD", "not"):
            tok = self.advance()
            return Unary("not", self.not_expr(), tok.line, tok.col)
        return self.comparison()

    def comparison(self) -> Expr:
        left = self.arith()
        tok = self.peek()
        if tok.kind == "OP" and tok.text in _COMPARE_OPS:
            self.advance()
            left = Binary(tok.text, left, self.arith(), tok.line, tok.col)
            nxt = self.peek()
            if nxt.kind == "OP" and nxt.text in _COMPARE_OPS:
                raise DSLSyntaxError("chained comparisons are not supported", nxt.line, nxt.col)
        return left

    def arith(self) -> Expr:
        left = self.term()
        while self.peek().kind == "OP" and self.peek().text in ("+", "-"):
            tok = self.advance()
            left = Binary(tok.text, left, self.term(), tok.line, tok.col)
        return left

    def term(self) -> Expr:
        left = self.unary()
        while self.peek().kind == "OP" and self.peek().text in ("*", "/", "%"):
            tok = self.advance()
            left = Binary(tok.text, left, self.unary(), tok.line, tok.col)
        return left

    def unary(self) -> Expr:
        if self.at("OP", "-"):
            tok = self.advance()
            return Unary("-", self.unary(), tok.line, tok.col)
        return self.atom()

    def atom(self) -> Expr:
        tok = self.peek()
        if tok.kind in ("NUMBER", "STRING"):
            self.advance()
            return Literal(tok.value, tok.line, tok.col)
        if tok.kind == "KEYWORD" and tok.text in ("true", "false"):
            self.advance()
            return Literal(tok.text == "true", tok.line, tok.col)
        if self.at("OP", "("):
            self.advance()
            inner = self.expr()
            self.expect("OP", ")")
            return inner
        if tok.kind == "NAME":
            self.advance()
            if self.at("OP", "("):
                return self.call(tok)
            return Name(tok.text, tok.line, tok.col)
        raise DSLSyntaxError(f"unexpected {tok.text or tok.kind.lower()!r}", tok.line, tok.col)

    def call(self, name_tok: Token) -> Call:
        fn = self.functions.get(name_tok.text)
        if fn is None:
            raise DSLSyntaxError(f"unknown function {name_tok.text!r}", name_tok.line, name_tok.col)
        self.expect("OP", "(")
        args = []
        if not self.at("OP", ")"):
            while True:
                tok = self.peek()
                if tok.kind == "NAME":
                    self.advance()
                    if self.at("OP", "("):
                        raise DSLSyntaxError("neural call arguments must be identifiers or literals", tok.line, tok.col)
                    args.append(Name(tok.text, tok.line, tok.col))
                else:
                    args.append(self.literal())
                if not self.at("OP", ","):
                    break
                self.advance()
        self.expect("OP", ")")
        if len(args) != fn.arity:
            raise DSLSyntaxError(
                f"{fn.name}() takes {fn.arity} argument(s), got {len(args)}", name_tok.line, name_tok.col
            )
        if not isinstance(args[0], Name):
            raise DSLSyntaxError(f"first argument of {fn.name}() must be the input", name_tok.line, name_tok.col)
        site = len(self.sites) + 1
        static = tuple(a.value for a in args if isinstance(a, Literal))
        self.sites.append(CallSite(site, fn.name, static))
        return Call(fn.name, tuple(args), site, name_tok.line, name_tok.col)


def parse_program(source: str, registry=None) -> ProgramIR:
    """Parse DSL source into a ProgramIR with call sites in lexical order."""
    functions = function_table(registry if registry is not None else default_functions())
    return _Parser(tokenize(source), functions).program()


def enumerate_call_sites(ir: ProgramIR) -> list[CallSite]:
    return list(ir.call_sites)


def iter_calls(node) -> Iterator[Call]:
    """Yield call expressions beneath ``node`` in source order."""
    if isinstance(node, tuple):
        for item in node:
            yield from iter_calls(item)
    elif isinstance(node, Call):
        yield node
    elif isinstance(node, Unary):
        yield from iter_calls(node.operand)
    elif isinstance(node, Binary):
        yield from iter_calls(node.left)
        yield from iter_calls(node.right)
    elif isinstance(node, Assign):
        yield from iter_calls(node.value)
    elif isinstance(node, Return):
        yield from iter_calls(node.value)
    elif isinstance(node, If):
        yield from iter_calls(node.test)
        yield from iter_calls(node.body)
        yield from iter_calls(node.orelse)
    elif isinstance(node, While):
        yield from iter_calls(node.test)
        yield from iter_calls(node.body)


def loop_multiplicity(ir: ProgramIR) -> list[int]:
    """Upper bound on dynamic executions of each site (product of enclosing loop bounds)."""
    mult = [1] * ir.n_sites

    def walk(stmts, factor):
        for st in stmts:
            if isinstance(st, If):
                for c in iter_calls(st.test):
                    mult[c.site - 1] = factor
                walk(st.body, factor)
                walk(st.orelse, factor)
            elif isinstance(st, While):
                inner = factor * (st.bound if st.bound is not None else 1)
                # the test runs once more than the body
                for c in iter_calls(st.test):
                    mult[c.site - 1] = factor * ((st.bound or 0) + 1)
                walk(st.body, inner)
            else:
                for c in iter_calls(st):
                    mult[c.site - 1] = factor

    walk(ir.body, 1)
    return mult


# ---------------------------------------------------------------------------
# Validation


@dataclass(frozen=True)
class Diagnostic:
    line: int
    col: int
    message: str

    def __str__(self) -> str:
        return f"{self.line}:{self.col}: {self.message}"


def _literal_kind(value) -> str:
    if isinstance(value, bool):
        return "boolean"
    if isinstance(value, str):
        return "text"
    return "number"


def validate_program(ir: ProgramIR, registry=None) -> list[Diagnostic]:
    """Static checks: definite assignment, loop bounds, return-kind consistency."""
    functions = function_table(registry) if registry is not None else ir.functions
    diags: list[Diagnostic] = []
    return_kinds: list[tuple[str, Return | Literal]] = []
    var_kinds: dict[str, str] = {ir.param: "input"}

    def kind_of(e: Expr) -> str:
        if isinstance(e, Literal):
            return _literal_kind(e.value)
        if isinstance(e, Name):
            return var_kinds.get(e.id, "unknown")
        if isinstance(e, Call):
            fn = functions.get(e.func)
            return fn.return_kind if fn else "unknown"
        if isinstance(e, Unary):
            return "boolean" if e.op == "not" else "number"
        if e.op in ("and", "or") or e.op in _COMPARE_OPS:
            return "boolean"
        if e.op == "+" and kind_of(e.left) == "text":
            return "text"
        return "number"

    def check_expr(e: Expr, defined: set[str]) -> None:
        if isinstance(e, Name):
            if e.id not in defined:
                diags.append(Diagnostic(e.line, e.col, f"variable {e.id!r} used before assignment"))
        elif isinstance(e, Unary):
            check_expr(e.operand, defined)
        elif isinstance(e, Binary):
            check_expr(e.left, defined)
            check_expr(e.right, defined)
        elif isinstance(e, Call):
            if e.func not in functions:
                diags.append(Diagnostic(e.line, e.col, f"unknown function {e.func!r}"))
            for a in e.args:
                check_expr(a, defined)

    def check_block(stmts, defined: set[str]) -> set[str]:
        defined = set(defined)
        for st in stmts:
            if isinstance(st, Assign):
                check_expr(st.value, defined)
                defined.add(st.target)
                k = kind_of(st.value)
                prev = var_kinds.get(st.target)
                var_kinds[st.target] = k if prev in (None, k) else "unknown"
            elif isinstance(st, Return):
                check_expr(st.value, defined)
                return_kinds.append((kind_of(st.value), st))
            elif isinstance(st, If):
                check_expr(st.test, defined)
                a = check_block(st.body, defined)
                b = check_block(st.orelse, defined)
                defined = a & b
            elif isinstance(st, While):
                check_expr(st.test, defined)
                if st.bound is None:
                    diags.append(Diagnostic(st.line, st.col, "while loop requires an explicit 'bound N' annotation"))
                elif st.bound < 1:
                    diags.append(Diagnostic(st.line, st.col, "loop bound must be at least 1"))
                check_block(st.body, defined)
        return defined

    check_block(ir.body, {ir.param})
    if ir.default is not None:
        return_kinds.append((_literal_kind(ir.default.value), ir.default))
    if not ir.call_sites:
        diags.append(Diagnostic(1, 1, "program makes no neural calls"))
    known = [(k, node) for k, node in return_kinds if k not in ("unknown", "input")]
    if known:
        first = known[0][0]
        compatible = {first, "number", "detections"} if first in ("number", "detections") else {first}
        for k, node in known[1:]:
            if k not in compatible:
                diags.append(
                    Diagnostic(node.line, node.col, f"inconsistent return kind: {k} (expected {first})")
                )
    return diags


# ---------------------------------------------------------------------------
# Pretty printer (canonical form; parse(pretty(ir)) == ir)

_PREC = {"or": 1, "and": 2, "not": 3, "cmp": 4, "+": 5, "-": 5, "*": 6, "/": 6, "%": 6, "neg": 7, "atom": 8}


def _prec(e: Expr) -> int:
    if isinstance(e, Binary):
        return _PREC["cmp"] if e.op in _COMPARE_OPS else _PREC[e.op]
    if isinstance(e, Unary):
        return _PREC["not"] if e.op == "not" else _PREC["neg"]
    if isinstance(e, Literal) and not isinstance(e.value, (bool, str)) and e.value < 0:
        return _PREC["neg"]
    return _PREC["atom"]


def format_literal(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return json.dumps(value, ensure_ascii=False)
    return repr(value)


def format_expr(e: Expr) -> str:
    if isinstance(e, Literal):
        return format_literal(e.value)
    if isinstance(e, Name):
        return e.id
    if isinstance(e, Call):
        return f"{e.func}({', '.join(format_expr(a) for a in e.args)})"
    if isinstance(e, Unary):
        inner = format_expr(e.operand)
        if _prec(e.operand) < _prec(e):
            inner = f"({inner})"
        return f"not {inner}" if e.op == "not" else f"-{inner}"
    p = _prec(e)
    left, right = format_expr(e.left), format_expr(e.right)
    # left-associative: a right operand of equal precedence needs parentheses;
    # comparisons do not chain, so both sides bind tighter
    if _prec(e.left) < p or (p == _PREC["cmp"] and _prec(e.left) == p):
        left = f"({left})"
    if _prec(e.right) <= p:
        right = f"({right})"
    return f"{left} {e.op} {right}"


def pretty(ir: ProgramIR) -> str:
    lines = []
    header = f"program {ir.name}({ir.param})"
    if ir.default is not None:
        header += f" default {format_literal(ir.default.value)}"
    lines.append(header + ":")

    def emit(stmts, depth):
        pad = " " * (INDENT_WIDTH * depth)
        for st in stmts:
            if isinstance(st, Assign):
                lines.append(f"{pad}{st.target} = {format_expr(st.value)}")
            elif isinstance(st, Return):
                lines.append(f"{pad}return {format_expr(st.value)}")
            elif isinstance(st, If):
                lines.append(f"{pad}if {format_expr(st.test)}:")
                emit(st.body, depth + 1)
                if st.orelse:
                    lines.append(f"{pad}else:")
                    emit(st.orelse, depth + 1)
            elif isinstance(st, While):
                bound = f" bound {st.bound}" if st.bound is not None else ""
                lines.append(f"{pad}while {format_expr(st.test)}{bound}:")
                emit(st.body, depth + 1)

    emit(ir.body, 1)
    return "\n".join(lines) + "\n"
