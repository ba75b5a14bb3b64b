"""A small, total, deterministic program language used as the verifiable task domain.

Programs look like::

    v0 = x * 3
    if v0 > 7 {
      v1 = v0 - 2
    }
    repeat 3 {
      v0 = v0 + v1
    }
    return v0

All arithmetic is modulo 64, inputs range over 0..15, variables ``v0..v3``
start at 0 and loop counts are literal constants, so every program halts.
An operation budget bounds the cost of nested loops.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Union

import numpy as np

MOD = 64
INPUTS = range(16)
MAX_TOKENS = 128
MAX_DEPTH = 8
OP_BUDGET = 10_000
MAX_REPEAT = 8

VARS = ("v0", "v1", "v2", "v3")
VOCAB = (
    tuple(str(d) for d in range(10))
    + ("x",) + VARS
    + ("=", ";", "+", "-", "*", "(", ")", "if", "else", "repeat", "{", "}", "<", "==", ">", "return")
)
TOKEN_INDEX = {t: i for i, t in enumerate(VOCAB)}
ARITH_OPS = ("+", "-", "*")
CMP_OPS = ("<", "==", ">")


class ParseError(ValueError):
    def __init__(self, msg, pos=None):
        super().__init__(msg if pos is None else f"{msg} at token {pos}")
        self.pos = pos


class LengthOverflow(ParseError):
    pass


class DepthOverflow(ParseError):
    pass


# --- AST -------------------------------------------------------------------

@dataclass(frozen=True)
class Const:
    value: int


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


Expr = Union[Const, Var, BinOp]


@dataclass(frozen=True)
class Cond:
    op: str
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Assign:
    var: str
    expr: Expr


@dataclass(frozen=True)
class If:
    cond: Cond
    then: tuple
    orelse: tuple | None = None


@dataclass(frozen=True)
class Repeat:
    count: int
    body: tuple


@dataclass(frozen=True)
class Prog:
    stmts: tuple
    ret: Expr


Stmt = Union[Assign, If, Repeat]


# --- grammar catalog ---------------------------------------------------------
# Nonterminals in context order.  Each production lists its child
# nonterminals with the nesting-level offset they are expanded at.

PROG, STMTLIST, STMT, EXPR, TERM, COND = range(6)
NONTERMINALS = ("Prog", "StmtList", "Stmt", "Expr", "Term", "Cond")
DEPTH_BUCKETS = 4


@dataclass(frozen=True)
class Production:
    label: str
    children: tuple  # ((nonterminal, level offset), ...)


def _catalog():
    p = {}
    p[PROG] = [Production("prog", ((STMTLIST, 1), (EXPR, 1)))]
    p[STMTLIST] = [Production("end", ()), Production("more", ((STMT, 0), (STMTLIST, 0)))]
    p[STMT] = (
        [Production(f"assign {v}", ((EXPR, 1),)) for v in VARS]
        + [Production("if", ((COND, 1), (STMTLIST, 1))),
           Production("ifelse", ((COND, 1), (STMTLIST, 1), (STMTLIST, 1)))]
        + [Production(f"repeat {k}", ((STMTLIST, 1),)) for k in range(1, MAX_REPEAT + 1)]
    )
    p[EXPR] = [Production("term", ((TERM, 0),))] + [
        Production(f"binop {op}", ((TERM, 1), (TERM, 1))) for op in ARITH_OPS
    ]
    p[TERM] = (
        [Production(f"const {d}", ()) for d in range(10)]
        + [Production(f"var {v}", ()) for v in ("x",) + VARS]
        + [Production("paren", ((EXPR, 1),))]
    )
    p[COND] = [Production(f"cmp {op}", ((EXPR, 0), (EXPR, 0))) for op in CMP_OPS]
    return p


PRODUCTIONS = _catalog()
N_PRODUCTIONS = max(len(v) for v in PRODUCTIONS.values())
N_CONTEXTS = len(NONTERMINALS) * DEPTH_BUCKETS
# Smallest number of extra levels needed to finish expanding a nonterminal.
MIN_EXTRA = {PROG: 1, STMTLIST: 0, STMT: 1, EXPR: 0, TERM: 0, COND: 0}


def context_index(nonterminal: int, level: int) -> int:
    return nonterminal * DEPTH_BUCKETS + min(level, DEPTH_BUCKETS - 1)


@functools.lru_cache(maxsize=None)
def allowed_productions(nonterminal: int, level: int, max_depth: int = MAX_DEPTH) -> np.ndarray:
    """Boolean mask over the padded production axis (read-only, cached)."""
    mask = np.zeros(N_PRODUCTIONS, dtype=bool)
    for i, prod in enumerate(PRODUCTIONS[nonterminal]):
        mask[i] = all(level + off + MIN_EXTRA[nt] <= max_depth for nt, off in prod.children)
    mask.setflags(write=False)
    return mask


def production_mask() -> np.ndarray:
    """``(N_CONTEXTS, N_PRODUCTIONS)`` mask of real (non-padding) entries."""
    m = np.zeros((N_CONTEXTS, N_PRODUCTIONS), dtype=bool)
    for nt, prods in PRODUCTIONS.items():
        for b in range(DEPTH_BUCKETS):
            m[context_index(nt, b), : len(prods)] = True
    return m


# --- tokens and printing ---------------------------------------------------------

def _expr_tokens(e: Expr, out: list, nested: bool = False):
    if isinstance(e, Const):
        out.append(str(e.value))
    elif isinstance(e, Var):
        out.append(e.name)
    else:
        if nested:
            out.append("(")
        _expr_tokens(e.left, out, True)
        out.append(e.op)
        _expr_tokens(e.right, out, True)
        if nested:
            out.append(")")


def _stmt_tokens(s: Stmt, out: list):
    if isinstance(s, Assign):
        out += [s.var, "="]
        _expr_tokens(s.expr, out)
        out.append(";")
    elif isinstance(s, If):
        out.append("if")
        _expr_tokens(s.cond.left, out)
        out.append(s.cond.op)
        _expr_tokens(s.cond.right, out)
        out.append("{")
        for t in s.then:
            _stmt_tokens(t, out)
        out.append("}")
        if s.orelse is not None:
            out += ["else", "{"]
            for t in s.orelse:
                _stmt_tokens(t, out)
            out.append("}")
    else:
        out += ["repeat", str(s.count), "{"]
        for t in s.body:
            _stmt_tokens(t, out)
        out.append("}")


def to_tokens(prog: Prog) -> list[str]:
    out: list[str] = []
    for s in prog.stmts:
        _stmt_tokens(s, out)
    out.append("return")
    _expr_tokens(prog.ret, out)
    return out


def _expr_text(e: Expr) -> str:
    out: list[str] = []
    _expr_tokens(e, out)
    return " ".join(out)


def _stmt_lines(s: Stmt, indent: int, lines: list):
    pad = "  " * indent
    if isinstance(s, Assign):
        lines.append(f"{pad}{s.var} = {_expr_text(s.expr)}")
    elif isinstance(s, If):
        c = s.cond
        lines.append(f"{pad}if {_expr_text(c.left)} {c.op} {_expr_text(c.right)} {{")
        for t in s.then:
            _stmt_lines(t, indent + 1, lines)
        if s.orelse is not None:
            lines.append(f"{pad}}} else {{")
            for t in s.orelse:
                _stmt_lines(t, indent + 1, lines)
        lines.append(f"{pad}}}")
    else:
        lines.append(f"{pad}repeat {s.count} {{")
        for t in s.body:
            _stmt_lines(t, indent + 1, lines)
        lines.append(f"{pad}}}")


def pretty(prog: Prog) -> str:
    """Canonical file form: one statement per line, no ``;`` terminators."""
    lines: list[str] = []
    for s in prog.stmts:
        _stmt_lines(s, 0, lines)
    lines.append(f"return {_expr_text(prog.ret)}")
    return "\n".join(lines)


def tokenize(text: str) -> list[str]:
    """Split source text into tokens.

    Accepts both the token form (explicit ``;``) and the file form, where a
    line holding an assignment gets its ``;`` back.
    """
    toks: list[str] = []
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        toks += parts
        if len(parts) >= 2 and parts[1] == "=" and ";" not in parts:
            toks.append(";")
    for t in toks:
        if t not in TOKEN_INDEX:
            raise ParseError(f"unknown token {t!r}")
    return toks


# --- parser ------------------------------------------------------------------
# Recursive descent, one token of lookahead.  Each parse method returns the
# node and its height in nesting levels, mirroring the generator's rules.

class _Parser:
    def __init__(self, toks):
        self.toks = toks
        self.i = 0

    def peek(self):
        return self.toks[self.i] if self.i < len(self.toks) else None

    def take(self, expected=None):
        tok = self.peek()
        if tok is None:
            raise ParseError("unexpected end of input", self.i)
        if expected is not None and tok != expected:
            raise ParseError(f"expected {expected!r}, got {tok!r}", self.i)
        self.i += 1
        return tok

    def prog(self):
        stmts, hs = self.stmt_list(end="return")
        self.take("return")
        ret, he = self.expr()
        if self.peek() is not None:
            raise ParseError(f"trailing token {self.peek()!r}", self.i)
        return Prog(tuple(stmts), ret), 1 + max(hs, he)

    def stmt_list(self, end):
        stmts, h = [], 0
        while self.peek() != end:
            if self.peek() is None:
                raise ParseError("unexpected end of input", self.i)
            s, hs = self.stmt()
            stmts.append(s)
            h = max(h, hs)
        return stmts, h

    def block(self):
        self.take("{")
        stmts, h = self.stmt_list(end="}")
        self.take("}")
        return tuple(stmts), h

    def stmt(self):
        tok = self.peek()
        if tok in VARS:
            self.take()
            self.take("=")
            e, h = self.expr()
            self.take(";")
            return Assign(tok, e), 1 + h
        if tok == "if":
            self.take()
            c, hc = self.cond()
            then, ht = self.block()
            orelse, he = None, 0
            if self.peek() == "else":
                self.take()
                orelse, he = self.block()
            return If(c, then, orelse), 1 + max(hc, ht, he)
        if tok == "repeat":
            self.take()
            n = self.take()
            if not (n.isdigit() and 1 <= int(n) <= MAX_REPEAT):
                raise ParseError(f"repeat count must be 1..{MAX_REPEAT}, got {n!r}", self.i - 1)
            body, h = self.block()
            return Repeat(int(n), body), 1 + h
        raise ParseError(f"unexpected token {tok!r}", self.i)

    def cond(self):
        l, hl = self.expr()
        op = self.take()
        if op not in CMP_OPS:
            raise ParseError(f"expected comparison, got {op!r}", self.i - 1)
        r, hr = self.expr()
        return Cond(op, l, r), max(hl, hr)

    def expr(self):
        left, hl = self.term()
        if self.peek() in ARITH_OPS:
            op = self.take()
            right, hr = self.term()
            return BinOp(op, left, right), 1 + max(hl, hr)
        return left, hl

    def term(self):
        tok = self.take()
        if tok.isdigit():
            return Const(int(tok)), 0
        if tok == "x" or tok in VARS:
            return Var(tok), 0
        if tok == "(":
            e, h = self.expr()
            self.take(")")
            return e, 1 + h
        raise ParseError(f"unexpected token {tok!r}", self.i - 1)


def parse(tokens, max_depth: int = MAX_DEPTH, max_tokens: int = MAX_TOKENS) -> Prog:
    """Parse a token list (or source text) into a :class:`Prog`."""
    toks = tokenize(tokens) if isinstance(tokens, str) else list(tokens)
    if not toks:
        raise ParseError("empty program")
    if len(toks) > max_tokens:
        raise LengthOverflow(f"{len(toks)} tokens exceeds the {max_tokens}-token limit")
    for t in toks:
        if t not in TOKEN_INDEX:
            raise ParseError(f"unknown token {t!r}")
    prog, height = _Parser(toks).prog()
    if height > max_depth:
        raise DepthOverflow(f"nesting depth {height} exceeds {max_depth}")
    return prog


# --- interpreter ---------------------------------------------------------------

@dataclass(frozen=True)
class EvalResult:
    output: int | None
    budget_exceeded: bool = False


class _Budget(Exception):
    pass


def interpret(prog: Prog, x: int, budget: int = OP_BUDGET) -> EvalResult:
    """Run ``prog`` on one input.

    Costs: one unit per executed statement, per evaluated expression node,
    per condition, per loop iteration and for the return.
    """
    env = {"x": x % MOD, "v0": 0, "v1": 0, "v2": 0, "v3": 0}
    ops = [0]

    def tick():
        ops[0] += 1
        if ops[0] > budget:
            raise _Budget

    def ev(e):
        tick()
        if isinstance(e, Const):
            return e.value
        if isinstance(e, Var):
            return env[e.name]
        a, b = ev(e.left), ev(e.right)
        if e.op == "+":
            return (a + b) % MOD
        if e.op == "-":
            return (a - b) % MOD
        return (a * b) % MOD

    def run(stmts):
        for s in stmts:
            tick()
            if isinstance(s, Assign):
                env[s.var] = ev(s.expr)
            elif isinstance(s, If):
                tick()
                a, b = ev(s.cond.left), ev(s.cond.right)
                ok = a < b if s.cond.op == "<" else a == b if s.cond.op == "==" else a > b
                if ok:
                    run(s.then)
                elif s.orelse is not None:
                    run(s.orelse)
            else:
                for _ in range(s.count):
                    tick()
                    run(s.body)

    try:
        run(prog.stmts)
        tick()
        return EvalResult(ev(prog.ret))
    except _Budget:
        return EvalResult(None, True)


def run_all_inputs(prog: Prog, budget: int = OP_BUDGET) -> np.ndarray | None:
    """Evaluate ``prog`` on all 16 inputs at once; ``None`` if any run blows the budget.

    Lanes follow their own branches through masking; per-lane operation
    counts match :func:`interpret` exactly.
    """
    n = len(INPUTS)
    env = {"x": np.arange(n, dtype=np.int64) % MOD}
    for v in VARS:
        env[v] = np.zeros(n, dtype=np.int64)
    ops = np.zeros(n, dtype=np.int64)

    def tick(active):
        ops[active] += 1
        if ops.max() > budget:
            raise _Budget

    def ev(e, active):
        tick(active)
        if isinstance(e, Const):
            return np.full(n, e.value, dtype=np.int64)
        if isinstance(e, Var):
            return env[e.name]
        a, b = ev(e.left, active), ev(e.right, active)
        if e.op == "+":
            return (a + b) % MOD
        if e.op == "-":
            return (a - b) % MOD
        return (a * b) % MOD

    def run(stmts, active):
        for s in stmts:
            if not active.any():
                return
            tick(active)
            if isinstance(s, Assign):
                val = ev(s.expr, active)
                env[s.var] = np.where(active, val, env[s.var])
            elif isinstance(s, If):
                tick(active)
                a, b = ev(s.cond.left, active), ev(s.cond.right, active)
                ok = a < b if s.cond.op == "<" else a == b if s.cond.op == "==" else a > b
                run(s.then, active & ok)
                if s.orelse is not None:
                    run(s.orelse, active & ~ok)
            else:
                for _ in range(s.count):
                    tick(active)
                    run(s.body, active)

    everyone = np.ones(n, dtype=bool)
    try:
        run(prog.stmts, everyone)
        tick(everyone)
        return ev(prog.ret, everyone).copy()
    except _Budget:
        return None


def enumerate_io(prog: Prog) -> list[tuple[int, EvalResult]]:
    outs = run_all_inputs(prog)
    if outs is None:
        # Fall back per input so callers can see which runs blew the budget.
        return [(x, interpret(prog, x)) for x in INPUTS]
    return [(x, EvalResult(int(o))) for x, o in zip(INPUTS, outs)]


def is_valid_io(io) -> bool:
    return all(not r.budget_exceeded for _, r in io)


# --- structural metrics ----------------------------------------------------------

@dataclass(frozen=True)
class ComplexityDescriptor:
    ast_depth: int
    cyclomatic: int
    loc: int
    var_count: int

    def as_tuple(self):
        return (self.ast_depth, self.cyclomatic, self.loc, self.var_count)


def _expr_depth(e) -> int:
    if isinstance(e, BinOp):
        return 1 + max(_expr_depth(e.left), _expr_depth(e.right))
    return 1


def _walk(stmts, depth, acc):
    # depth is the AST depth at which these statement nodes sit.
    for s in stmts:
        acc["loc"] += 1
        acc["depth"] = max(acc["depth"], depth)
        if isinstance(s, Assign):
            acc["vars"].add(s.var)
            acc["depth"] = max(acc["depth"], depth + _expr_depth(s.expr))
        elif isinstance(s, If):
            acc["branches"] += 1
            cd = 1 + max(_expr_depth(s.cond.left), _expr_depth(s.cond.right))
            acc["depth"] = max(acc["depth"], depth + cd)
            _walk(s.then, depth + 1, acc)
            if s.orelse is not None:
                _walk(s.orelse, depth + 1, acc)
        else:
            acc["branches"] += 1
            _walk(s.body, depth + 1, acc)


def complexity(prog: Prog) -> ComplexityDescriptor:
    """AST depth (root = 1), 1 + #If + #Repeat, statements + return, distinct assigned vars."""
    acc = {"loc": 0, "depth": 2 + _expr_depth(prog.ret), "vars": set(), "branches": 0}
    _walk(prog.stmts, 2, acc)
    return ComplexityDescriptor(acc["depth"], 1 + acc["branches"], acc["loc"] + 1, len(acc["vars"]))


def is_constant_output(io) -> bool:
    outs = {r.output for _, r in io}
    return len(outs) == 1
