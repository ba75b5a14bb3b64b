"""Teacher and student policies over frozen tables, problem generation and matchups.

A teacher is a context-conditioned probabilistic grammar: each derivation
step picks a production from ``softmax((base + delta)[context] / T)`` over
the productions allowed at that nesting level.  A student is a linear
softmax classifier over 64 answers plus an explicit malformed action.
Both adapt only through a low-rank delta on their frozen table.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import dsl
from .rl import CORRECT, MALFORMED, WRONG_WELLFORMED
from .tensor import AdapterState, effective_delta

INFER_INPUT = "infer_input"
INFER_OUTPUT = "infer_output"
TASK_TYPES = (INFER_INPUT, INFER_OUTPUT)

GRAMMAR_SLOT = "grammar"
HEAD_SLOT = "head"

N_ANSWERS = dsl.MOD
MALFORMED_ACTION = N_ANSWERS
N_ACTIONS = N_ANSWERS + 1
N_FEATURES = len(dsl.VOCAB) + 4 + 16 + 1
GRAMMAR_SHAPE = (dsl.N_CONTEXTS, dsl.N_PRODUCTIONS)
HEAD_SHAPE = (N_ACTIONS, N_FEATURES)


def _masked_softmax(logits, mask):
    z = np.where(mask, logits, -np.inf)
    z = z - z[mask].max()
    e = np.where(mask, np.exp(z), 0.0)
    return e / e.sum()


def categorical_entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


# --- teacher ------------------------------------------------------------------

# Group probabilities for the default grammar prior.  Within a group the
# mass is spread evenly; e.g. the four assignments share 0.6.
DEFAULT_GRAMMAR_PRIOR = {
    "StmtList": {"end": 0.6, "more": 0.4},
    "Stmt": {"assign": 0.6, "if": 0.1, "ifelse": 0.1, "repeat": 0.2},
    "Expr": {"term": 0.55, "binop": 0.45},
    "Term": {"const": 0.4, "var x": 0.3, "var v": 0.2, "paren": 0.1},
}


def _group_of(nt_name, label):
    head = label.split()[0]
    if nt_name == "Term" and head == "var":
        return "var x" if label == "var x" else "var v"
    return head


def grammar_base_logits(prior: dict | None = None) -> np.ndarray:
    """Frozen ``(contexts, productions)`` logit table; padded entries are 0."""
    prior = DEFAULT_GRAMMAR_PRIOR if prior is None else prior
    base = np.zeros(GRAMMAR_SHAPE)
    for nt, prods in dsl.PRODUCTIONS.items():
        name = dsl.NONTERMINALS[nt]
        groups = prior.get(name)
        row = np.zeros(dsl.N_PRODUCTIONS)
        if groups:
            labels = [_group_of(name, p.label) for p in prods]
            for i, g in enumerate(labels):
                row[i] = np.log(groups[g] / labels.count(g))
        for b in range(dsl.DEPTH_BUCKETS):
            base[dsl.context_index(nt, b)] = row
    return base


def uniform_base_logits() -> np.ndarray:
    return np.zeros(GRAMMAR_SHAPE)


@dataclass
class TeacherPolicy:
    base_logits: np.ndarray
    adapter: AdapterState
    temperature: float = 1.0
    max_depth: int = dsl.MAX_DEPTH
    max_tokens: int = dsl.MAX_TOKENS
    slot: str = GRAMMAR_SLOT

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.base_logits.shape != GRAMMAR_SHAPE:
            raise ValueError(f"base logits must be {GRAMMAR_SHAPE}")

    def table(self) -> np.ndarray:
        delta = effective_delta(self.adapter.slots[self.slot]).astype(np.float64)
        return self.base_logits + self.adapter.scaling * delta

    def distribution(self, nonterminal: int, level: int, table=None) -> np.ndarray:
        table = self.table() if table is None else table
        ctx = dsl.context_index(nonterminal, level)
        mask = dsl.allowed_productions(nonterminal, level, self.max_depth)
        return _masked_softmax(table[ctx] / self.temperature, mask)


class _Overflow(Exception):
    pass


class _Deriver:
    """Top-down sampler that builds the AST and accumulates score gradients."""

    # Terminal tokens contributed by each production kind.
    _TOKENS = {"prog": 1, "end": 0, "more": 0, "assign": 3, "if": 3, "ifelse": 6,
               "repeat": 4, "term": 0, "binop": 1, "const": 1, "var": 1, "paren": 2, "cmp": 1}

    def __init__(self, policy: TeacherPolicy, rng):
        self.p = policy
        self.rng = rng
        self.table = policy.table()
        self.grad = np.zeros(GRAMMAR_SHAPE)
        self.logp = 0.0
        self.tokens = 0
        self.contexts: list[tuple[int, int]] = []
        self.choices: list[int] = []
        self._dists = {}

    def _dist(self, nt, level):
        key = (nt, level)
        if key not in self._dists:
            probs = self.p.distribution(nt, level, self.table)
            cdf = np.cumsum(probs)
            self._dists[key] = (probs, cdf, int(np.flatnonzero(probs)[-1]))
        return self._dists[key]

    def choose(self, nt, level):
        probs, cdf, last = self._dist(nt, level)
        # Inverse-CDF draw; zero-probability slots have empty intervals.
        i = min(int(np.searchsorted(cdf, self.rng.random(), side="right")), last)
        ctx = dsl.context_index(nt, level)
        g = -probs
        g[i] += 1.0
        self.grad[ctx] += g / self.p.temperature
        self.logp += float(np.log(probs[i]))
        self.contexts.append((nt, level))
        self.choices.append(i)
        prod = dsl.PRODUCTIONS[nt][i]
        self.tokens += self._TOKENS[prod.label.split()[0]]
        if self.tokens > self.p.max_tokens:
            raise _Overflow
        return prod

    def prog(self):
        self.choose(dsl.PROG, 0)
        stmts = self.stmt_list(1)
        return dsl.Prog(tuple(stmts), self.expr(1))

    def stmt_list(self, level):
        out = []
        while self.choose(dsl.STMTLIST, level).label == "more":
            out.append(self.stmt(level))
        return out

    def stmt(self, level):
        label = self.choose(dsl.STMT, level).label
        kind, _, arg = label.partition(" ")
        if kind == "assign":
            return dsl.Assign(arg, self.expr(level + 1))
        if kind == "repeat":
            return dsl.Repeat(int(arg), tuple(self.stmt_list(level + 1)))
        cond = self.cond(level + 1)
        then = tuple(self.stmt_list(level + 1))
        orelse = tuple(self.stmt_list(level + 1)) if kind == "ifelse" else None
        return dsl.If(cond, then, orelse)

    def cond(self, level):
        op = self.choose(dsl.COND, level).label.split()[1]
        return dsl.Cond(op, self.expr(level), self.expr(level))

    def expr(self, level):
        label = self.choose(dsl.EXPR, level).label
        if label == "term":
            return self.term(level)
        return dsl.BinOp(label.split()[1], self.term(level + 1), self.term(level + 1))

    def term(self, level):
        kind, _, arg = self.choose(dsl.TERM, level).label.partition(" ")
        if kind == "const":
            return dsl.Const(int(arg))
        if kind == "var":
            return dsl.Var(arg)
        return self.expr(level + 1)


@dataclass
class Problem:
    program: dsl.Prog | None
    task_type: str
    payload: int
    valid: bool
    descriptor: dsl.ComplexityDescriptor | None
    logp: float = 0.0
    grad: np.ndarray | None = None
    n_tokens: int = 0
    outputs: tuple | None = None
    contexts: list = field(default_factory=list)
    x: int | None = None  # input used to build the payload
    choices: list = field(default_factory=list)  # production index per context

    @property
    def program_text(self) -> str:
        return dsl.pretty(self.program) if self.program is not None else ""

    def correct_answers(self) -> frozenset:
        if not self.valid:
            raise ValueError("invalid problem has no answer set")
        if self.task_type == INFER_OUTPUT:
            return frozenset([self.outputs[self.payload]])
        return frozenset(x for x, y in enumerate(self.outputs) if y == self.payload)

    def to_json(self, **extra) -> str:
        d = dict(extra)
        d.update(task_type=self.task_type, program_text=self.program_text, payload=self.payload,
                 valid=self.valid,
                 descriptor=list(self.descriptor.as_tuple()) if self.descriptor else None)
        return json.dumps(d, sort_keys=True)


def generate_problem(t: TeacherPolicy, task_type: str, rng: np.random.Generator) -> Problem:
    """Derive a program, attach a payload and validate it."""
    if task_type not in TASK_TYPES:
        raise ValueError(f"unknown task type {task_type!r}")
    d = _Deriver(t, rng)
    try:
        prog = d.prog()
    except _Overflow:
        prog = None
    x = int(rng.integers(0, 16))
    if prog is None:
        return Problem(None, task_type, x, False, None, d.logp, d.grad, d.tokens,
                       contexts=d.contexts, choices=d.choices)
    outs = dsl.run_all_inputs(prog)
    desc = dsl.complexity(prog)
    n_tok = len(dsl.to_tokens(prog))
    if outs is None:
        return Problem(prog, task_type, x, False, desc, d.logp, d.grad, n_tok,
                       contexts=d.contexts, choices=d.choices)
    outs = tuple(int(o) for o in outs)
    payload = x if task_type == INFER_OUTPUT else outs[x]
    return Problem(prog, task_type, payload, True, desc, d.logp, d.grad, n_tok, outs, d.contexts, x,
                   d.choices)


def derivation_logp(t: TeacherPolicy, problem: Problem, rng_replay) -> float:
    """Recompute the log-probability of a derivation by replaying its rng."""
    d = _Deriver(t, rng_replay)
    try:
        d.prog()
    except _Overflow:
        pass
    return d.logp


# --- student ------------------------------------------------------------------

def problem_features(p: Problem) -> np.ndarray:
    """Token counts / 8, four normalized metrics, payload one-hot (mod 16), bias."""
    phi = np.zeros(N_FEATURES)
    for tok in dsl.to_tokens(p.program):
        phi[dsl.TOKEN_INDEX[tok]] += 1.0 / 8.0
    d = p.descriptor
    k = len(dsl.VOCAB)
    phi[k:k + 4] = (d.ast_depth / 8.0, d.cyclomatic / 8.0, d.loc / 16.0, d.var_count / 4.0)
    phi[k + 4 + p.payload % 16] = 1.0
    phi[-1] = 1.0
    return phi


def student_base_weights(payload_gain: float = 6.0, const_gain: float = 6.0,
                         malformed_bias: float = -1.0) -> np.ndarray:
    """Frozen head with a weak prior: echo the payload, or a literal constant."""
    W = np.zeros(HEAD_SHAPE)
    k = len(dsl.VOCAB)
    for v in range(16):
        W[v, k + 4 + v] = payload_gain
    for dgt in range(10):
        # Features are counts / 8, so one occurrence yields ``const_gain``.
        W[dgt, dsl.TOKEN_INDEX[str(dgt)]] = const_gain * 8.0
    W[MALFORMED_ACTION, -1] = malformed_bias
    return W


@dataclass
class StudentPolicy:
    base_weights: np.ndarray
    adapter: AdapterState
    temperature: float = 1.0
    slot: str = HEAD_SLOT

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    def weights(self) -> np.ndarray:
        delta = effective_delta(self.adapter.slots[self.slot]).astype(np.float64)
        return self.base_weights + self.adapter.scaling * delta

    def probs(self, p: Problem, W=None) -> np.ndarray:
        W = self.weights() if W is None else W
        z = W @ problem_features(p) / self.temperature
        z -= z.max()
        e = np.exp(z)
        return e / e.sum()

    def expected_solve(self, p: Problem, W=None) -> float:
        pr = self.probs(p, W)
        return float(sum(pr[a] for a in p.correct_answers()))


def verdict_for(p: Problem, answer: int) -> str:
    if answer == MALFORMED_ACTION:
        return MALFORMED
    return CORRECT if answer in p.correct_answers() else WRONG_WELLFORMED


def solve_problem(s: StudentPolicy, p: Problem, n: int, rng: np.random.Generator, W=None):
    """Sample ``n`` answers; returns ``(bits, verdicts, grads)``.

    ``grads`` has shape ``(n, actions, features)``: the gradient of each
    rollout's log-probability with respect to the head delta.
    """
    if not p.valid:
        raise ValueError("cannot solve an invalid problem")
    W = s.weights() if W is None else W
    phi = problem_features(p)
    z = W @ phi / s.temperature
    z -= z.max()
    pr = np.exp(z)
    pr /= pr.sum()
    answers = rng.choice(N_ACTIONS, size=n, p=pr)
    correct = p.correct_answers()
    verdicts = [verdict_for(p, int(a)) for a in answers]
    bits = np.array([a in correct for a in answers.tolist()], dtype=bool)
    onehot = np.zeros((n, N_ACTIONS))
    onehot[np.arange(n), answers] = 1.0
    grads = (onehot - pr)[:, :, None] * phi[None, None, :] / s.temperature
    return bits, verdicts, grads


# --- matchups ------------------------------------------------------------------

@dataclass
class MatchupResult:
    teacher_id: int
    student_id: int
    problems: list
    bits: list            # per problem: bool array, or None when invalid
    verdicts: list        # per problem: list of verdicts, or None
    student_grads: list   # per problem: (n, actions, features) array, or None

    @property
    def validity(self) -> list[bool]:
        return [p.valid for p in self.problems]

    @property
    def rhos(self) -> list:
        return [None if b is None else float(b.mean()) for b in self.bits]

    @property
    def valid_rhos(self) -> list[float]:
        return [r for r in self.rhos if r is not None]


def run_matchup(t: TeacherPolicy, s: StudentPolicy, prompts_per_type, n: int,
                rng: np.random.Generator, teacher_id: int = 0, student_id: int = 0) -> MatchupResult:
    """Generate problems of every task type and let the student attempt the valid ones."""
    if isinstance(prompts_per_type, int):
        prompts_per_type = (prompts_per_type,) * len(TASK_TYPES)
    W = s.weights()
    problems, bits, verdicts, grads = [], [], [], []
    for tt, count in zip(TASK_TYPES, prompts_per_type):
        for _ in range(count):
            p = generate_problem(t, tt, rng)
            problems.append(p)
            if p.valid:
                b, v, g = solve_problem(s, p, n, rng, W)
            else:
                b = v = g = None
            bits.append(b)
            verdicts.append(v)
            grads.append(g)
    return MatchupResult(teacher_id, student_id, problems, bits, verdicts, grads)


def policy_entropy(policy, contexts) -> float:
    """Mean exact entropy over derivation contexts (teacher) or problems (student)."""
    contexts = list(contexts)
    if not contexts:
        return 0.0
    if isinstance(policy, TeacherPolicy):
        table = policy.table()
        cache = {}
        for c in contexts:
            if c not in cache:
                cache[c] = categorical_entropy(policy.distribution(*c, table))
        hs = [cache[c] for c in contexts]
    else:
        W = policy.weights()
        hs = [categorical_entropy(policy.probs(p, W)) for p in contexts]
    return float(np.mean(hs))


def write_problem_archive(fh, step: int, teacher_id: int, result: MatchupResult):
    """Append one JSON line per problem of a matchup."""
    for p, rho in zip(result.problems, result.rhos):
        fh.write(p.to_json(step=step, teacher_id=teacher_id, rho=rho) + "\n")
