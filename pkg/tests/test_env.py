import math

import numpy as np
import pytest

from selfplay_lora import dsl, env, rl
from selfplay_lora.dsl import BinOp, Const, If, Repeat, Var
from selfplay_lora.env import (INFER_INPUT, INFER_OUTPUT, MALFORMED_ACTION, Problem, StudentPolicy,
                               TeacherPolicy)
from selfplay_lora.ratings import decide_outcome
from selfplay_lora.tensor import AdapterState, FactorPair, init_adapter


def random_factors(shape, r, seed, scale=0.3):
    g = np.random.default_rng(seed)
    return AdapterState({"x": FactorPair(g.standard_normal((r, shape[1])) * scale,
                                         g.standard_normal((shape[0], r)) * scale)}, 2.0)


def teacher(seed=None, base=None, **kw):
    if seed is None:
        ad = init_adapter({env.GRAMMAR_SLOT: env.GRAMMAR_SHAPE}, 4, np.random.default_rng(0))
    else:
        f = random_factors(env.GRAMMAR_SHAPE, 4, seed).slots["x"]
        ad = AdapterState({env.GRAMMAR_SLOT: f}, 2.0)
    return TeacherPolicy(env.uniform_base_logits() if base is None else base, ad, **kw)


def student(base=None, seed=None):
    if seed is None:
        ad = init_adapter({env.HEAD_SLOT: env.HEAD_SHAPE}, 4, np.random.default_rng(0))
    else:
        ad = AdapterState({env.HEAD_SLOT: random_factors(env.HEAD_SHAPE, 4, seed).slots["x"]}, 2.0)
    return StudentPolicy(env.student_base_weights() if base is None else base, ad)


# --- generation -----------------------------------------------------------------------

def test_uniform_production_frequencies():
    # with max_depth 1 every program is "return Term": one draw per program
    # from the 15 non-paren terms
    t = teacher(max_depth=1)
    g = np.random.default_rng(0)
    labels = []
    for _ in range(10_000):
        p = generate_problem_ok(t, g)
        ret = p.program.ret
        labels.append(f"const {ret.value}" if isinstance(ret, Const) else f"var {ret.name}")
        assert p.program.stmts == ()
    _, counts = np.unique(labels, return_counts=True)
    assert len(counts) == 15
    assert np.all(np.abs(counts / 10_000 - 1 / 15) < 0.03)


def generate_problem_ok(t, g, tt=INFER_OUTPUT):
    p = env.generate_problem(t, tt, g)
    assert p.valid
    return p


def test_default_prior_mixes_statement_kinds():
    t = teacher(base=env.grammar_base_logits())
    g = np.random.default_rng(1)
    kinds = set()
    for _ in range(300):
        p = env.generate_problem(t, INFER_OUTPUT, g)
        if p.program is not None:
            kinds |= {type(s).__name__ for s in p.program.stmts}
    assert kinds == {"Assign", "If", "Repeat"}


def test_generated_programs_reparse_from_pretty_form():
    t = teacher(seed=3, base=env.grammar_base_logits())
    g = np.random.default_rng(2)
    for _ in range(300):
        p = env.generate_problem(t, INFER_INPUT, g)
        if p.program is not None:
            assert dsl.parse(p.program_text) == p.program
            assert p.descriptor == dsl.complexity(p.program)
            assert p.n_tokens == len(dsl.to_tokens(p.program)) <= dsl.MAX_TOKENS


def test_token_overflow_makes_invalid_problem():
    t = teacher(max_tokens=1)
    p = env.generate_problem(t, INFER_OUTPUT, np.random.default_rng(0))
    assert not p.valid and p.program is None
    assert rl.reward_teacher(p.valid, None) == -1.0


def test_bad_task_type_and_temperature():
    with pytest.raises(ValueError):
        env.generate_problem(teacher(), "infer_function", np.random.default_rng(0))
    with pytest.raises(ValueError):
        teacher(temperature=0.0)


# --- teacher log-probabilities ---------------------------------------------------------

def derivation_oracle(t, prog):
    """Rebuild the canonical production sequence of ``prog``; returns (logp, steps).

    A paren around a bare term leaves no trace in the AST, so this matches the
    sampled derivation only when no such redundant paren was drawn.
    """
    table = t.table()
    total = [0.0, 0]

    def pick(nt, level, label):
        labels = [p.label for p in dsl.PRODUCTIONS[nt]]
        total[0] += math.log(t.distribution(nt, level, table)[labels.index(label)])
        total[1] += 1

    def stmt_list(stmts, level):
        for s in stmts:
            pick(dsl.STMTLIST, level, "more")
            stmt(s, level)
        pick(dsl.STMTLIST, level, "end")

    def stmt(s, level):
        if isinstance(s, If):
            pick(dsl.STMT, level, "if" if s.orelse is None else "ifelse")
            pick(dsl.COND, level + 1, f"cmp {s.cond.op}")
            expr(s.cond.left, level + 1)
            expr(s.cond.right, level + 1)
            stmt_list(s.then, level + 1)
            if s.orelse is not None:
                stmt_list(s.orelse, level + 1)
        elif isinstance(s, Repeat):
            pick(dsl.STMT, level, f"repeat {s.count}")
            stmt_list(s.body, level + 1)
        else:
            pick(dsl.STMT, level, f"assign {s.var}")
            expr(s.expr, level + 1)

    def expr(e, level):
        if isinstance(e, BinOp):
            pick(dsl.EXPR, level, f"binop {e.op}")
            term(e.left, level + 1)
            term(e.right, level + 1)
        else:
            pick(dsl.EXPR, level, "term")
            term(e, level)

    def term(e, level):
        if isinstance(e, Const):
            pick(dsl.TERM, level, f"const {e.value}")
        elif isinstance(e, Var):
            pick(dsl.TERM, level, f"var {e.name}")
        else:
            pick(dsl.TERM, level, "paren")
            expr(e, level + 1)

    pick(dsl.PROG, 0, "prog")
    stmt_list(prog.stmts, 1)
    expr(prog.ret, 1)
    return total[0], total[1]


def test_teacher_logp_matches_recomputation():
    t = teacher(seed=5, base=env.grammar_base_logits(), temperature=0.7)
    g = np.random.default_rng(3)
    checked = 0
    for i in range(200):
        state = g.bit_generator.state
        p = env.generate_problem(t, INFER_OUTPUT, g)
        replay = np.random.default_rng()
        replay.bit_generator.state = state
        assert env.derivation_logp(t, p, replay) == p.logp
        # product of per-step probabilities along the recorded derivation
        direct = sum(math.log(t.distribution(nt, lvl)[i]) for (nt, lvl), i in zip(p.contexts, p.choices))
        assert abs(direct - p.logp) < 1e-9
        if p.program is not None:
            logp, steps = derivation_oracle(t, p.program)
            if steps == len(p.choices):
                assert abs(logp - p.logp) < 1e-9
                checked += 1
    assert checked > 100


def test_teacher_score_gradient_matches_finite_difference():
    t = teacher(seed=6, base=env.grammar_base_logits())
    p = generate_problem_ok(t, np.random.default_rng(4))
    h = 1e-6
    table = t.table()
    for ctx, col in [(c, int(np.argmax(np.abs(p.grad[c])))) for c in np.flatnonzero(np.abs(p.grad).sum(1))[:4]]:
        bumped = []
        for s in (1, -1):
            base = t.base_logits.copy()
            base[ctx, col] += s * h
            t2 = TeacherPolicy(base, t.adapter)
            bumped.append(sum(math.log(t2.distribution(nt, lvl)[i])
                              for (nt, lvl), i in zip(p.contexts, p.choices)))
        assert (bumped[0] - bumped[1]) / (2 * h) == pytest.approx(p.grad[ctx, col], abs=1e-5)
    assert table.shape == p.grad.shape


def test_masked_productions_get_exact_zero():
    t = teacher(seed=7)
    for nt, prods in dsl.PRODUCTIONS.items():
        for level in range(dsl.MAX_DEPTH + 1):
            mask = dsl.allowed_productions(nt, level)
            if not mask.any():
                continue        # unreachable: parents never expand into it
            d = t.distribution(nt, level)
            assert np.all(d[~mask] == 0.0)
            assert np.all(d[len(prods):] == 0.0)
            if mask.any():
                assert d.sum() == pytest.approx(1.0)


# --- solving ---------------------------------------------------------------------

def make_problem(text, task_type, x):
    prog = dsl.parse(text)
    outs = tuple(int(o) for o in dsl.run_all_inputs(prog))
    payload = x if task_type == INFER_OUTPUT else outs[x]
    return Problem(prog, task_type, payload, True, dsl.complexity(prog), outputs=outs, x=x)


def forced_student(action):
    W = np.zeros(env.HEAD_SHAPE)
    W[action, -1] = 50.0
    return student(base=W)


def test_forced_true_output_solves_everything():
    p = make_problem("v0 = x * 3 ; return v0 + 1", INFER_OUTPUT, 5)
    bits, verdicts, grads = env.solve_problem(forced_student(16), p, 8, np.random.default_rng(0))
    assert bits.all() and bits.mean() == 1.0
    assert set(verdicts) == {"correct"}
    assert grads.shape == (8,) + env.HEAD_SHAPE


def test_malformed_mass_gives_minus_one():
    p = make_problem("return x", INFER_OUTPUT, 2)
    bits, verdicts, _ = env.solve_problem(forced_student(MALFORMED_ACTION), p, 8, np.random.default_rng(0))
    assert not bits.any()
    assert [rl.reward_student(v) for v in verdicts] == [-1.0] * 8


def test_constant_program_accepts_every_input():
    p = make_problem("return 3", INFER_INPUT, 7)
    assert p.payload == 3
    assert p.correct_answers() == frozenset(range(16))
    for a in range(16):
        assert env.verdict_for(p, a) == "correct"
    for a in (16, 40, 63):
        assert env.verdict_for(p, a) == "wrong_wellformed"


def test_infer_input_preimage_always_exists():
    t = teacher(seed=8, base=env.grammar_base_logits())
    g = np.random.default_rng(5)
    for _ in range(300):
        p = env.generate_problem(t, INFER_INPUT, g)
        if p.valid:
            assert p.x in p.correct_answers()
            assert dsl.interpret(p.program, p.x).output == p.payload


def test_solve_rejects_invalid_problem():
    p = Problem(None, INFER_OUTPUT, 0, False, None)
    with pytest.raises(ValueError):
        env.solve_problem(student(), p, 4, np.random.default_rng(0))


def test_student_gradient_is_score_function():
    s = student(seed=9)
    p = make_problem("v0 = x + 2 ; return v0 * 3", INFER_OUTPUT, 4)
    _, _, grads = env.solve_problem(s, p, 4000, np.random.default_rng(1))
    # expected score is zero
    assert np.abs(grads.mean(0)).max() < 0.05
    W = s.weights()
    pr = s.probs(p, W)
    a = int(np.argmax(pr))
    h = 1e-6
    for j in np.flatnonzero(env.problem_features(p))[:5]:
        Wp, Wm = W.copy(), W.copy()
        Wp[a, j] += h
        Wm[a, j] -= h
        fd = (math.log(s.probs(p, Wp)[a]) - math.log(s.probs(p, Wm)[a])) / (2 * h)
        assert fd == pytest.approx((1 - pr[a]) * env.problem_features(p)[j], abs=1e-6)


# --- matchups ---------------------------------------------------------------------

def test_matchup_bounds():
    r = env.run_matchup(teacher(seed=10, base=env.grammar_base_logits()), student(), (4, 4), 8,
                        np.random.default_rng(0))
    assert len(r.problems) == 8
    assert sum(len(b) for b in r.bits if b is not None) <= 64
    for p, b, rho in zip(r.problems, r.bits, r.rhos):
        assert (b is None) == (not p.valid)
        if b is not None:
            assert rho == b.mean()


def test_all_invalid_matchup():
    r = env.run_matchup(teacher(max_tokens=1), student(), 3, 8, np.random.default_rng(0))
    assert r.validity == [False] * 6 and r.valid_rhos == []
    assert [rl.reward_teacher(v, rho) for v, rho in zip(r.validity, r.rhos)] == [-1.0] * 6
    assert decide_outcome(r.valid_rhos).winner_role == "student"


def test_matchup_is_deterministic():
    def go():
        r = env.run_matchup(teacher(seed=11, base=env.grammar_base_logits()), student(seed=12), 4, 8,
                            np.random.default_rng(42))
        return ([p.to_json() for p in r.problems], [None if b is None else b.tobytes() for b in r.bits],
                [None if g is None else g.tobytes() for g in r.student_grads])
    assert go() == go()


# --- entropy -----------------------------------------------------------------------

def test_entropy_examples():
    assert env.categorical_entropy(np.full(7, 1 / 7)) == pytest.approx(math.log(7))
    assert env.categorical_entropy(np.eye(5)[2]) == 0.0
    hot = teacher(seed=13, base=env.grammar_base_logits(), temperature=100.0)
    k = len(dsl.PRODUCTIONS[dsl.TERM])
    assert env.policy_entropy(hot, [(dsl.TERM, 1)]) == pytest.approx(math.log(k), rel=0.01)
    assert env.policy_entropy(hot, []) == 0.0


def test_student_entropy_over_problems():
    p = make_problem("return x", INFER_OUTPUT, 2)
    assert env.policy_entropy(forced_student(3), [p]) < 1e-10
    flat = student(base=np.zeros(env.HEAD_SHAPE))
    assert env.policy_entropy(flat, [p, p]) == pytest.approx(math.log(env.N_ACTIONS))
