"""Training loop for co-evolving teacher and student adapter populations.

One step: pair every teacher with a student (PFSP), run the matchups,
turn outcomes into rewards, ratings and one policy-gradient update per
participating adapter, and every ``evolve_every`` steps replace the
lowest-LCB members with operator children of the top half.

The single-agent baseline runs the same code with one adapter that both
poses and solves its problems.
"""
from __future__ import annotations

import dataclasses
import functools
import hashlib
import json
import math
import struct
from concurrent.futures import Executor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import env as E
from . import rng as R
from .diagnostics import METRICS, CvtArchive, StepRecord, archive_insert, build_cvt, emit_step
from .operators import (ALL_OPERATORS, CROSSOVERS, LIVE_OPERATORS, MUTATIONS, OperatorParams,
                        apply_operator, arity, ceil_frac)
from .ratings import RatingConfig, RatingState, decide_outcome, lcb_rank, pfsp_sample, update_ratings
from .rl import (AdamState, OptimizerConfig, RolloutBatch, compute_advantages, policy_gradient_step,
                 reward_student, reward_teacher)
from .tensor import AdapterState, adapter_from_bytes, adapter_to_bytes, init_adapter

MODES = ("population", "single_agent", "pair_1t1s")
DEFAULT_SEED = 42


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class EngineConfig:
    n_teachers: int = 4
    n_students: int = 4
    steps: int = 200
    evolve_every: int = 10
    cull_fraction: float = 0.25
    prompts_per_type: int = 4
    rollouts: int = 8
    temperature: float = 1.0
    lr: float = 0.05
    rank: int = 4
    seed: int | None = None
    mode: str = "population"
    optimizer: str = "adamw"
    a_init_scale: float | None = None
    b_init_scale: float = 0.0
    scaling: float = 8.0
    evolve_singletons: bool = False
    max_depth: int = 8
    cvt_cells: int = 256
    cvt_seed: int = 0
    checkpoint_every: int = 0
    student_payload_gain: float = 6.0
    student_const_gain: float = 6.0
    student_malformed_bias: float = -1.0
    grammar_prior: dict | None = None
    operator_params: dict = field(default_factory=dict)
    rating: dict = field(default_factory=dict)
    retention_snapshots: tuple = (5, 10, 25, 50, 100)
    retention_retrain_steps: int = 50

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 < self.cull_fraction < 1:
            raise ConfigError("cull_fraction must lie in (0, 1)")
        if self.evolve_every < 1:
            raise ConfigError("evolve_every must be >= 1")
        if self.n_teachers < 1 or self.n_students < 1:
            raise ConfigError("populations need at least one member")
        if self.steps < 0 or self.prompts_per_type < 0 or self.rollouts < 1 or self.rank < 1:
            raise ConfigError("steps, prompts_per_type, rollouts and rank must be positive")
        if self.temperature <= 0 or self.scaling <= 0 or self.lr < 0:
            raise ConfigError("temperature and scaling must be positive, lr non-negative")
        if self.optimizer not in ("sgd", "adamw"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        try:
            OperatorParams.from_dict(self.operator_params)
            RatingConfig(**self.rating)
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from None
        object.__setattr__(self, "retention_snapshots", tuple(self.retention_snapshots))

    @classmethod
    def from_dict(cls, d: dict) -> "EngineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "EngineConfig":
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["retention_snapshots"] = list(self.retention_snapshots)
        return d

    def resolved(self, seed: int | None = None) -> "EngineConfig":
        """Fix the seed (flag > config > default) and the population shape of the mode."""
        s = seed if seed is not None else self.seed if self.seed is not None else DEFAULT_SEED
        changes = {"seed": int(s)}
        if self.mode == "pair_1t1s":
            changes.update(n_teachers=1, n_students=1)
        elif self.mode == "single_agent":
            changes.update(n_teachers=1, n_students=1)
        return dataclasses.replace(self, **changes)

    @property
    def params(self) -> OperatorParams:
        return OperatorParams.from_dict(self.operator_params)

    @property
    def rating_config(self) -> RatingConfig:
        return RatingConfig(**self.rating)

    @property
    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(kind=self.optimizer)

    @property
    def evolution_enabled(self) -> bool:
        if self.mode == "single_agent":
            return False
        if self.mode == "pair_1t1s":
            return self.evolve_singletons
        return True


# --- state ------------------------------------------------------------------------

@dataclass
class Member:
    id: int
    adapter: AdapterState
    rating: RatingState
    opt_state: AdamState | None = None

    def copy(self) -> "Member":
        opt = None
        if self.opt_state is not None:
            opt = AdamState(self.opt_state.step, dict(self.opt_state.m), dict(self.opt_state.v))
        return Member(self.id, self.adapter.copy(), self.rating, opt)


@dataclass
class PopulationState:
    teachers: list
    students: list      # empty in single-agent mode: the agent lives in ``teachers``
    step: int
    seed: int
    next_id: int
    archive: CvtArchive

    def copy(self) -> "PopulationState":
        return PopulationState([m.copy() for m in self.teachers], [m.copy() for m in self.students],
                               self.step, self.seed, self.next_id, self.archive.copy())


@dataclass(frozen=True)
class EvolutionEvent:
    step: int
    role: str
    culled: tuple
    parents: tuple
    operator: str
    child_id: int
    child_seed: int
    fallback_from: str | None = None

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["culled"], d["parents"] = list(self.culled), list(self.parents)
        return d


@functools.lru_cache(maxsize=8)
def _centroids(k: int, seed: int) -> np.ndarray:
    c = build_cvt(k, R.stream("cvt", seed))
    c.setflags(write=False)
    return c


def _slot_shapes(cfg: EngineConfig, role: str) -> dict:
    if cfg.mode == "single_agent":
        return {E.GRAMMAR_SLOT: E.GRAMMAR_SHAPE, E.HEAD_SLOT: E.HEAD_SHAPE}
    return {E.GRAMMAR_SLOT: E.GRAMMAR_SHAPE} if role == "teacher" else {E.HEAD_SLOT: E.HEAD_SHAPE}


def _new_member(cfg: EngineConfig, role: str, mid: int) -> Member:
    ad = init_adapter(_slot_shapes(cfg, role), cfg.rank, R.stream(cfg.seed, "init", mid),
                      scaling=cfg.scaling, a_scale=cfg.a_init_scale, b_scale=cfg.b_init_scale)
    ad.provenance = {"id": mid, "role": role, "operator": "init", "born_step": 0}
    return Member(mid, ad, RatingState.prior(cfg.rating_config))


def init_state(cfg: EngineConfig) -> PopulationState:
    cfg = cfg if cfg.seed is not None else cfg.resolved()
    archive = CvtArchive(_centroids(cfg.cvt_cells, cfg.cvt_seed))
    if cfg.mode == "single_agent":
        return PopulationState([_new_member(cfg, "agent", 0)], [], 0, cfg.seed, 1, archive)
    teachers = [_new_member(cfg, "teacher", i) for i in range(cfg.n_teachers)]
    students = [_new_member(cfg, "student", cfg.n_teachers + i) for i in range(cfg.n_students)]
    return PopulationState(teachers, students, 0, cfg.seed, cfg.n_teachers + cfg.n_students, archive)


@functools.lru_cache(maxsize=16)
def _grammar_base(prior_json: str) -> np.ndarray:
    prior = json.loads(prior_json)
    return E.grammar_base_logits(prior)


def teacher_policy(cfg: EngineConfig, adapter: AdapterState) -> E.TeacherPolicy:
    base = _grammar_base(json.dumps(cfg.grammar_prior, sort_keys=True))
    return E.TeacherPolicy(base, adapter, cfg.temperature, cfg.max_depth)


def student_policy(cfg: EngineConfig, adapter: AdapterState) -> E.StudentPolicy:
    base = E.student_base_weights(cfg.student_payload_gain, cfg.student_const_gain,
                                  cfg.student_malformed_bias)
    return E.StudentPolicy(base, adapter, cfg.temperature)


# --- one step ------------------------------------------------------------------------

def _matchup_job(args):
    tpol, spol, ppt, n, key, tid, sid = args
    return E.run_matchup(tpol, spol, ppt, n, R.stream(*key), tid, sid)


def _teacher_groups(batch: RolloutBatch, res: E.MatchupResult):
    """Add one reward group per task type: the prompt is the type, rollouts are problems."""
    rewards = [reward_teacher(p.valid, rho) for p, rho in zip(res.problems, res.rhos)]
    for tt in E.TASK_TYPES:
        idx = [i for i, p in enumerate(res.problems) if p.task_type == tt]
        if idx:
            batch.add([rewards[i] for i in idx],
                      {E.GRAMMAR_SLOT: np.stack([res.problems[i].grad for i in idx])},
                      [res.problems[i].logp for i in idx])
    return rewards


def _student_groups(batch: RolloutBatch, res: E.MatchupResult):
    rewards = []
    for bits, verdicts, grads in zip(res.bits, res.verdicts, res.student_grads):
        if bits is None:
            continue
        r = [reward_student(v) for v in verdicts]
        batch.add(r, {E.HEAD_SLOT: grads})
        rewards += r
    return rewards


def _update(member: Member, batch: RolloutBatch, cfg: EngineConfig) -> Member:
    adv = compute_advantages(batch)
    ad, opt, _ = policy_gradient_step(member.adapter, batch, adv, cfg.lr, cfg.optimizer_config,
                                      member.opt_state)
    return Member(member.id, ad, member.rating, opt)


def _step_stats(cfg, state, step, results, t_rewards, s_rewards, tpols, spols_seen, events):
    problems = [p for r in results for p in r.problems]
    valid = [p for p in problems if p.valid]
    bits = [b for r in results for b in r.bits if b is not None]
    verdicts = [v for r in results for vs in r.verdicts if vs is not None for v in vs]
    all_bits = np.concatenate(bits) if bits else np.zeros(0, dtype=bool)
    per_type = {}
    for tt in E.TASK_TYPES:
        tb = [b for r in results for p, b in zip(r.problems, r.bits) if b is not None and p.task_type == tt]
        per_type[tt] = float(np.concatenate(tb).mean()) if tb else None
    complexity = {m: (float(np.mean([getattr(p.descriptor, m) for p in valid])) if valid else None)
                  for m in METRICS}
    t_ent = [E.policy_entropy(tp, [c for p in r.problems for c in p.contexts])
             for tp, r in zip(tpols, results)]
    s_ent = [E.policy_entropy(sp, probs) for sp, probs in spols_seen if probs]
    matchups = []
    for r in results:
        out = decide_outcome(r.valid_rhos)
        matchups.append({"teacher": r.teacher_id, "student": r.student_id,
                         "winner": out.winner_role, "rho": out.aggregate_rho})
    ratings = lambda ms: [[m.id, m.rating.mu, m.rating.sigma] for m in ms]
    return StepRecord(
        step=step, mode=cfg.mode,
        solve_rate=float(all_bits.mean()) if all_bits.size else 0.0,
        validity_rate=len(valid) / len(problems) if problems else 0.0,
        format_rate=float(np.mean([v != E.MALFORMED for v in verdicts])) if verdicts else 0.0,
        teacher_entropy=float(np.mean(t_ent)) if t_ent else 0.0,
        student_entropy=float(np.mean(s_ent)) if s_ent else 0.0,
        mean_program_length=float(np.mean([p.n_tokens for p in problems])) if problems else 0.0,
        coverage=state.archive.coverage,
        complexity=complexity, per_type=per_type,
        teacher_ratings=ratings(state.teachers), student_ratings=ratings(state.students),
        matchups=matchups,
        teacher_reward=float(np.mean(t_rewards)) if t_rewards else 0.0,
        student_reward=float(np.mean(s_rewards)) if s_rewards else 0.0,
        events=[e.to_dict() for e in events])


def _problem_lines(step, results):
    return [p.to_json(step=step, teacher_id=r.teacher_id, rho=rho)
            for r in results for p, rho in zip(r.problems, r.rhos)]


def training_step(state: PopulationState, cfg: EngineConfig, executor: Executor | None = None):
    """Advance one step.  Returns ``(new_state, record, problem_lines)``.

    The input state is never modified, so a failure anywhere leaves the
    caller's state as it was.
    """
    if cfg.mode == "single_agent":
        return _baseline_step(state, cfg)
    new = state.copy()
    step = state.step + 1
    seed = state.seed
    rcfg = cfg.rating_config
    ppt = cfg.prompts_per_type

    # 1. matchmaking
    prng = R.stream(seed, step, "pfsp")
    pool = [s.rating for s in new.students]
    pairs = [(i, pfsp_sample(t.rating, pool, prng, rcfg)) for i, t in enumerate(new.teachers)]

    # 2-3. problems and rollouts
    tpols = [teacher_policy(cfg, new.teachers[i].adapter) for i, _ in pairs]
    spols = {j: student_policy(cfg, new.students[j].adapter) for _, j in pairs}
    jobs = [(tpols[k], spols[j], ppt, cfg.rollouts,
             (seed, step, "match", k, new.teachers[i].id, new.students[j].id),
             new.teachers[i].id, new.students[j].id) for k, (i, j) in enumerate(pairs)]
    results = list(executor.map(_matchup_job, jobs)) if executor else [_matchup_job(a) for a in jobs]

    # 4. rewards, ratings, updates
    t_batches = {i: RolloutBatch() for i, _ in pairs}
    s_batches = {j: RolloutBatch() for _, j in pairs}
    t_rewards, s_rewards = [], []
    seen = {j: [] for _, j in pairs}
    for (i, j), res in zip(pairs, results):
        t_rewards += _teacher_groups(t_batches[i], res)
        s_rewards += _student_groups(s_batches[j], res)
        seen[j] += [p for p in res.problems if p.valid]
        out = decide_outcome(res.valid_rhos)
        t, s = new.teachers[i], new.students[j]
        if out.winner_role == "teacher":
            t.rating, s.rating = update_ratings(t.rating, s.rating, rcfg)
        elif out.winner_role == "student":
            s.rating, t.rating = update_ratings(s.rating, t.rating, rcfg)
    for i, b in t_batches.items():
        new.teachers[i] = _update(new.teachers[i], b, cfg)
    for j, b in s_batches.items():
        new.students[j] = _update(new.students[j], b, cfg)

    for res in results:
        for p in res.problems:
            if p.valid:
                archive_insert(new.archive, p.descriptor)

    # 5. evolution
    events = []
    if cfg.evolution_enabled and step % cfg.evolve_every == 0:
        events = evolve_populations(new, cfg, step)
    new.step = step
    rec = _step_stats(cfg, new, step, results, t_rewards, s_rewards, tpols,
                      [(spols[j], seen[j]) for j in sorted(seen)], events)
    return new, rec, _problem_lines(step, results)


def _baseline_step(state: PopulationState, cfg: EngineConfig):
    new = state.copy()
    step = state.step + 1
    agent = new.teachers[0]
    tpol = teacher_policy(cfg, agent.adapter)
    spol = student_policy(cfg, agent.adapter)
    res = E.run_matchup(tpol, spol, cfg.prompts_per_type, cfg.rollouts,
                        R.stream(state.seed, step, "match", 0, agent.id, agent.id), agent.id, agent.id)
    # One pooled batch: teacher-side groups scored against the agent's own
    # solve rate, plus its solver groups; whitened jointly.
    batch = RolloutBatch()
    t_rewards = _teacher_groups(batch, res)
    s_rewards = _student_groups(batch, res)
    new.teachers[0] = _update(agent, batch, cfg)
    for p in res.problems:
        if p.valid:
            archive_insert(new.archive, p.descriptor)
    new.step = step
    rec = _step_stats(cfg, new, step, [res], t_rewards, s_rewards, [tpol],
                      [(spol, [p for p in res.problems if p.valid])], [])
    return new, rec, _problem_lines(step, [res])


# --- evolution ------------------------------------------------------------------------

def evolve_populations(state: PopulationState, cfg: EngineConfig, step: int) -> list[EvolutionEvent]:
    """Replace the bottom ``ceil(gamma N)`` of each sub-population in place."""
    events = []
    rcfg = cfg.rating_config
    params = cfg.params
    for role, pool in (("teacher", state.teachers), ("student", state.students)):
        n = len(pool)
        rng = R.stream(state.seed, step, "evolve", role)
        order = lcb_rank([m.rating for m in pool], rcfg)
        n_cull = ceil_frac(cfg.cull_fraction, n)
        culled = order[:n_cull]
        top = order[n - math.ceil(n / 2):]
        snapshot = [m for m in pool]
        for slot in culled:
            op = LIVE_OPERATORS[int(rng.integers(len(LIVE_OPERATORS)))]
            fallback = None
            if op in CROSSOVERS and len(top) < 2:
                fallback = op
                live_mut = [o for o in LIVE_OPERATORS if o in MUTATIONS]
                op = live_mut[int(rng.integers(len(live_mut)))]
            if arity(op) == 2:
                pi = [top[int(k)] for k in rng.choice(len(top), size=2, replace=False)]
            else:
                pi = [top[int(rng.integers(len(top)))]]
            parents = [snapshot[k] for k in pi]
            cseed = R.child_seed(rng)
            child = apply_operator(op, [p.adapter for p in parents], params, seed=cseed)
            cid = state.next_id
            state.next_id += 1
            child.provenance.update(id=cid, role=role, born_step=step)
            child.provenance["parents"] = [p.id for p in parents]
            mu = float(np.mean([p.rating.mu for p in parents]))
            pool[slot] = Member(cid, child, RatingState(mu, rcfg.sigma0, 0))
            events.append(EvolutionEvent(step, role, (snapshot[slot].id,), tuple(p.id for p in parents),
                                         op, cid, cseed, fallback))
    return events


# --- checkpoints ------------------------------------------------------------------------

CKPT_MAGIC = b"PLCK"
CKPT_VERSION = 1


def checkpoint_bytes(state: PopulationState, cfg: EngineConfig) -> bytes:
    blobs = bytearray()
    members = []

    def put(b: bytes):
        off = len(blobs)
        blobs.extend(b)
        return [off, len(b)]

    for role, pool in (("teacher", state.teachers), ("student", state.students)):
        for m in pool:
            entry = {"role": role, "id": m.id, "mu": m.rating.mu, "sigma": m.rating.sigma,
                     "games": m.rating.games, "provenance": m.adapter.provenance,
                     "adapter": put(adapter_to_bytes(m.adapter)), "opt": None}
            if m.opt_state is not None:
                moments = {}
                for which, d in (("m", m.opt_state.m), ("v", m.opt_state.v)):
                    for key in sorted(d):
                        arr = np.ascontiguousarray(d[key], dtype="<f8")
                        moments[f"{which}:{key}"] = [list(arr.shape)] + put(arr.tobytes())
                entry["opt"] = {"step": m.opt_state.step, "moments": moments}
            members.append(entry)
    manifest = {"config": cfg.to_dict(), "step": state.step, "seed": state.seed,
                "next_id": state.next_id,
                "archive": {"k": state.archive.k, "filled": np.flatnonzero(state.archive.filled).tolist(),
                            "total_problems": state.archive.total_problems},
                "members": members}
    mbytes = json.dumps(manifest, sort_keys=True).encode()
    body = CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(mbytes)) + mbytes + bytes(blobs)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(state: PopulationState, cfg: EngineConfig, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(state, cfg))
    tmp.replace(path)


def checkpoint_from_bytes(buf: bytes) -> tuple[PopulationState, EngineConfig]:
    if len(buf) < 16 + 32 or buf[:4] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic or too short)")
    body, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch (file corrupted or truncated)")
    version, mlen = struct.unpack("<IQ", body[4:16])
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        manifest = json.loads(body[16:16 + mlen])
        blobs = body[16 + mlen:]
        cfg = EngineConfig.from_dict(manifest["config"])
        teachers, students = [], []
        for e in manifest["members"]:
            off, n = e["adapter"]
            ad = adapter_from_bytes(blobs[off:off + n])
            ad.provenance = e["provenance"]
            opt = None
            if e["opt"] is not None:
                opt = AdamState(e["opt"]["step"])
                for name, (shape, o, k) in e["opt"]["moments"].items():
                    which, key = name.split(":", 1)
                    arr = np.frombuffer(blobs[o:o + k], dtype="<f8").reshape(shape).copy()
                    (opt.m if which == "m" else opt.v)[key] = arr
            m = Member(e["id"], ad, RatingState(e["mu"], e["sigma"], e["games"]), opt)
            (teachers if e["role"] != "student" else students).append(m)
        a = manifest["archive"]
        archive = CvtArchive(_centroids(a["k"], cfg.cvt_seed))
        archive.filled[a["filled"]] = True
        archive.total_problems = a["total_problems"]
        state = PopulationState(teachers, students, manifest["step"], manifest["seed"],
                                manifest["next_id"], archive)
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    return state, cfg


def load_checkpoint(path) -> tuple[PopulationState, EngineConfig]:
    return checkpoint_from_bytes(Path(path).read_bytes())


def state_hash(state: PopulationState, cfg: EngineConfig) -> str:
    return hashlib.sha256(checkpoint_bytes(state, cfg)).hexdigest()


# --- runs ----------------------------------------------------------------------------

def _truncate_jsonl(path: Path, last_step: int):
    if not path.exists():
        return
    keep = [ln for ln in path.read_text().splitlines(True) if json.loads(ln)["step"] <= last_step]
    path.write_text("".join(keep))


def run(cfg: EngineConfig, out_dir, resume: PopulationState | None = None,
        executor: Executor | None = None, on_step=None) -> PopulationState:
    """Run ``cfg.steps`` steps, writing logs and a final checkpoint under ``out_dir``."""
    cfg = cfg if cfg.seed is not None else cfg.resolved()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    state = resume if resume is not None else init_state(cfg)
    steps_path, probs_path = out / "steps.jsonl", out / "problems.jsonl"
    if resume is None:
        steps_path.write_text("")
        probs_path.write_text("")
    else:
        _truncate_jsonl(steps_path, state.step)
        _truncate_jsonl(probs_path, state.step)
    with open(steps_path, "a") as sfh, open(probs_path, "a") as pfh:
        while state.step < cfg.steps:
            state, rec, lines = training_step(state, cfg, executor)
            emit_step(rec, sfh)
            pfh.writelines(line + "\n" for line in lines)
            if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                (out / "checkpoints").mkdir(exist_ok=True)
                save_checkpoint(state, cfg, out / "checkpoints" / f"step_{state.step:05d}.plck")
            if on_step is not None:
                on_step(state, rec)
    save_checkpoint(state, cfg, out / "checkpoint.plck")
    return state


def run_baseline(cfg: EngineConfig, out_dir, executor=None, on_step=None) -> PopulationState:
    return run(dataclasses.replace(cfg, mode="single_agent").resolved(cfg.seed), out_dir,
               executor=executor, on_step=on_step)


def evaluate_state(state: PopulationState, cfg: EngineConfig, n_problems: int = 16) -> dict:
    """Exact expected solve rates of every student on problems from every teacher."""
    students = state.students or state.teachers
    out = {"step": state.step, "teachers": [], "students": []}
    for t in state.teachers:
        tp = teacher_policy(cfg, t.adapter)
        g = R.stream(state.seed, "eval", t.id)
        probs = [E.generate_problem(tp, tt, g) for _ in range(n_problems) for tt in E.TASK_TYPES]
        valid = [p for p in probs if p.valid]
        solve = {}
        for s in students:
            sp = student_policy(cfg, s.adapter)
            W = sp.weights()
            solve[s.id] = float(np.mean([sp.expected_solve(p, W) for p in valid])) if valid else None
        out["teachers"].append({
            "id": t.id, "mu": t.rating.mu, "sigma": t.rating.sigma,
            "validity": len(valid) / len(probs),
            "complexity": {m: (float(np.mean([getattr(p.descriptor, m) for p in valid])) if valid else None)
                           for m in METRICS},
            "student_solve": solve})
    out["students"] = [{"id": s.id, "mu": s.rating.mu, "sigma": s.rating.sigma} for s in students]
    return out


# --- retention ---------------------------------------------------------------------------

def _problem_bank(tpol, task_type, size, rng):
    bank = []
    while len(bank) < size:
        p = E.generate_problem(tpol, task_type, rng)
        if p.valid:
            bank.append(p)
    return bank


def _eval_matrix(bank):
    phi = np.stack([E.problem_features(p) for p in bank])
    correct = np.zeros((len(bank), E.N_ACTIONS), dtype=bool)
    for i, p in enumerate(bank):
        correct[i, list(p.correct_answers())] = True
    return phi, correct


def _expected_solve(spol: E.StudentPolicy, phi, correct) -> float:
    z = phi @ spol.weights().T / spol.temperature
    z -= z.max(axis=1, keepdims=True)
    pr = np.exp(z)
    pr /= pr.sum(axis=1, keepdims=True)
    return float((pr * correct).sum(axis=1).mean())


def retention_benchmark(cfg: EngineConfig, operators=ALL_OPERATORS, bank_size: int = 256,
                        eval_size: int = 64) -> dict:
    """Operator retention: snapshot trained students, apply operators, retrain children.

    Two parents start from one shared initialisation; the first trains on
    infer-output problems, the second on infer-input problems, both from a
    fixed (untrained) teacher.  Mutations act on the first parent and retrain
    on its task; crossovers combine both and retrain on the mixture.
    Rewards are exact expected solve rates on held-out problem sets.
    """
    cfg = cfg if cfg.seed is not None else cfg.resolved()
    seed = cfg.seed
    snaps = sorted(cfg.retention_snapshots)
    tpol = teacher_policy(cfg, init_adapter({E.GRAMMAR_SLOT: E.GRAMMAR_SHAPE}, cfg.rank, R.stream(seed, "ret-teacher")))
    tasks = {"A": E.INFER_OUTPUT, "B": E.INFER_INPUT}
    banks = {k: _problem_bank(tpol, tt, bank_size, R.stream(seed, "ret-bank", tt)) for k, tt in tasks.items()}
    evals = {k: _eval_matrix(_problem_bank(tpol, tt, eval_size, R.stream(seed, "ret-eval", tt)))
             for k, tt in tasks.items()}
    per_step = 2 * cfg.prompts_per_type

    def reward(adapter, keys):
        sp = student_policy(cfg, adapter)
        return float(np.mean([_expected_solve(sp, *evals[k]) for k in keys]))

    def train_step(member: Member, keys, tag, i) -> Member:
        g = R.stream(seed, "ret-train", tag, i)
        sp = student_policy(cfg, member.adapter)
        W = sp.weights()
        batch = RolloutBatch()
        for j in range(per_step):
            bank = banks[keys[j % len(keys)]]
            p = bank[int(g.integers(len(bank)))]
            _, verdicts, grads = E.solve_problem(sp, p, cfg.rollouts, g, W)
            batch.add([reward_student(v) for v in verdicts], {E.HEAD_SLOT: grads})
        return _update(member, batch, cfg)

    init = init_adapter({E.HEAD_SLOT: E.HEAD_SHAPE}, cfg.rank, R.stream(seed, "ret-init"),
                        scaling=cfg.scaling, a_scale=cfg.a_init_scale)
    parents = {}
    curves = {}
    for k in ("A", "B"):
        m = Member(0 if k == "A" else 1, init.copy(), RatingState())
        m.adapter.provenance = {"id": k}
        curve = [reward(m.adapter, [k])]
        shots = {}
        for i in range(1, snaps[-1] + 1):
            m = train_step(m, [k], f"parent{k}", i)
            curve.append(reward(m.adapter, [k]))
            if i in snaps:
                shots[i] = m.copy()
        parents[k], curves[k] = shots, curve

    rows = []
    for s in snaps:
        pa, pb = parents["A"][s], parents["B"][s]
        for op in operators:
            two = arity(op) == 2
            keys = ["A", "B"] if two else ["A"]
            cseed = R.child_seed(R.stream(seed, "ret-op", op, s))
            child = apply_operator(op, [pa.adapter, pb.adapter] if two else [pa.adapter], cfg.params, cseed)
            ref = float(np.mean([curves[k][s] for k in keys]))
            m = Member(-1, child, RatingState())
            curve = [reward(m.adapter, keys)]
            for i in range(1, cfg.retention_retrain_steps + 1):
                m = train_step(m, keys, f"child-{op}-{s}", i)
                curve.append(reward(m.adapter, keys))
            hit = next((i for i, v in enumerate(curve) if v >= 0.9 * ref), None)
            rows.append({"operator": op, "snapshot": s, "live": op in LIVE_OPERATORS,
                         "tasks": [tasks[k] for k in keys], "child_seed": cseed,
                         "parent_reward": ref, "child_curve": curve, "steps_to_90pct": hit})
    return {"snapshots": snaps, "parent_curves": {tasks[k]: c for k, c in curves.items()}, "rows": rows}
