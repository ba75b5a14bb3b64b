"""Coverage archive, per-step records and report tables.

The archive tiles the normalized 4-D complexity space with a centroidal
Voronoi tessellation; coverage is the fraction of cells that received at
least one valid problem.  Step records are JSON lines; :func:`report`
turns a run directory into plot-ready CSVs and a short text summary.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .dsl import ComplexityDescriptor

SCHEMA_VERSION = 1
DESCRIPTOR_BOUNDS = np.array([8.0, 8.0, 16.0, 4.0])
METRICS = ("ast_depth", "cyclomatic", "loc", "var_count")


# --- CVT archive --------------------------------------------------------------

def build_cvt(k: int, rng: np.random.Generator, n_samples: int = 100_000,
              max_iter: int = 50, tol: float = 1e-4, dim: int = 4) -> np.ndarray:
    """Lloyd's iterations on uniform samples of the unit cube."""
    if k < 1 or k > n_samples:
        raise ValueError("need 1 <= k <= n_samples")
    pts = rng.random((n_samples, dim))
    cent = pts[:k].copy()
    for _ in range(max_iter):
        _, idx = cKDTree(cent).query(pts)
        counts = np.bincount(idx, minlength=k)
        sums = np.stack([np.bincount(idx, weights=pts[:, j], minlength=k) for j in range(dim)], axis=1)
        new = cent.copy()
        nz = counts > 0
        new[nz] = sums[nz] / counts[nz, None]
        moved = float(np.max(np.linalg.norm(new - cent, axis=1)))
        cent = new
        if moved < tol:
            break
    return cent


def normalize_descriptor(d) -> np.ndarray:
    v = np.asarray(d.as_tuple() if isinstance(d, ComplexityDescriptor) else d, dtype=np.float64)
    return np.clip(v / DESCRIPTOR_BOUNDS, 0.0, 1.0)


@dataclass
class CvtArchive:
    centroids: np.ndarray
    filled: np.ndarray = None
    total_problems: int = 0

    def __post_init__(self):
        if self.filled is None:
            self.filled = np.zeros(len(self.centroids), dtype=bool)

    @property
    def k(self) -> int:
        return len(self.centroids)

    @property
    def coverage(self) -> float:
        return float(self.filled.sum()) / self.k

    def copy(self) -> "CvtArchive":
        return CvtArchive(self.centroids, self.filled.copy(), self.total_problems)

    def cell_of(self, d) -> int:
        diff = self.centroids - normalize_descriptor(d)
        return int(np.argmin(np.einsum("ij,ij->i", diff, diff)))


def archive_insert(a: CvtArchive, d) -> CvtArchive:
    a.filled[a.cell_of(d)] = True
    a.total_problems += 1
    return a


# --- step records ---------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    mode: str
    solve_rate: float
    validity_rate: float
    format_rate: float
    teacher_entropy: float
    student_entropy: float
    mean_program_length: float
    coverage: float
    complexity: dict           # metric -> mean over valid problems, or None
    per_type: dict             # task type -> solve rate, or None
    teacher_ratings: list      # [id, mu, sigma]
    student_ratings: list
    matchups: list             # {teacher, student, winner, rho}
    teacher_reward: float
    student_reward: float
    events: list = field(default_factory=list)
    difficulty: float = None
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.difficulty is None:
            self.difficulty = 1.0 - self.solve_rate
        for name in ("solve_rate", "validity_rate", "format_rate", "coverage", "difficulty"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    @property
    def teacher_wins(self) -> int:
        return sum(m["winner"] == "teacher" for m in self.matchups)

    @property
    def student_wins(self) -> int:
        return sum(m["winner"] == "student" for m in self.matchups)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "StepRecord":
        d = json.loads(line)
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported step schema {d.get('schema_version')!r}")
        return cls(**d)


def emit_step(rec: StepRecord, sink) -> None:
    sink.write(rec.to_json() + "\n")


def read_steps(path) -> list[StepRecord]:
    with open(path) as fh:
        return [StepRecord.from_json(line) for line in fh if line.strip()]


# --- series statistics --------------------------------------------------------------

def linear_slope(xs, ys) -> float:
    """Least-squares slope; 0 for constant or too-short series."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if len(x) < 2 or np.ptp(y) == 0 or np.ptp(x) == 0:
        return 0.0
    xc = x - x.mean()
    return float(np.dot(xc, y - y.mean()) / np.dot(xc, xc))


def complexity_slopes(records) -> dict:
    out = {}
    for m in METRICS:
        pts = [(r.step, r.complexity[m]) for r in records if r.complexity.get(m) is not None]
        out[m] = linear_slope([p[0] for p in pts], [p[1] for p in pts]) if pts else 0.0
    return out


def lead_series(records, window: int = 10) -> list[int]:
    """Trailing-window sum of teacher wins minus student wins."""
    diff = np.array([r.teacher_wins - r.student_wins for r in records], dtype=np.int64)
    csum = np.concatenate([[0], np.cumsum(diff)])
    return [int(csum[i + 1] - csum[max(0, i + 1 - window)]) for i in range(len(diff))]


def sign_changes(series) -> int:
    signs = [np.sign(v) for v in series if v != 0]
    return int(sum(a != b for a, b in zip(signs, signs[1:])))


# --- report ------------------------------------------------------------------------

DYNAMICS_COLUMNS = ["step", "solve_rate", "difficulty", "validity_rate", "format_rate",
                    "teacher_entropy", "student_entropy", "mean_program_length",
                    "teacher_reward", "student_reward", "teacher_wins", "student_wins", "lead"]
COMPLEXITY_COLUMNS = ["step"] + list(METRICS)
SLOPE_COLUMNS = ["run", "metric", "slope"]
COMPARISON_COLUMNS = ["metric", "run_slope", "baseline_slope", "run_minus_baseline"]
COVERAGE_COLUMNS = ["step", "coverage"]
TRUESKILL_COLUMNS = ["step", "role", "id", "mu", "sigma"]
PER_TYPE_COLUMNS = ["step", "infer_input", "infer_output"]
RETENTION_COLUMNS = ["operator", "snapshot", "parent_reward", "child_reward_start",
                     "child_reward_end", "steps_to_90pct"]
RETENTION_CURVE_COLUMNS = ["operator", "snapshot", "retrain_step", "offset_step", "child_reward"]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def _write_csv(path: Path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _load_run(run_dir: Path):
    if not run_dir.is_dir():
        raise FileNotFoundError(f"run directory {run_dir} does not exist")
    steps = run_dir / "steps.jsonl"
    return read_steps(steps) if steps.exists() else []


def run_summary(records) -> dict:
    if not records:
        return {}
    lead = lead_series(records)
    tail = records[-50:]
    return {
        "steps": len(records),
        "mode": records[0].mode,
        "slopes": complexity_slopes(records),
        "final_coverage": records[-1].coverage,
        "lead_sign_changes": sign_changes(lead),
        "tail_solve_rate_mean": float(np.mean([r.solve_rate for r in tail])),
        "tail_solve_rate_min": float(np.min([r.solve_rate for r in tail])),
        "mean_validity": float(np.mean([r.validity_rate for r in records])),
    }


def report(run_dir, baseline_dir=None) -> dict:
    """Write CSV tables under ``run_dir/report`` and return the summary."""
    run_dir = Path(run_dir)
    records = _load_run(run_dir)
    out = run_dir / "report"
    out.mkdir(exist_ok=True)
    lead = lead_series(records)

    _write_csv(out / "dynamics.csv", DYNAMICS_COLUMNS, [
        [r.step, r.solve_rate, r.difficulty, r.validity_rate, r.format_rate, r.teacher_entropy,
         r.student_entropy, r.mean_program_length, r.teacher_reward, r.student_reward,
         r.teacher_wins, r.student_wins, ld] for r, ld in zip(records, lead)])
    _write_csv(out / "complexity.csv", COMPLEXITY_COLUMNS,
               [[r.step] + [r.complexity.get(m) for m in METRICS] for r in records])
    slopes = complexity_slopes(records)
    _write_csv(out / "slopes.csv", SLOPE_COLUMNS, [[run_dir.name, m, slopes[m]] for m in METRICS])
    _write_csv(out / "coverage.csv", COVERAGE_COLUMNS, [[r.step, r.coverage] for r in records])
    ts_rows = []
    for r in records:
        for role, ratings in (("teacher", r.teacher_ratings), ("student", r.student_ratings)):
            ts_rows += [[r.step, role, i, mu, sg] for i, mu, sg in ratings]
    _write_csv(out / "trueskill.csv", TRUESKILL_COLUMNS, ts_rows)
    _write_csv(out / "per_type.csv", PER_TYPE_COLUMNS,
               [[r.step, r.per_type.get("infer_input"), r.per_type.get("infer_output")] for r in records])

    summary = run_summary(records)
    lines = [f"run: {run_dir}"]
    if summary:
        lines += [f"mode: {summary['mode']}", f"steps: {summary['steps']}"]
        lines += [f"slope[{m}]: {slopes[m]:+.6f}" for m in METRICS]
        lines += [f"final coverage: {summary['final_coverage']:.4f}",
                  f"lead sign changes: {summary['lead_sign_changes']}",
                  f"solve rate over last 50 steps: mean {summary['tail_solve_rate_mean']:.4f}, "
                  f"min {summary['tail_solve_rate_min']:.4f}"]

    if baseline_dir is not None:
        base = _load_run(Path(baseline_dir))
        bslopes = complexity_slopes(base)
        _write_csv(out / "slope_comparison.csv", COMPARISON_COLUMNS,
                   [[m, slopes[m], bslopes[m], slopes[m] - bslopes[m]] for m in METRICS])
        summary["baseline_slopes"] = bslopes
        summary["baseline_final_coverage"] = base[-1].coverage if base else 0.0
        lines += [f"{m}: run {slopes[m]:+.6f} vs baseline {bslopes[m]:+.6f} "
                  f"({'run higher' if slopes[m] > bslopes[m] else 'baseline higher or equal'})"
                  for m in METRICS]
        lines.append(f"coverage: run {summary.get('final_coverage', 0.0):.4f} vs baseline "
                     f"{summary['baseline_final_coverage']:.4f}")

    ret = run_dir / "retention.json"
    if ret.exists():
        data = json.loads(ret.read_text())
        rows, curves = [], []
        for row in data["rows"]:
            rows.append([row["operator"], row["snapshot"], row["parent_reward"],
                         row["child_curve"][0], row["child_curve"][-1], row["steps_to_90pct"]])
            curves += [[row["operator"], row["snapshot"], i, row["snapshot"] + i, v]
                       for i, v in enumerate(row["child_curve"])]
        _write_csv(out / "retention.csv", RETENTION_COLUMNS, rows)
        _write_csv(out / "retention_curves.csv", RETENTION_CURVE_COLUMNS, curves)
        at25 = [r for r in data["rows"] if r["snapshot"] == 25 and r.get("live")]
        if at25:
            ok = sum(r["steps_to_90pct"] is not None and r["steps_to_90pct"] <= 20 for r in at25)
            lines.append(f"retention at snapshot 25: {ok}/{len(at25)} live operators within 20 steps")

    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    return summary
