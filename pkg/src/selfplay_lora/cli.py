"""Command-line entry point.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime error.
Log verbosity is read from ``SELFPLAY_LORA_LOG`` (a logging level name).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from contextlib import nullcontext
from pathlib import Path

from . import __version__
from .diagnostics import report
from .engine import (ConfigError, CheckpointError, EngineConfig, evaluate_state, load_checkpoint,
                     retention_benchmark, run, run_baseline)
from .operators import ALL_OPERATORS, OperatorParams, apply_operator, arity
from .tensor import AdapterFormatError, load_adapter, save_adapter

LOG_ENV = "SELFPLAY_LORA_LOG"
log = logging.getLogger("selfplay_lora")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="selfplay-lora", description="Population self-play with low-rank adapters.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def run_flags(sp, out_required=True):
        sp.add_argument("--config", type=Path, help="JSON engine config")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--out", type=Path, required=out_required, help="output directory")

    tr = sub.add_parser("train", help="population training run")
    run_flags(tr)
    tr.add_argument("--workers", type=int, default=None, help="matchup worker processes")
    tr.add_argument("--resume", type=Path, help="checkpoint to resume from")

    bl = sub.add_parser("baseline", help="single-agent baseline run")
    run_flags(bl)
    bl.add_argument("--workers", type=int, default=None)

    rt = sub.add_parser("retention", help="operator retention benchmark")
    run_flags(rt)
    rt.add_argument("--operators", nargs="+", choices=ALL_OPERATORS, default=list(ALL_OPERATORS))

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--problems", type=int, default=16, help="problems per type per teacher")
    ev.add_argument("--out", type=Path, help="write JSON here instead of stdout")

    ops = sub.add_parser("ops", help="adapter operators")
    ops_sub = ops.add_subparsers(dest="ops_command", required=True, parser_class=_Parser)
    ap = ops_sub.add_parser("apply", help="apply one operator to adapter files")
    ap.add_argument("--op", required=True, choices=ALL_OPERATORS)
    ap.add_argument("--parent", type=Path, required=True)
    ap.add_argument("--parent2", type=Path)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--params", type=Path, help="JSON operator parameters")
    ap.add_argument("--out", type=Path, required=True)

    rp = sub.add_parser("report", help="write report tables for a run directory")
    rp.add_argument("--run", type=Path, required=True)
    rp.add_argument("--baseline", type=Path)
    return p


def _load_config(path: Path | None, seed: int | None, **overrides) -> EngineConfig:
    cfg = EngineConfig.load(path) if path is not None else EngineConfig()
    if overrides:
        cfg = EngineConfig.from_dict({**cfg.to_dict(), **overrides})
    return cfg.resolved(seed)


def _executor(workers: int | None):
    n = workers if workers is not None else (os.cpu_count() or 1)
    if n < 1:
        raise ConfigError("--workers must be >= 1")
    return ProcessPoolExecutor(n) if n > 1 else nullcontext(None)


def _progress(state, rec):
    log.info("step %d solve %.3f valid %.3f coverage %.3f", rec.step, rec.solve_rate,
             rec.validity_rate, rec.coverage)


def _cmd_train(a) -> int:
    if a.resume is not None:
        state, ck_cfg = load_checkpoint(a.resume)
        cfg = _load_config(a.config, a.seed) if a.config else ck_cfg.resolved(a.seed)
        if cfg.seed != state.seed:
            raise ConfigError(f"seed {cfg.seed} does not match checkpoint seed {state.seed}")
    else:
        state, cfg = None, _load_config(a.config, a.seed)
    with _executor(a.workers) as ex:
        final = run(cfg, a.out, resume=state, executor=ex, on_step=_progress)
    print(f"{cfg.mode} run finished at step {final.step}: {a.out}")
    return 0


def _cmd_baseline(a) -> int:
    cfg = _load_config(a.config, a.seed, mode="single_agent")
    with _executor(a.workers) as ex:
        final = run_baseline(cfg, a.out, executor=ex, on_step=_progress)
    print(f"baseline run finished at step {final.step}: {a.out}")
    return 0


def _cmd_retention(a) -> int:
    cfg = _load_config(a.config, a.seed)
    a.out.mkdir(parents=True, exist_ok=True)
    (a.out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    res = retention_benchmark(cfg, operators=tuple(a.operators))
    (a.out / "retention.json").write_text(json.dumps(res, indent=1, sort_keys=True) + "\n")
    print(f"retention benchmark: {len(res['rows'])} rows in {a.out / 'retention.json'}")
    return 0


def _cmd_eval(a) -> int:
    state, cfg = load_checkpoint(a.checkpoint)
    text = json.dumps(evaluate_state(state, cfg, a.problems), indent=2, sort_keys=True)
    if a.out is not None:
        a.out.write_text(text + "\n")
    else:
        print(text)
    return 0


def _cmd_ops(a) -> int:
    params = OperatorParams()
    if a.params is not None:
        try:
            params = OperatorParams.from_dict(json.loads(a.params.read_text()))
        except FileNotFoundError:
            raise ConfigError(f"params file {a.params} not found") from None
        except (json.JSONDecodeError, TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"bad params file {a.params}: {exc}") from None
    need = arity(a.op)
    if (need == 2) != (a.parent2 is not None):
        raise ConfigError(f"{a.op} takes {need} parent(s)")
    parents = [load_adapter(a.parent)] + ([load_adapter(a.parent2)] if need == 2 else [])
    child = apply_operator(a.op, parents, params, a.seed)
    save_adapter(child, a.out)
    print(f"{a.op} -> {a.out}")
    return 0


def _cmd_report(a) -> int:
    summary = report(a.run, a.baseline)
    print((a.run / "report" / "summary.txt").read_text(), end="")
    return 0 if summary is not None else 2


COMMANDS = {"train": _cmd_train, "baseline": _cmd_baseline, "retention": _cmd_retention,
            "eval": _cmd_eval, "ops": _cmd_ops, "report": _cmd_report}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get(LOG_ENV, "WARNING").upper(), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        a = _build_parser().parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    try:
        return COMMANDS[a.command](a)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (CheckpointError, AdapterFormatError, OSError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
