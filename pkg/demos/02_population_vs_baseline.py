# coding: utf-8

# # Population self-play against a single-agent baseline
#
# A teacher adapter steers a grammar that writes small programs; a student
# adapter reads a program and answers for a hidden input or output.  The
# population run keeps four of each, rates them, and every few steps
# replaces the weakest with children of the strongest.  The baseline is a
# single adapter playing both roles.
#
# Both runs are short here (60 steps) so the script finishes in a few
# seconds.  Pass a step count on the command line for longer runs.

import sys
import tempfile
from pathlib import Path

from selfplay_lora import engine as EN
from selfplay_lora.diagnostics import complexity_slopes, lead_series, read_steps, report, sign_changes

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 60
root = Path(tempfile.mkdtemp(prefix="selfplay-demo-"))

cfg = EN.EngineConfig(steps=steps).resolved(0)
EN.run(cfg, root / "population")
EN.run_baseline(cfg, root / "baseline")
print("runs written to", root)


# Each step leaves one JSON line behind.  The solve rate is the fraction
# of student answers that check out against the interpreter.

for name in ("population", "baseline"):
    recs = read_steps(root / name / "steps.jsonl")
    tail = recs[-10:]
    print()
    print(name)
    print("  solve rate, last 10 steps: %.3f" % (sum(r.solve_rate for r in tail) / len(tail)))
    print("  validity rate:             %.3f" % (sum(r.validity_rate for r in tail) / len(tail)))
    print("  complexity slopes:", {k: round(v, 4) for k, v in complexity_slopes(recs).items()})
    print("  lead sign changes:", sign_changes(lead_series(recs)))


# The report writes CSV tables for plotting and a short text summary that
# puts the two slope sets side by side.

report(root / "population", root / "baseline")
print()
print((root / "population" / "report" / "summary.txt").read_text())
