# coding: utf-8

# # How much skill survives an operator?
#
# Two students are trained from one starting point, one on each task type.
# At a few snapshots every operator is applied to them and the child is
# retrained.  The question is how many steps the child needs to get back
# to 90% of its parents' reward.  Rewards are exact expected solve rates on
# a held-out problem set, so the curves carry no sampling noise.

from selfplay_lora import engine as EN

cfg = EN.EngineConfig(retention_snapshots=(5, 10), retention_retrain_steps=20, prompts_per_type=2)
res = EN.retention_benchmark(cfg.resolved(0), bank_size=64, eval_size=32)

for task, curve in res["parent_curves"].items():
    print("parent trained on %-13s reward %.3f -> %.3f" % (task, curve[0], curve[-1]))

print()
print("%-18s %4s %8s %8s %8s" % ("operator", "snap", "parent", "child@0", "steps"))
for row in res["rows"]:
    hit = row["steps_to_90pct"]
    print("%-18s %4d %8.3f %8.3f %8s" % (row["operator"], row["snapshot"], row["parent_reward"],
                                         row["child_curve"][0], "-" if hit is None else hit))


# copy_parent starts exactly at its parent's reward; most mutations start
# within reach of it.  The crossovers are judged on the mixture of both
# tasks, which neither parent was trained for.
