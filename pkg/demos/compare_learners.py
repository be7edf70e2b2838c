"""Steps until each learner's greedy policy first matches the shortest solution.

Runs CoRM, CRM (agenda and Boolean machines) and QRM on the shipped two-box
map and on a seeded 6x6 map with three boxes, then shows the eta table CoRM
learns on the two-box map.
"""
import statistics
import sys

from rmlab.harness import ExperimentConfig, build_task, config_with, train

SEEDS = range(int(sys.argv[1]) if len(sys.argv) > 1 else 5)
LEARNERS = (("corm", "coupled"), ("crm", "agenda"), ("crm", "boolean"), ("qrm", "boolean"))

instances = {
    "two-box map": ExperimentConfig(map="delivery_two_box"),
    "6x6, 3 boxes": ExperimentConfig(map_height=6, map_width=6, n_objects=3, map_seed=0),
}

for name, base in instances.items():
    print(f"\n{name}")
    for algo, variant in LEARNERS:
        cfg = config_with(base, algo=algo, variant=variant, alpha=0.5, step_limit=200_000, eval_every=100)
        task = build_task(cfg)
        firsts = [train(cfg, s, task, stop_at_optimal=True).first_optimal_step for s in SEEDS]
        done = [f for f in firsts if f is not None]
        med = statistics.median(done) if done else float("inf")
        print(f"  {algo}:{variant:<8} K*={task.optimal_length}  median steps to optimal {med:>8}"
              f"  ({len(done)}/{len(firsts)} seeds)")

cfg = ExperimentConfig(map="delivery_two_box", algo="corm", alpha=0.5, step_limit=50_000)
res = train(cfg, 0)
rm = build_task(cfg).rm
print("\nCoRM eta after 50k steps on the two-box map:")
for u in rm.all_states:
    print(f"  {u:<14} {res.learner.eta[u]}")
