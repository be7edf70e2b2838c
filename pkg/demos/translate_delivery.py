"""Compile the numeric Delivery machine into its Boolean, agenda and coupled forms.

Prints state counts for one to five boxes and walks the two-box coupled
machine, then writes a Graphviz file for it next to this script.
"""
from pathlib import Path

from rmlab.core import TruthAssignment, rm_step
from rmlab.tasks import delivery_bindings, delivery_numeric_rm
from rmlab.translate import compile_rm, export_dot, format_rm

print("boxes  boolean  agenda  coupled")
for n in range(1, 6):
    num, bind = delivery_numeric_rm(n), delivery_bindings(n)
    counts = [len(compile_rm(num, bind, v).all_states) for v in ("boolean", "agenda", "coupled")]
    print(f"{n:>5}  {counts[0]:>7}  {counts[1]:>6}  {counts[2]:>7}")

coupled = compile_rm(delivery_numeric_rm(2), delivery_bindings(2), "coupled")
print("\nTwo-box coupled machine:\n")
print(format_rm(coupled))

group = coupled.initial_group
for event in ("b2", "s", "b1", "s"):
    t = TruthAssignment({f: f == event for f in ("s", "b1", "b2")})
    nxt, reward, fired = rm_step(coupled, group, t)
    print(f"{' + '.join(group):<24} --{event}--> {' + '.join(nxt):<10} reward {reward}  (fired from {fired.source})")
    group = nxt

out = Path(__file__).with_name("delivery2_coupled.dot")
out.write_text(export_dot(coupled))
print(f"\nwrote {out}")
