"""Synthetic updates per step as the number of boxes grows.

CoRM touches one table row per subtask; CRM touches one per reachable
Boolean machine state, which grows factorially with the box count.
"""
import sys

from rmlab.harness import scaling_report

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 5000
report = scaling_report("delivery", [2, 3, 4, 5], ["corm", "crm:agenda", "crm:boolean", "qrm"], steps=steps)
print(report.table())
