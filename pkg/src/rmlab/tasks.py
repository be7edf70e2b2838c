"""Numeric reward machines for the Delivery and Office tasks."""
from __future__ import annotations

from .translate import compile_rm, parse_rm

DELIVERY_RM = """\
# collect every box and bring each one to the station
features: s
numerics: b 0..{n}
states: u0 u1
initial: u0
terminal: u2
transitions:
  u0 -> u0 [live(b)] 0
  u0 -> u1 [dec(b) | done(b)] 0
  u1 -> u1 [!s] 0
  u1 -> u2 [s & done(b)] 1
  u1 -> u0 [s & live(b)] 0
"""

OFFICE_RM = """\
# fetch coffee, deliver it to an office, repeat until every office is served
features: coffee
numerics: o 0..{n}
states: u0 u1
initial: u0
terminal: u2
transitions:
  u0 -> u0 [!coffee] 0
  u0 -> u1 [coffee] 0
  u1 -> u1 [live(o)] 0
  u1 -> u0 [dec(o)] 0
  u1 -> u2 [done(o)] 1
"""


def delivery_numeric_rm(n_boxes: int):
    return parse_rm(DELIVERY_RM.format(n=n_boxes))


def delivery_bindings(n_boxes: int) -> dict:
    return {"b": [f"b{i}" for i in range(1, n_boxes + 1)]}


def office_numeric_rm(n_offices: int):
    return parse_rm(OFFICE_RM.format(n=n_offices))


def office_bindings(n_offices: int) -> dict:
    return {"o": [f"o{i}" for i in range(1, n_offices + 1)]}


def task_rm(domain: str, n: int, variant: str):
    """Compiled task machine for ``domain`` with ``n`` subtasks."""
    if domain == "delivery":
        return compile_rm(delivery_numeric_rm(n), delivery_bindings(n), variant)
    if domain == "office":
        return compile_rm(office_numeric_rm(n), office_bindings(n), variant)
    raise ValueError(f"unknown domain {domain!r}")
