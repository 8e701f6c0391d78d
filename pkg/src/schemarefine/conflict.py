"""Global naming-collision resolution over per-column decisions.

Also holds an exhaustive feasibility checker for constrained renaming
instances (list colouring in disguise), used as a test oracle.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

from .schema import ColumnRef, RefinementMapping, SchemaModel, collision_groups
from .verifier import COMMITTED, RefinementDecision

KEPT = "kept"
DEMOTED = "demoted-to-runner-up"
REVERTED = "reverted-to-original"
PROPAGATED = "propagated-from-pk"
UNCHANGED = "unchanged"
MAX_ITERATIONS = 2
BRUTE_FORCE_LIMIT = 10**6


@dataclass
class ConflictPlan:
    final: dict[ColumnRef, str]
    provenance: dict[ColumnRef, str]
    deltas: dict[ColumnRef, float | None] = field(default_factory=dict)
    iterations: int = 0
    propagation: dict[ColumnRef, list[ColumnRef]] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    @property
    def mapping(self) -> RefinementMapping:
        return RefinementMapping({c: n for c, n in self.final.items() if n != c.name})

    def committed_columns(self) -> list[ColumnRef]:
        """Columns renamed by verification (not by PK propagation)."""
        return [c for c, n in self.final.items() if n != c.name and self.provenance.get(c) != PROPAGATED]

    def to_json(self) -> list[dict]:
        rows = []
        for c in sorted(self.final, key=lambda x: (x.table.lower(), x.name.lower())):
            rows.append({
                "table": c.table, "column": c.name, "final_name": self.final[c],
                "provenance": self.provenance.get(c), "delta": self.deltas.get(c),
                "propagated_to": [f.qualified for f in self.propagation.get(c, [])],
            })
        return rows


def _priority(d: RefinementDecision) -> tuple:
    # higher delta wins; ties by (table, column) ascending
    return (-(d.delta or 0.0), d.column.table.lower(), d.column.name.lower())


def resolve(decisions: Sequence[RefinementDecision], schema: SchemaModel) -> ConflictPlan:
    """Make committed renames admissible.

    Each pass finds within-scope collisions; the higher-delta column keeps
    its name and the others drop to their next runner-up that collides with
    nothing currently assigned. After two passes any remaining collision is
    settled by reverting to original names.
    """
    committed = sorted((d for d in decisions if d.status == COMMITTED), key=_priority)
    names = [c.name for c in schema.columns]
    options: dict[int, list[str]] = {}
    cursor: dict[int, int] = {}
    prov: dict[ColumnRef, str] = {d.column: KEPT if d.status == COMMITTED else UNCHANGED for d in decisions}
    for d in committed:
        i = schema.index_of(d.column)
        options[i] = [d.selected, *d.runner_ups]
        cursor[i] = 0
        names[i] = d.selected
    prio = {schema.index_of(d.column): n for n, d in enumerate(committed)}

    def renamed(i: int) -> bool:
        return i in options and names[i] != schema.columns[i].name

    def collides(i: int, name: str) -> bool:
        trial = list(names)
        trial[i] = name
        return any(i in g for _, g in collision_groups(schema, trial))

    iterations = 0
    notes: list[str] = []
    while iterations < MAX_ITERATIONS:
        groups = collision_groups(schema, names)
        if not groups:
            break
        iterations += 1
        losers: set[int] = set()
        for name, group in sorted(groups, key=lambda g: sorted(g[1])):
            movable = sorted((i for i in group if renamed(i)), key=lambda i: prio[i])
            fixed = [i for i in group if not renamed(i)]
            # an unrenamed column cannot move, so it always "wins" its name
            winners = 0 if fixed else 1
            losers.update(movable[winners:])
        for i in sorted(losers, key=lambda i: prio[i]):
            col = schema.columns[i]
            while True:
                cursor[i] += 1
                if cursor[i] >= len(options[i]):
                    names[i] = col.name
                    prov[col] = REVERTED
                    notes.append(f"{col.qualified}: no viable runner-up, reverted")
                    break
                cand = options[i][cursor[i]]
                if not collides(i, cand):
                    names[i] = cand
                    prov[col] = DEMOTED
                    notes.append(f"{col.qualified}: demoted to runner-up {cand!r}")
                    break

    # revert pass: settle whatever is left by restoring original names
    while True:
        groups = collision_groups(schema, names)
        if not groups:
            break
        movable = sorted({i for _, g in groups for i in g if renamed(i)}, key=lambda i: -prio[i])
        if not movable:
            raise AssertionError("collision among original names; base schema is inadmissible")
        i = movable[0]
        names[i] = schema.columns[i].name
        prov[schema.columns[i]] = REVERTED
        notes.append(f"{schema.columns[i].qualified}: unresolved collision, reverted")

    final = {}
    deltas = {}
    for d in decisions:
        i = schema.index_of(d.column)
        final[d.column] = names[i]
        deltas[d.column] = d.delta
        if d.status == COMMITTED and names[i] == d.column.name:
            prov[d.column] = REVERTED
    return ConflictPlan(final, prov, deltas, iterations, {}, notes)


# -- feasibility oracle -------------------------------------------------------


@dataclass
class CrdInstance:
    """Columns, conflict edges, candidate lists and columns that must change name."""

    columns: list[str]
    edges: list[tuple[int, int]]
    lists: list[list[str]]
    originals: list[str]
    forced: set[int] = field(default_factory=set)

    def __post_init__(self):
        if any(len(lst) < 1 for lst in self.lists):
            raise ValueError("every column needs at least one candidate")

    def satisfied_by(self, assignment: Sequence[str]) -> bool:
        if any(a not in lst for a, lst in zip(assignment, self.lists)):
            return False
        if any(assignment[a].lower() == assignment[b].lower() for a, b in self.edges):
            return False
        return all(assignment[i] != self.originals[i] for i in self.forced)


class InstanceTooLarge(ValueError):
    pass


def crd_feasible_bruteforce(instance: CrdInstance, limit: int = BRUTE_FORCE_LIMIT) -> tuple[bool, list[str] | None]:
    """Try every assignment; returns (feasible, witness)."""
    size = math.prod(len(lst) for lst in instance.lists)
    if size > limit:
        raise InstanceTooLarge(f"{size} assignments exceed the limit of {limit}")
    for combo in itertools.product(*instance.lists):
        if instance.satisfied_by(combo):
            return True, list(combo)
    return False, None


def induced_instance(decisions: Sequence[RefinementDecision], schema: SchemaModel) -> CrdInstance:
    """Instance asking whether every committed column can take one of its viable names.

    Committed columns must change name and choose from (selected, runner-ups);
    every other column is pinned to its original name.
    """
    committed = {d.column: d for d in decisions if d.status == COMMITTED}
    cols = list(schema.columns)
    lists = []
    forced = set()
    for i, c in enumerate(cols):
        d = committed.get(c)
        if d is None:
            lists.append([c.name])
        else:
            lists.append([d.selected, *d.runner_ups])
            forced.add(i)
    edges = []
    for i in range(len(cols)):
        for j in schema.scope_indices(i):
            if i < j and not schema.shares_key_name(i, j):
                edges.append((i, j))
    return CrdInstance([c.qualified for c in cols], edges, lists, [c.name for c in cols], forced)
