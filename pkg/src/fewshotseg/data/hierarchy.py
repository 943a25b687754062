"""Three-level class hierarchy. A class may sit under several parents, so
this is a DAG rather than a tree.

On disk (``hierarchy.json``)::

    {"apple": {"level": "bottom", "parents": ["fruit", "food"]},
     "fruit": {"level": "middle", "parents": ["food"]},
     "food":  {"level": "top",    "parents": []}}
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

LEVELS = ("top", "middle", "bottom")
EXPECTED_TOP = 12


@dataclass
class Hierarchy:
    levels: dict = field(default_factory=dict)   # name -> level tag
    parents: dict = field(default_factory=dict)  # name -> list of parent names

    def __contains__(self, name):
        return name in self.levels

    def add(self, name, level, parents=()):
        self.levels[name] = level
        self.parents[name] = list(parents)
        return self

    def nodes(self, level=None):
        return sorted(n for n, lv in self.levels.items() if level is None or lv == level)

    @property
    def top(self):
        return self.nodes("top")

    @property
    def bottom(self):
        return self.nodes("bottom")

    def find_cycle(self):
        """Return one cycle as a list of nodes, or None."""
        state = {}
        stack = []

        def visit(node):
            state[node] = 1
            stack.append(node)
            for p in self.parents.get(node, ()):
                if state.get(p) == 1:
                    return stack[stack.index(p):] + [p]
                if p not in state:
                    cyc = visit(p)
                    if cyc:
                        return cyc
            stack.pop()
            state[node] = 2
            return None

        for node in sorted(self.levels):
            if node not in state:
                cyc = visit(node)
                if cyc:
                    return cyc
        return None

    def superclasses(self, name):
        """Sorted top-level ancestors of ``name`` (safe on cyclic graphs)."""
        if name not in self.levels:
            raise KeyError(f"unknown hierarchy node {name!r}")
        seen, tops, todo = set(), set(), [name]
        while todo:
            node = todo.pop()
            if node in seen:
                continue
            seen.add(node)
            if self.levels.get(node) == "top":
                tops.add(node)
            todo.extend(self.parents.get(node, ()))
        return sorted(tops)

    def primary_superclass(self, name):
        """Superclass used for split quotas: the lexicographically first top ancestor."""
        tops = self.superclasses(name)
        if not tops:
            raise ValueError(f"class {name!r} does not reach a top-level node")
        return tops[0]

    def to_json(self):
        return {n: {"level": self.levels[n], "parents": list(self.parents.get(n, []))}
                for n in sorted(self.levels)}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def from_json(cls, doc):
        h = cls()
        for name, entry in doc.items():
            h.add(name, entry.get("level"), entry.get("parents", []))
        return h

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))
