"""Class hierarchy with asymmetric diagnostic priority.

Levels are indexed from 0 (coarsest, directly below the root) to
``depth - 1`` (finest).  Within a level, priority is a partial order:
``more_urgent`` holds ``(hi, lo)`` pairs meaning class ``hi`` is more urgent
than class ``lo``; ``equivalent`` holds unordered pairs of equally urgent
classes.  Pairs that appear in neither set are incomparable.

The penalised mistake direction is fixed: a prediction is *severe* when the
predicted class is strictly less urgent than the true class
(under-diagnosis).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from itertools import product
from typing import Sequence

import numpy as np


class Priority(enum.IntEnum):
    LESS_URGENT = -1
    EQUIVALENT = 0
    MORE_URGENT = 1
    INCOMPARABLE = 2


class PriorityConvention(enum.Enum):
    """Direction of the extra severity penalty.  Only one reading is supported."""

    UNDER_DIAGNOSIS_PENALIZED = "under-diagnosis"


CONVENTION = PriorityConvention.UNDER_DIAGNOSIS_PENALIZED


class HierarchyError(ValueError):
    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class Level:
    names: tuple[str, ...]
    parents: tuple[int | None, ...] | None = None
    more_urgent: frozenset[tuple[int, int]] = frozenset()
    equivalent: frozenset[frozenset[int]] = frozenset()

    @property
    def size(self) -> int:
        return len(self.names)


def tiers_to_pairs(tiers: Sequence[Sequence[int]]) -> tuple[set, set]:
    """Expand urgency tiers (least urgent first) into relation pairs.

    ``[[0], [1, 2], [3]]`` means ``0 < 1 == 2 < 3``.
    """
    more, equiv = set(), set()
    for t, tier in enumerate(tiers):
        for a, b in product(tier, tier):
            if a < b:
                equiv.add(frozenset((a, b)))
        for lower in tiers[:t]:
            for hi, lo in product(tier, lower):
                more.add((hi, lo))
    return more, equiv


@dataclass(frozen=True)
class Hierarchy:
    levels: tuple[Level, ...]
    _relations: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        rels = []
        for lvl in self.levels:
            n = lvl.size
            r = np.full((n, n), int(Priority.INCOMPARABLE), dtype=np.int8)
            np.fill_diagonal(r, int(Priority.EQUIVALENT))
            for pair in lvl.equivalent:
                ij = sorted(pair)
                if len(ij) == 2 and all(0 <= x < n for x in ij):
                    r[ij[0], ij[1]] = r[ij[1], ij[0]] = int(Priority.EQUIVALENT)
            for hi, lo in lvl.more_urgent:
                if 0 <= hi < n and 0 <= lo < n and hi != lo:
                    r[hi, lo] = int(Priority.MORE_URGENT)
                    r[lo, hi] = int(Priority.LESS_URGENT)
            r.setflags(write=False)
            rels.append(r)
        object.__setattr__(self, "_relations", tuple(rels))

    @classmethod
    def build(cls, levels: Sequence[dict]) -> "Hierarchy":
        """Construct from plain dicts with keys ``names``, ``parents`` and
        either ``tiers`` or ``more_urgent``/``equivalent``."""
        out = []
        for spec in levels:
            more = {tuple(p) for p in spec.get("more_urgent") or ()}
            equiv = {frozenset(p) for p in spec.get("equivalent") or ()}
            if spec.get("tiers") is not None:
                m, e = tiers_to_pairs(spec["tiers"])
                more |= m
                equiv |= e
            parents = spec.get("parents")
            out.append(Level(
                names=tuple(spec["names"]),
                parents=None if parents is None else tuple(parents),
                more_urgent=frozenset(more),
                equivalent=frozenset(equiv),
            ))
        return cls(tuple(out))

    @classmethod
    def chain(cls, *sizes_and_parents) -> "Hierarchy":
        """Hierarchy where every level is a total order by class index.

        Arguments alternate as ``n0, parents1, parents2, ...``; the size of
        each finer level is the length of its parent list.
        """
        n0, *parent_lists = sizes_and_parents
        specs = [{"names": [f"c0_{i}" for i in range(n0)], "tiers": [[i] for i in range(n0)]}]
        for h, parents in enumerate(parent_lists, start=1):
            n = len(parents)
            specs.append({"names": [f"c{h}_{i}" for i in range(n)], "parents": list(parents),
                          "tiers": [[i] for i in range(n)]})
        return cls.build(specs)

    @property
    def depth(self) -> int:
        return len(self.levels)

    @property
    def finest(self) -> int:
        return len(self.levels) - 1

    def n_classes(self, level: int) -> int:
        return self.levels[level].size

    def _check(self, level: int, *idx: int) -> None:
        n = self.levels[level].size
        for i in idx:
            if not 0 <= i < n:
                raise IndexError(f"class index {i} out of range for level {level} ({n} classes)")

    def relation(self, level: int, i: int, j: int) -> Priority:
        """Relation of class ``i`` to class ``j`` at ``level``."""
        self._check(level, i, j)
        return Priority(int(self._relations[level][i, j]))

    def relation_matrix(self, level: int) -> np.ndarray:
        return self._relations[level]

    def is_severe(self, level: int, predicted: int, true_class: int) -> bool:
        """True iff the true class is strictly more urgent than the prediction."""
        return self.relation(level, true_class, predicted) is Priority.MORE_URGENT

    def severe_mask(self, level: int) -> np.ndarray:
        """Boolean matrix indexed ``[predicted, true]``."""
        return self._relations[level].T == int(Priority.MORE_URGENT)

    def parent_array(self, level: int) -> np.ndarray:
        if level < 1:
            raise ValueError("level 0 has no parent level inside the hierarchy")
        return np.asarray(self.levels[level].parents, dtype=np.intp)

    def aggregation_matrix(self, level: int) -> np.ndarray:
        """0/1 matrix ``A`` with ``A[parent, child] = 1`` mapping ``level`` to ``level - 1``."""
        parents = self.parent_array(level)
        A = np.zeros((self.levels[level - 1].size, parents.size))
        A[parents, np.arange(parents.size)] = 1.0
        return A

    def aggregate_to_parent(self, level: int, fine_probs, tol: float = 1e-6) -> np.ndarray:
        """Sum fine-level probabilities into their parents at ``level - 1``."""
        p = np.asarray(fine_probs, dtype=float)
        if p.shape[-1] != self.levels[level].size:
            raise ValueError(f"expected {self.levels[level].size} probabilities, got {p.shape[-1]}")
        if np.any(np.abs(p.sum(axis=-1) - 1.0) > tol):
            raise ValueError("fine_probs is not normalised")
        parents = self.parent_array(level)
        out = np.zeros(p.shape[:-1] + (self.levels[level - 1].size,))
        for j, par in enumerate(parents):
            out[..., par] += p[..., j]
        return out

    def ancestor(self, level: int, cls: int, target_level: int) -> int:
        """Ancestor of ``cls`` (at ``level``) at the coarser ``target_level``."""
        while level > target_level:
            cls = self.levels[level].parents[cls]
            level -= 1
        return cls

    def labels_for(self, finest_class: int) -> tuple[int, ...]:
        """Per-level labels (coarsest first) implied by a finest-level class."""
        return tuple(self.ancestor(self.finest, finest_class, h) for h in range(self.depth))

    def most_urgent(self, classes, level: int | None = None) -> int:
        """The class among ``classes`` that is at least as urgent as all others.

        Raises ``ValueError`` when no such class exists (incomparable or
        equivalent-but-distinct maxima).
        """
        level = self.finest if level is None else level
        present = sorted(set(int(c) for c in classes))
        if not present:
            raise ValueError("no classes given")
        for c in present:
            if all(o == c or self.relation(level, c, o) is Priority.MORE_URGENT for o in present):
                return c
        raise ValueError(f"no unique most urgent class among {present}")

    def validate(self) -> list[str]:
        """List every violated structural invariant; empty when well formed."""
        problems: list[str] = []
        for h, lvl in enumerate(self.levels):
            n = lvl.size
            if n < 1:
                problems.append(f"level {h}: no classes")
            if len(set(lvl.names)) != n:
                problems.append(f"level {h}: duplicate class names")
            problems.extend(_relation_problems(h, lvl))
            if h == 0:
                if lvl.parents is not None:
                    problems.append("level 0: parent_map given for the coarsest level")
                continue
            parents = lvl.parents or ()
            n_up = self.levels[h - 1].size
            if len(parents) != n or any(p is None for p in parents):
                problems.append(f"level {h}: non-total parent_map")
            if any(p is not None and not 0 <= p < n_up for p in parents):
                problems.append(f"level {h}: parent_map index out of range")
            elif set(p for p in parents if p is not None) != set(range(n_up)):
                problems.append(f"level {h}: non-surjective parent_map")
        if problems:
            return problems
        for h in range(1, self.depth):
            problems.extend(self._inheritance_problems(h))
        return problems

    def _inheritance_problems(self, h: int) -> list[str]:
        out = []
        parents = self.levels[h].parents
        up = self._relations[h - 1]
        rel = self._relations[h]
        n = self.levels[h].size
        for a, b in product(range(n), range(n)):
            if up[parents[a], parents[b]] == Priority.MORE_URGENT and rel[a, b] != Priority.MORE_URGENT:
                out.append(f"level {h}: priority inheritance violated for classes {a} and {b}")
        return out

    def check(self) -> "Hierarchy":
        problems = self.validate()
        if problems:
            raise HierarchyError(problems)
        return self

    def to_dict(self) -> list[dict]:
        out = []
        for lvl in self.levels:
            d = {"names": list(lvl.names)}
            if lvl.parents is not None:
                d["parents"] = list(lvl.parents)
            d["more_urgent"] = sorted([list(p) for p in lvl.more_urgent])
            d["equivalent"] = sorted([sorted(p) for p in lvl.equivalent])
            out.append(d)
        return out


def _relation_problems(h: int, lvl: Level) -> list[str]:
    n = lvl.size
    out = []
    more = set(lvl.more_urgent)
    equiv = {tuple(sorted(p)) for p in lvl.equivalent}
    for hi, lo in sorted(more):
        if not (0 <= hi < n and 0 <= lo < n):
            out.append(f"level {h}: priority pair ({hi}, {lo}) out of range")
        elif hi == lo:
            out.append(f"level {h}: MoreUrgent not irreflexive at class {hi}")
        elif (lo, hi) in more and hi < lo:
            out.append(f"level {h}: MoreUrgent not antisymmetric for classes {hi} and {lo}")
        if tuple(sorted((hi, lo))) in equiv:
            out.append(f"level {h}: classes {hi} and {lo} both ordered and Equivalent")
    for pair in sorted(equiv):
        if len(pair) != 2 or not all(0 <= x < n for x in pair):
            out.append(f"level {h}: equivalence pair {pair} invalid")
    if out:
        return out
    for a, b, c in product(range(n), repeat=3):
        if (a, b) in more and (b, c) in more and (a, c) not in more:
            out.append(f"level {h}: MoreUrgent not transitive ({a} > {b} > {c})")
        if len({a, b, c}) == 3 and (min(a, b), max(a, b)) in equiv and (min(b, c), max(b, c)) in equiv \
                and (min(a, c), max(a, c)) not in equiv:
            out.append(f"level {h}: Equivalent not transitive ({a} == {b} == {c})")
    return out
