"""Exact law of the reinforced chain's count vector by forward dynamic programming.

The count process is Markov: at level ``k`` the chain has occupancy counts
``c`` (summing to ``k``), and the next state is drawn from ``(c / k) A``.
Propagating the full distribution level by level yields the exact law after
``n`` steps, which in turn gives exact event probabilities and finite-``n``
rate estimates ``-(1/n) log P``.

Levels are processed in sorted atom order with a fixed reduction order, so
results are bitwise reproducible.  Atom counts grow like ``n^(d-1)``; a
configurable memory cap (default 2 GiB) aborts cleanly before a level that
would not fit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._format import write_csv
from .errors import DimensionMismatch, PreconditionViolation, ResourceLimitExceeded
from .measures import Kernel, ProbVec

DEFAULT_MEM_CAP_BYTES = 2 << 30
DROP_THRESHOLD = 1e-300
MASS_CHECK_ATOL = 1e-12

# rough per-atom footprint of the dict representation: tuple of d ints,
# a float, and hash-table overhead
_ATOM_BYTES_BASE = 120
_ATOM_BYTES_PER_DIM = 32


@dataclass(frozen=True, eq=False)
class CountLaw:
    """Distribution of the count vector after ``n`` steps.

    ``atoms`` maps count tuples (summing to ``n``) to probabilities;
    ``dropped_mass`` is the total probability removed by the underflow
    threshold while building the law.
    """

    n: int
    d: int
    x0: int
    atoms: dict[tuple[int, ...], float]
    dropped_mass: float

    def total_mass(self) -> float:
        return math.fsum(self.atoms.values())


def _level_cap_check(level: int, d: int, x0_fixed: bool, mem_cap_bytes: int) -> None:
    # compositions of the non-pinned population into d parts
    population = level - 1 if x0_fixed else level
    max_atoms = math.comb(population + d - 1, d - 1)
    est = max_atoms * (_ATOM_BYTES_BASE + _ATOM_BYTES_PER_DIM * d)
    if est > mem_cap_bytes:
        raise ResourceLimitExceeded(
            f"exact_law: level {level} may need ~{est / 2**20:.0f} MiB "
            f"({max_atoms} atoms), above the cap of {mem_cap_bytes / 2**20:.0f} MiB"
        )


def exact_law(
    A: Kernel, x0: int, n: int, mem_cap_bytes: int = DEFAULT_MEM_CAP_BYTES
) -> CountLaw:
    """Exact law of the counts after ``n`` steps, starting from state ``x0``."""
    laws = exact_law_levels(A, x0, [n], mem_cap_bytes)
    return laws[n]


def exact_law_levels(
    A: Kernel, x0: int, n_list, mem_cap_bytes: int = DEFAULT_MEM_CAP_BYTES
) -> dict[int, CountLaw]:
    """Laws at several levels from one DP sweep (keyed by requested n)."""
    wanted = sorted(set(int(n) for n in n_list))
    if not wanted or wanted[0] < 1:
        raise PreconditionViolation("exact_law: every n must be >= 1")
    d = A.d
    if not 1 <= int(x0) <= d:
        raise DimensionMismatch(f"x0={x0} outside 1..{d}")
    x0 = int(x0)
    n_max = wanted[-1]
    Amat = A.matrix

    start = [0] * d
    start[x0 - 1] = 1
    atoms: dict[tuple[int, ...], float] = {tuple(start): 1.0}
    dropped = 0.0
    out: dict[int, CountLaw] = {}

    def snapshot(level: int) -> CountLaw:
        return CountLaw(n=level, d=d, x0=x0, atoms=dict(atoms), dropped_mass=dropped)

    if 1 in wanted:
        out[1] = snapshot(1)
    basis = np.eye(d, dtype=np.int64)
    for k in range(1, n_max):
        _level_cap_check(k + 1, d, True, mem_cap_bytes)
        items = sorted(atoms.items())
        counts = np.array([key for key, _ in items], dtype=np.int64)
        probs = np.array([p for _, p in items])
        trans = (counts / float(k)) @ Amat
        nxt: dict[tuple[int, ...], float] = {}
        for i in range(len(items)):
            child_mass = probs[i] * trans[i]
            base = counts[i]
            for y in range(d):
                key = tuple(base + basis[y])
                m = child_mass[y]
                if key in nxt:
                    nxt[key] += m
                else:
                    nxt[key] = m
        small = [key for key, p in nxt.items() if p < DROP_THRESHOLD]
        for key in small:
            dropped += nxt.pop(key)
        atoms = nxt
        mass = math.fsum(atoms.values())
        if abs(mass + dropped - 1.0) > MASS_CHECK_ATOL:
            raise AssertionError(
                f"exact_law: mass {mass!r} + dropped {dropped!r} drifted from 1 at level {k + 1}"
            )
        if k + 1 in wanted:
            out[k + 1] = snapshot(k + 1)
    return out


def event_probability(law: CountLaw, target, radius: float) -> float:
    """Probability of the closed l1 ball: ``sum P(c)`` over counts with
    ``||c/n - target||_1 <= radius``."""
    t = target.weights if isinstance(target, ProbVec) else np.asarray(target, dtype=float)
    if t.shape != (law.d,):
        raise DimensionMismatch(f"event_probability: target shape {t.shape}, law dimension {law.d}")
    if radius < 0:
        raise PreconditionViolation("event_probability: radius must be >= 0")
    items = sorted(law.atoms.items())
    counts = np.array([key for key, _ in items], dtype=np.int64)
    probs = [p for _, p in items]
    dist = np.abs(counts / float(law.n) - t[None, :]).sum(axis=1)
    hit = dist <= radius
    return math.fsum(p for p, h in zip(probs, hit) if h)


@dataclass(frozen=True)
class FiniteNRate:
    n: int
    probability: float
    rate: float
    infinite: bool


def finite_n_rate(A: Kernel, x0: int, target, radius: float, n_list) -> list[FiniteNRate]:
    """Finite-``n`` decay rates ``-(1/n) log P(||L^n - target||_1 <= radius)``.

    Zero-probability events yield an infinite rate with the ``infinite``
    flag set instead of an error.
    """
    laws = exact_law_levels(A, x0, n_list)
    out = []
    for n in sorted(set(int(v) for v in n_list)):
        p = event_probability(laws[n], target, radius)
        if p > 0.0:
            out.append(FiniteNRate(n=n, probability=p, rate=-math.log(p) / n, infinite=False))
        else:
            out.append(FiniteNRate(n=n, probability=0.0, rate=math.inf, infinite=True))
    return out


def export_law_csv(law: CountLaw, file, provenance: str | None = None) -> None:
    header = [f"c_{x}" for x in range(1, law.d + 1)] + ["probability"]
    rows = ([*key, float(p)] for key, p in sorted(law.atoms.items()))
    write_csv(file, header, rows, provenance)


def export_rate_trend_csv(records: list[FiniteNRate], file, provenance: str | None = None) -> None:
    header = ["n", "probability", "rate", "infinite"]
    rows = ([r.n, r.probability, r.rate, r.infinite] for r in records)
    write_csv(file, header, rows, provenance)
