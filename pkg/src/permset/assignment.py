"""Square assignment problems and lexicographic permutation ranks."""

from __future__ import annotations

import itertools
import math
from functools import lru_cache
from typing import Mapping, Optional, Sequence, Tuple, Union

import numpy as np

MAX_BRUTE_FORCE_N = 8

Assignment = Tuple[int, ...]


def _check_square(costs) -> np.ndarray:
    c = np.asarray(costs, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] == 0:
        raise ValueError(f"cost matrix must be square and non-empty, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix contains non-finite entries")
    return c


def hungarian(costs) -> Tuple[Assignment, float]:
    """Minimum-cost perfect matching of rows to columns.

    Shortest-augmenting-path form of the Hungarian method with row/column
    potentials, O(n^3). Returns ``(mapping, total)`` where ``mapping[i]`` is
    the column assigned to row ``i``.
    """
    c = _check_square(costs)
    n = c.shape[0]
    inf = math.inf
    # 1-based internals; column 0 is the virtual source of each augmentation.
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    owner = [0] * (n + 1)
    way = [0] * (n + 1)
    rows = c.tolist()
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = owner[j0]
            row = rows[i0 - 1]
            ui0 = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[owner[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    mapping = [0] * n
    for j in range(1, n + 1):
        mapping[owner[j] - 1] = j - 1
    total = float(sum(rows[i][mapping[i]] for i in range(n)))
    return tuple(mapping), total


@lru_cache(maxsize=None)
def all_permutations(n: int) -> np.ndarray:
    """All permutations of ``range(n)`` in lexicographic order; row index == rank."""
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
    perms.setflags(write=False)
    return perms


ExtraCost = Union[Mapping[int, float], Sequence[float], np.ndarray]


def brute_force_assignment(costs, extra_perm_cost: Optional[ExtraCost] = None) -> Tuple[Assignment, float]:
    """Exhaustive minimum of matched cost plus an optional per-permutation term.

    ``extra_perm_cost`` is indexed by lexicographic permutation rank, either as a
    length-``n!`` array or a mapping (missing ranks contribute 0). Ties resolve to
    the lowest rank.
    """
    c = _check_square(costs)
    n = c.shape[0]
    if n > MAX_BRUTE_FORCE_N:
        raise ValueError(f"brute force limited to n <= {MAX_BRUTE_FORCE_N}, got {n}")
    perms = all_permutations(n)
    totals = c[np.arange(n), perms].sum(axis=1)
    if extra_perm_cost is not None:
        if isinstance(extra_perm_cost, Mapping):
            extra = np.zeros(len(perms))
            for r, val in extra_perm_cost.items():
                extra[r] = val
        else:
            extra = np.asarray(extra_perm_cost, dtype=np.float64)
            if extra.shape != (len(perms),):
                raise ValueError(f"extra_perm_cost must have {len(perms)} entries, got {extra.shape}")
        totals = totals + extra
    best = int(np.argmin(totals))
    return tuple(int(j) for j in perms[best]), float(totals[best])


def perm_rank(mapping: Sequence[int]) -> int:
    """Lexicographic rank (Lehmer code) of a permutation of ``range(n)``."""
    n = len(mapping)
    if sorted(mapping) != list(range(n)):
        raise ValueError(f"not a permutation of 0..{n - 1}: {tuple(mapping)}")
    rank = 0
    for i, a in enumerate(mapping):
        smaller_after = sum(1 for b in mapping[i + 1:] if b < a)
        rank += smaller_after * math.factorial(n - 1 - i)
    return rank


def perm_unrank(n: int, rank: int) -> Assignment:
    if not 0 <= rank < math.factorial(n):
        raise ValueError(f"rank {rank} out of range for n={n}")
    pool = list(range(n))
    out = []
    for i in range(n - 1, -1, -1):
        f = math.factorial(i)
        q, rank = divmod(rank, f)
        out.append(pool.pop(q))
    return tuple(out)
