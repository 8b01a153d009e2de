"""Deterministic corpus of function triples on [0, 1) used by the experiments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import MeshFunction
from .models import random_test_function

FAMILIES = ("indicators", "haar", "bumps", "spikes", "mixed")
EXTRA_FAMILIES = ("constants",)


@dataclass
class CorpusTriple:
    name: str
    f: MeshFunction
    g: MeshFunction
    h: MeshFunction

    def functions(self):
        return self.f, self.g, self.h


def _bump(L: int, center: float, width: float) -> MeshFunction:
    x = (np.arange(1 << L) + 0.5) * 2.0 ** -L
    t = (x - center) / width
    v = np.where(np.abs(t) < 1, np.exp(-1.0 / np.maximum(1 - t * t, 1e-300)), 0.0)
    return MeshFunction(v, L)


def _spike(L: int, rng) -> MeshFunction:
    """One tall cell plus a weak background, the typical input that triggers stopping cubes."""
    M = 1 << L
    v = np.full(M, rng.uniform(0.05, 0.2))
    v[int(rng.integers(0, M))] += rng.uniform(0.5, 1.0) * M / 4
    return MeshFunction(v, L)


def _member(family: str, L: int, rng) -> MeshFunction:
    if family == "indicators":
        return random_test_function(L, rng, "indicators")
    if family == "haar":
        return random_test_function(L, rng, "haar")
    if family == "bumps":
        return _bump(L, rng.uniform(0.2, 0.8), rng.uniform(0.1, 0.2))
    if family == "spikes":
        return _spike(L, rng)
    if family == "constants":
        return MeshFunction(np.ones(1 << L), L)
    raise ValueError(f"unknown family {family!r}")


def default_corpus(L: int = 6, seed: int = 0, per_family: int = 4, families=FAMILIES) -> list[CorpusTriple]:
    """``per_family`` triples from each family (``mixed`` draws each slot from a different family).

    ``constants`` (all three functions equal to 1 on [0, 1)) is available but not in the default list.
    """
    rng = np.random.default_rng(seed)
    out = []
    for fam in families:
        if fam not in FAMILIES + EXTRA_FAMILIES:
            raise ValueError(f"unknown family {fam!r}")
        for t in range(per_family):
            if fam == "mixed":
                slots = rng.permutation(FAMILIES[:4])[:3]
                fs = [_member(s, L, rng) for s in slots]
            else:
                fs = [_member(fam, L, rng) for _ in range(3)]
            out.append(CorpusTriple(f"{fam}-{t}", *fs))
    return out
