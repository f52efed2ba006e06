"""Episode sampling and the task-class / task-example counting identities.

Randomness goes through :class:`Rng`, a thin wrapper over numpy's PCG64
generator. Sampling without replacement is a partial Fisher-Yates
shuffle, so every n-subset is equally likely and draws come out in draw
order.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .data import Dataset
from .errors import (
    EnumerationTooLarge,
    InsufficientExamples,
    InvalidArgument,
    SampleTooLarge,
    WayExceedsClasses,
)

ENUMERATION_CAP = 10**7

# per-purpose stream offsets added to the run seed
STREAM_SAMPLING = 0
STREAM_INIT = 1
STREAM_VALIDATION = 2
STREAM_EVAL = 3
STREAM_SPECTRUM = 4


class Rng:
    algorithm = "PCG64"

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    @classmethod
    def stream(cls, seed: int, offset: int) -> "Rng":
        return cls(int(seed) + int(offset))

    def integers(self, low: int, high: int) -> int:
        """Uniform integer in [low, high)."""
        return int(self.gen.integers(low, high))

    def get_state(self) -> dict:
        return self.gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.gen.bit_generator.state = state


@dataclass(frozen=True)
class Episode:
    way: int
    shot: int
    query: int
    classes: tuple[int, ...]
    support: tuple[tuple[int, ...], ...]
    query_set: tuple[tuple[int, ...], ...]

    def validate(self, d: Dataset | None = None) -> None:
        if len(self.classes) != self.way or len(set(self.classes)) != self.way:
            raise InvalidArgument("episode classes must be `way` distinct ids")
        for k, c in enumerate(self.classes):
            s, q = self.support[k], self.query_set[k]
            if len(s) != self.shot or len(q) != self.query:
                raise InvalidArgument("support/query sizes disagree with shot/query")
            if len(set(s)) != len(s) or len(set(q)) != len(q) or set(s) & set(q):
                raise InvalidArgument(f"support and query overlap for class {c}")
            if d is not None:
                n = len(d.classes[c])
                if any(i < 0 or i >= n for i in s + q):
                    raise InvalidArgument(f"example index out of range for class {c}")


@dataclass(frozen=True)
class Minibatch:
    episodes: tuple[Episode, ...]

    def __post_init__(self):
        if not self.episodes:
            raise InvalidArgument("a minibatch holds at least one episode")
        shape = {(e.way, e.shot, e.query) for e in self.episodes}
        if len(shape) != 1:
            raise InvalidArgument("episodes in a minibatch must share (way, shot, query)")

    def __len__(self):
        return len(self.episodes)


def random_sample(population_size: int, n: int, rng: Rng) -> list[int]:
    """n distinct indices from range(population_size), uniformly, in draw order."""
    if n < 0 or n > population_size:
        raise SampleTooLarge(f"cannot draw {n} of {population_size} without replacement")
    pool = list(range(population_size))
    for i in range(n):
        j = rng.integers(i, population_size)
        pool[i], pool[j] = pool[j], pool[i]
    return pool[:n]


def sample_episode(d: Dataset, K: int, S: int, Q: int, rng: Rng) -> Episode:
    L = len(d)
    if K > L:
        raise WayExceedsClasses(f"way {K} exceeds the {L} available classes")
    if K < 1 or S < 1 or Q < 0:
        raise InvalidArgument("need way >= 1, shot >= 1, query >= 0")
    V = random_sample(L, K, rng)
    support, queries = [], []
    for c in V:
        n = len(d.classes[c])
        if n < S + Q:
            raise InsufficientExamples(
                f"class {d.classes[c].label!r} has {n} examples, needs shot+query = {S + Q}"
            )
        s = random_sample(n, S, rng)
        taken = set(s)
        rest = [i for i in range(n) if i not in taken]
        q = [rest[i] for i in random_sample(len(rest), Q, rng)]
        support.append(tuple(s))
        queries.append(tuple(q))
    return Episode(K, S, Q, tuple(V), tuple(support), tuple(queries))


def sample_minibatch(d: Dataset, E: int, K: int, S: int, Q: int, rng: Rng) -> Minibatch:
    """E independent episodes; class subsets may repeat across episodes."""
    if E < 1:
        raise InvalidArgument("episodes per minibatch must be >= 1")
    return Minibatch(tuple(sample_episode(d, K, S, Q, rng) for _ in range(E)))


def count_task_classes(L: int, K: int) -> int:
    if not (0 <= K <= L):
        raise InvalidArgument(f"need 0 <= K <= L, got L={L}, K={K}")
    return math.comb(L, K)


def count_task_examples_per_class(H: int, S: int, K: int) -> int:
    """(C(H, S))^K * K * (H - S): support choices times query choices for one task class."""
    if not (1 <= S < H) or K < 1:
        raise InvalidArgument(f"need 1 <= S < H and K >= 1, got H={H}, S={S}, K={K}")
    return math.comb(H, S) ** K * K * (H - S)


def iter_task_examples(d: Dataset, V, S: int) -> Iterator[tuple[tuple[tuple[int, ...], ...], int, int]]:
    """Yield every (support choice, query class position, query index) of task class V."""
    sizes = [len(d.classes[c]) for c in V]
    per_class = [list(itertools.combinations(range(n), S)) for n in sizes]
    for supports in itertools.product(*per_class):
        for k, n in enumerate(sizes):
            chosen = set(supports[k])
            for i in range(n):
                if i not in chosen:
                    yield supports, k, i


def enumerate_task_examples(d: Dataset, V, S: int, cap: int = ENUMERATION_CAP) -> int:
    """Exhaustively count the task examples of task class V (refuses above ``cap``)."""
    sizes = [len(d.classes[c]) for c in V]
    if any(n <= S for n in sizes) or S < 1:
        raise InvalidArgument("every class in V needs more than S examples")
    expected = math.prod(math.comb(n, S) for n in sizes) * sum(n - S for n in sizes)
    if expected > cap:
        raise EnumerationTooLarge(f"{expected} task examples exceeds the enumeration cap {cap}")
    return sum(1 for _ in iter_task_examples(d, V, S))
