"""Episode-averaged test accuracy with a normal-approximation 95% interval."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint
from .data import Dataset
from .embed import bind_params, embed
from .episodes import STREAM_EVAL, Rng, sample_episode
from .errors import InvalidArgument
from .numgrad import Graph
from .parallel import ordered_map
from .protonet import episode_batch, predict

Z95 = 1.96
DEFAULT_TEST_QUERY = 15


def ci95_halfwidth(values) -> float:
    """1.96 * s / sqrt(n), s the sample standard deviation (n - 1 denominator)."""
    x = np.asarray(values, dtype=np.float64)
    if x.size < 2:
        return 0.0
    return float(Z95 * x.std(ddof=1) / math.sqrt(x.size))


@dataclass
class EvalReport:
    per_episode_accuracy: list[float]
    way: int
    shot: int
    query: int
    distance: str
    seed: int
    mean: float = field(init=False)
    ci95_halfwidth: float = field(init=False)

    def __post_init__(self):
        if not self.per_episode_accuracy:
            raise InvalidArgument("report needs at least one episode")
        self.mean = float(np.mean(self.per_episode_accuracy))
        self.ci95_halfwidth = ci95_halfwidth(self.per_episode_accuracy)

    @property
    def n_episodes(self) -> int:
        return len(self.per_episode_accuracy)


def episode_accuracy(ck: Checkpoint, d: Dataset, ep) -> float:
    batch, targets = episode_batch(d, ep)
    dtype = next(iter(ck.params.values())).dtype
    g = Graph(dtype)
    emb = g.value(embed(ck.spec, bind_params(g, ck.params), g.constant(batch), g))
    n_support = ep.way * ep.shot
    protos = emb[:n_support].reshape(ep.way, ep.shot, -1).mean(axis=1)
    pred = predict(emb[n_support:], protos, ck.config.distance)
    return float((pred == targets).sum()) / (ep.way * ep.query)


def evaluate(
    ck: Checkpoint,
    test_set: Dataset,
    n_episodes: int,
    Q: int = DEFAULT_TEST_QUERY,
    seed: int = 0,
    way: int | None = None,
    shot: int | None = None,
) -> EvalReport:
    """Mean accuracy over n_episodes test episodes drawn from the evaluation stream."""
    if n_episodes < 1:
        raise InvalidArgument("n_episodes must be >= 1")
    way = way or ck.config.way
    shot = shot or ck.config.shot
    rng = Rng.stream(seed, STREAM_EVAL)
    episodes = [sample_episode(test_set, way, shot, Q, rng) for _ in range(n_episodes)]
    accs = ordered_map(lambda ep: episode_accuracy(ck, test_set, ep), episodes)
    return EvalReport(accs, way, shot, Q, ck.config.distance, seed)


def report_to_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["episode", "accuracy"])
    for i, a in enumerate(report.per_episode_accuracy):
        w.writerow([i, f"{a:.10f}"])
    w.writerow(["mean", repr(report.mean), "ci95", repr(report.ci95_halfwidth)])
    return buf.getvalue()


def parse_report_csv(text: str) -> tuple[list[float], float, float]:
    """Inverse of report_to_csv: (per-episode accuracies, mean, ci95)."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["episode", "accuracy"] or rows[-1][0] != "mean":
        raise InvalidArgument("not an evaluation report")
    accs = [float(r[1]) for r in rows[1:-1]]
    summary = rows[-1]
    return accs, float(summary[1]), float(summary[3])
