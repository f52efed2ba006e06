"""Prototypical-network loss and prediction on top of the numgrad graph.

Within an episode the support rows are laid out class-major: rows
``k*S .. k*S + S - 1`` belong to class position k. Queries follow the
same layout with Q rows per class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .embed import EmbedderSpec, embed
from .episodes import Episode
from .errors import EmptySupport, InvalidArgument, ShapeMismatch, ZeroVectorCosine
from .numgrad import Graph

SQ_EUCLIDEAN = "sq_euclidean"
COSINE = "cosine"
_ALIASES = {"euclid": SQ_EUCLIDEAN, "euclidean": SQ_EUCLIDEAN, SQ_EUCLIDEAN: SQ_EUCLIDEAN, COSINE: COSINE}


def distance_kind(name: str) -> str:
    try:
        return _ALIASES[name]
    except KeyError:
        raise InvalidArgument(f"unknown distance {name!r}; use euclid or cosine") from None


def prototypes(graph: Graph, support: int, way: int, shot: int) -> int:
    """Per-class mean of the [way*shot, M] support embeddings -> [way, M]."""
    if shot < 1:
        raise EmptySupport("prototypes need at least one support example per class")
    rows = graph.value(support).shape[0]
    if rows != way * shot:
        raise ShapeMismatch(f"support has {rows} rows, expected way*shot = {way * shot}")
    avg = np.zeros((way, way * shot))
    for k in range(way):
        avg[k, k * shot : (k + 1) * shot] = 1.0 / shot
    return graph.matmul(graph.constant(avg), support)


def neg_distances(graph: Graph, queries: int, protos: int, distance: str) -> int:
    distance = distance_kind(distance)
    if distance == SQ_EUCLIDEAN:
        return graph.negate(graph.sq_euclidean_pairwise(queries, protos))
    # -(1 - cos) = cos - 1
    return graph.add(graph.cosine_similarity_pairwise(queries, protos), graph.constant(-1.0))


def class_log_probs(graph: Graph, queries: int, protos: int, distance: str) -> int:
    """[N, K] log p(class k | query i) from a softmax over negative distances."""
    return graph.log_softmax(neg_distances(graph, queries, protos, distance))


def nll(graph: Graph, log_probs: int, targets) -> int:
    """Mean negative log-probability of the target class positions."""
    n, k = graph.value(log_probs).shape
    targets = np.asarray(targets)
    if targets.shape != (n,):
        raise ShapeMismatch(f"need {n} targets, got {targets.shape}")
    picked = graph.gather_rows(graph.flatten(log_probs, start_axis=0), np.arange(n) * k + targets)
    return graph.negate(graph.mean(picked))


def episode_batch(d: Dataset, ep: Episode) -> tuple[np.ndarray, np.ndarray]:
    """Stack support then query examples of an episode; returns (batch, query targets)."""
    rows = []
    for k, c in enumerate(ep.classes):
        rows.append(d.classes[c].examples[list(ep.support[k])])
    for k, c in enumerate(ep.classes):
        rows.append(d.classes[c].examples[list(ep.query_set[k])])
    targets = np.repeat(np.arange(ep.way), ep.query)
    return np.concatenate(rows), targets


@dataclass
class EpisodeOutput:
    loss: int
    log_probs: int
    targets: np.ndarray


def episode_loss(
    graph: Graph, spec: EmbedderSpec, nodes: dict[str, int], ep: Episode, d: Dataset, distance: str
) -> EpisodeOutput:
    """Mean NLL over the episode's way*query queries.

    Support and queries are embedded in one batch so batchnorm sees a
    single set of statistics.
    """
    batch, targets = episode_batch(d, ep)
    emb = embed(spec, nodes, graph.constant(batch), graph)
    n_support = ep.way * ep.shot
    support = graph.gather_rows(emb, range(n_support))
    queries = graph.gather_rows(emb, range(n_support, n_support + ep.way * ep.query))
    protos = prototypes(graph, support, ep.way, ep.shot)
    logp = class_log_probs(graph, queries, protos, distance)
    return EpisodeOutput(nll(graph, logp, targets), logp, targets)


def pairwise_distances(queries: np.ndarray, protos: np.ndarray, distance: str) -> np.ndarray:
    distance = distance_kind(distance)
    if distance == SQ_EUCLIDEAN:
        diff = queries[:, None, :] - protos[None, :, :]
        return (diff * diff).sum(axis=-1)
    nq = np.sqrt((queries * queries).sum(axis=1))
    npr = np.sqrt((protos * protos).sum(axis=1))
    if not (np.all(nq > 0) and np.all(npr > 0)):
        raise ZeroVectorCosine("cosine distance is undefined for zero vectors")
    return 1.0 - (queries / nq[:, None]) @ (protos / npr[:, None]).T


def predict(queries: np.ndarray, protos: np.ndarray, distance: str, classes=None) -> np.ndarray:
    """Nearest prototype per query; ties go to the lowest row. Returns ids from ``classes`` if given."""
    pos = pairwise_distances(np.asarray(queries), np.asarray(protos), distance).argmin(axis=1)
    if classes is None:
        return pos
    return np.asarray(classes)[pos]
