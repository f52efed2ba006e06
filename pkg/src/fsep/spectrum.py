"""Top Hessian eigenvalues of the training loss by power iteration with deflation.

Hessian-vector products are central differences of gradients, so only
first-order derivatives from numgrad are needed.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .checkpoint import Checkpoint
from .data import Dataset
from .embed import EmbedderSpec, ParamSet, bind_params, flatten_params, unflatten_params
from .episodes import STREAM_SPECTRUM, Rng, sample_episode
from .errors import InvalidArgument, NonFiniteGradient
from .numgrad import Graph, backward
from .parallel import ordered_map
from .protonet import episode_loss

LossAndGrad = Callable[[np.ndarray], tuple[float, np.ndarray]]


def default_step(w: np.ndarray) -> float:
    return 1e-4 * (1.0 + float(np.linalg.norm(w)))


def hvp(loss_and_grad: LossAndGrad, w: np.ndarray, v: np.ndarray, h: float | None = None) -> np.ndarray:
    """H(w) @ v from gradients at w +- h * v/|v|, rescaled by |v|."""
    norm = float(np.linalg.norm(v))
    if not norm > 0:
        raise InvalidArgument("hvp needs a nonzero direction")
    h = default_step(w) if h is None else h
    u = v / norm
    _, gp = loss_and_grad(w + h * u)
    _, gm = loss_and_grad(w - h * u)
    out = (gp - gm) / (2 * h) * norm
    if not np.all(np.isfinite(out)):
        raise NonFiniteGradient("Hessian-vector product produced non-finite values")
    return out


@dataclass
class SpectrumReport:
    eigenvalues: list[float]
    residuals: list[float]
    iterations: list[int]
    converged: list[bool]
    eigenvectors: np.ndarray  # [k, n], rows orthonormal
    sample: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rank", "eigenvalue", "residual", "iterations", "converged"])
        for i, (lam, res, it, ok) in enumerate(
            zip(self.eigenvalues, self.residuals, self.iterations, self.converged), start=1
        ):
            w.writerow([i, repr(lam), repr(res), it, str(ok).lower()])
        return buf.getvalue()


def _orthogonalize(v: np.ndarray, basis: list[np.ndarray]) -> np.ndarray:
    # two passes of modified Gram-Schmidt keep v orthogonal to machine precision
    for _ in range(2):
        for u in basis:
            v = v - (u @ v) * u
    return v


def top_eigenvalues(
    loss_and_grad: LossAndGrad,
    w: np.ndarray,
    k: int = 10,
    tol: float = 1e-4,
    max_power_iters: int = 1000,
    seed: int = 0,
    h: float | None = None,
) -> SpectrumReport:
    """Largest-magnitude Hessian eigenvalues, found one at a time on the deflated operator."""
    w = np.asarray(w, dtype=np.float64)
    n = w.size
    if k < 1 or k > n:
        raise InvalidArgument(f"k must be in [1, {n}]")
    if not tol > 0:
        raise InvalidArgument("tol must be positive")
    rng = np.random.default_rng(seed)
    vals, vecs, residuals, iters, flags = [], [], [], [], []
    for _ in range(k):
        v = _orthogonalize(rng.standard_normal(n), vecs)
        v /= np.linalg.norm(v)
        lam_prev, lam, rel = None, 0.0, math.inf
        t = 0
        while t < max_power_iters:
            t += 1
            hv = hvp(loss_and_grad, w, v, h)
            for lam_i, u in zip(vals, vecs):
                hv = hv - lam_i * (u @ v) * u
            hv = _orthogonalize(hv, vecs)
            lam = float(v @ hv)
            nrm = float(np.linalg.norm(hv))
            if nrm == 0.0:
                # v lies in the null space of the deflated operator
                rel = 0.0
                break
            v = hv / nrm
            if lam_prev is not None:
                rel = abs(lam - lam_prev) / max(abs(lam), 1e-12)
                if rel < tol:
                    break
            lam_prev = lam
        # Rayleigh quotient at the final iterate, which is one step better converged
        hv = hvp(loss_and_grad, w, v, h)
        for lam_i, u in zip(vals, vecs):
            hv = hv - lam_i * (u @ v) * u
        lam = float(v @ hv)
        vals.append(lam)
        vecs.append(v)
        residuals.append(rel)
        iters.append(t)
        flags.append(rel < tol)
    order = sorted(range(k), key=lambda i: -abs(vals[i]))
    return SpectrumReport(
        eigenvalues=[vals[i] for i in order],
        residuals=[residuals[i] for i in order],
        iterations=[iters[i] for i in order],
        converged=[flags[i] for i in order],
        eigenvectors=np.array([vecs[i] for i in order]),
    )


def episode_loss_fn(
    spec: EmbedderSpec, like: ParamSet, d: Dataset, episodes, distance: str, scale: float = 1.0
) -> LossAndGrad:
    """Mean protonet loss over a fixed list of episodes as a function of the flat parameter vector."""
    episodes = list(episodes)
    like64 = {k: np.asarray(v, dtype=np.float64) for k, v in like.items()}

    def one(params, ep):
        g = Graph(np.float64)
        nodes = bind_params(g, params)
        out = episode_loss(g, spec, nodes, ep, d, distance)
        grads = backward(g, out.loss)
        return float(g.value(out.loss)), flatten_params({k: grads[nid] for k, nid in nodes.items()})

    def loss_and_grad(w):
        params = unflatten_params(np.asarray(w, dtype=np.float64), like64)
        results = ordered_map(lambda ep: one(params, ep), episodes)
        loss = sum(r[0] for r in results) / len(results)
        grad = sum(r[1] for r in results) / len(results)
        return scale * loss, scale * grad

    return loss_and_grad


def spectrum_of_checkpoint(
    ck: Checkpoint,
    d: Dataset,
    n_episodes: int = 100,
    k: int = 10,
    tol: float = 1e-4,
    seed: int = 0,
    max_power_iters: int = 1000,
    scale: float = 1.0,
) -> SpectrumReport:
    """Hessian spectrum of the mean loss over a frozen, seeded episode sample (float64)."""
    cfg = ck.config
    rng = Rng.stream(seed, STREAM_SPECTRUM)
    episodes = [sample_episode(d, cfg.way, cfg.shot, cfg.query, rng) for _ in range(n_episodes)]
    fn = episode_loss_fn(ck.spec, ck.params, d, episodes, cfg.distance, scale)
    w = flatten_params({k_: np.asarray(v, dtype=np.float64) for k_, v in ck.params.items()})
    report = top_eigenvalues(fn, w, k=min(k, w.size), tol=tol, max_power_iters=max_power_iters, seed=seed)
    report.sample = {
        "seed": seed,
        "stream_offset": STREAM_SPECTRUM,
        "n_episodes": n_episodes,
        "way": cfg.way,
        "shot": cfg.shot,
        "query": cfg.query,
        "distance": cfg.distance,
        "batchnorm": "per-episode batch statistics",
    }
    return report
