"""Episodic training: Adam with step-halving schedules, E-episode minibatches,
validation-monitored early stopping, and cross-way pretraining."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .checkpoint import Checkpoint
from .data import Dataset
from .embed import EmbedderSpec, ParamSet, bind_params, init_params
from .episodes import (
    STREAM_INIT,
    STREAM_SAMPLING,
    STREAM_VALIDATION,
    Episode,
    Minibatch,
    Rng,
    sample_episode,
    sample_minibatch,
)
from .errors import InvalidArgument, InvalidValue, NonFiniteLoss, WayOrderingViolated
from .numgrad import Graph, backward
from .parallel import ordered_map
from .protonet import distance_kind, episode_loss

log = logging.getLogger(__name__)

LR_HALVING_PERIOD = 2000
SCHEDULES = (1, 3, 5)
# equal total episodes: E * max_iters = 450000
DEFAULT_BUDGETS = {1: 450000, 3: 150000, 5: 90000}
TOTAL_EPISODES = 450000
FINETUNE_MAX_ITERS = 20000
# cross-way presets: (pretraining way, queries per class)
CROSS_WAY_PRESETS = {"omniglot": ((60, 5),), "miniimagenet": ((20, 15), (30, 15))}

METRIC_FIELDS = ("iter", "lr", "train_loss", "val_loss", "val_acc")


def default_max_iters(episodes_per_iter: int) -> int:
    if episodes_per_iter in DEFAULT_BUDGETS:
        return DEFAULT_BUDGETS[episodes_per_iter]
    return -(-TOTAL_EPISODES // episodes_per_iter)


def lr_at(iteration: int, lr0: float, m: int) -> float:
    """lr0 halved every 2000*m iterations."""
    if iteration < 0:
        raise InvalidArgument("iteration must be >= 0")
    if m not in SCHEDULES:
        raise InvalidArgument(f"schedule multiplier must be one of {SCHEDULES}")
    return lr0 * 0.5 ** (iteration // (LR_HALVING_PERIOD * m))


@dataclass(frozen=True)
class TrainConfig:
    way: int = 5
    shot: int = 1
    query: int = 15
    episodes_per_iter: int = 1
    distance: str = "sq_euclidean"
    lr0: float = 1e-3
    schedule: int = 1
    max_iters: int | None = None
    val_every: int = 100
    val_episodes: int = 100
    val_way: int | None = None
    val_query: int | None = None
    patience: int = 20
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.max_iters is None and self.episodes_per_iter >= 1:
            object.__setattr__(self, "max_iters", default_max_iters(self.episodes_per_iter))
        object.__setattr__(self, "distance", distance_kind(self.distance))
        checks = [
            ("way", self.way >= 1, ">= 1"),
            ("shot", self.shot >= 1, ">= 1"),
            ("query", self.query >= 1, ">= 1"),
            ("episodes_per_iter", self.episodes_per_iter >= 1, ">= 1"),
            ("lr0", self.lr0 > 0 and math.isfinite(self.lr0), "> 0"),
            ("schedule", self.schedule in SCHEDULES, f"one of {SCHEDULES}"),
            ("max_iters", self.max_iters is not None and self.max_iters >= 1, ">= 1"),
            ("val_every", self.val_every >= 1, ">= 1"),
            ("val_episodes", self.val_episodes >= 1, ">= 1"),
            ("val_way", self.val_way is None or self.val_way >= 1, ">= 1"),
            ("val_query", self.val_query is None or self.val_query >= 1, ">= 1"),
            ("patience", self.patience >= 1, ">= 1"),
            ("seed", self.seed >= 0, ">= 0"),
            ("dtype", self.dtype in ("float32", "float64"), "float32 or float64"),
        ]
        for key, ok, rule in checks:
            if not ok:
                raise InvalidValue(f"{key} = {getattr(self, key)!r} violates {key} {rule}")

    @property
    def monitor_way(self) -> int:
        return self.val_way or self.way

    @property
    def monitor_query(self) -> int:
        return self.val_query or self.query

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# -- optimizer ---------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: ParamSet) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_update(params: ParamSet, grads: dict, state: AdamState, lr: float) -> tuple[ParamSet, AdamState]:
    t = state.t + 1
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        f = p.dtype.type
        g = grads[name].astype(p.dtype, copy=False)
        m = f(state.beta1) * state.m[name] + f(1 - state.beta1) * g
        v = f(state.beta2) * state.v[name] + f(1 - state.beta2) * g * g
        mhat = m / f(1 - state.beta1**t)
        vhat = v / f(1 - state.beta2**t)
        new_p[name] = p - f(lr) * mhat / (np.sqrt(vhat) + f(state.eps))
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(new_m, new_v, t, state.beta1, state.beta2, state.eps)


# -- losses -----------------------------------------------------------------


def _episode_value_and_grads(params, ep, d, spec, distance, dtype, need_grad=True):
    g = Graph(dtype)
    nodes = bind_params(g, params)
    out = episode_loss(g, spec, nodes, ep, d, distance)
    loss = float(g.value(out.loss))
    logp = g.value(out.log_probs)
    correct = int((logp.argmax(axis=1) == out.targets).sum())
    grads = None
    if need_grad:
        by_id = backward(g, out.loss)
        grads = {name: by_id[nid] for name, nid in nodes.items()}
    return loss, grads, correct, len(out.targets)


def minibatch_loss_and_grads(
    params: ParamSet, minibatch: Minibatch, d: Dataset, spec: EmbedderSpec, distance: str, dtype=None
) -> tuple[float, dict]:
    """Mean per-query NLL over all episodes in the minibatch and its gradient.

    Each episode is scored against its own prototypes; the reduction runs in
    episode order so threaded and sequential evaluation agree bit-for-bit.
    """
    dtype = dtype or next(iter(params.values())).dtype
    results = ordered_map(
        lambda ep: _episode_value_and_grads(params, ep, d, spec, distance, dtype), minibatch.episodes
    )
    total_q = sum(r[3] for r in results)
    loss = 0.0
    grads = {name: np.zeros_like(p, dtype=dtype) for name, p in params.items()}
    for ep_loss, ep_grads, _, nq in results:
        w = nq / total_q
        loss += w * ep_loss
        for name in grads:
            grads[name] = grads[name] + ep_grads[name] * np.dtype(dtype).type(w)
    return loss, grads


def step(
    params: ParamSet,
    opt_state: AdamState,
    minibatch: Minibatch,
    d: Dataset,
    spec: EmbedderSpec,
    distance: str,
    lr: float,
    iteration: int | None = None,
) -> tuple[ParamSet, AdamState, float]:
    """One Adam update on the minibatch loss; returns (params, state, loss)."""
    if not lr > 0:
        raise InvalidArgument("learning rate must be positive")
    loss, grads = minibatch_loss_and_grads(params, minibatch, d, spec, distance)
    if not math.isfinite(loss):
        raise NonFiniteLoss(iteration if iteration is not None else opt_state.t, loss)
    new_params, new_state = adam_update(params, grads, opt_state, lr)
    return new_params, new_state, loss


def evaluate_episodes(params, episodes, d, spec, distance, dtype=None) -> tuple[float, float]:
    """Mean loss and mean accuracy over a list of episodes (forward only)."""
    dtype = dtype or next(iter(params.values())).dtype
    results = ordered_map(
        lambda ep: _episode_value_and_grads(params, ep, d, spec, distance, dtype, need_grad=False), episodes
    )
    losses = [r[0] for r in results]
    accs = [r[2] / r[3] for r in results]
    return float(np.mean(losses)), float(np.mean(accs))


# -- training loop ------------------------------------------------------------


@dataclass
class MetricRow:
    iter: int
    lr: float
    train_loss: float
    val_loss: float
    val_acc: float

    def as_csv(self) -> list[str]:
        return [str(self.iter), repr(self.lr), repr(self.train_loss), repr(self.val_loss), repr(self.val_acc)]


def write_metrics_header(path: str) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerow(METRIC_FIELDS)


def read_metrics(path: str) -> list[MetricRow]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        MetricRow(int(r["iter"]), float(r["lr"]), float(r["train_loss"]), float(r["val_loss"]), float(r["val_acc"]))
        for r in rows
    ]


def _copy(params: ParamSet) -> ParamSet:
    return {k: v.copy() for k, v in params.items()}


class Trainer:
    """Stateful training loop; checkpoints capture everything needed to resume exactly."""

    def __init__(
        self,
        train_set: Dataset,
        val_set: Dataset | None,
        config: TrainConfig,
        spec: EmbedderSpec,
        params: ParamSet | None = None,
        metrics_path: str | None = None,
    ):
        self.train_set = train_set
        self.val_set = val_set if val_set is not None and len(val_set) > 0 else None
        self.config = config
        self.spec = spec
        self.dtype = np.dtype(config.dtype)
        self.sample_rng = Rng.stream(config.seed, STREAM_SAMPLING)
        self.val_rng = Rng.stream(config.seed, STREAM_VALIDATION)
        if params is None:
            params = init_params(spec, Rng.stream(config.seed, STREAM_INIT), self.dtype)
        self.params = {k: np.asarray(v, dtype=self.dtype).copy() for k, v in params.items()}
        self.opt_state = AdamState.zeros(self.params)
        self.iteration = 0
        self.best_val_loss: float | None = None
        self.best_iter: int | None = None
        self.best_params = _copy(self.params)
        self.bad_validations = 0
        self.pending_losses: list[float] = []
        self.stopped = False
        self.metrics: list[MetricRow] = []
        self.metrics_path = metrics_path
        if metrics_path and not os.path.exists(metrics_path):
            write_metrics_header(metrics_path)

    # -- persistence --

    def state_checkpoint(self) -> Checkpoint:
        return Checkpoint(
            spec=self.spec,
            config=self.config,
            params=_copy(self.params),
            opt_state=self.opt_state,
            iteration=self.iteration,
            best_val_loss=self.best_val_loss,
            best_iter=self.best_iter,
            best_params=_copy(self.best_params),
            rng_states={"sampling": self.sample_rng.get_state(), "validation": self.val_rng.get_state()},
            trainer_state={
                "bad_validations": self.bad_validations,
                "pending_losses": list(self.pending_losses),
                "stopped": self.stopped,
            },
        )

    def best_checkpoint(self) -> Checkpoint:
        ck = self.state_checkpoint()
        ck.params = _copy(self.best_params)
        return ck

    @classmethod
    def from_checkpoint(cls, ck: Checkpoint, train_set, val_set, metrics_path=None) -> "Trainer":
        tr = cls(train_set, val_set, ck.config, ck.spec, params=ck.params, metrics_path=metrics_path)
        tr.opt_state = ck.opt_state if ck.opt_state is not None else AdamState.zeros(tr.params)
        tr.iteration = ck.iteration
        tr.best_val_loss = ck.best_val_loss
        tr.best_iter = ck.best_iter
        if ck.best_params is not None:
            tr.best_params = _copy(ck.best_params)
        if "sampling" in ck.rng_states:
            tr.sample_rng.set_state(ck.rng_states["sampling"])
        if "validation" in ck.rng_states:
            tr.val_rng.set_state(ck.rng_states["validation"])
        st = ck.trainer_state or {}
        tr.bad_validations = int(st.get("bad_validations", 0))
        tr.pending_losses = [float(x) for x in st.get("pending_losses", [])]
        tr.stopped = bool(st.get("stopped", False))
        return tr

    # -- loop --

    @property
    def done(self) -> bool:
        return self.stopped or self.iteration >= self.config.max_iters

    def run(self, until: int | None = None) -> list[MetricRow]:
        """Train until max_iters, early stop, or iteration ``until`` (exclusive bound)."""
        cfg = self.config
        limit = cfg.max_iters if until is None else min(until, cfg.max_iters)
        while not self.stopped and self.iteration < limit:
            lr = lr_at(self.iteration, cfg.lr0, cfg.schedule)
            mb = sample_minibatch(
                self.train_set, cfg.episodes_per_iter, cfg.way, cfg.shot, cfg.query, self.sample_rng
            )
            self.params, self.opt_state, loss = step(
                self.params, self.opt_state, mb, self.train_set, self.spec, cfg.distance, lr, self.iteration
            )
            self.iteration += 1
            self.pending_losses.append(loss)
            if self.iteration % cfg.val_every == 0 or self.iteration == cfg.max_iters:
                self._validate(lr)
        return self.metrics

    def _validate(self, lr: float) -> None:
        cfg = self.config
        train_loss = float(np.mean(self.pending_losses)) if self.pending_losses else float("nan")
        self.pending_losses = []
        if self.val_set is None:
            val_loss, val_acc = float("nan"), float("nan")
            self.best_params = _copy(self.params)
            self.best_iter = self.iteration
        else:
            eps = [
                sample_episode(self.val_set, cfg.monitor_way, cfg.shot, cfg.monitor_query, self.val_rng)
                for _ in range(cfg.val_episodes)
            ]
            val_loss, val_acc = evaluate_episodes(self.params, eps, self.val_set, self.spec, cfg.distance, self.dtype)
            if self.best_val_loss is None or val_loss < self.best_val_loss:
                self.best_val_loss = val_loss
                self.best_iter = self.iteration
                self.best_params = _copy(self.params)
                self.bad_validations = 0
            else:
                self.bad_validations += 1
                if self.bad_validations >= cfg.patience:
                    self.stopped = True
        row = MetricRow(self.iteration, lr, train_loss, val_loss, val_acc)
        self.metrics.append(row)
        log.info("iter %d lr %.3g train %.4f val %.4f acc %.4f", *[getattr(row, f) for f in METRIC_FIELDS])
        if self.metrics_path:
            with open(self.metrics_path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(row.as_csv())
                fh.flush()


def train(
    train_set: Dataset,
    val_set: Dataset | None,
    config: TrainConfig,
    spec: EmbedderSpec,
    params: ParamSet | None = None,
    metrics_path: str | None = None,
    resume: Checkpoint | None = None,
) -> tuple[Checkpoint, list[MetricRow]]:
    """Run training to completion; returns the best-validation checkpoint and the metric series."""
    if resume is not None:
        trainer = Trainer.from_checkpoint(resume, train_set, val_set, metrics_path)
    else:
        trainer = Trainer(train_set, val_set, config, spec, params, metrics_path)
    trainer.run()
    return trainer.best_checkpoint(), trainer.metrics


def iterations_to_reach(metrics: list[MetricRow], accuracy: float) -> int | None:
    """First logged iteration whose validation accuracy is at least ``accuracy``."""
    for row in metrics:
        if row.val_acc >= accuracy:
            return row.iter
    return None


@dataclass
class CrossWayResult:
    checkpoint: Checkpoint
    pretrain_checkpoint: Checkpoint
    pretrain_metrics: list[MetricRow] = field(default_factory=list)
    finetune_metrics: list[MetricRow] = field(default_factory=list)


def pretrain_then_finetune(
    train_set: Dataset,
    val_set: Dataset | None,
    pre_config: TrainConfig,
    target_config: TrainConfig,
    spec: EmbedderSpec,
    finetune: bool = True,
    metrics_dir: str | None = None,
) -> CrossWayResult:
    """Pretrain at a higher way, then optionally fine-tune at the target way."""
    if pre_config.way <= target_config.way:
        raise WayOrderingViolated(
            f"pretraining way {pre_config.way} must exceed the target way {target_config.way}"
        )
    if len(train_set) <= pre_config.way:
        raise WayOrderingViolated(f"pretraining way {pre_config.way} needs more than {len(train_set)} classes")
    if val_set is not None and 0 < len(val_set) < pre_config.way:
        # too few validation classes for the pretraining way: monitor at the target way
        pre_config = replace(pre_config, val_way=target_config.way, val_query=target_config.query)
    path = lambda name: os.path.join(metrics_dir, name) if metrics_dir else None  # noqa: E731
    pre_ck, pre_metrics = train(train_set, val_set, pre_config, spec, metrics_path=path("pretrain_metrics.csv"))
    if not finetune:
        ck = Checkpoint(
            spec=spec,
            config=target_config,
            params=_copy(pre_ck.params),
            opt_state=None,
            iteration=pre_ck.iteration,
            best_val_loss=pre_ck.best_val_loss,
            best_iter=pre_ck.best_iter,
        )
        return CrossWayResult(ck, pre_ck, pre_metrics, [])
    ft_config = replace(target_config, max_iters=min(target_config.max_iters, FINETUNE_MAX_ITERS))
    ft_ck, ft_metrics = train(
        train_set, val_set, ft_config, spec, params=pre_ck.params, metrics_path=path("finetune_metrics.csv")
    )
    return CrossWayResult(ft_ck, pre_ck, pre_metrics, ft_metrics)


__all__ = [
    "AdamState",
    "CrossWayResult",
    "Episode",
    "MetricRow",
    "TrainConfig",
    "Trainer",
    "adam_update",
    "default_max_iters",
    "evaluate_episodes",
    "iterations_to_reach",
    "lr_at",
    "minibatch_loss_and_grads",
    "pretrain_then_finetune",
    "read_metrics",
    "step",
    "train",
]
