"""Hierarchical half-space projected gradient.

Training runs in two phases.  A warm-up phase trains every variable with
momentum SGD while keeping an exponential average of a per-group saliency
score.  The groups of the search space are then visited in ascending score
order and accepted as redundant while the segment graph stays valid, until
``K`` are chosen.  In the hybrid phase the remaining variables keep the
momentum-SGD rule, while each redundant group takes a plain descent trial
step on ``f + lam_g * ||x_g||`` followed by a half-space projection that
sends the whole group to exactly zero once the trial step crosses the
hyperplane through the origin.  ``lam_g`` is set per step so the group's
component along its own direction follows a linear ramp to zero over the
projection horizon.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import IO, Any, Callable, Mapping

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetHandle
from .engine import Batch, ParamStore, loss_and_grad, predict
from .ir import TraceGraph
from .search_space import GroupPartition, SegmentGraph, group_indices, max_feasible_sparsity, removal_validity

log = logging.getLogger(__name__)


class InfeasibleSparsityError(ValueError):
    def __init__(self, requested: int, achieved: int, max_feasible: int | None):
        self.requested = requested
        self.achieved = achieved
        self.max_feasible = max_feasible if max_feasible is not None else achieved
        super().__init__(
            f"target hierarchical sparsity K={requested} is infeasible "
            f"(hierarchical search reached {achieved}); "
            f"max feasible hierarchical sparsity: {self.max_feasible}"
        )


@dataclass
class H2SPGConfig:
    K: int
    total_epochs: int
    warmup_epochs: int | None = None
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    ema_decay: float = 0.9
    lambda_c: float = 0.5
    lambda_m: float = 0.5
    epsilon: float = 0.0
    batch_size: int = 64
    seed: int = 0
    best_effort: bool = False
    # fraction of the hybrid phase over which redundant groups are driven to zero
    projection_fraction: float = 0.5
    validity_check: bool = True
    track_best: bool = False
    eval_every: int = 1

    def __post_init__(self):
        if self.warmup_epochs is None:
            self.warmup_epochs = min(max(1, int(round(0.1 * self.total_epochs))), self.total_epochs - 1)
        if self.K < 0:
            raise ValueError("K must be >= 0")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("need 0 <= warmup_epochs < total_epochs")
        if self.lr <= 0 or not 0.0 <= self.momentum < 1.0 or self.weight_decay < 0:
            raise ValueError("need lr > 0, 0 <= momentum < 1, weight_decay >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError("epsilon must lie in [0, 1)")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("ema_decay must lie in [0, 1]")
        if not 0.0 < self.projection_fraction <= 1.0:
            raise ValueError("projection_fraction must lie in (0, 1]")
        if self.ema_decay == 1.0:
            log.warning("ema_decay=1: saliency scores keep their first value")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "H2SPGConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown optimizer settings: {sorted(unknown)}")
        return cls(**d)


# -- scoring ----------------------------------------------------------------

def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def saliency(x_g: np.ndarray, grad_g: np.ndarray, max_magnitude: float,
             lambda_c: float = 0.5, lambda_m: float = 0.5) -> float:
    """Redundancy score of one group; lower means more redundant.

    ``lambda_m * (||x_g|| / sqrt(|g|)) / max_magnitude
    + lambda_c * (1 - cos(-grad_g, -x_g)) / 2``
    """
    x_g = np.asarray(x_g, dtype=np.float64)
    grad_g = np.asarray(grad_g, dtype=np.float64)
    mag = np.linalg.norm(x_g) / math.sqrt(x_g.size)
    mag_term = mag / max_magnitude if max_magnitude > 0 else 0.0
    return lambda_m * mag_term + lambda_c * (1.0 - _cos(-grad_g, -x_g)) / 2.0


def group_saliency(x: np.ndarray, grad: np.ndarray, groups: Mapping[str, np.ndarray],
                   lambda_c: float = 0.5, lambda_m: float = 0.5) -> dict[str, float]:
    mags = {k: float(np.linalg.norm(x[i]) / math.sqrt(max(i.size, 1))) for k, i in groups.items()}
    top = max(mags.values(), default=0.0)
    return {k: saliency(x[i], grad[i], top, lambda_c, lambda_m) for k, i in groups.items()}


@dataclass
class SaliencyState:
    scores: dict[str, float] = field(default_factory=dict)
    steps: int = 0

    def update(self, fresh: Mapping[str, float], decay: float) -> None:
        if self.steps == 0:
            self.scores = dict(fresh)
        else:
            for k, v in fresh.items():
                self.scores[k] = decay * self.scores[k] + (1.0 - decay) * v
        self.steps += 1


# -- search -----------------------------------------------------------------

def hierarchical_search(sg: SegmentGraph, partition: GroupPartition, scores: Mapping[str, float],
                        K: int, best_effort: bool = False, validity_check: bool = True,
                        counter: list[int] | None = None) -> list[str]:
    """Pick up to ``K`` redundant groups in ascending score order (ties by id),
    skipping any whose removal would invalidate the remaining graph."""
    missing = set(partition.ids) - set(scores)
    if missing:
        raise ValueError(f"no saliency score for groups {sorted(missing)}")
    chosen: list[str] = []
    removed: set[str] = set()
    for gid in sorted(partition.ids, key=lambda k: (scores[k], k)):
        if len(chosen) >= K:
            break
        seg = partition.segment_of(gid)
        if not validity_check or removal_validity(sg, removed | {seg}, counter):
            chosen.append(gid)
            removed.add(seg)
    if len(chosen) < K:
        if best_effort:
            log.warning("hierarchical search reached %d of K=%d; continuing with reduced K",
                        len(chosen), K)
        else:
            raise InfeasibleSparsityError(K, len(chosen), max_feasible_sparsity(sg, partition))
    return chosen


# -- updates ----------------------------------------------------------------

def half_space_project(x_g: np.ndarray, trial_g: np.ndarray, epsilon: float = 0.0) -> np.ndarray:
    """Zero the whole group if the trial point left the half-space
    ``<y, x_g> >= epsilon * ||x_g||^2``; otherwise keep the trial point."""
    x_g = np.asarray(x_g)
    if not np.any(x_g):
        return np.zeros_like(x_g)
    if np.dot(trial_g, x_g) < epsilon * np.dot(x_g, x_g):
        return np.zeros_like(x_g)
    return np.array(trial_g, copy=True)


def hybrid_step(x: np.ndarray, grad: np.ndarray, lr: float, redundant: Mapping[str, np.ndarray],
                epsilon: float = 0.0, momentum: float = 0.0, buf: np.ndarray | None = None,
                penalties: Mapping[str, float] | None = None, weight_decay: float = 0.0
                ) -> np.ndarray:
    """One iteration: momentum SGD outside the redundant groups, projected
    plain descent on each redundant group.

    ``buf`` (the momentum buffer) is updated in place on the complement
    coordinates.  ``penalties`` adds ``lam * x_g / ||x_g||`` to a group's
    gradient.
    """
    new = x.copy()
    mask = np.ones(x.size, dtype=bool)
    for idx in redundant.values():
        mask[idx] = False
    d = grad[mask]
    if weight_decay:
        d = d + weight_decay * x[mask]
    if momentum:
        if buf is None:
            raise ValueError("momentum needs a buffer")
        buf[mask] = momentum * buf[mask] + d
        d = buf[mask]
    new[mask] = x[mask] - lr * d
    for gid, idx in redundant.items():
        xg = x[idx]
        if not np.any(xg):
            new[idx] = 0.0
            continue
        gg = grad[idx]
        lam = penalties.get(gid, 0.0) if penalties else 0.0
        if lam:
            gg = gg + lam * xg / np.linalg.norm(xg)
        new[idx] = half_space_project(xg, xg - lr * gg, epsilon)
    return new


def ramp_penalty(x_g: np.ndarray, grad_g: np.ndarray, lr: float, target_norm: float) -> float:
    """Smallest ``lam >= 0`` whose trial step puts the group's component
    along ``x_g`` at ``target_norm`` (negative targets cross the origin)."""
    n = float(np.linalg.norm(x_g))
    if n == 0:
        return 0.0
    radial = float(np.dot(grad_g, x_g)) / n
    return max(0.0, (n - target_norm) / lr - radial)


@dataclass
class FinalizeReport:
    forced: list[str]
    residual_norms: dict[str, float]

    @property
    def forced_count(self) -> int:
        return len(self.forced)


def finalize(x: np.ndarray, redundant: Mapping[str, np.ndarray]) -> tuple[np.ndarray, FinalizeReport]:
    """Hard-zero every redundant group; report the ones that were not zero."""
    x = x.copy()
    forced, norms = [], {}
    for gid, idx in redundant.items():
        n = float(np.linalg.norm(x[idx]))
        if n > 0:
            forced.append(gid)
            norms[gid] = n
            x[idx] = 0.0
    return x, FinalizeReport(forced, norms)


# -- driver -----------------------------------------------------------------

@dataclass
class TrainedSolution:
    store: ParamStore
    zero_groups: list[str]
    redundant: list[str]
    scores: dict[str, float]
    history: list[dict[str, Any]]
    forced: FinalizeReport
    K: int

    def to_json(self) -> dict[str, Any]:
        return {"K": self.K, "redundant": self.redundant, "zero_groups": self.zero_groups,
                "scores": self.scores, "forced": self.forced.forced,
                "forced_residual_norms": self.forced.residual_norms, "history": self.history}


def cosine_lr(lr0: float, epoch: int, total: int) -> float:
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * epoch / total))


def accuracy(g: TraceGraph, store: ParamStore, x: np.ndarray, y: np.ndarray) -> float:
    if len(x) == 0:
        return float("nan")
    return float(np.mean(predict(g, store, x).argmax(axis=1) == y))


class H2SPG:
    """Stateful trainer; :meth:`run` executes (or resumes) the full schedule."""

    def __init__(self, g: TraceGraph, partition: GroupPartition, sg: SegmentGraph,
                 data: DatasetHandle, cfg: H2SPGConfig, store: ParamStore,
                 score_override: Mapping[str, float] | None = None,
                 metrics_stream: IO[str] | None = None,
                 checkpoint_dir: str | Path | None = None,
                 stop_after_epoch: int | None = None):
        self.g, self.partition, self.sg, self.data, self.cfg = g, partition, sg, data, cfg
        self.store = store
        self.score_override = dict(score_override) if score_override else None
        self.metrics_stream = metrics_stream
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.stop_after_epoch = stop_after_epoch
        self.groups = group_indices(partition, store.offsets)
        self.buf = np.zeros_like(store.x)
        self.saliency = SaliencyState()
        self.redundant: list[str] | None = None
        self.start_norms: dict[str, float] = {}
        self.hybrid_start_step = 0
        self.ramp_steps = 1
        self.step = 0
        self.epoch = 0
        self.history: list[dict[str, Any]] = []
        self.best: tuple[float, np.ndarray, dict] | None = None
        n = len(data.train_x)
        self.steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))

    # -- phases ----------------------------------------------------------
    def _batches(self, epoch: int):
        rng = np.random.default_rng([self.cfg.seed, epoch])
        perm = rng.permutation(len(self.data.train_x))
        bs = self.cfg.batch_size
        for i in range(0, len(perm), bs):
            idx = perm[i:i + bs]
            yield Batch(self.data.train_x[idx], self.data.train_y[idx])

    def _start_hybrid(self) -> None:
        cfg = self.cfg
        if self.score_override is not None:
            scores = self.score_override
        else:
            scores = self.saliency.scores
        if not scores and self.partition.ids:
            # no warm-up ran: score the initial point with a single gradient
            batch = next(self._batches(0))
            _, _, grads = loss_and_grad(self.g, self.store, batch, update_running=False)
            scores = group_saliency(self.store.x, grads.flat, self.groups, cfg.lambda_c, cfg.lambda_m)
            self.saliency.update(scores, cfg.ema_decay)
        self.redundant = hierarchical_search(self.sg, self.partition, scores, cfg.K,
                                             cfg.best_effort, cfg.validity_check)
        self.start_norms = {k: float(np.linalg.norm(self.store.x[self.groups[k]])) for k in self.redundant}
        hybrid_epochs = cfg.total_epochs - cfg.warmup_epochs
        horizon = max(1, int(math.ceil(cfg.projection_fraction * hybrid_epochs)) * self.steps_per_epoch)
        self.ramp_steps = max(1, int(0.8 * horizon))
        self.hybrid_start_step = self.step
        for k in self.redundant:
            self.buf[self.groups[k]] = 0.0
        log.info("redundant groups: %s", self.redundant)

    def _warmup_step(self, batch: Batch, lr: float) -> float:
        cfg = self.cfg
        x = self.store.x
        loss, _, grads = loss_and_grad(self.g, self.store, batch)
        gflat = grads.flat
        if self.partition.ids:
            fresh = group_saliency(x, gflat, self.groups, cfg.lambda_c, cfg.lambda_m)
            self.saliency.update(fresh, cfg.ema_decay)
        d = gflat + cfg.weight_decay * x if cfg.weight_decay else gflat
        self.buf *= cfg.momentum
        self.buf += d
        x -= lr * self.buf
        return loss

    def _hybrid_step(self, batch: Batch, lr: float) -> float:
        cfg = self.cfg
        x = self.store.x
        loss, _, grads = loss_and_grad(self.g, self.store, batch)
        red = {k: self.groups[k] for k in self.redundant}
        t = self.step + 1 - self.hybrid_start_step
        frac = 1.0 - t / self.ramp_steps
        penalties = {k: ramp_penalty(x[idx], grads.flat[idx], lr, self.start_norms[k] * frac)
                     for k, idx in red.items()}
        new = hybrid_step(x, grads.flat, lr, red, cfg.epsilon, cfg.momentum, self.buf,
                          penalties, cfg.weight_decay)
        for k, idx in red.items():
            if not np.any(x[idx]):
                assert not np.any(new[idx]), f"zero group {k} left zero"
        x[...] = new
        return loss

    def zero_groups(self) -> list[str]:
        return [k for k, idx in self.groups.items() if not np.any(self.store.x[idx])]

    # -- loop ------------------------------------------------------------
    def run(self) -> TrainedSolution | None:
        """Train to the end of the schedule; ``None`` if stopped early."""
        cfg = self.cfg
        if self.redundant is None and not cfg.best_effort and cfg.validity_check:
            # fail before spending the warm-up on an unreachable target
            top = max_feasible_sparsity(self.sg, self.partition)
            if top is not None and cfg.K > top:
                raise InfeasibleSparsityError(cfg.K, top, top)
            if cfg.K > len(self.partition.ids):
                raise InfeasibleSparsityError(cfg.K, len(self.partition.ids), top)
        while self.epoch < cfg.total_epochs:
            epoch = self.epoch
            lr = cosine_lr(cfg.lr, epoch, cfg.total_epochs)
            warm = epoch < cfg.warmup_epochs
            if not warm and self.redundant is None:
                self._start_hybrid()
            losses = []
            for batch in self._batches(epoch):
                loss = self._warmup_step(batch, lr) if warm else self._hybrid_step(batch, lr)
                losses.append(loss)
                self.step += 1
            self.epoch += 1
            acc = None
            if (epoch + 1) % cfg.eval_every == 0 or self.epoch == cfg.total_epochs:
                acc = accuracy(self.g, self.store, self.data.test_x, self.data.test_y)
            rec = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)),
                   "eval_acc": acc, "zero_groups": len(self.zero_groups()), "forced_zero_count": 0,
                   "phase": "warmup" if warm else "hybrid"}
            self.history.append(rec)
            self._emit(rec)
            if (cfg.track_best and acc is not None and self.redundant is not None
                    and all(not np.any(self.store.x[self.groups[k]]) for k in self.redundant)
                    and (self.best is None or acc > self.best[0])):
                self.best = (acc, self.store.x.copy(),
                             {k: v.copy() for k, v in self.store.buffers.items()})
            if self.checkpoint_dir is not None:
                self.save(self.checkpoint_dir / f"ckpt_epoch{self.epoch:04d}")
            if (self.stop_after_epoch is not None and self.epoch >= self.stop_after_epoch
                    and self.epoch < cfg.total_epochs):
                return None
        if self.redundant is None:
            self._start_hybrid()
        return self.finish()

    def finish(self) -> TrainedSolution:
        if self.best is not None:
            self.store.x[...] = self.best[1]
            for k, v in self.best[2].items():
                self.store.buffers[k][...] = v
        red = {k: self.groups[k] for k in self.redundant}
        new, rep = finalize(self.store.x, red)
        self.store.x[...] = new
        if self.history:
            self.history[-1]["forced_zero_count"] = rep.forced_count
            self.history[-1]["zero_groups"] = len(self.zero_groups())
        if rep.forced:
            log.info("finalize forced %d groups to zero: %s", rep.forced_count, rep.residual_norms)
        zero = self.zero_groups()
        return TrainedSolution(self.store, zero, list(self.redundant), dict(self.saliency.scores),
                               self.history, rep, self.cfg.K)

    def _emit(self, rec: dict) -> None:
        if self.metrics_stream is not None:
            self.metrics_stream.write(json.dumps(rec) + "\n")
            self.metrics_stream.flush()

    # -- checkpoints -----------------------------------------------------
    def save(self, prefix) -> Path:
        tensors = {"param/" + k: v for k, v in self.store.tensors.items()}
        tensors.update({"buffer/" + k: v for k, v in self.store.buffers.items()})
        tensors["momentum"] = self.buf
        meta = {
            "step": self.step,
            "epoch": self.epoch,
            "rng_state": {"seed": self.cfg.seed, "next_epoch": self.epoch},
            "optimizer_phase": "warmup" if self.redundant is None else "hybrid",
            "config": asdict(self.cfg),
            "saliency": {"scores": self.saliency.scores, "steps": self.saliency.steps},
            "redundant": self.redundant,
            "start_norms": self.start_norms,
            "hybrid_start_step": self.hybrid_start_step,
            "ramp_steps": self.ramp_steps,
            "history": self.history,
        }
        return save_checkpoint(prefix, tensors, meta)

    def restore(self, path) -> None:
        tensors, meta = load_checkpoint(path)
        for k in self.store.tensors:
            self.store.tensors[k][...] = tensors["param/" + k]
        for k in self.store.buffers:
            self.store.buffers[k][...] = tensors["buffer/" + k]
        self.buf[...] = tensors["momentum"]
        self.step = meta["step"]
        self.epoch = meta["epoch"]
        self.saliency = SaliencyState(dict(meta["saliency"]["scores"]), meta["saliency"]["steps"])
        self.redundant = meta["redundant"]
        self.start_norms = meta["start_norms"]
        self.hybrid_start_step = meta["hybrid_start_step"]
        self.ramp_steps = meta["ramp_steps"]
        self.history = list(meta["history"])


def run(g: TraceGraph, partition: GroupPartition, sg: SegmentGraph, data: DatasetHandle,
        cfg: H2SPGConfig, store: ParamStore, **kwargs) -> TrainedSolution:
    """Warm-up scoring, hierarchical search, hybrid training, finalize."""
    resume = kwargs.pop("resume", None)
    trainer = H2SPG(g, partition, sg, data, cfg, store, **kwargs)
    if resume is not None:
        trainer.restore(resume)
    return trainer.run()


def warmup_and_score(g: TraceGraph, partition: GroupPartition, data: DatasetHandle,
                     cfg: H2SPGConfig, store: ParamStore, sg: SegmentGraph | None = None
                     ) -> SaliencyState:
    """Run only the warm-up epochs and return the averaged scores."""
    trainer = H2SPG(g, partition, sg, data, cfg, store)
    for epoch in range(cfg.warmup_epochs):
        lr = cosine_lr(cfg.lr, epoch, cfg.total_epochs)
        for batch in trainer._batches(epoch):
            loss = trainer._warmup_step(batch, lr)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss in warm-up epoch {epoch}")
            trainer.step += 1
    return trainer.saliency
