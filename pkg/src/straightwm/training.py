"""Joint training of encoder, action encoder, predictor and pooling head.

Loss per minibatch: prediction MSE against stop-gradient targets plus
``lam * (1 - C)`` averaged over curvature triplets.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .envs import TrajectoryDataset
from .errors import ConfigError, ContractError, NonFiniteError
from .model import VARIANTS, WorldModel, straightening_cosine

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lam: float = 0.1
    batch_size: int = 32
    encoder_lr: float | None = None  # None -> 1e-4 with straightening, 1e-5 without
    predictor_lr: float = 5e-4
    action_lr: float = 5e-4
    head_lr: float = 5e-4
    epochs: int = 20
    variant: str = "agg"
    seed: int = 0
    holdout_fraction: float = 0.05
    steps_per_epoch: int | None = None

    def __post_init__(self):
        problems = []
        if self.lam < 0:
            problems.append("lam must be >= 0")
        for name in ("predictor_lr", "action_lr", "head_lr"):
            if getattr(self, name) <= 0:
                problems.append(f"{name} must be > 0")
        if self.encoder_lr is not None and self.encoder_lr <= 0:
            problems.append("encoder_lr must be > 0")
        if self.batch_size < 1 or self.epochs < 1:
            problems.append("batch_size and epochs must be >= 1")
        if self.variant not in VARIANTS:
            problems.append(f"variant must be one of {VARIANTS}")
        if not 0 < self.holdout_fraction < 1:
            problems.append("holdout_fraction must lie in (0, 1)")
        if problems:
            raise ConfigError(problems)

    @property
    def effective_encoder_lr(self) -> float:
        if self.encoder_lr is not None:
            return self.encoder_lr
        # a from-scratch encoder needs 10x the rate used for a projector on frozen features
        return 1e-4 if self.lam > 0 else 1e-5


@dataclass
class TrainReport:
    l_pred: list = field(default_factory=list)
    l_curv: list = field(default_factory=list)
    cosine: list = field(default_factory=list)
    variance: list = field(default_factory=list)

    @property
    def epochs(self):
        return len(self.l_pred)

    def rows(self):
        return [
            (e + 1, self.l_pred[e], self.l_curv[e], self.cosine[e], self.variance[e]) for e in range(self.epochs)
        ]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "l_pred", "l_curv", "cosine", "variance"])
            for row in self.rows():
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def prediction_loss(z_pred, z_target) -> ag.Node:
    """Mean squared error against a stop-gradient target."""
    return ag.mse(z_pred, ag.stop_gradient(z_target))


def curvature_loss(c) -> ag.Node:
    c = ag.as_node(c)
    if np.any(c.value < -1 - 1e-9) or np.any(c.value > 1 + 1e-9):
        raise ContractError("cosine outside [-1, 1]")
    return ag.sub(ag.constant(np.ones_like(c.value)), c)


def collapse_check(model: WorldModel, probe_obs, threshold=1e-6):
    """Mean per-dimension latent variance over the probes, and whether it clears ``threshold``."""
    probe_obs = np.asarray(probe_obs)
    if len(probe_obs) < 100:
        raise ContractError("collapse_check needs at least 100 probe observations")
    z = model.encode_numpy(probe_obs).reshape(len(probe_obs), -1)
    var = float(z.var(axis=0).mean())
    return var, var >= threshold


class FrameIndex:
    """Frameskipped view of a dataset: frame j is raw step j * frameskip.

    Action chunks are divided by the environment's action bound.
    """

    def __init__(self, dataset: TrajectoryDataset, frameskip: int, history: int):
        self.dataset = dataset
        self.f = frameskip
        self.k = history
        self.n_frames = dataset.traj_len // frameskip + 1
        if self.n_frames < 3:
            raise ContractError("trajectories too short for frameskipped triplets")
        self.positions = dataset.states[:, : (self.n_frames - 1) * frameskip + 1 : frameskip, :2].astype(np.float64)
        n_chunks = self.n_frames - 1
        acts = dataset.actions[:, : n_chunks * frameskip].astype(np.float64) / dataset.env.action_bound
        self.chunks = acts.reshape(dataset.n_traj, n_chunks, frameskip * acts.shape[-1])

    def prediction_pool(self, trajs):
        t = np.arange(1, self.n_frames)
        return np.array([(i, j) for i in trajs for j in t], dtype=np.int64)

    def triplet_pool(self, trajs):
        out = []
        for i in trajs:
            out.extend((i, j) for j in range(self.n_frames - 2) if self.valid_triplet(i, j))
        return np.array(out, dtype=np.int64).reshape(-1, 2)

    def valid_triplet(self, traj, j) -> bool:
        if j < 0 or j + 2 >= self.n_frames:
            return False
        p = self.positions[traj, j : j + 3]
        return bool(np.any(p[1] != p[0]) and np.any(p[2] != p[1]))

    def history(self, traj, t):
        """Frame ids and action chunks for predicting frame ``t``; indices < 0 repeat frame 0 with zero actions."""
        frames, chunks = [], []
        for s in range(t - self.k, t):
            frames.append((traj, max(s, 0)))
            chunks.append(self.chunks[traj, s] if s >= 0 else np.zeros(self.chunks.shape[-1]))
        return frames, chunks


def _encode_frames(model, env, index: FrameIndex, frame_ids):
    """Encode unique (traj, frame) pairs once; returns the latent node and a row lookup."""
    uniq, inverse = np.unique(np.asarray(frame_ids).reshape(-1, 2), axis=0, return_inverse=True)
    obs = env.render_positions(index.positions[uniq[:, 0], uniq[:, 1]])
    return model.encode(obs), inverse.reshape(-1)


def mean_trajectory_cosine(model, dataset, trajs, variant, frameskip, history=3) -> float:
    index = FrameIndex(dataset, frameskip, history)
    pool = index.triplet_pool(trajs)
    if len(pool) == 0:
        return float("nan")
    ids = np.concatenate([pool, pool + [0, 1], pool + [0, 2]])
    z, rows = _encode_frames(model, dataset.env, index, ids)
    n = len(pool)
    zv = z.value
    c = straightening_cosine(zv[rows[:n]], zv[rows[n : 2 * n]], zv[rows[2 * n :]], variant, model)
    return float(np.mean(c.value))


def _holdout_split(n, fraction):
    n_hold = max(1, int(math.ceil(n * fraction)))
    return np.arange(n - n_hold), np.arange(n - n_hold, n)


def train(model: WorldModel, dataset: TrajectoryDataset, config: TrainConfig | None = None, progress=None):
    """Train ``model`` in place; returns ``(model, TrainReport)``."""
    config = config or TrainConfig()
    cfg = model.config
    if dataset.traj_len < 2 * cfg.frameskip:
        raise ContractError("dataset trajectories shorter than two frameskipped steps")
    env = dataset.env
    index = FrameIndex(dataset, cfg.frameskip, cfg.history)
    train_ids, held_ids = _holdout_split(dataset.n_traj, config.holdout_fraction)
    pred_pool = index.prediction_pool(train_ids)
    curv_pool = index.triplet_pool(train_ids)
    if len(curv_pool) == 0:
        raise ContractError("no non-degenerate curvature triplets in the training split")
    held_frames = index.positions[held_ids].reshape(-1, 2)
    probe = env.render_positions(held_frames[:: max(1, len(held_frames) // 400)])

    rng = np.random.default_rng([config.seed, 1])
    opt = ag.Adam(
        {
            "encoder": (model.group("encoder"), config.effective_encoder_lr),
            "action": (model.group("action"), config.action_lr),
            "predictor": (model.group("predictor"), config.predictor_lr),
            "head": (model.group("head"), config.head_lr),
        }
    )
    B = config.batch_size
    steps = config.steps_per_epoch or max(1, len(pred_pool) // B)
    report = TrainReport()
    k = cfg.history
    for epoch in range(config.epochs):
        perm = rng.permutation(len(pred_pool))
        sum_pred = sum_curv = 0.0
        for step in range(steps):
            sel = pred_pool[perm[(step * B) % len(pred_pool) :][:B]]
            if len(sel) < B:
                sel = pred_pool[rng.integers(len(pred_pool), size=B)]
            hist_ids, hist_chunks = [], []
            for i, t in sel:
                fr, ch = index.history(i, t)
                hist_ids.append(fr)
                hist_chunks.append(ch)
            hist_ids = np.array(hist_ids)  # (B, K, 2)
            hist_chunks = np.array(hist_chunks)  # (B, K, chunk)
            # curvature triplets reuse the window's last three frames when they are valid
            trip = sel - [0, 2]
            ok = np.array([index.valid_triplet(i, j) for i, j in trip], dtype=bool)
            if not ok.any():
                trip, ok = curv_pool[rng.integers(len(curv_pool), size=1)], np.ones(1, dtype=bool)
            trip = trip[ok]
            trip_ids = np.stack([trip, trip + [0, 1], trip + [0, 2]], axis=1)
            all_ids = np.concatenate([hist_ids.reshape(-1, 2), sel, trip_ids.reshape(-1, 2)])
            try:
                z, rows = _encode_frames(model, env, index, all_ids)
                nh = B * k
                hrows = rows[:nh].reshape(B, k)
                trows = rows[nh : nh + B]
                crows = rows[nh + B :].reshape(-1, 3)
                hist = [z[hrows[:, j]] for j in range(k)]
                acts = [ag.constant(hist_chunks[:, j]) for j in range(k)]
                z_hat = model.predict_next(hist, acts)
                l_pred = prediction_loss(z_hat, z[trows])
                zc = z if config.lam > 0 else ag.stop_gradient(z)
                c = straightening_cosine(zc[crows[:, 0]], zc[crows[:, 1]], zc[crows[:, 2]], config.variant, model)
                l_curv = ag.mean(curvature_loss(c))
                total = l_pred + config.lam * l_curv if config.lam > 0 else l_pred
                opt.zero_grad()
                ag.backward(total)
            except NonFiniteError as exc:
                raise NonFiniteError(f"training diverged at epoch {epoch + 1}, step {step + 1}: {exc}") from exc
            opt.step()
            sum_pred += float(l_pred.value)
            sum_curv += float(l_curv.value)
        report.l_pred.append(sum_pred / steps)
        report.l_curv.append(sum_curv / steps)
        report.cosine.append(mean_trajectory_cosine(model, dataset, held_ids, config.variant, cfg.frameskip, k))
        report.variance.append(collapse_check(model, probe)[0] if len(probe) >= 100 else float("nan"))
        log.info(
            "epoch %d l_pred=%.6g l_curv=%.4f cos=%.4f var=%.3g",
            epoch + 1,
            report.l_pred[-1],
            report.l_curv[-1],
            report.cosine[-1],
            report.variance[-1],
        )
        if progress is not None:
            progress(epoch + 1, report)
    return model, report
