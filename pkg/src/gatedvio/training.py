"""Losses, the two-stage training protocol, and multi-seed evaluation.

Training follows a warm-up stage (random 50% gating, pose loss only,
policy network untouched) and a joint stage (straight-through gating,
pose + efficiency loss, annealed temperature, two learning-rate steps).
Hidden state resets per training subsequence; evaluation rolls each full
sequence with continuous hidden state.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import geometry as geo
from .gumbel import TAU_DECAY, TAU_INITIAL, temperature
from .model import (AlwaysPolicy, BernoulliPolicy, GatedVioModel, LearnedPolicy,
                    PresampledPolicy, RegularPolicy, mode_name, parse_mode, rollout)
from .nn import Adam, clip_global_norm
from .simkit import Dataset
from .tensor import Tensor


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""

    def __init__(self, epoch: int, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


@dataclass
class LossConfig:
    alpha: float = 100.0   # rotation weight
    lam: float = 0.0       # per-step visual usage penalty
    seq_len: int = 11      # training subsequence length in frames

    def validate(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.seq_len < 2:
            raise ValueError("seq_len must be >= 2 frames")


@dataclass
class TrainSchedule:
    """Stage lengths and learning rates; defaults are the full-scale recipe.

    desk() is the scaled-down preset used by the CLI defaults and the
    experiment suite: same structure, fewer epochs, temperature decay
    rescaled so the anneal traverses the same range.
    """

    warmup_epochs: int = 40
    warmup_lr: float = 5e-4
    joint_epochs_a: int = 40
    joint_lr_a: float = 5e-5
    joint_epochs_b: int = 20
    joint_lr_b: float = 1e-6
    batch_size: int = 16
    tau_initial: float = TAU_INITIAL
    tau_decay: float = TAU_DECAY
    clip_norm: float = 5.0

    def validate(self):
        if min(self.warmup_epochs, self.joint_epochs_a, self.joint_epochs_b) < 0:
            raise ValueError("epoch counts must be >= 0")
        if min(self.warmup_lr, self.joint_lr_a, self.joint_lr_b) <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @classmethod
    def desk(cls) -> "TrainSchedule":
        # 60 joint epochs' worth of anneal compressed into 18
        return cls(warmup_epochs=12, joint_epochs_a=12, joint_epochs_b=6,
                   tau_decay=TAU_DECAY * 60.0 / 18.0)


# -- losses -------------------------------------------------------------------


def pose_loss(step_preds, gts: np.ndarray, alpha: float) -> Tensor:
    """Mean squared pose error over a batch of subsequences.

    step_preds: one [B, 6] tensor (phi_hat, v_hat) per step; gts [B, S, 6]
    with the same column order.  Per-sequence normalization is
    1 / (3 (T-1)); the batch is averaged.
    """
    b, s = gts.shape[0], gts.shape[1]
    if len(step_preds) != s:
        raise ValueError(f"pose_loss: {len(step_preds)} predictions for {s} steps")
    total = None
    for t, pred in enumerate(step_preds):
        diff = pred - Tensor(gts[:, t])
        sq = diff * diff
        term = sq.slice(1, 3, 6).sum() + sq.slice(1, 0, 3).sum() * alpha
        total = term if total is None else total + term
    return total * (1.0 / (3.0 * s * b))


def efficiency_loss(st_scalars, lam: float) -> Tensor:
    """Average per-step visual penalty lambda * d_t over the subsequence.

    st_scalars are the straight-through decision scalars ([B, 1], hard
    value forward), so in learned mode the penalty's gradient reaches the
    policy through the relaxed surrogate.
    """
    s = len(st_scalars)
    b = st_scalars[0].shape[0]
    total = None
    for st in st_scalars:
        term = st.sum()
        total = term if total is None else total + term
    return total * (lam / (s * b))


def joint_loss(pose_l: Tensor, eff_l: Tensor) -> Tensor:
    return pose_l + eff_l


# -- data plumbing -------------------------------------------------------------


@dataclass
class SubsequenceBank:
    """Training subsequences stacked across sequences: fixed-length windows
    of steps with zero initial hidden state."""

    visual: np.ndarray  # [N, S, visual_dim]
    imu: np.ndarray     # [N, S, 6, 11]
    gt: np.ndarray      # [N, S, 6]

    def __len__(self):
        return self.visual.shape[0]


def make_subsequences(ds: Dataset, seq_len: int) -> SubsequenceBank:
    steps = seq_len - 1
    vis, imu, gt = [], [], []
    for seq in ds.sequences:
        n_sub = seq.steps // steps
        for j in range(n_sub):
            lo = j * steps
            vis.append(seq.visual[lo : lo + steps])
            imu.append(seq.imu[lo : lo + steps])
            gt.append(seq.gt_rel[lo : lo + steps])
    if not vis:
        raise ValueError("dataset has no full training subsequence")
    return SubsequenceBank(np.stack(vis), np.stack(imu), np.stack(gt))


# -- training stages ------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    loss: float
    usage: float
    tau: float
    lr: float


def _train_epochs(model: GatedVioModel, bank: SubsequenceBank, params, lr_for_epoch,
                  mode_for_batch, lam: float, alpha: float, epochs: int,
                  batch_size: int, clip_norm: float, rng: np.random.Generator,
                  epoch_offset: int = 0, tau_for_epoch=None) -> list:
    opt = Adam(params, lr=lr_for_epoch(0))
    logs = []
    n = len(bank)
    for epoch in range(epochs):
        opt.lr = lr_for_epoch(epoch)
        tau = tau_for_epoch(epoch) if tau_for_epoch else 0.0
        order = rng.permutation(n)
        losses, usages = [], []
        for step, lo in enumerate(range(0, n, batch_size)):
            idx = order[lo : lo + batch_size]
            mode = mode_for_batch(idx, tau, rng)
            res = rollout(model, bank.visual[idx], bank.imu[idx], mode, rng=rng,
                          train=True)
            p_loss = pose_loss(res.step_outputs, bank.gt[idx], alpha)
            if lam > 0.0:
                loss = joint_loss(p_loss, efficiency_loss(res.st_scalars, lam))
            else:
                loss = p_loss
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(epoch_offset + epoch, step, value)
            opt.zero_grad()
            loss.backward()
            clip_global_norm(params, clip_norm)
            opt.step()
            losses.append(value)
            usages.append(res.usage)
        logs.append(EpochLog(epoch=epoch_offset + epoch, loss=float(np.mean(losses)),
                             usage=float(np.mean(usages)), tau=tau, lr=opt.lr))
    return logs


def warmup_train(model: GatedVioModel, train_ds: Dataset, schedule: TrainSchedule,
                 loss_cfg: LossConfig, rng: np.random.Generator) -> list:
    """Warm-up: random 50% gating, pose loss only, policy network untouched."""
    schedule.validate()
    loss_cfg.validate()
    bank = make_subsequences(train_ds, loss_cfg.seq_len)
    s = bank.gt.shape[1]

    def mode_for_batch(idx, tau, rng):
        dec = (rng.random((len(idx), s)) < 0.5).astype(np.int64)
        dec[:, 0] = 1
        return PresampledPolicy(decisions=dec)

    return _train_epochs(model, bank, model.pose_parameters(),
                         lr_for_epoch=lambda e: schedule.warmup_lr,
                         mode_for_batch=mode_for_batch, lam=0.0,
                         alpha=loss_cfg.alpha, epochs=schedule.warmup_epochs,
                         batch_size=schedule.batch_size, clip_norm=schedule.clip_norm,
                         rng=rng)


def joint_train(model: GatedVioModel, train_ds: Dataset, schedule: TrainSchedule,
                loss_cfg: LossConfig, rng: np.random.Generator,
                policy_mode="learned") -> list:
    """Joint stage: both learning-rate phases in one pass.

    policy_mode "learned" trains the policy with straight-through
    decisions; a RegularPolicy or BernoulliPolicy instance instead trains
    the pose path under that fixed rule (the baseline protocol), with the
    policy network left untouched.
    """
    schedule.validate()
    loss_cfg.validate()
    bank = make_subsequences(train_ds, loss_cfg.seq_len)
    learned = policy_mode == "learned"
    if learned:
        params = model.parameters()

        def mode_for_batch(idx, tau, rng):
            return LearnedPolicy(tau=tau)

        lam = loss_cfg.lam
    else:
        if not isinstance(policy_mode, (RegularPolicy, BernoulliPolicy, AlwaysPolicy)):
            raise TypeError(f"policy_mode must be 'learned' or a fixed rule, got {policy_mode!r}")
        params = model.pose_parameters()

        def mode_for_batch(idx, tau, rng):
            return policy_mode

        lam = 0.0  # constant penalty under a fixed rule; no gradient

    epochs_total = schedule.joint_epochs_a + schedule.joint_epochs_b

    def lr_for_epoch(e):
        return schedule.joint_lr_a if e < schedule.joint_epochs_a else schedule.joint_lr_b

    def tau_for_epoch(e):
        return temperature(e, schedule.tau_initial, schedule.tau_decay)

    return _train_epochs(model, bank, params, lr_for_epoch=lr_for_epoch,
                         mode_for_batch=mode_for_batch, lam=lam, alpha=loss_cfg.alpha,
                         epochs=epochs_total, batch_size=schedule.batch_size,
                         clip_norm=schedule.clip_norm, rng=rng,
                         tau_for_epoch=tau_for_epoch)


# -- evaluation ----------------------------------------------------------------


@dataclass
class Trace:
    sequence: str
    decisions: np.ndarray  # [S]
    probs: np.ndarray      # [S]
    preds: np.ndarray      # [S, 6]
    speed: np.ndarray      # [S]
    yaw_rate: np.ndarray   # [S]


@dataclass
class SeedResult:
    seed: int
    usage: float
    flops: int
    trans_rmse: float
    rot_rmse: float
    t_rel: float
    r_rel: float
    traces: list = field(default_factory=list)


@dataclass
class RunReport:
    mode: str
    fingerprint: str
    seed_results: list

    def _values(self, key):
        return np.array([getattr(r, key) for r in self.seed_results], dtype=np.float64)

    def mean(self, key) -> float:
        return float(np.mean(self._values(key)))

    def std(self, key) -> float:
        vals = self._values(key)
        if len(vals) < 2:
            return 0.0
        return float(np.std(vals, ddof=1))

    def to_csv(self) -> str:
        cols = ("usage", "flops", "trans_rmse", "rot_rmse", "t_rel", "r_rel")
        lines = ["mode,seed," + ",".join(cols)]
        for r in self.seed_results:
            vals = ",".join(repr(float(getattr(r, c))) for c in cols)
            lines.append(f"{self.mode},{r.seed},{vals}")
        lines.append(f"{self.mode},mean," + ",".join(repr(self.mean(c)) for c in cols))
        lines.append(f"{self.mode},std," + ",".join(repr(self.std(c)) for c in cols))
        return "\n".join(lines) + "\n"


def _eval_mode(mode):
    return parse_mode(mode) if isinstance(mode, str) else mode


def evaluate(model: GatedVioModel, test_ds: Dataset, mode, seeds) -> RunReport:
    """Per-seed rollouts over every test sequence; learned-mode inference
    samples Bernoulli(p_t).  Aggregates are means over sequences, then
    reported per seed with mean and sample std across seeds."""
    mode = _eval_mode(mode)
    results = []
    for seed in seeds:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
        fires = 0
        steps = 0
        flops = 0
        t_rmse, r_rmse, t_rels, r_rels = [], [], [], []
        traces = []
        for seq in test_ds.sequences:
            res = rollout(model, seq.visual, seq.imu, mode, rng=rng, train=False)
            fires += int(res.decisions.sum())
            steps += seq.steps
            flops += res.flops
            tr, rr = geo.rmse(res.preds, seq.gt_rel)
            t_rmse.append(tr)
            r_rmse.append(rr)
            pred_traj = geo.accumulate(seq.initial_pose(), geo.array_to_rels(res.preds))
            gt_traj = geo.Trajectory([seq.pose(i) for i in range(seq.steps + 1)])
            try:
                rel = geo.kitti_rel_errors(pred_traj, gt_traj)
                t_rels.append(rel.t_rel_pct)
                r_rels.append(rel.r_rel_deg_per_100m)
            except geo.NoSegmentsError:
                pass
            traces.append(Trace(sequence=seq.name, decisions=res.decisions,
                                probs=res.probs, preds=res.preds,
                                speed=seq.gt_speed, yaw_rate=seq.gt_yaw_rate))
        results.append(SeedResult(
            seed=int(seed),
            usage=fires / steps,
            flops=int(flops),
            trans_rmse=float(np.mean(t_rmse)),
            rot_rmse=float(np.mean(r_rmse)),
            t_rel=float(np.mean(t_rels)) if t_rels else float("nan"),
            r_rel=float(np.mean(r_rels)) if r_rels else float("nan"),
            traces=traces,
        ))
    fp = hashlib.sha256(json.dumps(
        {"model": asdict(model.config), "mode": mode_name(mode),
         "dataset_seed": test_ds.seed}, sort_keys=True).encode()).hexdigest()[:16]
    return RunReport(mode=mode_name(mode), fingerprint=fp, seed_results=results)


def save_report(report: RunReport, out_dir: str, dataset: Dataset | None = None):
    """Write report.csv, per-trace CSVs, and first-sequence predicted poses."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.csv"), "w", encoding="utf-8") as fh:
        fh.write(report.to_csv())
    tdir = os.path.join(out_dir, "traces")
    os.makedirs(tdir, exist_ok=True)
    for r in report.seed_results:
        for trace in r.traces:
            path = os.path.join(tdir, f"seed{r.seed}_{trace.sequence}.csv")
            with open(path, "w", encoding="utf-8") as fh:
                fh.write("t,p,d,speed,yaw_rate\n")
                for t in range(len(trace.decisions)):
                    fh.write(f"{t},{trace.probs[t]!r},{int(trace.decisions[t])},"
                             f"{trace.speed[t]!r},{trace.yaw_rate[t]!r}\n")
    if dataset is not None and report.seed_results:
        first = report.seed_results[0]
        by_name = {s.name: s for s in dataset.sequences}
        for i, trace in enumerate(first.traces):
            seq = by_name[trace.sequence]
            traj = geo.accumulate(seq.initial_pose(), geo.array_to_rels(trace.preds))
            name = "poses_pred.txt" if i == 0 else f"poses_pred_{trace.sequence}.txt"
            with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fh:
                fh.write(geo.write_kitti_poses(traj))
