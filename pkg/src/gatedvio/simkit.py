"""Synthetic driving trajectories with physically consistent IMU synthesis
and a visual-proxy observation channel.

Motion model: planar vehicle embedded in 3-d (z = 0, roll = pitch = 0).
Sequences alternate straight segments (speed re-targets with bounded
acceleration, zero yaw rate) and turn segments (low constant-ish speed,
yaw rate capped by the lateral-acceleration bound).  That coupling --
turns happen slowly, speed changes happen on fast stretches -- is what
gives the visual channel motion-dependent value.

Integrator: per 100 Hz tick, states advance with the mean of the two
endpoint samples (midpoint estimate).  World accelerations are defined by
the consistency recursion A[k+1] = 2 (v[k+1] - v[k]) / dt - A[k], so the
same integrator applied to the synthesized IMU stream reproduces the
ground-truth states exactly (strapdown_relpose is that oracle).

Visual proxy: a fixed per-dataset linear embedding of the true interval
relative pose (phi, v), plus isotropic Gaussian noise scaled to hit the
configured signal-to-noise ratio.  The embedding whitens components by
their dataset-wide spread so rotation and translation both register.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import Pose, RelPose, rot_to_euler

DATASET_VERSION = 1


class ConfigError(ValueError):
    """Invalid or infeasible configuration."""


@dataclass
class SimConfig:
    frame_hz: int = 10
    imu_rate_ratio: int = 10          # IMU ticks per frame interval; 11 samples inclusive
    duration_s: float = 32.0
    num_sequences: int = 10

    # motion schedule
    speed_min: float = 0.5
    speed_max: float = 16.0
    accel_max: float = 2.5            # m/s^2, longitudinal
    lat_accel_max: float = 3.0        # m/s^2, caps yaw_rate * speed
    yaw_accel_max: float = 1.2        # rad/s^2, yaw-rate ramp slope
    straight_duration_range: tuple = (4.0, 8.0)
    turn_duration_range: tuple = (2.5, 5.0)
    turn_speed_range: tuple = (1.2, 4.5)
    cruise_speed_range: tuple = (4.0, 15.5)
    retarget_interval_range: tuple = (1.5, 3.5)
    turn_prob: float = 0.75
    yaw_rate_range: tuple = (0.15, 0.68)

    # sensor model
    sigma_gyro: float = 1e-3          # rad/s
    sigma_accel: float = 1e-2         # m/s^2
    gyro_bias_bound: float = 1e-3     # rad/s, uniform per sequence
    accel_bias_bound: float = 1e-2    # m/s^2, uniform per sequence
    gravity: float = 9.81             # m/s^2 along -z

    # visual proxy
    visual_dim: int = 64
    visual_snr: float = 40.0

    def validate(self):
        if self.frame_hz <= 0 or self.imu_rate_ratio < 1:
            raise ConfigError("frame_hz and imu_rate_ratio must be positive")
        if self.duration_s <= 2.0 / self.frame_hz:
            raise ConfigError("duration too short for two frames")
        if self.num_sequences < 1:
            raise ConfigError("need at least one sequence")
        if not (0.0 <= self.speed_min <= self.speed_max):
            raise ConfigError("require 0 <= speed_min <= speed_max")
        for name in ("accel_max", "lat_accel_max", "yaw_accel_max", "gravity"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("sigma_gyro", "sigma_accel", "gyro_bias_bound", "accel_bias_bound"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.visual_dim < 6:
            raise ConfigError("visual_dim must be at least 6")
        if self.visual_snr <= 0:
            raise ConfigError("visual_snr must be positive")
        lo, hi = self.yaw_rate_range
        if not (0 < lo <= hi):
            raise ConfigError("yaw_rate_range must be positive and ordered")
        # a turn must admit some feasible (speed, yaw-rate) pair
        if lo * self.turn_speed_range[0] > self.lat_accel_max:
            raise ConfigError(
                "infeasible turn schedule: min yaw rate at min turn speed exceeds "
                f"the lateral acceleration bound {self.lat_accel_max}"
            )

    @property
    def imu_dt(self) -> float:
        return 1.0 / (self.frame_hz * self.imu_rate_ratio)

    @property
    def samples_per_interval(self) -> int:
        return self.imu_rate_ratio + 1


@dataclass
class DenseStates:
    """Ground-truth 100 Hz states for one sequence."""

    dt: float
    pos: np.ndarray          # [K, 3]
    vel: np.ndarray          # [K, 3]
    yaw: np.ndarray          # [K]
    speed: np.ndarray        # [K]
    omega: np.ndarray        # [K], signed yaw rate
    accel_world: np.ndarray  # [K, 3], integrator-consistent

    @property
    def n_ticks(self) -> int:
        return len(self.yaw)

    def rotation(self, k: int) -> np.ndarray:
        c, s = np.cos(self.yaw[k]), np.sin(self.yaw[k])
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Sample:
    """Per-timestep training record."""

    visual_proxy: np.ndarray  # [visual_dim]
    imu_window: np.ndarray    # [6, 11]: gyro xyz rad/s, accel xyz m/s^2, body frame
    gt_rel: RelPose
    gt_speed: float
    gt_yaw_rate: float


@dataclass
class SequenceData:
    name: str
    frame_poses: np.ndarray   # [F, 3, 4] row-major [R|t] at frame times
    imu: np.ndarray           # [F-1, 6, 11]
    visual: np.ndarray        # [F-1, visual_dim]
    gt_rel: np.ndarray        # [F-1, 6] columns (phi, v)
    gt_speed: np.ndarray      # [F-1], interval-mean speed
    gt_yaw_rate: np.ndarray   # [F-1], interval-mean signed yaw rate
    gyro_bias: np.ndarray     # [3]
    accel_bias: np.ndarray    # [3]

    @property
    def steps(self) -> int:
        return self.gt_rel.shape[0]

    def initial_pose(self) -> Pose:
        m = self.frame_poses[0]
        return Pose(rotation=m[:, :3].copy(), translation=m[:, 3].copy())

    def pose(self, i: int) -> Pose:
        m = self.frame_poses[i]
        return Pose(rotation=m[:, :3].copy(), translation=m[:, 3].copy())

    def sample(self, t: int) -> Sample:
        return Sample(
            visual_proxy=self.visual[t],
            imu_window=self.imu[t],
            gt_rel=RelPose.from_vector(self.gt_rel[t]),
            gt_speed=float(self.gt_speed[t]),
            gt_yaw_rate=float(self.gt_yaw_rate[t]),
        )


@dataclass
class Dataset:
    config: SimConfig
    seed: int
    embedding: np.ndarray  # [visual_dim, 6]
    sigma_v: float
    sequences: list

    @property
    def visual_dim(self) -> int:
        return self.embedding.shape[0]


# -- trajectory generation -----------------------------------------------------


def _plan_segments(config: SimConfig, rng: np.random.Generator):
    """(kind, duration, params) tuples covering the configured duration."""
    segments = []
    t = 0.0
    prev_turn_sign = 1.0
    # always start on a straight so speed is established before any turn
    force_straight = True
    while t < config.duration_s:
        if force_straight or rng.random() > config.turn_prob:
            dur = rng.uniform(*config.straight_duration_range)
            segments.append(("straight", dur, {}))
            force_straight = False
        else:
            dur = rng.uniform(*config.turn_duration_range)
            u_target = rng.uniform(*config.turn_speed_range)
            w_hi = min(config.yaw_rate_range[1], config.lat_accel_max / u_target)
            if w_hi < config.yaw_rate_range[0]:
                raise ConfigError(
                    f"infeasible turn: speed {u_target:.2f} admits no yaw rate in "
                    f"{config.yaw_rate_range}"
                )
            w_target = rng.uniform(config.yaw_rate_range[0], w_hi)
            prev_turn_sign = -prev_turn_sign if rng.random() < 0.5 else prev_turn_sign
            segments.append(("turn", dur, {"speed": u_target,
                                           "yaw_rate": prev_turn_sign * w_target}))
            force_straight = True
        t += dur
    return segments


def _build_profiles(config: SimConfig, rng: np.random.Generator, n_ticks: int):
    """Tick-level speed and yaw-rate profiles from a random segment plan."""
    dt = config.imu_dt
    segments = _plan_segments(config, rng)

    u = np.zeros(n_ticks)
    w = np.zeros(n_ticks)
    u[0] = np.clip(rng.uniform(3.0, 10.0), config.speed_min, config.speed_max)

    seg_idx = 0
    seg_end_t = segments[0][1]
    retarget_at = rng.uniform(*config.retarget_interval_range)
    u_target = rng.uniform(*config.cruise_speed_range)
    for k in range(n_ticks - 1):
        t = k * dt
        while t >= seg_end_t and seg_idx + 1 < len(segments):
            seg_idx += 1
            seg_end_t += segments[seg_idx][1]
            if segments[seg_idx][0] == "straight":
                u_target = rng.uniform(*config.cruise_speed_range)
                retarget_at = t + rng.uniform(*config.retarget_interval_range)
        kind, _, params = segments[seg_idx]
        if kind == "straight":
            if t >= retarget_at:
                u_target = rng.uniform(*config.cruise_speed_range)
                retarget_at = t + rng.uniform(*config.retarget_interval_range)
            w_target = 0.0
        else:
            u_target = params["speed"]
            w_target = params["yaw_rate"]
        # lateral-acceleration cap, applied pointwise while speed settles
        w_cap = config.lat_accel_max / max(u[k], 0.2)
        w_eff = np.sign(w_target) * min(abs(w_target), w_cap)

        du = np.clip((u_target - u[k]) / dt, -config.accel_max, config.accel_max)
        u[k + 1] = np.clip(u[k] + dt * du, config.speed_min, config.speed_max)
        dw = np.clip((w_eff - w[k]) / dt, -config.yaw_accel_max, config.yaw_accel_max)
        w[k + 1] = w[k] + dt * dw
    return u, w


def generate_trajectory(config: SimConfig, rng: np.random.Generator) -> DenseStates:
    """Dense 100 Hz ground-truth states, exactly consistent with the
    endpoint-averaged integrator.

    Yaw integrates the yaw-rate profile; world acceleration is the
    analytic planar expression du * heading + u * omega * normal evaluated
    on the profiles; velocity and position then integrate acceleration
    with the same endpoint-averaged rule the strapdown oracle uses, which
    is what makes noiseless IMU windows recover the ground truth exactly.
    The commanded speed profile and ||vel|| agree to integration accuracy.
    """
    config.validate()
    n_intervals = int(round(config.duration_s * config.frame_hz))
    n_ticks = n_intervals * config.imu_rate_ratio + 1
    dt = config.imu_dt

    u, w = _build_profiles(config, rng, n_ticks)

    yaw = np.zeros(n_ticks)
    yaw[0] = rng.uniform(-np.pi, np.pi)
    for k in range(n_ticks - 1):
        yaw[k + 1] = yaw[k] + dt * (w[k] + w[k + 1]) / 2.0

    du = np.gradient(u, dt)
    c, s = np.cos(yaw), np.sin(yaw)
    accel = np.zeros((n_ticks, 3))
    accel[:, 0] = du * c - u * w * s
    accel[:, 1] = du * s + u * w * c

    vel = np.zeros((n_ticks, 3))
    vel[0, 0] = u[0] * c[0]
    vel[0, 1] = u[0] * s[0]
    for k in range(n_ticks - 1):
        vel[k + 1] = vel[k] + dt * (accel[k] + accel[k + 1]) / 2.0

    pos = np.zeros((n_ticks, 3))
    for k in range(n_ticks - 1):
        pos[k + 1] = pos[k] + dt * (vel[k] + vel[k + 1]) / 2.0

    speed = np.linalg.norm(vel[:, :2], axis=1)
    return DenseStates(dt=dt, pos=pos, vel=vel, yaw=yaw, speed=speed, omega=w,
                       accel_world=accel)


def specific_force_body(states: DenseStates, gravity: float) -> np.ndarray:
    """Accelerometer truth: R^T (a_world - g_world), g_world = (0, 0, -gravity)."""
    g_world = np.array([0.0, 0.0, -gravity])
    rel = states.accel_world - g_world
    c, s = np.cos(states.yaw), np.sin(states.yaw)
    out = np.zeros_like(rel)
    out[:, 0] = c * rel[:, 0] + s * rel[:, 1]
    out[:, 1] = -s * rel[:, 0] + c * rel[:, 1]
    out[:, 2] = rel[:, 2]
    return out


def synthesize_imu(states: DenseStates, config: SimConfig, rng: np.random.Generator):
    """Noisy body-frame IMU windows, one [6, 11] block per frame interval.

    Window endpoints are shared with neighbors: dense sample t*ratio is the
    last sample of window t-1 and the first of window t, so each dense
    sample draws its noise exactly once.  Returns (windows, gyro_bias,
    accel_bias); biases are random constants per sequence.
    """
    k = states.n_ticks
    gyro_true = np.zeros((k, 3))
    gyro_true[:, 2] = states.omega
    accel_true = specific_force_body(states, config.gravity)

    gyro_bias = rng.uniform(-config.gyro_bias_bound, config.gyro_bias_bound, 3)
    accel_bias = rng.uniform(-config.accel_bias_bound, config.accel_bias_bound, 3)
    gyro = gyro_true + gyro_bias + rng.normal(0.0, config.sigma_gyro, (k, 3))
    accel = accel_true + accel_bias + rng.normal(0.0, config.sigma_accel, (k, 3))

    ratio = config.imu_rate_ratio
    n_intervals = (k - 1) // ratio
    windows = np.zeros((n_intervals, 6, ratio + 1))
    for i in range(n_intervals):
        lo = i * ratio
        windows[i, :3] = gyro[lo : lo + ratio + 1].T
        windows[i, 3:] = accel[lo : lo + ratio + 1].T
    return windows, gyro_bias, accel_bias


def _frame_indices(states: DenseStates, ratio: int) -> np.ndarray:
    return np.arange(0, states.n_ticks, ratio)


def frame_relposes(states: DenseStates, ratio: int):
    """Ground-truth [R|t] frame poses and per-interval relative poses."""
    idx = _frame_indices(states, ratio)
    f = len(idx)
    poses = np.zeros((f, 3, 4))
    for j, k in enumerate(idx):
        poses[j, :, :3] = states.rotation(k)
        poses[j, :, 3] = states.pos[k]
    rels = np.zeros((f - 1, 6))
    for j in range(f - 1):
        ra, rb = poses[j, :, :3], poses[j + 1, :, :3]
        r_rel = ra.T @ rb
        rels[j, :3] = rot_to_euler(r_rel)
        rels[j, 3:] = ra.T @ (poses[j + 1, :, 3] - poses[j, :, 3])
    return poses, rels


def make_embedding(rels_all: np.ndarray, visual_dim: int, rng: np.random.Generator):
    """Whitened random linear embedding [visual_dim, 6] of relative poses.

    Orthonormal-column basis from a seeded Gaussian draw, columns scaled by
    the reciprocal spread of each pose component; components with no spread
    (identically zero under planar motion) are dropped to zero weight.
    """
    q, _ = np.linalg.qr(rng.normal(0.0, 1.0, (visual_dim, 6)))
    std = np.std(rels_all, axis=0)
    scale = np.where(std > 1e-9, 1.0 / np.maximum(std, 1e-9), 0.0)
    return q * scale[None, :]


def synthesize_visual(rels: np.ndarray, embedding: np.ndarray, sigma_v: float,
                      rng: np.random.Generator) -> np.ndarray:
    return rels @ embedding.T + rng.normal(0.0, sigma_v, (rels.shape[0], embedding.shape[0]))


def generate_dataset(config: SimConfig, seed: int) -> Dataset:
    """Deterministic dataset from (seed, config)."""
    config.validate()
    root = np.random.SeedSequence(seed)
    seq_seeds = root.spawn(config.num_sequences)
    (embed_seed,) = root.spawn(1)
    vis_seeds = root.spawn(config.num_sequences)

    per_seq = []
    for s in range(config.num_sequences):
        rng = np.random.Generator(np.random.PCG64(seq_seeds[s]))
        states = generate_trajectory(config, rng)
        imu, gyro_bias, accel_bias = synthesize_imu(states, config, rng)
        poses, rels = frame_relposes(states, config.imu_rate_ratio)
        idx = _frame_indices(states, config.imu_rate_ratio)
        n_iv = len(idx) - 1
        speed = np.zeros(n_iv)
        yaw_rate = np.zeros(n_iv)
        for i in range(n_iv):
            lo, hi = idx[i], idx[i + 1]
            speed[i] = np.mean(states.speed[lo : hi + 1])
            yaw_rate[i] = np.mean(states.omega[lo : hi + 1])
        per_seq.append((states, imu, gyro_bias, accel_bias, poses, rels, speed, yaw_rate))

    rels_all = np.concatenate([p[5] for p in per_seq], axis=0)
    embed_rng = np.random.Generator(np.random.PCG64(embed_seed))
    embedding = make_embedding(rels_all, config.visual_dim, embed_rng)
    signal_rms = float(np.sqrt(np.mean(np.sum((rels_all @ embedding.T) ** 2, axis=1))))
    sigma_v = signal_rms / config.visual_snr

    sequences = []
    for s, (states, imu, gyro_bias, accel_bias, poses, rels, speed, yaw_rate) in enumerate(per_seq):
        vis_rng = np.random.Generator(np.random.PCG64(vis_seeds[s]))
        visual = synthesize_visual(rels, embedding, sigma_v, vis_rng)
        sequences.append(SequenceData(
            name=f"seq{s:02d}",
            frame_poses=poses,
            imu=imu,
            visual=visual,
            gt_rel=rels,
            gt_speed=speed,
            gt_yaw_rate=yaw_rate,
            gyro_bias=gyro_bias,
            accel_bias=accel_bias,
        ))
    return Dataset(config=config, seed=seed, embedding=embedding, sigma_v=sigma_v,
                   sequences=sequences)


def split_dataset(ds: Dataset, train_fraction: float = 0.7):
    """Train/test split by whole sequences (first block trains)."""
    n = len(ds.sequences)
    n_train = int(round(train_fraction * n))
    n_train = min(max(n_train, 1), n - 1)
    train = Dataset(config=ds.config, seed=ds.seed, embedding=ds.embedding,
                    sigma_v=ds.sigma_v, sequences=ds.sequences[:n_train])
    test = Dataset(config=ds.config, seed=ds.seed, embedding=ds.embedding,
                   sigma_v=ds.sigma_v, sequences=ds.sequences[n_train:])
    return train, test


# -- strapdown oracle ----------------------------------------------------------


def _skew_exp(w: np.ndarray) -> np.ndarray:
    """Rotation matrix exp([w]_x) via Rodrigues."""
    theta = float(np.linalg.norm(w))
    if theta < 1e-14:
        return np.eye(3)
    a = w / theta
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def strapdown_relpose(window: np.ndarray, v0_body: np.ndarray, dt: float,
                      gravity: float = 9.81) -> RelPose:
    """Integrate one IMU window back to the interval's relative pose.

    Works in the interval's start body frame: rotation from gyro with
    endpoint-averaged increments, then velocity and position by the same
    endpoint-averaged rule the generator uses.  v0_body is the initial
    velocity expressed in the start body frame.
    """
    gyro = window[:3].T
    accel = window[3:].T
    n = gyro.shape[0]
    g_local = np.array([0.0, 0.0, -gravity])

    rots = [np.eye(3)]
    for j in range(n - 1):
        w_mid = (gyro[j] + gyro[j + 1]) / 2.0
        rots.append(rots[-1] @ _skew_exp(dt * w_mid))

    acc_local = np.stack([rots[j] @ accel[j] + g_local for j in range(n)])
    v = np.asarray(v0_body, dtype=np.float64).copy()
    p = np.zeros(3)
    for j in range(n - 1):
        v_next = v + dt * (acc_local[j] + acc_local[j + 1]) / 2.0
        p = p + dt * (v + v_next) / 2.0
        v = v_next
    return RelPose(phi=rot_to_euler(rots[-1]), v=p)


# -- dataset archive -----------------------------------------------------------


def _write_array(path: str, arr: np.ndarray) -> dict:
    raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(raw)
    return {"file": os.path.basename(path), "shape": list(arr.shape),
            "sha256": hashlib.sha256(raw).hexdigest()}


def _read_array(dirpath: str, entry: dict) -> np.ndarray:
    path = os.path.join(dirpath, entry["file"])
    shape = tuple(entry["shape"])
    count = int(np.prod(shape)) if shape else 1
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) != 8 * count:
        raise ValueError(f"truncated array {entry['file']!r}: "
                         f"{len(raw)} bytes, expected {8 * count}")
    if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
        raise ValueError(f"checksum mismatch for array {entry['file']!r}")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()


_SEQ_ARRAY_KEYS = ("frame_poses", "imu", "visual", "gt_rel", "gt_speed", "gt_yaw_rate")


def export_dataset(ds: Dataset, path: str):
    """Write a dataset directory: manifest.json + checksummed raw arrays."""
    os.makedirs(path, exist_ok=True)
    manifest = {
        "version": DATASET_VERSION,
        "seed": ds.seed,
        "sigma_v": ds.sigma_v,
        "config": asdict(ds.config),
        "embedding": _write_array(os.path.join(path, "embedding.bin"), ds.embedding),
        "sequences": [],
    }
    for seq in ds.sequences:
        entry = {
            "name": seq.name,
            "gyro_bias": [float(x) for x in seq.gyro_bias],
            "accel_bias": [float(x) for x in seq.accel_bias],
            "arrays": {},
        }
        for key in _SEQ_ARRAY_KEYS:
            fname = f"{seq.name}_{key}.bin"
            entry["arrays"][key] = _write_array(os.path.join(path, fname),
                                                getattr(seq, key))
        manifest["sequences"].append(entry)
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)


def config_from_dict(d: dict) -> SimConfig:
    known = {f.name for f in SimConfig.__dataclass_fields__.values()}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown sim config keys: {sorted(unknown)}")
    kwargs = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}
    cfg = SimConfig(**kwargs)
    cfg.validate()
    return cfg


def load_dataset(path: str) -> Dataset:
    with open(os.path.join(path, "manifest.json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("version") != DATASET_VERSION:
        raise ValueError(f"unsupported dataset version {manifest.get('version')!r}")
    config = config_from_dict(manifest["config"])
    embedding = _read_array(path, manifest["embedding"])
    sequences = []
    for entry in manifest["sequences"]:
        arrays = {key: _read_array(path, entry["arrays"][key]) for key in _SEQ_ARRAY_KEYS}
        sequences.append(SequenceData(
            name=entry["name"],
            gyro_bias=np.array(entry["gyro_bias"]),
            accel_bias=np.array(entry["accel_bias"]),
            **arrays,
        ))
    return Dataset(config=config, seed=int(manifest["seed"]),
                   embedding=embedding, sigma_v=float(manifest["sigma_v"]),
                   sequences=sequences)
