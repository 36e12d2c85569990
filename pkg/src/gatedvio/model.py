"""The gated VIO network: encoders, policy, zero-pad fusion, pose LSTM,
sequence rollout under four gating policies, and exact FLOP accounting.

Conventions (fixed, tested):
* policy output index 0 means "use the visual encoder" (d = 1), index 1
  means skip; p_t[0] is the enable probability.
* the regression head emits (phi_hat, v_hat) in that order;
* the policy consumes the top LSTM layer's previous hidden state;
* the first step of every rollout forces d = 1 regardless of mode.

During training the visual features are computed for every step and the
fused visual slot is scaled by the straight-through decision (hard value
forward, relaxed gradient), so skipped steps contribute exact zeros while
the policy still receives gradient.  During single-sequence inference the
visual encoder is skipped outright when d = 0.  FLOP totals always charge
the visual encoder only for steps where d = 1.
"""

from __future__ import annotations

from contextlib import nullcontext
from dataclasses import dataclass, field, asdict

import numpy as np

from . import gumbel
from . import tensor as T
from .nn import (Conv1dLayer, LinearLayer, LstmCell, Mlp, init_params,
                 load_checkpoint, lstm_step, save_checkpoint)
from .tensor import Tensor, record_op


@dataclass
class ModelConfig:
    visual_in: int = 64
    visual_feat: int = 64
    inertial_feat: int = 32
    hidden: int = 64
    imu_per_interval: int = 11
    visual_hidden: tuple = (256, 256, 256)
    inertial_channels: tuple = (8, 10, 12)
    inertial_kernel: int = 3
    policy_hidden: tuple = (64, 32)
    head_hidden: int = 64

    def validate(self):
        dims = [self.visual_in, self.visual_feat, self.inertial_feat, self.hidden,
                self.imu_per_interval, self.inertial_kernel, self.head_hidden,
                *self.visual_hidden, *self.inertial_channels, *self.policy_hidden]
        if any(int(d) <= 0 for d in dims):
            raise ValueError("all model dimensions must be positive")
        if len(self.inertial_channels) != 3:
            raise ValueError("inertial encoder uses exactly three conv layers")
        if len(self.policy_hidden) != 2:
            raise ValueError("policy network is a three-layer MLP (two hidden widths)")

    @property
    def fused_dim(self) -> int:
        return self.visual_feat + self.inertial_feat


class InertialEncoder:
    """Three 1-d convolutions over the [6, 11] IMU window, then a linear head."""

    def __init__(self, config: ModelConfig):
        chans = (6,) + tuple(config.inertial_channels)
        k = config.inertial_kernel
        self.convs = [Conv1dLayer(chans[i], chans[i + 1], k) for i in range(3)]
        length = config.imu_per_interval
        for conv in self.convs:
            length = conv.out_length(length)
        self.flat_dim = config.inertial_channels[-1] * length
        self.head = LinearLayer(self.flat_dim, config.inertial_feat)

    def parameters(self, prefix: str = "inertial."):
        out = []
        for i, conv in enumerate(self.convs):
            out.extend(conv.parameters(f"{prefix}conv{i}."))
        out.extend(self.head.parameters(f"{prefix}head."))
        return out

    def __call__(self, imu: Tensor) -> Tensor:
        x = imu
        for conv in self.convs:
            x = conv(x).relu()
        x = x.reshape(x.shape[0], self.flat_dim)
        return self.head(x)


class VisualEncoder:
    """Wide MLP standing in for an image-pair feature extractor.

    Width is what preserves the cost asymmetry against the inertial
    encoder (>= 20x FLOPs under the default config).
    """

    def __init__(self, config: ModelConfig):
        self.net = Mlp((config.visual_in,) + tuple(config.visual_hidden)
                       + (config.visual_feat,))

    def parameters(self, prefix: str = "visual."):
        return self.net.parameters(prefix)

    def __call__(self, x: Tensor) -> Tensor:
        return self.net(x)


class PolicyNet:
    """Three-layer MLP from (h_prev, x_inertial) to two gating logits."""

    def __init__(self, config: ModelConfig):
        dims = (config.hidden + config.inertial_feat,) + tuple(config.policy_hidden) + (2,)
        self.net = Mlp(dims)

    def parameters(self, prefix: str = "policy."):
        return self.net.parameters(prefix)

    def __call__(self, h_prev: Tensor, x_i: Tensor) -> Tensor:
        return self.net(T.concat(h_prev, x_i, axis=1))


@dataclass
class RnnState:
    h1: Tensor
    c1: Tensor
    h2: Tensor
    c2: Tensor

    @staticmethod
    def zeros(batch: int, hidden: int) -> "RnnState":
        z = lambda: Tensor(np.zeros((batch, hidden)))
        return RnnState(z(), z(), z(), z())


class PoseRnn:
    """Two stacked LSTM cells; the top hidden state feeds a two-layer head
    regressing (phi_hat, v_hat)."""

    def __init__(self, config: ModelConfig):
        h = config.hidden
        self.cell1 = LstmCell(config.fused_dim, h)
        self.cell2 = LstmCell(h, h)
        self.head1 = LinearLayer(h, config.head_hidden)
        self.head2 = LinearLayer(config.head_hidden, 6)

    def parameters(self, prefix: str = "rnn."):
        out = []
        out.extend(self.cell1.parameters(f"{prefix}cell1."))
        out.extend(self.cell2.parameters(f"{prefix}cell2."))
        out.extend(self.head1.parameters(f"{prefix}head1."))
        out.extend(self.head2.parameters(f"{prefix}head2."))
        return out

    def step(self, z: Tensor, state: RnnState):
        h1, c1 = lstm_step(self.cell1, z, state.h1, state.c1)
        h2, c2 = lstm_step(self.cell2, h1, state.h2, state.c2)
        out = self.head2(self.head1(h2).relu())
        return RnnState(h1, c1, h2, c2), out


def fuse(x_v, x_i: Tensor, d: int, visual_feat: int | None = None) -> Tensor:
    """Zero-pad fusion: [x_v ; x_i] when d = 1, [0 ; x_i] when d = 0.

    The fused width is constant in both branches.  x_v may be omitted only
    when d = 0 and visual_feat gives the zero block's width.
    """
    if d:
        if x_v is None:
            raise ValueError("fuse: d = 1 requires visual features")
        return T.concat(x_v, x_i, axis=1)
    width = x_v.shape[1] if x_v is not None else visual_feat
    if width is None:
        raise ValueError("fuse: d = 0 needs x_v or visual_feat for the zero block width")
    return T.concat(Tensor(np.zeros((x_i.shape[0], width))), x_i, axis=1)


def row_scale(x: Tensor, s: Tensor) -> Tensor:
    """Scale each row of x [B, N] by s [B, 1]; gradient reaches both."""
    data = x.data * s.data

    def backward(g, x=x, s=s):
        if x._needs_grad():
            x._add_grad(g * s.data)
        if s._needs_grad():
            s._add_grad(np.sum(g * x.data, axis=1, keepdims=True))

    return record_op(data, (x, s), backward, "row_scale")


# -- gating policies -------------------------------------------------------


@dataclass(frozen=True)
class LearnedPolicy:
    """Policy network decisions; Gumbel straight-through in training,
    Bernoulli sampling at inference."""

    tau: float = 1.0


@dataclass(frozen=True)
class BernoulliPolicy:
    p: float


@dataclass(frozen=True)
class RegularPolicy:
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"regular skipping needs n >= 1, got {self.n}")


@dataclass(frozen=True)
class AlwaysPolicy:
    pass


@dataclass(frozen=True)
class PresampledPolicy:
    """Fixed decision table [B, S] (warm-up's random gating)."""

    decisions: np.ndarray


def parse_mode(text: str):
    """CLI mode strings: learned | bernoulli:<p> | regular:<n> | always."""
    if text == "learned":
        return LearnedPolicy()
    if text == "always":
        return AlwaysPolicy()
    if text.startswith("bernoulli:"):
        return BernoulliPolicy(p=float(text.split(":", 1)[1]))
    if text.startswith("regular:"):
        return RegularPolicy(n=int(text.split(":", 1)[1]))
    raise ValueError(f"unknown mode {text!r}")


def mode_name(mode) -> str:
    if isinstance(mode, LearnedPolicy):
        return "learned"
    if isinstance(mode, BernoulliPolicy):
        return f"bernoulli:{mode.p}"
    if isinstance(mode, RegularPolicy):
        return f"regular:{mode.n}"
    if isinstance(mode, AlwaysPolicy):
        return "always"
    if isinstance(mode, PresampledPolicy):
        return "presampled"
    raise TypeError(f"not a mode: {mode!r}")


# -- rollout ----------------------------------------------------------------


@dataclass
class RolloutResult:
    decisions: np.ndarray        # [S] or [B, S] ints
    probs: np.ndarray            # same shape; P(d=1), 1.0 at the forced first step
    preds: np.ndarray            # [S, 6] or [B, S, 6] (phi_hat, v_hat)
    usage: float
    flops: int
    final_state: RnnState
    # training-mode extras (graph-bearing)
    step_outputs: list = field(default_factory=list)   # Tensor [B, 6] per step
    st_scalars: list = field(default_factory=list)     # Tensor [B, 1] per step or None


class GatedVioModel:
    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        self.inertial = InertialEncoder(config)
        self.visual = VisualEncoder(config)
        self.policy = PolicyNet(config)
        self.rnn = PoseRnn(config)

    # -- parameters ---------------------------------------------------------

    def parameters(self):
        return (self.inertial.parameters() + self.visual.parameters()
                + self.policy.parameters() + self.rnn.parameters())

    def pose_parameters(self):
        """Everything except the policy network (warm-up's trainable set)."""
        return self.inertial.parameters() + self.visual.parameters() + self.rnn.parameters()

    def init(self, rng: np.random.Generator) -> "GatedVioModel":
        for enc in (self.inertial.convs + [self.inertial.head]):
            init_params(enc, rng)
        init_params(self.visual.net, rng)
        init_params(self.policy.net, rng)
        init_params(self.rnn.cell1, rng)
        init_params(self.rnn.cell2, rng)
        init_params(self.rnn.head1, rng)
        init_params(self.rnn.head2, rng)
        return self

    def copy(self) -> "GatedVioModel":
        other = GatedVioModel(self.config)
        for (_, src), (_, dst) in zip(self.parameters(), other.parameters()):
            dst.data[...] = src.data
        return other

    # -- spec surface ---------------------------------------------------------

    def encode_inertial(self, imu: Tensor) -> Tensor:
        if imu.data.ndim != 3 or imu.shape[1] != 6 or imu.shape[2] != self.config.imu_per_interval:
            raise T.ShapeError(
                f"encode_inertial: expected [batch, 6, {self.config.imu_per_interval}], "
                f"got {imu.shape}"
            )
        return self.inertial(imu)

    def encode_visual(self, v: Tensor) -> Tensor:
        return self.visual(v)

    def policy_logits(self, h_prev: Tensor, x_i: Tensor) -> Tensor:
        return self.policy(h_prev, x_i)

    def rnn_pose_step(self, z: Tensor, state: RnnState):
        state, out = self.rnn.step(z, state)
        phi = out.slice(1, 0, 3)
        v = out.slice(1, 3, 6)
        return state, phi, v

    # -- persistence ----------------------------------------------------------

    def save(self, path: str):
        extra = {"model_config": asdict(self.config),
                 "flops": asdict(count_flops(self.config))}
        save_checkpoint(path, self.parameters(), extra)

    @classmethod
    def load(cls, path: str) -> "GatedVioModel":
        arrays, extra = load_checkpoint(path)
        raw = dict(extra["model_config"])
        for key in ("visual_hidden", "inertial_channels", "policy_hidden"):
            raw[key] = tuple(raw[key])
        model = cls(ModelConfig(**raw))
        for name, p in model.parameters():
            if name not in arrays:
                raise ValueError(f"checkpoint missing parameter {name!r}")
            if arrays[name].shape != p.data.shape:
                raise ValueError(f"checkpoint shape mismatch for {name!r}")
            p.data[...] = arrays[name]
        return model


def rollout(model: GatedVioModel, visual: np.ndarray, imu: np.ndarray, mode,
            rng: np.random.Generator | None = None, train: bool = False,
            initial_state: RnnState | None = None) -> RolloutResult:
    """Run the gated model over one sequence or one training batch.

    visual: [S, visual_in] or [B, S, visual_in]; imu likewise with
    trailing [..., 6, 11].  S >= 2.  The first step always uses the
    visual encoder.  With train=True a graph is recorded and learned-mode
    decisions use the straight-through trick at temperature mode.tau;
    otherwise learned-mode decisions sample Bernoulli(p_t).
    """
    single = visual.ndim == 2
    if single:
        visual = visual[None]
        imu = imu[None]
    b, s = visual.shape[0], visual.shape[1]
    if s < 2:
        raise ValueError(f"rollout needs at least 2 steps, got {s}")
    if isinstance(mode, PresampledPolicy) and mode.decisions.shape != (b, s):
        raise ValueError("presampled decision table shape mismatch")
    if isinstance(mode, LearnedPolicy) and rng is None and not train:
        raise ValueError("learned-mode inference needs an rng")
    if isinstance(mode, (LearnedPolicy, BernoulliPolicy)) and rng is None and train:
        raise ValueError("stochastic modes need an rng")

    cfg = model.config
    counts = count_flops(cfg)
    state = initial_state if initial_state is not None else RnnState.zeros(b, cfg.hidden)

    decisions = np.zeros((b, s), dtype=np.int64)
    probs = np.ones((b, s))
    preds = np.zeros((b, s, 6))
    step_outputs = []
    st_scalars = []
    policy_evals = 0
    with T.no_grad() if not train else nullcontext():
        for t in range(s):
            x_i = model.encode_inertial(Tensor(imu[:, t]))

            st = None
            if t == 0:
                d_row = np.ones(b, dtype=np.int64)
                p_row = np.ones(b)
            elif isinstance(mode, AlwaysPolicy):
                d_row = np.ones(b, dtype=np.int64)
                p_row = np.ones(b)
            elif isinstance(mode, RegularPolicy):
                fire = 1 if (t % mode.n) == 0 else 0
                d_row = np.full(b, fire, dtype=np.int64)
                p_row = np.full(b, float(fire))
            elif isinstance(mode, BernoulliPolicy):
                d_row = (rng.random(b) < mode.p).astype(np.int64)
                p_row = np.full(b, mode.p)
            elif isinstance(mode, PresampledPolicy):
                d_row = mode.decisions[:, t].astype(np.int64)
                p_row = d_row.astype(np.float64)
            elif isinstance(mode, LearnedPolicy):
                logits = model.policy_logits(state.h2, x_i)
                log_p = T.log_softmax(logits, axis=1)
                p_row = np.exp(log_p.data[:, 0])
                policy_evals += 1
                if train:
                    g = gumbel.sample_gumbel((b, 2), rng)
                    d_row = np.argmax(log_p.data + g, axis=1)
                    d_row = (d_row == 0).astype(np.int64)
                    relaxed = gumbel.gumbel_softmax(log_p, g, mode.tau)
                    rel_col = relaxed.slice(1, 0, 1)
                    st = rel_col - rel_col.detach() + Tensor(d_row[:, None].astype(np.float64))
                else:
                    d_row = (rng.random(b) < p_row).astype(np.int64)
            else:
                raise TypeError(f"unknown rollout mode {mode!r}")

            decisions[:, t] = d_row
            probs[:, t] = p_row

            if train:
                if st is None:
                    st = Tensor(d_row[:, None].astype(np.float64))
                x_v = model.encode_visual(Tensor(visual[:, t]))
                vis_slot = row_scale(x_v, st)
                z = T.concat(vis_slot, x_i, axis=1)
            else:
                if np.any(d_row):
                    x_v = model.encode_visual(Tensor(visual[:, t]))
                    vis_data = x_v.data * d_row[:, None]
                else:
                    vis_data = np.zeros((b, cfg.visual_feat))
                z = T.concat(Tensor(vis_data), x_i, axis=1)

            state, out = model.rnn.step(z, state)
            preds[:, t] = out.data
            if train:
                step_outputs.append(out)
                st_scalars.append(st)

    fires = int(decisions.sum())
    flops = rollout_flops(counts, b * s, fires, policy_evals=b * policy_evals)
    usage = fires / (b * s)
    if single:
        decisions, probs, preds = decisions[0], probs[0], preds[0]
    return RolloutResult(decisions=decisions, probs=probs, preds=preds, usage=usage,
                         flops=flops, final_state=state,
                         step_outputs=step_outputs, st_scalars=st_scalars)


# -- FLOP accounting ----------------------------------------------------------


@dataclass(frozen=True)
class FlopCounts:
    """Per-execution FLOPs of each component (exact integers).

    Conventions: a multiply-accumulate is 2 FLOPs; linear = 2*in*out + out;
    conv1d = 2*out_ch*in_ch*k*len' + out_ch*len'; one FLOP per activation
    element (relu/sigmoid/tanh/exp); LSTM step = 2*4H*(in+H) matmuls
    + 4H bias + 4H gate activations + 3H cell update + 2H output;
    softmax over K elements = 3K + 1.
    """

    visual: int
    inertial: int
    policy: int
    rnn_head: int

    @property
    def per_step_fixed(self) -> int:
        return self.inertial + self.policy + self.rnn_head


def _linear_flops(n_in: int, n_out: int) -> int:
    return 2 * n_in * n_out + n_out


def _mlp_flops(dims) -> int:
    total = 0
    for i in range(len(dims) - 1):
        total += _linear_flops(dims[i], dims[i + 1])
        if i < len(dims) - 2:
            total += dims[i + 1]  # relu
    return total


def _lstm_flops(n_in: int, h: int) -> int:
    return 2 * 4 * h * (n_in + h) + 4 * h + 4 * h + 3 * h + 2 * h


def count_flops(config: ModelConfig) -> FlopCounts:
    visual = _mlp_flops((config.visual_in,) + tuple(config.visual_hidden)
                        + (config.visual_feat,))

    inertial = 0
    chans = (6,) + tuple(config.inertial_channels)
    length = config.imu_per_interval
    k = config.inertial_kernel
    for i in range(3):
        out_len = length - k + 1
        inertial += 2 * chans[i + 1] * chans[i] * k * out_len + chans[i + 1] * out_len
        inertial += chans[i + 1] * out_len  # relu
        length = out_len
    inertial += _linear_flops(chans[-1] * length, config.inertial_feat)

    policy = _mlp_flops((config.hidden + config.inertial_feat,)
                        + tuple(config.policy_hidden) + (2,))
    policy += 3 * 2 + 1  # softmax over the two logits

    rnn_head = (_lstm_flops(config.fused_dim, config.hidden)
                + _lstm_flops(config.hidden, config.hidden)
                + _linear_flops(config.hidden, config.head_hidden)
                + config.head_hidden  # relu
                + _linear_flops(config.head_hidden, 6))
    return FlopCounts(visual=visual, inertial=inertial, policy=policy, rnn_head=rnn_head)


def rollout_flops(counts: FlopCounts, steps: int, fires: int, policy_evals: int) -> int:
    """Exact rollout cost: encoders and RNN every step, the policy network
    once per evaluation (steps 2..S in learned mode, never for fixed
    rules), and the visual encoder only where it fired."""
    return (steps * (counts.inertial + counts.rnn_head)
            + policy_evals * counts.policy
            + fires * counts.visual)


def gated_flops(counts: FlopCounts, usage: float) -> float:
    """Affine per-step cost model: fixed + usage * visual."""
    return counts.per_step_fixed + usage * counts.visual


def fit_affine_flops(usages, flops):
    """Least-squares affine fit flops ~ visual * usage + fixed.

    Returns (visual, fixed, max_abs_residual)."""
    u = np.asarray(usages, dtype=np.float64)
    y = np.asarray(flops, dtype=np.float64)
    a = np.stack([u, np.ones_like(u)], axis=1)
    coef, *_ = np.linalg.lstsq(a, y, rcond=None)
    resid = y - a @ coef
    return float(coef[0]), float(coef[1]), float(np.max(np.abs(resid)))
