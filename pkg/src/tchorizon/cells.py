"""ConvLSTM variants, causal temporal convolutions and the horizon network.

Gate kernels are stored separately (``W_xi``, ``W_hi``, ...) so checkpoints
name every matrix of the cell equations.  Within a step the input-side and
hidden-side kernels of the four gates are concatenated and applied as one
convolution each, which is the same sum.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import nn
from .errors import ShapeMismatch
from .nn import Parameter, Tensor

GATES = ("i", "f", "o", "c")
CELL_VARIANTS = ("standard", "naive_residual", "residual_dense")
NET_VARIANTS = CELL_VARIANTS + ("disabled", "tcn")


@dataclass
class ConvLstmState:
    H: Tensor
    C: Tensor

    def __post_init__(self):
        if self.H.shape != self.C.shape:
            raise ShapeMismatch(f"hidden {self.H.shape} vs cell {self.C.shape}")

    @classmethod
    def zeros(cls, shape: Sequence[int]) -> ConvLstmState:
        return cls(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))


def _gates(w: Mapping[str, Tensor], x: Tensor, h: Tensor):
    hidden = w["b_i"].shape[0]
    wx = nn.concat([w[f"W_x{g}"] for g in GATES], axis=0)
    wh = nn.concat([w[f"W_h{g}"] for g in GATES], axis=0)
    b = nn.concat([w[f"b_{g}"] for g in GATES], axis=0)
    z = nn.add(nn.conv2d(x, wx, b), nn.conv2d(h, wh))
    parts = [nn.slice_axis(z, -3, k * hidden, (k + 1) * hidden) for k in range(4)]
    i, f, o = (nn.sigmoid(p) for p in parts[:3])
    return i, f, o, nn.tanh(parts[3])


def convlstm_step(weights: Mapping[str, Tensor], x, prev: ConvLstmState):
    """Standard ConvLSTM step; the output is the new hidden state."""
    x = nn.as_tensor(x)
    i, f, o, g = _gates(weights, x, prev.H)
    c = nn.add(nn.hadamard(f, prev.C), nn.hadamard(i, g))
    h = nn.hadamard(o, nn.tanh(c))
    return h, ConvLstmState(h, c)


def naive_residual_step(weights: Mapping[str, Tensor], x, prev: ConvLstmState):
    """Standard step followed by ``Y = H + X``."""
    x = nn.as_tensor(x)
    if x.shape != prev.H.shape:
        raise ShapeMismatch(f"residual needs equal input/hidden shapes: {x.shape} vs {prev.H.shape}")
    h, state = convlstm_step(weights, x, prev)
    return nn.add(h, x), state


def residual_convlstm_step(weights: Mapping[str, Tensor], x, prev: ConvLstmState):
    """Residual ConvLSTM step with a dense output convolution.

    The output gate masks the cell state before the squashing nonlinearity
    (``Hhat = o * C``, ``H = tanh(Hhat)``), a dense convolution over
    ``[X, H_prev, Hhat]`` forms ``Yhat``, and ``Y = tanh(Yhat + X)``.
    """
    x = nn.as_tensor(x)
    if weights["W_xy"].shape[0] != x.shape[-3]:
        raise ShapeMismatch("output channels of the dense convolution must match the input")
    i, f, o, g = _gates(weights, x, prev.H)
    c = nn.add(nn.hadamard(f, prev.C), nn.hadamard(i, g))
    h_hat = nn.hadamard(o, c)
    h = nn.tanh(h_hat)
    y_hat = nn.add(nn.add(nn.conv2d(x, weights["W_xy"]), nn.conv2d(prev.H, weights["W_hy"])),
                   nn.conv2d(h_hat, weights["W_hhaty"]))
    y = nn.tanh(nn.add(y_hat, x))
    return y, ConvLstmState(h, c)


_STEP = {
    "standard": convlstm_step,
    "naive_residual": naive_residual_step,
    "residual_dense": residual_convlstm_step,
}


def init_convlstm_weights(rng: np.random.Generator, in_channels: int, hidden: int,
                          kernel: int = 3, variant: str = "residual_dense",
                          prefix: str = "") -> dict[str, Parameter]:
    """Uniform(+-sqrt(1/fan_in)) kernels, zero biases except forget bias 1."""
    if variant not in CELL_VARIANTS:
        raise ValueError(f"unknown cell variant {variant!r}")
    if variant != "standard" and in_channels != hidden:
        raise ShapeMismatch("residual cells need equal input and hidden channels")
    w = {}
    for g in GATES:
        w[f"W_x{g}"] = nn.init_uniform(rng, (hidden, in_channels, kernel, kernel),
                                       in_channels * kernel * kernel, f"{prefix}W_x{g}")
        w[f"W_h{g}"] = nn.init_uniform(rng, (hidden, hidden, kernel, kernel),
                                       hidden * kernel * kernel, f"{prefix}W_h{g}")
        w[f"b_{g}"] = Parameter(np.full(hidden, 1.0 if g == "f" else 0.0), f"{prefix}b_{g}")
    if variant == "residual_dense":
        for src, ch in (("x", in_channels), ("h", hidden), ("hhat", hidden)):
            w[f"W_{src}y"] = nn.init_uniform(rng, (in_channels, ch, kernel, kernel),
                                             ch * kernel * kernel, f"{prefix}W_{src}y")
    return w


class ConvLSTMCell:
    def __init__(self, weights: Mapping[str, Tensor], variant: str = "residual_dense"):
        if variant not in CELL_VARIANTS:
            raise ValueError(f"unknown cell variant {variant!r}")
        self.weights = dict(weights)
        self.variant = variant

    @classmethod
    def create(cls, rng, in_channels, hidden, kernel=3, variant="residual_dense", prefix=""):
        return cls(init_convlstm_weights(rng, in_channels, hidden, kernel, variant, prefix), variant)

    @property
    def hidden(self) -> int:
        return self.weights["b_i"].shape[0]

    def initial_state(self, x: Tensor) -> ConvLstmState:
        shape = (*x.shape[:-3], self.hidden, *x.shape[-2:])
        return ConvLstmState.zeros(shape)

    def step(self, x, state: ConvLstmState | None = None):
        x = nn.as_tensor(x)
        if state is None:
            state = self.initial_state(x)
        return _STEP[self.variant](self.weights, x, state)


# -- temporal convolutions -------------------------------------------------------

@dataclass(frozen=True)
class TcnConfig:
    lengths: tuple[int, ...]

    def __post_init__(self):
        if not self.lengths or any(m < 1 for m in self.lengths):
            raise ValueError(f"temporal lengths must be >= 1, got {self.lengths}")

    @property
    def field_of_view(self) -> int:
        return tcn_field_of_view(self)


def tcn_field_of_view(config: TcnConfig | Sequence[int]) -> int:
    """Frames seen by a stack of causal layers: ``1 - L + sum(M_l)``."""
    lengths = config.lengths if isinstance(config, TcnConfig) else tuple(config)
    return 1 - len(lengths) + sum(lengths)


def tcn_causal_conv(kernel, bias, frames: Sequence) -> list[Tensor]:
    """Causal convolution over time: ``Y_t = sum_m H_m * X_{t-m+1}``.

    ``kernel`` is ``[M, D, C, A, B]`` (tap ``m`` is a ``[D, C, A, B]`` conv
    kernel).  Frames before the start are replaced by the first frame.
    """
    kernel = nn.as_tensor(kernel)
    frames = [nn.as_tensor(f) for f in frames]
    if kernel.ndim != 5:
        raise ShapeMismatch(f"temporal kernel must be [M, D, C, A, B], got {kernel.shape}")
    taps = [nn.select(kernel, 0, m) for m in range(kernel.shape[0])]
    out = []
    for t in range(len(frames)):
        acc = nn.conv2d(frames[t], taps[0], bias)
        for m in range(1, len(taps)):
            acc = nn.add(acc, nn.conv2d(frames[max(t - m, 0)], taps[m]))
        out.append(acc)
    return out


def init_tcn_weights(rng, in_channels: int, out_channels: int, length: int,
                     kernel: int = 3, prefix: str = "") -> dict[str, Parameter]:
    fan_in = length * in_channels * kernel * kernel
    return {
        "H": nn.init_uniform(rng, (length, out_channels, in_channels, kernel, kernel), fan_in,
                             f"{prefix}H"),
        "b": Parameter(np.zeros(out_channels), f"{prefix}b"),
    }


# -- network ---------------------------------------------------------------------

@dataclass
class HorizonNetConfig:
    """Backbone stages ``(channels, stride)``, recurrent stage, two scalar heads.

    ``cell`` is one of ``standard``, ``naive_residual``, ``residual_dense``,
    ``disabled`` (residual_dense with states reset every frame) or ``tcn``.
    """

    in_channels: int = 1
    stages: list[tuple[int, int]] = field(default_factory=lambda: [(16, 2), (32, 2), (64, 2)])
    cell: str = "residual_dense"
    lstm_layers: int = 2
    kernel_size: int = 3
    tcn_lengths: tuple[int, ...] = (3, 3)

    def __post_init__(self):
        self.stages = [tuple(s) for s in self.stages]
        self.tcn_lengths = tuple(self.tcn_lengths)
        if self.cell not in NET_VARIANTS:
            raise ValueError(f"unknown cell variant {self.cell!r}")
        if not self.stages:
            raise ValueError("at least one backbone stage is required")

    @property
    def temporal(self) -> bool:
        return self.cell != "disabled"

    @property
    def lstm_variant(self) -> str | None:
        if self.cell == "tcn":
            return None
        return "residual_dense" if self.cell == "disabled" else self.cell

    @property
    def context_frames(self) -> int:
        """Leading frames a training window needs for full temporal context."""
        return tcn_field_of_view(self.tcn_lengths) - 1 if self.cell == "tcn" else 0

    def to_json(self) -> dict:
        d = asdict(self)
        d["stages"] = [list(s) for s in self.stages]
        d["tcn_lengths"] = list(self.tcn_lengths)
        return d

    @classmethod
    def from_json(cls, doc: Mapping) -> HorizonNetConfig:
        return cls(**doc)


class HorizonNet:
    """Conv backbone, two recurrent (or causal temporal) layers, pooled scalar heads.

    The offset head regresses ``omega / H`` (offset in image heights); the
    slope head regresses ``theta`` in radians.
    """

    def __init__(self, config: HorizonNetConfig, params: Mapping[str, Parameter]):
        self.config = config
        self.params = dict(params)

    @classmethod
    def create(cls, config: HorizonNetConfig, seed: int = 0) -> HorizonNet:
        rng = np.random.default_rng(seed)
        k = config.kernel_size
        params: dict[str, Parameter] = {}
        ch = config.in_channels
        for s, (out_ch, _) in enumerate(config.stages):
            params[f"stage{s}.W"] = nn.init_uniform(rng, (out_ch, ch, k, k), ch * k * k, f"stage{s}.W")
            params[f"stage{s}.b"] = Parameter(np.zeros(out_ch), f"stage{s}.b")
            ch = out_ch
        if config.cell == "tcn":
            for layer, m in enumerate(config.tcn_lengths):
                w = init_tcn_weights(rng, ch, ch, m, k, prefix=f"tcn{layer}.")
                params.update({f"tcn{layer}.{n}": p for n, p in w.items()})
        else:
            for layer in range(config.lstm_layers):
                w = init_convlstm_weights(rng, ch, ch, k, config.lstm_variant, prefix=f"lstm{layer}.")
                params.update({f"lstm{layer}.{n}": p for n, p in w.items()})
        for head in ("omega", "theta"):
            params[f"head_{head}.W"] = nn.init_uniform(rng, (1, ch), ch, f"head_{head}.W")
            params[f"head_{head}.b"] = Parameter(np.zeros(1), f"head_{head}.b")
        return cls(config, params)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, arrays: Mapping[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(arrays)
        if missing:
            raise ValueError(f"checkpoint keys differ: {sorted(missing)}")
        for k, p in self.params.items():
            a = np.asarray(arrays[k], dtype=np.float64)
            if a.shape != p.shape:
                raise ShapeMismatch(f"{k}: checkpoint {a.shape} vs model {p.shape}")
            p.data[...] = a

    def _layer_weights(self, layer: int) -> dict[str, Parameter]:
        prefix = f"lstm{layer}."
        return {k[len(prefix):]: p for k, p in self.params.items() if k.startswith(prefix)}

    def backbone(self, frames: np.ndarray) -> Tensor:
        """Per-frame features for ``[N, C, H, W]`` input."""
        x = Tensor(frames)
        for s, (_, stride) in enumerate(self.config.stages):
            x = nn.relu(nn.conv2d(x, self.params[f"stage{s}.W"], self.params[f"stage{s}.b"], stride))
        return x

    def temporal_stage(self, seq: list[Tensor]) -> list[Tensor]:
        cfg = self.config
        if cfg.cell == "tcn":
            for layer in range(len(cfg.tcn_lengths)):
                p = self.params
                seq = [nn.relu(y) for y in
                       tcn_causal_conv(p[f"tcn{layer}.H"], p[f"tcn{layer}.b"], seq)]
            return seq
        for layer in range(cfg.lstm_layers):
            cell = ConvLSTMCell(self._layer_weights(layer), cfg.lstm_variant)
            state = None
            out = []
            for x in seq:
                if not cfg.temporal:
                    state = None
                y, state = cell.step(x, state)
                out.append(y)
            seq = out
        return seq

    def forward(self, frames) -> tuple[Tensor, Tensor]:
        """Run ``[B, T, C, H, W]`` (or ``[T, C, H, W]``) frames; returns ``(omega/H, theta)``.

        Outputs have shape ``[B, T]`` (or ``[T]``).  States start at zero for
        every sequence.
        """
        frames = np.asarray(frames, dtype=np.float64)
        single = frames.ndim == 4
        if single:
            frames = frames[None]
        if frames.ndim != 5 or frames.shape[2] != self.config.in_channels:
            raise ShapeMismatch(f"expected [B, T, {self.config.in_channels}, H, W], got {frames.shape}")
        b, t = frames.shape[:2]
        feats = self.backbone(frames.reshape(b * t, *frames.shape[2:]))
        feats = nn.reshape(feats, (b, t, *feats.shape[1:]))
        seq = [nn.select(feats, 1, k) for k in range(t)]
        seq = self.temporal_stage(seq)
        pooled = nn.global_avg_pool(nn.stack(seq, axis=1))
        omega = nn.fully_connected(pooled, self.params["head_omega.W"], self.params["head_omega.b"])
        theta = nn.fully_connected(pooled, self.params["head_theta.W"], self.params["head_theta.b"])
        if single:
            omega, theta = nn.select(omega, 0, 0), nn.select(theta, 0, 0)
        return omega, theta

    def predict(self, frames, height: float) -> tuple[np.ndarray, np.ndarray]:
        """Offsets in pixels and slopes in radians, without recording gradients."""
        omega, theta = self.forward(frames)
        return omega.data * height, theta.data.copy()


def horizon_net_forward(config: HorizonNetConfig, weights: Mapping[str, Parameter], frames):
    return HorizonNet(config, weights).forward(frames)


def save_config(config: HorizonNetConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(config.to_json(), fh, indent=2)
