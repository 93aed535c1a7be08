"""Parameterized building blocks: ConvLSTM cell, residual units, the flow
feature extractor, the external-factor encoder and Xavier initialization."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHANNELS = 16
EXT_HIDDEN = 256
GATES = ("i", "f", "o", "g")


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def xavier_init(shape, fan_in: int, fan_out: int, seed=None, name: str | None = None) -> Tensor:
    """Glorot-uniform draw on ``[-sqrt(6/(fan_in+fan_out)), +sqrt(...)]``.

    ``seed`` may be an int or an existing ``numpy.random.Generator``.
    """
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError("fan_in and fan_out must be positive")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return T.parameter(_rng(seed).uniform(-bound, bound, size=shape), name=name)


def zeros(shape, name: str | None = None) -> Tensor:
    return T.parameter(np.zeros(shape), name=name)


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield ``(dotted_name, tensor)`` for every tensor inside a params tree.

    Order follows dataclass field order, which makes it stable across runs.
    """
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from named_parameters(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, f"{prefix}.{i}")


# ---------------------------------------------------------------------------
# ConvLSTM


@dataclass
class ConvLstmParams:
    """Gate kernels stacked along the output axis in ``(i, f, o, g)`` order.

    ``w_x``: ``(4c, c_in, 3, 3)``, ``w_h``: ``(4c, c, 3, 3)``, ``b``: ``(4c,)``.
    """

    w_x: Tensor
    w_h: Tensor
    b: Tensor

    def __post_init__(self):
        four_c, c_in, kh, kw = self.w_x.shape
        if four_c % 4 or (kh, kw) != (3, 3) or self.w_h.shape != (four_c, four_c // 4, 3, 3) or self.b.shape != (four_c,):
            raise ValueError(f"inconsistent ConvLSTM shapes {self.w_x.shape}, {self.w_h.shape}, {self.b.shape}")

    @property
    def hidden(self) -> int:
        return self.w_x.shape[0] // 4

    @property
    def in_channels(self) -> int:
        return self.w_x.shape[1]

    def gate(self, name: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Views of ``(W_x, W_h, b)`` for one gate."""
        k = GATES.index(name)
        sl = slice(k * self.hidden, (k + 1) * self.hidden)
        return self.w_x.data[sl], self.w_h.data[sl], self.b.data[sl]


@dataclass
class ConvLstmState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, shape) -> "ConvLstmState":
        return cls(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))


def init_convlstm(c_in: int, c_hidden: int, rng) -> ConvLstmParams:
    rng = _rng(rng)
    # each gate is drawn as its own c_hidden-filter conv, so fans are per gate
    w_x = np.concatenate([xavier_init((c_hidden, c_in, 3, 3), 9 * c_in, 9 * c_hidden, rng).data for _ in GATES])
    w_h = np.concatenate([xavier_init((c_hidden, c_hidden, 3, 3), 9 * c_hidden, 9 * c_hidden, rng).data for _ in GATES])
    return ConvLstmParams(T.parameter(w_x), T.parameter(w_h), zeros(4 * c_hidden))


def convlstm_step(state: ConvLstmState, x: Tensor, params: ConvLstmParams) -> ConvLstmState:
    """One ConvLSTM update without peepholes.

    i, f, o = sigmoid(conv(x) + conv(H) + b), g = tanh(...),
    C' = f*C + i*g, H' = o*tanh(C').
    """
    c = params.hidden
    if x.shape[-3] != params.in_channels:
        raise ValueError(f"ConvLSTM expects {params.in_channels} input channels, got {x.shape[-3]}")
    if state.h.shape != state.c.shape or state.h.shape[-3] != c or state.h.shape[-2:] != x.shape[-2:]:
        raise ValueError(f"ConvLSTM state {state.h.shape}/{state.c.shape} incompatible with input {x.shape}")
    if state.h.node is None and not state.h.data.any():
        z = T.conv2d(x, params.w_x, params.b)  # zero hidden state contributes nothing
    else:
        # conv(x, W_x) + conv(H, W_h) == conv(x ++ H, W_x ++ W_h)
        z = T.conv2d(T.concat_channels(x, state.h), T.concat([params.w_x, params.w_h], axis=1), params.b)
    pieces = [T.getitem(z, (Ellipsis, slice(k * c, (k + 1) * c), slice(None), slice(None))) for k in range(4)]
    i, f, o = (T.sigmoid(p) for p in pieces[:3])
    g = T.tanh(pieces[3])
    c_next = T.add(T.mul(f, state.c), T.mul(i, g))
    h_next = T.mul(o, T.tanh(c_next))
    return ConvLstmState(h_next, c_next)


def convlstm_run(xs, params: ConvLstmParams) -> tuple[Tensor, list[Tensor]]:
    """Fold a plain ConvLSTM over ``xs`` from a zero state; returns (H_final, all H)."""
    if not xs:
        raise ValueError("empty input sequence")
    shape = xs[0].shape[:-3] + (params.hidden,) + xs[0].shape[-2:]
    state = ConvLstmState.zeros(shape)
    hs = []
    for x in xs:
        state = convlstm_step(state, x, params)
        hs.append(state.h)
    return state.h, hs


# ---------------------------------------------------------------------------
# convolutional feature extraction


@dataclass
class ConvParams:
    w: Tensor
    b: Tensor


def init_conv(c_out: int, c_in: int, rng, k: int = 3) -> ConvParams:
    return ConvParams(xavier_init((c_out, c_in, k, k), c_in * k * k, c_out * k * k, rng), zeros(c_out))


def conv(x: Tensor, p: ConvParams) -> Tensor:
    return T.conv2d(x, p.w, p.b)


@dataclass
class ResidualUnitParams:
    conv1: ConvParams
    conv2: ConvParams


def init_residual_unit(rng, channels: int = CHANNELS) -> ResidualUnitParams:
    return ResidualUnitParams(init_conv(channels, channels, rng), init_conv(channels, channels, rng))


def residual_unit(x: Tensor, params: ResidualUnitParams) -> Tensor:
    """relu(x + conv2(relu(conv1(x))))"""
    if x.shape[-3] != params.conv1.w.shape[1]:
        raise ValueError(f"residual unit expects {params.conv1.w.shape[1]} channels, got {x.shape[-3]}")
    return T.relu(T.add(x, conv(T.relu(conv(x, params.conv1)), params.conv2)))


@dataclass
class FlowExtractorParams:
    lift: ConvParams
    units: list[ResidualUnitParams] = field(default_factory=list)


def init_flow_extractor(n_units: int, rng) -> FlowExtractorParams:
    rng = _rng(rng)
    return FlowExtractorParams(init_conv(CHANNELS, 2, rng), [init_residual_unit(rng) for _ in range(n_units)])


def flow_feature_extractor(m: Tensor, params: FlowExtractorParams) -> Tensor:
    """2-channel normalized flow map -> 16-channel feature map, no down-sampling."""
    if m.shape[-3] != 2:
        raise ValueError(f"flow map must have 2 channels, got shape {m.shape}")
    h = conv(m, params.lift)
    for unit in params.units:
        h = residual_unit(h, unit)
    return h


@dataclass
class ExternalEncoderParams:
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor

    @property
    def in_features(self) -> int:
        return self.fc1_w.shape[1]


def init_external_encoder(length: int, h: int, w: int, rng) -> ExternalEncoderParams:
    rng = _rng(rng)
    out = CHANNELS * h * w
    return ExternalEncoderParams(
        xavier_init((EXT_HIDDEN, length), length, EXT_HIDDEN, rng),
        zeros(EXT_HIDDEN),
        xavier_init((out, EXT_HIDDEN), EXT_HIDDEN, out, rng),
        zeros(out),
    )


def external_factor_encoder(e: Tensor, params: ExternalEncoderParams, h: int, w: int) -> Tensor:
    """FC(L->256) -> relu -> FC(256->16*h*w) -> reshape to ``(..., 16, h, w)``."""
    if e.shape[-1] != params.in_features:
        raise ValueError(f"external vector length {e.shape[-1]} != configured {params.in_features}")
    if params.fc2_w.shape[0] != CHANNELS * h * w:
        raise ValueError(f"encoder output {params.fc2_w.shape[0]} does not fit a {CHANNELS}x{h}x{w} map")
    hidden = T.relu(T.fully_connected(e, params.fc1_w, params.fc1_b))
    out = T.fully_connected(hidden, params.fc2_w, params.fc2_b)
    return T.reshape(out, e.shape[:-1] + (CHANNELS, h, w))
