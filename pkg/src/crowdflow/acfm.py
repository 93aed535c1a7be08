"""Attentive Crowd Flow Machine.

Two ConvLSTMs run side by side over a feature sequence. At each step the
first one's fresh hidden state, concatenated with the step input, goes through
a 1x1 convolution and a sigmoid to give a single-channel spatial weight map.
The second ConvLSTM consumes the input reweighted by that map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import ConvLstmParams, ConvLstmState, _rng, convlstm_step, init_convlstm, xavier_init, zeros
from .tensor import Tensor


@dataclass
class AcfmParams:
    lstm1: ConvLstmParams
    attn_w: Tensor  # (1, c_hidden + c_in, 1, 1), hidden channels first
    attn_b: Tensor  # (1,)
    lstm2: ConvLstmParams

    def __post_init__(self):
        expected = (1, self.lstm1.hidden + self.lstm1.in_channels, 1, 1)
        if self.attn_w.shape != expected or self.attn_b.shape != (1,):
            raise ValueError(f"attention kernel must be {expected} with bias (1,), got {self.attn_w.shape}")


def init_acfm(c_in: int, c_hidden: int, rng) -> AcfmParams:
    rng = _rng(rng)
    lstm1 = init_convlstm(c_in, c_hidden, rng)
    attn_w = xavier_init((1, c_hidden + c_in, 1, 1), c_hidden + c_in, 1, rng)
    return AcfmParams(lstm1, attn_w, zeros(1), init_convlstm(c_in, c_hidden, rng))


@dataclass
class AcfmTrace:
    attention: list[Tensor] = field(default_factory=list)
    h1: list[Tensor] = field(default_factory=list)
    h2: list[Tensor] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.attention)

    def attention_maps(self) -> np.ndarray:
        """Stacked weight maps, shape ``(steps, ..., 1, h, w)``."""
        return np.stack([w.data for w in self.attention])


def attention_map(h1: Tensor, x: Tensor, attn_w: Tensor, attn_b: Tensor) -> Tensor:
    if h1.shape[-2:] != x.shape[-2:] or h1.shape[:-3] != x.shape[:-3]:
        raise ValueError(f"attention inputs disagree: {h1.shape} vs {x.shape}")
    return T.sigmoid(T.conv2d(T.concat_channels(h1, x), attn_w, attn_b))


def acfm_step(s1: ConvLstmState, s2: ConvLstmState, x: Tensor, params: AcfmParams):
    """Advance both LSTMs one step; returns ``(s1', s2', W)``."""
    s1 = convlstm_step(s1, x, params.lstm1)
    w = attention_map(s1.h, x, params.attn_w, params.attn_b)
    s2 = convlstm_step(s2, T.mul(x, w), params.lstm2)
    return s1, s2, w


def acfm_run(xs, params: AcfmParams) -> tuple[Tensor, AcfmTrace]:
    """Fold :func:`acfm_step` over ``xs`` from zero states.

    Returns the second LSTM's last hidden state and the per-step trace.
    """
    if not xs:
        raise ValueError("ACFM needs a non-empty input sequence")
    shape = xs[0].shape
    if any(x.shape != shape for x in xs):
        raise ValueError("ACFM inputs must share one shape")
    state_shape = shape[:-3] + (params.lstm1.hidden,) + shape[-2:]
    s1, s2 = ConvLstmState.zeros(state_shape), ConvLstmState.zeros(state_shape)
    trace = AcfmTrace()
    for x in xs:
        s1, s2, w = acfm_step(s1, s2, x, params)
        trace.attention.append(w)
        trace.h1.append(s1.h)
        trace.h2.append(s2.h)
    return s2.h, trace
