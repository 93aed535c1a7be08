"""Sequential-Periodic Network and its ablation variants.

Every interval is embedded as ``flow_features(M) ++ external_features(E)``
(32 channels). The sequential branch runs an ACFM over the ``n`` preceding
intervals, the periodic branch over the same slot on the ``m`` preceding
days. A learned scalar ``r`` blends the two branches before a 2-filter
convolution and ``tanh`` produce the normalized forecast.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .acfm import AcfmParams, AcfmTrace, acfm_run, init_acfm
from .data import Batch
from .layers import (
    CHANNELS,
    ConvLstmParams,
    ConvParams,
    ExternalEncoderParams,
    FlowExtractorParams,
    _rng,
    conv,
    convlstm_run,
    external_factor_encoder,
    flow_feature_extractor,
    init_conv,
    init_convlstm,
    init_external_encoder,
    init_flow_extractor,
    named_parameters,
    xavier_init,
    zeros,
)
from .tensor import Tensor

EMBED_CHANNELS = 2 * CHANNELS
FUSION_HIDDEN = 512


class Variant(str, enum.Enum):
    PCNN = "PCNN"
    SCNN = "SCNN"
    PRNN_NO_ATTN = "PRNN_NO_ATTN"
    PRNN = "PRNN"
    SRNN_NO_ATTN = "SRNN_NO_ATTN"
    SRNN = "SRNN"
    SPN_NO_FUSION = "SPN_NO_FUSION"
    SPN = "SPN"

    @classmethod
    def parse(cls, name: str) -> "Variant":
        """Accepts ``SRNN_NO_ATTN``, ``srnn-w/o-attention``, ``SPN-w/o-Fusion`` and similar."""
        key = name.strip().upper().replace("-W/O-ATTENTION", "_NO_ATTN").replace("-W/O-FUSION", "_NO_FUSION")
        key = key.replace("-", "_")
        try:
            return cls[key]
        except KeyError:
            raise ValueError(f"unknown variant {name!r}; choose from {[v.value for v in cls]}") from None

    @property
    def uses_seq(self) -> bool:
        return self.name.startswith(("S",))

    @property
    def uses_per(self) -> bool:
        return self.name.startswith(("P", "SPN"))

    @property
    def attention(self) -> bool:
        return not self.name.endswith("NO_ATTN")

    @property
    def is_cnn(self) -> bool:
        return self in (Variant.PCNN, Variant.SCNN)

    @property
    def is_spn(self) -> bool:
        return self in (Variant.SPN, Variant.SPN_NO_FUSION)


@dataclass
class SpnConfig:
    h: int
    w: int
    n: int = 3
    m: int = 2
    n_units: int = 12
    intervals_per_day: int = 48
    ext_length: int = 59

    def validate(self, variant: Variant | None = None) -> None:
        if self.h < 1 or self.w < 1 or self.n_units < 0 or self.intervals_per_day < 1 or self.ext_length < 1:
            raise ValueError(f"invalid config {self}")
        if variant is None or variant.uses_seq:
            if self.n < 1:
                raise ValueError("sequential length n must be >= 1")
        if variant is None or variant.uses_per:
            if self.m < 1:
                raise ValueError("periodic length m must be >= 1")

    @classmethod
    def taxibj(cls) -> "SpnConfig":
        return cls(h=32, w=32, n=3, m=2, n_units=12, intervals_per_day=48, ext_length=16 + 2 + 41)

    @classmethod
    def bikenyc(cls) -> "SpnConfig":
        return cls(h=16, w=8, n=5, m=7, n_units=4, intervals_per_day=24, ext_length=16 + 2 + 20)


@dataclass
class FusionParams:
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor

    def zero_(self) -> None:
        for t in (self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b):
            t.data[...] = 0.0


@dataclass
class SpnParams:
    """All learnable tensors of one model; branches a variant lacks stay None."""

    flow: FlowExtractorParams
    ext: ExternalEncoderParams
    seq: AcfmParams | ConvLstmParams | None = None
    seq_conv: ConvParams | None = None
    per: AcfmParams | ConvLstmParams | None = None
    per_conv: ConvParams | None = None
    fusion: FusionParams | None = None
    out: ConvParams | None = None
    seq_cnn: ConvParams | None = None
    per_cnn: ConvParams | None = None

    def named(self) -> list[tuple[str, Tensor]]:
        return list(named_parameters(self))

    def tensors(self) -> list[Tensor]:
        return [t for _, t in named_parameters(self)]

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors())


def init_params(config: SpnConfig, variant: Variant, seed) -> SpnParams:
    """Xavier weights, zero biases, only for the parts ``variant`` uses."""
    config.validate(variant)
    rng = _rng(seed)
    h, w, c = config.h, config.w, CHANNELS
    p = SpnParams(init_flow_extractor(config.n_units, rng), init_external_encoder(config.ext_length, h, w, rng))

    def branch():
        return init_acfm(EMBED_CHANNELS, c, rng) if variant.attention else init_convlstm(EMBED_CHANNELS, c, rng)

    if variant.is_cnn:
        steps = config.n if variant is Variant.SCNN else config.m
        cnn = init_conv(2, EMBED_CHANNELS * steps, rng)
        if variant is Variant.SCNN:
            p.seq_cnn = cnn
        else:
            p.per_cnn = cnn
        return p
    if variant.uses_seq:
        p.seq, p.seq_conv = branch(), init_conv(c, c, rng)
    if variant.uses_per:
        p.per, p.per_conv = branch(), init_conv(c, c, rng)
    if variant is Variant.SPN:
        d = 2 * c * h * w + config.ext_length
        p.fusion = FusionParams(
            xavier_init((FUSION_HIDDEN, d), d, FUSION_HIDDEN, rng),
            zeros(FUSION_HIDDEN),
            xavier_init((1, FUSION_HIDDEN), FUSION_HIDDEN, 1, rng),
            zeros(1),
        )
    p.out = init_conv(2, c, rng)
    return p


# ---------------------------------------------------------------------------
# forward pieces


def embed_timestep(m_norm: Tensor, e: Tensor, params: SpnParams, h: int, w: int) -> Tensor:
    """``(..., 2, h, w)`` map and ``(..., L)`` externals -> ``(..., 32, h, w)``."""
    return T.concat_channels(flow_feature_extractor(m_norm, params.flow), external_factor_encoder(e, params.ext, h, w))


def _embed_sequence(maps: np.ndarray, ext: np.ndarray, params: SpnParams) -> list[Tensor]:
    """Embed ``(B, k, 2, h, w)`` maps in one pass and split them back into k steps."""
    b, k, _, h, w = maps.shape
    feats = embed_timestep(Tensor(maps.reshape(b * k, 2, h, w)), Tensor(ext.reshape(b * k, -1)), params, h, w)
    feats = T.reshape(feats, (b, k, EMBED_CHANNELS, h, w))
    return [T.getitem(feats, (slice(None), i)) for i in range(k)]


def _recurrent(xs: list[Tensor], branch) -> tuple[Tensor, AcfmTrace | None]:
    if isinstance(branch, AcfmParams):
        return acfm_run(xs, branch)
    h, _ = convlstm_run(xs, branch)
    return h, None


def sequential_branch(seq: list[Tensor], params: SpnParams, n: int | None = None):
    """Sequential representation ``S_f`` of shape ``(..., 16, h, w)`` plus the ACFM trace."""
    if n is not None and len(seq) != n:
        raise ValueError(f"sequential branch expects {n} steps, got {len(seq)}")
    if params.seq is None:
        raise ValueError("params have no sequential branch")
    h, trace = _recurrent(seq, params.seq)
    return conv(h, params.seq_conv), trace


def periodic_branch(per: list[Tensor], params: SpnParams, m: int | None = None):
    """Periodic representation ``P_f`` of shape ``(..., 16, h, w)`` plus the ACFM trace."""
    if m is not None and len(per) != m:
        raise ValueError(f"periodic branch expects {m} steps, got {len(per)}")
    if params.per is None:
        raise ValueError("params have no periodic branch")
    h, trace = _recurrent(per, params.per)
    return conv(h, params.per_conv), trace


def fusion_weight(s_f: Tensor, p_f: Tensor, e_f: Tensor, fusion: FusionParams) -> Tensor:
    """sigmoid(fc2(relu(fc1(flat(S_f) ++ flat(P_f) ++ E_f)))), shape ``(B, 1)``."""
    batched = s_f.ndim == 4
    start = 1 if batched else 0
    z = T.concat([T.flatten(s_f, start), T.flatten(p_f, start), e_f], axis=-1)
    hidden = T.relu(T.fully_connected(z, fusion.fc1_w, fusion.fc1_b))
    return T.sigmoid(T.fully_connected(hidden, fusion.fc2_w, fusion.fc2_b))


def fuse_and_predict(s_f: Tensor, p_f: Tensor, r, out: ConvParams) -> Tensor:
    """tanh(T(r*S_f + (1-r)*P_f)). ``r`` is a float, ``(B, 1)`` or ``(1,)`` tensor."""
    if not isinstance(r, Tensor):
        lead = s_f.shape[:-3]
        r = Tensor(np.full(lead + (1,), float(r)))
    r = T.reshape(r, r.shape + (1, 1))
    blended = T.add(T.mul(s_f, r), T.mul(p_f, T.add_scalar(T.scale(r, -1.0), 1.0)))
    return T.tanh(conv(blended, out))


@dataclass
class SpnTrace:
    seq: AcfmTrace | None = None
    per: AcfmTrace | None = None
    r: np.ndarray | None = None  # (B,) fusion weights


def forward(batch: Batch, variant: Variant, params: SpnParams, config: SpnConfig | None = None):
    """Run ``variant`` on a batch; returns ``(prediction (B, 2, h, w), SpnTrace)``."""
    variant = Variant(variant)
    trace = SpnTrace()
    n, m = batch.seq_maps.shape[1], batch.per_maps.shape[1]
    if config is not None:
        if variant.uses_seq and n != config.n or variant.uses_per and m != config.m:
            raise ValueError(f"batch has n={n}, m={m}; config wants n={config.n}, m={config.m}")
    if variant.uses_seq and n == 0 or variant.uses_per and m == 0:
        raise ValueError(f"{variant.value} needs history the batch does not carry")

    if variant.is_cnn:
        maps, ext = (batch.seq_maps, batch.seq_ext) if variant is Variant.SCNN else (batch.per_maps, batch.per_ext)
        cnn = params.seq_cnn if variant is Variant.SCNN else params.per_cnn
        if cnn is None:
            raise ValueError(f"params lack the {variant.value} output convolution")
        b, k, _, h, w = maps.shape
        feats = embed_timestep(Tensor(maps.reshape(b * k, 2, h, w)), Tensor(ext.reshape(b * k, -1)), params, h, w)
        stacked = T.reshape(feats, (b, k * EMBED_CHANNELS, h, w))  # time-major channel concat
        return T.tanh(conv(stacked, cnn)), trace

    if params.out is None:
        raise ValueError("params lack the output transform")
    for used, branch in ((variant.uses_seq, params.seq), (variant.uses_per, params.per)):
        if used and branch is not None and isinstance(branch, AcfmParams) != variant.attention:
            kind = "ACFM" if variant.attention else "plain ConvLSTM"
            raise ValueError(f"{variant.value} needs a {kind} branch, params carry {type(branch).__name__}")
    if variant.is_spn:
        k = n
        feats = _embed_sequence(
            np.concatenate([batch.seq_maps, batch.per_maps], axis=1),
            np.concatenate([batch.seq_ext, batch.per_ext], axis=1),
            params,
        )
        s_f, trace.seq = sequential_branch(feats[:k], params)
        p_f, trace.per = periodic_branch(feats[k:], params)
        if variant is Variant.SPN:
            if params.fusion is None:
                raise ValueError("SPN params lack the fusion layers")
            r = fusion_weight(s_f, p_f, Tensor(batch.e_sum), params.fusion)
        else:
            r = Tensor(np.full((len(batch), 1), 0.5))
        trace.r = r.data[:, 0].copy()
        return fuse_and_predict(s_f, p_f, r, params.out), trace

    if variant.uses_seq:
        s_f, trace.seq = sequential_branch(_embed_sequence(batch.seq_maps, batch.seq_ext, params), params)
        return T.tanh(conv(s_f, params.out)), trace
    p_f, trace.per = periodic_branch(_embed_sequence(batch.per_maps, batch.per_ext, params), params)
    return T.tanh(conv(p_f, params.out)), trace
