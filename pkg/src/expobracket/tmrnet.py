"""Temporally modulated recurrent fusion network.

Each conditioned frame is encoded by a shared encoder, aligned to the first
(shortest) frame, and folded into a hidden state by a shared aggregation
module followed by a frame-specific one. A reconstruction head turns any
hidden state into a 4-plane raw estimate added onto the reference frame.

Parameters live in a flat ``{name: Tensor}`` dict with canonical names such as
``enc.conv0.w`` or ``agg.spec3.block1.conv2.b``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, ShapeError, UsageError
from .rawimg import DEFAULT_GAMMA, ExposureMeta, condition_frame

IN_CHANNELS = 8
OUT_CHANNELS = 4
SEARCH_RADIUS = 8


@dataclass(frozen=True)
class TMRNetConfig:
    frames: int = 5
    channels: int = 16
    enc_blocks: int = 2
    recon_blocks: int = 2
    common_blocks: int = 2
    specific_blocks: int = 3
    sr_factor: int = 1
    slope: float = 0.1

    def __post_init__(self):
        if self.frames < 1:
            raise ConfigurationError("need at least one frame")
        if self.common_blocks < 0 or self.specific_blocks < 0:
            raise ConfigurationError("block counts must be non-negative")
        if self.common_blocks + self.specific_blocks < 1:
            raise ConfigurationError("aggregation needs at least one residual block")
        if self.sr_factor not in (1, 4):
            raise ConfigurationError(f"sr_factor must be 1 or 4, got {self.sr_factor}")

    @classmethod
    def full_scale(cls, **overrides) -> TMRNetConfig:
        """Full-size layout: 5-block encoder/decoder, 16 common + 24 specific blocks."""
        kw = dict(channels=64, enc_blocks=5, recon_blocks=5, common_blocks=16, specific_blocks=24)
        kw.update(overrides)
        return cls(**kw)


# ---------------------------------------------------------------- parameters


def _conv_shapes(prefix, cin, cout):
    return [(f"{prefix}.w", (cout, cin, 3, 3)), (f"{prefix}.b", (cout,))]


def _stage_shapes(prefix, cin, c, blocks):
    shapes = _conv_shapes(f"{prefix}.conv0", cin, c)
    for k in range(blocks):
        shapes += _conv_shapes(f"{prefix}.block{k}.conv1", c, c)
        shapes += _conv_shapes(f"{prefix}.block{k}.conv2", c, c)
    return shapes


def param_shapes(cfg: TMRNetConfig) -> list:
    """Ordered ``(name, shape)`` list describing every learnable tensor."""
    c = cfg.channels
    shapes = _stage_shapes("enc", IN_CHANNELS, c, cfg.enc_blocks)
    shapes += _stage_shapes("agg.common", 2 * c, c, cfg.common_blocks)
    if cfg.specific_blocks:
        for i in range(1, cfg.frames + 1):
            shapes += _stage_shapes(f"agg.spec{i}", c, c, cfg.specific_blocks)
    for k in range(cfg.recon_blocks):
        shapes += _conv_shapes(f"rec.block{k}.conv1", c, c)
        shapes += _conv_shapes(f"rec.block{k}.conv2", c, c)
    if cfg.sr_factor == 4:
        shapes += _conv_shapes("up.conv1", c, 4 * c)
        shapes += _conv_shapes("up.conv2", c, 4 * c)
    shapes += _conv_shapes("rec.out", c, OUT_CHANNELS)
    return shapes


def init_params(cfg: TMRNetConfig, rng) -> dict:
    """Uniform(+-sqrt(1/fan_in)) weights, zero biases, zero output layer."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    params = {}
    for name, shape in param_shapes(cfg):
        if name.endswith(".b") or name.startswith("rec.out"):
            data = np.zeros(shape)
        else:
            bound = np.sqrt(1.0 / (shape[1] * shape[2] * shape[3]))
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = ad.tensor(data, requires_grad=True, name=name)
    return params


def count_params(params: dict) -> int:
    return int(sum(p.size for p in params.values()))


def clone_params(params: dict, requires_grad: bool = True) -> dict:
    return {k: ad.tensor(v.data.copy(), requires_grad=requires_grad, name=k) for k, v in params.items()}


def _conv(x, params, prefix):
    return ad.conv2d(x, params[f"{prefix}.w"], params[f"{prefix}.b"])


def _blocks(x, params, prefix, count, slope):
    for k in range(count):
        p = f"{prefix}.block{k}"
        x = ad.residual_block(
            x, params[f"{p}.conv1.w"], params[f"{p}.conv1.b"], params[f"{p}.conv2.w"], params[f"{p}.conv2.b"], slope
        )
    return x


# ---------------------------------------------------------------- modules


def encode(frame, params: dict, cfg: TMRNetConfig) -> ad.Tensor:
    """Shared feature extractor: 3x3 conv (8 -> C) and residual blocks."""
    frame = frame if isinstance(frame, ad.Tensor) else ad.tensor(frame)
    if frame.ndim != 4 or frame.shape[1] != IN_CHANNELS:
        raise ShapeError(f"encode expects N x {IN_CHANNELS} x H x W input, got {frame.shape}")
    return _blocks(_conv(frame, params, "enc.conv0"), params, "enc", cfg.enc_blocks, cfg.slope)


def estimate_shift(feat, ref, radius: int = SEARCH_RADIUS):
    """Global translation taking ``feat`` onto ``ref``.

    Maximizes the zero-normalized cross-correlation between ``ref(p)`` and
    ``feat(p + s)``, with means and energies taken over the overlap, across
    integer shifts within ``radius``, then refines each axis with a parabola
    through the peak and its neighbours. Returns
    ``((dx, dy), flagged)``; ``flagged`` is set when the peak sits on the
    search boundary or the features carry no signal.
    """
    feat = np.asarray(feat, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    c, h, w = ref.shape
    a = ref - ref.mean(axis=(1, 2), keepdims=True)
    b = feat - feat.mean(axis=(1, 2), keepdims=True)
    if np.abs(a).max(initial=0) < 1e-12 or np.abs(b).max(initial=0) < 1e-12:
        return (0.0, 0.0), True
    ry, rx = min(radius, h - 1), min(radius, w - 1)
    s0, s1 = 2 * h, 2 * w
    dys = np.arange(-ry, ry + 1)
    dxs = np.arange(-rx, rx + 1)
    rows, cols = dys % s0, dxs % s1
    # per-channel sums over the overlap of ref(p) and feat(p + s), as linear
    # correlations through zero-padded FFTs; each map is transformed once and
    # the six correlations share one inverse transform
    fa, faa, fb, fbb = np.split(np.fft.rfft2(np.concatenate([a, a * a, b, b * b]), s=(s0, s1)), 4)
    f1 = np.fft.rfft2(np.ones((1, h, w)), s=(s0, s1))
    f1c = np.conj(f1)
    spectra = np.concatenate([f1c * f1, np.conj(fa) * f1, f1c * fb, np.conj(faa) * f1, f1c * fbb, np.conj(fa) * fb])
    sums = np.fft.irfft2(spectra, s=(s0, s1))[:, rows][:, :, cols]
    count = np.round(sums[0])
    sa, sb, saa, sbb, sab = np.split(sums[1:], 5)
    num = (sab - sa * sb / count).sum(axis=0)
    ea = (saa - sa * sa / count).sum(axis=0)
    eb = (sbb - sb * sb / count).sum(axis=0)
    den = np.sqrt(np.maximum(ea * eb, 0))
    # tiny overlaps correlate spuriously well; require a quarter of the map
    valid = (den > 1e-12) & (count >= 0.25 * h * w)
    score = np.where(valid, num / np.where(valid, den, 1), -np.inf)
    iy, ix = np.unravel_index(np.argmax(score), score.shape)
    flagged = iy in (0, len(dys) - 1) or ix in (0, len(dxs) - 1)
    peak = score[iy, ix]

    def refine(lo, mid, hi):
        curv = lo - 2 * mid + hi
        if not np.isfinite(curv) or curv >= 0:
            return 0.0
        return float(np.clip(0.5 * (lo - hi) / curv, -0.5, 0.5))

    fy = fx = 0.0
    # an exact match is an integer shift; skip refinement there
    if peak < 1 - 1e-9:
        if 0 < iy < len(dys) - 1:
            fy = refine(score[iy - 1, ix], peak, score[iy + 1, ix])
        if 0 < ix < len(dxs) - 1:
            fx = refine(score[iy, ix - 1], peak, score[iy, ix + 1])
    return (float(dxs[ix] + fx), float(dys[iy] + fy)), bool(flagged)


def estimate_flows(feat: ad.Tensor, ref: ad.Tensor, radius: int = SEARCH_RADIUS):
    """Constant per-example flow fields ``(N, 2, H, W)`` and boundary flags."""
    n, _, h, w = ref.shape
    flow = np.zeros((n, 2, h, w))
    flags = []
    for k in range(n):
        (dx, dy), flag = estimate_shift(feat.data[k], ref.data[k], radius)
        flow[k, 0], flow[k, 1] = dx, dy
        flags.append(flag)
    return flow, flags


def align_to_reference(feat: ad.Tensor, ref: ad.Tensor, flow=None):
    """Warp ``feat`` onto ``ref`` by a global translation.

    Returns ``(aligned, flow, flags)``. Passing ``flow`` skips estimation.
    """
    if feat.shape != ref.shape:
        raise ShapeError(f"align: feature shapes {feat.shape} and {ref.shape} differ")
    flags = [False] * feat.shape[0]
    if flow is None:
        flow, flags = estimate_flows(feat, ref)
    return ad.bilinear_warp(feat, flow), flow, flags


@dataclass
class RecurrentState:
    hidden: ad.Tensor
    frame_index: int = 0


def initial_state(n: int, channels: int, h: int, w: int) -> RecurrentState:
    return RecurrentState(ad.tensor(np.zeros((n, channels, h, w))), 0)


def aggregate(aligned: ad.Tensor, state: RecurrentState, i: int, params: dict, cfg: TMRNetConfig) -> RecurrentState:
    """Fold frame ``i`` into the hidden state: common module, then frame-specific one."""
    if i != state.frame_index + 1:
        raise UsageError(f"frame {i} aggregated after frame {state.frame_index}")
    if not 1 <= i <= cfg.frames:
        raise UsageError(f"frame index {i} outside 1..{cfg.frames}")
    g = _conv(ad.concat([aligned, state.hidden], axis=1), params, "agg.common.conv0")
    g = _blocks(g, params, "agg.common", cfg.common_blocks, cfg.slope)
    if cfg.specific_blocks:
        g = _conv(g, params, f"agg.spec{i}.conv0")
        g = _blocks(g, params, f"agg.spec{i}", cfg.specific_blocks, cfg.slope)
    return RecurrentState(g, i)


def upsample_bilinear(x: np.ndarray, factor: int) -> np.ndarray:
    """Half-pixel-centred bilinear upsampling of ``(..., H, W)`` with edge clamping."""
    h, w = x.shape[-2:]

    def axis_weights(n):
        pos = (np.arange(n * factor) + 0.5) / factor - 0.5
        lo = np.floor(pos).astype(int)
        frac = pos - lo
        return np.clip(lo, 0, n - 1), np.clip(lo + 1, 0, n - 1), frac

    y0, y1, fy = axis_weights(h)
    x0, x1, fx = axis_weights(w)
    rows = x[..., y0, :] * (1 - fy)[:, None] + x[..., y1, :] * fy[:, None]
    return (rows[..., x0] * (1 - fx) + rows[..., x1] * fx).astype(x.dtype)


def reconstruct(state: RecurrentState, params: dict, base, cfg: TMRNetConfig) -> ad.Tensor:
    """Residual reconstruction onto the reference planes (upsampled when super-resolving)."""
    if state.frame_index < 1:
        raise UsageError("reconstruct needs at least one aggregated frame")
    x = _blocks(state.hidden, params, "rec", cfg.recon_blocks, cfg.slope)
    base = np.asarray(base.data if isinstance(base, ad.Tensor) else base)
    if cfg.sr_factor == 4:
        if "up.conv1.w" not in params:
            raise ConfigurationError("sr_factor=4 needs upsampler parameters")
        for k in (1, 2):
            x = ad.leaky_relu(ad.pixel_shuffle(_conv(x, params, f"up.conv{k}"), 2), cfg.slope)
        base = upsample_bilinear(base, 4)
    residual = _conv(x, params, "rec.out")
    return ad.add(ad.tensor(base), residual)


# ---------------------------------------------------------------- full model


def condition_stack(stack, indices, ratio: float, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """Condition ``(N, T, 4, H, W)`` LDR frames into ``(N, T, 8, H, W)``.

    ``indices[t]`` is the 1-based exposure index of frame ``t`` (``1..T`` for a
    bracket, a repeated value for a burst).
    """
    stack = np.asarray(stack)
    out = [condition_frame(stack[:, t], ExposureMeta(index=int(i), ratio=ratio), gamma) for t, i in enumerate(indices)]
    return np.stack(out, axis=1)


def run(conditioned, params: dict, cfg: TMRNetConfig, outputs, flows=None, return_info: bool = False):
    """Run the recurrence over frames ``1..max(outputs)``.

    ``conditioned`` is ``(N, T, 8, H, W)``. Returns the list of prefix outputs
    ``[X_r for r in outputs]`` (hidden states are shared across prefixes).
    ``flows`` optionally maps frame index to a precomputed flow field.
    With ``return_info`` the hidden states and flows used are returned too.
    """
    conditioned = np.asarray(conditioned)
    outputs = list(outputs)
    last = max(outputs)
    if min(outputs) < 1 or last > cfg.frames or last > conditioned.shape[1]:
        raise UsageError(f"prefix lengths {outputs} outside 1..{min(cfg.frames, conditioned.shape[1])}")
    n, _, _, h, w = conditioned.shape
    base = conditioned[:, 0, :OUT_CHANNELS]
    ref = encode(conditioned[:, 0], params, cfg)
    state = initial_state(n, cfg.channels, h, w)
    used_flows = {1: np.zeros((n, 2, h, w))}
    flags = {1: [False] * n}
    states = {}
    results = {}
    for i in range(1, last + 1):
        if i == 1:
            aligned = ref
        else:
            feat = encode(conditioned[:, i - 1], params, cfg)
            given = None if flows is None else flows.get(i)
            aligned, used_flows[i], flags[i] = align_to_reference(feat, ref, given)
        state = aggregate(aligned, state, i, params, cfg)
        states[i] = state
        if i in outputs:
            results[i] = reconstruct(state, params, base, cfg)
    preds = [results[r] for r in outputs]
    if return_info:
        return preds, {"states": states, "flows": used_flows, "flags": flags}
    return preds


def forward(conditioned, params: dict, cfg: TMRNetConfig, r: int | None = None, flows=None) -> ad.Tensor:
    """Prefix output after consuming frames ``1..r`` (default: all frames)."""
    r = cfg.frames if r is None else r
    if not 1 <= r <= cfg.frames:
        raise UsageError(f"r={r} outside 1..{cfg.frames}")
    return run(conditioned, params, cfg, [r], flows=flows)[0]


def predict(conditioned, params: dict, cfg: TMRNetConfig, r: int | None = None) -> np.ndarray:
    """Inference without taping."""
    with ad.no_grad():
        return forward(conditioned, params, cfg, r).data
