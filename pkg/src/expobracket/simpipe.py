"""Synthesis of bracketed raw stacks from dense HDR sequences.

The pipeline follows the capture model used for training data: every source
frame is converted from linear RGB to an RGGB mosaic, consecutive frames are
summed in groups of ``S**(i-1)`` to produce exposure ``i`` (which yields both
exposure scaling and motion blur), and each integrated frame is clipped,
corrupted with heteroscedastic Gaussian noise and quantized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, ParameterError
from .rawimg import dequantize, pack_bayer, quantize

SHOT_RANGE = (0.0012, 0.0048)
READ_SLOPE = 1.869
READ_INTERCEPT = 0.3276
READ_SIGMA = 0.3
ISO1600 = (2.42e-3, 1.79e-5)


def example_rng(seed: int, index: int) -> np.random.Generator:
    """Independent counter-based stream for example ``index`` of a run."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index)])))


def group_sizes(frames: int, ratio: int) -> list[int]:
    return [int(ratio) ** k for k in range(frames)]


def cumulative_counts(frames: int, ratio: int) -> list[int]:
    """``Q_i``: number of source frames consumed by exposures ``1..i``."""
    return list(np.cumsum(group_sizes(frames, ratio)).tolist())


# ---------------------------------------------------------------- parameters


@dataclass(frozen=True)
class IspParams:
    """White-balance gains and camera-to-linear-RGB color matrix."""

    wb_gains: tuple = (2.0, 1.6)
    ccm: tuple = ((1.55, -0.40, -0.15), (-0.20, 1.45, -0.25), (0.05, -0.45, 1.40))

    def __post_init__(self):
        m = np.asarray(self.ccm, dtype=np.float64)
        if m.shape != (3, 3):
            raise ParameterError(f"ccm must be 3x3, got {m.shape}")
        if abs(np.linalg.det(m)) <= 1e-3:
            raise ParameterError("ccm is not invertible")
        if not np.allclose(m.sum(axis=1), 1.0, atol=1e-6):
            raise ParameterError("ccm rows must sum to 1 (white stays white)")
        if any(not 0.25 <= g <= 4 for g in self.wb_gains):
            raise ParameterError(f"white-balance gains must lie in [0.25, 4], got {self.wb_gains}")

    @classmethod
    def identity(cls) -> IspParams:
        return cls(wb_gains=(1.0, 1.0), ccm=((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)))

    @property
    def matrix(self) -> np.ndarray:
        return np.asarray(self.ccm, dtype=np.float64)


@dataclass(frozen=True)
class NoiseParams:
    """Heteroscedastic noise: variance ``read + shot * x`` for clean intensity ``x``."""

    shot: float
    read: float

    def __post_init__(self):
        if self.shot < 0 or self.read < 0 or not (math.isfinite(self.shot) and math.isfinite(self.read)):
            raise ParameterError(f"noise parameters must be finite and non-negative, got {self}")

    @property
    def in_training_range(self) -> bool:
        return SHOT_RANGE[0] <= self.shot <= SHOT_RANGE[1]

    @classmethod
    def iso1600(cls) -> NoiseParams:
        return cls(*ISO1600)


@dataclass(frozen=True)
class SimConfig:
    frames: int = 5
    ratio: int = 4
    bits: int = 10
    task: str = "ire"
    noise: NoiseParams | None = None
    shot_range: tuple = SHOT_RANGE
    seed: int = 0

    def __post_init__(self):
        if self.frames < 1:
            raise ConfigurationError("frame count must be positive")
        if self.ratio < 2:
            raise ConfigurationError("exposure ratio must be at least 2")
        if self.task not in ("ire", "ire+"):
            raise ConfigurationError(f"unknown task {self.task!r}")

    @property
    def sr_factor(self) -> int:
        return 4 if self.task == "ire+" else 1

    @property
    def frames_needed(self) -> int:
        return cumulative_counts(self.frames, self.ratio)[-1]


@dataclass
class BracketExample:
    """Input stack and HDR target for one scene.

    ``stack`` is ``(T, 4, h, w)`` float32 LDR packed raw; ``gt`` is
    ``(4, h * sr, w * sr)`` float32 in shortest-exposure units, unclipped.
    ``indices`` are the 1-based exposure indices of the stack frames.
    """

    stack: np.ndarray
    gt: np.ndarray
    indices: tuple
    ratio: int
    bits: int
    noise: NoiseParams
    counts: tuple
    task: str = "ire"
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def sr_factor(self) -> int:
        return self.gt.shape[-1] // self.stack.shape[-1]


# ---------------------------------------------------------------- scenes


class HdrSequence:
    """Dense linear-radiance RGB sequence, rendered lazily frame by frame."""

    def __init__(self, render, length: int, height: int, width: int, radiance_max: float, tag: str = ""):
        self._render = render
        self.length = int(length)
        self.height = height
        self.width = width
        self.radiance_max = radiance_max
        self.frame_rate_tag = tag

    def __len__(self):
        return self.length

    def frame(self, m: int) -> np.ndarray:
        """Frame ``m`` (0-based) as ``(H, W, 3)`` float64."""
        if not 0 <= m < self.length:
            raise IndexError(m)
        return self._render(m)

    def __iter__(self):
        return (self.frame(m) for m in range(self.length))

    @classmethod
    def from_frames(cls, frames, tag: str = "array") -> HdrSequence:
        frames = np.asarray(frames, dtype=np.float64)
        return cls(lambda m: frames[m], len(frames), frames.shape[1], frames.shape[2], float(frames.max(initial=0)), tag)

    @classmethod
    def constant(cls, value, length: int, height: int, width: int) -> HdrSequence:
        rgb = np.broadcast_to(np.asarray(value, dtype=np.float64), (3,))
        img = np.broadcast_to(rgb, (height, width, 3)).copy()
        return cls(lambda m: img, length, height, width, float(rgb.max()), "static")


def _smooth_field(rng, shape, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return (f - f.mean()) / (f.std() + 1e-12)


def procedural_hdr_scene(
    seed: int,
    height: int,
    width: int,
    length: int = 341,
    radiance_max: float = 64.0,
    min_length: int = 341,
    camera_speed: float = 0.01,
    object_speed: float = 0.02,
    wobble: float = 0.3,
    log_floor: float = -3.0,
) -> HdrSequence:
    """Deterministic synthetic HDR video with camera shake and a moving object.

    Log-radiance is spread over roughly ``[log_floor, log10(radiance_max)]`` so the
    shortest exposure has deep shadows while the longest clips most
    highlights. The camera drifts by a sub-pixel amount per frame with a
    smooth wobble; one textured disc moves independently.
    """
    if length < min_length:
        raise ConfigurationError(f"scene needs at least {min_length} frames, got {length}")
    rng = np.random.default_rng(seed)
    # the background tiles periodically, so content does not depend on length
    ch, cw = 2 * height, 2 * width

    scale = max(height, width) / 64
    coarse = _smooth_field(rng, (ch, cw), 6 * scale)
    fine = _smooth_field(rng, (ch, cw), 1.2 * scale)
    yy, xx = np.mgrid[0:ch, 0:cw]
    theta = rng.uniform(0, np.pi)
    period = rng.uniform(5, 9) * scale
    stripes = np.sin((xx * np.cos(theta) + yy * np.sin(theta)) * 2 * np.pi / period)
    edges = np.sign(_smooth_field(rng, (ch, cw), 4 * scale))
    logr = 1.0 * coarse + 0.25 * fine + 0.2 * stripes + 0.35 * edges
    lo, hi = np.percentile(logr, [1, 99])
    logr = log_floor + (logr - lo) / (hi - lo) * (-0.1 - log_floor)

    # a few light sources above the clipping level of the shortest exposure
    for _ in range(rng.integers(3, 5)):
        cy, cx = rng.uniform(0.1, 0.9) * height, rng.uniform(0.1, 0.9) * width
        rad = rng.uniform(3.0, 4.5) * scale
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * rad**2))
        logr = np.maximum(logr, np.log10(radiance_max) * blob + log_floor * (1 - blob))
    tint = 1 + 0.15 * np.stack([_smooth_field(rng, (ch, cw), 8 * scale) for _ in range(3)], axis=-1)
    background = np.clip(10.0**logr, 0, radiance_max)[..., None] * np.clip(tint, 0.6, 1.4)
    background = np.clip(background, 0, radiance_max)

    cam_dir = rng.uniform(0, 2 * np.pi)
    wob_amp = wobble * rng.uniform(0.5, 1.5)
    wob_freq = 2 * np.pi / rng.uniform(200.0, 400.0)

    obj_r = rng.uniform(0.12, 0.2) * min(height, width)
    obj_c0 = np.array([rng.uniform(0.3, 0.7) * height, rng.uniform(0.3, 0.7) * width])
    obj_dir = rng.uniform(0, 2 * np.pi)
    obj_vel = object_speed * np.array([np.sin(obj_dir), np.cos(obj_dir)])
    obj_level = 10.0 ** rng.uniform(-2.5, -0.8)
    obj_color = rng.uniform(0.7, 1.3, size=3)
    obj_freq = rng.uniform(0.25, 0.45) / scale
    gy, gx = np.mgrid[0:height, 0:width].astype(np.float64)

    def render(m: int) -> np.ndarray:
        dy = camera_speed * m * np.sin(cam_dir) + wob_amp * np.sin(wob_freq * m)
        dx = camera_speed * m * np.cos(cam_dir) + wob_amp * np.cos(wob_freq * m * 1.3)
        out = np.empty((height, width, 3))
        coords = [gy + dy, gx + dx]
        for c in range(3):
            out[..., c] = ndimage.map_coordinates(background[..., c], coords, order=1, mode="grid-wrap")
        cy, cx = obj_c0 + obj_vel * m
        ly, lx = gy - cy, gx - cx
        dist = np.hypot(ly, lx)
        cover = np.clip(obj_r - dist + 0.5, 0, 1)
        texture = obj_level * (1.6 + np.sin(obj_freq * lx) * np.cos(obj_freq * ly))
        return out * (1 - cover[..., None]) + (cover * texture)[..., None] * obj_color

    return HdrSequence(render, length, height, width, radiance_max, "procedural")


# ---------------------------------------------------------------- transforms


def rgb_to_raw(frame: np.ndarray, isp: IspParams) -> np.ndarray:
    """Linear RGB ``(H, W, 3)`` to an RGGB mosaic via inverse CCM and inverse gains."""
    frame = np.asarray(frame, dtype=np.float64)
    h, w = frame.shape[:2]
    if h % 2 or w % 2:
        raise ParameterError(f"frame dimensions must be even, got {h}x{w}")
    cam = frame @ np.linalg.inv(isp.matrix).T
    g_r, g_b = isp.wb_gains
    mosaic = np.empty((h, w))
    mosaic[0::2, 0::2] = cam[0::2, 0::2, 0] / g_r
    mosaic[0::2, 1::2] = cam[0::2, 1::2, 1]
    mosaic[1::2, 0::2] = cam[1::2, 0::2, 1]
    mosaic[1::2, 1::2] = cam[1::2, 1::2, 2] / g_b
    return mosaic


def _cubic(x, a=-0.5):
    x = np.abs(x)
    return np.where(
        x <= 1,
        (a + 2) * x**3 - (a + 3) * x**2 + 1,
        np.where(x < 2, a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a, 0.0),
    )


def _resize_matrix(n_in: int, factor: int) -> np.ndarray:
    n_out = n_in // factor
    centers = (np.arange(n_out) + 0.5) * factor - 0.5
    support = 2 * factor
    taps = np.arange(-support, support + 1)
    mat = np.zeros((n_out, n_in))
    for o, c in enumerate(centers):
        idx = np.floor(c).astype(int) + taps
        wts = _cubic((idx - c) / factor)
        wts /= wts.sum()
        np.add.at(mat[o], np.clip(idx, 0, n_in - 1), wts)
    return mat


def bicubic_downsample(frame: np.ndarray, factor: int = 4) -> np.ndarray:
    """Anti-aliased Catmull-Rom downsampling of ``(H, W, C)`` by an integer factor."""
    frame = np.asarray(frame, dtype=np.float64)
    h, w = frame.shape[:2]
    if h % factor or w % factor:
        raise ParameterError(f"{h}x{w} frame is not divisible by {factor}")
    ry, rx = _resize_matrix(h, factor), _resize_matrix(w, factor)
    return np.einsum("oh,hwc,pw->opc", ry, frame, rx)


def group_and_integrate(mosaics, frames: int, ratio: int):
    """Sum consecutive groups of ``ratio**(i-1)`` frames in index order.

    ``mosaics`` is a sequence (or a callable ``m -> frame``) with at least
    ``Q_T`` entries. Returns ``(outputs, counts)``.
    """
    sizes = group_sizes(frames, ratio)
    counts = cumulative_counts(frames, ratio)
    get = mosaics if callable(mosaics) else mosaics.__getitem__
    available = None if callable(mosaics) else len(mosaics)
    if available is not None and available < counts[-1]:
        raise ConfigurationError(f"need {counts[-1]} source frames, got {available}")
    outputs = []
    m = 0
    for size in sizes:
        acc = np.array(get(m), dtype=np.float64, copy=True)
        for k in range(1, size):
            acc += get(m + k)
        m += size
        outputs.append(acc)
    return outputs, counts


def sample_noise_params(rng, shot_range=SHOT_RANGE) -> NoiseParams:
    """Log-uniform shot coefficient; read variance log-linear in it with 0.3 scatter."""
    log_shot = rng.uniform(np.log(shot_range[0]), np.log(shot_range[1]))
    log_read = rng.normal(READ_SLOPE * log_shot + READ_INTERCEPT, READ_SIGMA)
    return NoiseParams(float(np.exp(log_shot)), float(np.exp(log_read)))


def add_noise(clean: np.ndarray, noise: NoiseParams, rng) -> np.ndarray:
    var = noise.read + noise.shot * clean
    return clean + rng.standard_normal(clean.shape) * np.sqrt(var)


def degrade_to_ldr(hdr: np.ndarray, noise: NoiseParams, bits: int, rng) -> np.ndarray:
    """Clip to the white level, add noise, re-clip and quantize (returns float32)."""
    clean = np.clip(np.asarray(hdr, dtype=np.float64), 0.0, 1.0)
    noisy = add_noise(clean, noise, rng)
    return dequantize(quantize(np.clip(noisy, 0.0, 1.0), bits), bits)


# ---------------------------------------------------------------- assembly


def _lowres_raw(scene: HdrSequence, isp: IspParams, sr: int):
    def get(m):
        frame = scene.frame(m)
        if sr > 1:
            frame = bicubic_downsample(frame, sr)
        return rgb_to_raw(frame, isp)

    return get


def _pick_noise(cfg: SimConfig, rng) -> NoiseParams:
    return cfg.noise if cfg.noise is not None else sample_noise_params(rng, cfg.shot_range)


def synthesize_example(scene: HdrSequence, isp: IspParams, cfg: SimConfig, rng) -> BracketExample:
    """Bracketed stack plus HDR target for one scene."""
    if len(scene) < cfg.frames_needed:
        raise ConfigurationError(f"scene has {len(scene)} frames, bracket needs {cfg.frames_needed}")
    sr = cfg.sr_factor
    if scene.height % (2 * sr) or scene.width % (2 * sr):
        raise ConfigurationError(f"scene size {scene.height}x{scene.width} incompatible with factor {sr}")
    noise = _pick_noise(cfg, rng)
    gt = pack_bayer(rgb_to_raw(scene.frame(0), isp)).astype(np.float32)
    hdr, counts = group_and_integrate(_lowres_raw(scene, isp, sr), cfg.frames, cfg.ratio)
    stack = np.stack([degrade_to_ldr(pack_bayer(x), noise, cfg.bits, rng) for x in hdr])
    return BracketExample(
        stack=stack.astype(np.float32),
        gt=gt,
        indices=tuple(range(1, cfg.frames + 1)),
        ratio=cfg.ratio,
        bits=cfg.bits,
        noise=noise,
        counts=tuple(counts),
        task=cfg.task,
        seed=cfg.seed,
    )


def synthesize_burst(scene: HdrSequence, isp: IspParams, cfg: SimConfig, exposure_index: int, count: int, rng) -> BracketExample:
    """``count`` equal-exposure frames at exposure ``exposure_index``.

    Integration windows are consecutive and non-overlapping from the first
    source frame; the target is the same first frame used by brackets.
    """
    size = cfg.ratio ** (exposure_index - 1)
    if len(scene) < count * size:
        raise ConfigurationError(f"burst needs {count * size} source frames, scene has {len(scene)}")
    sr = cfg.sr_factor
    noise = _pick_noise(cfg, rng)
    gt = pack_bayer(rgb_to_raw(scene.frame(0), isp)).astype(np.float32)
    get = _lowres_raw(scene, isp, sr)
    frames = []
    for b in range(count):
        acc = np.array(get(b * size), dtype=np.float64, copy=True)
        for k in range(1, size):
            acc += get(b * size + k)
        frames.append(degrade_to_ldr(pack_bayer(acc), noise, cfg.bits, rng))
    return BracketExample(
        stack=np.stack(frames).astype(np.float32),
        gt=gt,
        indices=(exposure_index,) * count,
        ratio=cfg.ratio,
        bits=cfg.bits,
        noise=noise,
        counts=tuple(size * (b + 1) for b in range(count)),
        task=cfg.task,
        seed=cfg.seed,
        meta={"burst_exposure": exposure_index},
    )


def make_dataset(count: int, size: int, cfg: SimConfig, isp: IspParams | None = None, first_index: int = 0, burst=None):
    """Generate ``count`` examples from procedural scenes.

    Example ``k`` uses scene seed and noise stream derived from
    ``(cfg.seed, first_index + k)`` so any subset can be regenerated alone.
    ``burst=(i, n)`` switches to equal-exposure bursts.
    """
    isp = isp or IspParams()
    out = []
    for k in range(first_index, first_index + count):
        out.append(make_example(k, size, cfg, isp, burst))
    return out


def make_example(index: int, size: int, cfg: SimConfig, isp: IspParams | None = None, burst=None) -> BracketExample:
    isp = isp or IspParams()
    rng = example_rng(cfg.seed, index)
    scene_seed = int(rng.integers(2**63))
    length = cfg.frames_needed
    if burst is not None:
        length = max(length, burst[1] * cfg.ratio ** (burst[0] - 1))
    scene = procedural_hdr_scene(scene_seed, size, size, length=length, min_length=min(length, cfg.frames_needed))
    if burst is None:
        ex = synthesize_example(scene, isp, cfg, rng)
    else:
        ex = synthesize_burst(scene, isp, cfg, burst[0], burst[1], rng)
    ex.meta["scene_seed"] = scene_seed
    ex.meta["index"] = index
    return ex
