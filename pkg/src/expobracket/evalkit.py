"""Rendering of raw estimates and full-reference quality metrics.

Predictions and targets go through the same fixed pipeline (bilinear
demosaic, white balance, color matrix, mu-law tone map, 16-bit quantization)
before PSNR/SSIM are measured on the interior of the rendered images.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, DimensionError
from .rawimg import DEFAULT_MU, quantize, tonemap, unpack_bayer

PSNR_CAP = 99.0
BORDERS = {"ire": 10, "ire+": 4}

_K_RB = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]], dtype=np.float64) / 4
_K_G = np.array([[0, 1, 0], [1, 4, 1], [0, 1, 0]], dtype=np.float64) / 4


def demosaic_bilinear(mosaic: np.ndarray) -> np.ndarray:
    """RGGB mosaic ``(H, W)`` to RGB ``(3, H, W)``.

    Missing samples are interpolated with the usual bilinear kernels,
    normalized by the local sample count so borders stay unbiased.
    """
    mosaic = np.asarray(mosaic, dtype=np.float64)
    h, w = mosaic.shape
    masks = np.zeros((3, h, w))
    masks[0, 0::2, 0::2] = 1
    masks[1, 0::2, 1::2] = 1
    masks[1, 1::2, 0::2] = 1
    masks[2, 1::2, 1::2] = 1
    out = np.empty((3, h, w))
    for c, k in enumerate((_K_RB, _K_G, _K_RB)):
        num = ndimage.convolve(mosaic * masks[c], k, mode="constant")
        den = ndimage.convolve(masks[c], k, mode="constant")
        out[c] = np.where(masks[c] > 0, mosaic, num / den)
    return out


def raw_to_linear_rgb(packed: np.ndarray, isp) -> np.ndarray:
    """Packed raw ``(4, h, w)`` to linear RGB ``(3, 2h, 2w)``."""
    if isp is None:
        raise ConfigurationError("post-processing needs ISP parameters")
    rgb = demosaic_bilinear(unpack_bayer(np.asarray(packed, dtype=np.float64)))
    g_r, g_b = isp.wb_gains
    rgb[0] *= g_r
    rgb[2] *= g_b
    return np.einsum("ij,jhw->ihw", isp.matrix, rgb)


def postprocess(packed: np.ndarray, isp, mu: float = DEFAULT_MU) -> np.ndarray:
    """Render a raw estimate to tone-mapped 16-bit RGB ``(3, 2h, 2w)``."""
    rgb = np.maximum(raw_to_linear_rgb(packed, isp), 0)
    return quantize(tonemap(rgb, mu), 16)


def _interior(a, b, border):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes {a.shape} and {b.shape} differ")
    h, w = a.shape[-2:]
    if border < 0 or 2 * border >= min(h, w):
        raise DimensionError(f"border {border} too large for {h}x{w} images")
    if border:
        a = a[..., border : h - border, border : w - border]
        b = b[..., border : h - border, border : w - border]
    return a, b


def _normalize(x, peak):
    return x / peak if peak else x


def psnr(a, b, border: int = 0, peak: float = 65535.0) -> float:
    """PSNR in dB of images scaled to ``[0, 1]`` by ``peak``, capped at 99 dB."""
    a, b = _interior(a, b, border)
    mse = np.mean((_normalize(a, peak) - _normalize(b, peak)) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10 * np.log10(1.0 / mse)))


def ssim(a, b, border: int = 0, peak: float = 65535.0) -> float:
    """Single-scale SSIM (11x11 Gaussian window, sigma 1.5, K1=0.01, K2=0.03).

    Channels (leading axes) are scored separately and averaged.
    """
    a, b = _interior(a, b, border)
    a = _normalize(a, peak)
    b = _normalize(b, peak)
    if a.ndim == 2:
        a, b = a[None], b[None]
    c1, c2 = 0.01**2, 0.03**2
    scores = []
    for x, y in zip(a.reshape(-1, *a.shape[-2:]), b.reshape(-1, *b.shape[-2:])):
        filt = lambda z: ndimage.gaussian_filter(z, 1.5, truncate=3.5, mode="reflect")  # noqa: E731
        mx, my = filt(x), filt(y)
        sxx = filt(x * x) - mx * mx
        syy = filt(y * y) - my * my
        sxy = filt(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def render_border(task: str) -> int:
    """Excluded border in rendered pixels: the input-pixel count doubled."""
    return 2 * BORDERS[task]


@dataclass
class MetricReport:
    names: list = field(default_factory=list)
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def add(self, name, p, s):
        self.names.append(name)
        self.psnr.append(float(p))
        self.ssim.append(float(s))

    @property
    def count(self) -> int:
        return len(self.names)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    def to_text(self) -> str:
        width = max([len("image"), len("mean")] + [len(n) for n in self.names])
        lines = [f"{'image':<{width}}  {'psnr':>8}  {'ssim':>7}"]
        for n, p, s in zip(self.names, self.psnr, self.ssim):
            lines.append(f"{n:<{width}}  {p:8.3f}  {s:7.4f}")
        lines.append(f"{'mean':<{width}}  {self.mean_psnr:8.3f}  {self.mean_ssim:7.4f}")
        if self.config:
            lines.append("# " + " ".join(f"{k}={v}" for k, v in sorted(self.config.items())))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["image", "psnr", "ssim"])
        for n, p, s in zip(self.names, self.psnr, self.ssim):
            writer.writerow([n, f"{p:.6f}", f"{s:.6f}"])
        writer.writerow(["mean", f"{self.mean_psnr:.6f}", f"{self.mean_ssim:.6f}"])
        return buf.getvalue()

    def write(self, stem) -> None:
        stem = Path(stem)
        stem.with_suffix(".txt").write_text(self.to_text())
        stem.with_suffix(".csv").write_text(self.to_csv())


def score_pair(pred: np.ndarray, gt: np.ndarray, isp, task: str = "ire", mu: float = DEFAULT_MU):
    """Render both raw images identically and return ``(psnr, ssim)``."""
    a = postprocess(pred, isp, mu)
    b = postprocess(gt, isp, mu)
    border = render_border(task)
    return psnr(a, b, border), ssim(a, b, border)


def evaluate(predict, dataset, isp, task: str = "ire", mu: float = DEFAULT_MU, config=None) -> MetricReport:
    """Score ``predict(example) -> packed raw`` on every example of ``dataset``."""
    report = MetricReport(config=dict(config or {}))
    for k, ex in enumerate(dataset):
        if ex.task != task:
            raise ConfigurationError(f"example {k} is task {ex.task!r}, evaluation expects {task!r}")
        pred = predict(ex)
        p, s = score_pair(pred, ex.gt, isp, task, mu)
        report.add(ex.meta.get("name", f"{k:04d}"), p, s)
    return report


def write_pnm(path, image: np.ndarray) -> None:
    """Write a 16-bit PGM (``(H, W)``) or PPM (``(3, H, W)``) with maxval 65535."""
    image = np.asarray(image)
    if image.ndim == 2:
        magic, h, w = b"P5", *image.shape
        payload = image
    elif image.ndim == 3 and image.shape[0] == 3:
        magic, (h, w) = b"P6", image.shape[1:]
        payload = np.moveaxis(image, 0, -1)
    else:
        raise DimensionError(f"cannot write image of shape {image.shape}")
    header = magic + f"\n{w} {h}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(payload).astype(">u2").tobytes())


def read_pnm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1  # single whitespace byte before the raster
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic not in (b"P5", b"P6") or maxval != 65535:
        raise DimensionError(f"{path}: expected a 16-bit P5/P6 file")
    channels = 3 if magic == b"P6" else 1
    pixels = np.frombuffer(data, dtype=">u2", count=channels * w * h, offset=pos).astype(np.uint16)
    if channels == 1:
        return pixels.reshape(h, w)
    return np.moveaxis(pixels.reshape(h, w, 3), -1, 0)
