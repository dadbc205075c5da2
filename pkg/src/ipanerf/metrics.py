"""Image-quality metrics and the four-partition evaluation of an attacked model."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_RANGE = 1.0

PARTITIONS = ("V-Illusory", "V-Train", "V-Test", "V-Constraint")


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; identical images give PSNR_CAP."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable Gaussian filter over the two spatial axes keeping only fully-covered positions."""
    half = len(g) // 2
    out = correlate1d(img, g, axis=0, mode="constant")
    out = correlate1d(out, g, axis=1, mode="constant")
    return out[half:img.shape[0] - half, half:img.shape[1] - half]


def ssim(a, b) -> float:
    """Mean local SSIM (11x11 Gaussian window, sigma 1.5), averaged over channels."""
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[:2]}")
    g = _gaussian_window()
    c1 = (SSIM_K1 * SSIM_RANGE) ** 2
    c2 = (SSIM_K2 * SSIM_RANGE) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# --- LPIPS plug-in seam -------------------------------------------------------

_lpips_backend: Optional[Callable[[np.ndarray, np.ndarray], float]] = None


def register_lpips(backend: Optional[Callable[[np.ndarray, np.ndarray], float]]) -> None:
    """Install (or with None, remove) a perceptual-distance function taking two HxWx3 images."""
    global _lpips_backend
    _lpips_backend = backend


def lpips(a, b, backend=None) -> Optional[float]:
    """Distance from the registered perceptual backend; None when no backend is available."""
    backend = backend or _lpips_backend
    if backend is None:
        return None
    a, b = _check_pair(a, b)
    return float(backend(a, b))


@dataclass(frozen=True)
class MetricTriple:
    psnr: float
    ssim: float
    lpips: Optional[float] = None


def measure(rendered, reference, backend=None) -> MetricTriple:
    return MetricTriple(psnr(rendered, reference), ssim(rendered, reference), lpips(rendered, reference, backend))


@dataclass
class ViewMetric:
    partition: str
    view: str
    metrics: MetricTriple


@dataclass
class PartitionReport:
    scene: str
    schedule_id: str
    rows: List[ViewMetric] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)

    def partition(self, name: str) -> List[ViewMetric]:
        return [r for r in self.rows if r.partition == name]

    def mean(self, name: str) -> Optional[MetricTriple]:
        rows = self.partition(name)
        if not rows:
            return None
        lp = [r.metrics.lpips for r in rows]
        return MetricTriple(
            float(np.mean([r.metrics.psnr for r in rows])),
            float(np.mean([r.metrics.ssim for r in rows])),
            None if any(v is None for v in lp) else float(np.mean(lp)),
        )

    @property
    def means(self) -> Dict[str, Optional[MetricTriple]]:
        return {p: self.mean(p) for p in PARTITIONS}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["partition", "view", "psnr", "ssim", "lpips"])
        for r in self.rows:
            m = r.metrics
            w.writerow([r.partition, r.view, f"{m.psnr:.6f}", f"{m.ssim:.6f}",
                        "" if m.lpips is None else f"{m.lpips:.6f}"])
        return buf.getvalue()

    def to_table(self) -> str:
        lines = [f"# scene: {self.scene}", f"# schedule: {self.schedule_id}"]
        lines += [f"# {n}" for n in self.notes]
        lines.append(f"# SSIM: gaussian window {SSIM_WINDOW}, sigma {SSIM_SIGMA}, K1 {SSIM_K1}, K2 {SSIM_K2}, "
                     f"range {SSIM_RANGE}; PSNR peak 1.0, cap {PSNR_CAP} dB")
        head1 = f"{'':<10}" + "".join(f"| {p:^26}" for p in PARTITIONS)
        head2 = f"{'':<10}" + "| {:>8} {:>8} {:>8}".format("PSNR", "SSIM", "LPIPS") * len(PARTITIONS)
        lines += [head1, head2]
        row = f"{'mean':<10}"
        for p in PARTITIONS:
            m = self.mean(p)
            if m is None:
                row += "| {:>8} {:>8} {:>8}".format("-", "-", "-")
            else:
                lp = "n/a" if m.lpips is None else f"{m.lpips:.4f}"
                row += f"| {m.psnr:>8.2f} {m.ssim:>8.4f} {lp:>8}"
        lines.append(row)
        return "\n".join(lines) + "\n"


def evaluate_partitions(model, dataset, target, constraints=None, *, n_samples: int = 64, chunk: int = 8192,
                        schedule_id: str = "", lpips_backend=None) -> PartitionReport:
    """Render ``model`` over the four view partitions and score each against its reference.

    V-Illusory compares the backdoor render with the target image, V-Train (backdoor
    view excluded) and V-Test compare with scene ground truth, and V-Constraint compares
    with the clean model's renders stored in ``constraints``.
    """
    from .nerf_core import render_view

    if constraints is not None and len(constraints) and not constraints.has_images:
        raise ValueError("constraint views lack approximate ground-truth images")
    intr, near, far = dataset.intrinsics, dataset.near, dataset.far

    def render(pose):
        return render_view(model, pose, intr, chunk, n_samples, near, far)

    report = PartitionReport(dataset.scene_name, schedule_id,
                             notes=["V-Train excludes the backdoor view, which is reported under V-Illusory"])
    train = dataset.split("train")
    bd = target.backdoor_view_index
    report.rows.append(ViewMetric("V-Illusory", train[bd].name or f"train[{bd}]",
                                  measure(render(train[bd].pose), target.image, lpips_backend)))
    for k, v in enumerate(train):
        if k != bd:
            report.rows.append(ViewMetric("V-Train", v.name or f"train[{k}]", measure(render(v.pose), v.image, lpips_backend)))
    for k, v in enumerate(dataset.split("test")):
        report.rows.append(ViewMetric("V-Test", v.name or f"test[{k}]", measure(render(v.pose), v.image, lpips_backend)))
    if constraints is not None:
        for k, cv in enumerate(constraints.views):
            th, ph = cv.spherical.degrees
            name = f"angle{cv.angle:g}_theta{th:.3f}_phi{ph:.3f}"
            report.rows.append(ViewMetric("V-Constraint", name, measure(render(cv.pose), cv.image, lpips_backend)))
    return report
