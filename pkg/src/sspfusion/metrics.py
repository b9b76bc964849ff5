"""Six fusion-quality metrics (MI, SF, AG, VIF, Qabf, SSIM) and report assembly.

Metric functions take float planes on the [0, 255] scale. Two-source metrics
are reported as the sum (MI, VIF) or mean (SSIM) over the infrared and visible
references; Qabf combines both sources by edge-strength weighting.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import jsonschema
import numpy as np
import torch
from scipy.signal import convolve2d

from . import losses
from .structmap import sobel_gradients

log = logging.getLogger(__name__)

METRIC_NAMES = ("MI", "SF", "AG", "VIF", "Qabf", "SSIM")

# Xydeas-Petrovic sigmoid constants
QABF_GAMMA_G, QABF_K_G, QABF_SIGMA_G = 0.9994, -15.0, 0.5
QABF_GAMMA_A, QABF_K_A, QABF_SIGMA_A = 0.9879, -22.0, 0.8

VIF_SIGMA_NSQ = 2.0
VIF_SCALES = 4


def _plane(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D plane, got shape {x.shape}")
    return x


def _same_shape(*planes) -> list[np.ndarray]:
    planes = [_plane(p) for p in planes]
    if len({p.shape for p in planes}) != 1:
        raise ValueError(f"shape mismatch: {[p.shape for p in planes]}")
    return planes


def quantize(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(x), 0, 255).astype(np.int64)


def entropy_bits(x: np.ndarray) -> float:
    counts = np.bincount(quantize(x).ravel(), minlength=256)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum() / math.log(2))


def mutual_information(a: np.ndarray, b: np.ndarray) -> float:
    """MI in bits from the 256x256 joint histogram of two 8-bit planes."""
    qa, qb = quantize(a).ravel(), quantize(b).ravel()
    joint = np.bincount(qa * 256 + qb, minlength=256 * 256).reshape(256, 256) / qa.size
    pa = joint.sum(axis=1)
    pb = joint.sum(axis=0)
    nz = joint > 0
    outer = np.outer(pa, pb)
    return float((joint[nz] * np.log(joint[nz] / outer[nz])).sum() / math.log(2))


def metric_mi(fused, ir, vi) -> float:
    fused, ir, vi = _same_shape(fused, ir, vi)
    return mutual_information(fused, ir) + mutual_information(fused, vi)


def metric_sf(fused) -> float:
    f = _plane(fused)
    rf = np.sqrt(np.mean(np.diff(f, axis=1) ** 2)) if f.shape[1] > 1 else 0.0
    cf = np.sqrt(np.mean(np.diff(f, axis=0) ** 2)) if f.shape[0] > 1 else 0.0
    return float(np.sqrt(rf**2 + cf**2))


def metric_ag(fused) -> float:
    f = _plane(fused)
    if min(f.shape) < 2:
        return 0.0
    dx = f[:-1, 1:] - f[:-1, :-1]
    dy = f[1:, :-1] - f[:-1, :-1]
    return float(np.mean(np.sqrt((dx**2 + dy**2) / 2)))


def _gauss_kernel(n: int, sd: float) -> np.ndarray:
    ax = np.arange(n) - (n - 1) / 2
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sd * sd))
    return g / g.sum()


def vif_min_size() -> int:
    """Smallest square side the four-scale VIFP can evaluate."""
    for side in range(1, 512):
        try:
            _vifp_sizes(side)
            return side
        except ValueError:
            continue
    raise RuntimeError("unreachable")


def _vifp_sizes(side: int) -> None:
    s = side
    for scale in range(1, VIF_SCALES + 1):
        n = 2 ** (VIF_SCALES - scale + 1) + 1
        if scale > 1:
            s = s - n + 1
            if s < 1:
                raise ValueError
            s = (s + 1) // 2
        if s - n + 1 < 1:
            raise ValueError


def vifp(ref: np.ndarray, dist: np.ndarray) -> float:
    """Pixel-domain visual information fidelity of ``dist`` against ``ref``."""
    ref, dist = _same_shape(ref, dist)
    try:
        _vifp_sizes(min(ref.shape))
    except ValueError:
        raise ValueError(f"image {ref.shape} too small for {VIF_SCALES}-scale VIF (needs >= {vif_min_size()} px)") from None
    num = 0.0
    den = 0.0
    eps = 1e-10
    for scale in range(1, VIF_SCALES + 1):
        n = 2 ** (VIF_SCALES - scale + 1) + 1
        win = _gauss_kernel(n, n / 5.0)
        if scale > 1:
            ref = convolve2d(ref, win, mode="valid")[::2, ::2]
            dist = convolve2d(dist, win, mode="valid")[::2, ::2]
        mu1 = convolve2d(ref, win, mode="valid")
        mu2 = convolve2d(dist, win, mode="valid")
        s1 = convolve2d(ref * ref, win, mode="valid") - mu1 * mu1
        s2 = convolve2d(dist * dist, win, mode="valid") - mu2 * mu2
        s12 = convolve2d(ref * dist, win, mode="valid") - mu1 * mu2
        s1 = np.maximum(s1, 0)
        s2 = np.maximum(s2, 0)

        g = s12 / (s1 + eps)
        sv = s2 - g * s12
        flat_ref = s1 < eps
        g[flat_ref] = 0
        sv[flat_ref] = s2[flat_ref]
        s1[flat_ref] = 0
        flat_dist = s2 < eps
        g[flat_dist] = 0
        sv[flat_dist] = 0
        neg = g < 0
        sv[neg] = s2[neg]
        g[neg] = 0
        sv = np.maximum(sv, eps)

        num += np.sum(np.log10(1 + g * g * s1 / (sv + VIF_SIGMA_NSQ)))
        den += np.sum(np.log10(1 + s1 / VIF_SIGMA_NSQ))
    return float(num / den) if den > 0 else 1.0


def metric_vif(fused, ir, vi) -> float:
    fused, ir, vi = _same_shape(fused, ir, vi)
    return vifp(ir, fused) + vifp(vi, fused)


def _strength_orientation(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx, gy = sobel_gradients(img)
    g = np.sqrt(gx * gx + gy * gy)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(gx == 0, np.pi / 2, np.arctan(gy / np.where(gx == 0, 1.0, gx)))
    return g, a


def _edge_preservation(g_src, a_src, g_f, a_f) -> np.ndarray:
    hi = np.maximum(g_src, g_f)
    lo = np.minimum(g_src, g_f)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel_g = np.where(hi == 0, 1.0, lo / np.where(hi == 0, 1.0, hi))
    rel_a = 1 - np.abs(a_src - a_f) / (np.pi / 2)
    q_g = QABF_GAMMA_G / (1 + np.exp(QABF_K_G * (rel_g - QABF_SIGMA_G)))
    q_a = QABF_GAMMA_A / (1 + np.exp(QABF_K_A * (rel_a - QABF_SIGMA_A)))
    return q_g * q_a


def metric_qabf(fused, ir, vi) -> float:
    fused, ir, vi = _same_shape(fused, ir, vi)
    g_f, a_f = _strength_orientation(fused)
    g_a, a_a = _strength_orientation(ir)
    g_b, a_b = _strength_orientation(vi)
    q_af = _edge_preservation(g_a, a_a, g_f, a_f)
    q_bf = _edge_preservation(g_b, a_b, g_f, a_f)
    wsum = np.sum(g_a + g_b)
    if wsum == 0:
        return 0.0
    return float(np.sum(q_af * g_a + q_bf * g_b) / wsum)


def qabf_ceiling() -> float:
    """Qabf of a perfect copy: both preservation sigmoids evaluated at zero loss."""
    q_g = QABF_GAMMA_G / (1 + math.exp(QABF_K_G * (1 - QABF_SIGMA_G)))
    q_a = QABF_GAMMA_A / (1 + math.exp(QABF_K_A * (1 - QABF_SIGMA_A)))
    return q_g * q_a


def ssim_255(a, b) -> float:
    a, b = _same_shape(a, b)
    return float(losses.ssim(torch.from_numpy(a), torch.from_numpy(b), data_range=255.0)[0])


def metric_ssim(fused, ir, vi) -> float:
    fused, ir, vi = _same_shape(fused, ir, vi)
    return 0.5 * (ssim_255(fused, ir) + ssim_255(fused, vi))


def all_metrics(fused, ir, vi) -> dict[str, float]:
    return {
        "MI": metric_mi(fused, ir, vi),
        "SF": metric_sf(fused),
        "AG": metric_ag(fused),
        "VIF": metric_vif(fused, ir, vi),
        "Qabf": metric_qabf(fused, ir, vi),
        "SSIM": metric_ssim(fused, ir, vi),
    }


REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["metrics", "per_pair", "aggregate", "n_pairs", "skipped", "metadata"],
    "properties": {
        "metrics": {"type": "array", "items": {"enum": list(METRIC_NAMES)}},
        "per_pair": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": list(METRIC_NAMES),
                "properties": {m: {"type": "number"} for m in METRIC_NAMES},
            },
        },
        "aggregate": {
            "type": "object",
            "required": list(METRIC_NAMES),
            "properties": {m: {"type": "number"} for m in METRIC_NAMES},
        },
        "n_pairs": {"type": "integer", "minimum": 1},
        "skipped": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["pair_id", "error"],
                "properties": {"pair_id": {"type": "string"}, "error": {"type": "string"}},
            },
        },
        "metadata": {"type": "object"},
    },
}


@dataclass
class MetricReport:
    per_pair: dict[str, dict[str, float]]
    aggregate: dict[str, float]
    metadata: dict = field(default_factory=dict)
    skipped: list[dict[str, str]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "metrics": list(METRIC_NAMES),
            "per_pair": self.per_pair,
            "aggregate": self.aggregate,
            "n_pairs": len(self.per_pair),
            "skipped": self.skipped,
            "metadata": self.metadata,
        }

    def write_json(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    def write_csv(self, path) -> Path:
        """One row per pair then a final ``aggregate`` row."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("pair_id",) + METRIC_NAMES)
            for pid, vals in self.per_pair.items():
                w.writerow([pid] + [repr(vals[m]) for m in METRIC_NAMES])
            w.writerow(["aggregate"] + [repr(self.aggregate[m]) for m in METRIC_NAMES])
        return path

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        jsonschema.validate(d, REPORT_SCHEMA)
        return cls(d["per_pair"], d["aggregate"], d.get("metadata", {}), d.get("skipped", []))

    @classmethod
    def read_json(cls, path) -> "MetricReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def aggregate(per_pair: dict[str, dict[str, float]]) -> dict[str, float]:
    return {m: float(np.mean([v[m] for v in per_pair.values()])) for m in METRIC_NAMES}


def evaluate_dataset(
    triples: Iterable[tuple[np.ndarray, np.ndarray, np.ndarray]],
    ids: Sequence[str],
    metadata: dict | None = None,
    jobs: int = 1,
) -> MetricReport:
    """Score (ir, vi, fused) Y-plane triples given in [0, 1].

    A pair whose metrics raise is logged, left out of the aggregate and listed
    under ``skipped``.
    """
    triples = list(triples)
    ids = list(ids)
    if not triples:
        raise ValueError("no pairs to evaluate")
    if len(ids) != len(triples):
        raise ValueError(f"{len(triples)} triples but {len(ids)} ids")

    def score(t):
        ir, vi, fused = (np.asarray(x, dtype=np.float64) * 255.0 for x in t)
        return all_metrics(fused, ir, vi)

    def safe(args):
        pid, t = args
        try:
            return pid, score(t), None
        except Exception as exc:  # recorded per pair, evaluation continues
            log.warning("pair %s failed: %s", pid, exc)
            return pid, None, f"{type(exc).__name__}: {exc}"

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        results = list(pool.map(safe, zip(ids, triples)))

    per_pair = {}
    skipped = []
    for pid, vals, err in sorted(results, key=lambda r: r[0]):
        if err is None:
            per_pair[pid] = vals
        else:
            skipped.append({"pair_id": pid, "error": err})
    if not per_pair:
        raise ValueError(f"every pair failed: {skipped}")
    meta = {"timestamp": time.strftime("%Y-%m-%dT%H:%M:%S")}
    meta.update(metadata or {})
    return MetricReport(per_pair, aggregate(per_pair), meta, skipped)
