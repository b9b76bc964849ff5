"""Structure-preserving fusion of two modality feature pyramids.

Functions are written with plain arithmetic so they accept numpy arrays and
torch tensors alike. Structure maps broadcast across the channel axis:
a ``(B, 1, H, W)`` map against ``(B, C, H, W)`` features, or ``(H, W)``
against ``(C, H, W)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np


@dataclass
class UniqueStructureMasks:
    m_ir: Any
    m_vi: Any
    m_union: Any


def _shape(x) -> tuple:
    return tuple(x.shape)


def _is_binary(x) -> bool:
    return bool(((x == 0) | (x == 1)).all())


def j_operator(x, y):
    """(1 - x) * y + (1 - y) * x; exactly XOR on binary inputs."""
    if _shape(x) != _shape(y):
        raise ValueError(f"shape mismatch: {_shape(x)} vs {_shape(y)}")
    return (1 - x) * y + (1 - y) * x


def split_unique_masks(s_ir, s_vi) -> UniqueStructureMasks:
    """Split the unique-structure map into its infrared-only and visible-only parts."""
    if _shape(s_ir) != _shape(s_vi):
        raise ValueError(f"shape mismatch: {_shape(s_ir)} vs {_shape(s_vi)}")
    if not (_is_binary(s_ir) and _is_binary(s_vi)):
        raise ValueError("structure maps must be binary")
    m_ir = s_ir * (1 - s_vi)
    m_vi = s_vi * (1 - s_ir)
    return UniqueStructureMasks(m_ir, m_vi, m_ir + m_vi)


def enhance_features(f_ir, f_vi, s_ir, s_vi, masks: UniqueStructureMasks | None = None):
    """Re-weight each modality's features by where the other holds unique structure.

    enhanced_ir = s_ir + (1 - m_ir) * f_ir + m_vi * f_vi
    enhanced_vi = s_vi + m_ir * f_ir + (1 - m_vi) * f_vi
    """
    if _shape(f_ir) != _shape(f_vi):
        raise ValueError(f"feature shape mismatch: {_shape(f_ir)} vs {_shape(f_vi)}")
    if masks is None:
        masks = split_unique_masks(s_ir, s_vi)
    if _shape(f_ir)[-2:] != _shape(s_ir)[-2:]:
        raise ValueError(f"structure map {_shape(s_ir)} does not match features {_shape(f_ir)}")
    m_ir, m_vi = masks.m_ir, masks.m_vi
    enhanced_ir = s_ir + (1 - m_ir) * f_ir + m_vi * f_vi
    enhanced_vi = s_vi + m_ir * f_ir + (1 - m_vi) * f_vi
    return enhanced_ir, enhanced_vi


def sum_merge(level: int, enhanced_ir, enhanced_vi):
    return enhanced_ir + enhanced_vi


def fuse_pyramids(
    pyr_ir: Sequence,
    pyr_vi: Sequence,
    struct_ir: Sequence,
    struct_vi: Sequence,
    merge: Callable[[int, Any, Any], Any] = sum_merge,
) -> list:
    """Per-level masks -> enhancement -> merge. Returns the fused pyramid."""
    n = len(pyr_ir)
    if not (len(pyr_vi) == len(struct_ir) == len(struct_vi) == n):
        raise ValueError(
            f"level counts differ: {n}, {len(pyr_vi)}, {len(struct_ir)}, {len(struct_vi)}"
        )
    fused = []
    for k in range(n):
        e_ir, e_vi = enhance_features(pyr_ir[k], pyr_vi[k], struct_ir[k], struct_vi[k])
        fused.append(merge(k, e_ir, e_vi))
    return fused


def mask_pyramid(struct_ir: Sequence, struct_vi: Sequence) -> list[UniqueStructureMasks]:
    """Masks for every level, for inspection and export."""
    return [split_unique_masks(np.asarray(a), np.asarray(b)) for a, b in zip(struct_ir, struct_vi)]
