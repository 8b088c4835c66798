"""Record filtering rounds and square-crop geometry.

Filtering applies per-source profiles: curated portrait sets keep everything,
the web-scraped source additionally enforces a minimum face-box side and the
CLIP real-human / text-overlay verdicts. Rules run in a fixed order so reject
reasons are deterministic and audit counts reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .schema import AttributeRecord, Box, Point

REJECT_REASONS: tuple[str, ...] = (
    "ok",
    "no_face",
    "multiple_faces",
    "low_resolution",
    "not_real_human",
    "text_overlay",
)

DEFAULT_CROP_MARGIN = 1.3

# Reference 5-point landmark layout (fractions of the crop side) used by the
# optional similarity alignment: pupils, nose tip, mouth commissures.
DEFAULT_ALIGN_TEMPLATE: tuple[Point, ...] = (
    (0.31, 0.46),
    (0.69, 0.46),
    (0.50, 0.64),
    (0.35, 0.82),
    (0.65, 0.82),
)


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetProfile:
    """Per-source filter thresholds."""

    name: str
    min_face_side_px: int | None
    require_single_face: bool
    require_real_human: bool
    reject_text_overlay: bool


# Curated sources keep all samples; only the web-scraped source gets the
# 250px face-region floor and the CLIP checks.
BUILTIN_PROFILES: dict[str, DatasetProfile] = {
    "easyportrait": DatasetProfile(
        name="easyportrait",
        min_face_side_px=None,
        require_single_face=True,
        require_real_human=False,
        reject_text_overlay=False,
    ),
    "ffhq": DatasetProfile(
        name="ffhq",
        min_face_side_px=None,
        require_single_face=True,
        require_real_human=False,
        reject_text_overlay=False,
    ),
    "laion_face": DatasetProfile(
        name="laion_face",
        min_face_side_px=250,
        require_single_face=True,
        require_real_human=True,
        reject_text_overlay=True,
    ),
    "other": DatasetProfile(
        name="other",
        min_face_side_px=None,
        require_single_face=True,
        require_real_human=True,
        reject_text_overlay=True,
    ),
}


@dataclass(frozen=True)
class FilterVerdict:
    accepted: bool
    reason: str

    def __post_init__(self) -> None:
        assert self.accepted == (self.reason == "ok")


_ACCEPT = FilterVerdict(accepted=True, reason="ok")


def check_image(r: AttributeRecord, p: DatasetProfile) -> FilterVerdict:
    """Apply the profile's rules in fixed order; the first failure wins.

    Order: face count, resolution, real-human, text-overlay.
    """
    if r.detection.face_count == 0:
        return FilterVerdict(accepted=False, reason="no_face")
    if p.require_single_face and r.detection.face_count > 1:
        return FilterVerdict(accepted=False, reason="multiple_faces")

    if p.min_face_side_px is not None:
        x0, y0, x1, y1 = r.detection.box  # box is present when face_count >= 1
        if min(x1 - x0, y1 - y0) < p.min_face_side_px:
            return FilterVerdict(accepted=False, reason="low_resolution")

    if p.require_real_human and not r.clip.is_real_human:
        return FilterVerdict(accepted=False, reason="not_real_human")
    if p.reject_text_overlay and r.clip.has_text_overlay:
        return FilterVerdict(accepted=False, reason="text_overlay")
    return _ACCEPT


def compute_crop(
    box: Box,
    landmarks: tuple[Point, ...] | None,
    image_size: tuple[int, int],
    margin: float = DEFAULT_CROP_MARGIN,
) -> tuple[int, int, int, int]:
    """Square crop around the face box.

    side = round(margin * max(box w, box h)), centered on the box center,
    shifted (never shrunk) to stay inside the image; shrunk only when the
    side exceeds the smaller image dimension. The result always contains the
    box center.
    """
    x0, y0, x1, y1 = box
    bw, bh = x1 - x0, y1 - y0
    if bw <= 0 or bh <= 0:
        raise GeometryError(f"degenerate box {box}")
    if margin < 1.0:
        raise GeometryError(f"margin must be >= 1, got {margin}")
    w, h = image_size

    side = int(round(margin * max(bw, bh)))
    side = max(1, min(side, w, h))

    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    cx0 = int(round(cx - side / 2.0))
    cy0 = int(round(cy - side / 2.0))
    cx0 = min(max(cx0, 0), w - side)
    cy0 = min(max(cy0, 0), h - side)
    return (cx0, cy0, cx0 + side, cy0 + side)


def similarity_align(
    landmarks: tuple[Point, ...],
    template: tuple[Point, ...] = DEFAULT_ALIGN_TEMPLATE,
    output_side: int = 512,
) -> np.ndarray:
    """Least-squares similarity transform (2x3) mapping landmarks onto the
    template scaled to ``output_side``. Off by default in the pipeline; kept
    for extractor stages that want template-aligned inference crops.
    """
    src = np.asarray(landmarks, dtype=np.float64)
    dst = np.asarray(template, dtype=np.float64) * float(output_side)
    if src.shape != dst.shape or src.shape[1] != 2:
        raise GeometryError(f"landmarks/template shape mismatch: {src.shape} vs {dst.shape}")

    src_mean = src.mean(axis=0)
    dst_mean = dst.mean(axis=0)
    src_c = src - src_mean
    dst_c = dst - dst_mean
    var_src = (src_c**2).sum() / len(src)
    if var_src == 0:
        raise GeometryError("degenerate landmarks: zero variance")

    cov = dst_c.T @ src_c / len(src)
    u, s, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(u @ vt))
    diag = np.diag([1.0, d])
    rotation = u @ diag @ vt
    scale = np.trace(np.diag(s) @ diag) / var_src
    translation = dst_mean - scale * rotation @ src_mean

    m = np.empty((2, 3), dtype=np.float64)
    m[:, :2] = scale * rotation
    m[:, 2] = translation
    return m
