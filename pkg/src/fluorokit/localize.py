"""Deterministic vertebra localization from projected label masks.

Boxes come from the tight bounds of a label's silhouette with a 10% margin
of the longer side added to both axes (5% per edge); crops are square
windows of the long side, bilinearly resampled to 224x224, and each crop
carries the image-plane shift/scale adjustment for its camera.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CropTooSmallError, InvalidInputError
from .drr import DrrImage, render_mask
from .geometry import CameraMatrix, CropTransform, adjust_for_crop
from .volume import Volume, label_ids

CROP_SIZE = 224


@dataclass(frozen=True)
class BoundingBox:
    """Pixel-count box: u_min/v_min are the first covered pixel indices."""

    u_min: int
    v_min: int
    width: int
    height: int

    @property
    def center(self) -> tuple[float, float]:
        return (self.u_min + (self.width - 1) / 2.0, self.v_min + (self.height - 1) / 2.0)

    @property
    def long_side(self) -> int:
        return max(self.width, self.height)


@dataclass(frozen=True)
class CropWindow:
    label: int
    box: BoundingBox  # post-margin box in the full image
    square_side: float
    transform: CropTransform
    camera: CameraMatrix  # adjusted camera (Q P)
    image: np.ndarray  # (224, 224) float32 resampled crop

    def __post_init__(self):
        img = np.ascontiguousarray(np.asarray(self.image, dtype=np.float32))
        if img.shape != (CROP_SIZE, CROP_SIZE):
            raise InvalidInputError(f"crop image must be {CROP_SIZE}x{CROP_SIZE}")
        img.flags.writeable = False
        object.__setattr__(self, "image", img)

    @property
    def center_px(self) -> tuple[float, float]:
        return (CROP_SIZE / 2.0, CROP_SIZE / 2.0)


def boxes_from_mask(mask: np.ndarray, margin_frac: float = 0.10) -> BoundingBox | None:
    """Tight box of the nonzero pixels, inflated by margin_frac of the long
    side on each axis (half per edge) and clamped to the image."""
    m = np.asarray(mask)
    if m.ndim != 2:
        raise InvalidInputError("mask must be 2D")
    ys, xs = np.nonzero(m)
    if xs.size == 0:
        return None
    u0, u1 = int(xs.min()), int(xs.max())
    v0, v1 = int(ys.min()), int(ys.max())
    w = u1 - u0 + 1
    h = v1 - v0 + 1
    margin = margin_frac * max(w, h)
    half = margin / 2.0
    u0m = int(np.floor(u0 - half))
    v0m = int(np.floor(v0 - half))
    u1m = int(np.ceil(u1 + half))
    v1m = int(np.ceil(v1 + half))
    u0m, v0m = max(u0m, 0), max(v0m, 0)
    u1m = min(u1m, m.shape[1] - 1)
    v1m = min(v1m, m.shape[0] - 1)
    return BoundingBox(u0m, v0m, u1m - u0m + 1, v1m - v0m + 1)


def tight_box(mask: np.ndarray) -> BoundingBox | None:
    return boxes_from_mask(mask, margin_frac=0.0)


def resample_window(img: np.ndarray, t_x: float, t_y: float, scale: float,
                    out_size: int = CROP_SIZE) -> np.ndarray:
    """Bilinear resample of the window starting at (t_x, t_y) in the source.

    Output pixel (a, b) samples the source at (a/scale + t_x, b/scale + t_y),
    matching the crop-shift camera adjustment exactly. Samples outside the
    source read 0.
    """
    a = np.asarray(img, dtype=np.float32)
    h, w = a.shape
    idx = np.arange(out_size, dtype=np.float64)
    us = idx / scale + t_x
    vs = idx / scale + t_y
    u0 = np.floor(us).astype(np.int64)
    v0 = np.floor(vs).astype(np.int64)
    fu = (us - u0).astype(np.float32)
    fv = (vs - v0).astype(np.float32)

    padded = np.zeros((h + 2, w + 2), dtype=np.float32)
    padded[1:-1, 1:-1] = a
    cu0 = np.clip(u0 + 1, 0, w + 1)
    cu1 = np.clip(u0 + 2, 0, w + 1)
    cv0 = np.clip(v0 + 1, 0, h + 1)
    cv1 = np.clip(v0 + 2, 0, h + 1)
    # Avoid sampling wrapped values for far out-of-range coordinates.
    on_u = (u0 >= -1) & (u0 <= w - 1)
    on_v = (v0 >= -1) & (v0 <= h - 1)

    p00 = padded[np.ix_(cv0, cu0)]
    p01 = padded[np.ix_(cv0, cu1)]
    p10 = padded[np.ix_(cv1, cu0)]
    p11 = padded[np.ix_(cv1, cu1)]
    top = p00 * (1 - fu)[None, :] + p01 * fu[None, :]
    bot = p10 * (1 - fu)[None, :] + p11 * fu[None, :]
    out = top * (1 - fv)[:, None] + bot * fv[:, None]
    out *= on_u[None, :].astype(np.float32)
    out *= on_v[:, None].astype(np.float32)
    return out


def crop_vertebra(
    img: np.ndarray,
    cam: CameraMatrix,
    box: BoundingBox,
    label: int = 0,
    min_side_px: float = 8.0,
) -> CropWindow:
    """Square crop of the box's long side, resampled to 224x224, plus the
    crop-adjusted camera."""
    a = np.asarray(img)
    if a.ndim != 2:
        raise InvalidInputError("image must be 2D")
    side = float(box.long_side)
    if side < min_side_px:
        raise CropTooSmallError(f"crop side {side} px below minimum {min_side_px}")
    cu, cv = box.center
    # Window placed so the box center maps to crop coordinate (112, 112).
    t_x = cu - side / 2.0
    t_y = cv - side / 2.0
    # Keep the window inside the image when it fits; center it otherwise.
    h, w = a.shape
    t_x = float(np.clip(t_x, 0.0, w - side)) if side <= w else (w - side) / 2.0
    t_y = float(np.clip(t_y, 0.0, h - side)) if side <= h else (h - side) / 2.0
    scale = CROP_SIZE / side
    transform = CropTransform(t_x, t_y, scale)
    crop = resample_window(a, t_x, t_y, scale)
    return CropWindow(
        label=label,
        box=box,
        square_side=side,
        transform=transform,
        camera=adjust_for_crop(cam, transform),
        image=crop,
    )


def localize_all(
    img: np.ndarray | DrrImage,
    cam: CameraMatrix,
    labels: Volume,
    step_mm: float | None = None,
    label_list=None,
    margin_frac: float = 0.10,
) -> list[CropWindow]:
    """Crop every fully visible label (tight box touching no image edge)."""
    a = img.normalized if isinstance(img, DrrImage) else np.asarray(img)
    h, w = a.shape
    out = []
    ids = label_list if label_list is not None else label_ids(labels)
    for lid in ids:
        mask = render_mask(labels, int(lid), cam, w, h, step_mm)
        tight = tight_box(mask)
        if tight is None:
            continue
        if (
            tight.u_min == 0
            or tight.v_min == 0
            or tight.u_min + tight.width >= w
            or tight.v_min + tight.height >= h
        ):
            continue  # clipped by the frame: not fully visible
        box = boxes_from_mask(mask, margin_frac)
        out.append(crop_vertebra(a, cam, box, label=int(lid)))
    return out


def crop_mask(window: CropWindow, mask: np.ndarray) -> np.ndarray:
    """Resample a full-image mask through a crop's transform (float 0..1)."""
    t = window.transform
    return resample_window((np.asarray(mask) > 0).astype(np.float32), t.t_x, t.t_y, t.scale)
