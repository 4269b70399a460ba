"""Defect discrimination confidence from segmentation probabilities.

For every connected component of the probability map, sweep a level
``lambda`` through (0, 1] and measure the physical dimensions of the
component's ``prob >= lambda`` superlevel region (minimum-area rotated
bounding rectangle, rotating calipers on the convex hull).  Those
g-curves are non-increasing in lambda, so a factory threshold can be
inverted: the confidence that the component is a real defect is the
largest probability level at which its dimensions still reach the
threshold, as a percentage.

Below the curve everywhere -> 0 %; meeting the threshold even at
lambda = 1 (the certainly-defective region) -> 100 %; otherwise the
interpolated crossing level times 100.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

from .raster_io import atomic_write_bytes
from .rough import as_probability_mask

__all__ = [
    "Standard",
    "ComponentReport",
    "load_standards",
    "uniform_lambda_grid",
    "superlevel_components",
    "g_curve",
    "discrimination_confidence",
    "grade",
    "reports_to_json",
    "report_from_dict",
    "render_overlay",
]

_EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass(frozen=True)
class Standard:
    """Factory threshold: a defect must reach length_mm or width_mm."""

    defect_class: str
    length_mm: float
    width_mm: float

    def __post_init__(self):
        if self.length_mm <= 0 or self.width_mm <= 0:
            raise ValueError(f"thresholds must be positive, got {self.length_mm}/{self.width_mm}")


def load_standards(path) -> list[Standard]:
    """Parse a standards file: JSON array of {class, length_mm, width_mm}."""
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(data, list) or not data:
        raise ValueError(f"{path}: expected a non-empty JSON array of standards")
    out = []
    for i, entry in enumerate(data):
        for key in ("class", "length_mm", "width_mm"):
            if key not in entry:
                raise ValueError(f"{path}: standard #{i} is missing field '{key}'")
        try:
            out.append(
                Standard(
                    defect_class=str(entry["class"]),
                    length_mm=float(entry["length_mm"]),
                    width_mm=float(entry["width_mm"]),
                )
            )
        except (TypeError, ValueError) as exc:
            raise ValueError(f"{path}: standard #{i} ({entry.get('class')}): {exc}") from exc
    return out


def uniform_lambda_grid(levels: int = 101, start: float = 0.01) -> np.ndarray:
    """Default grid: ``levels`` uniform values from ``start`` (the g(0+)
    approximation) up to 1.0 inclusive."""
    if levels < 2 or not (0.0 < start < 1.0):
        raise ValueError(f"bad lambda grid parameters: levels={levels}, start={start}")
    return np.linspace(start, 1.0, levels)


def _check_grid(lambda_grid) -> np.ndarray:
    grid = np.asarray(lambda_grid, dtype=np.float64)
    if grid.ndim != 1 or grid.size < 1:
        raise ValueError("lambda grid must be a non-empty 1-D array")
    if grid.min() <= 0.0 or grid.max() > 1.0:
        raise ValueError("lambda grid levels must lie in (0, 1]")
    if (np.diff(grid) <= 0).any():
        raise ValueError("lambda grid must be strictly ascending")
    return grid


def superlevel_components(prob, level: float) -> list[np.ndarray]:
    """8-connected components of {pixel : prob >= level} as boolean masks."""
    arr = as_probability_mask(prob)
    if not (0.0 < level <= 1.0):
        raise ValueError(f"level must lie in (0, 1], got {level}")
    labels, count = ndimage.label(arr >= level, structure=_EIGHT_CONNECTED)
    return [(labels == k) for k in range(1, count + 1)]


def _component_dimensions_px(rows: np.ndarray, cols: np.ndarray) -> tuple[float, float]:
    """(long, short) side of the minimum-area rotated bounding rectangle.

    cv2 measures the rectangle over pixel centers, so one pixel extent is
    added to each side: a single pixel measures 1 x 1, an axis-aligned
    10 x 4 block measures 10 x 4.
    """
    pts = np.stack([cols, rows], axis=1).astype(np.float32).reshape(-1, 1, 2)
    (_, _), (w, h), _ = cv2.minAreaRect(pts)
    return float(max(w, h) + 1.0), float(min(w, h) + 1.0)


def g_curve(prob, anchor: tuple[int, int], lambda_grid, pixel_equivalent_mm: float):
    """Physical dimensions of the anchor's superlevel component per level.

    At each lambda the component of {prob >= lambda} containing the
    anchor is measured; once the anchor falls out of the superlevel set
    the dimensions are zero.  Returns (lengths_mm, widths_mm) arrays.
    """
    arr = as_probability_mask(prob)
    grid = _check_grid(lambda_grid)
    if pixel_equivalent_mm <= 0:
        raise ValueError(f"pixel equivalent must be positive, got {pixel_equivalent_mm}")
    r, c = int(anchor[0]), int(anchor[1])
    if not (0 <= r < arr.shape[0] and 0 <= c < arr.shape[1]):
        raise ValueError(f"anchor {anchor} outside image of shape {arr.shape}")
    if arr[r, c] < grid[0]:
        raise ValueError(f"anchor {anchor} lies outside the lambda={grid[0]:.4g} superlevel set")

    lengths = np.zeros(grid.size)
    widths = np.zeros(grid.size)
    for i, level in enumerate(grid):
        mask = arr >= level
        if not mask[r, c]:
            continue
        labels, _ = ndimage.label(mask, structure=_EIGHT_CONNECTED)
        rows, cols = np.nonzero(labels == labels[r, c])
        long_px, short_px = _component_dimensions_px(rows, cols)
        lengths[i] = long_px * pixel_equivalent_mm
        widths[i] = short_px * pixel_equivalent_mm
    return lengths, widths


def _meets(length: float, width: float, standard: Standard, policy: str) -> bool:
    hit_len = length >= standard.length_mm
    hit_wid = width >= standard.width_mm
    return (hit_len or hit_wid) if policy == "any" else (hit_len and hit_wid)


def discrimination_confidence(lambda_grid, lengths_mm, widths_mm, standard: Standard, policy: str = "any") -> float:
    """Map g-curves and a threshold to a confidence percentage.

    policy "any" (default): the component meets the standard when either
    dimension reaches its threshold; "all" requires both.  The middle
    case interpolates the crossing level between the last grid level that
    meets the standard and the first that fails.
    """
    if policy not in ("any", "all"):
        raise ValueError(f"policy must be 'any' or 'all', got {policy!r}")
    grid = _check_grid(lambda_grid)
    lengths = np.asarray(lengths_mm, dtype=np.float64)
    widths = np.asarray(widths_mm, dtype=np.float64)
    if lengths.shape != grid.shape or widths.shape != grid.shape:
        raise ValueError("curves and lambda grid must have matching lengths")

    meets = np.array([_meets(l, w, standard, policy) for l, w in zip(lengths, widths)])
    if not meets[0]:
        return 0.0
    if meets[-1]:
        return 100.0
    i = int(np.max(np.nonzero(meets)[0]))
    lam0, lam1 = grid[i], grid[i + 1]
    crossings = []
    for curve, threshold in ((lengths, standard.length_mm), (widths, standard.width_mm)):
        v0, v1 = curve[i], curve[i + 1]
        if v0 >= threshold > v1:
            crossings.append(lam0 + (lam1 - lam0) * (v0 - threshold) / (v0 - v1))
    lam_star = max(crossings) if policy == "any" else min(crossings)
    return 100.0 * float(lam_star) if crossings else 100.0 * float(lam0)


@dataclass(frozen=True)
class ComponentReport:
    """g-curve and confidence of one connected component vs one standard."""

    component_id: int
    standard: str
    confidence_pct: float
    anchor: tuple[int, int]
    area_px: int
    pixel_equivalent_mm: float
    lambda_grid: tuple[float, ...]
    g_length_mm: tuple[float, ...]
    g_width_mm: tuple[float, ...]

    def to_dict(self) -> dict:
        return {
            "component_id": self.component_id,
            "standard": self.standard,
            "confidence_pct": self.confidence_pct,
            "anchor": list(self.anchor),
            "area_px": self.area_px,
            "pixel_equivalent_mm": self.pixel_equivalent_mm,
            "lambda_grid": list(self.lambda_grid),
            "g_length_mm": list(self.g_length_mm),
            "g_width_mm": list(self.g_width_mm),
        }


def report_from_dict(data: dict) -> ComponentReport:
    return ComponentReport(
        component_id=int(data["component_id"]),
        standard=str(data["standard"]),
        confidence_pct=float(data["confidence_pct"]),
        anchor=(int(data["anchor"][0]), int(data["anchor"][1])),
        area_px=int(data["area_px"]),
        pixel_equivalent_mm=float(data["pixel_equivalent_mm"]),
        lambda_grid=tuple(float(v) for v in data["lambda_grid"]),
        g_length_mm=tuple(float(v) for v in data["g_length_mm"]),
        g_width_mm=tuple(float(v) for v in data["g_width_mm"]),
    )


def reports_to_json(reports: list[ComponentReport]) -> list[dict]:
    return [r.to_dict() for r in reports]


def grade(prob, standards, pixel_equivalent_mm: float, lambda_grid=None, policy: str = "any") -> list[ComponentReport]:
    """Grade every component of the lowest-level superlevel set.

    Components are anchored at their probability argmax (first in raster
    order on ties) and evaluated against each standard; one report per
    (component, standard) pair.
    """
    arr = as_probability_mask(prob)
    grid = _check_grid(lambda_grid if lambda_grid is not None else uniform_lambda_grid())
    standards = list(standards)
    reports: list[ComponentReport] = []
    for comp_id, mask in enumerate(superlevel_components(arr, grid[0]), start=1):
        masked = np.where(mask, arr, -1.0)
        anchor = np.unravel_index(int(np.argmax(masked)), arr.shape)
        lengths, widths = g_curve(arr, anchor, grid, pixel_equivalent_mm)
        for std in standards:
            conf = discrimination_confidence(grid, lengths, widths, std, policy)
            reports.append(
                ComponentReport(
                    component_id=comp_id,
                    standard=std.defect_class,
                    confidence_pct=conf,
                    anchor=(int(anchor[0]), int(anchor[1])),
                    area_px=int(mask.sum()),
                    pixel_equivalent_mm=pixel_equivalent_mm,
                    lambda_grid=tuple(float(v) for v in grid),
                    g_length_mm=tuple(float(v) for v in lengths),
                    g_width_mm=tuple(float(v) for v in widths),
                )
            )
    return reports


def render_overlay(prob, reports: list[ComponentReport], out_path, min_confidence: float = 50.0) -> Path:
    """Red-contour overlay of graded components onto the probability map.

    A component is outlined when its best confidence over all standards
    reaches ``min_confidence`` percent.
    """
    arr = as_probability_mask(prob)
    base = (arr * 255.0).round().astype(np.uint8)
    img = cv2.cvtColor(base, cv2.COLOR_GRAY2BGR)
    best: dict[int, float] = {}
    grid_start: dict[int, float] = {}
    for rep in reports:
        best[rep.component_id] = max(best.get(rep.component_id, 0.0), rep.confidence_pct)
        grid_start[rep.component_id] = rep.lambda_grid[0]
    for comp_id, conf in best.items():
        if conf < min_confidence:
            continue
        comps = superlevel_components(arr, grid_start[comp_id])
        mask = comps[comp_id - 1].astype(np.uint8)
        contours, _ = cv2.findContours(mask, cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_SIMPLE)
        cv2.drawContours(img, contours, -1, (0, 0, 255), 1)
    ok, encoded = cv2.imencode(".png", img)
    if not ok:
        raise RuntimeError("PNG encoding failed for overlay")
    return atomic_write_bytes(out_path, encoded.tobytes())
