"""Canonical metadata records and the geometry helpers derived from them.

A record is the pipeline's common currency: the DICOM parser, the JSON
manifest reader and the synthetic generator all produce `MetadataRecord`
instances in canonical form (strings trimmed and uppercased, numerics
validated), so every downstream stage can treat equality as semantic equality.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from typing import Any, Optional, Sequence

from .errors import (
    MalformedJson,
    MalformedNumeric,
    NonPositiveSpacing,
)

ISOTROPY_REL_TOL = 1e-6


class Plane(enum.Enum):
    SAGITTAL = 0
    CORONAL = 1
    AXIAL = 2

    @property
    def axis(self) -> int:
        """Index of the through-plane (slicing) axis."""
        return self.value

    @property
    def label(self) -> str:
        """Canonical uppercase name used in label keys."""
        return self.name

    @property
    def word(self) -> str:
        """Lowercase name used in prompt text."""
        return self.name.lower()


def canonical_string(value: str) -> str:
    """Trim and uppercase. Idempotent: f(f(x)) == f(x)."""
    return value.strip().upper()


@dataclass(frozen=True)
class MetadataRecord:
    """One acquisition's metadata in canonical form."""

    source_id: str
    manufacturer: str = ""
    scanner_model: str = ""
    series_description: Optional[str] = None
    sequence_type: str = ""
    sequence_variant: str = ""
    field_strength_tesla: float = 0.0
    te_ms: float = 0.0
    tr_ms: float = 0.0
    ti_ms: Optional[float] = None  # absent <=> no inversion pulse, never 0
    flip_angle_deg: float = 0.0
    voxel_spacing_mm: Optional[tuple[float, float, float]] = None
    num_slices: Optional[int] = None

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready dict; optional fields are omitted when absent."""
        out: dict[str, Any] = {
            "source_id": self.source_id,
            "manufacturer": self.manufacturer,
            "scanner_model": self.scanner_model,
            "sequence_type": self.sequence_type,
            "sequence_variant": self.sequence_variant,
            "field_strength_tesla": self.field_strength_tesla,
            "te_ms": self.te_ms,
            "tr_ms": self.tr_ms,
            "flip_angle_deg": self.flip_angle_deg,
        }
        if self.series_description is not None:
            out["series_description"] = self.series_description
        if self.ti_ms is not None:
            out["ti_ms"] = self.ti_ms
        if self.voxel_spacing_mm is not None:
            out["voxel_spacing_mm"] = list(self.voxel_spacing_mm)
        if self.num_slices is not None:
            out["num_slices"] = self.num_slices
        return out


def _check_finite(name: str, value: float) -> float:
    try:
        value = float(value)
    except (TypeError, ValueError) as exc:
        raise MalformedNumeric(f"{name} is not numeric: {value!r}") from exc
    if not math.isfinite(value):
        raise MalformedNumeric(f"{name} is not finite: {value!r}")
    return value


def make_record(
    source_id: str,
    *,
    manufacturer: str = "",
    scanner_model: str = "",
    series_description: Optional[str] = None,
    sequence_type: str = "",
    sequence_variant: str = "",
    field_strength_tesla: float = 0.0,
    te_ms: float = 0.0,
    tr_ms: float = 0.0,
    ti_ms: Optional[float] = None,
    flip_angle_deg: float = 0.0,
    voxel_spacing_mm: Optional[Sequence[float]] = None,
    num_slices: Optional[int] = None,
) -> MetadataRecord:
    """Validate raw field values and return a canonical record.

    Raises:
        MalformedNumeric: a numeric field is non-finite or out of domain
            (te/tr < 0, ti <= 0, field strength < 0, flip angle outside
            [0, 360), num_slices < 1).
        NonPositiveSpacing: voxel spacing has a non-positive component.
    """
    te = _check_finite("te_ms", te_ms)
    tr = _check_finite("tr_ms", tr_ms)
    if te < 0 or tr < 0:
        raise MalformedNumeric(f"te_ms/tr_ms must be >= 0, got {te}, {tr}")
    fs = _check_finite("field_strength_tesla", field_strength_tesla)
    if fs < 0:
        raise MalformedNumeric(f"field_strength_tesla must be >= 0, got {fs}")
    fa = _check_finite("flip_angle_deg", flip_angle_deg)
    if not (0.0 <= fa < 360.0):
        raise MalformedNumeric(f"flip_angle_deg must be in [0, 360), got {fa}")
    ti: Optional[float] = None
    if ti_ms is not None:
        ti = _check_finite("ti_ms", ti_ms)
        if ti <= 0:
            # an inversion pulse at TI=0 is meaningless; absence means no pulse
            raise MalformedNumeric(f"ti_ms must be > 0 when present, got {ti}")
    spacing: Optional[tuple[float, float, float]] = None
    if voxel_spacing_mm is not None:
        vals = [
            _check_finite("voxel_spacing_mm", v) for v in voxel_spacing_mm
        ]
        if len(vals) != 3:
            raise MalformedNumeric(
                f"voxel_spacing_mm needs 3 components, got {len(vals)}"
            )
        if any(v <= 0 for v in vals):
            raise NonPositiveSpacing(f"voxel spacing must be > 0, got {vals}")
        spacing = (vals[0], vals[1], vals[2])
    slices: Optional[int] = None
    if num_slices is not None:
        slices = int(num_slices)
        if slices < 1:
            raise MalformedNumeric(f"num_slices must be >= 1, got {slices}")
    return MetadataRecord(
        source_id=str(source_id),
        manufacturer=canonical_string(manufacturer),
        scanner_model=canonical_string(scanner_model),
        series_description=(
            canonical_string(series_description)
            if series_description is not None
            else None
        ),
        sequence_type=canonical_string(sequence_type),
        sequence_variant=canonical_string(sequence_variant),
        field_strength_tesla=fs,
        te_ms=te,
        tr_ms=tr,
        ti_ms=ti,
        flip_angle_deg=fa,
        voxel_spacing_mm=spacing,
        num_slices=slices,
    )


_RECORD_FIELDS = {
    "source_id",
    "manufacturer",
    "scanner_model",
    "series_description",
    "sequence_type",
    "sequence_variant",
    "field_strength_tesla",
    "te_ms",
    "tr_ms",
    "ti_ms",
    "flip_angle_deg",
    "voxel_spacing_mm",
    "num_slices",
}


def parse_manifest_line(line: str) -> MetadataRecord:
    """Parse one JSON-lines manifest entry into a canonical record.

    Unknown keys are ignored so feature-bearing dataset files remain valid
    manifests. Raises MalformedJson when the line is not a JSON object or
    lacks source_id/te_ms/tr_ms; numeric validation errors propagate from
    make_record.
    """
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedJson(f"invalid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise MalformedJson("manifest line must be a JSON object")
    for required in ("source_id", "te_ms", "tr_ms"):
        if obj.get(required) is None:
            raise MalformedJson(f"manifest line lacks required field {required}")
    kwargs = {k: v for k, v in obj.items() if k in _RECORD_FIELDS}
    source_id = kwargs.pop("source_id")
    try:
        return make_record(source_id, **kwargs)
    except TypeError as exc:
        raise MalformedJson(f"bad field type: {exc}") from exc


def infer_plane(spacing: Sequence[float]) -> Plane:
    """Infer the acquisition plane from voxel spacing.

    The through-plane axis is the one with the largest spacing: axis 0 ->
    sagittal, 1 -> coronal, 2 -> axial. Spacings all equal within relative
    tolerance 1e-6 count as isotropic and default to axial; a tie on the
    maximum otherwise resolves to the lowest axis index.

    Raises:
        NonPositiveSpacing: any component <= 0 or non-finite.
    """
    vals = [float(v) for v in spacing]
    if len(vals) != 3 or any(not math.isfinite(v) or v <= 0 for v in vals):
        raise NonPositiveSpacing(f"spacing must be 3 positive values, got {vals}")
    hi, lo = max(vals), min(vals)
    if hi - lo <= ISOTROPY_REL_TOL * hi:
        return Plane.AXIAL
    return Plane(vals.index(hi))


def plane_for_record(record: MetadataRecord) -> Plane:
    """Plane used in label keys; records without spacing default to axial."""
    if record.voxel_spacing_mm is None:
        return Plane.AXIAL
    return infer_plane(record.voxel_spacing_mm)


def select_slice_indices(depth: int) -> list[int]:
    """Every second slice from the centered window of at most 100 slices.

    The window has width w = min(depth, 100) starting at floor((depth-w)/2);
    indices step by 2 across the window, giving ceil(w/2) of them.
    """
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    width = min(depth, 100)
    start = (depth - width) // 2
    return list(range(start, start + width, 2))
