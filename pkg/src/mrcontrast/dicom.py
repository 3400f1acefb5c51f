"""Minimal DICOM part-10 reader for acquisition metadata.

Scope is deliberately narrow: explicit-VR little-endian files only, no pixel
decoding, no recursion into sequences. Twelve tags are extracted; everything
else is skipped by length. Anything outside that envelope should be converted
with standard tooling and handed to the JSON manifest path instead.
"""
from __future__ import annotations

import re
from typing import Iterator, Optional

from .errors import (
    MalformedNumeric,
    MissingMagic,
    MissingRequiredTag,
    TruncatedElement,
    UnsupportedTransferSyntax,
)
from .records import MetadataRecord, make_record

PREAMBLE_LEN = 128
MAGIC = b"DICM"
EXPLICIT_VR_LE_UID = "1.2.840.10008.1.2.1"

# VRs whose explicit encoding uses 2 reserved bytes + a 4-byte length.
LONG_LENGTH_VRS = frozenset({"OB", "OD", "OF", "OL", "OV", "OW", "SQ", "UN"})

UNDEFINED_LENGTH = 0xFFFFFFFF
SEQ_DELIMITER = (0xFFFE, 0xE0DD)

TAG_TRANSFER_SYNTAX = (0x0002, 0x0010)
TAG_MANUFACTURER = (0x0008, 0x0070)
TAG_MODEL = (0x0008, 0x1090)
TAG_SERIES_DESCRIPTION = (0x0008, 0x103E)
TAG_SEQUENCE_TYPE = (0x0018, 0x0020)
TAG_SEQUENCE_VARIANT = (0x0018, 0x0021)
TAG_TR = (0x0018, 0x0080)
TAG_TE = (0x0018, 0x0081)
TAG_TI = (0x0018, 0x0082)
TAG_FIELD_STRENGTH = (0x0018, 0x0087)
TAG_FLIP_ANGLE = (0x0018, 0x1314)
TAG_SLICE_THICKNESS = (0x0018, 0x0050)
TAG_PIXEL_SPACING = (0x0028, 0x0030)

_WANTED = {
    TAG_TRANSFER_SYNTAX,
    TAG_MANUFACTURER,
    TAG_MODEL,
    TAG_SERIES_DESCRIPTION,
    TAG_SEQUENCE_TYPE,
    TAG_SEQUENCE_VARIANT,
    TAG_TR,
    TAG_TE,
    TAG_TI,
    TAG_FIELD_STRENGTH,
    TAG_FLIP_ANGLE,
    TAG_SLICE_THICKNESS,
    TAG_PIXEL_SPACING,
}

# DICOM DS grammar: optional sign, digits with optional fraction, optional
# exponent. float() alone is too permissive (accepts "nan", "1_0").
_DS_RE = re.compile(r"^[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?$")


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedElement(
                f"need {n} bytes at offset {self.pos}, "
                f"have {len(self.data) - self.pos}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u16(self) -> int:
        return int.from_bytes(self.take(2), "little")

    def u32(self) -> int:
        return int.from_bytes(self.take(4), "little")

    @property
    def exhausted(self) -> bool:
        return self.pos >= len(self.data)


def _skip_undefined_length(r: _Reader) -> None:
    # No recursion into items: scan forward for the sequence delimitation
    # item (FFFE,E0DD) and skip its (zero) length field.
    while True:
        group = r.u16()
        elem = r.u16()
        if (group, elem) == SEQ_DELIMITER:
            r.u32()
            return
        if group == 0xFFFE:  # item start / item delimiter
            length = r.u32()
            if length not in (0, UNDEFINED_LENGTH):
                r.take(length)
        # any other bytes are inside an item; keep scanning


def iter_elements(data: bytes) -> Iterator[tuple[int, int, str, bytes]]:
    """Yield (group, element, vr, value bytes) for every top-level element.

    Raises MissingMagic if the part-10 preamble/magic is absent and
    TruncatedElement if the buffer ends inside a header or value field.
    """
    if len(data) < PREAMBLE_LEN + len(MAGIC):
        raise MissingMagic("file shorter than preamble + magic")
    if data[PREAMBLE_LEN : PREAMBLE_LEN + 4] != MAGIC:
        raise MissingMagic("DICM magic not found after 128-byte preamble")
    r = _Reader(data)
    r.pos = PREAMBLE_LEN + 4
    while not r.exhausted:
        group = r.u16()
        elem = r.u16()
        vr = r.take(2).decode("ascii", errors="replace")
        if not (vr.isalpha() and vr.isupper()):
            # explicit VR is the only supported encoding; a non-letter VR
            # field almost always means an implicit-VR dataset
            raise UnsupportedTransferSyntax(
                f"bad VR {vr!r} at offset {r.pos - 2}; "
                "only explicit-VR little endian is supported"
            )
        if vr in LONG_LENGTH_VRS:
            r.take(2)  # reserved
            length = r.u32()
        else:
            length = r.u16()
        if length == UNDEFINED_LENGTH:
            _skip_undefined_length(r)
            yield group, elem, vr, b""
            continue
        value = r.take(length)
        yield group, elem, vr, value


def _decode_string(raw: bytes) -> str:
    return raw.decode("latin-1").strip("\x00").strip()


def parse_ds(raw: bytes, tag_name: str) -> list[float]:
    """Parse a decimal string (possibly multi-valued, split on backslash)."""
    text = _decode_string(raw)
    if not text:
        return []
    values = []
    for part in text.split("\\"):
        part = part.strip()
        if not _DS_RE.match(part):
            raise MalformedNumeric(f"{tag_name}: bad decimal string {part!r}")
        values.append(float(part))
    return values


def _single_ds(raw: bytes, tag_name: str) -> Optional[float]:
    values = parse_ds(raw, tag_name)
    return values[0] if values else None


def parse_dicom_tags(data: bytes, source_id: str = "") -> MetadataRecord:
    """Extract acquisition metadata from a part-10 DICOM buffer.

    Only the twelve tags the pipeline consumes are read; unknown elements
    are skipped by their declared length. TE and TR are required (a present
    but empty value counts as missing). An absent or empty TI means no
    inversion pulse. Voxel spacing is (row, column, slice thickness) and is
    reported only when pixel spacing and slice thickness are both present.

    Raises:
        MissingMagic, TruncatedElement, UnsupportedTransferSyntax,
        MissingRequiredTag, MalformedNumeric, NonPositiveSpacing.
    """
    found: dict[tuple[int, int], bytes] = {}
    for group, elem, _vr, value in iter_elements(data):
        if (group, elem) in _WANTED:
            found[(group, elem)] = value

    if TAG_TRANSFER_SYNTAX in found:
        uid = _decode_string(found[TAG_TRANSFER_SYNTAX])
        if uid != EXPLICIT_VR_LE_UID:
            raise UnsupportedTransferSyntax(
                f"transfer syntax {uid!r} is not explicit-VR little endian"
            )

    te = _single_ds(found.get(TAG_TE, b""), "TE")
    if te is None:
        raise MissingRequiredTag("TE")
    tr = _single_ds(found.get(TAG_TR, b""), "TR")
    if tr is None:
        raise MissingRequiredTag("TR")
    ti = _single_ds(found.get(TAG_TI, b""), "TI")
    field = _single_ds(found.get(TAG_FIELD_STRENGTH, b""), "FieldStrength")
    flip = _single_ds(found.get(TAG_FLIP_ANGLE, b""), "FlipAngle")

    spacing = None
    if TAG_PIXEL_SPACING in found and TAG_SLICE_THICKNESS in found:
        pix = parse_ds(found[TAG_PIXEL_SPACING], "PixelSpacing")
        thick = _single_ds(found[TAG_SLICE_THICKNESS], "SliceThickness")
        if len(pix) != 2:
            raise MalformedNumeric(
                f"PixelSpacing needs 2 values, got {len(pix)}"
            )
        if thick is not None:
            spacing = (pix[0], pix[1], thick)

    return make_record(
        source_id,
        manufacturer=_decode_string(found.get(TAG_MANUFACTURER, b"")),
        scanner_model=_decode_string(found.get(TAG_MODEL, b"")),
        series_description=(
            _decode_string(found[TAG_SERIES_DESCRIPTION])
            if TAG_SERIES_DESCRIPTION in found
            else None
        ),
        sequence_type=_decode_string(found.get(TAG_SEQUENCE_TYPE, b"")),
        sequence_variant=_decode_string(found.get(TAG_SEQUENCE_VARIANT, b"")),
        field_strength_tesla=field if field is not None else 0.0,
        te_ms=te,
        tr_ms=tr,
        ti_ms=ti,
        flip_angle_deg=flip if flip is not None else 0.0,
        voxel_spacing_mm=spacing,
    )
