"""Grouped contrast-aware labels from acquisition metadata.

Records are grouped either by joint TE/TR grid quantization plus TI binning
(default) or by k-means over the numerical tags; the grouping key also carries
the categorical tags. Label ids are dense and assigned in sorted key order so
a label space is a pure function of (records, config).
"""
from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from . import prompts
from .errors import (
    EmptyDataset,
    IncompatibleRanges,
    LabelDecodeFailure,
    NonFiniteInput,
)
from .kmeans import KMeansModel, fit_kmeans
from .records import MetadataRecord, Plane, plane_for_record

# Canonical field order for label keys. Configs may drop fields but never
# reorder them. series_description is deliberately not groupable.
FIELD_ORDER = (
    "manufacturer",
    "scanner_model",
    "plane",
    "field_strength",
    "sequence_type",
    "sequence_variant",
    "flip_angle",
    "te_bin",
    "tr_bin",
    "ti_bin",
)
CATEGORICAL_FIELDS = FIELD_ORDER[:7]
BIN_FIELDS = FIELD_ORDER[7:]

DEFAULT_TI_EDGES = (400.0, 1000.0, 3000.0)


@dataclass(frozen=True)
class GridSpec:
    """Half-open TE/TR value ranges split into uniform bins."""

    te_lo: float = 0.0
    te_hi: float = 200.0
    n_te: int = 20
    tr_lo: float = 0.0
    tr_hi: float = 10000.0
    n_tr: int = 20

    def __post_init__(self):
        if not (self.te_hi > self.te_lo and self.tr_hi > self.tr_lo):
            raise ValueError("grid ranges must be non-empty")
        if self.n_te < 1 or self.n_tr < 1:
            raise ValueError("bin counts must be >= 1")

    @property
    def te_width(self) -> float:
        return (self.te_hi - self.te_lo) / self.n_te

    @property
    def tr_width(self) -> float:
        return (self.tr_hi - self.tr_lo) / self.n_tr


def quantize_te_tr(te_ms: float, tr_ms: float, grid: GridSpec) -> tuple[int, int]:
    """Joint TE/TR bin indices; out-of-range values clamp to edge bins."""
    for v in (te_ms, tr_ms):
        if not math.isfinite(v):
            raise NonFiniteInput(f"cannot quantize non-finite value {v!r}")
    te_bin = int(math.floor((te_ms - grid.te_lo) / grid.te_width))
    tr_bin = int(math.floor((tr_ms - grid.tr_lo) / grid.tr_width))
    te_bin = min(max(te_bin, 0), grid.n_te - 1)
    tr_bin = min(max(tr_bin, 0), grid.n_tr - 1)
    return te_bin, tr_bin


def bin_ti(ti_ms: Optional[float], edges: Sequence[float] = DEFAULT_TI_EDGES) -> int:
    """TI bin: 0 means no inversion pulse; otherwise 1 + #edges below ti."""
    if ti_ms is None:
        return 0
    if not math.isfinite(ti_ms):
        raise NonFiniteInput(f"cannot bin non-finite TI {ti_ms!r}")
    k = sum(1 for e in edges if e < ti_ms)
    return min(k + 1, len(edges) + 1)


def ti_bin_count(edges: Sequence[float] = DEFAULT_TI_EDGES) -> int:
    return len(edges) + 2


def ti_representative(bin_index: int, edges: Sequence[float] = DEFAULT_TI_EDGES) -> Optional[float]:
    """A TI value inside the given bin (None for bin 0 = no inversion)."""
    if bin_index == 0:
        return None
    edges = list(edges)
    if bin_index == 1:
        return edges[0] / 2.0
    if bin_index <= len(edges):
        return (edges[bin_index - 2] + edges[bin_index - 1]) / 2.0
    return edges[-1] * 1.5


def coarsen_te_tr(
    te_bin: int, tr_bin: int, fine: GridSpec, coarse: GridSpec
) -> tuple[int, int]:
    """Map fine-grid bins onto a coarser grid over the same value ranges.

    When the fine bin count is a multiple of the coarse one this is exact
    nesting (floor division); otherwise the fine bin's center is re-quantized.
    Both cases are the same arithmetic: quantize the fine bin center.

    Raises IncompatibleRanges when the two specs cover different ranges.
    """
    if (fine.te_lo, fine.te_hi, fine.tr_lo, fine.tr_hi) != (
        coarse.te_lo,
        coarse.te_hi,
        coarse.tr_lo,
        coarse.tr_hi,
    ):
        raise IncompatibleRanges("grid specs cover different TE/TR ranges")
    te_center = fine.te_lo + (te_bin + 0.5) * fine.te_width
    tr_center = fine.tr_lo + (tr_bin + 0.5) * fine.tr_width
    return quantize_te_tr(te_center, tr_center, coarse)


@dataclass(frozen=True)
class LabelConfig:
    grid: GridSpec = field(default_factory=GridSpec)
    ti_edges: tuple[float, ...] = DEFAULT_TI_EDGES
    fields: tuple[str, ...] = FIELD_ORDER
    grouping: str = "grid"  # "grid" | "kmeans"
    n_clusters: int = 20
    kmeans_seed: int = 0

    def __post_init__(self):
        for f in self.fields:
            if f not in FIELD_ORDER:
                raise ValueError(f"unknown label field {f!r}")
        ordered = tuple(f for f in FIELD_ORDER if f in self.fields)
        if ordered != tuple(self.fields):
            raise ValueError("label fields must follow canonical order")
        if self.grouping not in ("grid", "kmeans"):
            raise ValueError(f"unknown grouping {self.grouping!r}")

    @property
    def key_fields(self) -> tuple[str, ...]:
        """Key components: categorical fields, then bins (or cluster id)."""
        cats = tuple(f for f in self.fields if f in CATEGORICAL_FIELDS)
        if self.grouping == "kmeans":
            return cats + ("cluster",)
        return cats + tuple(f for f in self.fields if f in BIN_FIELDS)


def _field_value(record: MetadataRecord, name: str, config: LabelConfig):
    if name == "manufacturer":
        return record.manufacturer
    if name == "scanner_model":
        return record.scanner_model
    if name == "plane":
        return plane_for_record(record).label
    if name == "field_strength":
        return round(record.field_strength_tesla, 1)
    if name == "sequence_type":
        return record.sequence_type
    if name == "sequence_variant":
        return record.sequence_variant
    if name == "flip_angle":
        return round(record.flip_angle_deg, 1)
    te_bin, tr_bin = quantize_te_tr(record.te_ms, record.tr_ms, config.grid)
    if name == "te_bin":
        return te_bin
    if name == "tr_bin":
        return tr_bin
    if name == "ti_bin":
        return bin_ti(record.ti_ms, config.ti_edges)
    raise KeyError(name)


def kmeans_features(records: Sequence[MetadataRecord]) -> np.ndarray:
    """(te, tr, ti_present, ti or 0) per record, for numeric-tag clustering."""
    out = np.zeros((len(records), 4), dtype=np.float64)
    for i, r in enumerate(records):
        out[i, 0] = r.te_ms
        out[i, 1] = r.tr_ms
        out[i, 2] = 1.0 if r.ti_ms is not None else 0.0
        out[i, 3] = r.ti_ms if r.ti_ms is not None else 0.0
    return out


@dataclass
class KMeansGrouper:
    """Min-max normalization plus a fitted k-means model."""

    mins: np.ndarray
    ranges: np.ndarray  # zero-spread columns get range 1 (normalize to 0)
    model: KMeansModel

    def normalize(self, feats: np.ndarray) -> np.ndarray:
        return (feats - self.mins) / self.ranges

    def cluster_ids(self, records: Sequence[MetadataRecord]) -> np.ndarray:
        return self.model.assign(self.normalize(kmeans_features(records)))

    @staticmethod
    def fit(records: Sequence[MetadataRecord], n_clusters: int, seed: int) -> "KMeansGrouper":
        feats = kmeans_features(records)
        mins = feats.min(axis=0)
        spread = feats.max(axis=0) - mins
        ranges = np.where(spread > 0, spread, 1.0)
        model = fit_kmeans((feats - mins) / ranges, n_clusters, seed)
        return KMeansGrouper(mins=mins, ranges=ranges, model=model)

    def centroid_raw(self, cluster: int) -> np.ndarray:
        return self.model.centroids[cluster] * self.ranges + self.mins


@dataclass(frozen=True)
class ContrastLabel:
    label_id: int
    key: tuple
    canonical_text: str
    count: int = 0
    # (te_ms, tr_ms, ti_ms or None) observed in the member records; the
    # canonical text quotes these instead of synthetic bin centers so the
    # gallery never contains numerals absent from the corpus.
    rep: Optional[tuple] = None


def median_rep(values: Sequence[tuple]) -> tuple:
    """Per-axis median element of (te, tr, ti) triples.

    The median is an element of the input (lower middle for even counts), so
    every quoted value occurs verbatim in the data. TI is reported only when
    a strict majority of members carry an inversion pulse.
    """
    tes = sorted(v[0] for v in values)
    trs = sorted(v[1] for v in values)
    tis = sorted(v[2] for v in values if v[2] is not None)
    te = tes[(len(tes) - 1) // 2]
    tr = trs[(len(trs) - 1) // 2]
    ti = None
    if 2 * len(tis) > len(values):
        ti = tis[(len(tis) - 1) // 2]
    return (te, tr, ti)


_CLAUSES_FOR_FIELD = {
    "manufacturer": "scanner",
    "scanner_model": "scanner",
    "plane": "plane",
    "field_strength": "field",
    "sequence_type": "sequence",
    "sequence_variant": "sequence",
    "flip_angle": "flip_angle",
    "te_bin": "te",
    "tr_bin": "tr",
    "ti_bin": "ti",
    "cluster": None,  # expands to all numeric clauses
}


class LabelSpace:
    """Dense label ids over grouped record keys, plus canonical prompts."""

    def __init__(
        self,
        config: LabelConfig,
        keys_with_counts: dict[tuple, int],
        grouper: Optional[KMeansGrouper] = None,
        reps_by_key: Optional[dict[tuple, tuple]] = None,
    ):
        if not keys_with_counts:
            raise EmptyDataset("no records to build a label space from")
        self.config = config
        self.key_fields = config.key_fields
        self.grouper = grouper
        self.labels: list[ContrastLabel] = []
        self._key_to_id: dict[tuple, int] = {}
        for label_id, key in enumerate(sorted(keys_with_counts)):
            rep = None if reps_by_key is None else reps_by_key.get(key)
            text = canonical_text_for_key(key, config, grouper, rep)
            self.labels.append(
                ContrastLabel(label_id, key, text, keys_with_counts[key], rep)
            )
            self._key_to_id[key] = label_id

    def __len__(self) -> int:
        return len(self.labels)

    def key_of(self, record: MetadataRecord) -> tuple:
        if self.config.grouping == "kmeans":
            cats = tuple(
                _field_value(record, f, self.config)
                for f in self.config.fields
                if f in CATEGORICAL_FIELDS
            )
            cluster = int(self.grouper.cluster_ids([record])[0])
            return cats + (cluster,)
        return tuple(
            _field_value(record, f, self.config) for f in self.config.fields
        )

    def assign(self, records: Sequence[MetadataRecord]) -> np.ndarray:
        """Label ids for records; unseen keys raise LabelDecodeFailure."""
        if self.config.grouping == "kmeans":
            clusters = self.grouper.cluster_ids(records)
            keys = []
            cat_fields = [
                f for f in self.config.fields if f in CATEGORICAL_FIELDS
            ]
            for r, c in zip(records, clusters):
                cats = tuple(_field_value(r, f, self.config) for f in cat_fields)
                keys.append(cats + (int(c),))
        else:
            keys = [self.key_of(r) for r in records]
        ids = np.empty(len(records), dtype=np.int64)
        for i, key in enumerate(keys):
            if key not in self._key_to_id:
                raise LabelDecodeFailure(f"key not in label space: {key!r}")
            ids[i] = self._key_to_id[key]
        return ids

    def decode(self, label_id: int) -> dict:
        """Field name -> value mapping for one label."""
        if not (0 <= label_id < len(self.labels)):
            raise LabelDecodeFailure(f"label id {label_id} out of range")
        key = self.labels[label_id].key
        return dict(zip(self.key_fields, key))

    # --- serialization ------------------------------------------------------

    def to_json_dict(self) -> dict:
        out: dict = {
            "version": 1,
            "config": {
                "grid": {
                    "te_lo": self.config.grid.te_lo,
                    "te_hi": self.config.grid.te_hi,
                    "n_te": self.config.grid.n_te,
                    "tr_lo": self.config.grid.tr_lo,
                    "tr_hi": self.config.grid.tr_hi,
                    "n_tr": self.config.grid.n_tr,
                },
                "ti_edges": list(self.config.ti_edges),
                "fields": list(self.config.fields),
                "grouping": self.config.grouping,
                "n_clusters": self.config.n_clusters,
                "kmeans_seed": self.config.kmeans_seed,
            },
            "key_fields": list(self.key_fields),
            "labels": [
                {
                    "id": lab.label_id,
                    "key": list(lab.key),
                    "text": lab.canonical_text,
                    "count": lab.count,
                    "rep": None if lab.rep is None else list(lab.rep),
                }
                for lab in self.labels
            ],
        }
        if self.grouper is not None:
            out["kmeans"] = {
                "mins": self.grouper.mins.tolist(),
                "ranges": self.grouper.ranges.tolist(),
                "centroids": self.grouper.model.centroids.tolist(),
            }
        return out

    @property
    def hash_hex(self) -> str:
        blob = json.dumps(self.to_json_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    @staticmethod
    def from_json_dict(obj: dict) -> "LabelSpace":
        cfg = obj["config"]
        config = LabelConfig(
            grid=GridSpec(**cfg["grid"]),
            ti_edges=tuple(cfg["ti_edges"]),
            fields=tuple(cfg["fields"]),
            grouping=cfg["grouping"],
            n_clusters=cfg["n_clusters"],
            kmeans_seed=cfg["kmeans_seed"],
        )
        grouper = None
        if obj.get("kmeans") is not None:
            km = obj["kmeans"]
            grouper = KMeansGrouper(
                mins=np.asarray(km["mins"], dtype=np.float64),
                ranges=np.asarray(km["ranges"], dtype=np.float64),
                model=KMeansModel(
                    centroids=np.asarray(km["centroids"], dtype=np.float64),
                    inertia_history=[0.0],
                ),
            )
        keys_with_counts = {
            tuple(lab["key"]): lab["count"] for lab in obj["labels"]
        }
        reps_by_key = {
            tuple(lab["key"]): tuple(lab["rep"])
            for lab in obj["labels"]
            if lab.get("rep") is not None
        }
        space = LabelSpace(config, keys_with_counts, grouper, reps_by_key or None)
        # ids must round-trip exactly
        for lab in obj["labels"]:
            if space._key_to_id[tuple(lab["key"])] != lab["id"]:
                raise LabelDecodeFailure("label ids do not match sorted order")
        return space


def representative_record(
    key: tuple,
    config: LabelConfig,
    grouper: Optional[KMeansGrouper] = None,
    rep: Optional[tuple] = None,
) -> MetadataRecord:
    """A record that reproduces the label key.

    Numeric timings come from ``rep`` (observed member values) when provided;
    otherwise they fall back to bin centers, which may quote values that never
    occur in the corpus.
    """
    values = dict(zip(config.key_fields, key))
    grid = config.grid
    if rep is not None:
        te, tr = float(rep[0]), float(rep[1])
        ti = None if rep[2] is None else float(rep[2])
    elif "cluster" in values:
        raw = grouper.centroid_raw(int(values["cluster"]))
        te, tr = float(raw[0]), float(raw[1])
        ti = float(max(raw[3], 1.0)) if raw[2] >= 0.5 else None
    else:
        te_bin = int(values.get("te_bin", 0))
        tr_bin = int(values.get("tr_bin", 0))
        te = grid.te_lo + (te_bin + 0.5) * grid.te_width
        tr = grid.tr_lo + (tr_bin + 0.5) * grid.tr_width
        ti = ti_representative(int(values.get("ti_bin", 0)), config.ti_edges)
    plane = Plane[values["plane"]] if "plane" in values else Plane.AXIAL
    spacing = {
        Plane.SAGITTAL: (5.0, 1.0, 1.0),
        Plane.CORONAL: (1.0, 5.0, 1.0),
        Plane.AXIAL: (1.0, 1.0, 5.0),
    }[plane]
    return MetadataRecord(
        source_id="label",
        manufacturer=str(values.get("manufacturer", "")),
        scanner_model=str(values.get("scanner_model", "")),
        sequence_type=str(values.get("sequence_type", "")),
        sequence_variant=str(values.get("sequence_variant", "")),
        field_strength_tesla=float(values.get("field_strength", 0.0)),
        te_ms=te,
        tr_ms=tr,
        ti_ms=ti,
        flip_angle_deg=float(values.get("flip_angle", 0.0)),
        voxel_spacing_mm=spacing,
    )


def canonical_text_for_key(
    key: tuple,
    config: LabelConfig,
    grouper: Optional[KMeansGrouper] = None,
    rep: Optional[tuple] = None,
) -> str:
    """Dropout-free prompt for a label, restricted to the label's fields."""
    record = representative_record(key, config, grouper, rep)
    clauses = set()
    for name in config.key_fields:
        clause = _CLAUSES_FOR_FIELD[name]
        if clause is None:
            clauses.update(("te", "tr", "ti"))
        else:
            clauses.add(clause)
    pconf = prompts.PromptConfig(
        dropout=0.0, include_series_description=False, restrict_clauses=frozenset(clauses)
    )
    return prompts.render_prompt(record, pconf).text


def build_label_space(
    records: Sequence[MetadataRecord], config: LabelConfig
) -> tuple[LabelSpace, np.ndarray]:
    """Group records into labels; returns the space and per-record ids."""
    if not records:
        raise EmptyDataset("no records")
    grouper = None
    if config.grouping == "kmeans":
        grouper = KMeansGrouper.fit(records, config.n_clusters, config.kmeans_seed)
        clusters = grouper.cluster_ids(records)
        cat_fields = [f for f in config.fields if f in CATEGORICAL_FIELDS]
        keys = [
            tuple(_field_value(r, f, config) for f in cat_fields) + (int(c),)
            for r, c in zip(records, clusters)
        ]
    else:
        keys = [
            tuple(_field_value(r, f, config) for f in config.fields)
            for r in records
        ]
    counts = Counter(keys)
    member_values: dict[tuple, list] = {}
    for record, key in zip(records, keys):
        member_values.setdefault(key, []).append(
            (record.te_ms, record.tr_ms, record.ti_ms)
        )
    reps = {key: median_rep(vals) for key, vals in member_values.items()}
    space = LabelSpace(config, dict(counts), grouper, reps)
    ids = np.array([space._key_to_id[k] for k in keys], dtype=np.int64)
    return space, ids


def coarsened_space(
    space: LabelSpace,
    eval_ids: np.ndarray,
    coarse_grid: GridSpec,
) -> tuple[LabelSpace, np.ndarray, dict[int, int]]:
    """Relabel grid-mode assignments under a coarser grid.

    Returns the coarse space over the keys present in eval_ids, the coarse id
    per evaluation row, and the fine-id -> coarse-id mapping.
    """
    if space.config.grouping != "grid":
        raise IncompatibleRanges("coarsening applies to grid-mode spaces")
    fields = space.key_fields
    te_pos = fields.index("te_bin")
    tr_pos = fields.index("tr_bin")
    coarse_config = replace(space.config, grid=coarse_grid)
    fine_to_coarse_key: dict[int, tuple] = {}
    for lab in space.labels:
        te_b, tr_b = coarsen_te_tr(
            lab.key[te_pos], lab.key[tr_pos], space.config.grid, coarse_grid
        )
        key = list(lab.key)
        key[te_pos] = te_b
        key[tr_pos] = tr_b
        fine_to_coarse_key[lab.label_id] = tuple(key)
    present = Counter(fine_to_coarse_key[int(i)] for i in eval_ids)
    fine_reps: dict[tuple, list] = {}
    for lab in space.labels:
        if lab.rep is not None:
            fine_reps.setdefault(fine_to_coarse_key[lab.label_id], []).append(lab.rep)
    coarse_reps = {k: median_rep(v) for k, v in fine_reps.items()}
    coarse = LabelSpace(coarse_config, dict(present), None, coarse_reps or None)
    mapping = {
        fid: coarse._key_to_id[k]
        for fid, k in fine_to_coarse_key.items()
        if k in coarse._key_to_id
    }
    coarse_ids = np.array(
        [mapping[int(i)] for i in eval_ids], dtype=np.int64
    )
    return coarse, coarse_ids, mapping
