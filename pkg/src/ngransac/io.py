"""Text formats: correspondence files and metrics CSV."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import CorruptModel, VersionMismatch

CORR_MAGIC = "ngransac-correspondences"
SCHEMA_VERSION = "1.0"
_GT_KEYS = {"gt_essential": 9, "gt_fundamental": 9, "gt_rotation": 9, "gt_translation": 3}


@dataclass
class CorrespondenceFile:
    corrs: np.ndarray
    ratios: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    calibrated: bool = True
    coordinate_scale: float = 1.0
    gt: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _fmt(x: float) -> str:
    return repr(float(x))


def format_correspondences(data: CorrespondenceFile) -> str:
    """Self-describing text: ``#`` header block, then one comma-separated record per line."""
    corrs = np.asarray(data.corrs, dtype=np.float64)
    fields = ["x1", "y1", "x2", "y2"]
    cols = [corrs[:, i] for i in range(4)]
    if data.ratios is not None:
        fields.append("ratio")
        cols.append(np.asarray(data.ratios, dtype=np.float64))
    if data.labels is not None:
        fields.append("label")
        cols.append(np.asarray(data.labels).astype(np.int64))
    out = io.StringIO()
    out.write(f"# {CORR_MAGIC}\n")
    out.write(f"# schema_version: {SCHEMA_VERSION}\n")
    out.write(f"# calibrated: {'true' if data.calibrated else 'false'}\n")
    out.write(f"# coordinate_scale: {_fmt(data.coordinate_scale)}\n")
    out.write(f"# fields: {','.join(fields)}\n")
    for key in _GT_KEYS:
        if data.gt.get(key) is not None:
            vals = np.asarray(data.gt[key], dtype=np.float64).ravel()
            out.write(f"# {key}: {' '.join(_fmt(v) for v in vals)}\n")
    for key, value in data.meta.items():
        out.write(f"# meta.{key}: {json.dumps(value, sort_keys=True)}\n")
    for row in zip(*cols):
        out.write(",".join(str(int(v)) if f == "label" else _fmt(v) for f, v in zip(fields, row)) + "\n")
    return out.getvalue()


def parse_correspondences(text: str) -> CorrespondenceFile:
    header: dict[str, str] = {}
    rows = []
    lines = text.splitlines()
    if not lines or lines[0].strip() != f"# {CORR_MAGIC}":
        raise CorruptModel("not a correspondence file")
    for line in lines[1:]:
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition(":")
            header[key.strip()] = value.strip()
        else:
            rows.append(line.split(","))
    version = header.get("schema_version", "")
    if version.split(".")[0] != SCHEMA_VERSION.split(".")[0]:
        raise VersionMismatch(f"correspondence schema {version!r} not supported")
    fields = header.get("fields", "").split(",")
    if fields[:4] != ["x1", "y1", "x2", "y2"]:
        raise CorruptModel(f"unexpected fields {fields}")
    if any(len(r) != len(fields) for r in rows):
        raise CorruptModel("record length differs from the field list")
    table = np.array([[float(v) for v in r] for r in rows], dtype=np.float64).reshape(-1, len(fields))
    gt = {}
    for key, size in _GT_KEYS.items():
        if key in header:
            vals = np.array([float(v) for v in header[key].split()])
            if vals.size != size:
                raise CorruptModel(f"{key} has {vals.size} values")
            gt[key] = vals.reshape(3, 3) if size == 9 else vals
    meta = {k[5:]: json.loads(v) for k, v in header.items() if k.startswith("meta.")}
    return CorrespondenceFile(
        corrs=table[:, :4].copy(),
        ratios=table[:, fields.index("ratio")].copy() if "ratio" in fields else None,
        labels=table[:, fields.index("label")].astype(bool) if "label" in fields else None,
        calibrated=header.get("calibrated", "true") == "true",
        coordinate_scale=float(header.get("coordinate_scale", 1.0)),
        gt=gt,
        meta=meta,
    )


def write_correspondences(path, data: CorrespondenceFile) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(format_correspondences(data))


def read_correspondences(path) -> CorrespondenceFile:
    with open(path) as fh:
        return parse_correspondences(fh.read())


def scene_to_file(scene, meta: Optional[dict] = None) -> CorrespondenceFile:
    gt = {}
    if scene.gt_essential is not None:
        gt["gt_essential"] = scene.gt_essential
    if scene.gt_fundamental is not None:
        gt["gt_fundamental"] = scene.gt_fundamental
    if scene.gt_pose is not None:
        gt["gt_rotation"] = scene.gt_pose.rotation
        gt["gt_translation"] = scene.gt_pose.translation
    return CorrespondenceFile(scene.corrs, scene.ratios, scene.labels, True, scene.pixel_scale, gt, meta or {})


def file_to_scene(data: CorrespondenceFile):
    from .geometry import Pose
    from .synthdata import EpipolarScene

    pose = None
    if "gt_rotation" in data.gt and "gt_translation" in data.gt:
        pose = Pose(data.gt["gt_rotation"], data.gt["gt_translation"])
    return EpipolarScene(
        corrs=data.corrs,
        ratios=data.ratios,
        labels=data.labels,
        gt_pose=pose,
        gt_essential=data.gt.get("gt_essential"),
        gt_fundamental=data.gt.get("gt_fundamental"),
        pixel_scale=data.coordinate_scale,
    )


# ---------------------------------------------------------------- metrics CSV
def format_float(x) -> str:
    """Nine significant digits; ``None`` and NaN become empty cells."""
    if x is None or (isinstance(x, float) and x != x):
        return ""
    return f"{float(x):.9g}"


def config_header(config: dict) -> str:
    return f"# config: {json.dumps(config, sort_keys=True, default=str)}\n"


def parse_config_header(lines) -> dict:
    for line in lines:
        if line.startswith("# config:"):
            return json.loads(line[len("# config:"):])
    return {}
