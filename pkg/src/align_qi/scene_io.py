"""On-disk formats: point clouds, calibrations, instance masks, ground truth, anchors.

Scene directory layout::

    <scene_dir>/<scene_id>.bin   packed little-endian float32 x5 per point
    <scene_dir>/calib.json
    <scene_dir>/masks.json
    <scene_dir>/gt.json          optional
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (BboxMismatch, EmptyMask, FormatError, InvalidRotation,
                     RleLengthMismatch, SchemaError)
from .geometry import CameraCalibration, calibration_violations

CLASS_NAMES = (
    "car", "truck", "bus", "trailer", "construction_vehicle",
    "pedestrian", "motorcycle", "bicycle", "traffic_cone", "barrier",
)
NUM_CLASSES = len(CLASS_NAMES)
NUM_CAMERAS = 6
RECORD_FLOATS = 5
RECORD_BYTES = 4 * RECORD_FLOATS
ANCHOR_KINDS = ("oce", "cluster", "neighbor", "background")


# --------------------------------------------------------------------------
# data types
# --------------------------------------------------------------------------

def mask_bbox(bitmap: np.ndarray) -> tuple[int, int, int, int]:
    """Tight (u_min, v_min, u_max, v_max) of the true pixels, inclusive."""
    rows = np.flatnonzero(bitmap.any(axis=1))
    cols = np.flatnonzero(bitmap.any(axis=0))
    if len(rows) == 0:
        raise EmptyMask("mask has no true pixels")
    return int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1])


@dataclass(eq=False)
class InstanceMask:
    camera_id: int
    class_id: int
    bitmap: np.ndarray  # (height, width) bool, indexed [v, u]
    instance_id: int
    bbox: Optional[tuple[int, int, int, int]] = None

    def __post_init__(self):
        self.bitmap = np.asarray(self.bitmap, dtype=bool)
        tight = mask_bbox(self.bitmap)
        if self.bbox is None:
            self.bbox = tight
        elif tuple(int(b) for b in self.bbox) != tight:
            raise BboxMismatch(
                f"instance {self.instance_id}: bbox {tuple(self.bbox)} != tight bbox {tight}")
        else:
            self.bbox = tight
        if not 0 <= self.class_id < NUM_CLASSES:
            raise SchemaError(f"class_id {self.class_id} outside [0, {NUM_CLASSES - 1}]")

    @property
    def width(self) -> int:
        return self.bitmap.shape[1]

    @property
    def height(self) -> int:
        return self.bitmap.shape[0]

    @property
    def area(self) -> int:
        return int(self.bitmap.sum())


@dataclass
class GTBox:
    center: np.ndarray
    size: tuple[float, float, float]  # (w, l, h)
    yaw: float
    class_id: int
    visible_fraction: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.size = tuple(float(s) for s in self.size)
        problems = []
        if self.center.shape != (3,) or not np.all(np.isfinite(self.center)):
            problems.append("center must be 3 finite numbers")
        if len(self.size) != 3 or min(self.size) <= 0:
            problems.append("size components must be > 0")
        if not 0.0 <= self.visible_fraction <= 1.0:
            problems.append("visible_fraction must lie in [0, 1]")
        if not 0 <= self.class_id < NUM_CLASSES:
            problems.append(f"class_id {self.class_id} outside [0, {NUM_CLASSES - 1}]")
        if problems:
            raise SchemaError("; ".join(problems), problems)

    def corners_bev(self) -> np.ndarray:
        """Four BEV corners (x, y), counter-clockwise; length runs along yaw."""
        w, l, _ = self.size
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        local = np.array([[l, w], [-l, w], [-l, -w], [l, -w]]) / 2.0
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.center[:2]

    def to_dict(self) -> dict:
        return {
            "center": [float(v) for v in self.center],
            "size": list(self.size),
            "yaw": float(self.yaw),
            "class_id": int(self.class_id),
            "visible_fraction": float(self.visible_fraction),
        }


@dataclass
class Scene:
    scene_id: str
    points: np.ndarray
    cameras: list[CameraCalibration]
    masks: list[InstanceMask] = field(default_factory=list)
    ground_truth: Optional[list[GTBox]] = None
    intensity: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.scene_id:
            raise SchemaError("scene_id must be non-empty")
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        ids = {c.camera_id for c in self.cameras}
        bad = sorted({m.camera_id for m in self.masks if m.camera_id not in ids})
        if bad:
            raise SchemaError(f"masks reference unknown camera ids {bad}")

    def camera(self, camera_id: int) -> CameraCalibration:
        for cam in self.cameras:
            if cam.camera_id == camera_id:
                return cam
        raise KeyError(camera_id)

    def masks_for(self, camera_id: int) -> list[InstanceMask]:
        return [m for m in self.masks if m.camera_id == camera_id]


@dataclass
class QueryAnchor:
    position: np.ndarray
    kind: str
    class_id: Optional[int] = None
    source: Optional[int] = None

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        if self.kind not in ANCHOR_KINDS:
            raise SchemaError(f"unknown anchor kind {self.kind!r}")


@dataclass
class AnchorSet:
    anchors: list[QueryAnchor]
    config_hash: str
    scene_id: str

    def positions(self, kinds=None) -> np.ndarray:
        sel = [a.position for a in self.anchors if kinds is None or a.kind in kinds]
        return np.array(sel, dtype=float).reshape(-1, 3)

    def kinds(self) -> list[str]:
        return [a.kind for a in self.anchors]


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def read_json(path):
    raw = Path(path).read_bytes()
    try:
        return json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, ValueError, RecursionError) as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from None


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        return False
    try:
        return math.isfinite(v)
    except OverflowError:
        return False


def _num_matrix(v, rows, cols) -> Optional[np.ndarray]:
    if (isinstance(v, list) and len(v) == rows
            and all(isinstance(r, list) and len(r) == cols and all(_is_num(x) for x in r)
                    for r in v)):
        return np.array(v, dtype=float)
    return None


# --------------------------------------------------------------------------
# point clouds
# --------------------------------------------------------------------------

def load_point_cloud(path) -> tuple[np.ndarray, np.ndarray]:
    """Read an nuScenes-style sweep: returns (points (n, 3), intensity (n,)).

    The fifth field (ring index) is discarded.
    """
    raw = Path(path).read_bytes()
    if len(raw) % RECORD_BYTES:
        raise FormatError(f"{path}: size {len(raw)} is not a multiple of {RECORD_BYTES}")
    rec = np.frombuffer(raw, dtype="<f4").reshape(-1, RECORD_FLOATS)
    if not np.all(np.isfinite(rec[:, :3])):
        raise FormatError(f"{path}: non-finite coordinates")
    return rec[:, :3].astype(np.float64), rec[:, 3].astype(np.float64)


def encode_point_cloud(points, intensity=None) -> bytes:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    rec = np.zeros((len(pts), RECORD_FLOATS), dtype="<f4")
    rec[:, :3] = pts
    if intensity is not None:
        rec[:, 3] = np.asarray(intensity, dtype=float)
    return rec.tobytes()


def save_point_cloud(path, points, intensity=None) -> None:
    atomic_write_bytes(path, encode_point_cloud(points, intensity))


# --------------------------------------------------------------------------
# calibration
# --------------------------------------------------------------------------

def parse_calibration(doc) -> list[CameraCalibration]:
    problems: list[str] = []
    if not isinstance(doc, dict) or not isinstance(doc.get("cameras"), list):
        raise SchemaError("calibration: top level must be an object with a 'cameras' list")
    cams = []
    seen = set()
    for n, entry in enumerate(doc["cameras"]):
        where = f"cameras[{n}]"
        if not isinstance(entry, dict):
            problems.append(f"{where}: must be an object")
            continue
        missing = [k for k in ("camera_id", "intrinsics", "extrinsic", "width", "height")
                   if k not in entry]
        problems += [f"{where}: missing key '{k}'" for k in missing]
        if missing:
            continue
        cid = entry["camera_id"]
        if not _is_int(cid) or not 0 <= cid < NUM_CAMERAS:
            problems.append(f"{where}: camera_id must be an integer in [0, {NUM_CAMERAS - 1}]")
            continue
        if cid in seen:
            problems.append(f"{where}: duplicate camera_id {cid}")
        seen.add(cid)
        K = _num_matrix(entry["intrinsics"], 3, 3)
        E = _num_matrix(entry["extrinsic"], 4, 4)
        if K is None:
            problems.append(f"{where}: 'intrinsics' must be a 3x3 numeric matrix")
        if E is None:
            problems.append(f"{where}: 'extrinsic' must be a 4x4 numeric matrix")
        if K is None or E is None:
            continue
        w, h = entry["width"], entry["height"]
        found = [f"{where}: {p}" for p in calibration_violations(K, E, w, h)]
        if found:
            problems += found
            continue
        cams.append(CameraCalibration(K, E, int(w), int(h), int(cid)))
    if problems:
        if all(": rotation:" in p for p in problems):
            raise InvalidRotation("; ".join(problems), problems)
        raise SchemaError("; ".join(problems), problems)
    return cams


def load_calibration(path) -> list[CameraCalibration]:
    return parse_calibration(read_json(path))


def calibration_to_dict(cameras) -> dict:
    return {"cameras": [
        {
            "camera_id": int(c.camera_id),
            "intrinsics": c.intrinsics.tolist(),
            "extrinsic": c.extrinsic.tolist(),
            "width": int(c.image_width),
            "height": int(c.image_height),
        }
        for c in cameras
    ]}


# --------------------------------------------------------------------------
# masks (column-major RLE, first run counts zeros)
# --------------------------------------------------------------------------

def rle_encode(bitmap) -> list[int]:
    flat = np.asarray(bitmap, dtype=bool).ravel(order="F")
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return runs


def rle_decode(counts, width: int, height: int) -> np.ndarray:
    counts = [int(c) for c in counts]
    total = sum(counts)
    if any(c < 0 for c in counts) or total != width * height:
        raise RleLengthMismatch(
            f"RLE counts sum to {total}, expected {width}x{height}={width * height}")
    counts = np.asarray(counts, dtype=np.int64)
    values = np.arange(counts.size) % 2 == 1
    flat = np.repeat(values, counts)
    return flat.reshape((height, width), order="F")


def parse_masks(doc) -> list[InstanceMask]:
    if not isinstance(doc, dict):
        raise SchemaError("masks: top level must be an object")
    w, h, inst = doc.get("width"), doc.get("height"), doc.get("instances")
    if not (_is_int(w) and w > 0 and _is_int(h) and h > 0):
        raise SchemaError("masks: 'width' and 'height' must be positive integers")
    if not isinstance(inst, list):
        raise SchemaError("masks: 'instances' must be a list")
    out = []
    seen = set()
    for n, e in enumerate(inst):
        where = f"instances[{n}]"
        if not isinstance(e, dict):
            raise SchemaError(f"{where}: must be an object")
        for key in ("camera_id", "instance_id", "class_id", "bbox", "rle_counts"):
            if key not in e:
                raise SchemaError(f"{where}: missing key '{key}'")
        cid, iid, cls = e["camera_id"], e["instance_id"], e["class_id"]
        if not (_is_int(cid) and 0 <= cid < NUM_CAMERAS):
            raise SchemaError(f"{where}: camera_id must be an integer in [0, {NUM_CAMERAS - 1}]")
        if not (_is_int(cls) and 0 <= cls < NUM_CLASSES):
            raise SchemaError(f"{where}: class_id must be an integer in [0, {NUM_CLASSES - 1}]")
        if not _is_int(iid):
            raise SchemaError(f"{where}: instance_id must be an integer")
        if iid in seen:
            raise SchemaError(f"{where}: duplicate instance_id {iid}")
        seen.add(iid)
        bbox, counts = e["bbox"], e["rle_counts"]
        if not (isinstance(bbox, list) and len(bbox) == 4 and all(_is_int(b) for b in bbox)):
            raise SchemaError(f"{where}: bbox must be 4 integers")
        if not (isinstance(counts, list) and all(_is_int(c) for c in counts)):
            raise SchemaError(f"{where}: rle_counts must be a list of integers")
        if any(c < 0 for c in counts):
            raise RleLengthMismatch(f"{where}: negative RLE count")
        bitmap = rle_decode(counts, w, h)
        if not bitmap.any():
            raise EmptyMask(f"{where}: mask has no true pixels")
        tight = mask_bbox(bitmap)
        if tuple(bbox) != tight:
            raise BboxMismatch(f"{where}: bbox {tuple(bbox)} != tight bbox {tight}")
        out.append(InstanceMask(cid, cls, bitmap, iid, tight))
    return out


def load_masks(path) -> list[InstanceMask]:
    return parse_masks(read_json(path))


def masks_to_dict(masks, width: int, height: int) -> dict:
    return {
        "width": int(width),
        "height": int(height),
        "instances": [
            {
                "camera_id": int(m.camera_id),
                "instance_id": int(m.instance_id),
                "class_id": int(m.class_id),
                "bbox": [int(b) for b in m.bbox],
                "rle_counts": rle_encode(m.bitmap),
            }
            for m in masks
        ],
    }


# --------------------------------------------------------------------------
# ground truth
# --------------------------------------------------------------------------

def parse_ground_truth(doc) -> list[GTBox]:
    if not isinstance(doc, list):
        raise SchemaError("gt: top level must be a list")
    out = []
    for n, e in enumerate(doc):
        where = f"gt[{n}]"
        if not isinstance(e, dict):
            raise SchemaError(f"{where}: must be an object")
        try:
            center, size = e["center"], e["size"]
            yaw, cls, vis = e["yaw"], e["class_id"], e["visible_fraction"]
        except KeyError as exc:
            raise SchemaError(f"{where}: missing key {exc}") from None
        if not (isinstance(center, list) and len(center) == 3 and all(map(_is_num, center))):
            raise SchemaError(f"{where}: center must be 3 numbers")
        if not (isinstance(size, list) and len(size) == 3 and all(map(_is_num, size))):
            raise SchemaError(f"{where}: size must be 3 numbers")
        if not (_is_num(yaw) and _is_int(cls) and _is_num(vis)):
            raise SchemaError(f"{where}: yaw/class_id/visible_fraction have wrong types")
        out.append(GTBox(np.array(center, dtype=float), tuple(size), float(yaw), cls, float(vis)))
    return out


def load_ground_truth(path) -> list[GTBox]:
    return parse_ground_truth(read_json(path))


# --------------------------------------------------------------------------
# anchors (JSON lines with a header record)
# --------------------------------------------------------------------------

def anchors_to_text(anchor_set: AnchorSet) -> str:
    lines = [json.dumps({"scene_id": anchor_set.scene_id,
                         "config_hash": anchor_set.config_hash,
                         "count": len(anchor_set.anchors)}, sort_keys=True)]
    for a in anchor_set.anchors:
        x, y, z = (float(v) for v in a.position)
        lines.append(json.dumps({
            "x": x, "y": y, "z": z, "kind": a.kind,
            "class_id": None if a.class_id is None else int(a.class_id),
            "source": None if a.source is None else int(a.source),
        }, sort_keys=True))
    return "\n".join(lines) + "\n"


def save_anchors(anchor_set: AnchorSet, path) -> None:
    atomic_write_text(path, anchors_to_text(anchor_set))


def parse_anchors(text: str) -> AnchorSet:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise SchemaError("anchors: missing header line")
    try:
        header = json.loads(lines[0])
        records = [json.loads(ln) for ln in lines[1:]]
    except (ValueError, RecursionError) as exc:
        raise SchemaError(f"anchors: invalid JSON line ({exc})") from None
    if not (isinstance(header, dict) and isinstance(header.get("scene_id"), str)
            and isinstance(header.get("config_hash"), str) and _is_int(header.get("count"))):
        raise SchemaError("anchors: header needs scene_id, config_hash, count")
    if header["count"] != len(records):
        raise SchemaError(f"anchors: header count {header['count']} != {len(records)} records")
    anchors = []
    for n, r in enumerate(records):
        if not isinstance(r, dict):
            raise SchemaError(f"anchors[{n}]: must be an object")
        if not all(_is_num(r.get(k)) for k in "xyz"):
            raise SchemaError(f"anchors[{n}]: x, y, z must be finite numbers")
        kind = r.get("kind")
        if kind not in ANCHOR_KINDS:
            raise SchemaError(f"anchors[{n}]: unknown kind {kind!r}")
        cls, src = r.get("class_id"), r.get("source")
        if cls is not None and not _is_int(cls):
            raise SchemaError(f"anchors[{n}]: class_id must be int or null")
        if src is not None and not _is_int(src):
            raise SchemaError(f"anchors[{n}]: source must be int or null")
        anchors.append(QueryAnchor(np.array([r["x"], r["y"], r["z"]], dtype=float),
                                   kind, cls, src))
    return AnchorSet(anchors, header["config_hash"], header["scene_id"])


def load_anchors(path) -> AnchorSet:
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        raise SchemaError(f"{path}: not UTF-8") from None
    return parse_anchors(text)


# --------------------------------------------------------------------------
# whole scenes
# --------------------------------------------------------------------------

def find_point_cloud(scene_dir) -> Path:
    bins = sorted(Path(scene_dir).glob("*.bin"))
    if len(bins) != 1:
        raise SchemaError(f"{scene_dir}: expected exactly one .bin point cloud, found {len(bins)}")
    return bins[0]


def load_scene(scene_dir) -> Scene:
    scene_dir = Path(scene_dir)
    bin_path = find_point_cloud(scene_dir)
    points, intensity = load_point_cloud(bin_path)
    cameras = load_calibration(scene_dir / "calib.json")
    masks_path = scene_dir / "masks.json"
    masks = load_masks(masks_path) if masks_path.exists() else []
    sizes = {c.camera_id: (c.image_width, c.image_height) for c in cameras}
    for m in masks:
        if m.camera_id not in sizes:
            raise SchemaError(f"{masks_path}: mask {m.instance_id} references unknown camera {m.camera_id}")
        if sizes[m.camera_id] != (m.width, m.height):
            raise SchemaError(f"{masks_path}: mask size {m.width}x{m.height} does not match "
                              f"camera {m.camera_id} ({sizes[m.camera_id][0]}x{sizes[m.camera_id][1]})")
    gt_path = scene_dir / "gt.json"
    gt = load_ground_truth(gt_path) if gt_path.exists() else None
    return Scene(bin_path.stem, points, cameras, masks, gt, intensity)


def save_scene(scene: Scene, scene_dir) -> Path:
    scene_dir = Path(scene_dir)
    scene_dir.mkdir(parents=True, exist_ok=True)
    save_point_cloud(scene_dir / f"{scene.scene_id}.bin", scene.points, scene.intensity)
    atomic_write_text(scene_dir / "calib.json", dumps_json(calibration_to_dict(scene.cameras)))
    if scene.cameras:
        w, h = scene.cameras[0].image_width, scene.cameras[0].image_height
    else:
        w = h = 1
    atomic_write_text(scene_dir / "masks.json", dumps_json(masks_to_dict(scene.masks, w, h)))
    if scene.ground_truth is not None:
        atomic_write_text(scene_dir / "gt.json",
                          dumps_json([g.to_dict() for g in scene.ground_truth]))
    return scene_dir
