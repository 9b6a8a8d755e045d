"""
Readers for COCO-style annotation / result files and writers for reports.

Annotation boxes come in as COCO ``[x, y, w, h]`` and are stored as xyxy
``Box`` objects clipped to the image. Category ids are remapped to a dense
``1..C`` index (``Box.class_id``); the original id is kept on the
``Annotation`` and in ``Dataset.categories`` for output.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from .geometry import Box

logger = logging.getLogger(__name__)

REQUIRED_KEYS = ("images", "annotations", "categories")


class AnnotationFormatError(ValueError):
    """Raised when an annotation or result file violates the expected schema."""


@dataclass(frozen=True)
class Annotation:
    box: Box
    category_id: int
    iscrowd: bool = False
    area: float | None = None
    annotation_id: int | None = None

    @property
    def eval_area(self) -> float:
        """Area used for COCO size buckets: the stored area if present, else box area."""
        return self.area if self.area is not None else self.box.area


@dataclass(frozen=True)
class ImageRecord:
    image_id: int
    width: int
    height: int
    boxes: tuple[Annotation, ...] = ()

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise AnnotationFormatError(f"image {self.image_id}: non-positive size")

    def scaled(self, factor: float) -> "ImageRecord":
        """Copy with every box (and stored area) scaled into a resized frame."""
        anns = tuple(
            Annotation(
                a.box.scaled(factor),
                a.category_id,
                a.iscrowd,
                None if a.area is None else a.area * factor * factor,
                a.annotation_id,
            )
            for a in self.boxes
        )
        return ImageRecord(
            self.image_id,
            int(math.floor(self.width * factor + 0.5)),
            int(math.floor(self.height * factor + 0.5)),
            anns,
        )


@dataclass(frozen=True)
class Dataset:
    images: tuple[ImageRecord, ...]
    categories: tuple[int, ...]
    category_names: tuple[str, ...] = ()
    malformed: int = 0
    dropped: int = 0

    def __post_init__(self) -> None:
        if len(self.categories) < 1:
            raise AnnotationFormatError("dataset needs at least one category")
        ids = [im.image_id for im in self.images]
        if len(set(ids)) != len(ids):
            raise AnnotationFormatError("duplicate image_id")

    @property
    def num_classes(self) -> int:
        return len(self.categories)

    def dense_id(self, category_id: int) -> int:
        try:
            return self.categories.index(category_id) + 1
        except ValueError:
            raise AnnotationFormatError(f"unknown category_id {category_id}") from None

    def original_id(self, class_id: int) -> int:
        return self.categories[class_id - 1]

    def image(self, image_id: int) -> ImageRecord:
        for im in self.images:
            if im.image_id == image_id:
                return im
        raise KeyError(image_id)

    @property
    def skipped(self) -> int:
        return self.malformed + self.dropped

    @property
    def num_annotations(self) -> int:
        return sum(len(im.boxes) for im in self.images)


@dataclass
class Detection:
    """
    One detected box.

    ``fused_score`` is what ranking and evaluation use. ``location_id`` packs
    (level, grid_x, grid_y) and ``slot`` is the prediction index at that
    location when several instances are predicted per location.
    """

    box: Box
    class_score: float
    centerness: float | None = None
    fused_score: float | None = None
    location_id: int | None = None
    slot: int = 0
    image_id: int | None = None

    def __post_init__(self) -> None:
        if self.fused_score is None:
            self.fused_score = self.class_score

    @property
    def score(self) -> float:
        return float(self.fused_score)


def _read_json(path: str | Path) -> Any:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    with path.open("r", encoding="utf-8") as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise AnnotationFormatError(f"{path}: invalid JSON ({e})") from e


def _valid_bbox(bbox: Any) -> bool:
    if not isinstance(bbox, (list, tuple)) or len(bbox) != 4:
        return False
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in bbox):
        return False
    if not all(math.isfinite(v) for v in bbox):
        return False
    return bbox[2] >= 0 and bbox[3] >= 0


def parse_annotations(data: Mapping[str, Any]) -> Dataset:
    """Build a Dataset from an already-decoded COCO instances dict."""
    for key in REQUIRED_KEYS:
        if key not in data:
            raise AnnotationFormatError(f"missing required key {key!r}")

    cats = sorted(data["categories"], key=lambda c: c["id"])
    cat_ids = tuple(int(c["id"]) for c in cats)
    cat_names = tuple(str(c.get("name", c["id"])) for c in cats)
    dense = {cid: i + 1 for i, cid in enumerate(cat_ids)}

    sizes: dict[int, tuple[int, int]] = {}
    for im in data["images"]:
        sizes[int(im["id"])] = (int(im["width"]), int(im["height"]))

    grouped: dict[int, list[Annotation]] = defaultdict(list)
    malformed = 0
    dropped = 0
    for ann in data["annotations"]:
        image_id = ann.get("image_id")
        if image_id not in sizes:
            raise AnnotationFormatError(f"annotation references unknown image_id {image_id!r}")
        bbox = ann.get("bbox")
        cid = ann.get("category_id")
        if not _valid_bbox(bbox) or cid not in dense:
            malformed += 1
            continue
        w, h = sizes[image_id]
        box = Box.from_xywh(*map(float, bbox), class_id=dense[cid]).clipped(w, h)
        if box.area <= 0.0:
            dropped += 1
            continue
        area = ann.get("area")
        grouped[image_id].append(
            Annotation(
                box=box,
                category_id=int(cid),
                iscrowd=bool(ann.get("iscrowd", 0)),
                area=float(area) if isinstance(area, (int, float)) else None,
                annotation_id=ann.get("id"),
            )
        )

    images = tuple(
        ImageRecord(iid, w, h, tuple(grouped.get(iid, ())))
        for iid, (w, h) in sizes.items()
    )
    if malformed or dropped:
        logger.warning("%d malformed and %d zero-area annotations skipped", malformed, dropped)
    return Dataset(images, cat_ids, cat_names, malformed=malformed, dropped=dropped)


def load_annotations(path: str | Path) -> Dataset:
    """Read a COCO ``instances_*.json`` file."""
    data = _read_json(path)
    if not isinstance(data, dict):
        raise AnnotationFormatError(f"{path}: top level must be an object")
    return parse_annotations(data)


def load_crowdhuman(
    path: str | Path,
    box_key: str = "fbox",
    sizes: Mapping[str, tuple[int, int]] | None = None,
) -> Dataset:
    """
    Read a CrowdHuman ``.odgt`` file (one JSON object per line).

    Boxes tagged ``mask`` or flagged ``extra.ignore`` become iscrowd regions.
    The format carries no image size; pass ``sizes`` (ID -> (w, h)) or the
    extent of each image's boxes is used instead, in which case no clipping
    happens.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    images = []
    malformed = dropped = 0
    with path.open("r", encoding="utf-8") as f:
        for lineno, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise AnnotationFormatError(f"{path}:{lineno + 1}: invalid JSON ({e})") from e
            raw = []
            for gt in rec.get("gtboxes", []):
                bbox = gt.get(box_key)
                if not isinstance(bbox, (list, tuple)) or len(bbox) != 4 or bbox[2] < 0 or bbox[3] < 0:
                    malformed += 1
                    continue
                ignore = gt.get("tag") != "person" or bool(gt.get("extra", {}).get("ignore", 0))
                raw.append((Box.from_xywh(*map(float, bbox), class_id=1), ignore))
            key = str(rec.get("ID", lineno))
            if sizes is not None and key in sizes:
                w, h = sizes[key]
                clip = True
            else:
                w = max([int(math.ceil(b.x1)) for b, _ in raw] + [1])
                h = max([int(math.ceil(b.y1)) for b, _ in raw] + [1])
                clip = False
            anns = []
            for box, ignore in raw:
                if clip:
                    box = box.clipped(w, h)
                if box.area <= 0.0:
                    dropped += 1
                    continue
                anns.append(Annotation(box, 1, iscrowd=ignore))
            images.append(ImageRecord(lineno, max(w, 1), max(h, 1), tuple(anns)))
    return Dataset(tuple(images), (1,), ("person",), malformed=malformed, dropped=dropped)


def dataset_to_coco(dataset: Dataset) -> dict[str, Any]:
    """Serialize a Dataset back to a COCO instances dict."""
    names = dataset.category_names or tuple(str(c) for c in dataset.categories)
    images = [
        {"id": im.image_id, "width": im.width, "height": im.height} for im in dataset.images
    ]
    annotations = []
    next_id = 1
    for im in dataset.images:
        for a in im.boxes:
            rec: dict[str, Any] = {
                "id": a.annotation_id if a.annotation_id is not None else next_id,
                "image_id": im.image_id,
                "category_id": a.category_id,
                "bbox": a.box.to_xywh(),
                "iscrowd": int(a.iscrowd),
            }
            if a.area is not None:
                rec["area"] = a.area
            annotations.append(rec)
            next_id += 1
    categories = [{"id": c, "name": n} for c, n in zip(dataset.categories, names)]
    return {"images": images, "annotations": annotations, "categories": categories}


def save_annotations(dataset: Dataset, path: str | Path) -> None:
    _write_text(path, json.dumps(dataset_to_coco(dataset), indent=1) + "\n")


def parse_detections(
    records: Iterable[Mapping[str, Any]], dataset: Dataset | None = None
) -> dict[int, list[Detection]]:
    """
    Group COCO result records by image.

    Optional extension fields ``centerness``, ``location_id`` and ``slot`` are
    honoured; other unknown fields are ignored. When ``dataset`` is given the
    category ids are remapped to its dense class index.
    """
    # local import keeps ingestion free of a hard cycle with postprocess
    from .postprocess import fuse

    out: dict[int, list[Detection]] = defaultdict(list)
    for i, rec in enumerate(records):
        try:
            image_id = int(rec["image_id"])
            cid = int(rec["category_id"])
            bbox = rec["bbox"]
            score = float(rec["score"])
        except (KeyError, TypeError, ValueError) as e:
            raise AnnotationFormatError(f"detection record {i}: {e}") from e
        if not _valid_bbox(bbox):
            raise AnnotationFormatError(f"detection record {i}: bad bbox {bbox!r}")
        if not (score >= 0.0):
            raise AnnotationFormatError(f"detection record {i}: negative score {score}")
        class_id = dataset.dense_id(cid) if dataset is not None else cid
        ctr = rec.get("centerness")
        ctr = None if ctr is None else float(ctr)
        fused = fuse(score, ctr) if ctr is not None else score
        loc = rec.get("location_id")
        out[image_id].append(
            Detection(
                box=Box.from_xywh(*map(float, bbox), class_id=class_id),
                class_score=score,
                centerness=ctr,
                fused_score=fused,
                location_id=None if loc is None else int(loc),
                slot=int(rec.get("slot", 0)),
                image_id=image_id,
            )
        )
    return dict(out)


def load_detections(path: str | Path, dataset: Dataset | None = None) -> dict[int, list[Detection]]:
    """Read a COCO results JSON array into per-image detection lists."""
    data = _read_json(path)
    if not isinstance(data, list):
        raise AnnotationFormatError(f"{path}: results file must be a JSON array")
    return parse_detections(data, dataset)


def detections_to_records(
    detections: Mapping[int, Iterable[Detection]], dataset: Dataset | None = None
) -> list[dict[str, Any]]:
    records = []
    for image_id in sorted(detections):
        for d in detections[image_id]:
            cid = dataset.original_id(d.box.class_id) if dataset is not None else d.box.class_id
            rec: dict[str, Any] = {
                "image_id": image_id,
                "category_id": cid,
                "bbox": d.box.to_xywh(),
                "score": d.class_score,
            }
            if d.centerness is not None:
                rec["centerness"] = d.centerness
            if d.location_id is not None:
                rec["location_id"] = d.location_id
            if d.slot:
                rec["slot"] = d.slot
            records.append(rec)
    return records


def save_detections(
    detections: Mapping[int, Iterable[Detection]], path: str | Path, dataset: Dataset | None = None
) -> None:
    _write_text(path, json.dumps(detections_to_records(detections, dataset), indent=1) + "\n")


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def _fmt(value: Any) -> Any:
    """Round floats to 6 significant digits; recurse into containers."""
    if isinstance(value, bool) or value is None:
        return value
    if isinstance(value, float):
        if not math.isfinite(value):
            return str(value)
        return float(f"{value:.6g}")
    if isinstance(value, dict):
        return {k: _fmt(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_fmt(v) for v in value]
    return value


def _csv_cell(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return ""
    return str(value)


def _write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    try:
        if path.parent and not path.parent.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as f:
            f.write(text)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e


def write_report(report: Any, path: str | Path, format: str | None = None) -> None:
    """
    Write one report (or a list of reports) as JSON or CSV.

    Reports expose ``as_dict()`` for JSON and ``rows()`` for CSV. Output is
    deterministic: field order follows the report definition and floats are
    written with 6 significant digits.
    """
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".") or "json").lower()
    reports = list(report) if isinstance(report, (list, tuple)) else [report]
    if fmt == "json":
        payload = [_fmt(r.as_dict()) for r in reports]
        body = payload[0] if len(payload) == 1 and not isinstance(report, (list, tuple)) else payload
        _write_text(path, json.dumps(body, indent=2) + "\n")
    elif fmt == "csv":
        rows: list[dict[str, Any]] = []
        for r in reports:
            rows.extend(r.rows())
        header: list[str] = []
        for row in rows:
            for k in row:
                if k not in header:
                    header.append(k)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_csv_cell(row.get(k)) for k in header])
        _write_text(path, buf.getvalue())
    else:
        raise ValueError(f"unsupported report format {fmt!r}")


@dataclass
class ReportTable:
    """Generic list-of-rows report, used for PR curves and assignment dumps."""

    columns: list[str]
    data: list[list[Any]] = field(default_factory=list)

    def as_dict(self) -> dict[str, Any]:
        return {"columns": self.columns, "rows": self.data}

    def rows(self) -> list[dict[str, Any]]:
        return [dict(zip(self.columns, r)) for r in self.data]
