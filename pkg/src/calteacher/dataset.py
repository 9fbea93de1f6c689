"""COCO-style annotation data model, JSON I/O, and sparse-annotation splits.

Splits remove annotations from a fully annotated dataset to emulate missing
labels. Every split is a pure function of the dataset and a seed; randomness
comes from a single ``numpy`` PCG64 generator consumed in a fixed order
(categories or images sorted by id).
"""

from __future__ import annotations

import csv
import enum
import json
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import BBox, BoxError

# decimals kept when writing xywh boxes; makes save(load(x)) a fixpoint
BOX_DECIMALS = 6


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Image:
    id: int
    width: float
    height: float


@dataclass(frozen=True)
class Category:
    id: int
    name: str


@dataclass(frozen=True)
class Annotation:
    id: int
    image_id: int
    category: int
    box: BBox
    # set on pseudo labels only
    pseudo: bool = False
    score: float | None = None


@dataclass(frozen=True)
class Dataset:
    images: tuple[Image, ...]
    categories: tuple[Category, ...]
    annotations: tuple[Annotation, ...]

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "categories", tuple(self.categories))
        object.__setattr__(self, "annotations", tuple(self.annotations))
        validate(self)

    def counts(self) -> tuple[int, int, int]:
        return len(self.images), len(self.categories), len(self.annotations)

    def by_image(self) -> dict[int, list[Annotation]]:
        out: dict[int, list[Annotation]] = {img.id: [] for img in self.images}
        for ann in self.annotations:
            out[ann.image_id].append(ann)
        return out

    def with_annotations(self, annotations: Iterable[Annotation]) -> "Dataset":
        return Dataset(self.images, self.categories, tuple(annotations))


def validate(d: Dataset) -> None:
    image_ids = [img.id for img in d.images]
    if len(set(image_ids)) != len(image_ids):
        raise DatasetError("duplicate image id")
    cat_ids = [c.id for c in d.categories]
    if len(set(cat_ids)) != len(cat_ids):
        raise DatasetError("duplicate category id")
    images = set(image_ids)
    cats = set(cat_ids)
    seen: set[int] = set()
    for ann in d.annotations:
        if ann.id in seen:
            raise DatasetError(f"duplicate annotation id {ann.id}")
        seen.add(ann.id)
        if ann.image_id not in images:
            raise DatasetError(f"annotation {ann.id} references missing image_id {ann.image_id}")
        if ann.category not in cats:
            raise DatasetError(f"annotation {ann.id} references missing category_id {ann.category}")


# -- JSON I/O ---------------------------------------------------------------


def dataset_from_dict(data: dict) -> Dataset:
    try:
        images = [Image(int(i["id"]), float(i["width"]), float(i["height"])) for i in data["images"]]
        categories = [Category(int(c["id"]), str(c["name"])) for c in data["categories"]]
        sizes = {img.id: img for img in images}
        annotations = []
        for a in data["annotations"]:
            ann_id = int(a["id"])
            image_id = int(a["image_id"])
            if image_id not in sizes:
                raise DatasetError(f"annotation {ann_id} references missing image_id {image_id}")
            x, y, w, h = (float(v) for v in a["bbox"])
            img = sizes[image_id]
            box = BBox.from_xywh(x, y, w, h).clamp(img.width, img.height)
            score = a.get("score")
            annotations.append(
                Annotation(
                    id=ann_id,
                    image_id=image_id,
                    category=int(a["category_id"]),
                    box=box,
                    pseudo=bool(a.get("pseudo", False)),
                    score=None if score is None else float(score),
                )
            )
    except KeyError as e:
        raise DatasetError(f"missing field {e.args[0]!r}") from e
    except (TypeError, ValueError, BoxError) as e:
        if isinstance(e, DatasetError):
            raise
        raise DatasetError(f"malformed record: {e}") from e
    return Dataset(tuple(images), tuple(categories), tuple(annotations))


def _xywh(box: BBox) -> list[float]:
    return [round(v, BOX_DECIMALS) for v in box.to_xywh()]


def dataset_to_dict(d: Dataset) -> dict:
    anns = []
    for a in d.annotations:
        rec = {"id": a.id, "image_id": a.image_id, "category_id": a.category, "bbox": _xywh(a.box)}
        if a.pseudo:
            rec["pseudo"] = True
            rec["score"] = a.score
        anns.append(rec)
    return {
        "images": [{"id": i.id, "width": i.width, "height": i.height} for i in d.images],
        "categories": [{"id": c.id, "name": c.name} for c in d.categories],
        "annotations": anns,
    }


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    try:
        with path.open() as f:
            data = json.load(f)
    except OSError as e:
        raise DatasetError(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(data, dict):
        raise DatasetError(f"{path}: top level must be an object")
    return dataset_from_dict(data)


def dumps_dataset(d: Dataset) -> str:
    """JSON text with one record per line (``indent`` would bypass the C encoder)."""
    data = dataset_to_dict(d)
    enc = json.JSONEncoder(separators=(", ", ": ")).encode
    parts = []
    for key in ("images", "categories", "annotations"):
        recs = ",\n  ".join(enc(r) for r in data[key])
        parts.append(f' "{key}": [\n  {recs}\n ]' if recs else f' "{key}": []')
    return "{\n" + ",\n".join(parts) + "\n}\n"


def save_dataset(d: Dataset, path: str | Path) -> None:
    Path(path).write_text(dumps_dataset(d))


# -- sparse splits ------------------------------------------------------------


class SplitMode(str, enum.Enum):
    PER_CLASS = "per-class"
    PER_IMAGE_CLASS = "per-image-class"
    CLASS_AGNOSTIC = "class-agnostic"
    EASY = "easy"
    HARD = "hard"
    EXTREME = "extreme"


@dataclass(frozen=True)
class SplitSpec:
    mode: SplitMode
    percent: int = 0
    seed: int = 0

    def __post_init__(self):
        try:
            object.__setattr__(self, "mode", SplitMode(self.mode))
        except ValueError:
            raise DatasetError(f"unknown split mode {self.mode!r}") from None
        if not 0 <= self.percent <= 100:
            raise DatasetError(f"percent must be in [0, 100], got {self.percent}")


@dataclass
class DeletionReport:
    # category id -> (total, kept)
    per_category: dict[int, tuple[int, int]] = field(default_factory=dict)
    # image id -> (total, kept)
    per_image: dict[int, tuple[int, int]] = field(default_factory=dict)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["category_id", "total", "kept", "deleted"])
            for cat, (total, kept) in sorted(self.per_category.items()):
                w.writerow([cat, total, kept, total - kept])


def round_half_up(percent: int, n: int) -> int:
    """round(percent% of n) with halves rounded up, in exact integer arithmetic."""
    return (2 * percent * n + 100) // 200


def _per_class(d: Dataset, spec: SplitSpec, rng: np.random.Generator) -> set[int]:
    groups: dict[int, list[int]] = defaultdict(list)
    for a in d.annotations:
        groups[a.category].append(a.id)
    deleted: set[int] = set()
    for cat in sorted(groups):
        ids = sorted(groups[cat])
        perm = rng.permutation(len(ids))
        k = round_half_up(spec.percent, len(ids))
        deleted.update(ids[i] for i in perm[:k])
    return deleted


def _class_agnostic(d: Dataset, spec: SplitSpec, rng: np.random.Generator) -> set[int]:
    ids = sorted(a.id for a in d.annotations)
    perm = rng.permutation(len(ids))
    k = round_half_up(spec.percent, len(ids))
    return {ids[i] for i in perm[:k]}


def _per_image_class(d: Dataset, spec: SplitSpec, rng: np.random.Generator) -> set[int]:
    p = spec.percent / 100.0
    deleted: set[int] = set()
    for image_id, anns in sorted(d.by_image().items()):
        if not anns:
            continue
        anns = sorted(anns, key=lambda a: a.id)
        gone: set[int] = set()
        for cat in sorted({a.category for a in anns}):
            if rng.random() < p:
                gone.update(a.id for a in anns if a.category == cat)
        if len(gone) == len(anns):
            # every image keeps at least one annotation
            gone.discard(anns[int(rng.integers(len(anns)))].id)
        deleted |= gone
    return deleted


def _per_image(d: Dataset, rng: np.random.Generator, n_delete) -> set[int]:
    deleted: set[int] = set()
    for image_id, anns in sorted(d.by_image().items()):
        ids = sorted(a.id for a in anns)
        k = n_delete(len(ids))
        if k <= 0:
            continue
        picks = rng.choice(len(ids), size=k, replace=False)
        deleted.update(ids[i] for i in picks)
    return deleted


def sparsify(d: Dataset, spec: SplitSpec) -> tuple[Dataset, DeletionReport]:
    """Delete annotations from ``d`` according to ``spec``.

    Returns the sparse dataset (images and categories untouched, surviving
    annotations in their original order) and a per-category / per-image
    deletion report.
    """
    if not d.annotations:
        raise DatasetError("cannot sparsify an empty dataset")
    rng = np.random.default_rng(spec.seed)
    mode = spec.mode
    if mode is SplitMode.PER_CLASS:
        deleted = _per_class(d, spec, rng)
    elif mode is SplitMode.CLASS_AGNOSTIC:
        deleted = _class_agnostic(d, spec, rng)
    elif mode is SplitMode.PER_IMAGE_CLASS:
        deleted = _per_image_class(d, spec, rng)
    elif mode is SplitMode.EASY:
        deleted = _per_image(d, rng, lambda n: 1 if n >= 2 else 0)
    elif mode is SplitMode.HARD:
        deleted = _per_image(d, rng, lambda n: n // 2)
    elif mode is SplitMode.EXTREME:
        deleted = _per_image(d, rng, lambda n: n - 1)
    else:  # pragma: no cover
        raise DatasetError(f"unknown split mode {mode!r}")

    kept = [a for a in d.annotations if a.id not in deleted]
    report = DeletionReport()
    cat_total: dict[int, int] = defaultdict(int)
    cat_kept: dict[int, int] = defaultdict(int)
    img_total: dict[int, int] = defaultdict(int)
    img_kept: dict[int, int] = defaultdict(int)
    for a in d.annotations:
        cat_total[a.category] += 1
        img_total[a.image_id] += 1
        if a.id not in deleted:
            cat_kept[a.category] += 1
            img_kept[a.image_id] += 1
    report.per_category = {c.id: (cat_total[c.id], cat_kept[c.id]) for c in d.categories}
    report.per_image = {i.id: (img_total[i.id], img_kept[i.id]) for i in d.images}
    return d.with_annotations(kept), report


def withheld(full: Dataset, sparse: Dataset) -> list[Annotation]:
    """Annotations present in ``full`` but deleted from ``sparse``."""
    kept = {a.id for a in sparse.annotations}
    return [a for a in full.annotations if a.id not in kept]


def relabel(anns: Sequence[Annotation], start_id: int) -> list[Annotation]:
    return [replace(a, id=start_id + i) for i, a in enumerate(anns)]
