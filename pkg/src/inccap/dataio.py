"""COCO-style annotation ingestion, class-incremental splits and a synthetic shape dataset.

Images enter the pipeline from one of two pools: ``"train"`` images become a
class's training split, ``"val"`` images are halved into validation and test
(MS-COCO 2014 has no public test set).  An image is *clear* when exactly one of
its labels belongs to the class universe; only clear images are used, so that a
new task never shows objects from an old one.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import AnnotationError, ConfigurationError, ContractViolation


@dataclass(frozen=True)
class ImageRecord:
    image_id: int
    width: int
    height: int
    file_name: str = ""
    pool: str = "train"


@dataclass(frozen=True)
class AnnotationSet:
    images: tuple[ImageRecord, ...] = ()
    captions: tuple[tuple[int, str], ...] = ()
    category_labels: tuple[tuple[int, int], ...] = ()
    categories: Mapping[int, str] = field(default_factory=dict)

    def image_ids(self) -> list[int]:
        return [im.image_id for im in self.images]

    def labels_by_image(self) -> dict[int, set[int]]:
        out: dict[int, set[int]] = {im.image_id: set() for im in self.images}
        for image_id, cat in self.category_labels:
            out[image_id].add(cat)
        return out

    def captions_by_image(self) -> dict[int, list[str]]:
        out: dict[int, list[str]] = {im.image_id: [] for im in self.images}
        for image_id, text in self.captions:
            out[image_id].append(text)
        return out

    def category_id(self, name_or_id) -> int:
        """Resolve a category given either its id or its name."""
        if isinstance(name_or_id, (int, np.integer)):
            return int(name_or_id)
        text = str(name_or_id).strip()
        if text.lstrip("-").isdigit():
            return int(text)
        for cid, name in self.categories.items():
            if name == text:
                return cid
        raise ConfigurationError(f"unknown category {name_or_id!r}")

    def to_json(self) -> dict:
        anns = [{"id": i, "image_id": iid, "caption": cap} for i, (iid, cap) in enumerate(self.captions)]
        base = len(anns)
        anns += [
            {"id": base + i, "image_id": iid, "category_id": cat}
            for i, (iid, cat) in enumerate(self.category_labels)
        ]
        return {
            "images": [
                {"id": im.image_id, "width": im.width, "height": im.height,
                 "file_name": im.file_name, "pool": im.pool}
                for im in self.images
            ],
            "annotations": anns,
            "categories": [{"id": cid, "name": name} for cid, name in sorted(self.categories.items())],
        }


def _field(record, key, where, kind=int):
    if not isinstance(record, dict) or key not in record:
        raise AnnotationError(f"{where}: missing field {key!r}", record=where)
    try:
        return kind(record[key])
    except (TypeError, ValueError) as exc:
        raise AnnotationError(f"{where}: bad value for {key!r}: {record[key]!r}", record=where) from exc


def parse_annotations(data: dict, pool: str = "train", source: str = "<memory>") -> AnnotationSet:
    """Validate an already-decoded COCO-style document."""
    if not isinstance(data, dict):
        raise AnnotationError(f"{source}: top level must be an object")
    images = []
    seen = set()
    for i, rec in enumerate(data.get("images", [])):
        where = f"{source}: images[{i}]"
        image_id = _field(rec, "id", where)
        if image_id in seen:
            raise AnnotationError(f"{where}: duplicate image id {image_id}", record=where)
        seen.add(image_id)
        images.append(ImageRecord(
            image_id,
            int(rec.get("width", 0)),
            int(rec.get("height", 0)),
            str(rec.get("file_name", "")),
            str(rec.get("pool", pool)),
        ))

    categories = {}
    for i, rec in enumerate(data.get("categories", [])):
        where = f"{source}: categories[{i}]"
        categories[_field(rec, "id", where)] = str(rec.get("name", ""))

    captions, labels = [], []
    for i, rec in enumerate(data.get("annotations", [])):
        where = f"{source}: annotations[{i}]"
        image_id = _field(rec, "image_id", where)
        if image_id not in seen:
            raise AnnotationError(f"{where}: image_id {image_id} does not exist", record=where)
        if "caption" not in rec and "category_id" not in rec:
            raise AnnotationError(f"{where}: neither 'caption' nor 'category_id' present", record=where)
        if "caption" in rec:
            captions.append((image_id, _field(rec, "caption", where, str)))
        if "category_id" in rec:
            cat = _field(rec, "category_id", where)
            if categories and cat not in categories:
                raise AnnotationError(f"{where}: category_id {cat} is not a declared category", record=where)
            labels.append((image_id, cat))
    return AnnotationSet(tuple(images), tuple(captions), tuple(labels), categories)


def load_annotations(path, pool: str = "train") -> AnnotationSet:
    """Read a COCO caption/instance file.  Unknown fields are ignored.

    ``pool`` is the default origin pool for images that do not carry one.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: parse error at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return parse_annotations(data, pool=pool, source=str(path))


def merge_annotations(*sets: AnnotationSet) -> AnnotationSet:
    """Concatenate annotation sets, e.g. a captions file with its instances file.

    Images present in several inputs are kept once (first occurrence wins).
    """
    images, seen = [], set()
    captions, labels, categories = [], [], {}
    for ann in sets:
        for im in ann.images:
            if im.image_id not in seen:
                seen.add(im.image_id)
                images.append(im)
        captions.extend(ann.captions)
        labels.extend(ann.category_labels)
        categories.update(ann.categories)
    labels = list(dict.fromkeys(labels))
    return AnnotationSet(tuple(images), tuple(captions), tuple(labels), categories)


def filter_clear_images(ann: AnnotationSet, class_universe: Iterable[int]) -> AnnotationSet:
    """Keep images with exactly one label from ``class_universe``; drop the rest and their captions."""
    universe = set(class_universe)
    if not universe:
        raise ContractViolation("class_universe must be non-empty")
    labels = ann.labels_by_image()
    keep = {iid for iid, cats in labels.items() if len(cats & universe) == 1}
    return AnnotationSet(
        tuple(im for im in ann.images if im.image_id in keep),
        tuple(c for c in ann.captions if c[0] in keep),
        tuple(l for l in ann.category_labels if l[0] in keep),
        dict(ann.categories),
    )


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    class_set: frozenset
    train: tuple[int, ...] = ()
    val: tuple[int, ...] = ()
    test: tuple[int, ...] = ()
    resize_to: tuple[int, int] = (224, 224)

    def __post_init__(self):
        object.__setattr__(self, "class_set", frozenset(self.class_set))
        for name in ("train", "val", "test"):
            object.__setattr__(self, name, tuple(int(i) for i in getattr(self, name)))
        size = self.resize_to
        if isinstance(size, (int, np.integer)):
            size = (size, size)
        object.__setattr__(self, "resize_to", tuple(int(s) for s in size))
        a, b, c = set(self.train), set(self.val), set(self.test)
        if a & b or a & c or b & c:
            raise ContractViolation(f"task {self.task_id}: train/val/test overlap")

    def split(self, name: str) -> tuple[int, ...]:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    def to_manifest(self) -> dict:
        return {
            "task_id": self.task_id,
            "class_set": sorted(self.class_set),
            "train": list(self.train),
            "val": list(self.val),
            "test": list(self.test),
            "resize_to": list(self.resize_to),
        }

    @classmethod
    def from_manifest(cls, data: dict) -> "TaskSpec":
        return cls(int(data["task_id"]), frozenset(data["class_set"]), data["train"],
                   data["val"], data["test"], tuple(data["resize_to"]))


def write_manifest(task: TaskSpec, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(task.to_manifest(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_manifest(path) -> TaskSpec:
    return TaskSpec.from_manifest(json.loads(Path(path).read_text(encoding="utf-8")))


def halve(pool: Iterable[int]) -> tuple[list[int], list[int]]:
    """Sort ascending; the first ceil(n/2) ids go to validation, the rest to test."""
    ids = sorted(pool)
    cut = math.ceil(len(ids) / 2)
    return ids[:cut], ids[cut:]


def build_split(ann: AnnotationSet, class_ordering: Sequence[int], resize_to=224) -> list[TaskSpec]:
    """One TaskSpec per class of ``class_ordering``; ``task_id`` is the class's position.

    ``ann`` must already be clear-filtered.  Classes without images are skipped
    with a warning.
    """
    ordering = list(class_ordering)
    wanted = set(ordering)
    pools: dict[int, dict[str, list[int]]] = {c: {"train": [], "val": []} for c in ordering}
    pool_of = {im.image_id: im.pool for im in ann.images}
    for image_id, cats in ann.labels_by_image().items():
        hit = cats & wanted
        if len(hit) > 1:
            raise ContractViolation(f"image {image_id} carries several classes {sorted(hit)}; filter first")
        if hit:
            pool = pool_of[image_id]
            if pool not in ("train", "val"):
                raise ContractViolation(f"image {image_id} has unknown pool {pool!r}")
            pools[hit.pop()][pool].append(image_id)

    tasks = []
    for position, cat in enumerate(ordering):
        train, valpool = pools[cat]["train"], pools[cat]["val"]
        if not train and not valpool:
            warnings.warn(f"class {cat} has no images; skipped", stacklevel=2)
            continue
        val, test = halve(valpool)
        tasks.append(TaskSpec(position, frozenset([cat]), sorted(train), val, test, resize_to))
    return tasks


def merge_tasks(tasks: Sequence[TaskSpec], task_id: int) -> TaskSpec:
    """Pool several single-class tasks into one multi-class task."""
    if not tasks:
        raise ContractViolation("cannot merge an empty list of tasks")
    sizes = {t.resize_to for t in tasks}
    if len(sizes) != 1:
        raise ContractViolation(f"tasks disagree on resize_to: {sorted(sizes)}")
    return TaskSpec(
        task_id,
        frozenset().union(*(t.class_set for t in tasks)),
        sorted(i for t in tasks for i in t.train),
        sorted(i for t in tasks for i in t.val),
        sorted(i for t in tasks for i in t.test),
        sizes.pop(),
    )


# --------------------------------------------------------------------------- images


def resize_nearest(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    _, h, w = image.shape
    rows = (np.arange(size[0]) * h // size[0]).astype(int)
    cols = (np.arange(size[1]) * w // size[1]).astype(int)
    return image[:, rows][:, :, cols]


class ImageStore:
    """Image arrays and raw reference captions keyed by image id.

    Arrays are channels x H x W in [0, 1].  ``loader`` (optional) is called with an
    image id to fetch pixels lazily, e.g. from disk; in-memory arrays are resized
    with nearest-neighbour interpolation when ``resize_to`` differs.
    """

    def __init__(self, images=None, captions=None, resize_to=None, loader=None):
        self._images = dict(images or {})
        self._captions = {int(k): list(v) for k, v in (captions or {}).items()}
        self.resize_to = tuple(resize_to) if resize_to is not None else None
        self._loader = loader

    def __contains__(self, image_id) -> bool:
        return image_id in self._captions or image_id in self._images

    def ids(self) -> list[int]:
        return sorted(set(self._images) | set(self._captions))

    def image(self, image_id: int) -> np.ndarray:
        if image_id in self._images:
            img = self._images[image_id]
        elif self._loader is not None:
            img = self._loader(image_id)
        else:
            raise KeyError(image_id)
        if self.resize_to is not None and img.shape[1:] != self.resize_to:
            img = resize_nearest(img, self.resize_to)
        return img

    def images(self, ids: Sequence[int]) -> np.ndarray:
        return np.stack([self.image(i) for i in ids]) if len(ids) else np.zeros((0,))

    def captions(self, image_id: int) -> list[str]:
        return list(self._captions[image_id])

    def save(self, path) -> None:
        ids = sorted(self._images)
        np.savez_compressed(path, ids=np.array(ids, dtype=np.int64),
                            images=np.stack([self._images[i] for i in ids]))

    @classmethod
    def from_npz(cls, path, ann: AnnotationSet) -> "ImageStore":
        with np.load(path) as data:
            images = {int(i): arr for i, arr in zip(data["ids"], data["images"])}
        return cls(images, ann.captions_by_image())


def file_loader(ann: AnnotationSet, image_dir, size=(224, 224)):
    """Loader for real photographs: RGB, bilinear resize, scaled to [0, 1]."""
    from PIL import Image

    names = {im.image_id: im.file_name for im in ann.images}
    root = Path(image_dir)

    def load(image_id: int) -> np.ndarray:
        with Image.open(root / names[image_id]) as im:
            im = im.convert("RGB").resize((size[1], size[0]), Image.BILINEAR)
            return (np.asarray(im, dtype=np.float32) / 255.0).transpose(2, 0, 1)

    return load


# --------------------------------------------------------------------------- synthetic scenes

COLORS = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.75, 0.2),
    "blue": (0.15, 0.3, 0.95),
    "yellow": (0.95, 0.9, 0.1),
    "white": (0.95, 0.95, 0.95),
    "purple": (0.6, 0.15, 0.8),
}
SIZES = {"small": 0.13, "large": 0.23}
POSITIONS = {
    "left": ((0.5, 0.28), "on the left"),
    "right": ((0.5, 0.72), "on the right"),
    "top": ((0.28, 0.5), "near the top"),
    "bottom": ((0.72, 0.5), "near the bottom"),
    "middle": ((0.5, 0.5), "in the middle"),
}


def _mask_square(x, y, r):
    return (np.abs(x) <= r) & (np.abs(y) <= r)


def _mask_circle(x, y, r):
    return np.hypot(x, y) <= r


def _mask_triangle(x, y, r):
    return (y <= r) & (y >= 2 * np.abs(x) - r)


def _mask_diamond(x, y, r):
    return np.abs(x) + np.abs(y) <= r * 1.2


def _mask_cross(x, y, r):
    t = r / 3
    return ((np.abs(x) <= t) & (np.abs(y) <= r)) | ((np.abs(y) <= t) & (np.abs(x) <= r))


def _mask_ring(x, y, r):
    d = np.hypot(x, y)
    return (d <= r) & (d >= 0.55 * r)


def _mask_star(x, y, r):
    theta = np.arctan2(y, x)
    return np.hypot(x, y) <= r * (0.6 + 0.4 * np.cos(5 * theta))


def _mask_oval(x, y, r):
    return (x / r) ** 2 + (y / (0.5 * r)) ** 2 <= 1


def _mask_heart(x, y, r):
    u, v = x / r * 1.25, -y / r * 1.25 + 0.2
    return (u**2 + v**2 - 1) ** 3 - u**2 * v**3 <= 0


def _mask_crescent(x, y, r):
    return (np.hypot(x, y) <= r) & (np.hypot(x - 0.45 * r, y) > 0.8 * r)


def _mask_hexagon(x, y, r):
    ax, ay = np.abs(x), np.abs(y)
    return (ay <= r * 0.866) & (ax * 0.866 + ay * 0.5 <= r * 0.866)


def _mask_bar(x, y, r):
    return (np.abs(y) <= r / 3) & (np.abs(x) <= r)


def _mask_pillar(x, y, r):
    return (np.abs(x) <= r / 3) & (np.abs(y) <= r)


def _mask_arrow(x, y, r):
    head = (x >= 0) & (np.abs(y) <= r - x)
    shaft = (x < 0) & (x >= -r) & (np.abs(y) <= r / 4)
    return head | shaft


# noun, mask, caption templates ({size}, {color}, {pos} slots)
SHAPES = {
    "square": (_mask_square, [
        "a {size} {color} square {pos}",
        "a {color} square sitting {pos}",
        "there is a {size} square colored {color} {pos}",
    ]),
    "circle": (_mask_circle, [
        "a {size} {color} circle {pos}",
        "a round {color} circle {pos}",
        "a {color} circle of {size} size drawn {pos}",
    ]),
    "triangle": (_mask_triangle, [
        "a {size} {color} triangle {pos}",
        "a {color} triangle pointing up {pos}",
        "there is a {size} triangle colored {color} {pos}",
    ]),
    "diamond": (_mask_diamond, [
        "a {size} {color} diamond {pos}",
        "a {color} diamond tilted on its corner {pos}",
        "a {color} diamond of {size} size {pos}",
    ]),
    "cross": (_mask_cross, [
        "a {size} {color} cross {pos}",
        "a {color} cross with four arms {pos}",
        "there is a {size} cross colored {color} {pos}",
    ]),
    "ring": (_mask_ring, [
        "a {size} {color} ring {pos}",
        "a {color} ring with a hole {pos}",
        "a hollow {color} ring of {size} size {pos}",
    ]),
    "star": (_mask_star, [
        "a {size} {color} star {pos}",
        "a {color} star with five points shining {pos}",
        "one {size} star glowing {color} {pos}",
    ]),
    "oval": (_mask_oval, [
        "a {size} {color} oval {pos}",
        "a flat {color} oval lying {pos}",
        "one {size} oval painted {color} {pos}",
    ]),
    "heart": (_mask_heart, [
        "a {size} {color} heart {pos}",
        "a lovely {color} heart floating {pos}",
        "one {size} heart painted {color} {pos}",
    ]),
    "crescent": (_mask_crescent, [
        "a {size} {color} crescent {pos}",
        "a {color} crescent like the moon {pos}",
        "one {size} crescent glowing {color} {pos}",
    ]),
    "hexagon": (_mask_hexagon, [
        "a {size} {color} hexagon {pos}",
        "a {color} hexagon with six sides {pos}",
        "one {size} hexagon painted {color} {pos}",
    ]),
    "bar": (_mask_bar, [
        "a {size} {color} bar {pos}",
        "a {color} bar lying flat {pos}",
    ]),
    "pillar": (_mask_pillar, [
        "a {size} {color} pillar {pos}",
        "a {color} pillar standing upright {pos}",
    ]),
    "arrow": (_mask_arrow, [
        "a {size} {color} arrow {pos}",
        "a {color} arrow pointing right {pos}",
        "one {size} arrow painted {color} {pos}",
    ]),
}
# stable category ids, independent of the order a caller lists classes in
SHAPE_IDS = {name: i + 1 for i, name in enumerate(SHAPES)}


@dataclass(frozen=True)
class SyntheticScene:
    canvas: np.ndarray
    shape_class: int
    attributes: tuple[str, str, str]
    references: tuple[str, ...]


def render_scene(shape: str, rng: np.random.Generator, image_size: int = 32) -> SyntheticScene:
    if shape not in SHAPES:
        raise ConfigurationError(f"unknown shape {shape!r}; choose from {sorted(SHAPES)}")
    mask_fn, templates = SHAPES[shape]
    color = rng.choice(sorted(COLORS))
    size = rng.choice(sorted(SIZES))
    position = rng.choice(sorted(POSITIONS))
    (cy, cx), phrase = POSITIONS[position]
    s = image_size
    cy = (cy + rng.uniform(-0.04, 0.04)) * s
    cx = (cx + rng.uniform(-0.04, 0.04)) * s
    r = SIZES[size] * s * rng.uniform(0.9, 1.1)
    yy, xx = np.mgrid[0:s, 0:s] + 0.5
    mask = mask_fn(xx - cx, yy - cy, r)

    canvas = rng.uniform(0.0, 0.15, size=(3, s, s))
    tint = np.asarray(COLORS[color]) * rng.uniform(0.85, 1.0)
    canvas[:, mask] = tint[:, None] + rng.normal(0.0, 0.03, size=(3, int(mask.sum())))
    canvas = np.clip(canvas, 0.0, 1.0).astype(np.float32)
    refs = tuple(t.format(size=size, color=color, pos=phrase) for t in templates)
    return SyntheticScene(canvas, SHAPE_IDS[shape], (str(color), str(size), str(position)), refs)


def generate_synthetic(class_list: Sequence[str], n_per_class: int | Mapping[str, int], seed: int,
                       image_size: int = 32) -> tuple[AnnotationSet, ImageStore]:
    """Render ``n_per_class`` clear scenes per shape.

    Every third scene of a class (indices 2, 5, 8, ...) goes to the ``"val"`` pool,
    the rest to ``"train"``.  Each scene is seeded from (seed, class id, index), so
    a class's scenes do not depend on which other classes are requested.
    ``n_per_class`` may map shape names to counts; unlisted shapes then get
    the mapping's ``"default"`` entry.
    """
    for name in class_list:
        if name not in SHAPES:
            raise ConfigurationError(f"unknown shape {name!r}; choose from {sorted(SHAPES)}")
    if isinstance(n_per_class, Mapping):
        counts = {n: int(n_per_class.get(n, n_per_class.get("default", 0))) for n in class_list}
    else:
        counts = {n: int(n_per_class) for n in class_list}
    if any(c < 3 for c in counts.values()):
        raise ConfigurationError("n_per_class must be >= 3 for every class")
    images, captions, labels, pixels = [], [], [], {}
    next_id = 1
    for name in class_list:
        cid = SHAPE_IDS[name]
        for k in range(counts[name]):
            rng = np.random.default_rng([seed, cid, k])
            scene = render_scene(name, rng, image_size)
            pool = "val" if k % 3 == 2 else "train"
            images.append(ImageRecord(next_id, image_size, image_size, f"{name}_{k:05d}.npy", pool))
            captions.extend((next_id, ref) for ref in scene.references)
            labels.append((next_id, cid))
            pixels[next_id] = scene.canvas
            next_id += 1
    cats = {SHAPE_IDS[n]: n for n in class_list}
    ann = AnnotationSet(tuple(images), tuple(captions), tuple(labels), cats)
    return ann, ImageStore(pixels, ann.captions_by_image())


def save_synthetic(ann: AnnotationSet, store: ImageStore, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "annotations.json").write_text(json.dumps(ann.to_json(), indent=1, sort_keys=True) + "\n",
                                          encoding="utf-8")
    store.save(out / "images.npz")


def load_synthetic(out_dir) -> tuple[AnnotationSet, ImageStore]:
    out = Path(out_dir)
    ann = load_annotations(out / "annotations.json")
    return ann, ImageStore.from_npz(out / "images.npz", ann)
