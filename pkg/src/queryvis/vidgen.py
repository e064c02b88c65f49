"""Synthetic moving-shape videos, pseudo-videos from stills, and annotation I/O.

Rendering is alias-free (hard pixel-center membership tests), so ground-truth
masks are exact and every box is the tight bounding box of its mask. The file
schema mirrors the YouTube-VIS layout, so real data in that shape loads too.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .maskops import rle_decode, rle_encode
from .structures import VideoAnnotation, VideoClip

DEFAULT_CATEGORIES = [
    {"id": 1, "name": "disk"},
    {"id": 2, "name": "rectangle"},
    {"id": 3, "name": "triangle"},
]
KIND_TO_CATEGORY = {"disk": 1, "rectangle": 2, "triangle": 3}

_RLE_SCHEMA = {
    "type": ["object", "null"],
    "properties": {
        "size": {"type": "array", "items": {"type": "integer"},
                 "minItems": 2, "maxItems": 2},
        "counts": {"type": "array", "items": {"type": "integer", "minimum": 0}},
    },
    "required": ["size", "counts"],
}

ANNOTATION_SCHEMA = {
    "type": "object",
    "required": ["videos", "annotations", "categories"],
    "properties": {
        "videos": {"type": "array", "items": {
            "type": "object",
            "required": ["id", "width", "height", "length", "file_names"],
            "properties": {
                "id": {"type": "integer"},
                "width": {"type": "integer", "minimum": 1},
                "height": {"type": "integer", "minimum": 1},
                "length": {"type": "integer", "minimum": 1},
                "file_names": {"type": "array", "items": {"type": "string"}},
            },
        }},
        "annotations": {"type": "array", "items": {
            "type": "object",
            "required": ["id", "video_id", "category_id", "segmentations", "bboxes"],
            "properties": {
                "id": {"type": "integer"},
                "video_id": {"type": "integer"},
                "category_id": {"type": "integer"},
                "segmentations": {"type": "array", "items": _RLE_SCHEMA},
                "bboxes": {"type": "array", "items": {
                    "type": ["array", "null"],
                    "items": {"type": "number"}, "minItems": 4, "maxItems": 4,
                }},
            },
        }},
        "categories": {"type": "array", "items": {
            "type": "object",
            "required": ["id", "name"],
            "properties": {"id": {"type": "integer"}, "name": {"type": "string"}},
        }},
    },
}


@dataclass
class ObjectSpec:
    """One moving shape: kind, geometry, motion, and optional disappearance."""

    kind: str                      # disk | rectangle | triangle
    size: float                    # characteristic half-extent in pixels
    color: tuple[int, int, int]
    position: tuple[float, float]  # initial center (x, y) in pixels
    velocity: tuple[float, float] = (0.0, 0.0)  # pixels per frame
    aspect: float = 1.0            # rectangles: half-height = size * aspect
    exit_frame: int | None = None  # first frame index the object is gone
    hidden_frames: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in KIND_TO_CATEGORY:
            raise ValueError(f"unknown shape kind {self.kind!r}")

    @property
    def category_id(self) -> int:
        return KIND_TO_CATEGORY[self.kind]


@dataclass
class SceneSpec:
    """Deterministic recipe for one synthetic video."""

    width: int = 96
    height: int = 96
    num_frames: int = 5
    objects: list[ObjectSpec] = field(default_factory=list)
    background: tuple[int, int, int] = (24, 24, 24)
    noise_std: float = 4.0
    seed: int = 0


def _shape_region(obj: ObjectSpec, center: tuple[float, float],
                  width: int, height: int) -> np.ndarray:
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    dx = gx - center[0]
    dy = gy - center[1]
    if obj.kind == "disk":
        return dx * dx + dy * dy <= obj.size * obj.size
    if obj.kind == "rectangle":
        return (np.abs(dx) <= obj.size) & (np.abs(dy) <= obj.size * obj.aspect)
    # upward-pointing triangle with circumradius size
    r = obj.size
    verts = np.array([(0.0, -r), (-0.866 * r, 0.5 * r), (0.866 * r, 0.5 * r)])
    inside = np.ones_like(dx, dtype=bool)
    for i in range(3):
        ax, ay = verts[i]
        bx, by = verts[(i + 1) % 3]
        cross = (bx - ax) * (dy - ay) - (by - ay) * (dx - ax)
        inside &= cross >= 0
    return inside


def mask_to_box_pixels(mask: np.ndarray) -> list[float] | None:
    """Tight [x, y, w, h] pixel box of a binary mask, or None if empty."""
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        return None
    return [float(xs.min()), float(ys.min()),
            float(xs.max() - xs.min() + 1), float(ys.max() - ys.min() + 1)]


def box_pixels_to_normalized(box: list[float], width: int, height: int) -> list[float]:
    """[x, y, w, h] pixels -> normalized [cx, cy, w, h]."""
    x, y, w, h = box
    return [(x + w / 2) / width, (y + h / 2) / height, w / width, h / height]


def _annotation_from_arrays(labels: list[int], masks: np.ndarray,
                            present: np.ndarray) -> VideoAnnotation:
    """(T, n, H, W) masks + (T, n) present -> in-memory annotation (never-present
    instances are dropped)."""
    T, n, H, W = masks.shape
    keep = [i for i in range(n) if present[:, i].any()]
    boxes = np.zeros((T, len(keep), 4), dtype=np.float64)
    for j, i in enumerate(keep):
        for t in range(T):
            if present[t, i]:
                box = mask_to_box_pixels(masks[t, i])
                boxes[t, j] = box_pixels_to_normalized(box, W, H)
    return VideoAnnotation(
        labels=torch.as_tensor([labels[i] for i in keep], dtype=torch.long),
        boxes=torch.as_tensor(boxes, dtype=torch.float32),
        masks=torch.as_tensor(masks[:, keep]),
        present=torch.as_tensor(present[:, keep]),
    )


def generate_video(spec: SceneSpec) -> tuple[VideoClip, VideoAnnotation]:
    """Render a scene spec into frames plus exact per-frame annotations.

    Later objects in the list occlude earlier ones; an object that is fully
    occluded, hidden by schedule, or entirely off-canvas is marked absent on
    that frame. Instances absent everywhere are dropped from the annotation.
    """
    rng = np.random.default_rng(spec.seed)
    T, H, W = spec.num_frames, spec.height, spec.width
    n = len(spec.objects)
    frames = np.zeros((T, H, W, 3), dtype=np.uint8)
    masks = np.zeros((T, n, H, W), dtype=bool)
    present = np.zeros((T, n), dtype=bool)

    for t in range(T):
        canvas = np.empty((H, W, 3), dtype=np.float64)
        canvas[:] = spec.background
        regions = []
        for obj in spec.objects:
            gone = (obj.exit_frame is not None and t >= obj.exit_frame) \
                or t in obj.hidden_frames
            if gone:
                regions.append(np.zeros((H, W), dtype=bool))
                continue
            center = (obj.position[0] + obj.velocity[0] * t,
                      obj.position[1] + obj.velocity[1] * t)
            regions.append(_shape_region(obj, center, W, H))
        for i, obj in enumerate(spec.objects):
            visible = regions[i].copy()
            for later in regions[i + 1:]:
                visible &= ~later
            canvas[visible] = obj.color
            masks[t, i] = visible
            present[t, i] = visible.any()
        if spec.noise_std > 0:
            canvas = canvas + rng.normal(0.0, spec.noise_std, size=canvas.shape)
        frames[t] = np.clip(canvas, 0, 255).round().astype(np.uint8)

    labels = [obj.category_id - 1 for obj in spec.objects]
    return VideoClip(frames=frames), _annotation_from_arrays(labels, masks, present)


def pseudo_video(image: np.ndarray, masks: np.ndarray, labels: list[int],
                 num_frames: int, max_rotation_deg: float = 10.0,
                 rng: np.random.Generator | None = None
                 ) -> tuple[VideoClip, VideoAnnotation]:
    """Synthesize a clip from a still by small random rotations.

    Frame 1 is the original image; subsequent frames rotate image and masks
    consistently by angles drawn from [-max_rotation_deg, +max_rotation_deg].
    Boxes are recomputed as tight boxes of the rotated masks.
    """
    if num_frames < 1:
        raise ValueError("num_frames must be >= 1")
    rng = rng or np.random.default_rng(0)
    n, H, W = masks.shape
    frames = np.zeros((num_frames, H, W, 3), dtype=np.uint8)
    out_masks = np.zeros((num_frames, n, H, W), dtype=bool)
    frames[0] = image
    out_masks[0] = masks
    for t in range(1, num_frames):
        angle = float(rng.uniform(-max_rotation_deg, max_rotation_deg))
        frames[t] = np.clip(
            ndimage.rotate(image.astype(np.float64), angle, reshape=False,
                           order=1, mode="constant"),
            0, 255).round().astype(np.uint8)
        for i in range(n):
            out_masks[t, i] = ndimage.rotate(
                masks[i].astype(np.uint8), angle, reshape=False, order=0,
                mode="constant").astype(bool)
    present = out_masks.any(axis=(2, 3))
    return (VideoClip(frames=frames),
            _annotation_from_arrays(list(labels), out_masks, present))


def validate_annotations(dataset: dict) -> None:
    """Schema-check a dataset dict; raises ValueError with the failing path."""
    try:
        jsonschema.validate(dataset, ANNOTATION_SCHEMA)
    except jsonschema.ValidationError as e:
        raise ValueError(f"annotation schema violation at {e.json_path}: {e.message}") from e
    video_lengths = {v["id"]: v["length"] for v in dataset["videos"]}
    for ann in dataset["annotations"]:
        if ann["video_id"] not in video_lengths:
            raise ValueError(
                f"annotation {ann['id']}: unknown video_id {ann['video_id']}")
        length = video_lengths[ann["video_id"]]
        if len(ann["segmentations"]) != length or len(ann["bboxes"]) != length:
            raise ValueError(
                f"annotation {ann['id']}: per-frame lists must have length {length}")


def save_annotations(dataset: dict, path: str | Path) -> None:
    validate_annotations(dataset)
    Path(path).write_text(json.dumps(dataset))


def load_annotations(path: str | Path) -> dict:
    dataset = json.loads(Path(path).read_text())
    validate_annotations(dataset)
    return dataset


def annotation_records(video_id: int, annotation: VideoAnnotation,
                       categories=DEFAULT_CATEGORIES, first_id: int = 1) -> list[dict]:
    """In-memory annotation -> file records (RLE masks, pixel top-left boxes)."""
    T = annotation.num_frames
    H, W = annotation.masks.shape[-2:]
    records = []
    for i in range(annotation.num_instances):
        segs, bboxes = [], []
        for t in range(T):
            if bool(annotation.present[t, i]):
                mask = annotation.masks[t, i].cpu().numpy()
                segs.append(rle_encode(mask))
                bboxes.append(mask_to_box_pixels(mask))
            else:
                segs.append(None)
                bboxes.append(None)
        records.append({
            "id": first_id + i,
            "video_id": video_id,
            "category_id": categories[int(annotation.labels[i])]["id"],
            "segmentations": segs,
            "bboxes": bboxes,
        })
    return records


def dataset_annotation(dataset: dict, video_id: int) -> VideoAnnotation:
    """Build the in-memory annotation for one video from file records.

    Pixel [x, y, w, h] boxes are converted to normalized center form; null
    segmentations mark absent frames.
    """
    video = next(v for v in dataset["videos"] if v["id"] == video_id)
    cat_index = {c["id"]: i for i, c in enumerate(dataset["categories"])}
    T, H, W = video["length"], video["height"], video["width"]
    anns = [a for a in dataset["annotations"] if a["video_id"] == video_id]

    labels = []
    boxes = np.zeros((T, len(anns), 4), dtype=np.float64)
    masks = np.zeros((T, len(anns), H, W), dtype=bool)
    present = np.zeros((T, len(anns)), dtype=bool)
    for i, ann in enumerate(anns):
        labels.append(cat_index[ann["category_id"]])
        for t in range(T):
            seg = ann["segmentations"][t]
            if seg is None:
                continue
            masks[t, i] = rle_decode(seg)
            box = ann["bboxes"][t]
            if box is None:
                box = mask_to_box_pixels(masks[t, i])
            boxes[t, i] = box_pixels_to_normalized(box, W, H)
            present[t, i] = True
    return VideoAnnotation(
        labels=torch.as_tensor(labels, dtype=torch.long),
        boxes=torch.as_tensor(boxes, dtype=torch.float32),
        masks=torch.as_tensor(masks),
        present=torch.as_tensor(present),
    )


def write_video_frames(clip: VideoClip, frames_dir: str | Path,
                       stem: str) -> list[str]:
    """Save frames as PNGs; returns the relative file names."""
    frames_dir = Path(frames_dir)
    frames_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for t in range(clip.num_frames):
        name = f"{stem}/{t:05d}.png"
        path = frames_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(clip.frames[t]).save(path)
        names.append(name)
    return names


def load_video_clip(dataset: dict, video_id: int,
                    frames_dir: str | Path) -> VideoClip:
    video = next(v for v in dataset["videos"] if v["id"] == video_id)
    frames = np.stack([
        np.asarray(Image.open(Path(frames_dir) / name).convert("RGB"))
        for name in video["file_names"]])
    return VideoClip(frames=frames, video_id=video_id,
                     file_names=list(video["file_names"]))


def random_scene_spec(rng: np.random.Generator, width: int = 96, height: int = 96,
                      num_frames: int = 5, num_objects: tuple[int, int] = (2, 3),
                      size_range: tuple[float, float] = (10.0, 18.0),
                      speed_range: tuple[float, float] = (1.0, 4.0),
                      exit_probability: float = 0.15) -> SceneSpec:
    """Sample a scene with objects that start on-canvas and drift linearly."""
    kinds = list(KIND_TO_CATEGORY)
    count = int(rng.integers(num_objects[0], num_objects[1] + 1))
    objects = []
    for _ in range(count):
        size = float(rng.uniform(*size_range))
        margin = size + 2
        pos = (float(rng.uniform(margin, width - margin)),
               float(rng.uniform(margin, height - margin)))
        angle = float(rng.uniform(0, 2 * np.pi))
        speed = float(rng.uniform(*speed_range))
        exit_frame = None
        if rng.uniform() < exit_probability and num_frames > 2:
            exit_frame = int(rng.integers(2, num_frames))
        objects.append(ObjectSpec(
            kind=kinds[int(rng.integers(len(kinds)))],
            size=size,
            color=tuple(int(c) for c in rng.integers(90, 256, size=3)),
            position=pos,
            velocity=(speed * np.cos(angle), speed * np.sin(angle)),
            aspect=float(rng.uniform(0.6, 1.0)),
            exit_frame=exit_frame,
        ))
    return SceneSpec(width=width, height=height, num_frames=num_frames,
                     objects=objects, seed=int(rng.integers(2 ** 31)))


def build_synthetic_dataset(out_dir: str | Path, num_videos: int, seed: int = 0,
                            width: int = 96, height: int = 96, num_frames: int = 5,
                            num_objects: tuple[int, int] = (2, 3),
                            size_range: tuple[float, float] = (10.0, 18.0),
                            speed_range: tuple[float, float] = (1.0, 4.0),
                            exit_probability: float = 0.15) -> tuple[Path, Path]:
    """Generate videos + annotations on disk; returns (annotations_path, frames_dir)."""
    out_dir = Path(out_dir)
    frames_dir = out_dir / "frames"
    rng = np.random.default_rng(seed)
    videos, annotations = [], []
    next_ann_id = 1
    for v in range(1, num_videos + 1):
        spec = random_scene_spec(rng, width=width, height=height,
                                 num_frames=num_frames, num_objects=num_objects,
                                 size_range=size_range, speed_range=speed_range,
                                 exit_probability=exit_probability)
        clip, annotation = generate_video(spec)
        file_names = write_video_frames(clip, frames_dir, f"video_{v:04d}")
        videos.append({"id": v, "width": width, "height": height,
                       "length": num_frames, "file_names": file_names})
        records = annotation_records(v, annotation, first_id=next_ann_id)
        next_ann_id += len(records)
        annotations.extend(records)
    dataset = {"videos": videos, "annotations": annotations,
               "categories": DEFAULT_CATEGORIES}
    ann_path = out_dir / "annotations.json"
    save_annotations(dataset, ann_path)
    return ann_path, frames_dir
