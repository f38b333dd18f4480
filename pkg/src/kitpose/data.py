"""Instances, synthetic skeleton generation, COCO-format IO, crops, augmentation.

The synthetic generator poses a quadruped-like articulated tree (top-down
view) and renders it as anti-aliased capsules: the head is a distinct
disc, the torso/tail have their own colors, and each left/right leg pair
shares one color up to a small brightness offset.  Local appearance alone
therefore cannot tell a left limb from its right twin; resolving the pair
requires the body orientation, which is exactly the structural signal the
token interactions are meant to supply.  Occluded keypoints are covered by
a background-colored patch and marked visibility 1.

Every instance is deterministic in (seed, index); augmentation draws from
substreams keyed by (seed, epoch, index) so parallel data preparation can
never change results.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "SkeletonSpec",
    "Instance",
    "CropRecord",
    "AugmentConfig",
    "quadruped_17",
    "generate_synthetic",
    "write_manifest",
    "load_manifest",
    "load_coco_keypoints",
    "export_coco",
    "crop_resize",
    "augment",
    "warp_affine",
    "apply_affine",
    "invert_affine",
    "instance_rng",
]


@dataclass
class SkeletonSpec:
    """Tree-structured skeleton with flip pairs and rendering proportions.

    `parent[0]` is -1 (root); `limb_length_ranges[i]` gives the (min, max)
    length in pixels (at the 128 px reference canvas) of the edge from
    parent[i] to i.  `upper_body`/`lower_body` are the half-body subsets.
    """

    name: str
    n_keypoints: int
    parent: list[int]
    flip_pairs: list[tuple[int, int]]
    limb_length_ranges: list[tuple[float, float]]
    upper_body: list[int]
    lower_body: list[int]
    keypoint_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.parent) != self.n_keypoints:
            raise ValueError("parent list length must equal n_keypoints")
        if self.parent[0] != -1:
            raise ValueError("keypoint 0 must be the root (parent -1)")
        for i, p in enumerate(self.parent[1:], start=1):
            if not 0 <= p < self.n_keypoints or p == i:
                raise ValueError(f"invalid parent {p} for keypoint {i}")
        seen = set()
        for a, b in self.flip_pairs:
            if a == b or (b, a) in seen:
                raise ValueError("flip_pairs must be a proper involution")
            seen.add((a, b))

    def flip_index(self) -> np.ndarray:
        idx = np.arange(self.n_keypoints)
        for a, b in self.flip_pairs:
            idx[a], idx[b] = b, a
        return idx


@dataclass
class Instance:
    """One cropped-or-raw sample: image grid plus keypoint annotations."""

    image: np.ndarray                # [3, H, W] float32 in [0, 1]
    keypoints: np.ndarray            # [N, 2] (x, y) pixels
    visibility: np.ndarray           # [N] in {0, 1, 2}
    bbox: tuple[float, float, float, float]
    species_id: int = 0
    instance_id: str = ""

    def __post_init__(self):
        h, w = self.image.shape[1:]
        if self.bbox[2] <= 0 or self.bbox[3] <= 0:
            raise ValueError("bbox must have positive area")
        for i, (x, y) in enumerate(self.keypoints):
            if self.visibility[i] == 2 and not (0 <= x < w and 0 <= y < h):
                raise ValueError(f"visible keypoint {i} outside the image")


# --------------------------------------------------------------------------
# Default quadruped skeleton (17 keypoints)
# --------------------------------------------------------------------------

_QUADRUPED_NAMES = [
    "root", "spine", "neck", "nose", "tail",
    "fl_shoulder", "fl_knee", "fl_paw",
    "fr_shoulder", "fr_knee", "fr_paw",
    "bl_hip", "bl_knee", "bl_paw",
    "br_hip", "br_knee", "br_paw",
]


def quadruped_17() -> SkeletonSpec:
    parent = [-1, 0, 1, 2, 0,
              2, 5, 6,
              2, 8, 9,
              0, 11, 12,
              0, 14, 15]
    ranges = [(0.0, 0.0), (14.0, 22.0), (12.0, 18.0), (9.0, 14.0), (12.0, 20.0),
              (7.0, 10.0), (9.0, 14.0), (9.0, 14.0),
              (7.0, 10.0), (9.0, 14.0), (9.0, 14.0),
              (7.0, 10.0), (9.0, 14.0), (9.0, 14.0),
              (7.0, 10.0), (9.0, 14.0), (9.0, 14.0)]
    return SkeletonSpec(
        name="quadruped_17",
        n_keypoints=17,
        parent=parent,
        flip_pairs=[(5, 8), (6, 9), (7, 10), (11, 14), (12, 15), (13, 16)],
        limb_length_ranges=ranges,
        upper_body=[0, 1, 2, 3, 5, 6, 7, 8, 9, 10],
        lower_body=[0, 1, 4, 11, 12, 13, 14, 15, 16],
        keypoint_names=list(_QUADRUPED_NAMES),
    )


_SKELETONS = {"quadruped_17": quadruped_17}


# --------------------------------------------------------------------------
# Rendering primitives
# --------------------------------------------------------------------------

def _draw_capsule(img: np.ndarray, p0, p1, radius: float, color) -> None:
    """Anti-aliased thick segment, alpha-composited in place."""
    h, w = img.shape[1:]
    x0 = max(int(np.floor(min(p0[0], p1[0]) - radius - 1)), 0)
    x1 = min(int(np.ceil(max(p0[0], p1[0]) + radius + 2)), w)
    y0 = max(int(np.floor(min(p0[1], p1[1]) - radius - 1)), 0)
    y1 = min(int(np.ceil(max(p0[1], p1[1]) + radius + 2)), h)
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    d = np.stack([xs - p0[0], ys - p0[1]], axis=-1).astype(np.float64)
    seg = np.array([p1[0] - p0[0], p1[1] - p0[1]], dtype=np.float64)
    seg_len2 = float(seg @ seg)
    if seg_len2 == 0:
        t = np.zeros(d.shape[:-1])
    else:
        t = np.clip((d @ seg) / seg_len2, 0.0, 1.0)
    closest = d - t[..., None] * seg
    dist = np.sqrt((closest ** 2).sum(axis=-1))
    alpha = np.clip(radius + 0.5 - dist, 0.0, 1.0)
    patch = img[:, y0:y1, x0:x1]
    patch[:] = patch * (1 - alpha) + np.asarray(color)[:, None, None] * alpha


def _draw_disc(img: np.ndarray, center, radius: float, color) -> None:
    _draw_capsule(img, center, center, radius, color)


def _background(rng: np.random.Generator, size: int, noise: float) -> np.ndarray:
    base = rng.uniform(0.25, 0.6, size=3)
    tilt = rng.uniform(-0.1, 0.1, size=(3, 2))
    ys, xs = np.mgrid[0:size, 0:size] / size
    img = (base[:, None, None]
           + tilt[:, 0, None, None] * xs + tilt[:, 1, None, None] * ys)
    img += rng.normal(0.0, noise, size=(3, size, size))
    return np.clip(img, 0.0, 1.0)


# base colors per part group; left/right leg pairs share one color
_PART_COLORS = {
    "torso": (0.55, 0.40, 0.25),
    "head": (0.85, 0.75, 0.30),
    "tail": (0.30, 0.55, 0.70),
    "front_leg": (0.70, 0.30, 0.35),
    "back_leg": (0.35, 0.65, 0.35),
}

# body proportion presets; the id is recorded as species_id
_SPECIES = [
    {"spine": 1.0, "neck": 1.0, "leg": 1.0},   # balanced
    {"spine": 1.3, "neck": 0.7, "leg": 0.9},   # long body
    {"spine": 0.8, "neck": 1.4, "leg": 1.1},   # long neck
]


def instance_rng(seed: int, index: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index, *extra]))


def _unit(angle: float) -> np.ndarray:
    return np.array([np.cos(angle), np.sin(angle)])


def _pose_skeleton(spec: SkeletonSpec, rng: np.random.Generator,
                   species: dict) -> np.ndarray:
    """Joint positions in reference-canvas pixels, root at the origin."""
    theta = rng.uniform(0.0, 2.0 * np.pi)
    lengths = np.array([rng.uniform(lo, hi) for lo, hi in spec.limb_length_ranges])
    lengths[1] *= species["spine"]
    lengths[2] *= species["neck"]
    lengths[3] *= species["neck"]
    for i in (6, 7, 9, 10, 12, 13, 15, 16):
        lengths[i] *= species["leg"]

    pts = np.zeros((spec.n_keypoints, 2))
    bend = rng.uniform(-0.35, 0.35, size=4)
    pts[1] = pts[0] + lengths[1] * _unit(theta)
    pts[2] = pts[1] + lengths[2] * _unit(theta + bend[0])
    pts[3] = pts[2] + lengths[3] * _unit(theta + bend[0] + bend[1])
    pts[4] = pts[0] - lengths[4] * _unit(theta + bend[2])

    # legs: shoulders hang off the neck joint, hips off the root; left is
    # +90 degrees from the heading, right is -90
    for side, sign in (("l", +1.0), ("r", -1.0)):
        for anchor, sh_idx in ((2, 5 if side == "l" else 8),
                               (0, 11 if side == "l" else 14)):
            spread = rng.uniform(-0.5, 0.5)
            knee_bend = rng.uniform(-0.6, 0.6)
            out = theta + sign * (np.pi / 2)
            pts[sh_idx] = pts[anchor] + lengths[sh_idx] * _unit(out)
            pts[sh_idx + 1] = pts[sh_idx] + lengths[sh_idx + 1] * _unit(out + spread)
            pts[sh_idx + 2] = (pts[sh_idx + 1]
                               + lengths[sh_idx + 2] * _unit(out + spread + knee_bend))
    return pts


def generate_synthetic(spec: SkeletonSpec, seed: int, count: int,
                       image_size: int = 128, occlusion_rate: float = 0.10,
                       lr_delta: float = 0.12, noise: float = 0.04) -> list[Instance]:
    """Render `count` deterministic skeleton instances.

    `lr_delta` is the left/right brightness offset of paired limbs (the
    local disambiguation cue); `occlusion_rate` is the per-keypoint chance
    of being covered and downgraded to visibility 1.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    scale_ref = image_size / 128.0
    out = []
    for index in range(count):
        rng = instance_rng(seed, index)
        species_id = int(rng.integers(0, len(_SPECIES)))
        pts = _pose_skeleton(spec, rng, _SPECIES[species_id]) * scale_ref

        # fit the pose into the canvas with a safety margin
        margin = 6.0 * scale_ref
        body_scale = rng.uniform(0.75, 1.05)
        pts = pts * body_scale
        lo = pts.min(axis=0)
        hi = pts.max(axis=0)
        span = hi - lo
        free = image_size - 2 * margin - span
        shift = margin - lo + rng.uniform(0, 1, size=2) * np.maximum(free, 0.0)
        pts = pts + shift

        img = _background(rng, image_size, noise)
        jitter = rng.uniform(-0.08, 0.08, size=3)

        def color(part: str, side: str = "") -> np.ndarray:
            c = np.asarray(_PART_COLORS[part]) + jitter
            if side == "l":
                c = c * (1.0 - lr_delta)
            elif side == "r":
                c = c * (1.0 + lr_delta)
            return np.clip(c, 0.0, 1.0)

        thick = 4.5 * scale_ref * body_scale
        leg_t = 2.6 * scale_ref * body_scale
        _draw_capsule(img, pts[0], pts[4], leg_t * 0.8, color("tail"))
        _draw_capsule(img, pts[0], pts[1], thick, color("torso"))
        _draw_capsule(img, pts[1], pts[2], thick * 0.85, color("torso"))
        for side, (sh, hip) in (("l", (5, 11)), ("r", (8, 14))):
            for a in (sh, hip):
                part = "front_leg" if a in (5, 8) else "back_leg"
                _draw_capsule(img, pts[a], pts[a + 1], leg_t, color(part, side))
                _draw_capsule(img, pts[a + 1], pts[a + 2], leg_t * 0.9, color(part, side))
        _draw_capsule(img, pts[2], pts[3], thick * 0.6, color("head"))
        _draw_disc(img, pts[3], 5.0 * scale_ref * body_scale, color("head"))

        visibility = np.full(spec.n_keypoints, 2, dtype=np.int64)
        occluded = rng.uniform(size=spec.n_keypoints) < occlusion_rate
        for i in np.flatnonzero(occluded):
            visibility[i] = 1
            patch_color = np.clip(rng.uniform(0.25, 0.6, size=3), 0, 1)
            _draw_disc(img, pts[i], 3.5 * scale_ref, patch_color)

        pad = 4.0 * scale_ref
        x0, y0 = np.maximum(pts.min(axis=0) - pad, 0.0)
        x1, y1 = np.minimum(pts.max(axis=0) + pad, image_size - 1.0)
        out.append(Instance(
            image=img.astype(np.float32),
            keypoints=pts.astype(np.float64),
            visibility=visibility,
            bbox=(float(x0), float(y0), float(x1 - x0), float(y1 - y0)),
            species_id=species_id,
            instance_id=f"syn-{seed}-{index}",
        ))
    return out


# --------------------------------------------------------------------------
# Manifests and COCO-format IO
# --------------------------------------------------------------------------

def write_manifest(path, spec: SkeletonSpec, seed: int, count: int,
                   **knobs) -> None:
    payload = {"seed": seed, "spec": spec.name, "count": count, **knobs}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def load_manifest(path) -> list[Instance]:
    payload = json.loads(Path(path).read_text())
    spec = _SKELETONS[payload.pop("spec")]()
    seed = payload.pop("seed")
    count = payload.pop("count")
    return generate_synthetic(spec, seed, count, **payload)


def load_coco_keypoints(annotation_file, image_root) -> list[Instance]:
    """One Instance per annotation from a COCO-keypoint JSON file.

    Annotations without a single labeled keypoint are skipped; the skip
    count is reported via a warning.
    """
    payload = json.loads(Path(annotation_file).read_text())
    images = {img["id"]: img for img in payload.get("images", [])}
    annotations = payload.get("annotations", [])
    if not annotations:
        warnings.warn("annotation file contains no annotations")
    root = Path(image_root)
    out = []
    skipped = 0
    for ann in annotations:
        kpts = np.asarray(ann["keypoints"], dtype=np.float64)
        if kpts.size % 3:
            raise ValueError(f"annotation {ann.get('id')}: keypoint array length "
                             f"{kpts.size} is not a multiple of 3")
        kpts = kpts.reshape(-1, 3)
        if not np.any(kpts[:, 2] > 0):
            skipped += 1
            continue
        meta = images[ann["image_id"]]
        img_path = root / meta["file_name"]
        if not img_path.exists():
            raise FileNotFoundError(f"image file missing: {img_path}")
        with Image.open(img_path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        out.append(Instance(
            image=np.ascontiguousarray(arr.transpose(2, 0, 1)),
            keypoints=kpts[:, :2].copy(),
            visibility=kpts[:, 2].astype(np.int64),
            bbox=tuple(float(v) for v in ann["bbox"]),
            species_id=int(ann.get("category_id", 0)),
            instance_id=str(ann.get("id", len(out))),
        ))
    if skipped:
        warnings.warn(f"skipped {skipped} annotations with zero labeled keypoints")
    return out


def export_coco(instances: list[Instance], annotation_file, image_root,
                spec: SkeletonSpec | None = None) -> None:
    """Write instances as COCO-keypoint JSON plus one PNG per instance."""
    root = Path(image_root)
    root.mkdir(parents=True, exist_ok=True)
    images = []
    annotations = []
    for i, inst in enumerate(instances):
        file_name = f"{inst.instance_id or i}.png"
        arr = (np.clip(inst.image, 0, 1) * 255.0).round().astype(np.uint8)
        Image.fromarray(arr.transpose(1, 2, 0)).save(root / file_name)
        h, w = inst.image.shape[1:]
        images.append({"id": i, "file_name": file_name, "height": h, "width": w})
        triplets = np.concatenate(
            [inst.keypoints, inst.visibility[:, None].astype(np.float64)], axis=1)
        annotations.append({
            "id": i,
            "image_id": i,
            "category_id": inst.species_id,
            "keypoints": [float(v) for v in triplets.reshape(-1)],
            "bbox": [float(v) for v in inst.bbox],
            "num_keypoints": int((inst.visibility > 0).sum()),
            "area": float(inst.bbox[2] * inst.bbox[3]),
        })
    categories = [{"id": 0, "name": "synthetic",
                   "keypoints": spec.keypoint_names if spec else [],
                   "skeleton": []}]
    payload = {"images": images, "annotations": annotations,
               "categories": categories}
    Path(annotation_file).write_text(json.dumps(payload))


# --------------------------------------------------------------------------
# Affine machinery
# --------------------------------------------------------------------------

def apply_affine(mat: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    return pts @ mat[:, :2].T + mat[:, 2]


def invert_affine(mat: np.ndarray) -> np.ndarray:
    a = mat[:, :2]
    ainv = np.linalg.inv(a)
    return np.concatenate([ainv, -(ainv @ mat[:, 2])[:, None]], axis=1)


def compose_affine(outer: np.ndarray, inner: np.ndarray) -> np.ndarray:
    return np.concatenate([outer[:, :2] @ inner[:, :2],
                           (outer[:, :2] @ inner[:, 2] + outer[:, 2])[:, None]],
                          axis=1)


def warp_affine(image: np.ndarray, mat: np.ndarray,
                out_size: tuple[int, int]) -> np.ndarray:
    """Bilinear warp of [3, H, W] under x' = M x, zero outside the source."""
    oh, ow = out_size
    minv = invert_affine(mat)
    ys, xs = np.mgrid[0:oh, 0:ow].astype(np.float64)
    src = np.stack([xs, ys], axis=-1) @ minv[:, :2].T + minv[:, 2]
    sx, sy = src[..., 0], src[..., 1]
    h, w = image.shape[1:]
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    out = np.zeros((image.shape[0], oh, ow), dtype=image.dtype)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            valid = (0 <= xi) & (xi < w) & (0 <= yi) & (yi < h)
            wgt = ((fx if dx else 1 - fx) * (fy if dy else 1 - fy)) * valid
            xi_c = np.clip(xi, 0, w - 1)
            yi_c = np.clip(yi, 0, h - 1)
            out += image[:, yi_c, xi_c] * wgt[None]
    return out


@dataclass
class CropRecord:
    """Cropped instance plus the affine pair for mapping back."""

    instance: Instance
    affine: np.ndarray       # original frame -> crop frame
    inverse: np.ndarray      # crop frame -> original frame


def crop_resize(inst: Instance, out_size: tuple[int, int],
                padding: float = 1.0, rotation: float = 0.0,
                scale: float = 1.0) -> CropRecord:
    """Bounding-box crop under the center-scale convention.

    The padded (and scale-augmented) box is expanded to the output aspect
    ratio, optionally rotated about its center, and resampled to out_size.
    Keypoints that land outside the crop are downgraded to visibility 0.
    """
    oh, ow = out_size
    x, y, w, h = inst.bbox
    if w <= 0 or h <= 0:
        raise ValueError("degenerate bbox")
    cx, cy = x + w / 2.0, y + h / 2.0
    region_w = w * padding * scale
    region_h = h * padding * scale
    # expand the short side to the output aspect
    if region_w / region_h > ow / oh:
        region_h = region_w * oh / ow
    else:
        region_w = region_h * ow / oh

    rad = np.deg2rad(rotation)
    c, s = np.cos(rad), np.sin(rad)
    rot = np.array([[c, -s, cx - c * cx + s * cy],
                    [s, c, cy - s * cx - c * cy]])
    k = ow / region_w
    out = np.array([[k, 0.0, ow / 2.0 - k * cx],
                    [0.0, k, oh / 2.0 - k * cy]])
    mat = compose_affine(out, rot)

    warped = warp_affine(inst.image, mat, out_size)
    kpts = apply_affine(mat, inst.keypoints)
    vis = inst.visibility.copy()
    outside = (kpts[:, 0] < 0) | (kpts[:, 0] >= ow) | (kpts[:, 1] < 0) | (kpts[:, 1] >= oh)
    vis[outside] = 0
    cropped = Instance(
        image=warped.astype(np.float32),
        keypoints=kpts,
        visibility=vis,
        bbox=(0.0, 0.0, float(ow), float(oh)),
        species_id=inst.species_id,
        instance_id=inst.instance_id,
    )
    return CropRecord(instance=cropped, affine=mat, inverse=invert_affine(mat))


# --------------------------------------------------------------------------
# Augmentation
# --------------------------------------------------------------------------

@dataclass
class AugmentConfig:
    rotate_prob: float = 1.0
    rotate_range: tuple[float, float] = (-40.0, 40.0)
    scale_prob: float = 1.0
    scale_range: tuple[float, float] = (0.5, 1.5)
    hflip_prob: float = 0.5
    half_body_prob: float = 0.0
    half_body_min_visible: int = 8
    cutmix_prob: float = 0.0
    cutmix_area: tuple[float, float] = (0.1, 0.4)

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(rotate_prob=0.0, scale_prob=0.0, hflip_prob=0.0,
                   half_body_prob=0.0, cutmix_prob=0.0)


def hflip_instance(inst: Instance, spec: SkeletonSpec) -> Instance:
    w = inst.image.shape[2]
    idx = spec.flip_index()
    kpts = inst.keypoints[idx].copy()
    kpts[:, 0] = (w - 1) - kpts[:, 0]
    x, y, bw, bh = inst.bbox
    return replace(
        inst,
        image=np.ascontiguousarray(inst.image[:, :, ::-1]),
        keypoints=kpts,
        visibility=inst.visibility[idx].copy(),
        bbox=((w - 1) - x - bw, y, bw, bh),
    )


def _half_body_bbox(inst: Instance, spec: SkeletonSpec,
                    rng: np.random.Generator) -> tuple | None:
    subsets = [spec.upper_body, spec.lower_body]
    pick = subsets[int(rng.integers(0, 2))]
    sel = [i for i in pick if inst.visibility[i] > 0]
    if len(sel) < 2:
        return None
    pts = inst.keypoints[sel]
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    pad = 0.15 * max(x1 - x0, y1 - y0) + 2.0
    return (x0 - pad, y0 - pad, (x1 - x0) + 2 * pad, (y1 - y0) + 2 * pad)


def _cutmix(inst: Instance, mate: Instance, rng: np.random.Generator,
            area_range: tuple[float, float]) -> Instance:
    img = inst.image.copy()
    h, w = img.shape[1:]
    ratio = rng.uniform(*area_range)
    target = ratio * h * w
    aspect = rng.uniform(0.5, 2.0)
    rh = int(np.clip(np.sqrt(target / aspect), 2, h - 1))
    rw = int(np.clip(np.sqrt(target * aspect), 2, w - 1))
    y0 = int(rng.integers(0, h - rh + 1))
    x0 = int(rng.integers(0, w - rw + 1))
    mh, mw = mate.image.shape[1:]
    rh2, rw2 = min(rh, mh), min(rw, mw)
    my = int(rng.integers(0, mh - rh2 + 1))
    mx = int(rng.integers(0, mw - rw2 + 1))
    img[:, y0:y0 + rh2, x0:x0 + rw2] = mate.image[:, my:my + rh2, mx:mx + rw2]
    # labels are deliberately untouched: corruption only affects pixels
    return replace(inst, image=img)


def augment(inst: Instance, cfg: AugmentConfig, rng: np.random.Generator,
            spec: SkeletonSpec, mate: Instance | None = None
            ) -> tuple[Instance, float, float]:
    """Apply the enabled augmentations; returns (instance, rotation, scale).

    Rotation and scale are not applied to pixels here; they are returned so
    crop_resize can fold them into its affine (one resampling pass total).
    With all probabilities zero the instance is returned unchanged.
    """
    out = inst
    if cfg.hflip_prob > 0 and rng.uniform() < cfg.hflip_prob:
        out = hflip_instance(out, spec)
    if cfg.half_body_prob > 0 and rng.uniform() < cfg.half_body_prob:
        if int((out.visibility > 0).sum()) >= cfg.half_body_min_visible:
            box = _half_body_bbox(out, spec, rng)
            if box is not None:
                out = replace(out, bbox=box)
    if cfg.cutmix_prob > 0 and mate is not None and rng.uniform() < cfg.cutmix_prob:
        out = _cutmix(out, mate, rng, cfg.cutmix_area)
    rotation = 0.0
    if cfg.rotate_prob > 0 and rng.uniform() < cfg.rotate_prob:
        rotation = float(rng.uniform(*cfg.rotate_range))
    scale = 1.0
    if cfg.scale_prob > 0 and rng.uniform() < cfg.scale_prob:
        scale = float(rng.uniform(*cfg.scale_range))
    return out, rotation, scale
