"""MVTec-style dataset loading and a deterministic synthetic scene generator.

Directory layout (identical for real and synthetic data)::

    <root>/[<category>/]
        train/good/*.png
        validation/good/*.png          (optional)
        test/good/*.png
        test/<defect>/*.png
        ground_truth/<defect>/<stem>_mask.png      (MVTec AD)
        ground_truth/<defect>/<stem>/*.png         (MVTec LOCO, union of masks)
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass
class DatasetLayout:
    root: Path
    category: Optional[str] = None

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def base(self) -> Path:
        return self.root / self.category if self.category else self.root

    def split_dir(self, split: str) -> Path:
        return self.base / split

    def has_validation(self) -> bool:
        return (self.base / "validation" / "good").is_dir()


@dataclass
class Sample:
    path: Path
    label: int
    defect_type: str
    mask_path: Optional[Path] = None

    @property
    def image_id(self) -> str:
        return f"{self.defect_type}/{self.path.stem}"


def _images_in(folder: Path) -> List[Path]:
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)


def _find_mask(layout: DatasetLayout, defect: str, stem: str) -> Optional[Path]:
    gt = layout.base / "ground_truth" / defect
    for ext in IMAGE_EXTENSIONS:
        cand = gt / f"{stem}_mask{ext}"
        if cand.is_file():
            return cand
    folder = gt / stem
    if folder.is_dir():
        return folder
    for ext in IMAGE_EXTENSIONS:
        cand = gt / f"{stem}{ext}"
        if cand.is_file():
            return cand
    return None


def scan_split(layout: DatasetLayout, split: str, require_masks: bool = True) -> List[Sample]:
    """List samples of ``split`` in sorted (defect, filename) order."""
    base = layout.split_dir(split)
    if not base.is_dir():
        raise DataError(f"split folder not found: {base}")
    samples = []
    for defect_dir in sorted(p for p in base.iterdir() if p.is_dir()):
        defect = defect_dir.name
        label = 0 if defect == "good" else 1
        if split in ("train", "validation") and label:
            raise DataError(f"{split} split must contain only normal images, found {defect_dir}")
        for path in _images_in(defect_dir):
            mask = None
            if label:
                mask = _find_mask(layout, defect, path.stem)
                if mask is None and require_masks:
                    raise DataError(f"missing ground-truth mask for {path}")
            samples.append(Sample(path, label, defect, mask))
    if not samples:
        raise DataError(f"no images found under {base}")
    return samples


def load_image(path: Path, size: int) -> torch.Tensor:
    """RGB image resized to ``size`` x ``size``, values in [0, 1], shape (3, H, W)."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def load_mask(path: Optional[Path], size: int) -> np.ndarray:
    """Boolean (size, size) mask; any nonzero pixel is anomalous. A folder is OR-ed."""
    if path is None:
        return np.zeros((size, size), dtype=bool)
    path = Path(path)
    files = _images_in(path) if path.is_dir() else [path]
    out = np.zeros((size, size), dtype=bool)
    for f in files:
        with Image.open(f) as im:
            im = im.convert("L")
            if im.size != (size, size):
                im = im.resize((size, size), Image.NEAREST)
            out |= np.asarray(im) > 0
    return out


def load_dataset(
    layout: DatasetLayout, split: str, size: int, require_masks: bool = True
) -> Iterator[Tuple[torch.Tensor, int, Optional[np.ndarray]]]:
    """Yield (image, label, mask) in deterministic sorted order; masks are None for good images."""
    for s in scan_split(layout, split, require_masks):
        mask = load_mask(s.mask_path, size) if s.label and s.mask_path is not None else None
        yield load_image(s.path, size), s.label, mask


def load_images(samples: Sequence[Sample], size: int) -> torch.Tensor:
    return torch.stack([load_image(s.path, size) for s in samples])


def normal_splits(layout: DatasetLayout, holdout: float = 0.1, seed: int = 0) -> Tuple[List[Sample], List[Sample]]:
    """Training and calibration samples; holds out a fraction of train/good if there is no validation folder."""
    train = scan_split(layout, "train")
    if layout.has_validation():
        return train, scan_split(layout, "validation")
    if len(train) < 2:
        raise DataError("need at least two training images to hold out a validation split")
    n_val = max(1, int(round(holdout * len(train))))
    order = np.random.default_rng(seed).permutation(len(train))
    val_idx = set(order[:n_val].tolist())
    logger.info("no validation folder; holding out %d of %d training images", n_val, len(train))
    return ([s for i, s in enumerate(train) if i not in val_idx],
            [s for i, s in enumerate(train) if i in val_idx])


# --------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SceneObject:
    shape: str  # circle | square | triangle
    color: Tuple[float, float, float]
    center: Tuple[int, int]  # (row, col) on the canvas
    size: int  # radius / half side


def _default_objects() -> List[SceneObject]:
    return [
        SceneObject("circle", (0.85, 0.20, 0.15), (34, 34), 13),
        SceneObject("square", (0.15, 0.30, 0.85), (34, 94), 12),
        SceneObject("triangle", (0.15, 0.70, 0.25), (94, 34), 14),
        SceneObject("circle", (0.90, 0.80, 0.10), (94, 94), 13),
    ]


LOGICAL_KINDS = ("missing", "duplicate", "swapped", "extra", "displaced")


@dataclass
class SyntheticSceneSpec:
    canvas: int = 128
    objects: List[SceneObject] = field(default_factory=_default_objects)
    jitter: int = 2
    noise: float = 0.02
    background: float = 0.55
    texture: float = 0.05
    texture_shift: bool = True  # random per-image phase of the background pattern
    scratch_length: Tuple[int, int] = (20, 40)
    scratch_width: int = 2
    patch_size: Tuple[int, int] = (8, 14)
    logical_kinds: Tuple[str, ...] = ("missing", "duplicate", "swapped")
    victim: Optional[int] = None  # object index to alter; random when None
    spare_location: Tuple[int, int] = (64, 64)  # empty in every normal scene; used by "extra"
    displacement: int = 24  # used by "displaced"
    seed: int = 0

    def __post_init__(self):
        self.objects = [o if isinstance(o, SceneObject) else SceneObject(**o) for o in self.objects]
        if not self.objects:
            raise ConfigError("synthetic scene needs at least one object")
        self.logical_kinds = tuple(self.logical_kinds)
        unknown = set(self.logical_kinds) - set(LOGICAL_KINDS)
        if not self.logical_kinds or unknown:
            raise ConfigError(f"logical_kinds must be a non-empty subset of {LOGICAL_KINDS}")
        if self.victim is not None and not 0 <= self.victim < len(self.objects):
            raise ConfigError(f"victim index {self.victim} out of range")
        if self.canvas < 32:
            raise ConfigError("canvas must be at least 32 pixels")


def _footprint(obj: SceneObject, center: Tuple[int, int], canvas: int) -> np.ndarray:
    rr, cc = np.mgrid[:canvas, :canvas]
    r0, c0 = center
    s = obj.size
    if obj.shape == "circle":
        return (rr - r0) ** 2 + (cc - c0) ** 2 <= s * s
    if obj.shape == "square":
        return (np.abs(rr - r0) <= s) & (np.abs(cc - c0) <= s)
    if obj.shape == "triangle":
        # apex up, base at r0 + s
        dy = rr - (r0 - s)
        return (dy >= 0) & (rr <= r0 + s) & (np.abs(cc - c0) * 2 <= dy)
    raise ConfigError(f"unknown object shape {obj.shape!r}")


def _background(spec: SyntheticSceneSpec, phase=(0.0, 0.0)) -> np.ndarray:
    n = spec.canvas
    rr, cc = np.mgrid[:n, :n] / n
    tex = spec.texture * np.sin(2 * np.pi * (6 * rr + phase[0])) * np.sin(2 * np.pi * (6 * cc + phase[1]))
    plane = spec.background + tex
    return np.repeat(plane[..., None], 3, axis=2)


@dataclass
class Placement:
    obj: int
    center: Tuple[int, int]


def _normal_layout(spec: SyntheticSceneSpec, rng: np.random.Generator) -> List[Placement]:
    j = spec.jitter
    out = []
    for i, o in enumerate(spec.objects):
        d = rng.integers(-j, j + 1, size=2) if j else np.zeros(2, dtype=int)
        out.append(Placement(i, (int(o.center[0] + d[0]), int(o.center[1] + d[1]))))
    return out


def _render(spec: SyntheticSceneSpec, layout: Sequence[Placement], noise, phase=(0.0, 0.0)) -> np.ndarray:
    img = _background(spec, phase)
    for p in layout:
        obj = spec.objects[p.obj]
        img[_footprint(obj, p.center, spec.canvas)] = obj.color
    return img + noise


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def _structural_defect(spec, img, rng):
    n = spec.canvas
    mask = np.zeros((n, n), dtype=bool)
    kind = ("scratch", "stain", "hole")[int(rng.integers(3))]
    if kind == "scratch":
        length = rng.integers(spec.scratch_length[0], spec.scratch_length[1] + 1)
        theta = rng.uniform(0, np.pi)
        r0, c0 = rng.integers(16, n - 16, size=2)
        t = np.linspace(-length / 2, length / 2, 4 * int(length))
        rows = np.round(r0 + t * np.sin(theta)).astype(int)
        cols = np.round(c0 + t * np.cos(theta)).astype(int)
        for dr in range(spec.scratch_width):
            for dc in range(spec.scratch_width):
                rr = np.clip(rows + dr, 0, n - 1)
                cc = np.clip(cols + dc, 0, n - 1)
                mask[rr, cc] = True
        img[mask] = (0.08, 0.08, 0.08)
    else:
        size = int(rng.integers(spec.patch_size[0], spec.patch_size[1] + 1))
        if kind == "hole":
            # carve background-coloured gap into an object
            obj = spec.objects[int(rng.integers(len(spec.objects)))]
            r0, c0 = obj.center
        else:
            r0, c0 = rng.integers(size, n - size, size=2)
        top, left = r0 - size // 2, c0 - size // 2
        mask[max(top, 0):top + size, max(left, 0):left + size] = True
        if kind == "stain":
            yy, xx = np.nonzero(mask)
            checker = ((yy // 2 + xx // 2) % 2).astype(float)
            img[yy, xx] = np.stack([0.6 + 0.3 * checker, 0.2 + 0.2 * checker, 0.7 - 0.4 * checker], axis=1)
        else:
            img[mask] = (0.30, 0.30, 0.30)
    return img, mask, kind


def _logical_defect(spec, layout, rng):
    """Returns the altered layout and the footprint mask."""
    n = spec.canvas
    kind = spec.logical_kinds[int(rng.integers(len(spec.logical_kinds)))]
    victim = spec.victim if spec.victim is not None else int(rng.integers(len(layout)))
    # a second, different object for the two-object rearrangements
    other = (victim + 1 + int(rng.integers(len(layout) - 1))) % len(layout) if len(layout) > 1 else victim
    place = layout[victim]
    obj = spec.objects[place.obj]
    old = _footprint(obj, place.center, n)
    new_layout = list(layout)
    if kind == "missing":
        del new_layout[victim]
        return new_layout, old, kind
    if kind == "duplicate":
        # the victim's slot holds a copy of another inventory object
        twin = layout[other].obj
        new_layout[victim] = Placement(twin, place.center)
        return new_layout, old | _footprint(spec.objects[twin], place.center, n), kind
    if kind == "swapped":
        a, b = layout[victim], layout[other]
        new_layout[victim] = Placement(a.obj, b.center)
        new_layout[other] = Placement(b.obj, a.center)
        mask = old | _footprint(spec.objects[b.obj], b.center, n)
        mask |= _footprint(obj, b.center, n) | _footprint(spec.objects[b.obj], a.center, n)
        return new_layout, mask, kind
    if kind == "extra":
        new_layout.append(Placement(place.obj, spec.spare_location))
        return new_layout, _footprint(obj, spec.spare_location, n), kind
    # displaced: shifted by a fixed distance in a random direction
    theta = rng.uniform(0, 2 * np.pi)
    moved = (int(round(place.center[0] + spec.displacement * np.sin(theta))),
             int(round(place.center[1] + spec.displacement * np.cos(theta))))
    new_layout[victim] = Placement(place.obj, moved)
    return new_layout, old | _footprint(obj, moved, n), kind


def render_sample(spec: SyntheticSceneSpec, kind: str, index: int):
    """Render one sample deterministically.

    Returns ``(image_uint8, mask_bool, base_uint8, subtype)`` where ``base`` is the
    normal scene the sample was derived from (equal to ``image`` for normals).
    """
    stream = {"train": 0, "validation": 1, "good": 2, "structural": 3, "logical": 4}[kind]
    rng = np.random.default_rng([spec.seed, stream, index])
    noise = rng.normal(0.0, spec.noise, size=(spec.canvas, spec.canvas, 3)) if spec.noise else 0.0
    layout = _normal_layout(spec, rng)
    phase = tuple(rng.uniform(0.0, 1.0, size=2)) if spec.texture_shift else (0.0, 0.0)
    base = _render(spec, layout, noise, phase)
    empty = np.zeros((spec.canvas, spec.canvas), dtype=bool)
    if kind in ("train", "validation", "good"):
        img = _to_uint8(base)
        return img, empty, img, "good"
    if kind == "structural":
        img, mask, sub = _structural_defect(spec, base.copy(), rng)
        return _to_uint8(img), mask, _to_uint8(base), sub
    new_layout, mask, sub = _logical_defect(spec, layout, rng)
    return _to_uint8(_render(spec, new_layout, noise, phase)), mask, _to_uint8(base), sub


def generate_synthetic(
    spec: SyntheticSceneSpec,
    root,
    n_normal: int = 40,
    n_structural: int = 20,
    n_logical: int = 20,
    n_validation: int = 10,
    n_test_normal: int = 20,
) -> DatasetLayout:
    """Write an MVTec-style synthetic dataset to ``root`` and return its layout."""
    root = Path(root)
    counts = {"train": n_normal, "validation": n_validation, "good": n_test_normal,
              "structural": n_structural, "logical": n_logical}
    folders = {"train": "train/good", "validation": "validation/good", "good": "test/good",
               "structural": "test/structural", "logical": "test/logical"}
    manifest = {"spec": asdict(spec), "images": []}
    for kind, count in counts.items():
        out = root / folders[kind]
        out.mkdir(parents=True, exist_ok=True)
        if kind in ("structural", "logical"):
            (root / "ground_truth" / kind).mkdir(parents=True, exist_ok=True)
        for i in range(count):
            img, mask, _, sub = render_sample(spec, kind, i)
            name = f"{i:03d}"
            Image.fromarray(img).save(out / f"{name}.png")
            if kind in ("structural", "logical"):
                Image.fromarray(mask.astype(np.uint8) * 255).save(root / "ground_truth" / kind / f"{name}_mask.png")
            manifest["images"].append({"path": f"{folders[kind]}/{name}.png", "subtype": sub})
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return DatasetLayout(root)
