"""Density-map ground truth and a synthetic multimodal scene generator.

Scenes mimic the regimes that make RGB and thermal complementary:

* dark scenes, where people vanish from the RGB image but stay hot in thermal;
* heated distractors that show up in thermal only;
* a small translation between the two sensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import zoom
from scipy.spatial import cKDTree

from . import tensor as T
from .errors import ConfigurationError, ParseError, UsageError
from .tensor import Tensor

ILLUMINATIONS = ("bright", "dark")
DATASET_HEADER = "crosscount-dataset 1"

# geometry-adaptive kernel constants from the MCNN ground-truth recipe
ADAPTIVE_BETA = 0.3
ADAPTIVE_K = 3
TRUNCATE = 4.0


@dataclass
class AnnotationSet:
    points: np.ndarray  # (count, 2) as (x, y)
    height: int
    width: int
    illumination: str = "bright"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.points = pts
        if self.illumination not in ILLUMINATIONS:
            raise ConfigurationError(f"illumination must be one of {ILLUMINATIONS}, got {self.illumination!r}")
        if self.height < 1 or self.width < 1:
            raise ConfigurationError(f"image size must be positive, got {self.height}x{self.width}")
        bad = (pts[:, 0] < 0) | (pts[:, 0] >= self.width) | (pts[:, 1] < 0) | (pts[:, 1] >= self.height)
        if bad.any():
            x, y = pts[np.argmax(bad)]
            raise ConfigurationError(
                f"point ({x}, {y}) outside image of width {self.width} and height {self.height}")

    @property
    def count(self) -> int:
        return len(self.points)

    def __eq__(self, other):
        if not isinstance(other, AnnotationSet):
            return NotImplemented
        return (self.height, self.width, self.illumination) == (other.height, other.width, other.illumination) \
            and np.array_equal(self.points, other.points)


# ------------------------------------------------------------------ density maps


@dataclass
class DensityMap:
    tensor: Tensor
    sigmas: np.ndarray
    fallback: bool = False

    @property
    def array(self) -> np.ndarray:
        return self.tensor.data[0, 0]


def adaptive_sigmas(points: np.ndarray, beta: float = ADAPTIVE_BETA, k: int = ADAPTIVE_K) -> np.ndarray:
    """beta * mean distance to the k nearest other points."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(points) < k + 1:
        raise UsageError(f"adaptive sigma needs at least {k + 1} points, got {len(points)}")
    dist, _ = cKDTree(points).query(points, k=k + 1)
    return beta * dist[:, 1:].mean(axis=1)


def gaussian_stamp(x: float, y: float, sigma: float, height: int, width: int):
    """Truncated, boundary-clipped Gaussian with unit mass; returns (y0, x0, patch)."""
    r = max(1, math.ceil(TRUNCATE * sigma))
    cx, cy = int(math.floor(x)), int(math.floor(y))
    y0, y1 = max(0, cy - r), min(height, cy + r + 1)
    x0, x1 = max(0, cx - r), min(width, cx + r + 1)
    ys = np.arange(y0, y1) + 0.5 - y
    xs = np.arange(x0, x1) + 0.5 - x
    d2 = ys[:, None] ** 2 + xs[None, :] ** 2
    patch = np.exp(-d2 / (2.0 * sigma * sigma))
    patch[d2 > (TRUNCATE * sigma) ** 2] = 0.0
    total = patch.sum()
    if total <= 0 or not np.isfinite(total):
        patch = np.zeros_like(patch)
        patch[cy - y0, cx - x0] = 1.0
        return y0, x0, patch
    return y0, x0, patch / total


def sum_pool(arr: np.ndarray, stride: int) -> np.ndarray:
    """Block-sum downsampling; trailing partial blocks are zero-padded."""
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")
    if stride == 1:
        return arr
    h, w = arr.shape
    oh, ow = -(-h // stride), -(-w // stride)
    padded = np.zeros((oh * stride, ow * stride), dtype=arr.dtype)
    padded[:h, :w] = arr
    return padded.reshape(oh, stride, ow, stride).sum(axis=(1, 3))


def density_map(a: AnnotationSet, mode: str = "adaptive", stride: int = 1, sigma: float = 2.0,
                beta: float = ADAPTIVE_BETA, k: int = ADAPTIVE_K) -> DensityMap:
    """Ground-truth density at ``stride``; each annotated point contributes unit mass."""
    if mode not in ("adaptive", "fixed"):
        raise ConfigurationError(f"density mode must be adaptive or fixed, got {mode!r}")
    if sigma <= 0:
        raise ConfigurationError(f"sigma must be positive, got {sigma}")
    fallback = False
    if mode == "adaptive" and a.count >= k + 1:
        sigmas = adaptive_sigmas(a.points, beta, k)
    else:
        fallback = mode == "adaptive"
        sigmas = np.full(a.count, float(sigma))
    dmap = np.zeros((a.height, a.width))
    for (x, y), s in zip(a.points, sigmas):
        y0, x0, patch = gaussian_stamp(x, y, s, a.height, a.width)
        dmap[y0:y0 + patch.shape[0], x0:x0 + patch.shape[1]] += patch
    pooled = sum_pool(dmap, stride)
    return DensityMap(Tensor(pooled[None, None]), sigmas, fallback)


# ------------------------------------------------------------------ synthetic scenes


def _range(v) -> tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    lo, hi = (int(x) for x in v)
    return lo, hi


@dataclass
class SceneSpec:
    height: int = 48
    width: int = 64
    persons: tuple[int, int] = (5, 30)
    illumination: str = "bright"
    distractors: tuple[int, int] = (0, 3)
    shift: tuple[int, int] = (0, 0)
    noise: float = 0.02
    seed: int = 0
    second_modality: str = "thermal"
    person_sigma: float = 1.2
    distractor_sigma: float = 2.0
    max_shift: int = 4

    def __post_init__(self):
        self.persons = _range(self.persons)
        self.distractors = _range(self.distractors)
        self.shift = tuple(int(s) for s in self.shift)
        if self.height < 1 or self.width < 1:
            raise ConfigurationError(f"scene size must be positive, got {self.height}x{self.width}")
        for label, (lo, hi) in (("persons", self.persons), ("distractors", self.distractors)):
            if lo < 0 or hi < lo:
                raise ConfigurationError(f"{label} range must satisfy 0 <= min <= max, got {(lo, hi)}")
        if self.illumination not in ILLUMINATIONS:
            raise ConfigurationError(f"illumination must be one of {ILLUMINATIONS}")
        if len(self.shift) != 2 or max(abs(s) for s in self.shift) > self.max_shift:
            raise ConfigurationError(f"shift {self.shift} exceeds max_shift {self.max_shift}")
        if self.noise < 0:
            raise ConfigurationError("noise must be >= 0")
        if self.second_modality not in ("thermal", "depth"):
            raise ConfigurationError("second_modality must be thermal or depth")

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "SceneSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown scene keys {unknown}; valid: {sorted(known)}")
        kw = {}
        for key, raw in d.items():
            raw = str(raw).strip()
            try:
                if key in ("persons", "distractors", "shift"):
                    kw[key] = tuple(int(p) for p in raw.replace(",", " ").split())
                    if key != "shift" and len(kw[key]) == 1:
                        kw[key] = kw[key] * 2
                elif key in ("noise", "person_sigma", "distractor_sigma"):
                    kw[key] = float(raw)
                elif key in ("height", "width", "seed", "max_shift"):
                    kw[key] = int(raw)
                else:
                    kw[key] = raw
            except ValueError as exc:
                raise ConfigurationError(f"bad value for {key}: {raw!r} ({exc})") from None
        return cls(**kw)


@dataclass
class Scene:
    images: dict[str, Tensor]
    annotations: AnnotationSet
    name: str = "scene"
    split: str = "train"
    distractor_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    @property
    def rgb(self) -> Tensor:
        return self.images["rgb"]

    @property
    def thermal(self) -> Tensor:
        return self.images["thermal"]

    def __iter__(self):
        # unpacks as (rgb, second modality, annotations)
        second = next(m for m in self.images if m != "rgb")
        return iter((self.images["rgb"], self.images[second], self.annotations))


def _smooth_field(rng, h, w, cells=(4, 5)):
    coarse = rng.random(cells)
    return zoom(coarse, (h / cells[0], w / cells[1]), order=1, mode="nearest")[:h, :w]


def _blobs(h, w, points, sigma, amplitude):
    out = np.zeros((h, w))
    for x, y in points:
        y0, x0, patch = gaussian_stamp(x, y, sigma, h, w)
        out[y0:y0 + patch.shape[0], x0:x0 + patch.shape[1]] += amplitude * patch / patch.max()
    return out


def _translate(img: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Shift content by (dx, dy) pixels, replicating edges into the vacated border."""
    h, w = img.shape
    rows = np.clip(np.arange(h) - dy, 0, h - 1)
    cols = np.clip(np.arange(w) - dx, 0, w - 1)
    return img[rows][:, cols]


def synth_scene(s: SceneSpec) -> Scene:
    """Render one scene; identical specs give bit-identical output."""
    rng = np.random.default_rng(s.seed)
    h, w = s.height, s.width
    n_persons = int(rng.integers(s.persons[0], s.persons[1] + 1))
    n_distract = int(rng.integers(s.distractors[0], s.distractors[1] + 1))
    persons = np.column_stack([rng.uniform(0, w, n_persons), rng.uniform(0, h, n_persons)])
    distract = np.column_stack([rng.uniform(0, w, n_distract), rng.uniform(0, h, n_distract)])
    tint = rng.uniform(0.3, 1.0, size=(n_persons, 3))

    background = np.stack([0.35 + 0.3 * _smooth_field(rng, h, w) for _ in range(3)])
    rgb = background.copy()
    if s.illumination == "bright":
        for ch in range(3):
            rgb[ch] -= sum((_blobs(h, w, persons[i:i + 1], s.person_sigma, 0.5 * tint[i, ch])
                            for i in range(n_persons)), np.zeros((h, w)))
    else:
        rgb *= 0.15
    rgb += s.noise * rng.normal(size=rgb.shape)

    if s.second_modality == "thermal":
        second = 0.2 + 0.1 * _smooth_field(rng, h, w)
        second += _blobs(h, w, persons, s.person_sigma * 1.2, 0.6)
        second += _blobs(h, w, distract, s.distractor_sigma, 0.8)
    else:
        ramp = np.linspace(0.9, 0.4, h)[:, None] * np.ones((1, w))
        second = ramp - _blobs(h, w, persons, s.person_sigma * 1.5, 0.3)
        second -= _blobs(h, w, distract, s.distractor_sigma, 0.3)
    second = _translate(second, *s.shift)
    second = second + s.noise * rng.normal(size=second.shape)

    ann = AnnotationSet(persons, h, w, s.illumination)
    return Scene({"rgb": Tensor(rgb[None]), s.second_modality: Tensor(second[None, None])}, ann,
                 distractor_points=distract)


def make_scenes(n: int, base: SceneSpec | None = None, seed: int = 0, dark_fraction: float = 0.5,
                random_shift: bool = True, name_prefix: str = "scene") -> list[Scene]:
    """``n`` scenes: the first ``round(n * (1 - dark_fraction))`` bright, the rest dark."""
    base = base or SceneSpec()
    rng = np.random.default_rng(seed)
    n_bright = int(round(n * (1 - dark_fraction)))
    scenes = []
    for i in range(n):
        shift = tuple(int(v) for v in rng.integers(-base.max_shift, base.max_shift + 1, size=2)) \
            if random_shift else base.shift
        spec = replace(base, illumination="bright" if i < n_bright else "dark", shift=shift,
                       seed=int(rng.integers(2**31)))
        scene = synth_scene(spec)
        scene.name = f"{name_prefix}_{i:04d}"
        scenes.append(scene)
    return scenes


# ------------------------------------------------------------------ file formats


def format_annotations(a: AnnotationSet) -> str:
    lines = [f"{a.height} {a.width} {a.count} {a.illumination}"]
    lines += [f"{x!r} {y!r}" for x, y in a.points.tolist()]
    return "\n".join(lines) + "\n"


def parse_annotations(text: str, path=None) -> AnnotationSet:
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty annotation file, expected header 'h w count illumination'", path=path, line=1)
    head = lines[0].split()
    if len(head) != 4:
        raise ParseError(f"header must be 'h w count illumination', got {lines[0]!r}", path=path, line=1)
    try:
        h, w, count = int(head[0]), int(head[1]), int(head[2])
    except ValueError:
        raise ParseError(f"non-integer size or count in header {lines[0]!r}", path=path, line=1) from None
    if head[3] not in ILLUMINATIONS:
        raise ParseError(f"illumination must be one of {ILLUMINATIONS}, got {head[3]!r}", path=path, line=1)
    if h < 1 or w < 1 or count < 0:
        raise ParseError(f"invalid header values {lines[0]!r}", path=path, line=1)
    body = [(i + 2, ln) for i, ln in enumerate(lines[1:]) if ln.strip()]
    if len(body) != count:
        raise ParseError(f"header declares {count} points, found {len(body)}", path=path,
                         line=body[-1][0] if body else 1)
    pts = np.zeros((count, 2))
    for j, (line_no, ln) in enumerate(body):
        parts = ln.split()
        try:
            if len(parts) != 2:
                raise ValueError
            x, y = float(parts[0]), float(parts[1])
        except ValueError:
            raise ParseError(f"expected 'x y', got {ln!r}", path=path, line=line_no) from None
        if not (0 <= x < w and 0 <= y < h):
            raise ParseError(f"point ({x}, {y}) outside image of width {w} and height {h}", path=path, line=line_no)
        pts[j] = x, y
    return AnnotationSet(pts, h, w, head[3])


def save_annotations(path, a: AnnotationSet) -> None:
    Path(path).write_text(format_annotations(a))


def load_annotations(path) -> AnnotationSet:
    return parse_annotations(Path(path).read_text(), path=path)


@dataclass
class Dataset:
    modalities: list[str]
    scenes: list[Scene]

    def split(self, name: str) -> list[Scene]:
        return [s for s in self.scenes if s.split == name]

    def __len__(self):
        return len(self.scenes)


def save_dataset(root, scenes: Sequence[Scene], modalities: Sequence[str] | None = None) -> Path:
    """Write ``index.txt`` plus per-scene annotation text and tensor dumps."""
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {root}: {exc}") from exc
    if modalities is None:
        modalities = list(scenes[0].images) if scenes else ["rgb", "thermal"]
    lines = [DATASET_HEADER, "modalities " + ",".join(modalities)]
    for s in scenes:
        if " " in s.name or not s.name:
            raise ConfigurationError(f"scene names must be non-empty without spaces, got {s.name!r}")
        save_annotations(root / f"{s.name}.txt", s.annotations)
        for m in modalities:
            T.save_tensor(root / f"{s.name}.{m}.iadmt", s.images[m])
        lines.append(f"{s.name} {s.split}")
    (root / "index.txt").write_text("\n".join(lines) + "\n")
    return root


def load_dataset(root) -> Dataset:
    root = Path(root)
    index = root / "index.txt"
    if not index.exists():
        raise ParseError("dataset index not found", path=index)
    lines = index.read_text().splitlines()
    if not lines or lines[0].strip() != DATASET_HEADER:
        raise ParseError(f"expected header {DATASET_HEADER!r}", path=index, line=1)
    if len(lines) < 2 or not lines[1].startswith("modalities "):
        raise ParseError("expected 'modalities a,b' on line 2", path=index, line=2)
    modalities = [m for m in lines[1].split(None, 1)[1].split(",") if m]
    scenes = []
    for line_no, ln in enumerate(lines[2:], start=3):
        if not ln.strip():
            continue
        parts = ln.split()
        if len(parts) != 2:
            raise ParseError(f"expected 'name split', got {ln!r}", path=index, line=line_no)
        name, split = parts
        ann = load_annotations(root / f"{name}.txt")
        images = {m: T.load_tensor(root / f"{name}.{m}.iadmt") for m in modalities}
        for m, img in images.items():
            if img.shape[2:] != (ann.height, ann.width):
                raise ParseError(f"{m} image is {img.shape[2:]}, annotations say {(ann.height, ann.width)}",
                                 path=root / f"{name}.{m}.iadmt")
        scenes.append(Scene(images, ann, name=name, split=split))
    return Dataset(modalities, scenes)


def write_pgm(path, arr: np.ndarray) -> None:
    """8-bit binary PGM of a 2-D array, min-max scaled."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim != 2:
        a = a.reshape(a.shape[-2:])
    lo, hi = float(a.min()), float(a.max())
    scaled = np.zeros(a.shape) if hi <= lo else (a - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode() + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    parts = buf.split(maxsplit=3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise ParseError("not a binary PGM file", path=path)
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(buf[len(buf) - w * h:], dtype=np.uint8).reshape(h, w)
