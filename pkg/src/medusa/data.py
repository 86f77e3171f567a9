"""Procedural scenes with mutually consistent dense labels for six tasks.

Each scene is a stack of tilted planar rectangles and ellipses over a far
background plane. Labels (depth, segmentation, edges, normals, saliency, part
segmentation) are all read off the same scene description, and
:func:`validate_sample` re-derives the dependent ones from the label maps
themselves.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from medusa import archive
from medusa.errors import InvalidArgumentError
from medusa.tasks import NUM_CLASSES

FAR_DEPTH = 1.0
NEAR_DEPTH = 0.1
# Physical width spanned by the image, in depth units; sets how tilted the normals look.
WORLD_WIDTH = 0.25
LIGHT = np.array([0.45, -0.35, 1.0]) / np.linalg.norm([0.45, -0.35, 1.0])
CLASS_COLORS = np.array(
    [
        [0.45, 0.45, 0.45],
        [0.90, 0.25, 0.20],
        [0.25, 0.80, 0.30],
        [0.25, 0.35, 0.90],
        [0.90, 0.85, 0.25],
    ]
)
_DEPTH_SLOTS = 6
_SLOT_WIDTH = 0.12
_MAX_TILT = 0.06
_MAX_HALF = 0.25

LABEL_KEYS = ("image", "depth", "segmentation", "edges", "normals", "saliency", "parts", "instances")


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    image_size: int = 64
    min_shapes: int = 1
    max_shapes: int = 4
    noise: float = 0.02

    def __post_init__(self):
        if self.image_size < 4:
            raise InvalidArgumentError("image_size too small")
        if not 0 <= self.min_shapes <= self.max_shapes <= _DEPTH_SLOTS:
            raise InvalidArgumentError(f"shape count range must lie within [0, {_DEPTH_SLOTS}]")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Sample:
    image: np.ndarray  # 3 x H x W in [0, 1]
    depth: np.ndarray  # 1 x H x W
    segmentation: np.ndarray  # H x W, class ids
    edges: np.ndarray  # 1 x H x W in {0, 1}
    normals: np.ndarray  # 3 x H x W, unit length
    saliency: np.ndarray  # 1 x H x W in {0, 1}
    parts: np.ndarray  # H x W, part ids
    instances: np.ndarray  # H x W, 0 = background, 1.. visible shapes

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in LABEL_KEYS}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "Sample":
        out = dict(arrays)
        for k in ("segmentation", "parts", "instances"):
            out[k] = out[k].astype(np.int64)
        return cls(**{k: out[k] for k in LABEL_KEYS})


def edges_from_segmentation(seg: np.ndarray) -> np.ndarray:
    """1 where a pixel's label differs from any in-image 4-neighbour."""
    e = np.zeros(seg.shape, dtype=bool)
    dy = seg[1:, :] != seg[:-1, :]
    dx = seg[:, 1:] != seg[:, :-1]
    e[1:, :] |= dy
    e[:-1, :] |= dy
    e[:, 1:] |= dx
    e[:, :-1] |= dx
    return e


def _plane_normal(slope_x: float, slope_y: float) -> np.ndarray:
    """Unit normal of depth = c + slope_x * u + slope_y * v, u and v in image widths."""
    n = np.array([-slope_x / WORLD_WIDTH, -slope_y / WORLD_WIDTH, 1.0])
    return n / np.linalg.norm(n)


def generate_sample(spec: SceneSpec, index: int) -> Sample:
    if index < 0:
        raise InvalidArgumentError("sample index must be non-negative")
    rng = np.random.default_rng([spec.seed, index])
    size = spec.image_size
    coords = (np.arange(size) + 0.5) / size
    v, u = np.meshgrid(coords, coords, indexing="ij")

    n_shapes = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    slots = np.sort(rng.permutation(_DEPTH_SLOTS)[:n_shapes])[::-1]  # far to near

    depth = np.full((size, size), FAR_DEPTH)
    seg = np.zeros((size, size), dtype=np.int64)
    inst = np.zeros((size, size), dtype=np.int64)
    parts = np.zeros((size, size), dtype=np.int64)
    normals = np.zeros((3, size, size))
    normals[2] = 1.0
    front_mask = np.zeros((size, size), dtype=bool)

    for order, slot in enumerate(slots, start=1):
        cls = int(rng.integers(1, NUM_CLASSES))
        cu, cv = rng.uniform(0.2, 0.8, size=2)
        hu, hv = rng.uniform(0.1, _MAX_HALF, size=2)
        ellipse = bool(rng.integers(0, 2))
        base = 0.18 + _SLOT_WIDTH * slot + _SLOT_WIDTH * rng.uniform(0.3, 0.7)
        sx, sy = rng.uniform(-_MAX_TILT, _MAX_TILT, size=2)
        if ellipse:
            mask = ((u - cu) / hu) ** 2 + ((v - cv) / hv) ** 2 <= 1.0
        else:
            mask = (np.abs(u - cu) <= hu) & (np.abs(v - cv) <= hv)
        if not mask.any():
            continue
        plane = base + sx * (u - cu) + sy * (v - cv)
        depth[mask] = plane[mask]
        seg[mask] = cls
        inst[mask] = order
        parts[mask] = np.where(v[mask] < cv, 2 * cls - 1, 2 * cls)
        normals[:, mask] = _plane_normal(sx, sy)[:, None]
        front_mask = mask

    # renumber instances to the visible ones, in painting order
    visible = [i for i in range(1, len(slots) + 1) if (inst == i).any()]
    relabel = np.zeros(len(slots) + 1, dtype=np.int64)
    relabel[visible] = np.arange(1, len(visible) + 1)
    inst = relabel[inst]

    shade = 0.35 + 0.65 * np.clip(np.einsum("c,chw->hw", LIGHT, normals), 0.0, None)
    fog = 1.15 - 0.6 * depth
    image = CLASS_COLORS[seg].transpose(2, 0, 1) * (shade * fog)[None]
    image = np.clip(image + rng.uniform(-spec.noise, spec.noise, size=image.shape), 0.0, 1.0)

    return Sample(
        image=image,
        depth=depth[None],
        segmentation=seg,
        edges=edges_from_segmentation(seg).astype(np.float64)[None],
        normals=normals,
        saliency=front_mask.astype(np.float64)[None],
        parts=parts,
        instances=inst,
    )


def validate_sample(sample: Sample, atol: float = 1e-6) -> list[str]:
    """Re-derive every dependent label from the maps; return a list of violations."""
    problems = []
    seg, inst, depth = sample.segmentation, sample.instances, sample.depth[0]
    size = seg.shape[0]

    norm = np.linalg.norm(sample.normals, axis=0)
    if np.abs(norm - 1.0).max() > atol:
        problems.append("normals are not unit length")
    if not np.array_equal(sample.edges[0].astype(bool), edges_from_segmentation(seg)):
        problems.append("edges disagree with segmentation")
    if not (sample.image.min() >= 0.0 and sample.image.max() <= 1.0):
        problems.append("image outside [0, 1]")

    bg = inst == 0
    if np.any(seg[bg] != 0) or np.any(seg[~bg] == 0):
        problems.append("instances disagree with segmentation")
    if np.any(depth[bg] != FAR_DEPTH) or np.any(sample.normals[2][bg] != 1.0):
        problems.append("background is not the far plane")
    if np.any(depth[~bg] <= NEAR_DEPTH) or np.any(depth[~bg] >= FAR_DEPTH):
        problems.append("shape depth outside the open depth range")

    ids = [i for i in np.unique(inst) if i != 0]
    mean_depth = {}
    ys, xs = np.mgrid[0:size, 0:size]
    for i in ids:
        m = inst == i
        if len(np.unique(seg[m])) != 1:
            problems.append(f"instance {i} spans several classes")
        mean_depth[i] = depth[m].mean()
        # depth must be planar on each instance and the normal must be that plane's normal
        a = np.column_stack([np.ones(m.sum()), xs[m], ys[m]])
        coef, _, rank, _ = np.linalg.lstsq(a, depth[m], rcond=None)
        if np.abs(a @ coef - depth[m]).max() > 1e-9:
            problems.append(f"instance {i} depth is not planar")
        expect = _plane_normal(coef[1] * size, coef[2] * size)
        # a sliver one pixel wide does not pin down the plane
        if rank == 3 and np.abs(sample.normals[:, m] - expect[:, None]).max() > 1e-6:
            problems.append(f"instance {i} normals do not match its depth plane")
        cls = seg[m][0]
        p = sample.parts[m]
        if not np.all((p == 2 * cls - 1) | (p == 2 * cls)):
            problems.append(f"instance {i} parts inconsistent with class {cls}")
        top_rows, bottom_rows = ys[m][p == 2 * cls - 1], ys[m][p == 2 * cls]
        if top_rows.size and bottom_rows.size and top_rows.max() > bottom_rows.min():
            problems.append(f"instance {i} top half is not above bottom half")
    if np.any(sample.parts[bg] != 0):
        problems.append("background carries part labels")

    if ids:
        nearest = min(ids, key=lambda i: mean_depth[i])
        if not np.array_equal(sample.saliency[0].astype(bool), inst == nearest):
            problems.append("saliency is not the nearest shape")
    elif sample.saliency.any():
        problems.append("saliency set on an empty scene")
    return problems


# ---------------------------------------------------------------- datasets


def _cache_dir() -> Path | None:
    root = os.environ.get("MEDUSA_DATA_CACHE")
    return Path(root) if root else None


def load_sample(spec: SceneSpec, index: int) -> Sample:
    """generate_sample, going through the on-disk cache when MEDUSA_DATA_CACHE is set."""
    root = _cache_dir()
    if root is None:
        return generate_sample(spec, index)
    folder = root / spec.digest()
    path = folder / f"{index:08d}.mda"
    if path.exists():
        arrays, _ = archive.load(path)
        return Sample.from_arrays(arrays)
    sample = generate_sample(spec, index)
    manifest = folder / "spec.json"
    if not manifest.exists():
        folder.mkdir(parents=True, exist_ok=True)
        manifest.write_text(json.dumps(asdict(spec), sort_keys=True))
    archive.save(path, sample.arrays(), {"spec": asdict(spec), "index": index})
    return sample


@dataclass
class Batch:
    """Stacked samples: ``image`` N x 3 x H x W and one array per label map."""

    arrays: dict[str, np.ndarray]
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)

    def __getitem__(self, key: str) -> np.ndarray:
        return self.arrays[key]

    def subset(self, rows) -> "Batch":
        return Batch({k: v[rows] for k, v in self.arrays.items()}, self.indices[rows])


def stack(samples: list[Sample], indices) -> Batch:
    arrays = {k: np.stack([getattr(s, k) for s in samples]) for k in LABEL_KEYS}
    return Batch(arrays, np.asarray(indices, dtype=np.int64))


@dataclass
class Dataset:
    spec: SceneSpec
    train: range
    val: range
    test: range

    def split(self, name: str) -> range:
        if name not in ("train", "val", "test"):
            raise InvalidArgumentError(f"unknown split {name!r}")
        return getattr(self, name)

    def load(self, name: str) -> Batch:
        idx = self.split(name)
        return stack([load_sample(self.spec, i) for i in idx], list(idx))


def dataset(spec: SceneSpec, n_train: int, n_val: int, n_test: int) -> Dataset:
    """Disjoint, contiguous index ranges for the three splits."""
    if min(n_train, n_val, n_test) < 1:
        raise InvalidArgumentError("split sizes must be positive")
    return Dataset(
        spec,
        range(0, n_train),
        range(n_train, n_train + n_val),
        range(n_train + n_val, n_train + n_val + n_test),
    )
