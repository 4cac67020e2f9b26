"""Dataset loading, procedural toy scenes, tree files, and SH compression."""

from __future__ import annotations

import copy
import heapq
import json
import math
import struct
import zlib
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ._kernels import grid_render_kernel
from .errors import (
    BadMagicError,
    BadVersionError,
    ChecksumError,
    ConfigError,
    ImageShapeError,
    InputError,
    MetadataError,
    MissingAssetError,
    StructureError,
    TreeFileError,
)
from .octree import VALID_BASIS_COUNTS, SparseOctree
from .sh import sh_from_rgb

TREE_MAGIC = b"DOT1"
TREE_VERSION = 1


# ---------------------------------------------------------------------------
# Cameras

def focal_from_angle(width: int, camera_angle_x: float) -> float:
    """Focal length in pixels for a horizontal field of view in radians."""
    return 0.5 * width / math.tan(0.5 * camera_angle_x)


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera looking down its local -z axis.

    ``cam_to_world`` is a 4x4 rigid transform; pixel (x, y) maps to the
    camera-frame direction ((x+0.5-W/2)/f, -(y+0.5-H/2)/f, -1).
    """

    width: int
    height: int
    focal: float
    cam_to_world: np.ndarray

    def __post_init__(self) -> None:
        mat = np.asarray(self.cam_to_world, dtype=np.float64)
        if mat.shape != (4, 4):
            raise InputError(f"cam_to_world must be 4x4, got {mat.shape}")
        object.__setattr__(self, "cam_to_world", mat.copy())
        if self.width < 1 or self.height < 1:
            raise InputError("image dimensions must be positive")
        if not (math.isfinite(self.focal) and self.focal > 0):
            raise InputError(f"focal must be positive, got {self.focal}")
        rot = mat[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-4):
            raise InputError("camera rotation block is not orthonormal")

    @property
    def position(self) -> np.ndarray:
        return self.cam_to_world[:3, 3].copy()

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Unit world-space rays through every pixel center, row-major."""
        xs = (np.arange(self.width, dtype=np.float64) + 0.5
              - 0.5 * self.width) / self.focal
        ys = -(np.arange(self.height, dtype=np.float64) + 0.5
               - 0.5 * self.height) / self.focal
        cam = np.empty((self.height, self.width, 3), dtype=np.float64)
        cam[..., 0] = xs[None, :]
        cam[..., 1] = ys[:, None]
        cam[..., 2] = -1.0
        world = cam.reshape(-1, 3) @ self.cam_to_world[:3, :3].T
        world /= np.linalg.norm(world, axis=1, keepdims=True)
        origins = np.broadcast_to(self.cam_to_world[:3, 3],
                                  world.shape).copy()
        return origins, world


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Rigid cam_to_world placing the camera at ``eye`` facing ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    back = eye - np.asarray(target, dtype=np.float64)
    norm = np.linalg.norm(back)
    if norm == 0.0:
        raise InputError("eye and target coincide")
    back /= norm
    right = np.cross(np.asarray(up, dtype=np.float64), back)
    if np.linalg.norm(right) < 1e-9:
        # view axis parallel to up; fall back to an arbitrary horizontal
        right = np.cross((0.0, 1.0, 0.0), back)
    right /= np.linalg.norm(right)
    true_up = np.cross(back, right)
    mat = np.eye(4)
    mat[:3, 0] = right
    mat[:3, 1] = true_up
    mat[:3, 2] = back
    mat[:3, 3] = eye
    return mat


def orbit_cameras(count: int, width: int = 256, height: int = 256,
                  camera_angle_x: float = 0.9, radius: float = 3.0,
                  elevation: float = 0.4, target=(0.0, 0.0, 0.0)) -> list[Camera]:
    """Evenly spaced ring of cameras circling ``target``."""
    if count < 1:
        raise ConfigError(f"camera count must be >= 1, got {count}")
    focal = focal_from_angle(width, camera_angle_x)
    target = np.asarray(target, dtype=np.float64)
    cams = []
    for k in range(count):
        azimuth = 2.0 * math.pi * k / count
        eye = target + radius * np.array([
            math.cos(elevation) * math.cos(azimuth),
            math.cos(elevation) * math.sin(azimuth),
            math.sin(elevation),
        ])
        cams.append(Camera(width, height, focal, look_at(eye, target)))
    return cams


# ---------------------------------------------------------------------------
# Datasets

@dataclass
class RayDataset:
    """Flattened training rays plus held-out full views for evaluation."""

    origins: np.ndarray
    dirs: np.ndarray
    targets: np.ndarray
    split: str = "train"
    heldout: list = field(default_factory=list)

    def __post_init__(self) -> None:
        self.origins = np.ascontiguousarray(self.origins, dtype=np.float64)
        self.dirs = np.ascontiguousarray(self.dirs, dtype=np.float64)
        self.targets = np.ascontiguousarray(self.targets, dtype=np.float64)
        n = self.origins.shape[0]
        if (self.origins.shape != (n, 3) or self.dirs.shape != (n, 3)
                or self.targets.shape != (n, 3)):
            raise InputError("origins, dirs and targets must all be (N, 3)")

    @property
    def ray_count(self) -> int:
        return self.origins.shape[0]


def _composite_over_white(path: Path) -> np.ndarray:
    if not path.exists():
        raise MissingAssetError(f"image not found: {path}")
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGBA"), dtype=np.float64) / 255.0
    rgb, alpha = arr[..., :3], arr[..., 3:4]
    return alpha * rgb + (1.0 - alpha)


def load_image(path) -> np.ndarray:
    """8-bit PNG (RGB or RGBA over white) as float H x W x 3 in [0, 1]."""
    return _composite_over_white(Path(path))


def quantize8(image: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid, the precision files actually store."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.floor(arr * 255.0 + 0.5) / 255.0


def save_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.floor(arr * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(data, "RGB").save(Path(path))


def load_nerf_synthetic(root, split: str = "train"):
    """Cameras and rays from a transforms_{split}.json + PNG directory.

    PNG alpha is composited over a white background. Returns
    (cameras, RayDataset) with rays flattened in view order.
    """
    root = Path(root)
    meta_path = root / f"transforms_{split}.json"
    if not meta_path.exists():
        raise MissingAssetError(f"metadata not found: {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MetadataError(f"{meta_path.name} is not valid JSON: {exc}") from None

    try:
        angle = float(meta["camera_angle_x"])
        frames = list(meta["frames"])
        entries = [(str(f["file_path"]), np.asarray(f["transform_matrix"],
                                                    dtype=np.float64))
                   for f in frames]
    except (KeyError, TypeError, ValueError) as exc:
        raise MetadataError(f"{meta_path.name} missing or malformed "
                            f"fields: {exc}") from None
    if not entries:
        raise MetadataError(f"{meta_path.name} lists no frames")
    for _, mat in entries:
        if mat.shape != (4, 4):
            raise MetadataError("transform_matrix must be 4x4")

    paths = []
    for rel, _ in entries:
        p = root / rel
        if not p.suffix:
            p = p.with_suffix(".png")
        paths.append(p)
    with ThreadPoolExecutor(max_workers=min(8, len(paths))) as pool:
        images = list(pool.map(_composite_over_white, paths))

    height, width = images[0].shape[:2]
    for p, img in zip(paths, images):
        if img.shape[:2] != (height, width):
            raise ImageShapeError(f"{p.name} is {img.shape[1]}x{img.shape[0]}, "
                                  f"expected {width}x{height}")

    focal = focal_from_angle(width, angle)
    cameras = []
    for _, mat in entries:
        try:
            cameras.append(Camera(width, height, focal, mat))
        except InputError as exc:
            raise MetadataError(f"bad camera in {meta_path.name}: {exc}") from None

    origins = np.empty((len(cameras) * height * width, 3))
    dirs = np.empty_like(origins)
    targets = np.empty_like(origins)
    stride = height * width
    for i, (cam, img) in enumerate(zip(cameras, images)):
        o, d = cam.rays()
        origins[i * stride:(i + 1) * stride] = o
        dirs[i * stride:(i + 1) * stride] = d
        targets[i * stride:(i + 1) * stride] = img.reshape(-1, 3)
    return cameras, RayDataset(origins, dirs, targets, split=split)


def load_camera_file(path) -> list[Camera]:
    """Cameras from a JSON file in the transforms convention.

    Expects width, height, camera_angle_x, and either frames[] with
    transform_matrix entries or a single top-level transform_matrix.
    """
    path = Path(path)
    if not path.exists():
        raise MissingAssetError(f"camera file not found: {path}")
    try:
        meta = json.loads(path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MetadataError(f"{path.name} is not valid JSON: {exc}") from None
    try:
        width = int(meta["width"])
        height = int(meta["height"])
        angle = float(meta["camera_angle_x"])
        if "frames" in meta:
            mats = [np.asarray(f["transform_matrix"], dtype=np.float64)
                    for f in meta["frames"]]
        else:
            mats = [np.asarray(meta["transform_matrix"], dtype=np.float64)]
    except (KeyError, TypeError, ValueError) as exc:
        raise MetadataError(f"{path.name} missing or malformed fields: "
                            f"{exc}") from None
    focal = focal_from_angle(width, angle)
    try:
        return [Camera(width, height, focal, m) for m in mats]
    except InputError as exc:
        raise MetadataError(f"bad camera in {path.name}: {exc}") from None


# ---------------------------------------------------------------------------
# Toy scenes

TOY_KINDS = ("solid_sphere", "hollow_shell_with_core", "two_boxes",
             "checker_sphere")


@dataclass(frozen=True)
class ToySceneSpec:
    """Analytic scene inside the unit cube [-1, 1]^3.

    Only the fields a kind consumes are validated against it: spheres use
    ``radius``, the shell adds ``inner_radius``/``core_radius``, boxes use
    ``box_half``/``box_offset``, the checker uses both colors.
    """

    kind: str
    radius: float = 0.6
    inner_radius: float = 0.45
    core_radius: float = 0.3
    sigma: float = 20.0
    core_sigma: float = 50.0
    color: tuple = (0.85, 0.35, 0.2)
    color_b: tuple = (0.2, 0.45, 0.85)
    box_half: float = 0.22
    box_offset: float = 0.45
    basis_count: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in TOY_KINDS:
            raise ConfigError(f"unknown toy scene kind {self.kind!r}; "
                              f"expected one of {TOY_KINDS}")
        if self.basis_count not in VALID_BASIS_COUNTS:
            raise ConfigError(f"basis_count must be one of "
                              f"{VALID_BASIS_COUNTS}, got {self.basis_count}")
        for name in ("color", "color_b"):
            value = tuple(float(c) for c in getattr(self, name))
            if len(value) != 3 or any(not 0.0 <= c <= 1.0 for c in value):
                raise ConfigError(f"{name} must be 3 components in [0, 1]")
            object.__setattr__(self, name, value)
        if self.sigma < 0 or self.core_sigma < 0:
            raise ConfigError("densities must be non-negative")
        if self.kind in ("solid_sphere", "checker_sphere"):
            if not 0.0 <= self.radius <= 1.0:
                raise ConfigError(f"radius must lie in [0, 1], "
                                  f"got {self.radius}")
        elif self.kind == "hollow_shell_with_core":
            ordered = 0.0 < self.core_radius < self.inner_radius < self.radius
            if not (ordered and self.radius <= 1.0):
                raise ConfigError("shell requires 0 < core_radius < "
                                  "inner_radius < radius <= 1")
        else:
            if not (self.box_half > 0 and self.box_offset >= 0
                    and self.box_offset + self.box_half <= 1.0):
                raise ConfigError("boxes must fit inside the unit cube")

    def to_json(self) -> str:
        data = asdict(self)
        data["color"] = list(data["color"])
        data["color_b"] = list(data["color_b"])
        return json.dumps(data, indent=2)

    @classmethod
    def from_json(cls, source) -> "ToySceneSpec":
        if isinstance(source, (str, bytes)):
            try:
                data = json.loads(source)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"toy scene JSON is malformed: {exc}") from None
        else:
            data = dict(source)
        if not isinstance(data, dict):
            raise ConfigError("toy scene JSON must be an object")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown toy scene fields: {sorted(unknown)}")
        if "kind" not in data:
            raise ConfigError("toy scene JSON must name a kind")
        for name in ("color", "color_b"):
            if name in data:
                data[name] = tuple(data[name])
        return cls(**data)


def scene_field(spec: ToySceneSpec):
    """Analytic (sigma, rgb) field callback for a toy scene.

    The callback maps an (N, 3) array of points to (sigma[N], rgb[N, 3]);
    rgb is arbitrary (white) wherever sigma is zero.
    """

    def evaluate(points: np.ndarray):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        n = pts.shape[0]
        sigma = np.zeros(n)
        rgb = np.ones((n, 3))
        r = np.linalg.norm(pts, axis=1)
        if spec.kind == "solid_sphere":
            inside = r <= spec.radius
            sigma[inside] = spec.sigma
            rgb[inside] = spec.color
        elif spec.kind == "hollow_shell_with_core":
            shell = (r >= spec.inner_radius) & (r <= spec.radius)
            core = r <= spec.core_radius
            sigma[shell] = spec.sigma
            rgb[shell] = spec.color
            sigma[core] = spec.core_sigma
            rgb[core] = spec.color_b
        elif spec.kind == "two_boxes":
            inside_yz = (np.abs(pts[:, 1]) <= spec.box_half) \
                & (np.abs(pts[:, 2]) <= spec.box_half)
            pos = inside_yz & (np.abs(pts[:, 0] - spec.box_offset)
                               <= spec.box_half)
            neg = inside_yz & (np.abs(pts[:, 0] + spec.box_offset)
                               <= spec.box_half)
            sigma[pos | neg] = spec.sigma
            rgb[pos] = spec.color
            rgb[neg] = spec.color_b
        else:
            inside = r <= spec.radius
            sigma[inside] = spec.sigma
            safe_r = np.where(r > 0, r, 1.0)
            azimuth = np.arctan2(pts[:, 1], pts[:, 0])
            polar = np.arccos(np.clip(pts[:, 2] / safe_r, -1.0, 1.0))
            phase = (np.floor(azimuth / (np.pi / 4.0))
                     + np.floor(polar / (np.pi / 4.0))).astype(np.int64)
            rgb[inside & (phase % 2 == 0)] = spec.color
            rgb[inside & (phase % 2 != 0)] = spec.color_b
        return sigma, rgb

    return evaluate


def generate_toy_scene(spec: ToySceneSpec, depth: int, max_depth: int = 10):
    """Dense tree sampling the analytic field at leaf centers.

    Colors are stored as degree-0 SH so any view decodes back to the field's
    rgb. Returns (tree, field callback).
    """
    from .octree import build_dense

    field_fn = scene_field(spec)

    def init(centers: np.ndarray):
        sigma, rgb = field_fn(centers)
        return sigma, sh_from_rgb(rgb, spec.basis_count)

    tree = build_dense(depth, (0.0, 0.0, 0.0), 1.0, spec.basis_count, init,
                       max_depth=max_depth)
    return tree, field_fn


def _background_rgb(background) -> np.ndarray:
    bg = np.asarray(background, dtype=np.float64).reshape(-1)
    if bg.size == 1:
        bg = np.full(3, bg[0])
    if bg.shape != (3,):
        raise InputError("background must be a scalar or 3 components")
    return bg


def reference_renderer(spec: ToySceneSpec, depth: int = 8):
    """Ray compositor over a (2^depth)^3 voxelization of the analytic field.

    Serves as ground truth for toy datasets: exact per-cell segments, f64
    accumulation, no tree involved.
    """
    res = 1 << depth
    axis = (np.arange(res, dtype=np.float64) + 0.5) / res * 2.0 - 1.0
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    sigma, rgb = scene_field(spec)(pts)
    grid_sigma = sigma.reshape(res, res, res).astype(np.float32)
    grid_rgb = rgb.reshape(res, res, res, 3).astype(np.float32)
    center = np.zeros(3)

    def render(origins: np.ndarray, dirs: np.ndarray,
               background=1.0) -> np.ndarray:
        origins = np.ascontiguousarray(origins, dtype=np.float64)
        dirs = np.ascontiguousarray(dirs, dtype=np.float64)
        out = np.empty((origins.shape[0], 3))
        grid_render_kernel(grid_sigma, grid_rgb, center, 1.0, origins, dirs,
                           _background_rgb(background), 0.0, out)
        return out

    return render


_TOY_ELEVATIONS = (0.5, 0.1, -0.3)


def toy_dataset(spec: ToySceneSpec, n_views: int = 24, heldout_views: int = 2,
                width: int = 64, height: int = 64,
                camera_angle_x: float = 0.9, orbit_radius: float = 3.0,
                reference_depth: int = 7, background=1.0):
    """Orbiting cameras plus ground-truth targets for a toy scene.

    The last ``heldout_views`` cameras are kept out of the ray set and
    attached to the dataset as (camera, image) pairs. Returns
    (training cameras, RayDataset).
    """
    if n_views < 1 or heldout_views < 0:
        raise ConfigError("need at least one training view")
    total = n_views + heldout_views
    focal = focal_from_angle(width, camera_angle_x)
    cams = []
    for k in range(total):
        azimuth = 2.0 * math.pi * k / total
        elevation = _TOY_ELEVATIONS[k % len(_TOY_ELEVATIONS)]
        eye = orbit_radius * np.array([
            math.cos(elevation) * math.cos(azimuth),
            math.cos(elevation) * math.sin(azimuth),
            math.sin(elevation),
        ])
        cams.append(Camera(width, height, focal, look_at(eye, (0, 0, 0))))

    render = reference_renderer(spec, reference_depth)
    origins, dirs, targets, heldout = [], [], [], []
    for i, cam in enumerate(cams):
        o, d = cam.rays()
        img = render(o, d, background)
        if i < n_views:
            origins.append(o)
            dirs.append(d)
            targets.append(img)
        else:
            heldout.append((cam, img.reshape(cam.height, cam.width, 3)))
    dataset = RayDataset(np.concatenate(origins), np.concatenate(dirs),
                         np.concatenate(targets), split="train",
                         heldout=heldout)
    return cams[:n_views], dataset


# ---------------------------------------------------------------------------
# Tree files

_HEADER = struct.Struct("<III6dQ")
_INTERNAL = struct.Struct("<8Q")
_CRC = struct.Struct("<I")


def _level_order(tree: SparseOctree):
    """Live node ids in breadth-first order plus an old->new index map."""
    new_index = np.full(tree.capacity, -1, dtype=np.int64)
    parts = []
    frontier = np.array([tree.root], dtype=np.int64)
    assigned = 0
    while frontier.size:
        parts.append(frontier)
        new_index[frontier] = np.arange(assigned, assigned + frontier.size)
        assigned += frontier.size
        internal = frontier[tree._leaf[frontier] == 0]
        frontier = tree._child[internal].reshape(-1)
    return np.concatenate(parts), new_index


def save_tree(tree: SparseOctree, path) -> None:
    """Write the tree in its binary container, nodes compacted in BFS order."""
    order, new_index = _level_order(tree)
    lo = tree.center - tree.half_extent
    hi = tree.center + tree.half_extent
    parts = [TREE_MAGIC,
             _HEADER.pack(TREE_VERSION, tree.basis_count, tree.max_depth,
                          *lo, *hi, order.size)]
    payload = np.concatenate([tree.sigma[:, None], tree.sh], axis=1)
    payload = np.ascontiguousarray(payload, dtype="<f4")
    is_leaf = tree._leaf
    child = tree._child
    for node in order:
        if is_leaf[node]:
            parts.append(b"\x01")
            parts.append(payload[node].tobytes())
        else:
            parts.append(b"\x00")
            parts.append(_INTERNAL.pack(*new_index[child[node]]))
    blob = b"".join(parts)
    Path(path).write_bytes(blob + _CRC.pack(zlib.crc32(blob)))


def load_tree(path) -> SparseOctree:
    """Read a tree file back, verifying checksum, header, and structure.

    The checksum is checked before anything is interpreted, so truncation
    and byte corruption surface as ChecksumError rather than downstream
    parse failures.
    """
    path = Path(path)
    if not path.exists():
        raise TreeFileError(f"no such tree file: {path}")
    data = path.read_bytes()
    if len(data) < 4 + _HEADER.size + _CRC.size:
        raise ChecksumError(f"{path.name}: file too short to be a tree")
    (stored_crc,) = _CRC.unpack_from(data, len(data) - _CRC.size)
    if zlib.crc32(data[:-_CRC.size]) != stored_crc:
        raise ChecksumError(f"{path.name}: checksum mismatch")
    if data[:4] != TREE_MAGIC:
        raise BadMagicError(f"{path.name}: bad magic {data[:4]!r}")
    fields = _HEADER.unpack_from(data, 4)
    version, basis_count, max_depth = fields[0], fields[1], fields[2]
    bounds = np.array(fields[3:9])
    node_count = fields[9]
    if version != TREE_VERSION:
        raise BadVersionError(f"{path.name}: unsupported version {version}")
    if basis_count not in VALID_BASIS_COUNTS:
        raise StructureError(f"{path.name}: invalid basis count {basis_count}")
    lo, hi = bounds[:3], bounds[3:]
    extent = hi - lo
    if not np.all(extent > 0):
        raise StructureError(f"{path.name}: empty bounds")
    if not np.allclose(extent, extent[0], rtol=1e-9, atol=0.0):
        raise StructureError(f"{path.name}: bounds are not a cube")
    if node_count < 1:
        raise StructureError(f"{path.name}: no nodes")

    body = len(data) - 4 - _HEADER.size - _CRC.size
    leaf_bytes = 1 + 4 * (1 + 3 * basis_count)
    if node_count * min(leaf_bytes, 1 + _INTERNAL.size) > body:
        raise StructureError(f"{path.name}: node count exceeds file size")

    sh_width = 3 * basis_count
    kids = np.full((node_count, 8), -1, dtype=np.int64)
    tags = np.zeros(node_count, dtype=np.uint8)
    sigmas = np.zeros(node_count, dtype=np.float32)
    shs = np.zeros((node_count, sh_width), dtype=np.float32)
    offset = 4 + _HEADER.size
    end = len(data) - _CRC.size
    for i in range(node_count):
        if offset >= end:
            raise StructureError(f"{path.name}: record stream truncated")
        tag = data[offset]
        offset += 1
        if tag == 0:
            if offset + _INTERNAL.size > end:
                raise StructureError(f"{path.name}: record stream truncated")
            children = _INTERNAL.unpack_from(data, offset)
            offset += _INTERNAL.size
            for c in children:
                if c == 0 or c >= node_count:
                    raise StructureError(f"{path.name}: child index {c} "
                                         f"out of range")
            kids[i] = children
        elif tag == 1:
            if offset + leaf_bytes - 1 > end:
                raise StructureError(f"{path.name}: record stream truncated")
            vals = np.frombuffer(data, dtype="<f4", count=1 + sh_width,
                                 offset=offset)
            offset += leaf_bytes - 1
            tags[i] = 1
            sigmas[i] = vals[0]
            shs[i] = vals[1:]
        else:
            raise StructureError(f"{path.name}: unknown record tag {tag}")
    if offset != end:
        raise StructureError(f"{path.name}: trailing bytes after records")

    if not np.all(np.isfinite(sigmas)) or np.any(sigmas < 0):
        raise StructureError(f"{path.name}: leaf density out of range")
    if not np.all(np.isfinite(shs)):
        raise StructureError(f"{path.name}: non-finite SH coefficient")

    refs = np.zeros(node_count, dtype=np.int64)
    internal_rows = np.nonzero(tags == 0)[0]
    if internal_rows.size:
        np.add.at(refs, kids[internal_rows].reshape(-1), 1)
    if np.any(refs[1:] != 1):
        raise StructureError(f"{path.name}: nodes must be referenced exactly "
                             f"once")

    center = (lo + hi) / 2.0
    half = float(extent[0] / 2.0)
    tree = SparseOctree(center, half, basis_count, max_depth=max_depth,
                        capacity=int(node_count))
    pool = np.full(node_count, -1, dtype=np.int64)
    pool[0] = tree.root
    queue = deque([(0, 0)])
    visited = 1
    while queue:
        fid, depth = queue.popleft()
        if tags[fid] == 1:
            continue
        if depth >= max_depth:
            raise StructureError(f"{path.name}: node deeper than max_depth")
        pool_kids = tree.split_leaf(int(pool[fid]))
        for slot, child_fid in enumerate(kids[fid]):
            pool[child_fid] = pool_kids[slot]
            queue.append((int(child_fid), depth + 1))
            visited += 1
    if visited != node_count:
        raise StructureError(f"{path.name}: unreachable nodes present")

    leaf_rows = np.nonzero(tags == 1)[0]
    tree.sigma[pool[leaf_rows]] = sigmas[leaf_rows]
    tree.sh[pool[leaf_rows]] = shs[leaf_rows]
    return tree


# ---------------------------------------------------------------------------
# SH palette compression

def compress_tree(tree: SparseOctree, palette_size: int):
    """Median-cut quantization of leaf SH vectors; densities are untouched.

    Boxes split along their largest-range dimension at the count-weighted
    median, never separating equal vectors, largest box first. Returns
    (new tree, codebook) with codebook rows ordered by first leaf id.
    """
    if palette_size < 1:
        raise ConfigError(f"palette_size must be >= 1, got {palette_size}")
    out = copy.deepcopy(tree)
    leaves = out.leaf_ids()
    points = out.sh[leaves].astype(np.float64)
    uniq, inverse, counts = np.unique(points, axis=0, return_inverse=True,
                                      return_counts=True)
    inverse = inverse.reshape(-1)
    target = min(int(palette_size), int(leaves.size), int(uniq.shape[0]))

    def box_entry(idx: np.ndarray):
        sub = uniq[idx]
        ranges = sub.max(axis=0) - sub.min(axis=0)
        dim = int(np.argmax(ranges))
        weight = int(counts[idx].sum())
        return (-float(ranges[dim]), -weight, int(idx.min()), dim, idx)

    heap = [box_entry(np.arange(uniq.shape[0], dtype=np.int64))]
    while len(heap) < target:
        if -heap[0][0] <= 0.0:
            break
        _, _, _, dim, idx = heapq.heappop(heap)
        order = np.argsort(uniq[idx, dim], kind="stable")
        cum = np.cumsum(counts[idx[order]])
        cut = int(np.searchsorted(cum, cum[-1] / 2.0))
        cut = min(max(cut, 0), idx.size - 2)
        heapq.heappush(heap, box_entry(idx[order[:cut + 1]]))
        heapq.heappush(heap, box_entry(idx[order[cut + 1:]]))

    boxes = sorted((entry[4] for entry in heap), key=lambda b: int(b.min()))
    codebook = np.empty((len(boxes), points.shape[1]), dtype=np.float32)
    row_of = np.empty(uniq.shape[0], dtype=np.int64)
    for row, idx in enumerate(boxes):
        centroid = np.average(uniq[idx], axis=0, weights=counts[idx])
        codebook[row] = centroid.astype(np.float32)
        row_of[idx] = row
    out.sh[leaves] = codebook[row_of[inverse]]
    return out, codebook


def palette_index_bytes(palette_size: int) -> int:
    """Per-leaf bytes needed to index a palette of the given size."""
    if palette_size <= 256:
        return 1
    if palette_size <= 65536:
        return 2
    return 4


def sh_storage_bytes(tree: SparseOctree, codebook=None) -> int:
    """SH payload size on disk: raw coefficients, or palette plus indices."""
    leaf_count = int(tree.leaf_count)
    if codebook is None:
        return leaf_count * 3 * tree.basis_count * 4
    return int(codebook.size) * 4 + leaf_count * palette_index_bytes(
        codebook.shape[0])
