"""Point clouds, synthetic shapes, normalization, file I/O and batching."""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

SHAPES = ("sphere", "cube", "torus", "cylinder")

TORUS_MAJOR = 1.0
TORUS_MINOR = 0.3
CYLINDER_RADIUS = 0.5
CYLINDER_HALF_HEIGHT = 1.0

# label -> RGB for colored PLY export
PALETTE = np.array([
    [230, 25, 75], [60, 180, 75], [0, 130, 200], [255, 225, 25],
    [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230],
    [210, 245, 60], [250, 190, 212], [0, 128, 128], [220, 190, 255],
    [170, 110, 40], [128, 0, 0], [170, 255, 195], [0, 0, 128],
], dtype=np.uint8)


class FormatError(ValueError):
    """A point-cloud file is malformed, truncated or unsupported."""


@dataclass
class PointCloud:
    points: np.ndarray
    labels: np.ndarray | None = None
    class_id: int | None = None

    def __post_init__(self):
        pts = np.asarray(self.points)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValueError(f"point cloud must be n x 3 with n >= 1, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud has non-finite coordinates")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (pts.shape[0],):
                raise ValueError(f"labels shape {self.labels.shape} does not match {pts.shape[0]} points")
        self.points = pts

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class NormRecord:
    center: np.ndarray
    scale: float

    def invert(self, points: np.ndarray) -> np.ndarray:
        return points * self.scale + self.center


@dataclass
class Dataset:
    clouds: list[PointCloud]
    classes: list[str] = field(default_factory=list)
    records: list[NormRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.clouds)

    def __post_init__(self):
        if self.clouds:
            n = len(self.clouds[0])
            if any(len(c) != n for c in self.clouds):
                raise ValueError("all clouds in a dataset must share the point count")

    @property
    def n_points(self) -> int:
        return len(self.clouds[0])

    def points(self) -> np.ndarray:
        return np.stack([c.points for c in self.clouds])

    def class_ids(self) -> np.ndarray:
        return np.array([c.class_id for c in self.clouds], dtype=np.int64)

    def subset(self, idx) -> "Dataset":
        idx = list(idx)
        recs = [self.records[i] for i in idx] if self.records else []
        return Dataset([self.clouds[i] for i in idx], list(self.classes), recs)


def _jitter(rng: np.random.Generator, n: int, sigma: float) -> np.ndarray:
    # Gaussian with std sigma/3 per axis, radially clipped at sigma, so no
    # point ends up further than sigma from the clean surface.
    if sigma <= 0:
        return np.zeros((n, 3))
    d = rng.normal(0.0, sigma / 3.0, size=(n, 3))
    lengths = np.linalg.norm(d, axis=1, keepdims=True)
    return d * np.minimum(1.0, sigma / np.maximum(lengths, 1e-300))


def _sphere(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _cube(rng, n):
    face = rng.integers(0, 6, size=n)
    pts = rng.uniform(-1.0, 1.0, size=(n, 3))
    axis = face // 2
    pts[np.arange(n), axis] = np.where(face % 2 == 0, -1.0, 1.0)
    return pts


def _torus(rng, n):
    R, r = TORUS_MAJOR, TORUS_MINOR
    out = np.empty((0, 2))
    # area element is proportional to R + r cos(phi): rejection on phi
    while len(out) < n:
        phi = rng.uniform(0.0, 2 * math.pi, size=2 * n)
        keep = rng.uniform(0.0, R + r, size=2 * n) < R + r * np.cos(phi)
        theta = rng.uniform(0.0, 2 * math.pi, size=2 * n)
        out = np.concatenate([out, np.stack([theta[keep], phi[keep]], axis=1)])
    theta, phi = out[:n, 0], out[:n, 1]
    rho = R + r * np.cos(phi)
    return np.stack([rho * np.cos(theta), rho * np.sin(theta), r * np.sin(phi)], axis=1)


def _cylinder(rng, n):
    r, h = CYLINDER_RADIUS, CYLINDER_HALF_HEIGHT
    side = 2 * math.pi * r * 2 * h
    cap = math.pi * r * r
    part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0.0, 2 * math.pi, size=n)
    rad = np.where(part == 0, r, r * np.sqrt(rng.uniform(0.0, 1.0, size=n)))
    z = np.where(part == 0, rng.uniform(-h, h, size=n), np.where(part == 1, h, -h))
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


_SAMPLERS = {"sphere": _sphere, "cube": _cube, "torus": _torus, "cylinder": _cylinder}


def sample_shape(kind: str, n: int, seed: int, noise_sigma: float = 0.0) -> PointCloud:
    """Uniform surface samples of a canonical shape plus bounded jitter.

    Shapes: unit sphere, cube of side 2, torus (R=1, r=0.3), capped cylinder
    (radius 0.5, height 2). ``noise_sigma`` bounds the displacement of every
    point from the surface.
    """
    if kind not in _SAMPLERS:
        raise ValueError(f"unknown shape kind {kind!r}; expected one of {SHAPES}")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    pts = _SAMPLERS[kind](rng, n) + _jitter(rng, n, noise_sigma)
    return PointCloud(pts, class_id=SHAPES.index(kind))


def surface_residual(kind: str, points: np.ndarray) -> np.ndarray:
    """Distance from each point to the clean surface of ``kind``."""
    p = np.asarray(points, dtype=np.float64)
    if kind == "sphere":
        return np.abs(np.linalg.norm(p, axis=1) - 1.0)
    if kind == "cube":
        a = np.abs(p)
        outside = np.linalg.norm(np.maximum(a - 1.0, 0.0), axis=1)
        inside = np.min(1.0 - a, axis=1)
        return np.where(np.all(a <= 1.0, axis=1), inside, outside)
    if kind == "torus":
        rho = np.hypot(p[:, 0], p[:, 1])
        return np.abs(np.hypot(rho - TORUS_MAJOR, p[:, 2]) - TORUS_MINOR)
    if kind == "cylinder":
        r, h = CYLINDER_RADIUS, CYLINDER_HALF_HEIGHT
        rho = np.hypot(p[:, 0], p[:, 1])
        dr, dz = rho - r, np.abs(p[:, 2]) - h
        outside = np.hypot(np.maximum(dr, 0.0), np.maximum(dz, 0.0))
        inside = np.minimum(-dr, -dz)
        return np.where((dr <= 0) & (dz <= 0), inside, outside)
    raise ValueError(f"unknown shape kind {kind!r}")


def normalize_unit_sphere(cloud: PointCloud) -> tuple[PointCloud, NormRecord]:
    """Center at the centroid and scale so the farthest point has norm 1."""
    center = cloud.points.mean(axis=0)
    centered = cloud.points - center
    scale = float(np.linalg.norm(centered, axis=1).max())
    if scale == 0.0:
        scale = 1.0
    out = PointCloud(centered / scale, cloud.labels, cloud.class_id)
    return out, NormRecord(center, scale)


def make_synthetic_dataset(kinds: Sequence[str], per_class: int, n_points: int,
                           seed: int = 0, noise_sigma: float = 0.02,
                           normalize: bool = True) -> Dataset:
    clouds, records = [], []
    for k, kind in enumerate(kinds):
        for i in range(per_class):
            c = sample_shape(kind, n_points, seed=hash_seed(seed, k, i), noise_sigma=noise_sigma)
            c.class_id = k
            if normalize:
                c, rec = normalize_unit_sphere(c)
                records.append(rec)
            clouds.append(c)
    return Dataset(clouds, list(kinds), records)


def hash_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def split_dataset(ds: Dataset, train_fraction: float = 0.8, seed: int = 0) -> tuple[Dataset, Dataset]:
    perm = np.random.default_rng(seed).permutation(len(ds))
    cut = int(round(train_fraction * len(ds)))
    return ds.subset(sorted(perm[:cut])), ds.subset(sorted(perm[cut:]))


# ---------------------------------------------------------------- PLY (ascii)

def write_ply(path, cloud: PointCloud) -> None:
    pts = np.asarray(cloud.points, dtype=np.float32)
    colored = cloud.labels is not None
    lines = ["ply", "format ascii 1.0", f"element vertex {len(pts)}",
             "property float x", "property float y", "property float z"]
    if colored:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append("end_header")
    if colored:
        rgb = PALETTE[np.asarray(cloud.labels) % len(PALETTE)]
        body = [_f32_line(p, c) for p, c in zip(pts, rgb)]
    else:
        body = [_f32_line(p) for p in pts]
    Path(path).write_text("\n".join(lines + body) + "\n", encoding="ascii")


def _f32_line(p, rgb=None) -> str:
    s = " ".join(np.format_float_positional(v, unique=True, trim="-") for v in p)
    if rgb is not None:
        s += " " + " ".join(str(int(c)) for c in rgb)
    return s


_PLY_SCALARS = {"float", "float32", "double", "float64", "uchar", "uint8", "int", "int32", "uint", "short", "ushort", "char"}


def read_ply(path) -> PointCloud:
    """Read an ASCII PLY with a vertex element (x, y, z, optional red/green/blue)."""
    text = Path(path).read_text(encoding="ascii", errors="replace").splitlines()
    if not text or text[0].strip() != "ply":
        raise FormatError(f"{path}:1: missing 'ply' magic")
    n_vertex = None
    props: list[str] = []
    header_end = None
    for lineno, raw in enumerate(text[1:], start=2):
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if tok[1:2] != ["ascii"]:
                raise FormatError(f"{path}:{lineno}: only ascii PLY is supported, got {' '.join(tok[1:])}")
        elif tok[0] == "element":
            if len(tok) != 3 or tok[1] != "vertex":
                raise FormatError(f"{path}:{lineno}: unsupported element {' '.join(tok[1:])!r}")
            n_vertex = int(tok[2])
        elif tok[0] == "property":
            if n_vertex is None or len(tok) != 3 or tok[1] not in _PLY_SCALARS:
                raise FormatError(f"{path}:{lineno}: unsupported property {' '.join(tok[1:])!r}")
            props.append(tok[2])
        elif tok[0] == "end_header":
            header_end = lineno
            break
        else:
            raise FormatError(f"{path}:{lineno}: malformed header line {raw!r}")
    if header_end is None:
        raise FormatError(f"{path}: header has no end_header")
    if n_vertex is None:
        raise FormatError(f"{path}: header declares no vertex element")
    if props[:3] != ["x", "y", "z"]:
        raise FormatError(f"{path}: vertex properties must start with x y z, got {props}")
    body = [ln for ln in text[header_end:] if ln.strip()]
    if len(body) != n_vertex:
        raise FormatError(f"{path}: vertex count mismatch: header expects {n_vertex}, found {len(body)}")
    rows = []
    for lineno, ln in enumerate(body, start=header_end + 1):
        vals = ln.split()
        if len(vals) != len(props):
            raise FormatError(f"{path}:{lineno}: expected {len(props)} values, got {len(vals)}")
        rows.append(vals)
    arr = np.array(rows, dtype=object)
    pts = arr[:, :3].astype(np.float32)
    labels = None
    if all(c in props for c in ("red", "green", "blue")):
        cols = [props.index(c) for c in ("red", "green", "blue")]
        rgb = arr[:, cols].astype(np.int64)
        labels = _labels_from_colors(rgb)
    return PointCloud(pts, labels)


def _labels_from_colors(rgb: np.ndarray) -> np.ndarray | None:
    match = np.all(rgb[:, None, :] == PALETTE[None, :, :].astype(np.int64), axis=2)
    if not np.all(match.any(axis=1)):
        return None
    return np.argmax(match, axis=1)


# ---------------------------------------------------------------- PCB container

PCB_MAGIC = b"PCB1"
PCB_VERSION = 1
_FLAG_LABELS = 1


def write_pcb(path, clouds: Sequence[PointCloud]) -> None:
    """Write clouds sharing one point count into a checksummed PCB file."""
    if not clouds:
        raise ValueError("cannot write an empty PCB")
    n = len(clouds[0])
    if any(len(c) != n for c in clouds):
        raise ValueError("all clouds in a PCB file must have the same point count")
    has_labels = all(c.labels is not None for c in clouds)
    parts = [PCB_MAGIC, struct.pack("<HIIH", PCB_VERSION, len(clouds), n, _FLAG_LABELS if has_labels else 0)]
    for c in clouds:
        parts.append(struct.pack("<H", c.class_id if c.class_id is not None else 0xFFFF))
        parts.append(np.ascontiguousarray(c.points, dtype="<f4").tobytes())
        if has_labels:
            parts.append(np.asarray(c.labels, dtype="<u2").tobytes())
    payload = b"".join(parts)
    Path(path).write_bytes(payload + struct.pack("<I", zlib.crc32(payload)))


def read_pcb(path) -> list[PointCloud]:
    blob = Path(path).read_bytes()
    head = 4 + struct.calcsize("<HIIH")
    if len(blob) < head + 4 or blob[:4] != PCB_MAGIC:
        raise FormatError(f"{path}: not a PCB file")
    payload, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    version, count, n, flags = struct.unpack("<HIIH", blob[4:head])
    if version != PCB_VERSION:
        raise FormatError(f"{path}: unsupported PCB version {version}")
    per = 2 + 12 * n + (2 * n if flags & _FLAG_LABELS else 0)
    if len(payload) != head + count * per:
        raise FormatError(f"{path}: truncated payload: expected {head + count * per} bytes, found {len(payload)}")
    if zlib.crc32(payload) != crc:
        raise FormatError(f"{path}: CRC32 mismatch")
    out, off = [], head
    for _ in range(count):
        (cid,) = struct.unpack("<H", payload[off:off + 2])
        off += 2
        pts = np.frombuffer(payload, dtype="<f4", count=3 * n, offset=off).reshape(n, 3).astype(np.float32)
        off += 12 * n
        labels = None
        if flags & _FLAG_LABELS:
            labels = np.frombuffer(payload, dtype="<u2", count=n, offset=off).astype(np.int64)
            off += 2 * n
        out.append(PointCloud(pts, labels, None if cid == 0xFFFF else cid))
    return out


def read_cloud(path, fmt: str | None = None) -> list[PointCloud]:
    """Read a PLY (one cloud) or PCB (many clouds) file; format from suffix by default."""
    fmt = fmt or Path(path).suffix.lstrip(".").lower()
    if fmt == "ply":
        return [read_ply(path)]
    if fmt == "pcb":
        return read_pcb(path)
    raise FormatError(f"unknown point-cloud format {fmt!r}")


def write_cloud(path, clouds: PointCloud | Sequence[PointCloud], fmt: str | None = None) -> None:
    fmt = fmt or Path(path).suffix.lstrip(".").lower()
    if isinstance(clouds, PointCloud):
        clouds = [clouds]
    if fmt == "ply":
        if len(clouds) != 1:
            raise ValueError("a PLY file holds exactly one cloud")
        write_ply(path, clouds[0])
    elif fmt == "pcb":
        write_pcb(path, clouds)
    else:
        raise FormatError(f"unknown point-cloud format {fmt!r}")


def load_dataset(source: str, n_points: int = 2048, per_class: int = 200, seed: int = 0,
                 noise_sigma: float = 0.02) -> Dataset:
    """Load ``synth:kind,kind`` or a directory of PCB files (one per class, file stem = class)."""
    if source.startswith("synth:"):
        kinds = [k for k in source[len("synth:"):].split(",") if k]
        return make_synthetic_dataset(kinds, per_class, n_points, seed=seed, noise_sigma=noise_sigma)
    path = Path(source)
    if path.is_file():
        clouds = read_cloud(path)
        return Dataset([_normalized(c) for c in clouds], [])
    files = sorted(path.glob("*.pcb"))
    if not files:
        raise FileNotFoundError(f"no PCB files under {source}")
    clouds, classes = [], []
    for k, f in enumerate(files):
        classes.append(f.stem)
        for c in read_pcb(f):
            c = _normalized(c)
            c.class_id = k
            clouds.append(c)
    return Dataset(clouds, classes)


def _normalized(c: PointCloud) -> PointCloud:
    return normalize_unit_sphere(PointCloud(c.points.astype(np.float64), c.labels, c.class_id))[0]


class Batcher:
    """Seeded, resumable stream of index batches.

    The permutation for epoch ``e`` depends only on ``(seed, e)``, so the
    stream state is just ``(epoch, position)``. ``tail='drop'`` discards an
    incomplete final batch; ``tail='wrap'`` fills it with fresh draws from
    the rest of the dataset.
    """

    def __init__(self, size: int, batch_size: int, seed: int, tail: str = "drop"):
        if batch_size > size:
            raise ValueError(f"batch size {batch_size} exceeds dataset size {size}")
        if tail not in ("drop", "wrap"):
            raise ValueError(f"tail must be 'drop' or 'wrap', got {tail!r}")
        self.size, self.batch_size, self.seed, self.tail = size, batch_size, seed, tail
        self.epoch = 0
        self.position = 0
        self._cache = None

    def _perm(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch]).permutation(self.size)

    def epoch_batches(self, epoch: int) -> list[np.ndarray]:
        perm = self._perm(epoch)
        full = self.size // self.batch_size
        batches = [perm[i * self.batch_size:(i + 1) * self.batch_size] for i in range(full)]
        rest = perm[full * self.batch_size:]
        if len(rest) and self.tail == "wrap":
            others = np.setdiff1d(np.arange(self.size), rest)
            fill = np.random.default_rng([self.seed, epoch, 1]).choice(
                others, size=self.batch_size - len(rest), replace=False)
            batches.append(np.concatenate([rest, fill]))
        return batches

    def _batches(self, epoch: int) -> list[np.ndarray]:
        if self._cache is None or self._cache[0] != epoch:
            self._cache = (epoch, self.epoch_batches(epoch))
        return self._cache[1]

    def next(self) -> np.ndarray:
        batches = self._batches(self.epoch)
        if self.position >= len(batches):
            self.epoch += 1
            self.position = 0
            batches = self._batches(self.epoch)
        b = batches[self.position]
        self.position += 1
        return b

    def __iter__(self) -> Iterator[np.ndarray]:
        while True:
            yield self.next()

    def state(self) -> dict:
        return {"epoch": self.epoch, "position": self.position}

    def load_state(self, state: dict) -> None:
        self.epoch, self.position = int(state["epoch"]), int(state["position"])
