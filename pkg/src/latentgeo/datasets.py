"""Synthetic pendulum images, a simulated 6-joint arm tracing a circle, and MNIST loading."""
from __future__ import annotations

import csv
import dataclasses
import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import FileFormatError


@dataclass
class Dataset:
    samples: np.ndarray  # (count, dim)
    annotations: dict[str, np.ndarray]  # column -> (count,) values
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2:
            raise ValueError("samples must be a (count, dim) array")
        if np.isnan(self.samples).any():
            raise ValueError("samples contain NaN")
        for k, v in self.annotations.items():
            if len(v) != len(self.samples):
                raise ValueError(f"annotation {k!r} has {len(v)} entries for {len(self)} samples")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.samples[idx], {k: np.asarray(v)[idx] for k, v in self.annotations.items()},
                       dict(self.meta))


# ---------------------------------------------------------------------------
# pendulum

@dataclass
class PendulumConfig:
    image_size: int = 16
    sample_count: int = 15000
    noise_std: float = 0.05
    angle_min: float = 0.0
    angle_max: float = 360.0
    rod_length: float = 6.0  # pixels, from the image centre
    rod_width: float = 2.0
    rng_seed: int = 0


def render_pendulum(angles_deg, image_size: int = 16, rod_length: float = 6.0,
                    rod_width: float = 2.0) -> np.ndarray:
    """Noise-free pendulum images, shape ``(len(angles), image_size**2)``.

    The rod is a capsule hanging from the image centre; angle 0 points down
    and angles grow counter-clockwise on screen.  Pixel coverage is
    ``clip(width/2 + 0.5 - distance_to_axis, 0, 1)``.
    """
    ang = np.deg2rad(np.atleast_1d(np.asarray(angles_deg, dtype=np.float64)))
    c = (image_size - 1) / 2.0
    rows, cols = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    px = (cols - c).reshape(1, -1)
    py = (rows - c).reshape(1, -1)
    dx = (rod_length * np.sin(ang))[:, None]
    dy = (rod_length * np.cos(ang))[:, None]
    s = np.clip((px * dx + py * dy) / (rod_length * rod_length), 0.0, 1.0)
    dist = np.hypot(px - s * dx, py - s * dy)
    return np.clip(rod_width / 2.0 + 0.5 - dist, 0.0, 1.0)


def pendulum_generate(cfg: PendulumConfig = PendulumConfig()) -> Dataset:
    rng = np.random.default_rng(cfg.rng_seed)
    angles = rng.uniform(cfg.angle_min, cfg.angle_max, size=cfg.sample_count)
    clean = render_pendulum(angles, cfg.image_size, cfg.rod_length, cfg.rod_width)
    noisy = np.clip(clean + cfg.noise_std * rng.standard_normal(clean.shape), 0.0, 1.0)
    return Dataset(noisy, {"angle": angles},
                   {"kind": "pendulum", "config": dataclasses.asdict(cfg)})


def angle_difference(a, b):
    """Absolute angular difference in degrees, folded into [0, 180]."""
    d = np.abs(np.asarray(a) - np.asarray(b)) % 360.0
    return np.minimum(d, 360.0 - d)


def pendulum_angle(images, image_size: int = 16, rod_length: float = 6.0,
                   rod_width: float = 2.0, resolution: float = 0.25) -> np.ndarray:
    """Recover angles by nearest template among noise-free renders."""
    grid = np.arange(0.0, 360.0, resolution)
    templates = render_pendulum(grid, image_size, rod_length, rod_width)
    X = np.atleast_2d(images)
    d2 = (np.sum(X * X, axis=1)[:, None] - 2 * X @ templates.T
          + np.sum(templates * templates, axis=1)[None, :])
    return grid[np.argmin(d2, axis=1)]


# ---------------------------------------------------------------------------
# robot arm

def _skew(v) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


@dataclass
class SerialChain:
    """Revolute chain: joint ``i`` rotates about ``axes[i]`` (in the frame of
    the previous link) and is followed by the translation ``links[i]``.

    Stored joint values are ``kinematic angle + zero_offset``.
    """
    axes: np.ndarray
    links: np.ndarray
    zero_offset: np.ndarray

    def __post_init__(self):
        self.axes = np.asarray(self.axes, dtype=np.float64)
        self.links = np.asarray(self.links, dtype=np.float64)
        self.zero_offset = np.asarray(self.zero_offset, dtype=np.float64)
        self._K = [_skew(a) for a in self.axes]
        self._K2 = [k @ k for k in self._K]

    @property
    def dof(self) -> int:
        return len(self.axes)

    def frames(self, q):
        """Joint origins, joint axes (world frame) and end-effector position."""
        R = np.eye(3)
        p = np.zeros(3)
        origins = np.empty((self.dof, 3))
        axes_w = np.empty((self.dof, 3))
        ang = np.asarray(q, dtype=np.float64) - self.zero_offset
        c, s = np.cos(ang), np.sin(ang)
        for i in range(self.dof):
            origins[i] = p
            axes_w[i] = R @ self.axes[i]
            # Rodrigues
            R = R @ (np.eye(3) + s[i] * self._K[i] + (1.0 - c[i]) * self._K2[i])
            p = p + R @ self.links[i]
        return origins, axes_w, p

    def fk(self, q) -> np.ndarray:
        return self.frames(q)[2]

    def position_jacobian(self, q) -> np.ndarray:
        origins, axes_w, p = self.frames(q)
        return np.cross(axes_w, p - origins).T


def default_chain() -> SerialChain:
    """Six revolute joints, links 0.25 + 0.35 + 0.30 + 0.15 + 0.10 + 0.05 = 1.2 m.

    Base yaw, shoulder pitch, elbow pitch, forearm yaw, wrist pitch, wrist yaw.
    Zero offsets of pi keep every joint value along the task circle positive.
    """
    z, y = np.array([0.0, 0.0, 1.0]), np.array([0.0, 1.0, 0.0])
    axes = np.array([z, y, y, z, y, z])
    links = np.array([
        [0.0, 0.0, 0.25],
        [0.35, 0.0, 0.0],
        [0.30, 0.0, 0.0],
        [0.15, 0.0, 0.0],
        [0.10, 0.0, 0.0],
        [0.05, 0.0, 0.0],
    ])
    return SerialChain(axes, links, np.full(6, np.pi))


class IKError(RuntimeError):
    pass


def ik_solve(chain: SerialChain, target, q0, q_rest, damping: float = 1e-3,
             max_iters: int = 200, tol: float = 1e-6, nullspace_gain: float = 0.8):
    """Damped least squares with a secondary pull toward ``q_rest`` in the null space.

    The secondary term makes the solution a function of the target (the
    rest-closest configuration), so a closed task path yields a closed joint
    path.  Raises :class:`IKError` if the residual stays above ``tol``.
    """
    q = np.array(q0, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    lam2 = damping * damping
    err = np.inf
    for _ in range(max_iters):
        origins, axes_w, p = chain.frames(q)
        J = np.cross(axes_w, p - origins).T
        e = target - p
        err = np.linalg.norm(e)
        JJt = J @ J.T
        dq_task = J.T @ np.linalg.solve(JJt + lam2 * np.eye(3), e)
        # exact projector: the damped inverse would leak the secondary pull into the task
        pull = nullspace_gain * (q_rest - q)
        dq_null = pull - J.T @ np.linalg.solve(JJt, J @ pull)
        # cap step size far from the solution
        norm = np.linalg.norm(dq_task)
        if norm > 0.2:
            dq_task *= 0.2 / norm
        q = q + dq_task + dq_null
        if err < 1e-10 and np.linalg.norm(dq_null) < 1e-9:
            break
    err = np.linalg.norm(target - chain.fk(q))
    if err > tol:
        raise IKError(f"IK residual {err:.3e} m exceeds {tol:.0e} m for target {target}")
    return q, err


@dataclass
class RobotArmConfig:
    dof: int = 6
    timestep_count: int = 6284
    radius: float = 0.4
    center: tuple = (0.5, 0.0, 0.1)
    start_phase: float = np.pi / 2
    noise_std: float = 0.03
    validation_count: int = 150
    rng_seed: int = 0
    damping: float = 1e-3
    ik_iters: int = 200


# Kinematic angles of a comfortable elbow-up posture above the task circle.
REST_POSTURE = np.array([0.0, 0.4, 1.2, 0.0, 0.6, 0.0])


def circle_targets(cfg: RobotArmConfig, count: int) -> np.ndarray:
    phi = cfg.start_phase + 2.0 * np.pi * np.arange(count) / count
    c = np.asarray(cfg.center, dtype=np.float64)
    return c + cfg.radius * np.stack([np.cos(phi), np.sin(phi), np.zeros_like(phi)], axis=1)


def track_circle(cfg: RobotArmConfig, count: int, chain: SerialChain | None = None):
    """Noise-free joint trajectory along the circle; returns ``(Q, targets, residuals)``."""
    chain = chain or default_chain()
    if chain.dof != cfg.dof:
        raise ValueError(f"chain has {chain.dof} joints, config asks for {cfg.dof}")
    q_rest = REST_POSTURE + chain.zero_offset
    targets = circle_targets(cfg, count)
    reach = np.sum(np.linalg.norm(chain.links[1:], axis=1))
    shoulder = chain.links[0]
    if np.max(np.linalg.norm(targets - shoulder, axis=1)) >= reach:
        raise IKError("circle leaves the reachable workspace")
    Q = np.empty((count, chain.dof))
    res = np.empty(count)
    q = q_rest.copy()
    for k, p in enumerate(targets):
        # the first target may be far from the rest posture
        iters = cfg.ik_iters if k else max(cfg.ik_iters, 1000)
        q, res[k] = ik_solve(chain, p, q, q_rest, cfg.damping, iters)
        Q[k] = q
    return Q, targets, res


def robot_generate(cfg: RobotArmConfig = RobotArmConfig()) -> tuple[Dataset, Dataset]:
    chain = default_chain()
    ss = np.random.SeedSequence(cfg.rng_seed)
    train_seed, val_seed = ss.spawn(2)
    out = []
    for count, seed, split in ((cfg.timestep_count, train_seed, "train"),
                               (cfg.validation_count, val_seed, "validation")):
        Q, targets, res = track_circle(cfg, count, chain)
        rng = np.random.default_rng(seed)
        noisy = Q + cfg.noise_std * rng.standard_normal(Q.shape)
        out.append(Dataset(
            noisy,
            {"timestep": np.arange(count), "x": targets[:, 0], "y": targets[:, 1],
             "z": targets[:, 2]},
            {"kind": "robot", "split": split, "config": dataclasses.asdict(cfg),
             "max_ik_residual": float(res.max())},
        ))
    return out[0], out[1]


# ---------------------------------------------------------------------------
# MNIST

def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path: Path, expect_dims: int) -> np.ndarray:
    with _open(path) as fh:
        data = fh.read()
    if len(data) < 4:
        raise FileFormatError(f"{path}: truncated IDX header")
    zero, dtype_code, ndim = struct.unpack(">HBB", data[:4])
    if zero != 0 or dtype_code != 0x08 or ndim != expect_dims:
        raise FileFormatError(f"{path}: not an unsigned-byte IDX file with {expect_dims} dims")
    shape = struct.unpack(">" + "I" * ndim, data[4:4 + 4 * ndim])
    payload = data[4 + 4 * ndim:]
    n = int(np.prod(shape))
    if len(payload) != n:
        raise FileFormatError(f"{path}: header declares {n} bytes, payload has {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(shape)


def mnist_load(path, limit: int | None = None, labels_path=None) -> Dataset:
    """Binarized MNIST from either a text split or raw IDX files.

    Text: one image per line, 784 values in {0, 1} (an optional 785th
    column is taken as the label).  IDX: ``*-images-idx3-ubyte[.gz]``,
    thresholded at 0.5; labels are read from ``labels_path`` or the
    sibling ``*-labels-idx1-ubyte`` file when present.
    """
    path = Path(path)
    head = _open(path).read(4)
    if len(head) == 4 and head[:3] == b"\x00\x00\x08":
        images = _read_idx(path, 3)
        if images.shape[1:] != (28, 28):
            raise FileFormatError(f"{path}: expected 28x28 images, got {images.shape[1:]}")
        count = images.shape[0] if limit is None else min(limit, images.shape[0])
        X = (images[:count].reshape(count, 784) / 255.0 > 0.5).astype(np.float64)
        if labels_path is None:
            guess = path.with_name(path.name.replace("images-idx3", "labels-idx1"))
            labels_path = guess if guess != path and guess.exists() else None
        ann = {}
        if labels_path is not None:
            lab = _read_idx(Path(labels_path), 1)
            if lab.shape[0] != images.shape[0]:
                raise FileFormatError("label count does not match image count")
            ann["label"] = lab[:count].astype(np.int64)
        return Dataset(X, ann, {"kind": "mnist", "source": "idx-threshold-0.5", "path": str(path)})

    rows, labels = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if limit is not None and len(rows) >= limit:
                break
            parts = line.split()
            if not parts:
                continue
            if len(parts) not in (784, 785):
                raise FileFormatError(f"{path}:{lineno}: expected 784 values, got {len(parts)}")
            vals = np.array(parts[:784], dtype=np.float64)
            if not np.all((vals == 0.0) | (vals == 1.0)):
                raise FileFormatError(f"{path}:{lineno}: values must be 0 or 1")
            rows.append(vals)
            if len(parts) == 785:
                labels.append(int(float(parts[784])))
    if not rows:
        raise FileFormatError(f"{path}: no images")
    ann = {}
    if labels:
        if len(labels) != len(rows):
            raise FileFormatError(f"{path}: label column present on only some rows")
        ann["label"] = np.array(labels, dtype=np.int64)
    return Dataset(np.stack(rows), ann, {"kind": "mnist", "source": "text-binarized",
                                         "path": str(path)})


# ---------------------------------------------------------------------------
# dataset files: 8-byte little-endian header length, JSON header, float64
# row-major payload; annotations in an adjacent CSV.

_MAGIC = b"LGDS"


def save_dataset(ds: Dataset, path) -> list[Path]:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"count": len(ds), "dim": ds.dim, "dtype": "float64", "byteorder": "little",
              "annotations": list(ds.annotations), "meta": ds.meta,
              "seed": ds.meta.get("config", {}).get("rng_seed")}
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<Q", len(raw)) + raw)
        fh.write(ds.samples.astype("<f8").tobytes(order="C"))
    ann_path = path.with_suffix(".annotations.csv")
    with open(ann_path, "w", newline="") as fh:
        w = csv.writer(fh)
        cols = list(ds.annotations)
        w.writerow(cols)
        for i in range(len(ds)):
            w.writerow([repr(float(ds.annotations[c][i])) if np.issubdtype(
                np.asarray(ds.annotations[c]).dtype, np.floating) else int(ds.annotations[c][i])
                for c in cols])
    return [path, ann_path]


def load_dataset(path) -> Dataset:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != _MAGIC or len(data) < 12:
        raise FileFormatError(f"{path}: not a dataset file")
    (hlen,) = struct.unpack("<Q", data[4:12])
    header = json.loads(data[12:12 + hlen])
    count, dim = header["count"], header["dim"]
    payload = data[12 + hlen:]
    if len(payload) != 8 * count * dim:
        raise FileFormatError(f"{path}: header declares {count}x{dim} values, payload has "
                         f"{len(payload) // 8}")
    X = np.frombuffer(payload, "<f8").reshape(count, dim).copy()
    ann = {}
    ann_path = path.with_suffix(".annotations.csv")
    if ann_path.exists():
        with open(ann_path, newline="") as fh:
            rows = list(csv.reader(fh))
        cols = rows[0] if rows else []
        body = rows[1:]
        for j, c in enumerate(cols):
            vals = [r[j] for r in body]
            ann[c] = (np.array(vals, dtype=np.int64) if all(v.lstrip("-").isdigit() for v in vals)
                      else np.array(vals, dtype=np.float64))
    return Dataset(X, ann, header.get("meta", {}))
