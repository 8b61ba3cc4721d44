"""Procedural motion capture, projection, detector jitter and the dataset file.

Sequences are built by forward kinematics over fixed bone lengths, so
every generated clip has exactly rigid bones and left/right symmetric
limbs. Coordinates are camera-frame millimetres: x right, y down, z away
from the camera.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import camera
from .camera import Intrinsics
from .errors import FormatError, InvalidInputError, VersionError
from .skeleton import SkeletonTopology, bone_lengths, default_topology

ACTIONS = ("walk", "reach", "squat", "turn")

# nominal bone lengths (mm) keyed by child joint name
_NOMINAL_LENGTHS = {
    "right_hip": 132.0, "left_hip": 132.0,
    "right_knee": 442.0, "left_knee": 442.0,
    "right_ankle": 454.0, "left_ankle": 454.0,
    "spine": 233.0, "thorax": 257.0, "neck": 121.0, "head_top": 115.0,
    "left_shoulder": 151.0, "right_shoulder": 151.0,
    "left_elbow": 278.0, "right_elbow": 278.0,
    "left_wrist": 251.0, "right_wrist": 251.0,
}

# rest directions in the body frame (subject faces the camera, so the
# subject's left side is +x)
_REST_DIRECTIONS = {
    "right_hip": (-1, 0, 0), "left_hip": (1, 0, 0),
    "right_knee": (0, 1, 0), "left_knee": (0, 1, 0),
    "right_ankle": (0, 1, 0), "left_ankle": (0, 1, 0),
    "spine": (0, -1, 0), "thorax": (0, -1, 0), "neck": (0, -1, 0), "head_top": (0, -1, 0),
    "left_shoulder": (1, 0, 0), "right_shoulder": (-1, 0, 0),
    "left_elbow": (0, 1, 0), "right_elbow": (0, 1, 0),
    "left_wrist": (0, 1, 0), "right_wrist": (0, 1, 0),
}

# joint-angle amplitude (rad) around the x, y, z axes
_BASE_AMPLITUDE = {
    "right_hip": (0.05, 0.1, 0.05), "left_hip": (0.05, 0.1, 0.05),
    "right_knee": (0.5, 0.15, 0.15), "left_knee": (0.5, 0.15, 0.15),
    "right_ankle": (0.5, 0.0, 0.0), "left_ankle": (0.5, 0.0, 0.0),
    "spine": (0.15, 0.15, 0.1), "thorax": (0.1, 0.1, 0.1),
    "neck": (0.15, 0.2, 0.1), "head_top": (0.15, 0.2, 0.1),
    "left_shoulder": (0.05, 0.1, 0.1), "right_shoulder": (0.05, 0.1, 0.1),
    "left_elbow": (0.7, 0.3, 0.6), "right_elbow": (0.7, 0.3, 0.6),
    "left_wrist": (0.8, 0.0, 0.0), "right_wrist": (0.8, 0.0, 0.0),
}

_ACTION_GAIN = {
    "walk": {"right_knee": 1.4, "left_knee": 1.4, "right_ankle": 1.3, "left_ankle": 1.3,
             "left_elbow": 0.8, "right_elbow": 0.8},
    "reach": {"left_elbow": 1.8, "right_elbow": 1.8, "left_wrist": 1.4, "right_wrist": 1.4,
              "spine": 1.5},
    "squat": {"right_knee": 1.8, "left_knee": 1.8, "right_ankle": 1.8, "left_ankle": 1.8,
              "spine": 1.5},
    "turn": {"spine": 1.5, "thorax": 1.5},
}


@dataclass(frozen=True)
class MotionConfig:
    depth_range: tuple = (2500.0, 4500.0)  # mm, pelvis base depth
    depth_swing: float = 500.0
    lateral_range: float = 900.0  # mm, |pelvis x offset|
    lateral_swing: float = 700.0
    height_range: tuple = (-100.0, 300.0)
    freq_range: tuple = (0.15, 1.2)  # Hz
    n_harmonics: int = 3
    size_range: tuple = (0.85, 1.15)
    bone_jitter: float = 0.05
    fps: float = 50.0
    z_min: float = camera.DEFAULT_Z_MIN

    def __post_init__(self):
        lo, hi = self.depth_range
        if not 0 < lo <= hi:
            raise InvalidInputError(f"invalid depth_range {self.depth_range}")
        if self.fps <= 0 or self.n_harmonics < 1:
            raise InvalidInputError("fps must be positive and n_harmonics >= 1")


@dataclass(frozen=True)
class NoiseConfig:
    """Simulated 2D detector error: Gaussian jitter plus sparse outliers."""

    sigma: float | tuple = 2.0  # px; scalar or one value per joint
    outlier_prob: float = 0.01
    outlier_max: float = 30.0  # px

    def __post_init__(self):
        if np.any(np.asarray(self.sigma) < 0) or not 0 <= self.outlier_prob <= 1 or self.outlier_max < 0:
            raise InvalidInputError(f"invalid noise config {self}")

    @property
    def is_clean(self):
        return not np.any(np.asarray(self.sigma)) and self.outlier_prob == 0


@dataclass
class MotionSequence:
    gt3d: np.ndarray  # (T, J, 3) camera frame, mm
    intrinsics: Intrinsics
    fps: float
    seed: int
    topology: SkeletonTopology
    action: str = "walk"

    def __post_init__(self):
        self.gt3d = np.asarray(self.gt3d, dtype=np.float64)
        if self.gt3d.ndim != 3 or self.gt3d.shape[1:] != (self.topology.n_joints, 3) or len(self.gt3d) < 1:
            raise InvalidInputError(f"gt3d shape {self.gt3d.shape} does not match the topology")

    @property
    def n_frames(self):
        return self.gt3d.shape[0]

    def root_relative(self):
        return self.gt3d - self.gt3d[:, self.topology.root : self.topology.root + 1]


@dataclass
class Clip:
    """One recording: ground-truth motion plus the 2D keypoints seen for it."""

    motion: MotionSequence
    keypoints: np.ndarray  # (T, J, 2) pixels

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64)
        if self.keypoints.shape != self.motion.gt3d.shape[:2] + (2,):
            raise InvalidInputError(
                f"keypoints shape {self.keypoints.shape} does not match motion {self.motion.gt3d.shape}"
            )


def _rotation(angles):
    """Rotation matrices from (..., 3) x-y-z angles, applied as Rz @ Ry @ Rx."""
    ax, ay, az = angles[..., 0], angles[..., 1], angles[..., 2]
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    R = np.empty(angles.shape[:-1] + (3, 3))
    R[..., 0, 0] = cz * cy
    R[..., 0, 1] = cz * sy * sx - sz * cx
    R[..., 0, 2] = cz * sy * cx + sz * sx
    R[..., 1, 0] = sz * cy
    R[..., 1, 1] = sz * sy * sx + cz * cx
    R[..., 1, 2] = sz * sy * cx - cz * sx
    R[..., 2, 0] = -sy
    R[..., 2, 1] = cy * sx
    R[..., 2, 2] = cy * cx
    return R


def _sinusoids(rng, t, amplitude, cfg, shape=()):
    """Sum of low-frequency sinusoids with random phases, shape (T,) + shape."""
    out = np.zeros(t.shape + shape)
    for k in range(cfg.n_harmonics):
        f = rng.uniform(*cfg.freq_range, size=shape)
        phase = rng.uniform(0.0, 2 * np.pi, size=shape)
        a = rng.uniform(0.3, 1.0, size=shape) / (k + 1)
        out += a * np.sin(2 * np.pi * f * t[:, None] + phase) if shape else a * np.sin(2 * np.pi * f * t + phase)
    return amplitude * out


def _sample_bone_lengths(rng, topo, cfg):
    size = rng.uniform(*cfg.size_range)
    lengths = {}
    for child in topo.bone_children:
        name = topo.joint_names[child]
        base = name.replace("left_", "").replace("right_", "")
        if base not in lengths:  # left and right share one draw
            lengths[base] = size * _NOMINAL_LENGTHS[name] * (1 + rng.uniform(-cfg.bone_jitter, cfg.bone_jitter))
    return np.array(
        [lengths[topo.joint_names[c].replace("left_", "").replace("right_", "")] for c in topo.bone_children]
    )


def gen_motion(topology=None, n_frames=100, seed=0, motion_config=None, action=None, intrinsics=None):
    """Generate one deterministic motion sequence."""
    topo = topology or default_topology()
    cfg = motion_config or MotionConfig()
    K = intrinsics or Intrinsics.default()
    if n_frames < 1:
        raise InvalidInputError(f"n_frames must be >= 1, got {n_frames}")
    missing = [n for n in topo.joint_names if n not in _REST_DIRECTIONS and topo.parent[topo.joint_names.index(n)] >= 0]
    if missing:
        raise InvalidInputError(f"motion generator has no rest pose for joints {missing}")

    rng = np.random.default_rng(seed)
    if action is None:
        action = ACTIONS[int(rng.integers(len(ACTIONS)))]
    elif action not in ACTIONS:
        raise InvalidInputError(f"unknown action {action!r}; known: {ACTIONS}")
    t = np.arange(n_frames) / cfg.fps
    lengths = _sample_bone_lengths(rng, topo, cfg)

    gain = _ACTION_GAIN[action]
    J = topo.n_joints
    local = np.zeros((n_frames, J, 3))
    for child in topo.bone_children:
        name = topo.joint_names[child]
        amp = np.asarray(_BASE_AMPLITUDE[name]) * gain.get(name, 1.0)
        local[:, child] = _sinusoids(rng, t, amp, cfg, shape=(3,))
    # knees only flex one way (shin swings backwards, away from the camera)
    for name in ("right_ankle", "left_ankle"):
        j = topo.joint_names.index(name)
        local[:, j, 0] = np.abs(local[:, j, 0])

    yaw_amp = 1.2 if action == "turn" else 0.4
    root_angles = np.zeros((n_frames, 3))
    root_angles[:, 0] = _sinusoids(rng, t, 0.08, cfg)
    root_angles[:, 1] = rng.uniform(-np.pi / 4, np.pi / 4) + _sinusoids(rng, t, yaw_amp, cfg)
    root_angles[:, 2] = _sinusoids(rng, t, 0.05, cfg)

    pelvis = np.empty((n_frames, 3))
    pelvis[:, 0] = rng.uniform(-cfg.lateral_range, cfg.lateral_range) + _sinusoids(rng, t, cfg.lateral_swing, cfg)
    pelvis[:, 1] = rng.uniform(*cfg.height_range) + _sinusoids(rng, t, 60.0, cfg)
    pelvis[:, 2] = rng.uniform(*cfg.depth_range) + _sinusoids(rng, t, cfg.depth_swing, cfg)

    world_rot = np.empty((n_frames, J, 3, 3))
    world_rot[:, topo.root] = _rotation(root_angles)
    pos = np.empty((n_frames, J, 3))
    pos[:, topo.root] = pelvis
    # parents precede children in a topological walk from the root
    order = _topological_order(topo)
    for child in order:
        p = topo.parent[child]
        b = topo.bone_index(child)
        world_rot[:, child] = world_rot[:, p] @ _rotation(local[:, child])
        rest = np.asarray(_REST_DIRECTIONS[topo.joint_names[child]], dtype=np.float64) * lengths[b]
        pos[:, child] = pos[:, p] + world_rot[:, child] @ rest

    # never emit frames at or behind the camera
    min_z = pos[..., 2].min()
    if min_z <= cfg.z_min + 100.0:
        pos[..., 2] += cfg.z_min + 100.0 - min_z + cfg.depth_range[0]
    return MotionSequence(gt3d=pos, intrinsics=K, fps=cfg.fps, seed=int(seed), topology=topo, action=action)


def _topological_order(topo):
    order, frontier = [], [topo.root]
    while frontier:
        j = frontier.pop(0)
        kids = [c for c, p in enumerate(topo.parent) if p == j]
        order.extend(kids)
        frontier.extend(kids)
    return order


def project_sequence(m: MotionSequence, z_min=camera.DEFAULT_Z_MIN):
    return camera.project(m.gt3d, m.intrinsics, z_min=z_min)


def simulate_detector(traj, noise_config=None, seed=0):
    noise = noise_config or NoiseConfig()
    traj = np.asarray(traj, dtype=np.float64)
    if noise.is_clean:
        return traj.copy()
    rng = np.random.default_rng(seed)
    sigma = np.asarray(noise.sigma, dtype=np.float64)
    if sigma.ndim == 1:
        sigma = sigma[:, None]  # per joint
    out = traj + rng.standard_normal(traj.shape) * sigma
    hit = rng.random(traj.shape[:-1]) < noise.outlier_prob
    offsets = rng.uniform(-noise.outlier_max, noise.outlier_max, size=traj.shape)
    out[hit] += offsets[hit]
    return out


def derive_seed(master_seed, index):
    """Independent per-item seed from a master seed and an item index."""
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1)[0])


def gen_dataset(n_clips, n_frames, seed, motion_config=None, noise_config=None, topology=None, intrinsics=None):
    """Generate ``n_clips`` clips; keypoints carry simulated detector jitter."""
    if n_clips < 1:
        raise InvalidInputError("n_clips must be >= 1")
    clips = []
    for i in range(n_clips):
        s = derive_seed(seed, i)
        m = gen_motion(topology, n_frames, s, motion_config, intrinsics=intrinsics)
        clean = project_sequence(m)
        clips.append(Clip(m, simulate_detector(clean, noise_config, seed=derive_seed(s, 1))))
    return clips


# ---------------------------------------------------------------------------
# dataset file format

FORMAT_TAG = "camdist-dataset"
FORMAT_VERSION = 1
SUPPORTED_VERSIONS = (1,)


def _fmt(values):
    return " ".join(format(float(v), ".17g") for v in values)


def dumps_dataset(clips):
    if not clips:
        raise InvalidInputError("cannot save an empty dataset")
    topo = clips[0].motion.topology
    out = io.StringIO()
    w = out.write
    w(f"{FORMAT_TAG} {FORMAT_VERSION}\n")
    w(f"joints {topo.n_joints}\n")
    for j, (name, p) in enumerate(zip(topo.joint_names, topo.parent)):
        w(f"joint {j} {name} {p}\n")
    w(f"mirror_pairs {len(topo.mirror_pairs)}\n")
    for l, r in topo.mirror_pairs:
        w(f"pair {l} {r}\n")
    w(f"head_segment {topo.head_segment[0]} {topo.head_segment[1]}\n")
    w(f"clips {len(clips)}\n")
    for i, clip in enumerate(clips):
        m = clip.motion
        if m.topology != topo:
            raise InvalidInputError("all clips in a dataset must share one topology")
        K = m.intrinsics
        w(f"clip {i}\n")
        w(f"action {m.action}\n")
        w(f"seed {m.seed}\n")
        w(f"fps {_fmt([m.fps])}\n")
        w(f"intrinsics {_fmt([K.fx, K.fy, K.cx, K.cy])}\n")
        w(f"frames {m.n_frames}\n")
        w("gt3d\n")
        for frame in m.gt3d:
            w(_fmt(frame.ravel()) + "\n")
        w("keypoints\n")
        for frame in clip.keypoints:
            w(_fmt(frame.ravel()) + "\n")
        w("end\n")
    return out.getvalue()


def save_dataset(path, clips):
    path = Path(path)
    path.write_text(dumps_dataset(clips))
    return path


class _Lines:
    def __init__(self, text):
        self.lines = text.splitlines()
        self.pos = 0

    @property
    def lineno(self):
        return self.pos  # 1-based number of the line last read

    def next(self, what):
        if self.pos >= len(self.lines):
            raise FormatError(f"unexpected end of file while reading {what}", line=self.pos + 1, field=what)
        line = self.lines[self.pos]
        self.pos += 1
        return line

    def keyed(self, key, n_values=1):
        parts = self.next(key).split()
        if not parts or parts[0] != key:
            raise FormatError(f"expected {key!r}, got {' '.join(parts)[:40]!r}", line=self.lineno, field=key)
        if n_values is not None and len(parts) - 1 != n_values:
            raise FormatError(f"{key!r} expects {n_values} value(s), got {len(parts) - 1}", line=self.lineno, field=key)
        return parts[1:]

    def number(self, text, key, kind=float):
        try:
            v = kind(text)
        except ValueError:
            raise FormatError(f"cannot parse {text!r} as {kind.__name__}", line=self.lineno, field=key) from None
        return v

    def rows(self, n_rows, n_cols, key):
        out = np.empty((n_rows, n_cols))
        for r in range(n_rows):
            parts = self.next(key).split()
            if len(parts) != n_cols:
                raise FormatError(f"expected {n_cols} values, got {len(parts)}", line=self.lineno, field=key)
            try:
                out[r] = [float(x) for x in parts]
            except ValueError:
                raise FormatError("non-numeric value", line=self.lineno, field=key) from None
        return out


def loads_dataset(text):
    src = _Lines(text)
    header = src.next("header").split()
    if len(header) != 2 or header[0] != FORMAT_TAG:
        raise FormatError(f"not a {FORMAT_TAG} file", line=1, field="header")
    try:
        version = int(header[1])
    except ValueError:
        version = None
    if version not in SUPPORTED_VERSIONS:
        raise VersionError(
            f"unsupported dataset version {header[1]!r}; supported versions: {list(SUPPORTED_VERSIONS)}",
            line=1, field="version",
        )
    n_joints = src.number(src.keyed("joints")[0], "joints", int)
    names, parents = [], []
    for j in range(n_joints):
        idx, name, parent = src.keyed("joint", 3)
        if src.number(idx, "joint", int) != j:
            raise FormatError(f"joints out of order, expected {j}", line=src.lineno, field="joint")
        names.append(name)
        parents.append(src.number(parent, "joint", int))
    n_pairs = src.number(src.keyed("mirror_pairs")[0], "mirror_pairs", int)
    pairs = [tuple(src.number(v, "pair", int) for v in src.keyed("pair", 2)) for _ in range(n_pairs)]
    head = tuple(src.number(v, "head_segment", int) for v in src.keyed("head_segment", 2))
    line_before_topo = src.lineno
    try:
        topo = SkeletonTopology(names, parents, pairs, head)
    except InvalidInputError as exc:
        raise FormatError(f"invalid topology: {exc}", line=line_before_topo, field="topology") from None

    n_clips = src.number(src.keyed("clips")[0], "clips", int)
    clips = []
    for i in range(n_clips):
        if src.number(src.keyed("clip")[0], "clip", int) != i:
            raise FormatError(f"clips out of order, expected {i}", line=src.lineno, field="clip")
        action = src.keyed("action")[0]
        seed = src.number(src.keyed("seed")[0], "seed", int)
        fps = src.number(src.keyed("fps")[0], "fps")
        fx, fy, cx, cy = (src.number(v, "intrinsics") for v in src.keyed("intrinsics", 4))
        n_frames = src.number(src.keyed("frames")[0], "frames", int)
        src.keyed("gt3d", 0)
        gt3d = src.rows(n_frames, n_joints * 3, "gt3d").reshape(n_frames, n_joints, 3)
        src.keyed("keypoints", 0)
        kp = src.rows(n_frames, n_joints * 2, "keypoints").reshape(n_frames, n_joints, 2)
        src.keyed("end", 0)
        try:
            m = MotionSequence(gt3d, Intrinsics(fx, fy, cx, cy), fps, seed, topo, action)
            clips.append(Clip(m, kp))
        except InvalidInputError as exc:
            raise FormatError(str(exc), line=src.lineno, field=f"clip {i}") from None
    return clips


def load_dataset(path):
    return loads_dataset(Path(path).read_text())


def check_motion(m: MotionSequence, rel_tol=1e-9):
    """Raise if a sequence violates depth positivity or rigid bones."""
    if np.any(m.gt3d[..., 2] <= 0):
        raise InvalidInputError("sequence has joints at or behind the camera")
    lengths = bone_lengths(m.gt3d, m.topology)
    drift = np.abs(lengths - lengths[0]) / np.maximum(lengths[0], 1e-300)
    if drift.max() > rel_tol:
        raise InvalidInputError(f"bone lengths drift by {drift.max():.3g} (relative)")
