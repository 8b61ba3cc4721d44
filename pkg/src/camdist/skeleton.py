"""Skeleton topology and bone-length bookkeeping.

The canonical layout is a 17-joint Human3.6M-style tree rooted at the
pelvis:

====  ===============  ======
idx   joint            parent
====  ===============  ======
0     pelvis           --
1     right_hip        0
2     right_knee       1
3     right_ankle      2
4     left_hip         0
5     left_knee        4
6     left_ankle       5
7     spine            0
8     thorax           7
9     neck             8
10    head_top         9
11    left_shoulder    8
12    left_elbow       11
13    left_wrist       12
14    right_shoulder   8
15    right_elbow      14
16    right_wrist      15
====  ===============  ======

Bone ``b`` is the segment from ``topo.bone_children[b]`` to its parent;
bones are ordered by child joint index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

try:  # bone lengths are also taken of torch predictions during adaptation
    import torch
except ImportError:  # pragma: no cover
    torch = None


@dataclass(frozen=True)
class SkeletonTopology:
    joint_names: tuple
    parent: tuple
    mirror_pairs: tuple  # (left bone index, right bone index)
    head_segment: tuple  # (neck joint, head-top joint)

    def __post_init__(self):
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        object.__setattr__(self, "parent", tuple(int(p) for p in self.parent))
        object.__setattr__(self, "mirror_pairs", tuple(tuple(int(i) for i in p) for p in self.mirror_pairs))
        object.__setattr__(self, "head_segment", tuple(int(i) for i in self.head_segment))
        self.validate()

    @property
    def n_joints(self):
        return len(self.parent)

    @property
    def n_bones(self):
        return self.n_joints - 1

    @property
    def root(self):
        return self.parent.index(-1)

    @property
    def bone_children(self):
        return tuple(j for j, p in enumerate(self.parent) if p >= 0)

    @property
    def bone_parents(self):
        return tuple(self.parent[j] for j in self.bone_children)

    def validate(self):
        J = len(self.parent)
        if len(self.joint_names) != J:
            raise InvalidInputError(f"{len(self.joint_names)} joint names for {J} joints")
        if J < 2:
            raise InvalidInputError("a skeleton needs at least two joints")
        roots = [j for j, p in enumerate(self.parent) if p == -1]
        if len(roots) != 1:
            raise InvalidInputError(f"parent array must have exactly one root (-1), found {len(roots)}")
        for j, p in enumerate(self.parent):
            if p != -1 and not 0 <= p < J:
                raise InvalidInputError(f"joint {j} has out-of-range parent {p}")
            if p == j:
                raise InvalidInputError(f"joint {j} is its own parent")
        # every joint must reach the root without revisiting a joint
        for j in range(J):
            seen = set()
            k = j
            while k != -1:
                if k in seen:
                    raise InvalidInputError(f"parent array contains a cycle through joint {k}")
                seen.add(k)
                k = self.parent[k]
        n_bones = J - 1
        partner = {}
        for left, right in self.mirror_pairs:
            for b in (left, right):
                if not 0 <= b < n_bones:
                    raise InvalidInputError(f"mirror pair references invalid bone {b}")
            if left == right:
                raise InvalidInputError(f"mirror pair ({left}, {right}) pairs a bone with itself")
            for a, b in ((left, right), (right, left)):
                if partner.setdefault(a, b) != b:
                    raise InvalidInputError(f"bone {a} appears in more than one mirror pair")
        neck, head = self.head_segment
        if not (0 <= neck < J and 0 <= head < J) or neck == head:
            raise InvalidInputError(f"invalid head segment {self.head_segment}")

    def bone_index(self, child_joint):
        return self.bone_children.index(child_joint)

    def to_dict(self):
        return {
            "joint_names": list(self.joint_names),
            "parent": list(self.parent),
            "mirror_pairs": [list(p) for p in self.mirror_pairs],
            "head_segment": list(self.head_segment),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["joint_names"], d["parent"], d["mirror_pairs"], d["head_segment"])


JOINT_NAMES = (
    "pelvis", "right_hip", "right_knee", "right_ankle", "left_hip", "left_knee",
    "left_ankle", "spine", "thorax", "neck", "head_top", "left_shoulder",
    "left_elbow", "left_wrist", "right_shoulder", "right_elbow", "right_wrist",
)
PARENTS = (-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15)


def default_topology():
    parent = PARENTS
    children = [j for j, p in enumerate(parent) if p >= 0]
    bone = {child: b for b, child in enumerate(children)}
    left_right = [(4, 1), (5, 2), (6, 3), (11, 14), (12, 15), (13, 16)]
    return SkeletonTopology(
        joint_names=JOINT_NAMES,
        parent=parent,
        mirror_pairs=[(bone[l], bone[r]) for l, r in left_right],
        head_segment=(9, 10),
    )


def _check_shape(seq, topo):
    if seq.shape[-1] != 3 or seq.ndim < 2 or seq.shape[-2] != topo.n_joints:
        raise InvalidInputError(
            f"pose array of shape {tuple(seq.shape)} does not match a {topo.n_joints}-joint skeleton"
        )


def bone_lengths(seq, topo: SkeletonTopology):
    """Euclidean bone lengths of a (..., J, 3) array, shape (..., J-1).

    Accepts numpy arrays or torch tensors; the result has the same type.
    """
    if torch is not None and isinstance(seq, torch.Tensor):
        _check_shape(seq, topo)
        child = torch.as_tensor(topo.bone_children)
        parent = torch.as_tensor(topo.bone_parents)
        vec = seq.index_select(-2, child) - seq.index_select(-2, parent)
        sq = (vec * vec).sum(-1)
        nz = sq > 0
        # zero-length bones get a zero (sub)gradient instead of NaN
        return torch.where(nz, torch.sqrt(torch.where(nz, sq, torch.ones_like(sq))), torch.zeros_like(sq))
    seq = np.asarray(seq, dtype=np.float64)
    _check_shape(seq, topo)
    vec = seq[..., list(topo.bone_children), :] - seq[..., list(topo.bone_parents), :]
    return np.sqrt(np.sum(vec * vec, axis=-1))
