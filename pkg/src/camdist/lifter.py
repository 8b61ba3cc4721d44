"""Temporal-convolution 2D->3D lifter and its gradient machinery.

The network is a desk-scale dilated temporal convolution model with
residual blocks. It is written functionally: parameters live in a
:class:`LifterParams` mapping and ``forward`` takes them explicitly, so
adapted parameters (theta - alpha * grad) can be evaluated without copying
a module around. Reverse-mode differentiation is delegated to torch
autograd in float64; with ``create_graph=True`` the recorded graph of the
inner step is itself differentiable, which is what second-order MAML
needs.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import camera
from .errors import FormatError, InvalidInputError, NumericError, VersionError

DTYPE = torch.float64
OUTPUT_SCALE = 1000.0  # raw network output is in metres; poses are reported in mm
LOSS_SCALE = 1e-3  # training objectives are expressed in metres

_BLOCKS = {3: (), 9: (3,), 27: (3, 9)}


@dataclass(frozen=True)
class LifterConfig:
    frames: int = 9
    channels: int = 64
    joints: int = 17
    seed: int = 0
    second_order: bool = True
    root: int = 0

    def __post_init__(self):
        if self.frames not in _BLOCKS:
            raise InvalidInputError(f"frames must be one of {sorted(_BLOCKS)}, got {self.frames}")
        if self.channels < 8:
            raise InvalidInputError(f"channels must be >= 8, got {self.channels}")
        if self.joints < 2:
            raise InvalidInputError("joints must be >= 2")

    @property
    def dilations(self):
        return _BLOCKS[self.frames]


class LifterParams(OrderedDict):
    """Named parameter tensors (float64). Order is fixed at init."""

    @property
    def count(self):
        return sum(t.numel() for t in self.values())

    def flat(self):
        return torch.cat([t.reshape(-1) for t in self.values()])

    def with_flat(self, vec):
        out, pos = LifterParams(), 0
        for name, t in self.items():
            n = t.numel()
            out[name] = vec[pos : pos + n].reshape(t.shape)
            pos += n
        return out

    def detached(self):
        return LifterParams((k, v.detach().clone()) for k, v in self.items())

    def requiring_grad(self):
        return LifterParams((k, v.detach().clone().requires_grad_(True)) for k, v in self.items())

    def numpy(self):
        return OrderedDict((k, v.detach().cpu().numpy().copy()) for k, v in self.items())

    def bit_equal(self, other):
        return list(self) == list(other) and all(torch.equal(self[k], other[k]) for k in self)


def param_shapes(cfg: LifterConfig):
    C, J = cfg.channels, cfg.joints
    shapes = OrderedDict()
    shapes["expand.weight"] = (C, 2 * J, 3)
    shapes["expand.bias"] = (C,)
    for i, _d in enumerate(cfg.dilations):
        shapes[f"block{i}.dilated.weight"] = (C, C, 3)
        shapes[f"block{i}.dilated.bias"] = (C,)
        shapes[f"block{i}.pointwise.weight"] = (C, C, 1)
        shapes[f"block{i}.pointwise.bias"] = (C,)
    shapes["shrink.weight"] = (3 * J, C, 1)
    shapes["shrink.bias"] = (3 * J,)
    return shapes


def param_count(cfg: LifterConfig):
    """Closed-form parameter count."""
    C, J, nb = cfg.channels, cfg.joints, len(cfg.dilations)
    return (6 * J * C + C) + nb * (3 * C * C + C + C * C + C) + (3 * J * C + 3 * J)


def init_params(cfg: LifterConfig):
    """Fan-in scaled uniform weights (He bound for ReLU layers), zero biases."""
    rng = np.random.default_rng(cfg.seed)
    params = LifterParams()
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".bias"):
            arr = np.zeros(shape)
        else:
            fan_in = shape[1] * shape[2]
            gain = 6.0 if not name.startswith("shrink") else 1.0
            bound = np.sqrt(gain / fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = torch.tensor(arr, dtype=DTYPE)
    return params


def prepare_inputs(pixels, K):
    """Pixel windows (B, T, J, 2) -> normalized network input (B, 2J, T)."""
    n = camera.normalize(pixels, K)
    B, T, J, _ = n.shape
    return torch.from_numpy(np.ascontiguousarray(n.reshape(B, T, 2 * J).transpose(0, 2, 1)))


def forward_normalized(params, x, cfg: LifterConfig):
    """Network on pre-normalized input (B, 2J, T) -> root-relative poses (B, J, 3) in mm."""
    if x.ndim != 3 or x.shape[1] != 2 * cfg.joints or x.shape[2] != cfg.frames:
        raise InvalidInputError(
            f"expected input of shape (B, {2 * cfg.joints}, {cfg.frames}), got {tuple(x.shape)}"
        )
    h = F.relu(F.conv1d(x, params["expand.weight"], params["expand.bias"]))
    for i, d in enumerate(cfg.dilations):
        r = F.relu(F.conv1d(h, params[f"block{i}.dilated.weight"], params[f"block{i}.dilated.bias"], dilation=d))
        r = F.relu(F.conv1d(r, params[f"block{i}.pointwise.weight"], params[f"block{i}.pointwise.bias"]))
        h = h[:, :, d:-d] + r
    out = F.conv1d(h, params["shrink.weight"], params["shrink.bias"])  # (B, 3J, 1)
    pose = out[:, :, 0].reshape(-1, cfg.joints, 3) * OUTPUT_SCALE
    return pose - pose[:, cfg.root : cfg.root + 1]


def forward(params, pixels, K, cfg: LifterConfig):
    """Predict center-frame poses for pixel windows of shape (B, T, J, 2) or (T, J, 2)."""
    pixels = np.asarray(pixels, dtype=np.float64)
    single = pixels.ndim == 3
    if single:
        pixels = pixels[None]
    if pixels.ndim != 4 or pixels.shape[1:] != (cfg.frames, cfg.joints, 2):
        raise InvalidInputError(
            f"expected windows of shape (B, {cfg.frames}, {cfg.joints}, 2), got {pixels.shape}"
        )
    out = forward_normalized(params, prepare_inputs(pixels, K), cfg)
    return out[0] if single else out


def predict(params, batch, cfg: LifterConfig, chunk=4096):
    """Numpy predictions (mm) for a WindowBatch, without building a graph."""
    outs = []
    with torch.no_grad():
        for s in range(0, len(batch), chunk):
            outs.append(forward(params, batch.inputs[s : s + chunk], batch.intrinsics, cfg).numpy())
    return np.concatenate(outs) if outs else np.zeros((0, cfg.joints, 3))


def safe_norm(v, dim=-1):
    """Euclidean norm whose first and second derivatives are 0 (not NaN) at v = 0."""
    sq = (v * v).sum(dim)
    nz = sq > 0
    return torch.where(nz, torch.sqrt(torch.where(nz, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def mpjpe_loss(pred, target):
    """Mean per-joint Euclidean distance over batch and joints (same unit as inputs)."""
    if pred.shape != target.shape:
        raise InvalidInputError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ in shape")
    # the root joint sits exactly on its target, so a plain norm would put NaN
    # into second-order gradients
    return safe_norm(pred - target).mean()


def batch_loss(params, batch, cfg: LifterConfig):
    """Training objective on a WindowBatch: MPJPE in metres."""
    pred = forward(params, batch.inputs, batch.intrinsics, cfg)
    return mpjpe_loss(pred, torch.from_numpy(batch.targets)) * LOSS_SCALE


def _check_finite(value, what, params=None):
    if not torch.isfinite(value).all():
        raise NumericError(f"non-finite {what}", checkpoint=params)


def grad(params, loss_fn, create_graph=False):
    """Gradient of ``loss_fn(params)`` w.r.t. every parameter tensor.

    Returns ``(loss, grads)`` where grads is a LifterParams-like mapping.
    Params that do not already require grad are treated as leaves.
    """
    leaves = params if all(t.requires_grad for t in params.values()) else params.requiring_grad()
    loss = loss_fn(leaves)
    _check_finite(loss.detach(), "loss", params)
    names = list(leaves)
    if not loss.requires_grad:  # constant objective
        zeros = [torch.zeros_like(leaves[n]) for n in names]
        return loss, type(params)(zip(names, zeros))
    gs = torch.autograd.grad(loss, [leaves[n] for n in names], create_graph=create_graph, allow_unused=True)
    gs = [torch.zeros_like(leaves[n]) if g is None else g for n, g in zip(names, gs)]
    out = type(params)(zip(names, gs))
    for g in gs:
        _check_finite(g.detach(), "gradient", params)
    return loss, out


def sgd_step(params, grads, lr):
    return type(params)((k, params[k] - lr * grads[k]) for k in params)


@dataclass
class MetaGradResult:
    grads: LifterParams
    support_loss: float
    query_loss: float
    second_order: bool
    inner_steps: int = 1


def meta_grad(params, support_loss_fn, query_loss_fn, alpha, second_order=True):
    """Gradient of query_loss(theta - alpha * grad support_loss(theta)) w.r.t. theta.

    With ``second_order`` the inner update stays on the autograd tape and the
    result is the exact meta-gradient; otherwise the inner gradient is
    treated as a constant (first-order MAML), i.e. the query gradient
    evaluated at the adapted parameters.
    """
    theta = params.requiring_grad()
    s_loss, g = grad(theta, support_loss_fn, create_graph=second_order)
    if not second_order:
        g = type(params)((k, v.detach()) for k, v in g.items())
    adapted = sgd_step(theta, g, alpha)
    if not second_order:
        adapted = type(params)((k, v.detach().requires_grad_(True)) for k, v in adapted.items())
    q_loss = query_loss_fn(adapted)
    _check_finite(q_loss.detach(), "query loss", params)
    wrt = adapted if not second_order else theta
    names = list(wrt)
    gs = torch.autograd.grad(q_loss, [wrt[n] for n in names], allow_unused=True)
    gs = [torch.zeros_like(wrt[n]) if v is None else v for n, v in zip(names, gs)]
    for v in gs:
        _check_finite(v, "meta-gradient", params)
    return MetaGradResult(
        type(params)(zip(names, gs)), float(s_loss.detach()), float(q_loss.detach()), second_order
    )


def lifter_meta_grad(params, support, query, alpha, cfg: LifterConfig, second_order=None):
    so = cfg.second_order if second_order is None else second_order
    return meta_grad(
        params,
        lambda p: batch_loss(p, support, cfg),
        lambda p: batch_loss(p, query, cfg),
        alpha,
        so,
    )


# ---------------------------------------------------------------------------
# checkpoint file: text header line, JSON metadata line, raw little-endian
# float64 payload

CKPT_TAG = b"camdist-checkpoint"
CKPT_VERSION = 1


def save_checkpoint(path, params, cfg: LifterConfig, extra_tensors=None, meta=None):
    """Write parameters (plus optional named extra tensors, e.g. optimizer moments)."""
    segments, blobs, offset = [], [], 0
    for group, tensors in (("param", params), ("extra", extra_tensors or {})):
        for name, t in tensors.items():
            arr = np.ascontiguousarray(t.detach().cpu().numpy() if torch.is_tensor(t) else t, dtype="<f8")
            segments.append({"group": group, "name": name, "shape": list(arr.shape), "offset": offset})
            blobs.append(arr.tobytes())
            offset += arr.size
    header = {"lifter": asdict(cfg), "segments": segments, "meta": meta or {}}
    with open(path, "wb") as fh:
        fh.write(CKPT_TAG + b" " + str(CKPT_VERSION).encode() + b"\n")
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(struct.pack("<q", offset))
        for b in blobs:
            fh.write(b)


def load_checkpoint(path):
    """Returns ``(params, cfg, extra, meta)``."""
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    first = data[:nl].split(b" ") if nl >= 0 else [b""]
    if len(first) != 2 or first[0] != CKPT_TAG:
        raise FormatError("not a camdist checkpoint", line=1, field="header")
    if first[1] != str(CKPT_VERSION).encode():
        raise VersionError(
            f"unsupported checkpoint version {first[1].decode(errors='replace')!r}; supported versions: [{CKPT_VERSION}]",
            line=1, field="version",
        )
    nl2 = data.find(b"\n", nl + 1)
    if nl2 < 0:
        raise FormatError("truncated checkpoint header", line=2, field="metadata")
    try:
        header = json.loads(data[nl + 1 : nl2])
        cfg = LifterConfig(**header["lifter"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"bad checkpoint metadata: {exc}", line=2, field="metadata") from None
    body = data[nl2 + 1 :]
    if len(body) < 8:
        raise FormatError("truncated checkpoint payload", field="payload")
    (n_values,) = struct.unpack("<q", body[:8])
    if len(body) - 8 != 8 * n_values:
        raise FormatError(
            f"payload holds {(len(body) - 8) // 8} values, header promises {n_values}", field="payload"
        )
    values = np.frombuffer(body[8:], dtype="<f8")
    params, extra = LifterParams(), OrderedDict()
    for seg in header["segments"]:
        n = int(np.prod(seg["shape"], dtype=np.int64))
        arr = values[seg["offset"] : seg["offset"] + n].reshape(seg["shape"]).astype(np.float64)
        target = params if seg["group"] == "param" else extra
        target[seg["name"]] = torch.tensor(arr, dtype=DTYPE)
    expected = param_shapes(cfg)
    got = OrderedDict((k, tuple(v.shape)) for k, v in params.items())
    if got != expected:
        raise FormatError("checkpoint parameter segments do not match its lifter config", field="segments")
    return params, cfg, extra, header.get("meta", {})
