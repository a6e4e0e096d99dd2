"""Permutation-equivariant guidance network with hand-written backward pass.

Architecture: an input affine layer, ``n_blocks`` residual blocks of
``(affine -> instance norm -> ReLU) x 2`` with an identity skip, and one or
two per-observation heads:

* weights head: affine -> sigmoid -> divide by the sum over the set;
* points head (line task): affine -> ``3*sigmoid - 1.5`` offset added to the
  observation's patch center.

Set reductions go through ``kernels.invariant_colsum`` so that permuting the
input rows permutes the outputs bit for bit.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .errors import CorruptModel, SetTooSmall, ShapeMismatch, VersionMismatch
from .sampling import GuidanceDistribution, make_rng
from .scoring import sigmoid

IN_EPS = 1e-5
POINT_RANGE = 1.5
HEADS = ("weights", "points_and_weights")

MAGIC = b"NGRSGNET"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIIIIBQ")


@dataclass(frozen=True)
class GuidanceNetSpec:
    input_dim: int
    hidden_dim: int = 32
    n_blocks: int = 3
    heads: str = "weights"

    def __post_init__(self):
        if min(self.input_dim, self.hidden_dim) < 1 or self.n_blocks < 0:
            raise ValueError("dimensions must be >= 1")
        if self.heads not in HEADS:
            raise ValueError(f"heads must be one of {HEADS}")

    @property
    def has_points(self) -> bool:
        return self.heads == "points_and_weights"


def param_layout(spec: GuidanceNetSpec) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) list defining the flat parameter vector."""
    h = spec.hidden_dim
    layout = [("in.w", (spec.input_dim, h)), ("in.b", (h,))]
    for k in range(spec.n_blocks):
        for j in (1, 2):
            layout += [(f"block{k}.{j}.w", (h, h)), (f"block{k}.{j}.b", (h,))]
    layout += [("weights.w", (h, 1)), ("weights.b", (1,))]
    if spec.has_points:
        layout += [("points.w", (h, 2)), ("points.b", (2,))]
    return layout


def param_count(spec: GuidanceNetSpec) -> int:
    return sum(math.prod(s) for _, s in param_layout(spec))


def unflatten(params: np.ndarray, spec: GuidanceNetSpec) -> dict[str, np.ndarray]:
    """Named views into ``params`` (writes through)."""
    if params.shape != (param_count(spec),):
        raise ShapeMismatch(f"expected {param_count(spec)} parameters, got {params.shape}")
    out, pos = {}, 0
    for name, shape in param_layout(spec):
        size = math.prod(shape)
        out[name] = params[pos : pos + size].reshape(shape)
        pos += size
    return out


def init_params(spec: GuidanceNetSpec, seed: int) -> np.ndarray:
    """Uniform(+-1/sqrt(fan_in)) everywhere except the zeroed weights head."""
    rng = make_rng(seed)
    params = np.zeros(param_count(spec))
    views = unflatten(params, spec)
    for name, shape in param_layout(spec):
        if name.startswith("weights."):
            continue
        fan_in = shape[0] if len(shape) == 2 else views[name.replace(".b", ".w")].shape[0]
        bound = 1.0 / math.sqrt(fan_in)
        views[name][...] = rng.uniform(-bound, bound, size=shape)
    return params


# ---------------------------------------------------------------- instance norm
def instance_norm(x: np.ndarray, eps: float = IN_EPS):
    """Per-channel standardization over the set axis; returns ``(y, cache)``."""
    n = x.shape[0]
    if n < 2:
        raise SetTooSmall("instance normalization needs at least two observations")
    mean = kernels.invariant_colsum(x) / n
    xc = x - mean
    var = kernels.invariant_colsum(xc * xc) / n
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    return y, (y, inv)


def instance_norm_backward(dy: np.ndarray, cache) -> np.ndarray:
    y, inv = cache
    return inv * (dy - dy.mean(axis=0) - y * (dy * y).mean(axis=0))


# ---------------------------------------------------------------- forward / backward
@dataclass
class ForwardResult:
    weights: np.ndarray
    points: Optional[np.ndarray]
    cache: dict = field(repr=False)

    @property
    def distribution(self) -> GuidanceDistribution:
        return GuidanceDistribution(self.weights)


def forward(params: np.ndarray, spec: GuidanceNetSpec, x: np.ndarray, centers=None) -> ForwardResult:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeMismatch(f"expected (n, {spec.input_dim}) features, got {x.shape}")
    if x.shape[0] < 2:
        raise SetTooSmall("the guidance network needs at least two observations")
    p = unflatten(params, spec)
    h = kernels.dense(x, p["in.w"], p["in.b"])
    blocks = []
    for k in range(spec.n_blocks):
        h_in = h
        layers = []
        cur = h
        for j in (1, 2):
            a = kernels.dense(cur, p[f"block{k}.{j}.w"], p[f"block{k}.{j}.b"])
            z, in_cache = instance_norm(a)
            r = np.maximum(z, 0.0)
            layers.append((cur, in_cache, z > 0))
            cur = r
        h = h_in + cur
        blocks.append(layers)
    trunk = h

    s = sigmoid(kernels.dense(trunk, p["weights.w"], p["weights.b"])[:, 0])
    total = float(kernels.invariant_colsum(s[:, None])[0])
    weights = s / total
    cache = {"spec": spec, "params": params, "x": x, "blocks": blocks, "trunk": trunk, "s": s, "total": total}

    points = None
    if spec.has_points:
        if centers is None:
            raise ShapeMismatch("points head requires patch centers")
        sp = sigmoid(kernels.dense(trunk, p["points.w"], p["points.b"]))
        points = np.asarray(centers, dtype=np.float64) + 2.0 * POINT_RANGE * sp - POINT_RANGE
        cache["sp"] = sp
    return ForwardResult(weights, points, cache)


def backward(cache: dict, grad_log_weights=None, grad_points=None, block: bool = True) -> np.ndarray:
    """Parameter gradient of ``sum(g * log weights) + sum(G * points)``.

    With a points head and ``block=True`` the weights-head gradient stops at
    the trunk, so only the points branch trains the shared layers.
    """
    spec: GuidanceNetSpec = cache["spec"]
    params = cache["params"]
    p = unflatten(params, spec)
    grads = np.zeros_like(params)
    gp = unflatten(grads, spec)
    trunk = cache["trunk"]
    n = trunk.shape[0]
    d_trunk = np.zeros_like(trunk)

    if grad_log_weights is not None:
        g = np.asarray(grad_log_weights, dtype=np.float64)
        if g.shape != (n,):
            raise ShapeMismatch(f"grad_log_weights must have shape ({n},)")
        s, total = cache["s"], cache["total"]
        d_o = g * (1.0 - s) - g.sum() * s * (1.0 - s) / total
        gp["weights.w"][:, 0] = trunk.T @ d_o
        gp["weights.b"][0] = d_o.sum()
        if not (block and spec.has_points):
            d_trunk += np.outer(d_o, p["weights.w"][:, 0])

    if grad_points is not None:
        if not spec.has_points:
            raise ShapeMismatch("network has no points head")
        gpts = np.asarray(grad_points, dtype=np.float64)
        if gpts.shape != (n, 2):
            raise ShapeMismatch(f"grad_points must have shape ({n}, 2)")
        sp = cache["sp"]
        d_o = gpts * 2.0 * POINT_RANGE * sp * (1.0 - sp)
        gp["points.w"][...] = trunk.T @ d_o
        gp["points.b"][...] = d_o.sum(axis=0)
        d_trunk += d_o @ p["points.w"].T

    dh = d_trunk
    for k in reversed(range(spec.n_blocks)):
        d_cur = dh
        for j, (inp, in_cache, mask) in reversed(list(zip((1, 2), cache["blocks"][k]))):
            d_a = instance_norm_backward(d_cur * mask, in_cache)
            gp[f"block{k}.{j}.w"][...] = inp.T @ d_a
            gp[f"block{k}.{j}.b"][...] = d_a.sum(axis=0)
            d_cur = d_a @ p[f"block{k}.{j}.w"].T
        dh = dh + d_cur
    gp["in.w"][...] = cache["x"].T @ dh
    gp["in.b"][...] = dh.sum(axis=0)
    return grads


class GuidanceNet:
    """Spec plus flat parameter vector; the object training code mutates."""

    def __init__(self, spec: GuidanceNetSpec, params: Optional[np.ndarray] = None, seed: int = 0):
        self.spec = spec
        self.params = init_params(spec, seed) if params is None else np.asarray(params, dtype=np.float64)
        if self.params.shape != (param_count(spec),):
            raise ShapeMismatch("parameter vector does not match the network shape")

    def forward(self, x, centers=None) -> ForwardResult:
        return forward(self.params, self.spec, x, centers)

    def backward(self, cache, grad_log_weights=None, grad_points=None, block=True) -> np.ndarray:
        return backward(cache, grad_log_weights, grad_points, block)

    def copy(self) -> "GuidanceNet":
        return GuidanceNet(self.spec, self.params.copy())

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(serialize(self.params, self.spec))

    @classmethod
    def load(cls, path) -> "GuidanceNet":
        with open(path, "rb") as fh:
            params, spec = deserialize(fh.read())
        return cls(spec, params)


class TabularGuidance:
    """One free logit per observation: ``weights = sigmoid(w) / sum(sigmoid(w))``.

    Shares the sigmoid-and-normalize head of ``GuidanceNet`` without a trunk;
    used for small instances where expectations are enumerated exactly.
    """

    def __init__(self, logits):
        self.params = np.asarray(logits, dtype=np.float64).copy()

    def forward(self, x=None, centers=None) -> ForwardResult:
        s = sigmoid(self.params)
        return ForwardResult(s / s.sum(), None, {"s": s, "total": s.sum()})

    def backward(self, cache, grad_log_weights=None, grad_points=None, block=True) -> np.ndarray:
        if grad_log_weights is None:
            return np.zeros_like(self.params)
        g = np.asarray(grad_log_weights, dtype=np.float64)
        s, total = cache["s"], cache["total"]
        return g * (1.0 - s) - g.sum() * s * (1.0 - s) / total

    def copy(self) -> "TabularGuidance":
        return TabularGuidance(self.params)


# ---------------------------------------------------------------- serialization
def _checksum(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def serialize(params: np.ndarray, spec: GuidanceNetSpec) -> bytes:
    params = np.asarray(params, dtype="<f8")
    if params.shape != (param_count(spec),):
        raise ShapeMismatch("parameter vector does not match the network shape")
    header = _HEADER.pack(
        MAGIC, FORMAT_VERSION, spec.input_dim, spec.hidden_dim, spec.n_blocks,
        HEADS.index(spec.heads), params.size,
    )
    body = header + params.tobytes()
    return body + struct.pack("<Q", _checksum(body))


def deserialize(data: bytes) -> tuple[np.ndarray, GuidanceNetSpec]:
    if len(data) < _HEADER.size + 8:
        raise CorruptModel("stream shorter than the header")
    magic, version, d_in, hidden, blocks, heads, count = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorruptModel("bad magic")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"model format {version}, reader supports {FORMAT_VERSION}")
    expected = _HEADER.size + 8 * count + 8
    if len(data) != expected:
        raise CorruptModel(f"stream has {len(data)} bytes, expected {expected}")
    (stored,) = struct.unpack_from("<Q", data, expected - 8)
    if stored != _checksum(data[: expected - 8]):
        raise CorruptModel("checksum mismatch")
    if heads >= len(HEADS):
        raise CorruptModel("unknown head layout")
    spec = GuidanceNetSpec(d_in, hidden, blocks, HEADS[heads])
    if count != param_count(spec):
        raise CorruptModel("parameter count inconsistent with spec")
    params = np.frombuffer(data, dtype="<f8", count=count, offset=_HEADER.size).astype(np.float64)
    return params, spec


# ---------------------------------------------------------------- line-task features
def patch_features(raster: np.ndarray, patch: int):
    """Per-patch [mean, variance, centroid dx, centroid dy] plus patch centers.

    Patches are ordered row-major.  Centroid offsets are the intensity-weighted
    mean position of the patch relative to its center, in normalized image
    units (zero for an empty patch).  Centers are in normalized coordinates.
    """
    g = raster.shape[0]
    if raster.shape != (g, g) or g % patch:
        raise ShapeMismatch("raster must be square with a side divisible by patch")
    k = g // patch
    tiles = raster.reshape(k, patch, k, patch).transpose(0, 2, 1, 3).reshape(k * k, patch, patch)
    mean = tiles.mean(axis=(1, 2))
    var = tiles.var(axis=(1, 2))
    offs = (np.arange(patch) + 0.5 - patch / 2.0) / g
    mass = tiles.sum(axis=(1, 2))
    safe = np.where(mass > 0, mass, 1.0)
    dx = np.where(mass > 0, (tiles.sum(axis=1) @ offs) / safe, 0.0)
    dy = np.where(mass > 0, (tiles.sum(axis=2) @ offs) / safe, 0.0)
    pr, pc = np.divmod(np.arange(k * k), k)
    centers = np.column_stack([(pc + 0.5) / k, (pr + 0.5) / k])
    return np.column_stack([mean, var, dx, dy]), centers
