"""A small conv/fc network with hand-written backprop, Adam, and parameter files.

Layout is NHWC. Every conv block is ``conv(same padding) -> ReLU -> 2x2 max
pool (ceil mode)``; the flattened features are concatenated with auxiliary
inputs and fed through ReLU dense layers and a linear (or dueling) head.

``Network.predict`` evaluates in fixed-size zero-padded chunks so that the
value of an input does not depend on which batch it was evaluated in.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

EVAL_CHUNK = 64
MAGIC = b"DIMNET01"
FORMAT_VERSION = 1


class ParameterFileError(Exception):
    pass


class ShapeMismatchError(ParameterFileError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture description.

    ``conv`` holds ``(channels, kernel, stride)`` triples. A spec with
    ``in_channels == 0`` has no image input and is a plain MLP on ``aux``.
    """

    in_channels: int
    in_height: int = 1
    in_width: int = 1
    aux_dim: int = 0
    conv: tuple[tuple[int, int, int], ...] = ((16, 3, 1), (32, 3, 1))
    fc: tuple[int, ...] = (48,)
    out_dim: int = 1
    dueling: bool = False
    pool: int = 2

    def __post_init__(self):
        object.__setattr__(self, "conv", tuple(tuple(int(v) for v in c) for c in self.conv))
        object.__setattr__(self, "fc", tuple(int(v) for v in self.fc))
        if self.in_channels < 0 or self.aux_dim < 0:
            raise ValueError("input sizes must be non-negative")
        if self.in_channels and (self.in_height < 1 or self.in_width < 1):
            raise ValueError("image dims must be positive")
        if self.in_channels == 0 and self.aux_dim == 0:
            raise ValueError("network needs an image or an auxiliary input")
        if any(c < 1 or k < 1 or s < 1 for c, k, s in self.conv):
            raise ValueError("conv layers need positive channels, kernel and stride")
        if any(w < 1 for w in self.fc) or self.out_dim < 1 or self.pool < 1:
            raise ValueError("layer widths must be positive")

    @property
    def conv_layers(self) -> tuple[tuple[int, int, int], ...]:
        return self.conv if self.in_channels else ()

    def conv_shapes(self) -> list[tuple[int, int, int]]:
        """Spatial (H, W, C) after each conv block, starting with the input."""
        h, w, c = self.in_height, self.in_width, self.in_channels
        shapes = [(h, w, c)]
        for ch, k, s in self.conv_layers:
            p = k // 2
            h = (h + 2 * p - k) // s + 1
            w = (w + 2 * p - k) // s + 1
            if h < 1 or w < 1:
                raise ValueError(f"conv stack collapses the {self.in_height}x{self.in_width} input")
            h, w = -(-h // self.pool), -(-w // self.pool)
            c = ch
            shapes.append((h, w, c))
        return shapes

    @property
    def feature_dim(self) -> int:
        if not self.in_channels:
            return self.aux_dim
        h, w, c = self.conv_shapes()[-1]
        return h * w * c + self.aux_dim

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        c_in = self.in_channels
        for i, (ch, k, _) in enumerate(self.conv_layers):
            shapes[f"conv{i}.w"] = (k, k, c_in, ch)
            shapes[f"conv{i}.b"] = (ch,)
            c_in = ch
        width = self.feature_dim
        for i, units in enumerate(self.fc):
            shapes[f"fc{i}.w"] = (width, units)
            shapes[f"fc{i}.b"] = (units,)
            width = units
        if self.dueling:
            shapes["value.w"] = (width, 1)
            shapes["value.b"] = (1,)
            shapes["adv.w"] = (width, self.out_dim)
            shapes["adv.b"] = (self.out_dim,)
        else:
            shapes["out.w"] = (width, self.out_dim)
            shapes["out.b"] = (self.out_dim,)
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv"] = [list(c) for c in self.conv]
        d["fc"] = list(self.fc)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        d = dict(d)
        d["conv"] = tuple(tuple(c) for c in d.get("conv", ()))
        d["fc"] = tuple(d.get("fc", ()))
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def init_params(spec: NetworkSpec, seed=0) -> dict[str, np.ndarray]:
    """Fan-in scaled uniform weights, zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            limit = 1.0 / math.sqrt(fan_in)
            params[name] = rng.uniform(-limit, limit, size=shape)
    return params


# -- layers ---------------------------------------------------------------------------------


def _pad(x, p):
    if not p:
        return x
    bsz, h, w, c = x.shape
    xp = np.zeros((bsz, h + 2 * p, w + 2 * p, c))
    xp[:, p:p + h, p:p + w, :] = x
    return xp


def _conv_forward(x, w, b, stride):
    """Same-padded convolution as a sum of ``k*k`` shifted matmuls; returns ``(out, padded input)``."""
    k = w.shape[0]
    p = k // 2
    xp = _pad(x, p)
    bsz, h, wd, _ = x.shape
    ho, wo = (h + 2 * p - k) // stride + 1, (wd + 2 * p - k) // stride + 1
    out = np.empty((bsz, ho, wo, w.shape[-1]))
    out[...] = b
    for i in range(k):
        for j in range(k):
            out += xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] @ w[i, j]
    return out, xp


def _conv_backward(dout, xp, x_shape, w, stride):
    k = w.shape[0]
    p = k // 2
    bsz, ho, wo, cout = dout.shape
    cin = x_shape[3]
    d2 = dout.reshape(-1, cout)
    dw = np.empty_like(w)
    dxp = np.zeros(xp.shape)
    for i in range(k):
        for j in range(k):
            win = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
            dw[i, j] = win.reshape(-1, cin).T @ d2
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dout @ w[i, j].T
    db = d2.sum(axis=0)
    return dxp[:, p:p + x_shape[1], p:p + x_shape[2], :], dw, db


def _pool_forward(x, size, with_index=True):
    bsz, h, w, c = x.shape
    h2, w2 = -(-h // size), -(-w // size)
    if h == h2 * size and w == w2 * size:
        xp = x
    else:
        # inputs are post-ReLU (>= 0) and each window starts on a real cell, so zero fill never wins
        xp = np.zeros((bsz, h2 * size, w2 * size, c))
        xp[:, :h, :w, :] = x
    if not with_index:
        return xp.reshape(bsz, h2, size, w2, size, c).max(axis=(2, 4)), None
    win = xp.reshape(bsz, h2, size, w2, size, c).transpose(0, 1, 3, 5, 2, 4).reshape(bsz, h2, w2, c, size * size)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_backward(dout, idx, x_shape, size):
    bsz, h, w, c = x_shape
    h2, w2 = dout.shape[1], dout.shape[2]
    grad = np.zeros((bsz, h2, w2, c, size * size))
    np.put_along_axis(grad, idx[..., None], dout[..., None], axis=-1)
    grad = grad.reshape(bsz, h2, w2, c, size, size).transpose(0, 1, 4, 2, 5, 3).reshape(bsz, h2 * size, w2 * size, c)
    return grad[:, :h, :w, :]


# -- forward / backward ---------------------------------------------------------------------


def forward(spec: NetworkSpec, params: dict, x, aux=None, keep_cache: bool = True):
    """Batch forward pass. ``x`` is ``(B, H, W, C)``; returns ``(out, cache)``.

    With ``keep_cache=False`` nothing needed for :func:`backward` is kept.
    """
    aux = _aux(spec, aux, _batch_size(spec, x, aux))
    cache: dict = {"conv": [], "fc": []}
    if spec.in_channels:
        h = np.asarray(x, dtype=np.float64)
        if h.shape[1:] != (spec.in_height, spec.in_width, spec.in_channels):
            raise ValueError(f"input shape {h.shape[1:]} does not match spec "
                             f"{(spec.in_height, spec.in_width, spec.in_channels)}")
        for i, (_, _, stride) in enumerate(spec.conv_layers):
            z, xp = _conv_forward(h, params[f"conv{i}.w"], params[f"conv{i}.b"], stride)
            a = np.maximum(z, 0.0)
            pooled, idx = _pool_forward(a, spec.pool, keep_cache)
            if keep_cache:
                cache["conv"].append((h.shape, xp, z > 0, z.shape, idx))
            h = pooled
        cache["flat_shape"] = h.shape
        feats = np.concatenate([h.reshape(len(h), -1), aux], axis=1)
    else:
        feats = aux
    h = feats
    for i in range(len(spec.fc)):
        z = h @ params[f"fc{i}.w"] + params[f"fc{i}.b"]
        if keep_cache:
            cache["fc"].append((h, z > 0))
        h = np.maximum(z, 0.0)
    cache["head_in"] = h
    if spec.dueling:
        value = h @ params["value.w"] + params["value.b"]
        adv = h @ params["adv.w"] + params["adv.b"]
        out = value + adv - adv.mean(axis=1, keepdims=True)
    else:
        out = h @ params["out.w"] + params["out.b"]
    return out, cache


def backward(spec: NetworkSpec, params: dict, cache: dict, dout) -> dict[str, np.ndarray]:
    """Parameter gradients given ``dL/dout`` (shape ``(B, out_dim)``)."""
    dout = np.asarray(dout, dtype=np.float64)
    grads: dict[str, np.ndarray] = {}
    h = cache["head_in"]
    if spec.dueling:
        dvalue = dout.sum(axis=1, keepdims=True)
        dadv = dout - dout.mean(axis=1, keepdims=True)
        grads["value.w"] = h.T @ dvalue
        grads["value.b"] = dvalue.sum(axis=0)
        grads["adv.w"] = h.T @ dadv
        grads["adv.b"] = dadv.sum(axis=0)
        dh = dvalue @ params["value.w"].T + dadv @ params["adv.w"].T
    else:
        grads["out.w"] = h.T @ dout
        grads["out.b"] = dout.sum(axis=0)
        dh = dout @ params["out.w"].T
    for i in reversed(range(len(spec.fc))):
        h_in, mask = cache["fc"][i]
        dz = dh * mask
        grads[f"fc{i}.w"] = h_in.T @ dz
        grads[f"fc{i}.b"] = dz.sum(axis=0)
        dh = dz @ params[f"fc{i}.w"].T
    if spec.in_channels:
        flat = int(np.prod(cache["flat_shape"][1:]))
        dx = dh[:, :flat].reshape(cache["flat_shape"])
        for i in reversed(range(len(spec.conv_layers))):
            x_shape, xp, mask, z_shape, idx = cache["conv"][i]
            da = _pool_backward(dx, idx, z_shape, spec.pool)
            dz = da * mask
            dx, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = _conv_backward(
                dz, xp, x_shape, params[f"conv{i}.w"], spec.conv_layers[i][2])
    return grads


def _batch_size(spec, x, aux) -> int:
    if spec.in_channels:
        return len(x)
    return len(aux)


def _aux(spec: NetworkSpec, aux, batch: int) -> np.ndarray:
    if spec.aux_dim == 0:
        return np.zeros((batch, 0))
    aux = np.asarray(aux, dtype=np.float64)
    if aux.shape != (batch, spec.aux_dim):
        raise ValueError(f"aux shape {aux.shape} does not match {(batch, spec.aux_dim)}")
    return aux


def squared_td_grad(q, targets, weights=None) -> tuple[float, np.ndarray]:
    """Loss ``mean(w * (q - y)^2) / 2`` and its gradient w.r.t. ``q`` (shape ``(B, 1)``)."""
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    err = q - np.asarray(targets, dtype=np.float64).reshape(-1)
    w = np.ones_like(err) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    n = max(len(err), 1)
    loss = float(0.5 * np.sum(w * err * err) / n)
    return loss, (w * err / n)[:, None]


# -- network wrapper ------------------------------------------------------------------------


class Network:
    def __init__(self, spec: NetworkSpec, params: dict | None = None, seed=0):
        self.spec = spec
        self.params = init_params(spec, seed) if params is None else params
        shapes = spec.param_shapes()
        if set(shapes) != set(self.params) or any(self.params[k].shape != s for k, s in shapes.items()):
            raise ShapeMismatchError("parameters do not match the network spec")

    def forward(self, x, aux=None):
        return forward(self.spec, self.params, x, aux)

    def backward(self, cache, dout):
        return backward(self.spec, self.params, cache, dout)

    def predict(self, x, aux=None) -> np.ndarray:
        """Deterministic batched evaluation, independent of batch partitioning."""
        spec = self.spec
        n = _batch_size(spec, x, aux) if (spec.in_channels or aux is not None) else 0
        out = np.empty((n, spec.out_dim))
        aux = _aux(spec, aux, n)
        for start in range(0, n, EVAL_CHUNK):
            stop = min(start + EVAL_CHUNK, n)
            m = stop - start
            xa = None
            if spec.in_channels:
                xa = np.zeros((EVAL_CHUNK, spec.in_height, spec.in_width, spec.in_channels))
                xa[:m] = x[start:stop]
            aa = np.zeros((EVAL_CHUNK, spec.aux_dim))
            aa[:m] = aux[start:stop]
            res, _ = forward(spec, self.params, xa, aa, keep_cache=False)
            out[start:stop] = res[:m]
        return out

    def copy(self) -> "Network":
        return Network(self.spec, {k: v.copy() for k, v in self.params.items()})

    def load_params_from(self, other: "Network") -> None:
        for k, v in other.params.items():
            self.params[k][...] = v


# -- optimizer ------------------------------------------------------------------------------


@dataclass
class Adam:
    """Adaptive moment estimation with bias correction."""

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict) -> dict:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            params[name] -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return params


def optimize_step(params: dict, grads: dict, opt_state: Adam) -> dict:
    return opt_state.step(params, grads)


# -- parameter files ------------------------------------------------------------------------


def save_params(path, spec: NetworkSpec, params: dict) -> None:
    """Header (magic, JSON with spec hash and layer shapes) then little-endian float64 arrays."""
    names = list(spec.param_shapes())
    header = {
        "version": FORMAT_VERSION,
        "spec": spec.to_dict(),
        "spec_hash": spec.digest(),
        "arrays": [{"name": n, "shape": list(params[n].shape), "dtype": "<f8"} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype="<f8").tobytes())


def load_params(path, spec: NetworkSpec | None = None) -> tuple[NetworkSpec, dict]:
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC or len(data) < len(MAGIC) + 4:
        raise ParameterFileError(f"{path}: not a parameter file (bad magic)")
    (hlen,) = struct.unpack("<I", data[len(MAGIC):len(MAGIC) + 4])
    start = len(MAGIC) + 4
    try:
        header = json.loads(data[start:start + hlen].decode())
        file_spec = NetworkSpec.from_dict(header["spec"])
        arrays = header["arrays"]
    except (ValueError, KeyError, TypeError) as exc:
        raise ParameterFileError(f"{path}: corrupted header ({exc})") from exc
    if header.get("version") != FORMAT_VERSION:
        raise ParameterFileError(f"{path}: unsupported format version {header.get('version')!r}")
    if header.get("spec_hash") != file_spec.digest():
        raise ParameterFileError(f"{path}: spec hash does not match the stored spec")
    if spec is not None and spec.digest() != file_spec.digest():
        want, got = spec.param_shapes(), file_spec.param_shapes()
        diffs = [f"{k}: file {got.get(k)} vs expected {want.get(k)}"
                 for k in sorted(set(want) | set(got)) if want.get(k) != got.get(k)]
        raise ShapeMismatchError(f"{path}: network spec mismatch; " + ("; ".join(diffs) or "spec fields differ"))
    offset = start + hlen
    params = {}
    for entry in arrays:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) * 8
        if offset + size > len(data):
            raise ParameterFileError(f"{path}: truncated data for {entry['name']}")
        params[entry["name"]] = np.frombuffer(data, dtype="<f8", count=int(np.prod(shape)), offset=offset).reshape(shape).astype(np.float64)
        offset += size
    if offset != len(data):
        raise ParameterFileError(f"{path}: {len(data) - offset} trailing bytes")
    expected = file_spec.param_shapes()
    if {k: v.shape for k, v in params.items()} != expected:
        raise ShapeMismatchError(f"{path}: stored arrays do not match the stored spec")
    return file_spec, params


# -- gradient check -------------------------------------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped: int
    passed: bool


def _activation_signature(spec, params, x, aux) -> tuple:
    _, cache = forward(spec, params, x, aux)
    parts = [c[2].tobytes() + c[4].tobytes() for c in cache["conv"]]
    parts += [m.tobytes() for _, m in cache["fc"]]
    return tuple(parts)


def random_spec(rng: np.random.Generator) -> NetworkSpec:
    """A small random architecture for property tests."""
    channels = int(rng.integers(0, 3))
    size = int(rng.integers(1, 6))
    conv = tuple((int(rng.integers(1, 4)), int(rng.choice([1, 3])), int(rng.integers(1, 3)))
                 for _ in range(int(rng.integers(0, 3))))
    aux = int(rng.integers(0, 4))
    if channels == 0 and aux == 0:
        aux = 2
    return NetworkSpec(
        in_channels=channels, in_height=size, in_width=int(rng.integers(1, 6)), aux_dim=aux,
        conv=conv, fc=tuple(int(rng.integers(1, 5)) for _ in range(int(rng.integers(0, 3)))),
        out_dim=int(rng.integers(1, 4)), dueling=bool(rng.integers(0, 2)),
    )


def gradient_check(spec: NetworkSpec, seed: int = 0, step: float = 1e-3, rtol: float = 1e-4,
                   batch: int = 3, backward_fn=None, params: dict | None = None) -> GradCheckResult:
    """Compare analytic gradients of a weighted squared loss with central differences.

    Components whose perturbation flips a ReLU or pooling decision are retried
    with smaller steps; if every step crosses a kink they are skipped.
    """
    rng = np.random.default_rng(seed)
    if params is None:
        params = init_params(spec, rng)
        for k in params:
            params[k] = params[k] + rng.normal(0.0, 0.1, size=params[k].shape)
    else:
        params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    x = rng.normal(size=(batch, spec.in_height, spec.in_width, spec.in_channels)) if spec.in_channels else None
    aux = rng.normal(size=(batch, spec.aux_dim)) if spec.aux_dim else None
    targets = rng.normal(size=(batch, spec.out_dim))
    weights = rng.uniform(0.5, 2.0, size=(batch, 1))

    def loss(p):
        out, _ = forward(spec, p, x, aux)
        return 0.5 * float(np.sum(weights * (out - targets) ** 2)) / batch

    out, cache = forward(spec, params, x, aux)
    bwd = backward_fn or backward
    grads = bwd(spec, params, cache, weights * (out - targets) / batch)
    base_sig = _activation_signature(spec, params, x, aux)
    worst, checked, skipped = 0.0, 0, 0
    for name, arr in params.items():
        flat = arr.reshape(-1)
        gflat = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            numeric = None
            for h in (step, step * 1e-2, step * 1e-4):
                flat[i] = orig + h
                sig_p = _activation_signature(spec, params, x, aux)
                lp = loss(params)
                flat[i] = orig - h
                sig_m = _activation_signature(spec, params, x, aux)
                lm = loss(params)
                flat[i] = orig
                if sig_p == base_sig and sig_m == base_sig:
                    numeric = (lp - lm) / (2 * h)
                    break
            if numeric is None:
                skipped += 1
                continue
            analytic = float(gflat[i])
            denom = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / denom)
            checked += 1
    return GradCheckResult(worst, checked, skipped, worst <= rtol)
