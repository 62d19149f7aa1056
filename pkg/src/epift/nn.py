"""Neural building blocks: parameter sets, backbones, and checkpoint IO."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class ConfigError(ValueError):
    """Model configuration does not match data or checkpoint."""


class ParamSet:
    """Ordered name -> Tensor map; iteration follows declaration order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name, t, trainable=True):
        if name in self._params:
            raise ConfigError(f"duplicate parameter name: {name}")
        self._params[name] = t
        self._trainable[name] = trainable

    def __getitem__(self, name):
        return self._params[name]

    def __setitem__(self, name, t):
        if name not in self._params:
            raise ConfigError(f"unknown parameter name: {name}")
        self._params[name] = t

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return list(self._params.items())

    def tensors(self):
        return list(self._params.values())

    def trainable_items(self):
        return [(n, t) for n, t in self._params.items() if self._trainable[n]]

    def clone(self):
        """Deep copy sharing no storage; clones stay leaf tensors."""
        out = ParamSet()
        for n, t in self._params.items():
            out.add(n, Tensor(t.data.copy(), requires_grad=t.requires_grad),
                    trainable=self._trainable[n])
        return out

    def checksum(self):
        h = hashlib.sha256()
        for n, t in self._params.items():
            h.update(n.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


@dataclass
class BackboneSpec:
    """Architecture description; output layout is 'flat' (PN/MN) or 'map' (CAN)."""

    kind: str = "conv4"                      # conv4 | resnet12-lite
    input_shape: tuple = (128, 64)           # (mel bins, frames)
    widths: tuple = (64, 64, 64, 64)
    embed_mode: str = "flat"                 # flat | map
    dtype: type = np.float32

    def __post_init__(self):
        if self.kind not in ("conv4", "resnet12-lite"):
            raise ConfigError(f"unknown backbone kind: {self.kind}")
        if self.embed_mode not in ("flat", "map"):
            raise ConfigError(f"unknown embed mode: {self.embed_mode}")
        if len(self.widths) != 4:
            raise ConfigError("backbone needs exactly 4 channel widths")

    def output_shape(self):
        """(channels, h, w) after the 4 pooling stages (floor halving)."""
        h, w = self.input_shape
        for _ in range(4):
            h, w = h // 2, w // 2
        return (self.widths[-1], h, w)

    def embed_dim(self):
        c, h, w = self.output_shape()
        return c * h * w


def _trunc_normal(rng, shape, sigma=0.02):
    x = rng.normal(0.0, sigma, size=shape)
    bad = np.abs(x) > 2 * sigma
    while bad.any():
        x[bad] = rng.normal(0.0, sigma, size=int(bad.sum()))
        bad = np.abs(x) > 2 * sigma
    return x


def _add_conv(params, name, c_in, c_out, k, rng, dtype):
    params.add(f"{name}.weight",
               Tensor(_trunc_normal(rng, (c_out, c_in, k, k)).astype(dtype), requires_grad=True))
    params.add(f"{name}.bias", Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True))


def _add_norm(params, name, c, dtype):
    params.add(f"{name}.gamma", Tensor(np.ones(c, dtype=dtype), requires_grad=True))
    params.add(f"{name}.beta", Tensor(np.zeros(c, dtype=dtype), requires_grad=True))


def init_backbone(spec: BackboneSpec, rng, n_train_classes=None):
    """Build a fresh ParamSet for the spec; optionally with a global classifier head."""
    p = ParamSet()
    dtype = spec.dtype
    if spec.kind == "conv4":
        c_in = 1
        for i, c_out in enumerate(spec.widths):
            _add_conv(p, f"block{i}.conv", c_in, c_out, 3, rng, dtype)
            _add_norm(p, f"block{i}.norm", c_out, dtype)
            c_in = c_out
    else:  # resnet12-lite
        c_in = 1
        for i, c_out in enumerate(spec.widths):
            for j in range(3):
                _add_conv(p, f"stage{i}.conv{j}", c_in if j == 0 else c_out, c_out, 3, rng, dtype)
                _add_norm(p, f"stage{i}.norm{j}", c_out, dtype)
            _add_conv(p, f"stage{i}.skip", c_in, c_out, 1, rng, dtype)
            _add_norm(p, f"stage{i}.skipnorm", c_out, dtype)
            c_in = c_out
    if n_train_classes is not None:
        if n_train_classes < 2:
            raise ConfigError("global classifier needs at least 2 training classes")
        d = spec.embed_dim()
        p.add("global.weight",
              Tensor(_trunc_normal(rng, (d, n_train_classes)).astype(dtype), requires_grad=True))
        p.add("global.bias", Tensor(np.zeros(n_train_classes, dtype=dtype), requires_grad=True))
    return p


def fit_input(features, spec: BackboneSpec):
    """Center-crop overlong frame axes, zero-pad short ones, to the spec's input shape."""
    bins, frames = spec.input_shape
    f = np.asarray(features)
    if f.shape[0] != bins:
        raise ShapeError(f"feature has {f.shape[0]} bins, spec wants {bins}")
    n = f.shape[1]
    if n > frames:
        start = (n - frames) // 2
        f = f[:, start:start + frames]
    elif n < frames:
        f = np.pad(f, ((0, 0), (0, frames - n)))
    return f.astype(spec.dtype)


def _conv_block(x, p, name):
    x = T.conv2d(x, p[f"{name}.conv.weight"], p[f"{name}.conv.bias"], pad=1)
    x = T.batch_norm(x, p[f"{name}.norm.gamma"], p[f"{name}.norm.beta"])
    x = T.relu(x)
    return T.max_pool2x2(x)


def _res_stage(x, p, name):
    h = x
    for j in range(3):
        h = T.conv2d(h, p[f"{name}.conv{j}.weight"], p[f"{name}.conv{j}.bias"], pad=1)
        h = T.batch_norm(h, p[f"{name}.norm{j}.gamma"], p[f"{name}.norm{j}.beta"])
        if j < 2:
            h = T.relu(h)
    s = T.conv2d(x, p[f"{name}.skip.weight"], p[f"{name}.skip.bias"])
    s = T.batch_norm(s, p[f"{name}.skipnorm.gamma"], p[f"{name}.skipnorm.beta"])
    return T.max_pool2x2(T.relu(h + s))


def embed(params: ParamSet, batch, spec: BackboneSpec):
    """Map a (B, 1, bins, frames) batch to embeddings.

    Returns (B, d) in flat mode or (B, c, h, w) in map mode. Normalization uses
    current-batch statistics only, so the call is pure given (params, batch).
    """
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=spec.dtype))
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != tuple(spec.input_shape):
        raise ShapeError(
            f"embed: batch shape {x.shape} does not match spec input "
            f"(B, 1, {spec.input_shape[0]}, {spec.input_shape[1]})")
    if spec.kind == "conv4":
        for i in range(4):
            x = _conv_block(x, params, f"block{i}")
    else:
        for i in range(4):
            x = _res_stage(x, params, f"stage{i}")
    if spec.embed_mode == "flat":
        return T.reshape(x, (x.shape[0], -1))
    return x


def global_classifier(params: ParamSet, embeddings):
    """Logits over all training classes from flat embeddings."""
    if "global.weight" not in params:
        raise ConfigError("no global classifier in this parameter set")
    w = params["global.weight"]
    if embeddings.shape[-1] != w.shape[0]:
        raise ConfigError(
            f"global classifier expects dim {w.shape[0]}, got {embeddings.shape[-1]}")
    return T.matmul(embeddings, w) + params["global.bias"]


# -- checkpoint IO --------------------------------------------------------
#
# Layout: a text manifest ("tensor <name> <d0,d1,...> <dtype> <offset>" per
# entry), a "data" separator line, then the raw little-endian arrays at the
# stated offsets. Round-trips bit-exactly.

_MAGIC = "epift-checkpoint v1"
_DTYPES = {"float32": "<f4", "float64": "<f8"}


def save_checkpoint(path, named_tensors):
    """Write an ordered iterable of (name, Tensor|ndarray) pairs."""
    entries, blobs, off = [], [], 0
    for name, t in named_tensors:
        a = np.asarray(t.data if isinstance(t, Tensor) else t)
        # ascontiguousarray promotes 0-d to 1-d; restore the original shape
        a = np.ascontiguousarray(a).reshape(a.shape)
        code = _DTYPES[a.dtype.name]
        raw = a.astype(code, copy=False).tobytes()
        dims = ",".join(str(d) for d in a.shape) if a.ndim else "-"
        entries.append(f"tensor {name} {dims} {a.dtype.name} {off}")
        blobs.append(raw)
        off += len(raw)
    with open(path, "wb") as f:
        f.write((_MAGIC + "\n").encode())
        for e in entries:
            f.write((e + "\n").encode())
        f.write(b"data\n")
        for b in blobs:
            f.write(b)


def load_checkpoint(path):
    """Read back an ordered dict name -> ndarray."""
    with open(path, "rb") as f:
        raw = f.read()
    nl = raw.index(b"\n")
    if raw[:nl].decode() != _MAGIC:
        raise ConfigError(f"{path}: not an epift checkpoint")
    pos, entries = nl + 1, []
    while True:
        nl = raw.index(b"\n", pos)
        line = raw[pos:nl].decode()
        pos = nl + 1
        if line == "data":
            break
        _, name, dims, dtype, off = line.split(" ")
        shape = () if dims == "-" else tuple(int(d) for d in dims.split(","))
        entries.append((name, shape, dtype, int(off)))
    out = {}
    for name, shape, dtype, off in entries:
        code = _DTYPES[dtype]
        count = int(np.prod(shape)) if shape else 1
        a = np.frombuffer(raw, dtype=code, count=count, offset=pos + off)
        out[name] = a.reshape(shape).astype(dtype)
    return out


def params_to_checkpoint(path, params: ParamSet, curvature=None):
    """Save a ParamSet, plus optional curvature tensors under 'curvature/'."""
    named = list(params.items())
    if curvature is not None:
        named += [(f"curvature/{n}", t) for n, t in curvature]
    save_checkpoint(path, named)


def checkpoint_to_params(path):
    """Split a checkpoint into (param arrays, curvature arrays)."""
    arrays = load_checkpoint(path)
    params, curv = {}, {}
    for name, a in arrays.items():
        if name.startswith("curvature/"):
            curv[name[len("curvature/"):]] = a
        else:
            params[name] = a
    return params, curv
