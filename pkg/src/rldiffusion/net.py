"""Fully convolutional policy/value network with a shared trunk.

Parameters live in numpy arrays; torch is used only as the convolution and
vector-Jacobian engine (tensors are zero-copy views of the arrays). The trunk
is ``trunk_layers`` 3x3 convolutions with ReLU and replicate padding, so the
output maps have the input's spatial size. Two 1x1 heads produce 9 policy
logits and 1 value per pixel.
"""
import struct
import zlib
from dataclasses import dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F

from .env import N_ACTIONS
from .image import _write_atomic

PARAMS_MAGIC = b"RDNP"
PARAMS_VERSION = 1
_DTYPES = {"float32": (np.float32, torch.float32, 4), "float64": (np.float64, torch.float64, 8)}


class ParamsFormatError(ValueError):
    """Parameter file is corrupt, truncated, or of another version/config."""


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class NetConfig:
    trunk_layers: int = 4
    trunk_channels: int = 32
    # False gives the policy and value heads separate trunks
    shared_trunk: bool = True
    dtype: str = "float32"
    seed: int = 0
    zero_heads: bool = True

    def __post_init__(self):
        if self.trunk_layers < 1 or self.trunk_channels < 1:
            raise ValueError("trunk_layers and trunk_channels must be positive")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {tuple(_DTYPES)}")


@dataclass
class NetworkParams:
    cfg: NetConfig
    arrays: dict  # name -> np.ndarray, in declaration order

    def copy(self):
        return NetworkParams(self.cfg, {k: v.copy() for k, v in self.arrays.items()})

    def astype(self, dtype):
        cfg = NetConfig(**{**_cfg_dict(self.cfg), "dtype": dtype})
        np_dtype = _DTYPES[dtype][0]
        return NetworkParams(cfg, {k: v.astype(np_dtype) for k, v in self.arrays.items()})

    def n_params(self):
        return sum(v.size for v in self.arrays.values())


def _cfg_dict(cfg):
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}


def _trunks(cfg):
    return ("trunk",) if cfg.shared_trunk else ("ptrunk", "vtrunk")


def param_shapes(cfg):
    """Ordered (name, shape) list that fixes the file layout."""
    c = cfg.trunk_channels
    shapes = []
    for trunk in _trunks(cfg):
        for i in range(cfg.trunk_layers):
            shapes.append((f"{trunk}.{i}.w", (c, 1 if i == 0 else c, 3, 3)))
            shapes.append((f"{trunk}.{i}.b", (c,)))
    shapes += [
        ("policy.w", (N_ACTIONS, c, 1, 1)), ("policy.b", (N_ACTIONS,)),
        ("value.w", (1, c, 1, 1)), ("value.b", (1,)),
    ]
    return shapes


def init_params(cfg):
    """He-normal trunk weights, zero biases; heads zeroed unless ``cfg.zero_heads`` is off."""
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    np_dtype = _DTYPES[cfg.dtype][0]
    arrays = {}
    for name, shape in param_shapes(cfg):
        is_head = name.startswith(("policy.", "value."))
        if name.endswith(".b") or (is_head and cfg.zero_heads):
            arr = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            arr = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        arrays[name] = arr.astype(np_dtype)
    return NetworkParams(cfg, arrays)


def _as_batch(params, s):
    s = np.asarray(s)
    if s.ndim not in (2, 3):
        raise ValueError(f"state must be (H, W) or (B, H, W), got {s.shape}")
    batched = s.ndim == 3
    x = torch.from_numpy(np.ascontiguousarray(s, dtype=_DTYPES[params.cfg.dtype][0]))
    x = x.reshape((-1, 1) + s.shape[-2:])
    return x, batched


def _trunk_forward(t, prefix, n_layers, x, check):
    h = x
    for i in range(n_layers):
        h = F.relu(F.conv2d(F.pad(h, (1, 1, 1, 1), mode="replicate"), t[f"{prefix}.{i}.w"], t[f"{prefix}.{i}.b"]))
        if check and not torch.isfinite(h).all():
            raise NumericError(f"non-finite activation in {prefix} layer {i}")
    return h


def _apply(params, t, x, check=False):
    """Return (log-probabilities (B, 9, H, W), values (B, H, W)) as torch tensors.

    Only the outputs are checked for finiteness; on failure the pass is
    repeated layer by layer to name the first offending layer.
    """
    cfg = params.cfg
    if cfg.shared_trunk:
        hp = hv = _trunk_forward(t, "trunk", cfg.trunk_layers, x, check)
    else:
        hp = _trunk_forward(t, "ptrunk", cfg.trunk_layers, x, check)
        hv = _trunk_forward(t, "vtrunk", cfg.trunk_layers, x, check)
    logits = F.conv2d(hp, t["policy.w"], t["policy.b"])
    value = F.conv2d(hv, t["value.w"], t["value.b"])[:, 0]
    if not (torch.isfinite(logits).all() and torch.isfinite(value).all()):
        if not check:
            with torch.no_grad():
                _apply(params, t, x, check=True)
        raise NumericError(f"non-finite head output (layer {cfg.trunk_layers})")
    return F.log_softmax(logits, dim=1), value


def _unbatch(arr, batched):
    return arr if batched else arr[0]


def forward_logp(params, s):
    """Per-pixel log-probabilities (..., H, W, 9) and values (..., H, W)."""
    x, batched = _as_batch(params, s)
    t = {k: torch.from_numpy(v) for k, v in params.arrays.items()}
    with torch.no_grad():
        logp, value = _apply(params, t, x)
    logp = logp.permute(0, 2, 3, 1).numpy().astype(np.float64)
    return _unbatch(logp, batched), _unbatch(value.numpy().astype(np.float64), batched)


def forward(params, s):
    """Policy map (..., H, W, 9) of action probabilities and value map (..., H, W)."""
    logp, value = forward_logp(params, s)
    return np.exp(logp), value


def _vjp(params, s, value_grad, policy_grad, on_logp):
    x, batched = _as_batch(params, s)
    spatial = tuple(x.shape[-2:])
    lead = (x.shape[0],) if batched else ()
    t = {k: torch.from_numpy(v).requires_grad_(True) for k, v in params.arrays.items()}
    logp, value = _apply(params, t, x)
    torch_dtype = _DTYPES[params.cfg.dtype][1]
    outs, cots = [], []
    if policy_grad is not None:
        policy_grad = np.asarray(policy_grad)
        if policy_grad.shape != lead + spatial + (N_ACTIONS,):
            raise ValueError(f"policy cotangent shape {policy_grad.shape}, expected {lead + spatial + (N_ACTIONS,)}")
        out = logp if on_logp else logp.exp()
        outs.append(out)
        cot = torch.from_numpy(np.ascontiguousarray(policy_grad)).to(torch_dtype)
        cots.append(cot.reshape((-1,) + spatial + (N_ACTIONS,)).permute(0, 3, 1, 2))
    if value_grad is not None:
        value_grad = np.asarray(value_grad)
        if value_grad.shape != lead + spatial:
            raise ValueError(f"value cotangent shape {value_grad.shape}, expected {lead + spatial}")
        outs.append(value)
        cots.append(torch.from_numpy(np.ascontiguousarray(value_grad)).to(torch_dtype).reshape(value.shape))
    names = list(t)
    if not outs:
        return {k: np.zeros_like(v) for k, v in params.arrays.items()}
    grads = torch.autograd.grad(outs, [t[k] for k in names], cots, allow_unused=True)
    return {
        k: (np.zeros_like(params.arrays[k]) if g is None else g.numpy().copy())
        for k, g in zip(names, grads)
    }


def backward(params, s, policy_grad=None, value_grad=None):
    """Gradient of <policy map, policy_grad> + <value map, value_grad> w.r.t. every parameter.

    ``policy_grad`` is the cotangent of the action probabilities, shaped like
    the policy map returned by :func:`forward`.
    """
    return _vjp(params, s, value_grad, policy_grad, on_logp=False)


def backward_logp(params, s, logp_grad=None, value_grad=None):
    """As :func:`backward`, with the cotangent taken on log-probabilities."""
    return _vjp(params, s, value_grad, logp_grad, on_logp=True)


class Tape:
    """Records forward passes so one vector-Jacobian product can follow.

    The trainer evaluates the policy during the rollout and later needs
    gradients at exactly those states; keeping the graph avoids a second
    forward pass.
    """

    def __init__(self, params):
        self.params = params
        self.tensors = {k: torch.from_numpy(v).requires_grad_(True) for k, v in params.arrays.items()}
        self.records = []

    def forward_logp(self, s):
        x, batched = _as_batch(self.params, s)
        logp, value = _apply(self.params, self.tensors, x)
        self.records.append((logp, value, batched))
        with torch.no_grad():
            lp = logp.detach().permute(0, 2, 3, 1).numpy().astype(np.float64)
            v = value.detach().numpy().astype(np.float64)
        return _unbatch(lp, batched), _unbatch(v, batched)

    def backward(self, logp_grads, value_grads):
        """Gradient of sum_k <logp_k, logp_grads[k]> + <V_k, value_grads[k]> over recorded passes."""
        if len(logp_grads) != len(self.records) or len(value_grads) != len(self.records):
            raise ValueError("need one cotangent per recorded forward pass")
        torch_dtype = _DTYPES[self.params.cfg.dtype][1]
        outs, cots = [], []
        for (logp, value, batched), lg, vg in zip(self.records, logp_grads, value_grads):
            lg = np.asarray(lg) if batched else np.asarray(lg)[None]
            vg = np.asarray(vg) if batched else np.asarray(vg)[None]
            if lg.shape != (logp.shape[0],) + tuple(logp.shape[2:]) + (N_ACTIONS,) or vg.shape != tuple(value.shape):
                raise ValueError("cotangent shape does not match recorded outputs")
            outs += [logp, value]
            cots += [torch.from_numpy(np.ascontiguousarray(lg)).to(torch_dtype).permute(0, 3, 1, 2),
                     torch.from_numpy(np.ascontiguousarray(vg)).to(torch_dtype)]
        names = list(self.tensors)
        grads = torch.autograd.grad(outs, [self.tensors[k] for k in names], cots, allow_unused=True)
        self.records = []
        return {k: (np.zeros_like(self.params.arrays[k]) if g is None else g.numpy().copy())
                for k, g in zip(names, grads)}


# -- serialization -------------------------------------------------------------

_HEADER = struct.Struct("<4sIIIBBBBq")


def params_to_bytes(params):
    cfg = params.cfg
    itemsize = _DTYPES[cfg.dtype][2]
    out = [_HEADER.pack(PARAMS_MAGIC, PARAMS_VERSION, cfg.trunk_layers, cfg.trunk_channels,
                        int(cfg.shared_trunk), itemsize, int(cfg.zero_heads), 0, cfg.seed)]
    np_dtype = np.dtype(_DTYPES[cfg.dtype][0]).newbyteorder("<")
    for name, shape in param_shapes(cfg):
        arr = params.arrays[name]
        if arr.shape != shape:
            raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
        out.append(np.ascontiguousarray(arr, dtype=np_dtype).tobytes())
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


def params_from_bytes(buf, expect=None):
    """Parse a parameter blob; returns (params, bytes consumed)."""
    if len(buf) < _HEADER.size:
        raise ParamsFormatError("truncated parameter header")
    magic, version, layers, channels, shared, itemsize, zero_heads, _, seed = _HEADER.unpack_from(buf)
    if magic != PARAMS_MAGIC:
        raise ParamsFormatError(f"bad magic {magic!r}")
    if version != PARAMS_VERSION:
        raise ParamsFormatError(f"unsupported parameter file version {version}")
    dtype = {4: "float32", 8: "float64"}.get(itemsize)
    if dtype is None:
        raise ParamsFormatError(f"bad element size {itemsize}")
    cfg = NetConfig(trunk_layers=layers, trunk_channels=channels, shared_trunk=bool(shared),
                    dtype=dtype, seed=seed, zero_heads=bool(zero_heads))
    if expect is not None:
        mismatched = [f.name for f in fields(cfg)
                      if f.name not in ("seed", "zero_heads") and getattr(cfg, f.name) != getattr(expect, f.name)]
        if mismatched:
            detail = ", ".join(f"{n}: file={getattr(cfg, n)!r} expected={getattr(expect, n)!r}" for n in mismatched)
            raise ParamsFormatError(f"network config mismatch ({detail})")
    np_dtype = np.dtype(_DTYPES[dtype][0]).newbyteorder("<")
    pos = _HEADER.size
    arrays = {}
    for name, shape in param_shapes(cfg):
        nbytes = int(np.prod(shape)) * itemsize
        if pos + nbytes > len(buf):
            raise ParamsFormatError(f"truncated parameter data at {name}")
        arrays[name] = np.frombuffer(buf, dtype=np_dtype, count=int(np.prod(shape)), offset=pos) \
            .reshape(shape).astype(_DTYPES[dtype][0])
        pos += nbytes
    if pos + 4 > len(buf):
        raise ParamsFormatError("truncated parameter checksum")
    (crc,) = struct.unpack_from("<I", buf, pos)
    if crc != zlib.crc32(buf[:pos]):
        raise ParamsFormatError("parameter checksum mismatch (corrupt file)")
    return NetworkParams(cfg, arrays), pos + 4


def save_params(params, path):
    _write_atomic(path, params_to_bytes(params))


def load_params(path, expect=None):
    with open(path, "rb") as fh:
        buf = fh.read()
    params, _ = params_from_bytes(buf, expect)
    return params
