"""Trainable map from raw feature vectors to unit-norm embeddings.

The default encoder is a single linear layer followed by row-wise L2
normalization; an optional tanh hidden layer sits behind the hidden_dim
flag. Backward passes are hand-written chain rule (the normalization
Jacobian annihilates each row's radial direction), and the optimizer is a
pure-function Adam with classical L2 weight decay added into the gradient.

Checkpoint format (bit-exact)
-----------------------------
Linear encoder, 16-byte header then float64 little-endian payload:

    bytes 0-3   magic b"RSM1"
    bytes 4-7   uint32 LE  d_in
    bytes 8-11  uint32 LE  d_out
    bytes 12-15 uint32 LE  flags (bit 0: bias present)
    then        weight, C-order (d_in * d_out doubles)
    then        bias (d_out doubles, only when flag set)

Hidden-layer encoder: magic b"RSM2", 20-byte header with uint32 LE fields
d_in, hidden, d_out, flags, then weight_in, weight_out, bias payloads in
that order.
"""

import struct
from dataclasses import dataclass, replace

import numpy as np

from .linalg import normalize_rows, project_out_radial
from .ranking import EmbeddingBatch

__all__ = [
    "EncoderParams",
    "TwoLayerParams",
    "AdamState",
    "CheckpointFormatError",
    "init_encoder",
    "param_arrays",
    "encode",
    "encode_backward",
    "adam_step",
    "save_encoder",
    "load_encoder",
]

_MAGIC_LINEAR = b"RSM1"
_MAGIC_HIDDEN = b"RSM2"


class CheckpointFormatError(ValueError):
    """A checkpoint file does not match the documented binary layout."""


@dataclass(frozen=True)
class EncoderParams:
    """Single linear projection: weight (d_in, d_out), optional bias."""

    weight: np.ndarray
    bias: np.ndarray | None = None

    @property
    def d_in(self):
        return self.weight.shape[0]

    @property
    def d_out(self):
        return self.weight.shape[1]


@dataclass(frozen=True)
class TwoLayerParams:
    """Optional variant: linear, tanh, linear, then normalization."""

    weight_in: np.ndarray
    weight_out: np.ndarray
    bias: np.ndarray | None = None

    @property
    def d_in(self):
        return self.weight_in.shape[0]

    @property
    def hidden(self):
        return self.weight_in.shape[1]

    @property
    def d_out(self):
        return self.weight_out.shape[1]


def init_encoder(d_in, d_out, seed, bias=False, hidden_dim=None):
    """Fresh encoder parameters, uniform in +-1/sqrt(fan_in) per layer."""
    rng = np.random.default_rng(seed)
    if hidden_dim is None:
        bound = 1.0 / np.sqrt(d_in)
        weight = rng.uniform(-bound, bound, size=(d_in, d_out))
        return EncoderParams(weight=weight, bias=np.zeros(d_out) if bias else None)
    bound_in = 1.0 / np.sqrt(d_in)
    bound_out = 1.0 / np.sqrt(hidden_dim)
    return TwoLayerParams(
        weight_in=rng.uniform(-bound_in, bound_in, size=(d_in, hidden_dim)),
        weight_out=rng.uniform(-bound_out, bound_out, size=(hidden_dim, d_out)),
        bias=np.zeros(d_out) if bias else None,
    )


def param_arrays(params):
    """Named parameter arrays, in a fixed order."""
    if isinstance(params, EncoderParams):
        out = {"weight": params.weight}
    else:
        out = {"weight_in": params.weight_in, "weight_out": params.weight_out}
    if params.bias is not None:
        out["bias"] = params.bias
    return out


def _forward(features, params):
    x = np.asarray(features, dtype=np.float64)
    if isinstance(params, EncoderParams):
        z = x @ params.weight
        hidden = None
    else:
        hidden = np.tanh(x @ params.weight_in)
        z = hidden @ params.weight_out
    if params.bias is not None:
        z = z + params.bias
    return x, hidden, z


def encode(features, class_ids, params):
    """Project features and L2-normalize each row into an EmbeddingBatch.

    A row that projects to (near) zero cannot be normalized and raises,
    naming the row. Scaling the weights leaves the output unchanged.
    """
    _, _, z = _forward(features, params)
    unit, _ = normalize_rows(z)
    return EmbeddingBatch(unit, class_ids)


def encode_backward(features, params, upstream_grad):
    """Gradients of a loss w.r.t. the encoder parameters.

    upstream_grad is d loss / d embedding rows (the normalized output).
    Returns a dict matching param_arrays(params).
    """
    x, hidden, z = _forward(features, params)
    unit, norms = normalize_rows(z)
    grad_z = project_out_radial(unit, norms, np.asarray(upstream_grad, dtype=np.float64))
    if isinstance(params, EncoderParams):
        grads = {"weight": x.T @ grad_z}
    else:
        grad_hidden = grad_z @ params.weight_out.T
        grad_pre = grad_hidden * (1.0 - hidden**2)
        grads = {"weight_in": x.T @ grad_pre, "weight_out": hidden.T @ grad_z}
    if params.bias is not None:
        grads["bias"] = grad_z.sum(axis=0)
    return grads


@dataclass(frozen=True)
class AdamState:
    """Optimizer moments and hyperparameters; advanced functionally."""

    moment1: dict
    moment2: dict
    step_count: int
    lr: float = 1e-5
    weight_decay: float = 4e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def initial(cls, params, lr=1e-5, weight_decay=4e-5, beta1=0.9, beta2=0.999, eps=1e-8):
        arrays = param_arrays(params)
        return cls(
            moment1={k: np.zeros_like(v) for k, v in arrays.items()},
            moment2={k: np.zeros_like(v) for k, v in arrays.items()},
            step_count=0,
            lr=lr,
            weight_decay=weight_decay,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(params, grads, state):
    """One bias-corrected Adam update; returns (new params, new state).

    Weight decay enters as an additive lambda * param term in the gradient
    (classical L2 placement). Pure: inputs are left untouched.
    """
    arrays = param_arrays(params)
    if set(grads) != set(arrays):
        raise ValueError(f"gradient keys {sorted(grads)} do not match params {sorted(arrays)}")
    t = state.step_count + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    new_arrays, new_m1, new_m2 = {}, {}, {}
    for name in arrays:
        p = arrays[name]
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.shape} for {name!r}")
        if state.weight_decay:
            g = g + state.weight_decay * p
        m1 = state.beta1 * state.moment1[name] + (1.0 - state.beta1) * g
        m2 = state.beta2 * state.moment2[name] + (1.0 - state.beta2) * (g * g)
        update = (m1 / bc1) / (np.sqrt(m2 / bc2) + state.eps)
        new_arrays[name] = p - state.lr * update
        new_m1[name] = m1
        new_m2[name] = m2
    new_state = replace(state, moment1=new_m1, moment2=new_m2, step_count=t)
    if isinstance(params, EncoderParams):
        new_params = EncoderParams(weight=new_arrays["weight"], bias=new_arrays.get("bias"))
    else:
        new_params = TwoLayerParams(
            weight_in=new_arrays["weight_in"],
            weight_out=new_arrays["weight_out"],
            bias=new_arrays.get("bias"),
        )
    return new_params, new_state


def _le64(arr):
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_encoder(path, params):
    """Write params in the documented little-endian binary layout."""
    flags = 1 if params.bias is not None else 0
    with open(path, "wb") as fh:
        if isinstance(params, EncoderParams):
            fh.write(struct.pack("<4sIII", _MAGIC_LINEAR, params.d_in, params.d_out, flags))
            fh.write(_le64(params.weight))
        else:
            fh.write(
                struct.pack(
                    "<4sIIII", _MAGIC_HIDDEN, params.d_in, params.hidden, params.d_out, flags
                )
            )
            fh.write(_le64(params.weight_in))
            fh.write(_le64(params.weight_out))
        if params.bias is not None:
            fh.write(_le64(params.bias))


def _read_doubles(fh, count, what):
    raw = fh.read(8 * count)
    if len(raw) != 8 * count:
        raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def load_encoder(path):
    """Read a checkpoint written by save_encoder."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic == _MAGIC_LINEAR:
            header = fh.read(12)
            if len(header) != 12:
                raise CheckpointFormatError("truncated header")
            d_in, d_out, flags = struct.unpack("<III", header)
            weight = _read_doubles(fh, d_in * d_out, "weight").reshape(d_in, d_out)
            bias = _read_doubles(fh, d_out, "bias") if flags & 1 else None
            params = EncoderParams(weight=weight, bias=bias)
        elif magic == _MAGIC_HIDDEN:
            header = fh.read(16)
            if len(header) != 16:
                raise CheckpointFormatError("truncated header")
            d_in, hidden, d_out, flags = struct.unpack("<IIII", header)
            weight_in = _read_doubles(fh, d_in * hidden, "weight_in").reshape(d_in, hidden)
            weight_out = _read_doubles(fh, hidden * d_out, "weight_out").reshape(hidden, d_out)
            bias = _read_doubles(fh, d_out, "bias") if flags & 1 else None
            params = TwoLayerParams(weight_in=weight_in, weight_out=weight_out, bias=bias)
        else:
            raise CheckpointFormatError(f"bad magic {magic!r}; expected RSM1 or RSM2")
        if fh.read(1):
            raise CheckpointFormatError("trailing bytes after checkpoint payload")
    return params
