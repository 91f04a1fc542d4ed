"""
Diffkit
=======
Dense float64 tensors with a reverse-mode tape, the encoder stacks shared by
DEVI and DQN, the ADAM optimizer and the flat checkpoint container.

Usage pattern:
    tape = Tape()
    bound = bind_params(params.arrays, tape)      # registers parameters
    z = encode(params.descriptor, bound, Tensor(observations))
    loss = mean(mul(z, z))
    grads = tape.backward(loss)                   # {parameter name: ndarray}

Tensors created without a tape (or from constants only) are plain values: ops on
them compute forward results and record nothing, which is how evaluation runs.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "EncoderParams", "AdamState",
    "add", "sub", "mul", "scale", "matmul", "dense", "relu", "reshape",
    "concat_columns", "slice_rows", "select_columns",
    "reduce_max_with_argmax", "softmax_rows", "cosine_similarity_matrix", "mean",
    "stop_gradient", "conv2d_3x3", "maxpool_2x2",
    "build_encoder", "bind_params", "encode", "BoundEncoder", "adam_step",
    "save_checkpoint", "load_checkpoint", "params_digest",
]


# ── Tensor & Tape ──

class Tensor:
    """Immutable float64 array, optionally tracked by a Tape."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape: "Optional[Tape]" = None, node_id: Optional[int] = None):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def tracked(self) -> bool:
        return self.node_id is not None

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        flag = f", node={self.node_id}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{flag})"


@dataclass
class _Node:
    op: str
    inputs: tuple
    backward: Optional[Callable]
    name: Optional[str] = None


class Tape:
    """Append-only record of tracked ops; node ids are in topological order."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self.parameters: dict[str, int] = {}
        self._param_shapes: dict[str, tuple] = {}

    def __len__(self):
        return len(self._nodes)

    def parameter(self, name: str, array) -> Tensor:
        if name in self.parameters:
            raise ValueError(f"Parameter '{name}' already registered on this tape")
        node_id = len(self._nodes)
        self._nodes.append(_Node("parameter", (), None, name=name))
        self.parameters[name] = node_id
        self._param_shapes[name] = np.shape(array)
        return Tensor(array, tape=self, node_id=node_id)

    def record(self, op: str, inputs: Sequence[Tensor], data, backward: Callable) -> Tensor:
        ids = tuple(t.node_id for t in inputs)
        node_id = len(self._nodes)
        self._nodes.append(_Node(op, ids, backward))
        return Tensor(data, tape=self, node_id=node_id)

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Return d(loss)/d(parameter) for every registered parameter.

        Parameters the loss does not depend on get zero gradients.
        """
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self or not loss.tracked:
            raise ValueError("Loss was not recorded on this tape")

        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        param_grads: dict[str, np.ndarray] = {}
        for node_id in range(loss.node_id, -1, -1):
            grad = grads.pop(node_id, None)
            if grad is None:
                continue
            node = self._nodes[node_id]
            if node.op == "parameter":
                param_grads[node.name] = grad
                continue
            input_grads = node.backward(grad)
            for input_id, input_grad in zip(node.inputs, input_grads):
                if input_id is None or input_grad is None:
                    continue
                assert input_id < node_id, f"tape cycle at node {node_id} ({node.op})"
                if input_id in grads:
                    grads[input_id] = grads[input_id] + input_grad
                else:
                    grads[input_id] = input_grad

        return {name: param_grads[name] if name in param_grads else np.zeros(self._param_shapes[name])
                for name in self.parameters}


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*tensors: Tensor) -> Optional[Tape]:
    tape = None
    for t in tensors:
        if t.tracked:
            if tape is not None and t.tape is not tape:
                raise ValueError("Tensors belong to different tapes")
            tape = t.tape
    return tape


def _emit(op: str, inputs: Sequence[Tensor], data, backward: Callable) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(data)
    return tape.record(op, inputs, data, backward)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# ── Backward rules ──
# Module-level so a single rule can be swapped out in fault-injection tests.

def _add_backward(a_shape, b_shape, grad):
    return _unbroadcast(grad, a_shape), _unbroadcast(grad, b_shape)


def _sub_backward(a_shape, b_shape, grad):
    return _unbroadcast(grad, a_shape), _unbroadcast(-grad, b_shape)


def _mul_backward(a, b, grad):
    return _unbroadcast(grad * b, a.shape), _unbroadcast(grad * a, b.shape)


def _matmul_backward(a, b, grad):
    return grad @ b.T, a.T @ grad


def _relu_backward(x, grad):
    return (grad * (x > 0),)


def _softmax_backward(s, grad):
    return (s * (grad - np.sum(grad * s, axis=1, keepdims=True)),)


def _cosine_backward(a_hat, b_hat, a_norm, b_norm, grad):
    da_hat = grad @ b_hat
    db_hat = grad.T @ a_hat
    a_safe = np.where(a_norm > 0, a_norm, 1.0)
    b_safe = np.where(b_norm > 0, b_norm, 1.0)
    da = (da_hat - a_hat * np.sum(da_hat * a_hat, axis=1, keepdims=True)) / a_safe
    db = (db_hat - b_hat * np.sum(db_hat * b_hat, axis=1, keepdims=True)) / b_safe
    return da * (a_norm > 0), db * (b_norm > 0)


def _max_backward(shape, idx, grad):
    out = np.zeros(shape)
    out[np.arange(shape[0]), idx] = grad
    return (out,)


def _conv_backward(cols, w, x_shape, grad):
    n, c, h, wd = x_shape
    f = w.shape[0]
    gm = grad.reshape(n, f, h * wd)
    wm = w.reshape(f, c * 9)
    dw = np.einsum("nfp,nkp->fk", gm, cols).reshape(w.shape)
    db = gm.sum(axis=(0, 2))
    dcols = np.matmul(wm.T, gm).reshape(n, c, 9, h, wd)
    dpad = np.zeros((n, c, h + 2, wd + 2))
    for k, (di, dj) in enumerate(product(range(3), range(3))):
        dpad[:, :, di:di + h, dj:dj + wd] += dcols[:, :, k]
    return dpad[:, :, 1:-1, 1:-1], dw, db


def _maxpool_backward(x_shape, idx, grad):
    n, c, h, w = x_shape
    h2, w2 = h // 2, w // 2
    windows = np.zeros((n, c, h2, w2, 4))
    np.put_along_axis(windows, idx[..., None], grad[..., None], axis=-1)
    block = windows.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    out = np.zeros(x_shape)
    out[:, :, :h2 * 2, :w2 * 2] = block.reshape(n, c, h2 * 2, w2 * 2)
    return (out,)


# ── Forward ops ──

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data, lambda g: _add_backward(sa, sb, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data, lambda g: _sub_backward(sa, sb, g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    return _emit("mul", (a, b), a.data * b.data, lambda g: _mul_backward(a.data, b.data, g))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    return _emit("matmul", (a, b), a.data @ b.data, lambda g: _matmul_backward(a.data, b.data, g))


def dense(x, weight, bias) -> Tensor:
    """x @ weight + bias, with x of shape (m, fan_in)."""
    return add(matmul(x, weight), bias)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("relu", (a,), np.maximum(a.data, 0.0), lambda g: _relu_backward(a.data, g))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    original = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot view {original} as {shape}") from None
    return _emit("reshape", (a,), out, lambda g: (g.reshape(original),))


def concat_columns(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors or any(t.data.ndim != 2 for t in tensors):
        raise ValueError("concat_columns: needs one or more 2-D tensors")
    if len({t.shape[0] for t in tensors}) != 1:
        raise ValueError(f"concat_columns: row counts differ {[t.shape for t in tensors]}")
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=1)
    return _emit("concat_columns", tensors, out,
                 lambda g: tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors))))


def slice_rows(a, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    if not 0 <= start <= stop <= a.shape[0]:
        raise ValueError(f"slice_rows: [{start}:{stop}] out of range for {a.shape}")
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        out[start:stop] = g
        return (out,)

    return _emit("slice_rows", (a,), a.data[start:stop], backward)


def select_columns(a, columns) -> Tensor:
    """out[i] = a[i, columns[i]] for a 2-D tensor."""
    a = _as_tensor(a)
    cols = np.asarray(columns, dtype=np.int64)
    if a.data.ndim != 2 or cols.shape != (a.shape[0],):
        raise ValueError(f"select_columns: need (m, k) tensor and m columns, got {a.shape}, {cols.shape}")
    if cols.size and (cols.min() < 0 or cols.max() >= a.shape[1]):
        raise ValueError(f"select_columns: column out of range for {a.shape}")
    rows = np.arange(a.shape[0])
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        out[rows, cols] = g
        return (out,)

    return _emit("select_columns", (a,), a.data[rows, cols], backward)


def reduce_max_with_argmax(a) -> tuple[Tensor, np.ndarray]:
    """Row-wise max of a 2-D tensor; ties go to the lowest column index."""
    a = _as_tensor(a)
    if a.data.ndim != 2 or a.shape[1] == 0:
        raise ValueError(f"reduce_max_with_argmax: need a non-empty 2-D tensor, got {a.shape}")
    idx = np.argmax(a.data, axis=1)
    shape = a.shape
    values = a.data[np.arange(shape[0]), idx]
    return _emit("reduce_max", (a,), values, lambda g: _max_backward(shape, idx, g)), idx


def softmax_rows(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError(f"softmax_rows: need a 2-D tensor, got {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)
    return _emit("softmax_rows", (a,), s, lambda g: _softmax_backward(s, g))


def _row_normalize(x):
    norm = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
    return x / np.where(norm > 0, norm, 1.0), norm


def cosine_similarity_matrix(a, b) -> Tensor:
    """(m, d) x (n, d) -> (m, n) cosine similarities; cosine with a zero row is 0."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"cosine_similarity_matrix: shape mismatch {a.shape} vs {b.shape}")
    a_hat, a_norm = _row_normalize(a.data)
    b_hat, b_norm = _row_normalize(b.data)
    return _emit("cosine", (a, b), a_hat @ b_hat.T,
                 lambda g: _cosine_backward(a_hat, b_hat, a_norm, b_norm, g))


def mean(a) -> Tensor:
    a = _as_tensor(a)
    if a.size == 0:
        raise ValueError("mean of an empty tensor")
    shape, n = a.shape, a.size
    return _emit("mean", (a,), np.mean(a.data), lambda g: (np.full(shape, float(g) / n),))


def stop_gradient(a) -> Tensor:
    """Detach: same values, no path back to the tape."""
    return Tensor(_as_tensor(a).data)


def _im2col_3x3(x):
    n, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, c, 9, h, w))
    for k, (di, dj) in enumerate(product(range(3), range(3))):
        cols[:, :, k] = padded[:, :, di:di + h, dj:dj + w]
    return cols.reshape(n, c * 9, h * w)


def conv2d_3x3(x, weight, bias) -> Tensor:
    """Zero-padded ("same") 3x3 convolution. x: (N, C, H, W), weight: (F, C, 3, 3)."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.ndim != 4 or weight.data.ndim != 4 or weight.shape[1:] != (x.shape[1], 3, 3) \
            or bias.shape != (weight.shape[0],):
        raise ValueError(f"conv2d_3x3: shape mismatch x={x.shape} w={weight.shape} b={bias.shape}")
    n, c, h, w = x.shape
    f = weight.shape[0]
    cols = _im2col_3x3(x.data)
    out = np.matmul(weight.data.reshape(f, c * 9), cols) + bias.data[:, None]
    x_shape = x.shape
    return _emit("conv2d_3x3", (x, weight, bias), out.reshape(n, f, h, w),
                 lambda g: _conv_backward(cols, weight.data, x_shape, g))


def maxpool_2x2(x) -> Tensor:
    """2x2 max-pooling with stride 2; odd trailing rows/columns are dropped."""
    x = _as_tensor(x)
    if x.data.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
        raise ValueError(f"maxpool_2x2: need (N, C, H>=2, W>=2), got {x.shape}")
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    windows = (x.data[:, :, :h2 * 2, :w2 * 2]
               .reshape(n, c, h2, 2, w2, 2)
               .transpose(0, 1, 2, 4, 3, 5)
               .reshape(n, c, h2, w2, 4))
    idx = np.argmax(windows, axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    x_shape = x.shape
    return _emit("maxpool_2x2", (x,), out, lambda g: _maxpool_backward(x_shape, idx, g))


# ── Encoders ──

ENCODER_DESCRIPTORS = ("paper_conv", "small_mlp", "identity")
OBSERVATION_PIXELS = 28 * 28


@dataclass
class EncoderParams:
    """Named parameter arrays (insertion-ordered) for one encoder architecture."""
    descriptor: str
    arrays: dict = field(default_factory=dict)

    @property
    def latent_dim(self) -> int:
        if self.descriptor == "paper_conv":
            return self.arrays["dense.weight"].shape[1]
        if self.descriptor == "small_mlp":
            return self.arrays["fc2.weight"].shape[1]
        return OBSERVATION_PIXELS

    def parameter_count(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.descriptor, {k: np.array(v) for k, v in self.arrays.items()})


def _fan_in_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def build_encoder(descriptor: str, rng: Optional[np.random.Generator] = None,
                  seed: int = 0) -> EncoderParams:
    """Create freshly initialized encoder parameters.

    Weights: fan-in scaled uniform U(-sqrt(6/fan_in), sqrt(6/fan_in)); biases: zeros.
    """
    if descriptor not in ENCODER_DESCRIPTORS:
        raise ValueError(f"Unknown encoder descriptor '{descriptor}'. Expected one of {ENCODER_DESCRIPTORS}")
    rng = rng if rng is not None else np.random.default_rng(seed)
    arrays = {}
    if descriptor == "paper_conv":
        channels = 1
        for layer in range(1, 5):
            arrays[f"conv{layer}.weight"] = _fan_in_uniform(rng, (64, channels, 3, 3), channels * 9)
            arrays[f"conv{layer}.bias"] = np.zeros(64)
            channels = 64
        # 28 -> 14 -> 7 -> 3 -> 1 after four floor pools
        arrays["dense.weight"] = _fan_in_uniform(rng, (64, 100), 64)
        arrays["dense.bias"] = np.zeros(100)
    elif descriptor == "small_mlp":
        arrays["fc1.weight"] = _fan_in_uniform(rng, (OBSERVATION_PIXELS, 128), OBSERVATION_PIXELS)
        arrays["fc1.bias"] = np.zeros(128)
        arrays["fc2.weight"] = _fan_in_uniform(rng, (128, 64), 128)
        arrays["fc2.bias"] = np.zeros(64)
    return EncoderParams(descriptor, arrays)


def bind_params(arrays: dict, tape: Optional[Tape] = None, prefix: str = "") -> dict:
    """Wrap parameter arrays as Tensors; registered on `tape` when given."""
    if tape is None:
        return {name: Tensor(arr) for name, arr in arrays.items()}
    return {name: tape.parameter(prefix + name, arr) for name, arr in arrays.items()}


def encode(descriptor: str, bound: dict, observations) -> Tensor:
    """Map a batch of observations (m, 28, 28) or (m, 784) to latents (m, d)."""
    x = _as_tensor(observations)
    m = x.shape[0]
    if x.size != m * OBSERVATION_PIXELS:
        raise ValueError(f"encode: expected {OBSERVATION_PIXELS} pixels per observation, got shape {x.shape}")
    if descriptor == "identity":
        return reshape(x, (m, OBSERVATION_PIXELS))
    if descriptor == "small_mlp":
        h = reshape(x, (m, OBSERVATION_PIXELS))
        h = relu(dense(h, bound["fc1.weight"], bound["fc1.bias"]))
        return relu(dense(h, bound["fc2.weight"], bound["fc2.bias"]))
    if descriptor == "paper_conv":
        h = reshape(x, (m, 1, 28, 28))
        for layer in range(1, 5):
            h = conv2d_3x3(h, bound[f"conv{layer}.weight"], bound[f"conv{layer}.bias"])
            h = maxpool_2x2(relu(h))
        h = reshape(h, (m, h.size // m))
        return relu(dense(h, bound["dense.weight"], bound["dense.bias"]))
    raise ValueError(f"Unknown encoder descriptor '{descriptor}'")


class BoundEncoder:
    """Encoder parameters bound to a tape (trainable) or to no tape (evaluation)."""

    def __init__(self, params: EncoderParams, tape: Optional[Tape] = None, prefix: str = ""):
        self.descriptor = params.descriptor
        self.tensors = bind_params(params.arrays, tape, prefix)

    def __call__(self, observations) -> Tensor:
        return encode(self.descriptor, self.tensors, observations)


# ── ADAM ──

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected ADAM update.

    Returns:
        (new_params, new_state, applied). A non-finite gradient skips the step and
        returns the inputs unchanged with applied=False.
    """
    for name, p in params.items():
        if name not in grads or np.shape(grads[name]) != np.shape(p):
            raise ValueError(f"adam_step: gradient for '{name}' missing or shape-mismatched")
    bad = [name for name, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        print(f"[ADAM] Non-finite gradient in {bad}; step skipped")
        return params, state, False

    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = beta1 * state.m.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(t, new_m, new_v), True


# ── Checkpoint container ──

CHECKPOINT_MAGIC = b"DEVI1"


def save_checkpoint(path: str, tensors: dict, metadata: Optional[dict] = None) -> None:
    """Write named float64 tensors as DEVI1 | meta | count | (name, shape, <f8 data)*."""
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(meta)), meta, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def load_checkpoint(path: str) -> tuple[dict, dict]:
    """Inverse of save_checkpoint. Returns (tensors, metadata)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a DEVI1 checkpoint")
    pos = len(CHECKPOINT_MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise ValueError(f"{path}: truncated checkpoint")
        out = blob[pos:pos + n]
        pos += n
        return out

    (meta_len,) = struct.unpack("<I", take(4))
    metadata = json.loads(take(meta_len).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim)) if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    return tensors, metadata


def params_digest(arrays: dict) -> str:
    """SHA-256 over names, shapes and raw bytes, in insertion order."""
    h = hashlib.sha256()
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        h.update(name.encode("utf-8"))
        h.update(repr(arr.shape).encode("ascii"))
        h.update(arr.tobytes())
    return h.hexdigest()
