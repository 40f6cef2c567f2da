"""Minimal float32 neural-network stack: MLP, single-cell LSTM with BPTT,
Adam, and a named-tensor checkpoint format.

All parameters live in float32 numpy arrays. Backward passes are hand-written
reverse-mode gradients, checked against finite differences in the test suite.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

F32 = np.float32


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ShapeError(CheckpointError):
    pass


class CorruptError(CheckpointError):
    pass


def _act(name: str, x: np.ndarray) -> np.ndarray:
    if name == "linear":
        return x
    if name == "tanh":
        return np.tanh(x)
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-x))
    if name == "sigmoid2":  # 2*sigmoid, range (0, 2)
        return 2.0 / (1.0 + np.exp(-x))
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name: str, y: np.ndarray) -> np.ndarray:
    """Derivative expressed via the activation output y."""
    if name == "linear":
        return np.ones_like(y)
    if name == "tanh":
        return 1.0 - y * y
    if name == "sigmoid":
        return y * (1.0 - y)
    if name == "sigmoid2":
        return y * (1.0 - 0.5 * y)
    raise ValueError(f"unknown activation {name!r}")


def glorot_init(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_out, fan_in)).astype(F32)


@dataclass
class Mlp:
    """Fully connected net with tanh hidden layers."""

    sizes: tuple
    weights: list
    biases: list
    out_act: str = "linear"

    @staticmethod
    def init(sizes, rng: np.random.Generator, out_act: str = "linear") -> "Mlp":
        sizes = tuple(int(s) for s in sizes)
        ws = [glorot_init(rng, sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)]
        bs = [np.zeros(sizes[i + 1], dtype=F32) for i in range(len(sizes) - 1)]
        return Mlp(sizes, ws, bs, out_act)

    def params(self, prefix: str = "") -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}W{i}"] = w
            out[f"{prefix}b{i}"] = b
        return out


def mlp_forward(mlp: Mlp, x: np.ndarray) -> np.ndarray:
    y, _ = mlp_forward_cache(mlp, x)
    return y


def mlp_forward_cache(mlp: Mlp, x: np.ndarray):
    """Forward pass keeping layer activations for the backward pass.

    x may be a single input (d,) or a batch (n, d).
    """
    x = np.asarray(x, dtype=F32)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != mlp.sizes[0]:
        raise ShapeError(f"input width {h.shape[1]} != {mlp.sizes[0]}")
    acts = [h]
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        z = h @ w.T + b
        h = _act(mlp.out_act if i == last else "tanh", z)
        acts.append(h)
    y = acts[-1][0] if single else acts[-1]
    return y, (acts, single)


def mlp_backward(mlp: Mlp, cache, dy: np.ndarray):
    """Gradients of sum(dy * output) w.r.t. parameters and input."""
    acts, single = cache
    g = np.asarray(dy, dtype=F32)
    if single:
        g = g[None, :]
    grads_w = [None] * len(mlp.weights)
    grads_b = [None] * len(mlp.weights)
    last = len(mlp.weights) - 1
    for i in range(last, -1, -1):
        act_name = mlp.out_act if i == last else "tanh"
        g = g * _act_grad(act_name, acts[i + 1])
        grads_w[i] = (g.T @ acts[i]).astype(F32)
        grads_b[i] = g.sum(axis=0).astype(F32)
        g = g @ mlp.weights[i]
    dx = g[0] if single else g
    grads = {}
    for i in range(len(mlp.weights)):
        grads[f"W{i}"] = grads_w[i]
        grads[f"b{i}"] = grads_b[i]
    return grads, dx


@dataclass
class Lstm:
    """One LSTM cell plus a tanh hidden layer and a linear output head.

    Gate order in the stacked matrices is [input, forget, cell, output].
    """

    input_size: int
    hidden_size: int
    W: np.ndarray  # (4H, D)
    U: np.ndarray  # (4H, H)
    b: np.ndarray  # (4H,)
    fc_W: np.ndarray
    fc_b: np.ndarray
    head_W: np.ndarray
    head_b: np.ndarray

    @staticmethod
    def init(input_size: int, output_size: int, rng: np.random.Generator,
             hidden_size: int = 100, fc_size: int = 100) -> "Lstm":
        H, D = hidden_size, input_size
        W = glorot_init(rng, 4 * H, D)
        U = glorot_init(rng, 4 * H, H)
        b = np.zeros(4 * H, dtype=F32)
        b[H:2 * H] = 1.0  # forget-gate bias stabilizes early BPTT
        return Lstm(D, H, W, U, b,
                    glorot_init(rng, fc_size, H), np.zeros(fc_size, dtype=F32),
                    glorot_init(rng, output_size, fc_size),
                    np.zeros(output_size, dtype=F32))

    def params(self, prefix: str = "") -> dict:
        return {f"{prefix}W": self.W, f"{prefix}U": self.U, f"{prefix}b": self.b,
                f"{prefix}fc_W": self.fc_W, f"{prefix}fc_b": self.fc_b,
                f"{prefix}head_W": self.head_W, f"{prefix}head_b": self.head_b}


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def lstm_forward_cache(lstm: Lstm, seq: np.ndarray):
    """Run the recurrence over seq and apply the head to the final hidden state.

    seq is (T, D) for one sequence or (B, T, D) for a batch.
    Returns (output, cache) with output (out,) or (B, out).
    """
    seq = np.asarray(seq, dtype=F32)
    single = seq.ndim == 2
    x = seq[None] if single else seq
    B, T, D = x.shape
    if T < 1:
        raise ShapeError("sequence must be nonempty")
    if D != lstm.input_size:
        raise ShapeError(f"input width {D} != {lstm.input_size}")
    H = lstm.hidden_size
    h = np.zeros((B, H), dtype=F32)
    c = np.zeros((B, H), dtype=F32)
    steps = []
    for t in range(T):
        z = x[:, t] @ lstm.W.T + h @ lstm.U.T + lstm.b
        i = _sigmoid(z[:, 0:H])
        f = _sigmoid(z[:, H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o = _sigmoid(z[:, 3 * H:4 * H])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        steps.append((h, c, i, f, g, o, tc))
        h, c = h_new, c_new
    fc = np.tanh(h @ lstm.fc_W.T + lstm.fc_b)
    y = fc @ lstm.head_W.T + lstm.head_b
    out = y[0] if single else y
    return out, (x, steps, h, fc, single)


def lstm_forward(lstm: Lstm, seq: np.ndarray) -> np.ndarray:
    y, _ = lstm_forward_cache(lstm, seq)
    return y


def lstm_backward(lstm: Lstm, cache, dy: np.ndarray) -> dict:
    """Backpropagation through time; returns parameter gradients."""
    x, steps, h_last, fc, single = cache
    g = np.asarray(dy, dtype=F32)
    if single:
        g = g[None, :]
    B, T, D = x.shape
    H = lstm.hidden_size
    d_head_W = (g.T @ fc).astype(F32)
    d_head_b = g.sum(axis=0).astype(F32)
    g_fc = (g @ lstm.head_W) * (1.0 - fc * fc)
    d_fc_W = (g_fc.T @ h_last).astype(F32)
    d_fc_b = g_fc.sum(axis=0).astype(F32)
    dh = g_fc @ lstm.fc_W
    dc = np.zeros((B, H), dtype=F32)
    dW = np.zeros_like(lstm.W)
    dU = np.zeros_like(lstm.U)
    db = np.zeros_like(lstm.b)
    for t in range(T - 1, -1, -1):
        h_prev, c_prev, i, f, gg, o, tc = steps[t]
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        di = dc * gg
        dg = dc * i
        df = dc * c_prev
        dz = np.concatenate(
            [di * i * (1.0 - i), df * f * (1.0 - f),
             dg * (1.0 - gg * gg), do * o * (1.0 - o)], axis=1)
        dW += dz.T @ x[:, t]
        dU += dz.T @ h_prev
        db += dz.sum(axis=0)
        dh = dz @ lstm.U
        dc = dc * f
    return {"W": dW, "U": dU, "b": db, "fc_W": d_fc_W, "fc_b": d_fc_b,
            "head_W": d_head_W, "head_b": d_head_b}


@dataclass
class AdamState:
    """Bias-corrected Adam over a named parameter dict."""

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_init(params: dict, lr: float = 3e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    st = AdamState(lr, beta1, beta2, eps)
    for k, p in params.items():
        st.m[k] = np.zeros_like(p)
        st.v[k] = np.zeros_like(p)
    return st


def adam_step(params: dict, grads: dict, st: AdamState) -> None:
    """In-place Adam update of the named parameter arrays."""
    st.step_count += 1
    t = st.step_count
    bc1 = 1.0 - st.beta1 ** t
    bc2 = 1.0 - st.beta2 ** t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.shape} for {k}")
        st.m[k] = st.beta1 * st.m[k] + (1.0 - st.beta1) * g
        st.v[k] = st.beta2 * st.v[k] + (1.0 - st.beta2) * (g * g)
        m_hat = st.m[k] / bc1
        v_hat = st.v[k] / bc2
        p -= (st.lr * m_hat / (np.sqrt(v_hat) + st.eps)).astype(p.dtype)


# ---------------------------------------------------------------------------
# Checkpoint format "CNN1": named float32 tensor table + trailing CRC32.

CKPT_MAGIC = b"CNN1"
CKPT_VERSION = 1


def save_checkpoint(path: str, tensors: dict) -> None:
    body = bytearray()
    body += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        body += struct.pack("<H", len(nb)) + nb
        body += struct.pack("<B", a.ndim)
        body += struct.pack(f"<{a.ndim}I", *a.shape) if a.ndim else b""
        body += a.tobytes()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<H", CKPT_VERSION))
        f.write(bytes(body))
        f.write(struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF))


def load_checkpoint(path: str, expect: dict | None = None) -> dict:
    """Load a named tensor table. `expect` maps names to required shapes."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 6 or raw[:4] != CKPT_MAGIC:
        raise BadMagicError(f"not a checkpoint file: {path}")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != CKPT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    if len(raw) < 10:
        raise TruncatedError("checkpoint shorter than header")
    body, crc_bytes = raw[6:-4], raw[-4:]
    (crc_stored,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise CorruptError("checkpoint CRC mismatch")
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(body):
            raise TruncatedError("checkpoint payload truncated")
        chunk = body[off:off + n]
        off += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        n_el = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * n_el), dtype="<f4").reshape(dims).copy()
        out[name] = arr
    if expect is not None:
        for name, shape in expect.items():
            if name not in out:
                raise ShapeError(f"checkpoint missing tensor {name!r}")
            if tuple(out[name].shape) != tuple(shape):
                raise ShapeError(
                    f"tensor {name!r} has shape {out[name].shape}, expected {shape}")
    return out


def mlp_from_tensors(tensors: dict, prefix: str, out_act: str = "linear") -> Mlp:
    ws, bs = [], []
    i = 0
    while f"{prefix}W{i}" in tensors:
        ws.append(tensors[f"{prefix}W{i}"].copy())
        bs.append(tensors[f"{prefix}b{i}"].copy())
        i += 1
    if not ws:
        raise ShapeError(f"no MLP tensors under prefix {prefix!r}")
    sizes = (ws[0].shape[1],) + tuple(w.shape[0] for w in ws)
    return Mlp(sizes, ws, bs, out_act)


def lstm_from_tensors(tensors: dict, prefix: str = "") -> Lstm:
    W = tensors[f"{prefix}W"].copy()
    U = tensors[f"{prefix}U"].copy()
    H = U.shape[1]
    if W.shape[0] != 4 * H:
        raise ShapeError("inconsistent LSTM gate shapes")
    return Lstm(W.shape[1], H, W, U, tensors[f"{prefix}b"].copy(),
                tensors[f"{prefix}fc_W"].copy(), tensors[f"{prefix}fc_b"].copy(),
                tensors[f"{prefix}head_W"].copy(), tensors[f"{prefix}head_b"].copy())
