"""Permutation-invariant point cloud classifier, float64 numpy throughout.

Architecture: a shared per-point MLP 3 -> 64 -> 128 -> 256 with ReLU,
coordinate-wise max pooling over the points of each cloud, then a head
256 -> 128 -> C with one ReLU. Gradients are hand-derived reverse mode; the
max pool routes each feature's gradient to the lowest-index point attaining
the maximum. No normalization layers, no dropout, no input alignment.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

POINT_SIZES = (3, 64, 128, 256)
HEAD_HIDDEN = 128
PARAM_KEYS = ("w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4", "w5", "b5")

CHECKPOINT_MAGIC = b"MCC\x01"
CHECKPOINT_VERSION = 1

# How many clouds go through one packed forward pass at a time.
EVAL_CHUNK = 256


def init_params(class_count, rng):
    """Create the parameter dict for a class_count-way classifier.

    Weights are uniform on (-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.
    Weight matrices are drawn in PARAM_KEYS order, so a given rng state
    yields one exact parameter set.
    """
    if class_count < 2:
        raise ValueError(f"need at least 2 classes, got {class_count}")
    dims = {
        "w1": (3, 64),
        "w2": (64, 128),
        "w3": (128, 256),
        "w4": (256, HEAD_HIDDEN),
        "w5": (HEAD_HIDDEN, class_count),
    }
    params = {}
    for key in PARAM_KEYS:
        if key.startswith("w"):
            fan_in, fan_out = dims[key]
            bound = 1.0 / np.sqrt(fan_in)
            params[key] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        else:
            fan_out = dims["w" + key[1]][1]
            params[key] = np.zeros(fan_out)
    return params


def class_count_of(params):
    return params["b5"].shape[0]


def _pack(clouds):
    """Concatenate clouds into one (total, 3) block plus segment starts."""
    sizes = []
    for pts in clouds:
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
            raise ValueError(f"bad cloud shape {pts.shape}")
        sizes.append(pts.shape[0])
    packed = np.concatenate(clouds, axis=0).astype(np.float64, copy=False)
    starts = np.concatenate(([0], np.cumsum(sizes)[:-1])).astype(np.intp)
    return packed, starts


def _forward_packed(params, pts, starts):
    """Run the network on packed points; returns activations for backprop."""
    h1 = np.maximum(pts @ params["w1"] + params["b1"], 0.0)
    h2 = np.maximum(h1 @ params["w2"] + params["b2"], 0.0)
    h3 = np.maximum(h2 @ params["w3"] + params["b3"], 0.0)
    pooled = np.maximum.reduceat(h3, starts, axis=0)
    h4 = np.maximum(pooled @ params["w4"] + params["b4"], 0.0)
    logits = h4 @ params["w5"] + params["b5"]
    return h1, h2, h3, pooled, h4, logits


def logits_batch(params, clouds):
    """Logits for a sequence of clouds, shape (len(clouds), C)."""
    out = []
    for lo in range(0, len(clouds), EVAL_CHUNK):
        chunk = list(clouds[lo : lo + EVAL_CHUNK])
        pts, starts = _pack(chunk)
        out.append(_forward_packed(params, pts, starts)[-1])
    return np.concatenate(out, axis=0)


def forward(params, points):
    """Logits for a single cloud, shape (C,)."""
    pts, starts = _pack([np.asarray(points, dtype=np.float64)])
    return _forward_packed(params, pts, starts)[-1][0]


def _cross_entropy(logits, labels):
    """Mean cross entropy and the softmax matrix (stable log-sum-exp)."""
    shift = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shift)
    total = exp.sum(axis=1, keepdims=True)
    log_p = shift - np.log(total)
    loss = -log_p[np.arange(len(labels)), labels].mean()
    return loss, exp / total


def loss_batch(params, clouds, labels):
    """Mean cross entropy of the batch."""
    labels = np.asarray(labels)
    logits = logits_batch(params, clouds)
    return float(_cross_entropy(logits, labels)[0])


def loss_and_grad(params, clouds, labels):
    """Mean cross entropy plus its exact gradient for every parameter.

    Returns:
        (loss, grads) where grads has the same keys and shapes as params.
    """
    labels = np.asarray(labels)
    pts, starts = _pack(list(clouds))
    h1, h2, h3, pooled, h4, logits = _forward_packed(params, pts, starts)
    loss, softmax = _cross_entropy(logits, labels)
    batch = len(labels)

    d_logits = softmax.copy()
    d_logits[np.arange(batch), labels] -= 1.0
    d_logits /= batch

    grads = {}
    grads["w5"] = h4.T @ d_logits
    grads["b5"] = d_logits.sum(axis=0)
    d_h4 = d_logits @ params["w5"].T
    d_z4 = d_h4 * (h4 > 0.0)
    grads["w4"] = pooled.T @ d_z4
    grads["b4"] = d_z4.sum(axis=0)
    d_pooled = d_z4 @ params["w4"].T

    # Max pool: each feature's gradient goes to the first point attaining
    # the segment maximum; argmax takes the lowest index on ties.
    d_h3 = np.zeros_like(h3)
    ends = np.concatenate((starts[1:], [len(pts)]))
    cols = np.arange(h3.shape[1])
    for i in range(batch):
        seg = h3[starts[i] : ends[i]]
        d_h3[starts[i] + seg.argmax(axis=0), cols] = d_pooled[i]

    d_z3 = d_h3 * (h3 > 0.0)
    grads["w3"] = h2.T @ d_z3
    grads["b3"] = d_z3.sum(axis=0)
    d_h2 = d_z3 @ params["w3"].T
    d_z2 = d_h2 * (h2 > 0.0)
    grads["w2"] = h1.T @ d_z2
    grads["b2"] = d_z2.sum(axis=0)
    d_h1 = d_z2 @ params["w2"].T
    d_z1 = d_h1 * (h1 > 0.0)
    grads["w1"] = pts.T @ d_z1
    grads["b1"] = d_z1.sum(axis=0)
    return float(loss), {key: grads[key] for key in PARAM_KEYS}


def evaluate(params, clouds, labels):
    """Mean cross entropy and accuracy over a labeled cloud list."""
    labels = np.asarray(labels)
    logits = logits_batch(params, clouds)
    loss, _ = _cross_entropy(logits, labels)
    accuracy = float((logits.argmax(axis=1) == labels).mean())
    return float(loss), accuracy


def sgd_step(params, grads, lr):
    """One plain gradient step; returns a new parameter dict."""
    return {key: params[key] - lr * grads[key] for key in params}


@dataclass
class AdamState:
    """First/second moment accumulators plus the step counter."""

    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params):
    return AdamState(
        m={key: np.zeros_like(params[key]) for key in params},
        v={key: np.zeros_like(params[key]) for key in params},
    )


def adam_step(state, params, grads, lr):
    """One bias-corrected Adam step; returns (new_state, new_params)."""
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    m, v, out = {}, {}, {}
    for key in params:
        m[key] = b1 * state.m[key] + (1.0 - b1) * grads[key]
        v[key] = b2 * state.v[key] + (1.0 - b2) * grads[key] ** 2
        m_hat = m[key] / (1.0 - b1**t)
        v_hat = v[key] / (1.0 - b2**t)
        out[key] = params[key] - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(m=m, v=v, step=t, beta1=b1, beta2=b2, eps=state.eps)
    return new_state, out


def save_checkpoint(path, params, adam_state, class_names):
    """Write params + Adam state to a versioned binary file.

    Layout: 4-byte magic, little-endian u32 header length, minified JSON
    header (version, class names, Adam scalars, array shapes in order),
    then the raw float64 little-endian array buffers in header order.
    Identical inputs produce identical bytes; loading round-trips bit
    exactly.
    """
    arrays = []
    for group, source in (("param", params), ("adam_m", adam_state.m), ("adam_v", adam_state.v)):
        for key in PARAM_KEYS:
            arrays.append((f"{group}/{key}", np.ascontiguousarray(source[key], dtype=np.float64)))
    header = {
        "version": CHECKPOINT_VERSION,
        "class_names": list(class_names),
        "adam": {
            "step": adam_state.step,
            "beta1": adam_state.beta1,
            "beta2": adam_state.beta2,
            "eps": adam_state.eps,
        },
        "arrays": [[name, list(arr.shape)] for name, arr in arrays],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in arrays:
            fh.write(arr.astype("<f8", copy=False).tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (params, adam_state, class_names)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode())
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header['version']}")
        groups = {"param": {}, "adam_m": {}, "adam_v": {}}
        for name, shape in header["arrays"]:
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ValueError(f"{path}: truncated checkpoint")
            group, key = name.split("/")
            groups[group][key] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    adam = AdamState(
        m=groups["adam_m"],
        v=groups["adam_v"],
        step=header["adam"]["step"],
        beta1=header["adam"]["beta1"],
        beta2=header["adam"]["beta2"],
        eps=header["adam"]["eps"],
    )
    return groups["param"], adam, header["class_names"]
