"""Minimal dense-network substrate used by every learned component.

Implements exactly what the lab needs and nothing more: fully connected
layers with relu/sigmoid/identity activations, reverse-mode gradients,
Adam/AdamW, the loss functions used by the causal-model and agent training
code, and a versioned binary parameter format.  Everything is float64 and
driven by explicitly passed ``numpy.random.Generator`` instances so that
runs are reproducible bit-for-bit.

All forward/backward entry points accept a single sample ``(d,)`` or a
batch ``(n, d)``; gradients of mean-reduced losses are averaged over the
batch dimension by the caller.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, ShapeError, SnapshotFormatError, StateError

ACTIVATIONS = ("relu", "sigmoid", "identity")

_CKPT_MAGIC = b"CFNN"
_CKPT_VERSION = 1


# ---------------------------------------------------------------------------
# small helpers
# ---------------------------------------------------------------------------

def one_hot(idx, n: int) -> np.ndarray:
    """One-hot encode an int or an int array -> (n,) or (len, n) float64."""
    arr = np.asarray(idx)
    if arr.ndim == 0:
        out = np.zeros(n, dtype=np.float64)
        out[int(arr)] = 1.0
        return out
    out = np.zeros((arr.shape[0], n), dtype=np.float64)
    out[np.arange(arr.shape[0]), arr.astype(int)] = 1.0
    return out


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(x, dtype=np.float64)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        # numerically stable in both tails
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    if kind == "identity":
        return z
    raise ConfigError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def _act_grad(z: np.ndarray, y: np.ndarray, kind: str) -> np.ndarray:
    """d activation / d preactivation, from preact z and output y."""
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    if kind == "sigmoid":
        return y * (1.0 - y)
    return np.ones_like(z)


# ---------------------------------------------------------------------------
# the network
# ---------------------------------------------------------------------------

@dataclass
class Layer:
    w: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    act: str


class Mlp:
    """Plain fully connected network.

    ``forward`` caches intermediate values; ``backward`` consumes that cache
    and returns per-parameter gradients plus the gradient w.r.t. the input
    (useful for chaining networks, e.g. critic -> generator).  For training
    code that needs several forward passes through the same network inside
    one update, the functional pair :meth:`run` / :meth:`grads_from` keeps
    per-pass caches explicit.
    """

    def __init__(self, sizes, activations, rng: np.random.Generator | None = None):
        if len(activations) != len(sizes) - 1:
            raise ShapeError(
                f"{len(sizes) - 1} layers but {len(activations)} activations"
            )
        for a in activations:
            if a not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {a!r}; expected one of {ACTIVATIONS}")
        if rng is None:
            rng = np.random.default_rng(0)
        self.layers: list[Layer] = []
        for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
            if act == "relu":
                limit = np.sqrt(6.0 / fan_in)  # He-uniform
            else:
                limit = np.sqrt(6.0 / (fan_in + fan_out))  # Xavier-uniform
            w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
            b = np.zeros(fan_out, dtype=np.float64)
            self.layers.append(Layer(w, b, act))
        self._cache = None

    # -- construction helpers ------------------------------------------------

    @classmethod
    def from_layers(cls, triples) -> "Mlp":
        """Build from explicit [(w, b, act), ...] (used by frozen test rigs)."""
        net = cls.__new__(cls)
        net.layers = [
            Layer(np.array(w, dtype=np.float64), np.array(b, dtype=np.float64), act)
            for w, b, act in triples
        ]
        net._cache = None
        return net

    def clone(self) -> "Mlp":
        return Mlp.from_layers([(l.w.copy(), l.b.copy(), l.act) for l in self.layers])

    def copy_from(self, other: "Mlp") -> None:
        for mine, theirs in zip(self.layers, other.layers):
            mine.w[...] = theirs.w
            mine.b[...] = theirs.b

    @property
    def in_dim(self) -> int:
        return self.layers[0].w.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].w.shape[0]

    # -- forward / backward ---------------------------------------------------

    def run(self, x: np.ndarray):
        """Functional forward: returns (output, cache)."""
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        h = x.reshape(1, -1) if squeeze else x
        if h.shape[1] != self.in_dim:
            raise ShapeError(f"input dim {h.shape[1]}, network expects {self.in_dim}")
        hs = [h]
        zs = []
        for layer in self.layers:
            z = h @ layer.w.T + layer.b
            h = _act(z, layer.act)
            zs.append(z)
            hs.append(h)
        cache = (hs, zs, squeeze)
        return (h[0] if squeeze else h), cache

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, cache = self.run(x)
        self._cache = cache
        return y

    def grads_from(self, cache, grad_out: np.ndarray):
        """Backprop an output gradient through a cached forward pass.

        Returns (param_grads, grad_in) where param_grads is [(dw, db), ...]
        aligned with ``self.layers``.
        """
        hs, zs, squeeze = cache
        g = np.asarray(grad_out, dtype=np.float64)
        if squeeze:
            g = g.reshape(1, -1)
        if g.shape != (hs[-1].shape[0], self.out_dim):
            raise ShapeError(
                f"grad_out shape {g.shape} does not match output {(hs[-1].shape[0], self.out_dim)}"
            )
        param_grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            g = g * _act_grad(zs[i], hs[i + 1], layer.act)
            dw = g.T @ hs[i]
            db = g.sum(axis=0)
            param_grads[i] = (dw, db)
            g = g @ layer.w
        grad_in = g[0] if squeeze else g
        return param_grads, grad_in

    def backward(self, grad_out: np.ndarray):
        """Backprop through the most recent :meth:`forward` call."""
        if self._cache is None:
            raise StateError("backward() before forward(): no cached activations")
        cache, self._cache = self._cache, None
        return self.grads_from(cache, grad_out)

    # -- parameter plumbing ----------------------------------------------------

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.append(layer.w)
            out.append(layer.b)
        return out

    @staticmethod
    def flatten_grads(param_grads) -> list[np.ndarray]:
        out = []
        for dw, db in param_grads:
            out.append(dw)
            out.append(db)
        return out

    @staticmethod
    def zero_grads_like(params) -> list[np.ndarray]:
        return [np.zeros_like(p) for p in params]

    @staticmethod
    def accumulate(total, extra, scale: float = 1.0):
        for t, e in zip(total, extra):
            t += scale * e
        return total


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def mse(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"mse shapes differ: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.mean(d * d))


def bce(pred: np.ndarray, target: np.ndarray, eps: float = 1e-12) -> float:
    pred = np.clip(np.asarray(pred, dtype=np.float64), eps, 1.0 - eps)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"bce shapes differ: {pred.shape} vs {target.shape}")
    return float(np.mean(-(target * np.log(pred) + (1.0 - target) * np.log(1.0 - pred))))


def kl_div(p: np.ndarray, q: np.ndarray, q_floor: float = 1e-8) -> float:
    """KL(p || q) for discrete distributions.

    Accepts a single distribution ``(n,)`` or a row-stack ``(m, n)`` (result
    is the mean over rows).  Inputs must be non-negative and sum to one
    within 1e-6, otherwise a :class:`DomainError` is raised.  ``q`` is floored
    at ``q_floor`` so that a zero cell yields a large-but-finite divergence;
    cells with ``p == 0`` contribute exactly zero.
    """
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    if p.shape != q.shape:
        raise ShapeError(f"kl_div shapes differ: {p.shape} vs {q.shape}")
    for name, dist in (("p", p), ("q", q)):
        if np.any(dist < -1e-12):
            raise DomainError(f"kl_div: {name} has negative entries")
        sums = dist.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-6):
            raise DomainError(f"kl_div: {name} rows must sum to 1 (got {sums})")
    qc = np.maximum(q, q_floor)
    terms = np.where(p > 0.0, p * (np.log(np.maximum(p, 1e-300)) - np.log(qc)), 0.0)
    return float(np.mean(terms.sum(axis=1)))


def monotonicity_penalty(net: Mlp) -> float:
    """Sum of max(0, -w) over every weight matrix entry (biases excluded).

    Zero exactly when all weights are non-negative, which together with the
    non-decreasing activations makes the network monotone in each input --
    the structural property that keeps noise inference well-posed.
    """
    total = 0.0
    for layer in net.layers:
        total += float(np.sum(np.maximum(0.0, -layer.w)))
    return total


def monotonicity_penalty_grads(net: Mlp) -> list[tuple[np.ndarray, np.ndarray]]:
    """Subgradient of :func:`monotonicity_penalty` in backward() layout."""
    grads = []
    for layer in net.layers:
        dw = np.where(layer.w < 0.0, -1.0, 0.0)
        grads.append((dw, np.zeros_like(layer.b)))
    return grads


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

@dataclass
class Adam:
    """Adam with bias correction; state is lazily shaped on the first step."""

    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0  # ignored here; see AdamW
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    kind = "adam"

    def _ensure_state(self, params):
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        elif len(self.m) != len(params):
            raise ShapeError("optimizer state does not match parameter list")

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]):
        """Update params in place (and return them)."""
        if len(params) != len(grads):
            raise ShapeError("params/grads length mismatch")
        self._ensure_state(params)
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.kind == "adamw" and self.weight_decay:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * update
        return params


@dataclass
class AdamW(Adam):
    """Adam with decoupled weight decay (decay applied to params, not grads)."""

    weight_decay: float = 0.01
    kind = "adamw"


def opt_step(opt: Adam, params, grads):
    """Functional alias kept for symmetry with the rest of the op surface."""
    return opt.step(params, grads)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------
#
# Layout: magic "CFNN" | u16 version | u32 manifest_len | manifest json |
# concatenated float64 buffers (row-major w then b per layer).  The manifest
# records layer shapes and activations; load verifies sizes before touching
# the payload.

def save_mlp(net: Mlp, path) -> None:
    manifest = {
        "layers": [
            {"in": int(l.w.shape[1]), "out": int(l.w.shape[0]), "act": l.act}
            for l in net.layers
        ],
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<HI", _CKPT_VERSION, len(blob)))
        fh.write(blob)
        for layer in net.layers:
            fh.write(np.ascontiguousarray(layer.w, dtype=np.float64).tobytes())
            fh.write(np.ascontiguousarray(layer.b, dtype=np.float64).tobytes())


def load_mlp(path) -> Mlp:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 10 or raw[:4] != _CKPT_MAGIC:
        raise SnapshotFormatError("not a network checkpoint (bad magic)")
    version, mlen = struct.unpack_from("<HI", raw, 4)
    if version != _CKPT_VERSION:
        raise SnapshotFormatError(f"checkpoint version {version} unsupported")
    off = 10
    try:
        manifest = json.loads(raw[off : off + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SnapshotFormatError(f"corrupt checkpoint manifest: {exc}") from exc
    off += mlen
    triples = []
    for spec in manifest["layers"]:
        fan_in, fan_out, act = int(spec["in"]), int(spec["out"]), spec["act"]
        if act not in ACTIVATIONS:
            raise SnapshotFormatError(f"unknown activation {act!r} in checkpoint")
        w_bytes = fan_in * fan_out * 8
        b_bytes = fan_out * 8
        if off + w_bytes + b_bytes > len(raw):
            raise SnapshotFormatError("checkpoint payload shorter than manifest claims")
        w = np.frombuffer(raw, dtype=np.float64, count=fan_in * fan_out, offset=off)
        off += w_bytes
        b = np.frombuffer(raw, dtype=np.float64, count=fan_out, offset=off)
        off += b_bytes
        triples.append((w.reshape(fan_out, fan_in).copy(), b.copy(), act))
    if off != len(raw):
        raise SnapshotFormatError("trailing bytes after checkpoint payload")
    return Mlp.from_layers(triples)
