"""Small dense-network engine: shared trunk, named linear heads, exact backprop.

Weights are stored as ``(fan_in, fan_out)`` matrices so a layer is
``z = a @ W + b``.  A head reads either the last trunk activation or the
logits of another head (used by adversaries that sit on top of the
classifier output).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ACTIVATIONS = ("relu", "identity")
HEAD_ROLES = ("task", "adversary")
TRUNK = "trunk"

CHECKPOINT_MAGIC = b"SKBM"


class NonFiniteError(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


@dataclass(frozen=True)
class HeadSpec:
    name: str
    width: int
    role: str = "task"
    source: str = TRUNK
    hidden: tuple = ()
    # how a head reading another head sees it: raw logits or softmax probabilities
    input_transform: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))
        if self.input_transform not in ("identity", "softmax"):
            raise ValueError(f"head {self.name!r}: input_transform is 'identity' or 'softmax'")
        if self.input_transform == "softmax" and self.source == TRUNK:
            raise ValueError(f"head {self.name!r}: softmax input needs another head as source")

    def to_dict(self):
        return {"name": self.name, "width": self.width, "role": self.role, "source": self.source,
                "hidden": list(self.hidden), "input_transform": self.input_transform}


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    trunk: tuple = ()
    heads: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "trunk", tuple((int(w), str(a)) for w, a in self.trunk))
        object.__setattr__(
            self, "heads",
            tuple(h if isinstance(h, HeadSpec) else HeadSpec(**h) for h in self.heads),
        )
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        for width, act in self.trunk:
            if width < 1:
                raise ValueError(f"trunk width must be positive, got {width}")
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        names = [h.name for h in self.heads]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate head names: {names}")
        if not any(h.role == "task" for h in self.heads):
            raise ValueError("network needs at least one task head")
        for h in self.heads:
            if h.role not in HEAD_ROLES:
                raise ValueError(f"unknown head role {h.role!r}")
            if h.source != TRUNK and h.source not in names:
                raise ValueError(f"head {h.name!r} reads from unknown source {h.source!r}")
        self.head_order()  # rejects cycles

    @property
    def feature_dim(self):
        return self.trunk[-1][0] if self.trunk else self.input_dim

    def head(self, name) -> HeadSpec:
        for h in self.heads:
            if h.name == name:
                return h
        raise KeyError(name)

    def head_order(self):
        """Heads sorted so every source comes before its readers."""
        done, order = set(), []
        pending = list(self.heads)
        while pending:
            progressed = False
            for h in list(pending):
                if h.source == TRUNK or h.source in done:
                    order.append(h)
                    done.add(h.name)
                    pending.remove(h)
                    progressed = True
            if not progressed:
                raise ValueError("head sources form a cycle")
        return order

    def in_width(self, head: HeadSpec):
        return self.feature_dim if head.source == TRUNK else self.head(head.source).width

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "trunk": [list(t) for t in self.trunk],
            "heads": [h.to_dict() for h in self.heads],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(input_dim=d["input_dim"], trunk=tuple(map(tuple, d["trunk"])),
                   heads=tuple(HeadSpec(**{**h, "hidden": tuple(h.get("hidden", ()))}) for h in d["heads"]))


def trunk_key(i, kind):
    return f"trunk.{i}.{kind}"


def head_key(name, kind):
    return f"head.{name}.{kind}"


@dataclass
class Network:
    spec: NetworkSpec
    params: dict = field(default_factory=dict)

    def copy(self):
        return Network(self.spec, {k: v.copy() for k, v in self.params.items()})

    def head_params(self, name):
        prefix = f"head.{name}."
        return [k for k in self.params if k.startswith(prefix)]

    def trunk_params(self):
        return [k for k in self.params if k.startswith("trunk.")]

    def n_params(self):
        return int(sum(v.size for v in self.params.values()))

    def flat(self, keys=None):
        keys = list(self.params) if keys is None else keys
        if not keys:
            return np.zeros(0)
        return np.concatenate([self.params[k].ravel() for k in keys])


def init_network(spec: NetworkSpec, seed, dtype=np.float64) -> Network:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    fan_in = spec.input_dim
    for i, (width, _) in enumerate(spec.trunk):
        a = np.sqrt(6.0 / (fan_in + width))
        params[trunk_key(i, "W")] = rng.uniform(-a, a, size=(fan_in, width)).astype(dtype)
        params[trunk_key(i, "b")] = np.zeros(width, dtype=dtype)
        fan_in = width
    for h in spec.heads:
        n_in = spec.in_width(h)
        for j, width in enumerate(h.hidden):
            a = np.sqrt(6.0 / (n_in + width))
            params[head_key(h.name, f"{j}.W")] = rng.uniform(-a, a, size=(n_in, width)).astype(dtype)
            params[head_key(h.name, f"{j}.b")] = np.zeros(width, dtype=dtype)
            n_in = width
        a = np.sqrt(6.0 / (n_in + h.width))
        params[head_key(h.name, "W")] = rng.uniform(-a, a, size=(n_in, h.width)).astype(dtype)
        params[head_key(h.name, "b")] = np.zeros(h.width, dtype=dtype)
    return Network(spec, params)


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    pre: list
    acts: list
    logits: dict
    head_pre: dict = field(default_factory=dict)
    head_acts: dict = field(default_factory=dict)
    head_inputs: dict = field(default_factory=dict)

    @property
    def features(self):
        """Penultimate representation (last trunk activation)."""
        return self.acts[-1] if self.acts else self.inputs


def _activate(z, kind):
    return np.maximum(z, 0.0) if kind == "relu" else z


def forward(net: Network, batch) -> ForwardTrace:
    x = np.asarray(batch)
    if x.ndim != 2 or x.shape[1] != net.spec.input_dim:
        raise ValueError(f"expected batch of shape (n, {net.spec.input_dim}), got {x.shape}")
    pre, acts = [], []
    a = x
    for i, (_, kind) in enumerate(net.spec.trunk):
        z = a @ net.params[trunk_key(i, "W")] + net.params[trunk_key(i, "b")]
        a = _activate(z, kind)
        pre.append(z)
        acts.append(a)
    feats = a
    logits, head_pre, head_acts, head_inputs = {}, {}, {}, {}
    for h in net.spec.head_order():
        a = feats if h.source == TRUNK else logits[h.source]
        if h.input_transform == "softmax":
            a = softmax(a)
        head_inputs[h.name] = a
        hp, ha = [], []
        for j in range(len(h.hidden)):
            z = a @ net.params[head_key(h.name, f"{j}.W")] + net.params[head_key(h.name, f"{j}.b")]
            a = np.maximum(z, 0.0)
            hp.append(z)
            ha.append(a)
        head_pre[h.name], head_acts[h.name] = hp, ha
        logits[h.name] = a @ net.params[head_key(h.name, "W")] + net.params[head_key(h.name, "b")]
    return ForwardTrace(x, pre, acts, logits, head_pre, head_acts, head_inputs)


def backward(net: Network, trace: ForwardTrace, head_grads: dict) -> dict:
    """Gradients of the scalar loss whose logit gradients are ``head_grads``.

    Heads missing from ``head_grads`` get zero upstream gradient and receive
    exactly zero parameter gradients (unless a reader head pushes gradient
    into them).
    """
    spec = net.spec
    if not head_grads:
        raise ValueError("need a gradient for at least one head")
    n = trace.inputs.shape[0]
    upstream = {}
    for name, g in head_grads.items():
        width = spec.head(name).width
        g = np.asarray(g)
        if g.shape != (n, width):
            raise ValueError(f"gradient for head {name!r} has shape {g.shape}, expected {(n, width)}")
        upstream[name] = g

    grads = {k: np.zeros_like(v) for k, v in net.params.items()}
    feats = trace.features
    d_feats = None
    for h in reversed(spec.head_order()):
        g = upstream.get(h.name)
        if g is None:
            continue
        src = trace.head_inputs[h.name]
        hidden_acts = trace.head_acts.get(h.name, [])
        top_in = hidden_acts[-1] if hidden_acts else src
        grads[head_key(h.name, "W")] = top_in.T @ g
        grads[head_key(h.name, "b")] = g.sum(axis=0)
        d_src = g @ net.params[head_key(h.name, "W")].T
        for j in reversed(range(len(h.hidden))):
            dz = d_src * (trace.head_pre[h.name][j] > 0)
            a_in = hidden_acts[j - 1] if j > 0 else src
            grads[head_key(h.name, f"{j}.W")] = a_in.T @ dz
            grads[head_key(h.name, f"{j}.b")] = dz.sum(axis=0)
            d_src = dz @ net.params[head_key(h.name, f"{j}.W")].T
        if h.source == TRUNK:
            d_feats = d_src if d_feats is None else d_feats + d_src
        else:
            if h.input_transform == "softmax":
                d_src = src * (d_src - (d_src * src).sum(axis=1, keepdims=True))
            upstream[h.source] = upstream[h.source] + d_src if h.source in upstream else d_src

    if d_feats is None:
        return grads
    da = d_feats
    for i in reversed(range(len(spec.trunk))):
        kind = spec.trunk[i][1]
        dz = da * (trace.pre[i] > 0) if kind == "relu" else da
        a_prev = trace.acts[i - 1] if i > 0 else trace.inputs
        grads[trunk_key(i, "W")] = a_prev.T @ dz
        grads[trunk_key(i, "b")] = dz.sum(axis=0)
        if i > 0:
            da = dz @ net.params[trunk_key(i, "W")].T
    return grads


def log_softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(z, axis=-1):
    return np.exp(log_softmax(z, axis=axis))


def softmax_xent(logits, target):
    """Cross-entropy of one logit vector against a class index.

    Returns ``(loss, dlogits)`` with ``dlogits = softmax(logits) - onehot``.
    """
    logits = np.asarray(logits, dtype=float)
    lp = log_softmax(logits)
    d = np.exp(lp)
    d[target] -= 1.0
    return float(-lp[target]), d


def softmax_xent_batch(logits, targets, weights=None):
    """Batched cross-entropy, reduced as ``sum(w_i * loss_i) / n``."""
    n = logits.shape[0]
    lp = log_softmax(logits)
    rows = np.arange(n)
    losses = -lp[rows, targets]
    d = np.exp(lp)
    d[rows, targets] -= 1.0
    if weights is not None:
        losses = losses * weights
        d *= weights[:, None]
    return float(losses.sum() / n), d / n


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid_bce(logits, targets):
    """Mean binary cross-entropy with logits, in the overflow-safe form."""
    z = np.asarray(logits, dtype=float)
    t = np.asarray(targets, dtype=float)
    if z.shape != t.shape:
        raise ValueError(f"shape mismatch: {z.shape} vs {t.shape}")
    losses = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return float(losses.mean()), (sigmoid(z) - t) / z.size


@dataclass
class OptimConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_drop: float = 0.1
    drop_every: int = 10
    epochs: int = 30
    batch_size: int = 128

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.epochs < 0 or self.batch_size < 1 or self.drop_every < 1:
            raise ValueError("epochs, batch_size and drop_every must be positive")

    def lr_at(self, epoch):
        return self.lr * self.lr_drop ** (epoch // self.drop_every)


class SGDState:
    """Momentum buffers plus the current learning rate."""

    def __init__(self, net: Network, optim: OptimConfig):
        self.optim = optim
        self.lr = optim.lr
        self.velocity = {k: np.zeros_like(v) for k, v in net.params.items()}

    def set_epoch(self, epoch):
        self.lr = self.optim.lr_at(epoch)


def sgd_step(net: Network, grads: dict, state: SGDState, keys=None):
    """In-place SGD update: ``v = mu*v + g + wd*p; p -= lr*v``."""
    keys = list(net.params) if keys is None else keys
    for k in keys:
        g = grads[k]
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise NonFiniteError(f"gradient for {k} has {bad} non-finite entries")
    mu, wd, lr = state.optim.momentum, state.optim.weight_decay, state.lr
    for k in keys:
        p = net.params[k]
        v = state.velocity[k]
        v *= mu
        v += grads[k]
        if wd:
            v += wd * p
        p -= lr * v


def finite_diff_check(net: Network, loss_fn, n_coords=200, h=1e-5, seed=0, grad_fn=None):
    """Largest relative error between analytic and central-difference gradients.

    ``loss_fn(net) -> (loss, grads)``.  ``grad_fn`` overrides where the
    analytic gradient comes from (used for mutation tests).  Relative error
    per coordinate is ``|a - n| / max(|a| + |n|, 1e-8)``.
    """
    keys = list(net.params)
    sizes = [net.params[k].size for k in keys]
    total = sum(sizes)
    if total == 0:
        return 0.0
    _, grads = loss_fn(net)
    if grad_fn is not None:
        grads = grad_fn(grads)
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.cumsum([0] + sizes)
    worst = 0.0
    for flat_idx in np.sort(picks):
        j = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
        k, local = keys[j], int(flat_idx - offsets[j])
        p = net.params[k].reshape(-1)
        orig = p[local]
        p[local] = orig + h
        up, _ = loss_fn(net)
        p[local] = orig - h
        down, _ = loss_fn(net)
        p[local] = orig
        numeric = (up - down) / (2 * h)
        analytic = grads[k].reshape(-1)[local]
        err = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-8)
        worst = max(worst, err)
    return float(worst)


def save_checkpoint(net: Network, path):
    spec_bytes = json.dumps(net.spec.to_dict(), sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(spec_bytes)))
        f.write(spec_bytes)
        f.write(struct.pack("<I", len(net.params)))
        for name, arr in net.params.items():
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Network:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint (bad magic)")
    pos = 4
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    spec = NetworkSpec.from_dict(json.loads(data[pos:pos + n]))
    pos += n
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + ln].decode()
        pos += ln
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    return Network(spec, params)
