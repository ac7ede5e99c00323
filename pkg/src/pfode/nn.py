"""A small fully connected network with hand-written reverse mode.

Everything is float64 numpy.  An :class:`Mlp` maps ``(x, t, class)`` to a
vector with the same dimension as ``x``.  Time enters through fixed sin/cos
features appended to the input; the class enters as a learned vector added
to the first hidden pre-activation, with one extra "null" row reserved for
unconditional evaluation.

Parameter files use a flat little-endian layout::

    b"PFODE1"
    int32   L                       number of layer widths
    int32   widths[L]               input width (data + time features), hidden..., output
    int32   num_classes             0 for an unconditional net
    int32   num_frequencies
    float64 frequency_base
    float64 T
    float64 values...               W_0, b_0, W_1, b_1, ..., then the class table

Weights are stored row-major with shape ``(fan_in, fan_out)``.
"""

from dataclasses import dataclass
import functools
import struct

import numpy as np

from .errors import DomainError, FormatError, ShapeError, StateError, NumericError

__all__ = [
    "TimeEmbedding",
    "Architecture",
    "Mlp",
    "ParamSnapshot",
    "AdamState",
    "adam_step",
    "snapshot",
    "save_params",
    "load_params",
    "MAGIC",
]

MAGIC = b"PFODE1"


@functools.lru_cache(maxsize=8192)
def _embedding_row(t, num_frequencies, base, T):
    freqs = 0.5 * np.pi * base ** np.arange(num_frequencies, dtype=np.float64)
    phase = (np.array([[t]]) / T) * freqs
    row = np.concatenate([np.sin(phase), np.cos(phase)], axis=1)
    row.setflags(write=False)
    return row


@dataclass(frozen=True)
class TimeEmbedding:
    """Fixed sin/cos features of ``t / T`` at frequencies ``(pi/2) * base**k``.

    The lowest pair already separates every point of ``[0, T]`` because
    ``cos(pi/2 * s)`` is strictly decreasing there.
    """

    num_frequencies: int = 8
    base: float = 2.0
    T: float = 1.0

    @property
    def width(self):
        return 2 * self.num_frequencies

    def _row(self, t):
        return _embedding_row(t, self.num_frequencies, self.base, self.T)

    @property
    def frequencies(self):
        return 0.5 * np.pi * self.base ** np.arange(self.num_frequencies, dtype=np.float64)

    def __call__(self, t, batch):
        if type(t) is float:
            return np.broadcast_to(self._row(t), (batch, self.width))
        t = np.asarray(t, dtype=np.float64)
        if t.ndim == 0:
            return np.broadcast_to(self._row(float(t)), (batch, self.width))
        phase = (t.reshape(-1, 1) / self.T) * self.frequencies
        feats = np.concatenate([np.sin(phase), np.cos(phase)], axis=1)
        if feats.shape[0] == 1 and batch != 1:
            feats = np.broadcast_to(feats, (batch, feats.shape[1]))
        elif feats.shape[0] != batch:
            raise ShapeError(f"{feats.shape[0]} times for a batch of {batch}")
        return feats


@dataclass(frozen=True)
class Architecture:
    data_dim: int
    hidden: tuple
    num_classes: int
    embedding: TimeEmbedding

    @property
    def widths(self):
        return (self.data_dim + self.embedding.width, *self.hidden, self.data_dim)

    @property
    def null_class(self):
        return self.num_classes

    def param_shapes(self):
        w = self.widths
        shapes = []
        for fan_in, fan_out in zip(w[:-1], w[1:]):
            shapes += [(fan_in, fan_out), (fan_out,)]
        if self.num_classes > 0:
            shapes.append((self.num_classes + 1, self.hidden[0]))
        return shapes


def _labels(arch, labels, batch):
    if arch.num_classes == 0:
        if labels is not None:
            raise DomainError("unconditional network given class labels")
        return None
    if labels is None:
        return np.full(batch, arch.null_class, dtype=np.intp)
    labels = np.asarray(labels, dtype=np.intp)
    if labels.ndim == 0:
        labels = np.full(batch, int(labels), dtype=np.intp)
    if labels.shape != (batch,):
        raise ShapeError(f"labels shape {labels.shape} for a batch of {batch}")
    if labels.size and (labels.min() < 0 or labels.max() > arch.null_class):
        raise DomainError(f"class labels must lie in [0, {arch.null_class}]")
    return labels


def _apply(arch, params, x, t, labels, record=False):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != arch.data_dim:
        raise ShapeError(f"expected input of shape (batch, {arch.data_dim}), got {x.shape}")
    if not np.isfinite(x).all():
        raise NumericError("non-finite network input")
    batch = x.shape[0]
    d = arch.data_dim
    labels = _labels(arch, labels, batch)
    temb = arch.embedding(t, batch)
    W0, b0 = params[0], params[1]
    # split first layer: data part per row, time part once when t is shared
    z = x @ W0[:d]
    if temb.strides[0] == 0:
        z += temb[:1] @ W0[d:] + b0
    else:
        z += temb @ W0[d:]
        z += b0
    if labels is not None:
        z += params[-1][labels]
    n_layers = len(arch.hidden) + 1
    acts = [np.concatenate([x, temb], axis=1)] if record else None
    h = z
    for layer in range(n_layers):
        if layer > 0:
            h = h @ params[2 * layer]
            h += params[2 * layer + 1]
        if layer < n_layers - 1:
            np.tanh(h, out=h)
            if record:
                acts.append(h)
    cache = (acts, labels) if record else None
    return h, cache


def _backprop(arch, params, cache, upstream, wrt_input):
    acts, labels = cache
    n_layers = len(arch.hidden) + 1
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != (acts[0].shape[0], arch.data_dim):
        raise ShapeError(f"upstream shape {g.shape} does not match the recorded output")
    grads = [None] * len(params)
    for layer in reversed(range(n_layers)):
        a_in = acts[layer]
        if layer < n_layers - 1:
            a_out = acts[layer + 1]
            g = g * (1.0 - a_out * a_out)
        grads[2 * layer] = a_in.T @ g
        grads[2 * layer + 1] = g.sum(axis=0)
        if layer == 0 and labels is not None:
            table = np.zeros_like(params[-1])
            np.add.at(table, labels, g)
            grads[-1] = table
        if layer > 0 or wrt_input:
            g = g @ params[2 * layer].T
    dx = g[:, : arch.data_dim] if wrt_input else None
    return grads, dx


class Mlp:
    """Trainable network; ``forward``/``backward`` is single-writer state."""

    def __init__(self, data_dim, hidden=(128, 128, 128), num_classes=0,
                 num_frequencies=8, frequency_base=2.0, T=1.0, rng=None,
                 zero_final=True):
        self.arch = Architecture(
            int(data_dim), tuple(int(h) for h in hidden), int(num_classes),
            TimeEmbedding(int(num_frequencies), float(frequency_base), float(T)),
        )
        rng = np.random.default_rng() if rng is None else rng
        self.params = []
        widths = self.arch.widths
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == len(widths) - 2
            bound = 1.0 / np.sqrt(fan_in)
            W = np.zeros((fan_in, fan_out)) if (last and zero_final) else rng.uniform(-bound, bound, (fan_in, fan_out))
            self.params += [W, np.zeros(fan_out)]
        if self.arch.num_classes > 0:
            self.params.append(np.zeros((self.arch.num_classes + 1, self.arch.hidden[0])))
        self._cache = None

    @classmethod
    def from_arch(cls, arch, params):
        net = cls.__new__(cls)
        net.arch = arch
        net.params = [np.array(p, dtype=np.float64) for p in params]
        expected = arch.param_shapes()
        if [p.shape for p in net.params] != expected:
            raise ShapeError("parameter shapes do not match the architecture")
        net._cache = None
        return net

    @property
    def data_dim(self):
        return self.arch.data_dim

    @property
    def num_classes(self):
        return self.arch.num_classes

    @property
    def null_class(self):
        return self.arch.null_class

    def forward(self, x, t, labels=None):
        """Evaluate and record activations for a subsequent :meth:`backward`."""
        out, self._cache = _apply(self.arch, self.params, x, t, labels, record=True)
        return out

    def predict(self, x, t, labels=None):
        """Evaluate without touching the recorded state."""
        return _apply(self.arch, self.params, x, t, labels)[0]

    __call__ = predict

    def backward(self, upstream, wrt_input=False):
        """Gradients of ``sum(upstream * output)`` w.r.t. every parameter.

        Returns ``grads`` (aligned with :attr:`params`), or ``(grads, dx)``
        when ``wrt_input`` is true.  Consumes the recorded forward pass.
        """
        if self._cache is None:
            raise StateError("backward called without a recorded forward pass")
        cache, self._cache = self._cache, None
        grads, dx = _backprop(self.arch, self.params, cache, upstream, wrt_input)
        return (grads, dx) if wrt_input else grads

    def snapshot(self):
        return ParamSnapshot(self.arch, self.params)

    def n_params(self):
        return sum(p.size for p in self.params)


class ParamSnapshot:
    """Read-only deep copy of a network's parameters (the frozen target)."""

    def __init__(self, arch, params):
        self.arch = arch
        frozen = []
        for p in params:
            q = np.array(p, dtype=np.float64, copy=True)
            q.setflags(write=False)
            frozen.append(q)
        self.params = tuple(frozen)

    def predict(self, x, t, labels=None):
        return _apply(self.arch, self.params, x, t, labels)[0]

    __call__ = predict

    @property
    def data_dim(self):
        return self.arch.data_dim

    @property
    def null_class(self):
        return self.arch.null_class

    def snapshot(self):
        return ParamSnapshot(self.arch, self.params)

    def blend(self, net, decay):
        """EMA step ``decay * self + (1 - decay) * net``; ``decay=0`` copies ``net``."""
        if decay == 0.0:
            return net.snapshot()
        mixed = [decay * a + (1.0 - decay) * b for a, b in zip(self.params, net.params)]
        return ParamSnapshot(self.arch, mixed)

    def __eq__(self, other):
        if not isinstance(other, ParamSnapshot):
            return NotImplemented
        return self.arch == other.arch and all(
            np.array_equal(a, b) for a, b in zip(self.params, other.params)
        )


def snapshot(net):
    return net.snapshot()


@dataclass
class AdamState:
    m: list
    v: list
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def for_params(cls, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params],
                   lr, beta1, beta2, eps)


def adam_step(state, params, grads):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if not (len(params) == len(grads) == len(state.m)):
        raise ShapeError("params, grads and optimizer state differ in length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def save_params(net, path):
    arch = net.arch
    widths = arch.widths
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<i", len(widths)))
        fh.write(struct.pack(f"<{len(widths)}i", *widths))
        fh.write(struct.pack("<ii", arch.num_classes, arch.embedding.num_frequencies))
        fh.write(struct.pack("<dd", arch.embedding.base, arch.embedding.T))
        for p in net.params:
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_params(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic, not a PFODE1 parameter file")
    try:
        off = len(MAGIC)
        (n,) = struct.unpack_from("<i", blob, off)
        off += 4
        widths = struct.unpack_from(f"<{n}i", blob, off)
        off += 4 * n
        num_classes, n_freq = struct.unpack_from("<ii", blob, off)
        off += 8
        base, T = struct.unpack_from("<dd", blob, off)
        off += 16
    except struct.error as exc:
        raise FormatError(f"{path}: truncated header") from exc
    data_dim = widths[-1]
    if widths[0] != data_dim + 2 * n_freq:
        raise FormatError(f"{path}: inconsistent input width")
    arch = Architecture(data_dim, tuple(widths[1:-1]), num_classes,
                        TimeEmbedding(n_freq, base, T))
    values = np.frombuffer(blob, dtype="<f8", offset=off)
    shapes = arch.param_shapes()
    total = sum(int(np.prod(s)) for s in shapes)
    if values.size != total:
        raise FormatError(f"{path}: expected {total} parameters, found {values.size}")
    params, pos = [], 0
    for s in shapes:
        k = int(np.prod(s))
        params.append(values[pos: pos + k].reshape(s).astype(np.float64))
        pos += k
    return Mlp.from_arch(arch, params)
