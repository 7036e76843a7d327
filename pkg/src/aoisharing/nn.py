"""Small dense Q-networks in plain numpy.

Two hidden ReLU layers, He-uniform init, exact reverse-mode gradients and
bias-corrected Adam. A dueling variant shares the trunk and splits into a
scalar value head and an advantage head, recombined with mean-centred
advantages. All arithmetic is float64.
"""
from __future__ import annotations

import struct

import numpy as np

from . import _fast

_MAGIC = b"AOIQ"
_VERSION = 1


def he_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def dueling_combine(v, adv):
    """q_i = v + adv_i - mean(adv). Works row-wise on batches."""
    v = np.asarray(v, dtype=float)
    adv = np.asarray(adv, dtype=float)
    if adv.ndim == 1:
        return v + adv - adv.mean()
    return v.reshape(-1, 1) + adv - adv.mean(axis=1, keepdims=True)


class DenseNet:
    """Fully connected ReLU network, optionally with a dueling head.

    ``params`` is the list ``[W1, b1, W2, b2, ...]`` of views into the single
    vector ``flat``; weights are (fan_in, fan_out) so a batch ``x`` of shape
    (n, in) maps as ``x @ W + b``.
    For a dueling net the last four entries are the value head and the
    advantage head, both fed by the final hidden layer.
    """

    def __init__(self, n_in: int, n_out: int, hidden=(64, 64), dueling: bool = False,
                 seed: int = 0, rng: np.random.Generator | None = None):
        self.n_in = int(n_in)
        self.n_out = int(n_out)
        self.hidden = tuple(int(h) for h in hidden)
        self.dueling = bool(dueling)
        self.seed = int(seed)
        rng = rng if rng is not None else np.random.default_rng(seed)
        sizes = (self.n_in,) + self.hidden
        init = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            init += [he_uniform(fan_in, fan_out, rng), np.zeros(fan_out)]
        last = sizes[-1]
        if self.dueling:
            init += [he_uniform(last, 1, rng), np.zeros(1)]
        init += [he_uniform(last, self.n_out, rng), np.zeros(self.n_out)]
        self.shapes = [w.shape for w in init]
        bounds = np.cumsum([0] + [w.size for w in init])
        self._slices = [(int(a), int(b), w.shape) for a, b, w in zip(bounds[:-1], bounds[1:], init)]
        self.flat = np.concatenate([w.ravel() for w in init])
        self.params = self._views(self.flat)
        self.layout = np.array([(w[0], b[0], w[2][0], w[2][1])
                                for w, b in zip(self._slices[0::2], self._slices[1::2])], dtype=np.int64)
        self._cache = None

    def _views(self, flat: np.ndarray) -> list[np.ndarray]:
        return [flat[a:b].reshape(shape) for a, b, shape in self._slices]

    @property
    def n_trunk(self) -> int:
        return len(self.hidden)

    @property
    def topology(self) -> tuple[int, ...]:
        return (self.n_in,) + self.hidden + (self.n_out,)

    def copy(self) -> "DenseNet":
        other = object.__new__(DenseNet)
        other.__dict__.update(self.__dict__)
        other.flat = self.flat.copy()
        other.params = other._views(other.flat)
        other._cache = None
        return other

    def load_params_from(self, other: "DenseNet") -> None:
        self.flat[...] = other.flat

    def forward(self, x, cache: bool = True) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.shape[1] != self.n_in:
            raise ValueError(f"expected input width {self.n_in}, got {x.shape[1]}")
        acts = [x]
        pre = []
        a = x
        p = self.params
        for i in range(self.n_trunk):
            z = a @ p[2 * i] + p[2 * i + 1]
            pre.append(z)
            a = np.maximum(z, 0.0)
            acts.append(a)
        k = 2 * self.n_trunk
        if self.dueling:
            v = a @ p[k] + p[k + 1]
            adv = a @ p[k + 2] + p[k + 3]
            out = v + adv - adv.sum(axis=1, keepdims=True) * (1.0 / self.n_out)
        else:
            out = a @ p[k] + p[k + 1]
        if cache:
            self._cache = (acts, pre)
        return out[0] if single else out

    __call__ = forward

    def predict(self, x) -> np.ndarray:
        """Inference-only forward through the compiled kernel."""
        x = np.ascontiguousarray(x, dtype=float)
        single = x.ndim == 1
        out = _fast.predict(self.flat, self.layout, self.n_trunk, self.dueling, x[None, :] if single else x)
        return out[0] if single else out

    def backward_flat(self, grad_out) -> np.ndarray:
        """Gradients of ``sum(output * grad_out)`` for the last cached forward,
        laid out like ``flat``."""
        if self._cache is None:
            raise RuntimeError("backward called without a cached forward pass")
        acts, pre = self._cache
        g = np.asarray(grad_out, dtype=float)
        if g.ndim == 1:
            g = g[None, :]
        p = self.params
        flat = np.empty_like(self.flat)
        grads = self._views(flat)
        k = 2 * self.n_trunk
        a = acts[-1]
        if self.dueling:
            g_v = g.sum(axis=1, keepdims=True)
            g_adv = g - g_v * (1.0 / self.n_out)
            np.matmul(a.T, g_v, out=grads[k])
            g_v.sum(axis=0, out=grads[k + 1])
            np.matmul(a.T, g_adv, out=grads[k + 2])
            g_adv.sum(axis=0, out=grads[k + 3])
            da = g_v @ p[k].T + g_adv @ p[k + 2].T
        else:
            np.matmul(a.T, g, out=grads[k])
            g.sum(axis=0, out=grads[k + 1])
            da = g @ p[k].T
        for i in reversed(range(self.n_trunk)):
            dz = da * (pre[i] > 0.0)
            np.matmul(acts[i].T, dz, out=grads[2 * i])
            dz.sum(axis=0, out=grads[2 * i + 1])
            if i:
                da = dz @ p[2 * i].T
        return flat

    def backward(self, grad_out) -> list[np.ndarray]:
        """Per-parameter gradients, shaped like ``params``."""
        return self._views(self.backward_flat(grad_out))

    # -- checkpoints -------------------------------------------------------

    def to_bytes(self) -> bytes:
        topo = self.topology
        header = _MAGIC + struct.pack("<IBI", _VERSION, int(self.dueling), len(topo))
        header += struct.pack(f"<{len(topo)}I", *topo) + struct.pack("<q", self.seed)
        return header + self.flat.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "DenseNet":
        if blob[:4] != _MAGIC:
            raise ValueError("not a network checkpoint")
        off = 4
        version, dueling, n_topo = struct.unpack_from("<IBI", blob, off)
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        off += struct.calcsize("<IBI")
        topo = struct.unpack_from(f"<{n_topo}I", blob, off)
        off += 4 * n_topo
        (seed,) = struct.unpack_from("<q", blob, off)
        off += 8
        net = cls(topo[0], topo[-1], hidden=topo[1:-1], dueling=bool(dueling), seed=seed)
        flat = np.frombuffer(blob, dtype="<f8", offset=off)
        if flat.size != net.flat.size:
            raise ValueError("checkpoint size does not match its topology")
        net.flat[...] = flat
        return net

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "DenseNet":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


class Adam:
    """Bias-corrected Adam over one flat parameter vector."""

    def __init__(self, size: int, lr: float = 0.01, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = np.zeros(size)
        self.v = np.zeros(size)

    def step(self, theta: np.ndarray, grad: np.ndarray) -> None:
        """In-place update of ``theta``."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        m, v = self.m, self.v
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * grad * grad
        # lr * m_hat / (sqrt(v_hat) + eps), rearranged to avoid temporaries
        denom = np.sqrt(v)
        denom += self.eps * np.sqrt(c2)
        theta -= (self.lr * np.sqrt(c2) / c1) * m / denom


def adam_step(net: DenseNet, grads, state: Adam) -> DenseNet:
    if isinstance(grads, list):
        grads = np.concatenate([g.ravel() for g in grads])
    state.step(net.flat, grads)
    return net


def finite_difference_grads(net: DenseNet, x, grad_out, h: float = 1e-5) -> list[np.ndarray]:
    """Central differences of ``sum(net(x) * grad_out)`` for every parameter."""
    grad_out = np.asarray(grad_out, dtype=float)

    def objective():
        return float(np.sum(net.forward(x, cache=False) * grad_out))

    out = []
    for p in net.params:
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = objective()
            flat[i] = old - h
            down = objective()
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def kink_distance(net: DenseNet, x) -> float:
    """Smallest |pre-activation| over the hidden units for input ``x``.

    Central differences are meaningless when a perturbation of size h can
    push a unit across the ReLU kink, so checks should use inputs where this
    is comfortably larger than h.
    """
    net.forward(x)
    return float(min(np.abs(z).min() for z in net._cache[1]))


def relative_errors(analytic, numeric) -> list[float]:
    """Per-tensor ``||a - n|| / (||a|| + ||n||)``; 0 when both are zero."""
    out = []
    for a, n in zip(analytic, numeric):
        denom = np.linalg.norm(a) + np.linalg.norm(n)
        out.append(0.0 if denom == 0 else float(np.linalg.norm(a - n) / denom))
    return out


def gradient_check(net: DenseNet, x, grad_out, h: float = 1e-5, elementwise: bool = False) -> float:
    """Max relative error between backprop and central differences.

    By default the error is taken per parameter tensor as
    ``||a - n|| / (||a|| + ||n||)``. ``elementwise=True`` gives
    ``max |a - n| / max(|a| + |n|, 1e-8)`` instead, which tiny entries push
    up to the round-off floor of the differences.
    """
    net.forward(x)
    analytic = net.backward(grad_out)
    numeric = finite_difference_grads(net, x, grad_out, h)
    if not elementwise:
        return max(relative_errors(analytic, numeric))
    worst = 0.0
    for a, n in zip(analytic, numeric):
        err = np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), 1e-8)
        worst = max(worst, float(err.max()))
    return worst


def kink_safe_input(net: DenseNet, rng: np.random.Generator, margin: float = 1e-3, tries: int = 1000) -> np.ndarray:
    """Standard-normal input whose hidden pre-activations all clear ``margin``."""
    for _ in range(tries):
        x = rng.normal(size=net.n_in)
        if kink_distance(net, x) > margin:
            return x
    raise RuntimeError("no input found away from the ReLU kinks")
