"""Minimal differentiable building blocks in 64-bit numpy.

Dense layers, a character convolution with max-over-time pooling, stacked
bi-directional LSTMs, stable softmax cross-entropy, plain SGD with
inverse-time decay, finite-difference gradient checking, and a versioned
binary checkpoint format.  Everything is seeded and single-threaded so
training runs are bit-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_MAGIC = "semlog-checkpoint v1"


class NeuralError(ValueError):
    """Raised for shape mismatches, bad configs, or corrupt checkpoints."""


@dataclass
class Parameter:
    """A named tensor with a same-shaped gradient accumulator."""

    name: str
    values: np.ndarray
    gradient: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        self.gradient = np.zeros_like(self.values)


@dataclass
class TrainConfig:
    lr0: float = 0.01
    decay: float = 0.005
    epochs: int = 30
    seed: int = 42

    def __post_init__(self) -> None:
        if self.lr0 <= 0:
            raise NeuralError("lr0 must be positive")
        if self.decay < 0:
            raise NeuralError("decay must be >= 0")
        # epochs=0 is allowed so a training call can be a seeded no-op.
        if self.epochs < 0:
            raise NeuralError("epochs must be >= 0")

    def lr_at(self, epoch: int) -> float:
        return self.lr0 / (1.0 + self.decay * epoch)


def uniform_init(rng: np.random.Generator, shape, fan_in: int,
                 fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    neg = ~pos
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[neg])
    out[neg] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# Dense
# ---------------------------------------------------------------------------

_ACTIVATIONS = ("none", "relu", "tanh")


def dense_forward(w: np.ndarray, b: np.ndarray, x: np.ndarray,
                  activation: str = "none"):
    """activation(x @ W.T + b) for x of shape (n, in) or (in,)."""
    if activation not in _ACTIVATIONS:
        raise NeuralError("unknown activation %r" % activation)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.shape[1] != w.shape[1]:
        raise NeuralError(
            "dense input width %d does not match weight width %d"
            % (x2.shape[1], w.shape[1])
        )
    pre = x2 @ w.T + b
    if activation == "relu":
        out = np.maximum(pre, 0.0)
    elif activation == "tanh":
        out = np.tanh(pre)
    else:
        out = pre
    cache = (x2, pre, out, activation, single)
    return (out[0] if single else out), cache


def dense_backward(w: np.ndarray, dout: np.ndarray, cache):
    """Returns (dx, dw, db) for one dense_forward call."""
    x2, pre, out, activation, single = cache
    dout = np.asarray(dout, dtype=np.float64)
    d2 = dout[None, :] if single else dout
    if activation == "relu":
        dpre = d2 * (pre > 0)
    elif activation == "tanh":
        dpre = d2 * (1.0 - out * out)
    else:
        dpre = d2
    dw = dpre.T @ x2
    db = dpre.sum(axis=0)
    dx = dpre @ w
    return (dx[0] if single else dx), dw, db


class Dense:
    """A dense layer owning its weight and bias parameters."""

    def __init__(self, name: str, in_dim: int, out_dim: int,
                 activation: str = "none",
                 rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.activation = activation
        self.w = Parameter(name + ".w",
                           uniform_init(rng, (out_dim, in_dim), in_dim, out_dim))
        self.b = Parameter(name + ".b", np.zeros(out_dim))

    def forward(self, x):
        return dense_forward(self.w.values, self.b.values, x, self.activation)

    def backward(self, dout, cache):
        dx, dw, db = dense_backward(self.w.values, dout, cache)
        self.w.gradient += dw
        self.b.gradient += db
        return dx

    def params(self) -> list[Parameter]:
        return [self.w, self.b]


# ---------------------------------------------------------------------------
# Character convolution with max-over-time pooling
# ---------------------------------------------------------------------------

class CharConv:
    """Embeds character indices and applies a 1-D conv + max pooling.

    Tokens shorter than the window are padded with zero rows, so output is
    defined for every non-empty token.
    """

    def __init__(self, name: str, alphabet_size: int, d_char: int = 30,
                 filters: int = 30, window: int = 3,
                 rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.d_char = d_char
        self.filters = filters
        self.window = window
        self.emb = Parameter(
            name + ".emb",
            uniform_init(rng, (alphabet_size, d_char), alphabet_size, d_char),
        )
        k = window * d_char
        self.w = Parameter(name + ".w", uniform_init(rng, (filters, k), k, filters))
        self.b = Parameter(name + ".b", np.zeros(filters))

    def forward(self, indices: list[int]):
        if not indices:
            raise NeuralError("char convolution needs at least one character")
        length = len(indices)
        e = self.emb.values[indices]
        if length < self.window:
            e = np.vstack([e, np.zeros((self.window - length, self.d_char))])
        t = e.shape[0] - self.window + 1
        k = self.window * self.d_char
        windows = np.empty((t, k))
        for s in range(t):
            windows[s] = e[s:s + self.window].ravel()
        conv = windows @ self.w.values.T + self.b.values
        amax = conv.argmax(axis=0)
        out = conv[amax, np.arange(self.filters)]
        cache = (indices, length, windows, amax, t)
        return out, cache

    def backward(self, dout, cache):
        indices, length, windows, amax, t = cache
        dconv = np.zeros((t, self.filters))
        dconv[amax, np.arange(self.filters)] = dout
        self.w.gradient += dconv.T @ windows
        self.b.gradient += dconv.sum(axis=0)
        dwin = dconv @ self.w.values
        padded = max(length, self.window)
        de = np.zeros((padded, self.d_char))
        for s in range(t):
            de[s:s + self.window] += dwin[s].reshape(self.window, self.d_char)
        np.add.at(self.emb.gradient, indices, de[:length])

    def params(self) -> list[Parameter]:
        return [self.emb, self.w, self.b]


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------

class LSTMDirection:
    """One direction of an LSTM layer.  Gate order is i, f, g, o; the
    forget-gate bias starts at +1."""

    def __init__(self, name: str, in_dim: int, hidden: int,
                 rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.in_dim = in_dim
        self.hidden = hidden
        self.wx = Parameter(name + ".wx",
                            uniform_init(rng, (4 * hidden, in_dim), in_dim, 4 * hidden))
        self.wh = Parameter(name + ".wh",
                            uniform_init(rng, (4 * hidden, hidden), hidden, 4 * hidden))
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0
        self.b = Parameter(name + ".b", b)

    def forward(self, x_seq: np.ndarray, reverse: bool = False):
        n = x_seq.shape[0]
        if n == 0:
            raise NeuralError("empty sequence")
        hdim = self.hidden
        zx = x_seq @ self.wx.values.T + self.b.values
        order = np.arange(n - 1, -1, -1) if reverse else np.arange(n)
        h = np.zeros(hdim)
        c = np.zeros(hdim)
        h_seq = np.empty((n, hdim))
        steps = []
        wh = self.wh.values
        for pos in order:
            z = zx[pos] + wh @ h
            gi = sigmoid(z[:hdim])
            gf = sigmoid(z[hdim:2 * hdim])
            gg = np.tanh(z[2 * hdim:3 * hdim])
            go = sigmoid(z[3 * hdim:])
            c_new = gf * c + gi * gg
            tanh_c = np.tanh(c_new)
            steps.append((h, c, gi, gf, gg, go, tanh_c))
            h = go * tanh_c
            c = c_new
            h_seq[pos] = h
        return h_seq, (x_seq, order, steps)

    def backward(self, dh_seq: np.ndarray, cache):
        x_seq, order, steps = cache
        n = len(order)
        hdim = self.hidden
        dz_all = np.empty((n, 4 * hdim))
        hprev_all = np.empty((n, hdim))
        dh_next = np.zeros(hdim)
        dc_next = np.zeros(hdim)
        wh_t = self.wh.values.T
        for t in range(n - 1, -1, -1):
            pos = order[t]
            h_prev, c_prev, gi, gf, gg, go, tanh_c = steps[t]
            dh = dh_seq[pos] + dh_next
            do = dh * tanh_c
            dc = dc_next + dh * go * (1.0 - tanh_c * tanh_c)
            di = dc * gg
            df = dc * c_prev
            dg = dc * gi
            dz = np.concatenate([
                di * gi * (1.0 - gi),
                df * gf * (1.0 - gf),
                dg * (1.0 - gg * gg),
                do * go * (1.0 - go),
            ])
            dz_all[t] = dz
            hprev_all[t] = h_prev
            dh_next = wh_t @ dz
            dc_next = dc * gf
        x_ordered = x_seq[order]
        self.wx.gradient += dz_all.T @ x_ordered
        self.wh.gradient += dz_all.T @ hprev_all
        self.b.gradient += dz_all.sum(axis=0)
        dx = np.empty_like(x_seq)
        dx[order] = dz_all @ self.wx.values
        return dx

    def params(self) -> list[Parameter]:
        return [self.wx, self.wh, self.b]


class BiLSTM:
    """Stacked bi-directional LSTM; per-position output is the
    concatenation of both directions of the top layer (2·hidden wide)."""

    def __init__(self, name: str, in_dim: int, hidden: int, layers: int = 2,
                 rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.default_rng(0)
        if layers < 1:
            raise NeuralError("need at least one layer")
        self.hidden = hidden
        self.layers = []
        for layer in range(layers):
            dim = in_dim if layer == 0 else 2 * hidden
            fwd = LSTMDirection("%s.l%d.fwd" % (name, layer), dim, hidden, rng)
            bwd = LSTMDirection("%s.l%d.bwd" % (name, layer), dim, hidden, rng)
            self.layers.append((fwd, bwd))

    def forward(self, x_seq: np.ndarray):
        x_seq = np.asarray(x_seq, dtype=np.float64)
        if x_seq.ndim != 2 or x_seq.shape[0] == 0:
            raise NeuralError("empty sequence")
        caches = []
        out = x_seq
        for fwd, bwd in self.layers:
            hf, cf = fwd.forward(out)
            hb, cb = bwd.forward(out, reverse=True)
            out = np.concatenate([hf, hb], axis=1)
            caches.append((cf, cb))
        return out, caches

    def backward(self, dout: np.ndarray, caches):
        hdim = self.hidden
        grad = dout
        for (fwd, bwd), (cf, cb) in zip(reversed(self.layers), reversed(caches)):
            dxf = fwd.backward(grad[:, :hdim], cf)
            dxb = bwd.backward(grad[:, hdim:], cb)
            grad = dxf + dxb
        return grad

    def params(self) -> list[Parameter]:
        out: list[Parameter] = []
        for fwd, bwd in self.layers:
            out.extend(fwd.params())
            out.extend(bwd.params())
        return out


def bilstm_forward(model: BiLSTM, inputs) -> list[np.ndarray]:
    out, _ = model.forward(np.asarray(inputs, dtype=np.float64))
    return [row for row in out]


# ---------------------------------------------------------------------------
# Loss and optimizer
# ---------------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def softmax_cross_entropy(logits: np.ndarray, target: int):
    """Returns (loss, gradient wrt logits); stable under large logits."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= target < logits.shape[0]:
        raise NeuralError(
            "target %d out of range for %d logits" % (target, logits.shape[0])
        )
    z = logits - logits.max()
    log_norm = np.log(np.exp(z).sum())
    loss = log_norm - z[target]
    grad = np.exp(z - log_norm)
    grad[target] -= 1.0
    return loss, grad


def sgd_step(params: list[Parameter], epoch: int, cfg: TrainConfig) -> None:
    """p ← p − lr_e · grad with lr_e = lr0/(1 + decay·e); zeroes gradients."""
    lr = cfg.lr_at(epoch)
    for p in params:
        if not np.all(np.isfinite(p.gradient)):
            raise NeuralError("non-finite gradient in parameter %r" % p.name)
        p.values -= lr * p.gradient
        if not np.all(np.isfinite(p.values)):
            raise NeuralError("non-finite values in parameter %r" % p.name)
        p.gradient[...] = 0.0


def zero_grads(params: list[Parameter]) -> None:
    for p in params:
        p.gradient[...] = 0.0


def gradient_check(loss_fn, params: list[Parameter], eps: float = 1e-5,
                   samples: int = 25, seed: int = 0,
                   tolerance: float = 1e-4) -> float:
    """Compare analytic gradients against central finite differences.

    `loss_fn(compute_grads)` must return the scalar loss and, when asked,
    leave fresh gradients on the parameters.  It may instead return
    (loss, signature) where the signature is a bytes value recording which
    branch every non-smooth unit took (relu sign pattern, pooling argmax).

    Checks a random sample of at least `samples` coordinates per parameter
    and returns the worst relative error
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).

    Two kinds of coordinate are redrawn instead of reported, because the
    finite-difference oracle cannot measure the derivative there:
    - branch crossings: when the signature changes inside
      [value-eps, value+eps], the central difference is a chord across a
      kink, not a derivative estimate;
    - sub-resolution gradients: rounding the two loss values injects about
      machine_eps*|loss|/eps of absolute noise into the quotient, so when
      that floor exceeds `tolerance` times the comparison scale, a
      disagreement is rounding residue rather than evidence of a wrong
      gradient.  Agreements at such coordinates are still reported.
    A parameter group that yields no reportable coordinate raises.
    """
    if eps <= 0:
        raise NeuralError("degenerate step")

    def evaluate(compute_grads):
        got = loss_fn(compute_grads)
        if isinstance(got, tuple):
            return got
        return got, None

    machine = float(np.finfo(np.float64).eps)
    zero_grads(params)
    _, base_sig = evaluate(True)
    analytic = {p.name: p.gradient.copy() for p in params}
    zero_grads(params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        flat = p.values.reshape(-1)
        grads = analytic[p.name].reshape(-1)
        count = min(samples, flat.size)
        checked = 0
        for k in rng.permutation(flat.size):
            if checked == count:
                break
            orig = flat[k]
            flat[k] = orig + eps
            plus, plus_sig = evaluate(False)
            flat[k] = orig - eps
            minus, minus_sig = evaluate(False)
            flat[k] = orig
            if base_sig is not None and (plus_sig != base_sig
                                         or minus_sig != base_sig):
                continue
            numeric = (plus - minus) / (2.0 * eps)
            scale = max(abs(grads[k]), abs(numeric), 1e-8)
            err = abs(grads[k] - numeric) / scale
            floor = machine * max(abs(plus), abs(minus)) / eps
            if err > tolerance and floor > tolerance * scale:
                continue
            checked += 1
            worst = max(worst, err)
        if checked == 0:
            raise NeuralError("no measurable coordinates in %s" % p.name)
    return worst


# ---------------------------------------------------------------------------
# Checkpoints: magic line, JSON header, then raw little-endian 64-bit
# tensors in header order.
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, header: dict, params: list[Parameter]) -> None:
    meta = dict(header)
    meta["tensors"] = [
        {"name": p.name, "shape": list(p.values.shape)} for p in params
    ]
    with open(path, "wb") as fh:
        fh.write((CHECKPOINT_MAGIC + "\n").encode("utf-8"))
        fh.write((json.dumps(meta, sort_keys=True) + "\n").encode("utf-8"))
        for p in params:
            fh.write(np.ascontiguousarray(p.values, dtype="<f8").tobytes())


def load_checkpoint(path: str):
    """Returns (header, {name: tensor}); validates magic and shapes."""
    with open(path, "rb") as fh:
        magic = fh.readline().decode("utf-8").rstrip("\n")
        if magic != CHECKPOINT_MAGIC:
            raise NeuralError("not a checkpoint file: bad magic %r" % magic)
        try:
            header = json.loads(fh.readline().decode("utf-8"))
        except json.JSONDecodeError as exc:
            raise NeuralError("corrupt checkpoint header: %s" % exc) from None
        tensors: dict[str, np.ndarray] = {}
        for entry in header.get("tensors", []):
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise NeuralError(
                    "checkpoint truncated while reading tensor %r" % entry["name"]
                )
            tensors[entry["name"]] = (
                np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
            )
        if fh.read(1):
            raise NeuralError("trailing bytes after final tensor")
    return header, tensors


def assign_params(params: list[Parameter], tensors: dict[str, np.ndarray]) -> None:
    """Copy loaded tensors into parameters, validating names and shapes."""
    for p in params:
        if p.name not in tensors:
            raise NeuralError("checkpoint is missing tensor %r" % p.name)
        values = tensors[p.name]
        if values.shape != p.values.shape:
            raise NeuralError(
                "tensor %r has shape %s, expected %s"
                % (p.name, values.shape, p.values.shape)
            )
        p.values[...] = values
