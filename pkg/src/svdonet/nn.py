"""Dense feed-forward networks trained with hand-written backprop and Adam.

Everything is float64 numpy.  A :class:`DenseNet` evaluates a batch ``X`` of
shape (N, input_dim) row-wise; :meth:`DenseNet.forward_train` keeps the
activations needed by :meth:`DenseNet.backward`.

Anything exposing a ``parameters`` list of arrays and a
``loss_grad(X, Y) -> (loss, grads)`` method can be optimised by
:func:`train`; the operator networks in :mod:`svdonet.operators` rely on this.
"""

from dataclasses import dataclass, field, replace
import logging
import math

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import _rng
from ._validation import as_matrix, as_rows
from .exceptions import DivergedAtEpoch, InvalidShape, NumericalFailure, ParseError

__all__ = [
    "ACTIVATIONS",
    "DenseNet",
    "mse_grad",
    "AdamState",
    "adam_step",
    "TrainConfig",
    "LossHistory",
    "train",
    "lbfgs_refine",
    "MinMaxScaler",
    "save_net",
    "load_net",
    "write_net",
    "read_net",
]

log = logging.getLogger(__name__)


def _tanh_grad(z, a):
    return 1.0 - a * a


def _exp_grad(z, a):
    return a


def _identity_grad(z, a):
    return np.ones_like(z)


def _relu_grad(z, a):
    return (z > 0).astype(z.dtype)


# name -> (function, derivative(z, a))
ACTIVATIONS = {
    "tanh": (np.tanh, _tanh_grad),
    "exp": (np.exp, _exp_grad),
    "identity": (lambda z: z, _identity_grad),
    "relu": (lambda z: np.maximum(z, 0.0), _relu_grad),
}


def glorot_uniform(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


class DenseNet:
    """Chain of affine layers, each followed by an elementwise activation.

    Parameters
    ----------
    weights : list of ndarray
        ``weights[i]`` has shape (out_i, in_i).
    biases : list of ndarray
        ``biases[i]`` has shape (out_i,).
    activations : list of str
        Keys of :data:`ACTIVATIONS`, one per layer.
    input_shift, input_scale : ndarray, optional
        Fixed (non-trainable) input normalisation ``(x - shift) / scale``.
    output_shift, output_scale : ndarray, optional
        Fixed output de-normalisation ``out * scale + shift``.
    """

    def __init__(
        self,
        weights,
        biases,
        activations,
        input_shift=None,
        input_scale=None,
        output_shift=None,
        output_scale=None,
    ):
        if not (len(weights) == len(biases) == len(activations)) or not weights:
            raise InvalidShape("weights, biases and activations must be equally long and non-empty")
        self.weights = [np.array(W, dtype=np.float64) for W in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        self.activations = [str(a).lower() for a in activations]
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise InvalidShape(f"layer {i}: W {W.shape} and b {b.shape} do not conform")
            if i > 0 and W.shape[1] != self.weights[i - 1].shape[0]:
                raise InvalidShape(f"layer {i} expects {W.shape[1]} inputs, previous layer gives "
                                   f"{self.weights[i - 1].shape[0]}")
        self.input_shift = _opt_vec(input_shift, self.input_dim, 0.0)
        self.input_scale = _opt_vec(input_scale, self.input_dim, 1.0)
        self.output_shift = _opt_vec(output_shift, self.output_dim, 0.0)
        self.output_scale = _opt_vec(output_scale, self.output_dim, 1.0)

    @classmethod
    def create(
        cls,
        dims,
        hidden_activation="tanh",
        output_activation="identity",
        rng=None,
        seed=0,
        **scaling,
    ):
        """Glorot-uniform weights, zero biases.

        ``dims`` lists layer widths including input and output,
        e.g. ``[2, 32, 32, 1]``.
        """
        if rng is None:
            rng = _rng.stream(seed, "init")
        dims = [int(d) for d in dims]
        if len(dims) < 2 or min(dims) < 1:
            raise InvalidShape(f"invalid layer dims {dims}")
        weights = [glorot_uniform(rng, i, o) for i, o in zip(dims[:-1], dims[1:])]
        biases = [np.zeros(o) for o in dims[1:]]
        acts = [hidden_activation] * (len(dims) - 2) + [output_activation]
        return cls(weights, biases, acts, **scaling)

    # -- structure ---------------------------------------------------------

    @property
    def input_dim(self):
        return self.weights[0].shape[1]

    @property
    def output_dim(self):
        return self.weights[-1].shape[0]

    @property
    def dims(self):
        return [self.input_dim] + [W.shape[0] for W in self.weights]

    @property
    def param_count(self):
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    @property
    def parameters(self):
        """Trainable arrays in layer order ``[W0, b0, W1, b1, ...]``."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    def copy(self):
        return DenseNet(
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
            list(self.activations),
            self.input_shift.copy(),
            self.input_scale.copy(),
            self.output_shift.copy(),
            self.output_scale.copy(),
        )

    def __repr__(self):
        return f"DenseNet(dims={self.dims}, activations={self.activations})"

    # -- evaluation --------------------------------------------------------

    def forward(self, x):
        """Evaluate on one sample (1-D) or a batch (2-D, rows are samples)."""
        single = np.ndim(x) == 1
        X = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if X.shape[1] != self.input_dim:
            raise InvalidShape(f"expected {self.input_dim} inputs, got {X.shape[1]}")
        out, _ = self.forward_train(X)
        return out[0] if single else out

    __call__ = forward

    def forward_train(self, X):
        """Batch forward pass returning ``(output, cache)`` for :meth:`backward`."""
        h = (X - self.input_shift) / self.input_scale
        acts = [h]
        for W, b, name in zip(self.weights, self.biases, self.activations):
            z = h @ W.T + b
            h = ACTIVATIONS[name][0](z)
            acts.append((z, h))
        out = h * self.output_scale + self.output_shift
        return out, acts

    def backward(self, cache, dout):
        """Reverse pass.

        Parameters
        ----------
        cache : list
            From :meth:`forward_train`.
        dout : ndarray of shape (N, output_dim)
            Gradient of the loss with respect to the network output.

        Returns
        -------
        grads : list of ndarray
            Aligned with :attr:`parameters`.
        dX : ndarray of shape (N, input_dim)
            Gradient with respect to the (unnormalised) input.
        """
        g = dout * self.output_scale
        grads = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            z, a = cache[i + 1]
            name = self.activations[i]
            if name != "identity":
                g = g * ACTIVATIONS[name][1](z, a)
            h_prev = cache[i] if i == 0 else cache[i][1]
            grads[2 * i] = g.T @ h_prev
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i]
        return grads, g / self.input_scale

    # -- training protocol -------------------------------------------------

    def loss_grad(self, X, Y):
        return mse_grad(self, X, Y)

    def loss(self, X, Y):
        out = self.forward(X)
        return float(np.mean((out - Y) ** 2))


def _opt_vec(v, n, default):
    if v is None:
        return np.full(n, default)
    v = np.broadcast_to(np.asarray(v, dtype=np.float64), (n,)).copy()
    return v


def mse_grad(net, X, Y):
    """Mean squared error over all outputs and its parameter gradient.

    The loss is ``sum((net(X) - Y)**2) / (N * output_dim)``.

    Raises
    ------
    NumericalFailure
        If the forward pass produces non-finite values.
    """
    X = as_rows(X, net.input_dim, "X")
    Y = as_rows(Y, net.output_dim, "Y")
    if X.shape[0] != Y.shape[0]:
        raise InvalidShape(f"X has {X.shape[0]} rows, Y has {Y.shape[0]}")
    out, cache = net.forward_train(X)
    if not np.all(np.isfinite(out)):
        raise NumericalFailure("non-finite activations in forward pass")
    resid = out - Y
    loss = float(np.mean(resid**2))
    grads, _ = net.backward(cache, 2.0 * resid / resid.size)
    return loss, grads


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """First/second-moment accumulators for Adam."""

    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **hyper):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **hyper)


def adam_step(params, grads, state, inplace=False):
    """One bias-corrected Adam update.

    Returns ``(params, state)``.  With ``inplace=True`` the parameter and
    moment arrays are updated in place (the same objects are returned);
    otherwise fresh arrays are returned and the inputs are left untouched.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise InvalidShape("params, grads and state have different lengths")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise InvalidShape(f"parameter {p.shape} / gradient {g.shape} mismatch")
        if inplace:
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
            new_p.append(p)
            new_m.append(m)
            new_v.append(v)
        else:
            m2 = b1 * m + (1.0 - b1) * g
            v2 = b2 * v + (1.0 - b2) * g * g
            new_p.append(p - state.lr * (m2 / c1) / (np.sqrt(v2 / c2) + state.epsilon))
            new_m.append(m2)
            new_v.append(v2)
    return new_p, replace(state, m=new_m, v=new_v, step=t)


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainConfig:
    """Mini-batch Adam settings, with an optional full-batch L-BFGS polish.

    ``lr_schedule`` is a list of ``(epoch, lr)`` pairs with strictly
    increasing epochs; the rate of the last entry whose epoch is <= the
    current epoch applies.
    """

    epochs: int = 1000
    batch_size: int = 256
    lr_schedule: list = field(default_factory=lambda: [(0, 1e-3)])
    seed: int = 0
    validation_fraction: float = 0.0
    early_stop_patience: int = None
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    lbfgs_iter: int = 0

    def __post_init__(self):
        self.lr_schedule = [(int(e), float(lr)) for e, lr in self.lr_schedule]
        epochs = [e for e, _ in self.lr_schedule]
        if not epochs or any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError("lr_schedule epochs must be non-empty and strictly increasing")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not (0.0 <= self.validation_fraction < 1.0):
            raise ValueError("validation_fraction must lie in [0, 1)")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be positive")
        if self.lbfgs_iter < 0:
            raise ValueError("lbfgs_iter must be >= 0")

    def lr_at(self, epoch):
        lr = self.lr_schedule[0][1]
        for e, value in self.lr_schedule:
            if e <= epoch:
                lr = value
        return lr


@dataclass
class LossHistory:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    best_epoch: int = None

    def to_rows(self):
        rows = []
        for i, tr in enumerate(self.train):
            rows.append((i, tr, self.val[i] if i < len(self.val) else float("nan")))
        return rows


def split_validation(n, fraction, rng):
    """Random (train_idx, val_idx) split of ``n`` rows."""
    perm = rng.permutation(n)
    n_val = int(round(fraction * n))
    if fraction > 0 and n_val == 0 and n > 1:
        n_val = 1
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def train(model, X, Y, cfg, callback=None):
    """Shuffled mini-batch Adam on ``model.loss_grad``.

    Parameters
    ----------
    model : DenseNet or any object with ``parameters`` and ``loss_grad``
        Parameters are updated in place.
    X, Y : ndarray
        Inputs and targets, rows are samples.
    cfg : TrainConfig
    callback : callable, optional
        Called as ``callback(epoch, history)`` after each epoch.

    Returns
    -------
    model, history : same object as ``model``, LossHistory
        When validation is enabled the parameters of the best-validation
        epoch are restored before returning.

    Raises
    ------
    DivergedAtEpoch
        If an epoch produces a non-finite loss.
    """
    X = as_matrix(X, "X")
    Y = as_matrix(Y, "Y")
    if X.shape[0] != Y.shape[0]:
        raise InvalidShape(f"X has {X.shape[0]} rows, Y has {Y.shape[0]}")
    history = LossHistory()
    if cfg.epochs == 0:
        return model, history

    shuffle_rng = _rng.stream(cfg.seed, "shuffle")
    if cfg.validation_fraction > 0:
        tr_idx, va_idx = split_validation(X.shape[0], cfg.validation_fraction,
                                          _rng.stream(cfg.seed, "validation"))
        Xtr, Ytr, Xva, Yva = X[tr_idx], Y[tr_idx], X[va_idx], Y[va_idx]
    else:
        Xtr, Ytr, Xva, Yva = X, Y, None, None

    params = model.parameters
    state = AdamState.zeros_like(params, beta1=cfg.beta1, beta2=cfg.beta2, epsilon=cfg.epsilon)
    n = Xtr.shape[0]
    bs = min(cfg.batch_size, n)
    best = (math.inf, None)
    stale = 0
    for epoch in range(cfg.epochs):
        state.lr = cfg.lr_at(epoch)
        perm = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = perm[start:start + bs]
            try:
                loss, grads = model.loss_grad(Xtr[idx], Ytr[idx])
            except NumericalFailure as exc:
                raise DivergedAtEpoch(epoch) from exc
            if not math.isfinite(loss):
                raise DivergedAtEpoch(epoch, loss)
            total += loss * len(idx)
            _, state = adam_step(params, grads, state, inplace=True)
        history.train.append(total / n)
        if Xva is not None:
            try:
                vloss = float(model.loss(Xva, Yva))
            except NumericalFailure as exc:
                raise DivergedAtEpoch(epoch) from exc
            if not math.isfinite(vloss):
                raise DivergedAtEpoch(epoch, vloss)
            history.val.append(vloss)
            if vloss < best[0]:
                best = (vloss, [p.copy() for p in params])
                history.best_epoch = epoch
                stale = 0
            else:
                stale += 1
        if callback is not None:
            callback(epoch, history)
        if epoch % 100 == 0:
            log.debug("epoch %d train %.3e val %s", epoch, history.train[-1],
                      f"{history.val[-1]:.3e}" if history.val else "-")
        if cfg.early_stop_patience is not None and stale >= cfg.early_stop_patience:
            break
    if best[1] is not None:
        for p, saved in zip(params, best[1]):
            p[...] = saved
    if cfg.lbfgs_iter:
        _, polished = lbfgs_refine(model, Xtr, Ytr, cfg.lbfgs_iter)
        history.train.extend(polished)
    return model, history


def lbfgs_refine(model, X, Y, max_iter=500, tol=1e-14):
    """Full-batch L-BFGS on ``model.loss_grad`` starting from the current parameters.

    Returns ``(model, losses)`` with one loss per accepted iteration.  A
    non-finite loss during the line search is reported to the optimiser as
    +inf so it backtracks; parameters end at the best point found.
    """
    from scipy.optimize import minimize

    params = model.parameters
    shapes = [p.shape for p in params]
    sizes = [p.size for p in params]

    def load(theta):
        off = 0
        for p, n, shp in zip(params, sizes, shapes):
            p[...] = theta[off:off + n].reshape(shp)
            off += n

    last = [math.inf]

    def fun(theta):
        load(theta)
        last[0] = math.inf
        try:
            loss, grads = model.loss_grad(X, Y)
        except NumericalFailure:
            return math.inf, np.zeros_like(theta)
        if not math.isfinite(loss):
            return math.inf, np.zeros_like(theta)
        last[0] = loss
        return loss, np.concatenate([np.ravel(g) for g in grads])

    losses = []
    x0 = np.concatenate([p.ravel() for p in params])
    res = minimize(fun, x0, jac=True, method="L-BFGS-B",
                   callback=lambda xk: losses.append(last[0]),
                   options=dict(maxiter=int(max_iter), ftol=tol, gtol=1e-12, maxcor=30))
    f0 = fun(x0)[0]
    load(res.x if res.fun <= f0 else x0)
    return model, losses


# ---------------------------------------------------------------------------
# Feature scaling


class MinMaxScaler(TransformerMixin, BaseEstimator):
    """Affine map of each feature onto [0, 1].

    Constant features map to 0.5 and invert back to their constant value.
    """

    def fit(self, X, y=None):
        X = as_matrix(X)
        self.data_min_ = X.min(axis=0)
        self.data_max_ = X.max(axis=0)
        rng = self.data_max_ - self.data_min_
        self.degenerate_ = rng <= 1e-300
        self.data_range_ = np.where(self.degenerate_, 1.0, rng)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "data_min_")
        X = as_matrix(X)
        out = (X - self.data_min_) / self.data_range_
        out[:, self.degenerate_] = 0.5
        return out

    def inverse_transform(self, X):
        check_is_fitted(self, "data_min_")
        X = as_matrix(X)
        out = X * self.data_range_ + self.data_min_
        out[:, self.degenerate_] = self.data_min_[self.degenerate_]
        return out


def minmax_fit_transform(data):
    """Return ``(scaled, scaler)`` for ``data`` of shape (N, features)."""
    scaler = MinMaxScaler().fit(data)
    return scaler.transform(data), scaler


def minmax_inverse(scaled, scaler):
    return scaler.inverse_transform(scaled)


# ---------------------------------------------------------------------------
# Persistence
#
#   svdonet-densenet 1
#   dims 2 32 1
#   activations tanh identity
#   input_shift <v...>   input_scale <v...>   output_shift ...   output_scale ...
#   W 0 32 2            followed by 32 rows of 2 numbers
#   b 0 32              followed by one row of 32 numbers
#   end

_NET_MAGIC = "svdonet-densenet"
_NET_VERSION = 1


def _fmt(values):
    return " ".join(format(float(v), ".17g") for v in np.ravel(values))


def write_net(net, fh):
    """Write ``net`` to an open text stream."""
    fh.write(f"{_NET_MAGIC} {_NET_VERSION}\n")
    fh.write("dims " + " ".join(str(d) for d in net.dims) + "\n")
    fh.write("activations " + " ".join(net.activations) + "\n")
    for key in ("input_shift", "input_scale", "output_shift", "output_scale"):
        fh.write(f"{key} {_fmt(getattr(net, key))}\n")
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        fh.write(f"W {i} {W.shape[0]} {W.shape[1]}\n")
        for row in W:
            fh.write(_fmt(row) + "\n")
        fh.write(f"b {i} {b.shape[0]}\n{_fmt(b)}\n")
    fh.write("end\n")


class _LineReader:
    def __init__(self, fh, path=None, offset=0):
        self.fh = fh
        self.path = path
        self.lineno = offset

    def next(self):
        line = self.fh.readline()
        self.lineno += 1
        if not line:
            raise ParseError("unexpected end of file", self.lineno, self.path)
        return line.rstrip("\n")

    def tokens(self, head=None):
        toks = self.next().split()
        if head is not None and (not toks or toks[0] != head):
            raise ParseError(f"expected {head!r}", self.lineno, self.path)
        return toks

    def floats(self, toks, n):
        try:
            vals = np.array([float(t) for t in toks], dtype=np.float64)
        except ValueError as exc:
            raise ParseError(str(exc), self.lineno, self.path) from None
        if vals.size != n:
            raise ParseError(f"expected {n} values, found {vals.size}", self.lineno, self.path)
        return vals


def read_net(fh, path=None, reader=None):
    """Read a network written by :func:`write_net` from an open stream."""
    r = reader or _LineReader(fh, path)
    head = r.tokens()
    if len(head) != 2 or head[0] != _NET_MAGIC:
        raise ParseError("not a svdonet dense-net block", r.lineno, r.path)
    if int(head[1]) != _NET_VERSION:
        raise ParseError(f"unsupported format version {head[1]}", r.lineno, r.path)
    dims = [int(t) for t in r.tokens("dims")[1:]]
    acts = r.tokens("activations")[1:]
    if len(acts) != len(dims) - 1:
        raise ParseError("activation count does not match dims", r.lineno, r.path)
    scaling = {}
    for key, n in (("input_shift", dims[0]), ("input_scale", dims[0]),
                   ("output_shift", dims[-1]), ("output_scale", dims[-1])):
        toks = r.tokens(key)
        scaling[key] = r.floats(toks[1:], n)
    weights, biases = [], []
    for i in range(len(dims) - 1):
        toks = r.tokens("W")
        rows, cols = int(toks[2]), int(toks[3])
        if (rows, cols) != (dims[i + 1], dims[i]):
            raise ParseError(f"layer {i} shape {rows}x{cols} contradicts dims", r.lineno, r.path)
        weights.append(np.vstack([r.floats(r.tokens(), cols) for _ in range(rows)])
                       if rows else np.zeros((0, cols)))
        toks = r.tokens("b")
        biases.append(r.floats(r.tokens(), int(toks[2])))
    r.tokens("end")
    return DenseNet(weights, biases, acts, **scaling)


def save_net(net, path):
    with open(path, "w", encoding="utf-8") as fh:
        write_net(net, fh)


def load_net(path):
    with open(path, encoding="utf-8") as fh:
        return read_net(fh, path=str(path))
