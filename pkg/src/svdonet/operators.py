"""DeepONet-family operator surrogates.

Four architectures are provided, each as a plain model class holding the
networks and the math, and as a scikit-learn style estimator that builds and
trains it:

===================  ======================  ==================================
estimator            model                   prediction for variable j
===================  ======================  ==================================
VanillaDeepONet      VanillaModel            sum_i b_i(u) psi_i(y) + b0
PODDeepONet          VanillaModel            same, trunk fitted to POD modes
SVDDeepONet          SVDAssembly             d(u) sum_i phi_i(y) a_i(u) + c(u)
FlexDeepONet         FlexModel               sum_i b_i(u) psi_i(y') + c(u)
===================  ======================  ==================================

where ``y' = s Theta(theta) y + y_bar`` is the moving frame produced by a
:class:`PreNet` from ``u``.

All estimators take ``X`` with columns ``[u | y]`` (``n_branch_inputs``
leading columns feed the branch) and ``Y`` with one column per output
variable.  Models with a target scaling are trained on
``(Y - target_shift) / target_scale``; predictions are returned in raw units.
"""

import logging
import math

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import _rng
from ._validation import as_matrix, as_rows
from .decomposition import center_scale, principal_components, principal_directions, svd, truncate
from .exceptions import GridRequired, InvalidShape
from .nn import DenseNet, TrainConfig, train

__all__ = [
    "VanillaModel",
    "FlexModel",
    "PreNet",
    "SVDAssembly",
    "rotation_matrix",
    "prenet_transform",
    "vanilla_forward",
    "flex_forward",
    "svd_deeponet_predict",
    "alignment_diagnostics",
    "alignment_residual",
    "grid_from_points",
    "VanillaDeepONet",
    "PODDeepONet",
    "SVDDeepONet",
    "FlexDeepONet",
]

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Helpers


def _symmetric_scaling(A):
    """Shift/scale mapping each column of ``A`` onto [-1, 1]."""
    lo, hi = A.min(axis=0), A.max(axis=0)
    half = (hi - lo) / 2.0
    return (hi + lo) / 2.0, np.where(half > 0, half, 1.0)


def _minmax_scaling(A):
    """Shift/scale mapping each column of ``A`` onto [0, 1]."""
    lo, hi = A.min(axis=0), A.max(axis=0)
    rng = hi - lo
    return lo, np.where(rng > 0, rng, 1.0)


def _split(X, n_branch):
    return X[:, :n_branch], X[:, n_branch:]


def grid_from_points(X, n_branch_inputs):
    """Recover the (scenario, y) grid behind pointwise data.

    Returns
    -------
    inputs : ndarray (S, q)
        Unique scenario inputs (sorted).
    coords : ndarray (n, d)
        Unique trunk inputs (sorted).
    u_idx, y_idx : ndarray (N,)
        Grid position of every row of ``X``.

    Raises
    ------
    GridRequired
        If the rows do not cover every (scenario, y) pair exactly once.
    """
    X = as_matrix(X)
    U, Yc = _split(X, n_branch_inputs)
    inputs, u_idx = np.unique(U, axis=0, return_inverse=True)
    coords, y_idx = np.unique(Yc, axis=0, return_inverse=True)
    u_idx, y_idx = u_idx.ravel(), y_idx.ravel()
    S, n = inputs.shape[0], coords.shape[0]
    if S * n != X.shape[0] or np.unique(u_idx * n + y_idx).size != X.shape[0]:
        raise GridRequired(
            f"{X.shape[0]} points do not form a complete grid of {S} scenarios x {n} samples"
        )
    return inputs, coords, u_idx, y_idx


def _train_config(est, n_rows):
    lr = est.learning_rate
    schedule = [(0, float(lr))] if np.isscalar(lr) else [tuple(e) for e in lr]
    return TrainConfig(
        epochs=int(est.epochs),
        batch_size=int(min(est.batch_size, n_rows)),
        lr_schedule=schedule,
        seed=int(est.random_state),
        validation_fraction=float(est.validation_fraction),
        early_stop_patience=est.early_stopping_patience,
        lbfgs_iter=int(est.lbfgs_iter),
    )


def _fit_regressor(dims, X, Y, cfg, rng, hidden_activation="tanh", output_activation="identity"):
    """Fit a DenseNet mapping ``X`` to ``Y`` with min-max normalised targets."""
    in_shift, in_scale = _symmetric_scaling(X)
    out_shift, out_scale = _minmax_scaling(Y)
    net = DenseNet.create(dims, hidden_activation, output_activation, rng=rng,
                          input_shift=in_shift, input_scale=in_scale)
    _, hist = train(net, X, (Y - out_shift) / out_scale, cfg)
    net.output_shift = out_shift
    net.output_scale = out_scale
    return net, hist


# ---------------------------------------------------------------------------
# Vanilla / POD model


class VanillaModel:
    """Unstacked DeepONet with bias, one branch/trunk pair per variable.

    Parameters
    ----------
    branches, trunks : list of DenseNet
        ``branches[j]`` maps u to p values, ``trunks[j]`` maps y to p values.
    b0 : array_like of shape (n_vars,)
    n_branch_inputs : int
    target_shift, target_scale : array_like of shape (n_vars,), optional
    trainable : iterable of {"branch", "trunk", "bias"}
        Components exposed through :attr:`parameters`.
    """

    variant = "vanilla"

    def __init__(self, branches, trunks, b0, n_branch_inputs, target_shift=None,
                 target_scale=None, trainable=("branch", "trunk", "bias")):
        if len(branches) != len(trunks) or not branches:
            raise InvalidShape("need one branch and one trunk per variable")
        self.branches = list(branches)
        self.trunks = list(trunks)
        nv = len(self.branches)
        for j, (b, t) in enumerate(zip(self.branches, self.trunks)):
            if b.output_dim != t.output_dim:
                raise InvalidShape(f"variable {j}: branch gives {b.output_dim}, trunk {t.output_dim}")
            if b.input_dim != n_branch_inputs:
                raise InvalidShape(f"variable {j}: branch expects {b.input_dim} inputs")
        self.b0 = np.array(np.broadcast_to(np.asarray(b0, dtype=np.float64), (nv,)))
        self.n_branch_inputs = int(n_branch_inputs)
        self.target_shift = np.zeros(nv) if target_shift is None else np.asarray(target_shift, float)
        self.target_scale = np.ones(nv) if target_scale is None else np.asarray(target_scale, float)
        self.trainable = tuple(trainable)

    @property
    def n_vars(self):
        return len(self.branches)

    @property
    def p(self):
        return self.trunks[0].output_dim

    @property
    def n_trunk_inputs(self):
        return self.trunks[0].input_dim

    @property
    def param_count(self):
        return sum(n.param_count for n in self.branches + self.trunks) + self.b0.size

    @property
    def parameters(self):
        out = []
        if "branch" in self.trainable:
            for n in self.branches:
                out.extend(n.parameters)
        if "trunk" in self.trainable:
            for n in self.trunks:
                out.extend(n.parameters)
        if "bias" in self.trainable:
            out.append(self.b0)
        return out

    def nets(self):
        return [("branch", j, n) for j, n in enumerate(self.branches)] + \
               [("trunk", j, n) for j, n in enumerate(self.trunks)]

    def _scaled(self, U, Yc):
        outs, caches = [], []
        for j in range(self.n_vars):
            B, cb = self.branches[j].forward_train(U)
            T, ct = self.trunks[j].forward_train(Yc)
            outs.append(np.einsum("ij,ij->i", B, T) + self.b0[j])
            caches.append((B, cb, T, ct))
        return np.column_stack(outs), caches

    def forward(self, U, Yc):
        """Raw-unit predictions, shape (N, n_vars)."""
        U = as_rows(U, self.n_branch_inputs, "u")
        Yc = as_rows(Yc, self.n_trunk_inputs, "y")
        if U.shape[0] != Yc.shape[0]:
            U, Yc = np.broadcast_arrays(U, Yc) if 1 in (U.shape[0], Yc.shape[0]) else (U, Yc)
        out, _ = self._scaled(U, Yc)
        return out * self.target_scale + self.target_shift

    def predict(self, X):
        U, Yc = _split(as_matrix(X), self.n_branch_inputs)
        return self.forward(U, Yc)

    def loss(self, X, Y):
        U, Yc = _split(X, self.n_branch_inputs)
        out, _ = self._scaled(U, Yc)
        return float(np.mean((out - (Y - self.target_shift) / self.target_scale) ** 2))

    def loss_grad(self, X, Y):
        U, Yc = _split(X, self.n_branch_inputs)
        out, caches = self._scaled(U, Yc)
        resid = out - (Y - self.target_shift) / self.target_scale
        loss = float(np.mean(resid**2))
        dout = 2.0 * resid / resid.size
        gb, gt = [], []
        for j, (B, cb, T, ct) in enumerate(caches):
            d = dout[:, j:j + 1]
            if "branch" in self.trainable:
                gb.extend(self.branches[j].backward(cb, d * T)[0])
            if "trunk" in self.trainable:
                gt.extend(self.trunks[j].backward(ct, d * B)[0])
        grads = gb + gt
        if "bias" in self.trainable:
            grads.append(dout.sum(axis=0))
        return loss, grads


def vanilla_forward(model, u, y):
    """Evaluate a :class:`VanillaModel` at one or many ``(u, y)`` pairs."""
    out = model.forward(u, y)
    return out[0] if out.shape[0] == 1 else out


# ---------------------------------------------------------------------------
# Pre-Net and the transformation layer


def rotation_matrix(theta):
    """2-D rotation matrices for angles ``theta`` (any shape) -> (..., 2, 2)."""
    theta = np.asarray(theta, dtype=np.float64)
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def prenet_transform(scale, theta, shift, y):
    """Moving-frame coordinates ``y' = scale * Theta(theta) @ y + shift``.

    Parameters
    ----------
    scale : float or array (N,)
    theta : float, array (N,), or None
        Rotation angle; ignored (identity) when ``y`` is one-dimensional.
    shift : array (N_y,) or (N, N_y)
    y : array (N_y,) or (N, N_y)
    """
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    Y = np.atleast_2d(y)
    N, d = Y.shape
    s = np.broadcast_to(np.asarray(scale, dtype=np.float64), (N,))
    sh = np.broadcast_to(np.asarray(shift, dtype=np.float64), (N, d))
    if d == 2 and theta is not None:
        th = np.broadcast_to(np.asarray(theta, dtype=np.float64), (N,))
        c, si = np.cos(th), np.sin(th)
        rot = np.column_stack([c * Y[:, 0] - si * Y[:, 1], si * Y[:, 0] + c * Y[:, 1]])
    else:
        if d > 2 and theta is not None:
            raise InvalidShape("rotations are supported for two-dimensional y only")
        rot = Y
    out = s[:, None] * rot + sh
    return out[0] if single else out


class PreNet:
    """Maps ``u`` to moving-frame parameters (scale, angle, shifts).

    The frame vector for each of ``n_sets`` frames is laid out as
    ``[log_scale, angle, shift_0 .. shift_{d-1}]`` (absent components are
    omitted).  ``scale = exp(log_scale)`` keeps the stretch positive.

    Parameters
    ----------
    nets : list of DenseNet
    slots : list of list of int
        ``slots[k][i]`` is the position in the concatenated frame vector fed
        by output ``i`` of ``nets[k]``.
    components : tuple of {"scale", "rotation", "shift"}
    n_coords : int
        Dimension of ``y``.
    n_sets : int
        1 for a shared frame, or one frame per output variable.
    """

    def __init__(self, nets, slots, components, n_coords, n_sets=1):
        self.nets = list(nets)
        self.slots = [list(map(int, s)) for s in slots]
        self.components = tuple(components)
        self.n_coords = int(n_coords)
        self.n_sets = int(n_sets)
        if "rotation" in self.components and self.n_coords > 2:
            raise InvalidShape("rotation components require y of dimension <= 2")
        self.layout = self._layout()
        filled = sorted(i for s in self.slots for i in s)
        if filled != list(range(self.n_sets * self.width)):
            raise InvalidShape("Pre-Net slots must cover the frame vector exactly once")

    def _layout(self):
        off, lay = 0, {}
        if "scale" in self.components:
            lay["scale"] = off
            off += 1
        if "rotation" in self.components and self.n_coords == 2:
            lay["rotation"] = off
            off += 1
        if "shift" in self.components:
            lay["shift"] = off
            off += self.n_coords
        self._width = off
        return lay

    @property
    def width(self):
        return self._width

    @property
    def param_count(self):
        return sum(n.param_count for n in self.nets)

    @property
    def parameters(self):
        out = []
        for n in self.nets:
            out.extend(n.parameters)
        return out

    @classmethod
    def create(cls, n_inputs, n_coords, components=("scale", "rotation", "shift"),
               hidden=(16,), layout="single", n_sets=1, activation="tanh", rng=None,
               input_shift=None, input_scale=None):
        """Build a Pre-Net whose initial frame is the identity.

        ``layout="single"`` uses one network with a split head;
        ``"separate"`` uses one network per component (rotation / stretch /
        shift).  Last-layer weights and biases start at zero, so the initial
        output is ``scale = 1, theta = 0, shift = 0``.
        """
        if "rotation" in components and n_coords > 2:
            raise InvalidShape("rotation components require y of dimension <= 2")
        proto = cls.__new__(cls)
        proto.components, proto.n_coords, proto.n_sets = tuple(components), n_coords, n_sets
        lay = proto._layout()
        width = proto._width
        if width == 0:
            raise ValueError("Pre-Net needs at least one active component")
        groups = []
        if layout == "single":
            groups.append([k * width + i for k in range(n_sets) for i in range(width)])
        elif layout == "separate":
            sizes = {"scale": 1, "rotation": 1, "shift": n_coords}
            for comp in ("rotation", "scale", "shift"):
                if comp in lay:
                    groups.append([k * width + lay[comp] + i for k in range(n_sets)
                                   for i in range(sizes[comp])])
        else:
            raise ValueError(f"unknown Pre-Net layout {layout!r}")
        nets = []
        for slots in groups:
            net = DenseNet.create([n_inputs, *hidden, len(slots)], activation, "identity",
                                  rng=rng, input_shift=input_shift, input_scale=input_scale)
            net.weights[-1][...] = 0.0
            net.biases[-1][...] = 0.0
            nets.append(net)
        return cls(nets, groups, components, n_coords, n_sets)

    def _frame_vector(self, U):
        N = U.shape[0]
        F = np.zeros((N, self.n_sets * self.width))
        caches = []
        for net, slots in zip(self.nets, self.slots):
            out, cache = net.forward_train(U)
            F[:, slots] = out
            caches.append(cache)
        return F, caches

    def _unpack(self, F):
        N = F.shape[0]
        Fk = F.reshape(N, self.n_sets, self.width)
        lay = self.layout
        scale = np.exp(Fk[:, :, lay["scale"]]) if "scale" in lay else np.ones((N, self.n_sets))
        theta = Fk[:, :, lay["rotation"]] if "rotation" in lay else None
        if "shift" in lay:
            shift = Fk[:, :, lay["shift"]:lay["shift"] + self.n_coords]
        else:
            shift = np.zeros((N, self.n_sets, self.n_coords))
        return scale, theta, shift

    def frames(self, U):
        """``(scale (N, K), theta (N, K) or None, shift (N, K, d))``."""
        F, _ = self._frame_vector(np.atleast_2d(np.asarray(U, dtype=np.float64)))
        return self._unpack(F)

    def forward_train(self, U):
        F, caches = self._frame_vector(U)
        return self._unpack(F), (F, caches)

    def backward(self, cache, dscale, dtheta, dshift):
        """Parameter gradients from gradients w.r.t. scale, theta, shift."""
        F, caches = cache
        N = F.shape[0]
        dF = np.zeros((N, self.n_sets, self.width))
        lay = self.layout
        Fk = F.reshape(N, self.n_sets, self.width)
        if "scale" in lay:
            dF[:, :, lay["scale"]] = dscale * np.exp(Fk[:, :, lay["scale"]])
        if "rotation" in lay:
            dF[:, :, lay["rotation"]] = dtheta
        if "shift" in lay:
            dF[:, :, lay["shift"]:lay["shift"] + self.n_coords] = dshift
        dF = dF.reshape(N, -1)
        grads = []
        for net, slots, c in zip(self.nets, self.slots, caches):
            grads.extend(net.backward(c, dF[:, slots])[0])
        return grads


def _transform_backward(g, scale, theta, Yn):
    """Gradients of ``y' = s R(theta) y + shift`` w.r.t. s, theta, shift."""
    if theta is not None and Yn.shape[1] == 2:
        c, si = np.cos(theta), np.sin(theta)
        rx = c * Yn[:, 0] - si * Yn[:, 1]
        ry = si * Yn[:, 0] + c * Yn[:, 1]
        ds = g[:, 0] * rx + g[:, 1] * ry
        # dR/dtheta y = (-ry, rx)
        dtheta = scale * (-g[:, 0] * ry + g[:, 1] * rx)
    else:
        ds = np.einsum("ij,ij->i", g, Yn)
        dtheta = None
    return ds, dtheta, g


# ---------------------------------------------------------------------------
# Flex model


class FlexModel:
    """DeepONet with a Pre-Net moving frame and a centring branch output.

    ``branches[j]`` emits ``p + 1`` values ``[b_1 .. b_p, c]``; the trunk of
    variable ``j`` is evaluated at the frame-transformed coordinates
    ``s Theta(theta) (y - frame_shift) / frame_scale + y_bar``.  There is no
    separate scalar bias: ``c(u)`` plays that role.

    With ``prenet.n_sets == n_vars`` variable ``j`` uses frame ``j``;
    otherwise all variables share frame 0.
    """

    variant = "flex"

    def __init__(self, prenet, branches, trunks, n_branch_inputs, frame_shift=None,
                 frame_scale=1.0, target_shift=None, target_scale=None):
        if len(branches) != len(trunks) or not branches:
            raise InvalidShape("need one branch and one trunk per variable")
        self.prenet = prenet
        self.branches = list(branches)
        self.trunks = list(trunks)
        nv = len(self.branches)
        for j, (b, t) in enumerate(zip(self.branches, self.trunks)):
            if b.output_dim != t.output_dim + 1:
                raise InvalidShape(f"variable {j}: branch must emit p + 1 = {t.output_dim + 1} values")
            if t.input_dim != prenet.n_coords:
                raise InvalidShape(f"variable {j}: trunk expects {t.input_dim} coords, "
                                   f"Pre-Net frames {prenet.n_coords}")
        if prenet.n_sets not in (1, nv):
            raise InvalidShape("Pre-Net must provide one shared frame or one per variable")
        self.n_branch_inputs = int(n_branch_inputs)
        d = prenet.n_coords
        self.frame_shift = np.zeros(d) if frame_shift is None else np.asarray(frame_shift, float)
        self.frame_scale = float(frame_scale)
        self.target_shift = np.zeros(nv) if target_shift is None else np.asarray(target_shift, float)
        self.target_scale = np.ones(nv) if target_scale is None else np.asarray(target_scale, float)

    @property
    def n_vars(self):
        return len(self.branches)

    @property
    def p(self):
        return self.trunks[0].output_dim

    @property
    def n_trunk_inputs(self):
        return self.prenet.n_coords

    @property
    def param_count(self):
        return self.prenet.param_count + sum(n.param_count for n in self.branches + self.trunks)

    @property
    def parameters(self):
        out = list(self.prenet.parameters)
        for n in self.branches + self.trunks:
            out.extend(n.parameters)
        return out

    def nets(self):
        return ([("prenet", k, n) for k, n in enumerate(self.prenet.nets)]
                + [("branch", j, n) for j, n in enumerate(self.branches)]
                + [("trunk", j, n) for j, n in enumerate(self.trunks)])

    def _set(self, j):
        return j if self.prenet.n_sets == self.n_vars else 0

    def normalise_coords(self, Yc):
        return (Yc - self.frame_shift) / self.frame_scale

    def transformed_coords(self, U, Yc, j=0):
        """Trunk inputs ``y'`` of variable ``j`` (normalised frame units)."""
        U = as_rows(U, self.n_branch_inputs, "u")
        Yc = as_rows(Yc, self.n_trunk_inputs, "y")
        scale, theta, shift = self.prenet.frames(U)
        k = self._set(j)
        th = None if theta is None else theta[:, k]
        return prenet_transform(scale[:, k], th, shift[:, k], self.normalise_coords(Yc))

    def _scaled(self, U, Yc):
        Yn = self.normalise_coords(Yc)
        (scale, theta, shift), pcache = self.prenet.forward_train(U)
        outs, caches = [], []
        for j in range(self.n_vars):
            k = self._set(j)
            th = None if theta is None else theta[:, k]
            Yt = prenet_transform(scale[:, k], th, shift[:, k], Yn)
            B, cb = self.branches[j].forward_train(U)
            T, ct = self.trunks[j].forward_train(Yt)
            p = T.shape[1]
            outs.append(np.einsum("ij,ij->i", B[:, :p], T) + B[:, p])
            caches.append((B, cb, T, ct, k))
        return np.column_stack(outs), (Yn, scale, theta, pcache, caches)

    def forward(self, U, Yc):
        U = as_rows(U, self.n_branch_inputs, "u")
        Yc = as_rows(Yc, self.n_trunk_inputs, "y")
        out, _ = self._scaled(U, Yc)
        return out * self.target_scale + self.target_shift

    def predict(self, X):
        U, Yc = _split(as_matrix(X), self.n_branch_inputs)
        return self.forward(U, Yc)

    def loss(self, X, Y):
        U, Yc = _split(X, self.n_branch_inputs)
        out, _ = self._scaled(U, Yc)
        return float(np.mean((out - (Y - self.target_shift) / self.target_scale) ** 2))

    def loss_grad(self, X, Y):
        U, Yc = _split(X, self.n_branch_inputs)
        out, (Yn, scale, theta, pcache, caches) = self._scaled(U, Yc)
        resid = out - (Y - self.target_shift) / self.target_scale
        loss = float(np.mean(resid**2))
        dout = 2.0 * resid / resid.size
        N, K = scale.shape
        dscale = np.zeros((N, K))
        dtheta = None if theta is None else np.zeros((N, K))
        dshift = np.zeros((N, K, self.prenet.n_coords))
        gb, gt = [], []
        for j, (B, cb, T, ct, k) in enumerate(caches):
            d = dout[:, j:j + 1]
            p = T.shape[1]
            dB = np.empty_like(B)
            dB[:, :p] = d * T
            dB[:, p] = d[:, 0]
            gb.extend(self.branches[j].backward(cb, dB)[0])
            tg, dYt = self.trunks[j].backward(ct, d * B[:, :p])
            gt.extend(tg)
            th = None if theta is None else theta[:, k]
            ds, dth, dsh = _transform_backward(dYt, scale[:, k], th, Yn)
            dscale[:, k] += ds
            if dtheta is not None:
                dtheta[:, k] += dth
            dshift[:, k] += dsh
        gp = self.prenet.backward(pcache, dscale, dtheta, dshift)
        return loss, gp + gb + gt


def flex_forward(model, u, y):
    """Evaluate a :class:`FlexModel` at one or many ``(u, y)`` pairs."""
    out = model.forward(u, y)
    return out[0] if out.shape[0] == 1 else out


def alignment_diagnostics(model, inputs, coords=None):
    """Learned frame per scenario, optionally with transformed coordinates.

    Parameters
    ----------
    model : FlexModel or fitted FlexDeepONet
    inputs : array (S, q)
        Scenario inputs.
    coords : array (n, d), optional
        Grid of trunk inputs to map into each scenario's frame.

    Returns
    -------
    dict
        ``u``, ``scale``, ``theta``, ``shift`` (normalised frame units) and
        ``shift_raw`` (the affine offset expressed in raw ``y`` units:
        ``y'_raw = scale Theta (y - y_c) + y_c + frame_scale * shift``), one
        row per scenario and frame set; ``coords_transformed`` of shape
        (S, n, d) for frame 0 when ``coords`` is given.
    """
    if isinstance(model, FlexDeepONet):
        check_is_fitted(model, "models_")
        model = model.models_[0]
    U = as_rows(inputs, model.n_branch_inputs, "inputs")
    scale, theta, shift = model.prenet.frames(U)
    out = {
        "u": U,
        "scale": scale,
        "theta": np.zeros_like(scale) if theta is None else theta,
        "shift": shift,
        "shift_raw": shift * model.frame_scale,
    }
    if coords is not None:
        C = as_rows(coords, model.n_trunk_inputs, "coords")
        Cn = model.normalise_coords(C)
        th = out["theta"]
        out["coords_transformed"] = np.stack([
            prenet_transform(scale[s, 0], th[s, 0], shift[s, 0], Cn) * model.frame_scale
            + model.frame_shift
            for s in range(U.shape[0])
        ])
    return out


def alignment_residual(coords, values, n_grid=200):
    """Mean across-scenario variance of shape-normalised curves.

    Each scenario's curve ``values[s]`` sampled at 1-D ``coords[s]`` is
    min-max normalised and linearly interpolated on a common grid spanning
    the overlap of all coordinate ranges; the mean (over the grid) of the
    variance across scenarios is returned.  Perfectly aligned curves give 0.
    """
    values = np.asarray(values, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim == 1:
        coords = np.broadcast_to(coords, values.shape)
    coords = coords.reshape(values.shape)
    lo = max(c.min() for c in coords)
    hi = min(c.max() for c in coords)
    if not hi > lo:
        return float("inf")
    grid = np.linspace(lo, hi, n_grid)
    curves = []
    for c, v in zip(coords, values):
        order = np.argsort(c)
        vn = (v - v.min()) / max(v.max() - v.min(), 1e-300)
        curves.append(np.interp(grid, c[order], vn[order]))
    return float(np.mean(np.var(np.array(curves), axis=0)))


# ---------------------------------------------------------------------------
# SVD assembly


class SVDAssembly:
    """Independently fitted trunks and branches assembled for prediction.

    Parameters
    ----------
    trunks : list
        One per variable group; ``trunks[g].forward(Y) -> (N, p)`` fits the
        principal components of group ``g``.
    branches : list
        One per variable; ``branches[j].forward(U) -> (N, p + 2)`` fits
        ``[a_1 .. a_p, c, d]``.
    groups : list of list of int
        Variable indices sharing each trunk.
    """

    variant = "svd"

    def __init__(self, trunks, branches, groups, n_branch_inputs):
        self.trunks = list(trunks)
        self.branches = list(branches)
        self.groups = [list(map(int, g)) for g in groups]
        self.n_branch_inputs = int(n_branch_inputs)
        if len(self.trunks) != len(self.groups):
            raise InvalidShape("one trunk per variable group required")
        members = sorted(j for g in self.groups for j in g)
        if members != list(range(len(self.branches))):
            raise InvalidShape("groups must partition the variables")
        self._group_of = {j: gi for gi, g in enumerate(self.groups) for j in g}

    @property
    def n_vars(self):
        return len(self.branches)

    @property
    def p(self):
        return _out_dim(self.trunks[0])

    @property
    def param_count(self):
        return sum(getattr(n, "param_count", 0) for n in self.trunks + self.branches)

    def nets(self):
        return [("trunk", g, n) for g, n in enumerate(self.trunks)] + \
               [("branch", j, n) for j, n in enumerate(self.branches)]

    def forward(self, U, Yc):
        U = np.atleast_2d(np.asarray(U, dtype=np.float64))
        Yc = np.atleast_2d(np.asarray(Yc, dtype=np.float64))
        if U.shape[1] != self.n_branch_inputs:
            raise InvalidShape(f"expected {self.n_branch_inputs} branch inputs, got {U.shape[1]}")
        phis = [t.forward(Yc) for t in self.trunks]
        out = []
        for j, br in enumerate(self.branches):
            Phi = phis[self._group_of[j]]
            p = Phi.shape[1]
            B = br.forward(U)
            if B.shape[1] != p + 2:
                raise InvalidShape(f"branch {j} must emit p + 2 = {p + 2} values")
            out.append(B[:, p + 1] * np.einsum("ij,ij->i", Phi, B[:, :p]) + B[:, p])
        return np.column_stack(out)

    def predict(self, X):
        U, Yc = _split(as_matrix(X), self.n_branch_inputs)
        return self.forward(U, Yc)


def _out_dim(f):
    return getattr(f, "output_dim", None)


def svd_deeponet_predict(assembly, u, y):
    """``d(u) * sum_i phi_i(y) a_i(u) + c(u)`` for every variable."""
    out = assembly.forward(u, y)
    return out[0] if out.shape[0] == 1 else out


# ---------------------------------------------------------------------------
# Estimators


_PREDICT_CHUNK = 50_000


class _OperatorEstimator(RegressorMixin, BaseEstimator):
    """Shared fit/predict plumbing; subclasses build and train models."""

    def _prepare(self, X, Y):
        X = as_matrix(X, "X")
        Y = np.asarray(Y, dtype=np.float64)
        self._y_1d = Y.ndim == 1
        Y = as_matrix(Y, "Y")
        if X.shape[0] != Y.shape[0]:
            raise InvalidShape(f"X has {X.shape[0]} rows, Y has {Y.shape[0]}")
        q = int(self.n_branch_inputs)
        if not (0 < q < X.shape[1]):
            raise InvalidShape("n_branch_inputs must leave at least one trunk column")
        self.n_features_in_ = X.shape[1]
        self.n_outputs_ = Y.shape[1]
        return X, Y

    def _groups(self):
        if self.training == "independent":
            return [[j] for j in range(self.n_outputs_)]
        if self.training == "joint":
            return [list(range(self.n_outputs_))]
        raise ValueError(f"training must be 'independent' or 'joint', got {self.training!r}")

    def predict(self, X):
        check_is_fitted(self, "models_")
        X = as_matrix(X, "X")
        if X.shape[1] != self.n_features_in_:
            raise InvalidShape(f"expected {self.n_features_in_} columns, got {X.shape[1]}")
        out = np.empty((X.shape[0], self.n_outputs_))
        # chunked so large evaluation grids do not hold every activation at once
        for lo in range(0, X.shape[0], _PREDICT_CHUNK):
            sl = slice(lo, lo + _PREDICT_CHUNK)
            for g, model in zip(self.groups_, self.models_):
                out[sl, g] = model.predict(X[sl])
        return out[:, 0] if self._y_1d else out

    @property
    def param_count_(self):
        check_is_fitted(self, "models_")
        return sum(m.param_count for m in self.models_)

    @property
    def p_(self):
        check_is_fitted(self, "models_")
        return self.models_[0].p


class VanillaDeepONet(_OperatorEstimator):
    """Vanilla (unstacked, biased) DeepONet trained end to end by MSE.

    Parameters
    ----------
    n_branch_inputs : int
        Number of leading ``X`` columns that form ``u``.
    p : int
        Latent dimension shared by branch and trunk outputs.
    branch_hidden, trunk_hidden : tuple of int
        Hidden layer widths.
    activation : str
        Hidden activation.
    trunk_output_activation : str
    epochs, batch_size, learning_rate, random_state, validation_fraction,
    early_stopping_patience
        Adam training settings; ``learning_rate`` may be a float or a list of
        ``(epoch, lr)`` pairs.
    training : {"independent", "joint"}
        Train each output variable's branch/trunk separately, or minimise
        the summed loss of all variables at once.
    """

    def __init__(self, n_branch_inputs=1, p=8, branch_hidden=(64,) * 6, trunk_hidden=(64,) * 6,
                 activation="tanh", trunk_output_activation="identity", epochs=1000,
                 batch_size=256, learning_rate=1e-3, random_state=0, validation_fraction=0.0,
                 early_stopping_patience=None, lbfgs_iter=0, training="independent"):
        self.n_branch_inputs = n_branch_inputs
        self.p = p
        self.branch_hidden = branch_hidden
        self.trunk_hidden = trunk_hidden
        self.activation = activation
        self.trunk_output_activation = trunk_output_activation
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state
        self.validation_fraction = validation_fraction
        self.early_stopping_patience = early_stopping_patience
        self.lbfgs_iter = lbfgs_iter
        self.training = training

    def _build(self, U, Yc, Yg, gi):
        rng = _rng.stream(self.random_state, f"init/{gi}")
        bs, bsc = _symmetric_scaling(U)
        ts, tsc = _symmetric_scaling(Yc)
        branches, trunks = [], []
        for _ in range(Yg.shape[1]):
            branches.append(DenseNet.create([U.shape[1], *self.branch_hidden, self.p],
                                            self.activation, "identity", rng=rng,
                                            input_shift=bs, input_scale=bsc))
            trunks.append(DenseNet.create([Yc.shape[1], *self.trunk_hidden, self.p],
                                          self.activation, self.trunk_output_activation, rng=rng,
                                          input_shift=ts, input_scale=tsc))
        shift, scale = _minmax_scaling(Yg)
        b0 = ((Yg - shift) / scale).mean(axis=0)
        return VanillaModel(branches, trunks, b0, U.shape[1], shift, scale)

    def fit(self, X, Y):
        X, Y = self._prepare(X, Y)
        U, Yc = _split(X, self.n_branch_inputs)
        self.groups_ = self._groups()
        self.models_, self.history_ = [], []
        cfg = _train_config(self, X.shape[0])
        for gi, g in enumerate(self.groups_):
            model = self._build(U, Yc, Y[:, g], gi)
            _, hist = train(model, X, Y[:, g], cfg)
            self.models_.append(model)
            self.history_.append(hist)
        return self


class PODDeepONet(VanillaDeepONet):
    """POD-DeepONet: trunk regressed on SVD modes, frozen, then branch trained.

    Requires gridded data.  Steps per variable: (1) SVD of the (y x scenario)
    snapshot matrix after optional column preprocessing; (2) a trunk network
    is fitted to the leading ``p`` left singular vectors, normalised to unit
    RMS, as functions of ``y``; (3) the trunk is frozen; (4) the branch and
    bias are trained end to end on the pointwise data.

    Extra parameters
    ----------------
    center, scale : see :func:`svdonet.decomposition.center_scale`
    trunk_epochs : int, optional
        Epochs for the trunk regression (defaults to ``epochs``).
    """

    def __init__(self, n_branch_inputs=1, p=8, branch_hidden=(64,) * 6, trunk_hidden=(64,) * 6,
                 activation="tanh", trunk_output_activation="identity", epochs=1000,
                 batch_size=256, learning_rate=1e-3, random_state=0, validation_fraction=0.0,
                 early_stopping_patience=None, lbfgs_iter=0, training="independent", center="none",
                 scale="none", trunk_epochs=None):
        super().__init__(n_branch_inputs, p, branch_hidden, trunk_hidden, activation,
                         trunk_output_activation, epochs, batch_size, learning_rate,
                         random_state, validation_fraction, early_stopping_patience, lbfgs_iter,
                         training)
        self.center = center
        self.scale = scale
        self.trunk_epochs = trunk_epochs

    def fit(self, X, Y):
        X, Y = self._prepare(X, Y)
        inputs, coords, u_idx, y_idx = grid_from_points(X, self.n_branch_inputs)
        U, Yc = _split(X, self.n_branch_inputs)
        self.groups_ = self._groups()
        self.models_, self.history_, self.trunk_history_ = [], [], []
        cfg = _train_config(self, X.shape[0])
        tcfg = _train_config(self, coords.shape[0])
        if self.trunk_epochs is not None:
            tcfg.epochs = int(self.trunk_epochs)
        n = coords.shape[0]
        for gi, g in enumerate(self.groups_):
            model = self._build(U, Yc, Y[:, g], gi)
            rng = _rng.stream(self.random_state, f"pod-trunk/{gi}")
            for k, j in enumerate(g):
                M = np.zeros((n, inputs.shape[0]))
                M[y_idx, u_idx] = Y[:, j]
                Mp, _ = center_scale(M, self.center, self.scale)
                dec = truncate(svd(Mp), self.p)
                modes = dec.U * math.sqrt(n)
                trunk, hist = _fit_regressor([coords.shape[1], *self.trunk_hidden, self.p],
                                             coords, modes, tcfg, rng, self.activation,
                                             self.trunk_output_activation)
                model.trunks[k] = trunk
                self.trunk_history_.append(hist)
            model.trainable = ("branch", "bias")
            _, hist = train(model, X, Y[:, g], cfg)
            self.models_.append(model)
            self.history_.append(hist)
        return self


class SVDDeepONet(_OperatorEstimator):
    """SVD-DeepONet: independently fitted principal-component trunks and
    direction/centring/scaling branches, assembled without further training.

    Per variable group (``shared_groups``; default one group per variable):
    the scenario-aggregated snapshot matrices of the group's variables are
    concatenated column-wise, each column is centred and scaled, and the
    truncated SVD gives ``Phi`` (n x p) and ``A``.  One trunk is fitted to
    ``(y; Phi)`` and, for every variable, a branch to ``(u; [A_j, c_j, d_j])``.
    Trunk and branch fits are independent; ``n_jobs`` runs them in parallel.

    Parameters
    ----------
    shared_groups : None, "all", or list of list of int
    center, scale : column preprocessing (see :func:`center_scale`)
    n_jobs : int or None
        joblib parallelism over the independent fits.
    """

    def __init__(self, n_branch_inputs=1, p=8, branch_hidden=(64,) * 6, trunk_hidden=(64,) * 6,
                 activation="tanh", epochs=1000, batch_size=256, learning_rate=1e-3,
                 random_state=0, validation_fraction=0.0, early_stopping_patience=None, lbfgs_iter=0,
                 shared_groups=None, center="mean", scale="auto", n_jobs=None):
        self.n_branch_inputs = n_branch_inputs
        self.p = p
        self.branch_hidden = branch_hidden
        self.trunk_hidden = trunk_hidden
        self.activation = activation
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state
        self.validation_fraction = validation_fraction
        self.early_stopping_patience = early_stopping_patience
        self.lbfgs_iter = lbfgs_iter
        self.shared_groups = shared_groups
        self.center = center
        self.scale = scale
        self.n_jobs = n_jobs

    def _groups(self):
        if self.shared_groups is None:
            return [[j] for j in range(self.n_outputs_)]
        if self.shared_groups == "all":
            return [list(range(self.n_outputs_))]
        groups = [list(map(int, g)) for g in self.shared_groups]
        if sorted(j for g in groups for j in g) != list(range(self.n_outputs_)):
            raise ValueError("shared_groups must partition the output variables")
        return groups

    def decompose(self, X, Y):
        """SVD stage only: returns per-group dicts with Phi, A, B blocks and preprocessing."""
        X, Y = self._prepare(X, Y)
        inputs, coords, u_idx, y_idx = grid_from_points(X, self.n_branch_inputs)
        S, n = inputs.shape[0], coords.shape[0]
        out = []
        for g in self._groups():
            blocks = []
            for j in g:
                M = np.zeros((n, S))
                M[y_idx, u_idx] = Y[:, j]
                blocks.append(M)
            Z = np.hstack(blocks)
            Zp, prep = center_scale(Z, self.center, self.scale)
            dec = truncate(svd(Zp), self.p)
            Phi, A = principal_components(dec), principal_directions(dec)
            B = {j: np.column_stack([A[k * S:(k + 1) * S], prep.c[k * S:(k + 1) * S],
                                     prep.d[k * S:(k + 1) * S]])
                 for k, j in enumerate(g)}
            out.append(dict(group=g, Phi=Phi, A=A, B=B, preprocessing=prep, decomposition=dec,
                            inputs=inputs, coords=coords))
        return out

    def fit(self, X, Y):
        parts = self.decompose(X, Y)
        self.groups_ = [d["group"] for d in parts]
        self.decompositions_ = parts
        inputs, coords = parts[0]["inputs"], parts[0]["coords"]
        tcfg = _train_config(self, coords.shape[0])
        bcfg = _train_config(self, inputs.shape[0])
        jobs = []
        for gi, d in enumerate(parts):
            jobs.append(("trunk", gi, [coords.shape[1], *self.trunk_hidden, self.p], coords,
                         d["Phi"], tcfg))
            for j in d["group"]:
                jobs.append(("branch", j, [inputs.shape[1], *self.branch_hidden, self.p + 2],
                             inputs, d["B"][j], bcfg))

        def run(kind, idx, dims, A, B, cfg):
            rng = _rng.stream(self.random_state, f"svd-{kind}/{idx}")
            return _fit_regressor(dims, A, B, cfg, rng, self.activation)

        results = Parallel(n_jobs=self.n_jobs, prefer="threads")(
            delayed(run)(*job) for job in jobs
        )
        trunks = [None] * len(parts)
        branches = [None] * self.n_outputs_
        self.history_ = {}
        for (kind, idx, *_), (net, hist) in zip(jobs, results):
            (trunks if kind == "trunk" else branches)[idx] = net
            self.history_[(kind, idx)] = hist
        # one assembly per group keeps predict() uniform with the other estimators
        self.models_ = []
        for g, trunk in zip(self.groups_, trunks):
            self.models_.append(SVDAssembly([trunk], [branches[j] for j in g],
                                             [list(range(len(g)))], self.n_branch_inputs))
        return self

    @property
    def assembly_(self):
        """All groups combined into a single :class:`SVDAssembly`."""
        check_is_fitted(self, "models_")
        trunks = [m.trunks[0] for m in self.models_]
        branches = [None] * self.n_outputs_
        for g, m in zip(self.groups_, self.models_):
            for k, j in enumerate(g):
                branches[j] = m.branches[k]
        return SVDAssembly(trunks, branches, self.groups_, self.n_branch_inputs)


class FlexDeepONet(_OperatorEstimator):
    """flexDeepONet: DeepONet with a Pre-Net moving frame, trained end to end.

    Parameters
    ----------
    n_branch_inputs, p, branch_hidden, trunk_hidden, activation,
    trunk_output_activation, epochs, batch_size, learning_rate, random_state,
    validation_fraction, early_stopping_patience, training
        As for :class:`VanillaDeepONet`.
    prenet_components : tuple of {"scale", "rotation", "shift"}
    prenet_hidden : tuple of int
    prenet_layout : {"single", "separate"}
        One network with a split head, or rotation/stretch/shift networks.
    prenet_per_variable : bool
        With ``training="joint"``, emit one frame per output variable from a
        single shared Pre-Net (e.g. one stretch per variable).
    """

    def __init__(self, n_branch_inputs=1, p=1, branch_hidden=(32, 32), trunk_hidden=(32, 32),
                 activation="tanh", trunk_output_activation="identity",
                 prenet_components=("scale", "rotation", "shift"), prenet_hidden=(16,),
                 prenet_layout="single", prenet_per_variable=False, epochs=1000, batch_size=256,
                 learning_rate=1e-3, random_state=0, validation_fraction=0.0,
                 early_stopping_patience=None, lbfgs_iter=0, training="independent"):
        self.n_branch_inputs = n_branch_inputs
        self.p = p
        self.branch_hidden = branch_hidden
        self.trunk_hidden = trunk_hidden
        self.activation = activation
        self.trunk_output_activation = trunk_output_activation
        self.prenet_components = prenet_components
        self.prenet_hidden = prenet_hidden
        self.prenet_layout = prenet_layout
        self.prenet_per_variable = prenet_per_variable
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state
        self.validation_fraction = validation_fraction
        self.early_stopping_patience = early_stopping_patience
        self.lbfgs_iter = lbfgs_iter
        self.training = training

    def _build(self, U, Yc, Yg, gi):
        rng = _rng.stream(self.random_state, f"init/{gi}")
        bs, bsc = _symmetric_scaling(U)
        lo, hi = Yc.min(axis=0), Yc.max(axis=0)
        frame_shift = (lo + hi) / 2.0
        frame_scale = float(np.max((hi - lo) / 2.0)) or 1.0
        nv = Yg.shape[1]
        n_sets = nv if self.prenet_per_variable else 1
        prenet = PreNet.create(U.shape[1], Yc.shape[1], tuple(self.prenet_components),
                               tuple(self.prenet_hidden), self.prenet_layout, n_sets,
                               self.activation, rng=rng, input_shift=bs, input_scale=bsc)
        branches, trunks = [], []
        for _ in range(nv):
            branches.append(DenseNet.create([U.shape[1], *self.branch_hidden, self.p + 1],
                                            self.activation, "identity", rng=rng,
                                            input_shift=bs, input_scale=bsc))
            trunks.append(DenseNet.create([Yc.shape[1], *self.trunk_hidden, self.p],
                                          self.activation, self.trunk_output_activation, rng=rng))
        shift, scale = _minmax_scaling(Yg)
        # start the centring output at the mean target
        mean = ((Yg - shift) / scale).mean(axis=0)
        for j, br in enumerate(branches):
            br.biases[-1][-1] = mean[j]
        return FlexModel(prenet, branches, trunks, U.shape[1], frame_shift, frame_scale,
                         shift, scale)

    def fit(self, X, Y):
        X, Y = self._prepare(X, Y)
        if self.prenet_per_variable and self.training != "joint":
            raise ValueError("prenet_per_variable requires training='joint'")
        U, Yc = _split(X, self.n_branch_inputs)
        self.groups_ = self._groups()
        self.models_, self.history_ = [], []
        cfg = _train_config(self, X.shape[0])
        for gi, g in enumerate(self.groups_):
            model = self._build(U, Yc, Y[:, g], gi)
            _, hist = train(model, X, Y[:, g], cfg)
            self.models_.append(model)
            self.history_.append(hist)
        return self

    def alignment(self, inputs, coords=None):
        """Shortcut for :func:`alignment_diagnostics` on the first model."""
        return alignment_diagnostics(self, inputs, coords)
