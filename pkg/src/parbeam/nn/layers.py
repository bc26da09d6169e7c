"""Differentiable layers on ``(batch, channels, height, width)`` float64 arrays.

Every layer propagates dual numbers: ``forward(params, x, xd, train)``
returns the primal output, the tangent output (or ``None`` when ``xd`` is
``None``) and a cache.  ``backward(params, cache, gy, gyd)`` takes adjoints
for both and returns ``(gx, gxd, param_grads)``.  Running the backward pass
with ``gy = 0`` and ``gyd = u`` differentiates ``<u, J e>`` with respect to
the parameters, which is the reverse-over-forward second-order product.
"""
from __future__ import annotations

import os

import numpy as np

from ..errors import ContractViolation, InvalidArgument

__all__ = ["Layer", "Conv3x3", "Conv1x1", "ReLU", "MaxPool2", "TConv2x2s2", "BatchNorm", "Concat", "Add",
           "check_tensor"]

_DEBUG = os.environ.get("PARBEAM_DEBUG", "") not in ("", "0")


def check_tensor(x, name="tensor"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or min(x.shape) < 1:
        raise InvalidArgument(f"{name} must be a 4-D array with positive dims, got shape {x.shape}")
    if _DEBUG and not np.all(np.isfinite(x)):
        raise InvalidArgument(f"{name} contains non-finite values")
    return x


def _add(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


class Layer:
    kind = "layer"
    n_inputs = 1
    second_order = True

    def init_params(self, rng) -> dict:
        return {}

    def param_shapes(self) -> dict:
        return {}

    def out_shape(self, *shapes):
        return shapes[0]

    def forward(self, params, x, xd=None, train=False):
        raise NotImplementedError

    def backward(self, params, cache, gy, gyd=None):
        raise NotImplementedError

    def config(self) -> dict:
        return {"kind": self.kind}


def _he(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Conv3x3(Layer):
    """Size-preserving 3x3 cross-correlation with zero padding 1."""

    kind = "conv3x3"

    def __init__(self, cin, cout):
        self.cin, self.cout = int(cin), int(cout)

    def param_shapes(self):
        return {"w": (self.cout, self.cin, 3, 3), "b": (self.cout,)}

    def init_params(self, rng):
        return {"w": _he(rng, (self.cout, self.cin, 3, 3), 9 * self.cin), "b": np.zeros(self.cout)}

    def out_shape(self, s):
        if s[1] != self.cin:
            raise InvalidArgument(f"conv3x3 expects {self.cin} channels, got {s[1]}")
        return (s[0], self.cout, s[2], s[3])

    @staticmethod
    def _cols(x):
        b, c, h, w = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        cols = np.stack([xp[:, :, a:a + h, e:e + w] for a in range(3) for e in range(3)], axis=2)
        return cols.reshape(b, c * 9, h * w)

    @staticmethod
    def _uncols(gcols, shape):
        b, c, h, w = shape
        g = gcols.reshape(b, c, 9, h, w)
        gp = np.zeros((b, c, h + 2, w + 2))
        for t in range(9):
            a, e = divmod(t, 3)
            gp[:, :, a:a + h, e:e + w] += g[:, :, t]
        return gp[:, :, 1:-1, 1:-1]

    def forward(self, params, x, xd=None, train=False):
        self.out_shape(x.shape)
        b, _, h, w = x.shape
        wm = params["w"].reshape(self.cout, -1)
        cols = self._cols(x)
        y = (wm @ cols).reshape(b, self.cout, h, w) + params["b"][None, :, None, None]
        yd = cold = None
        if xd is not None:
            cold = self._cols(xd)
            yd = (wm @ cold).reshape(b, self.cout, h, w)
        return y, yd, (x.shape, cols, cold)

    def backward(self, params, cache, gy, gyd=None):
        shape, cols, cold = cache
        b = shape[0]
        wm = params["w"].reshape(self.cout, -1)
        g = gy.reshape(b, self.cout, -1)
        gw = np.einsum("bon,bkn->ok", g, cols)
        gx = self._uncols(wm.T @ g, shape)
        gxd = None
        if gyd is not None:
            gd = gyd.reshape(b, self.cout, -1)
            if cold is not None:
                gw = gw + np.einsum("bon,bkn->ok", gd, cold)
            gxd = self._uncols(wm.T @ gd, shape)
        return gx, gxd, {"w": gw.reshape(params["w"].shape), "b": gy.sum(axis=(0, 2, 3))}

    def config(self):
        return {"kind": self.kind, "cin": self.cin, "cout": self.cout}


class Conv1x1(Layer):
    kind = "conv1x1"

    def __init__(self, cin, cout):
        self.cin, self.cout = int(cin), int(cout)

    def param_shapes(self):
        return {"w": (self.cout, self.cin), "b": (self.cout,)}

    def init_params(self, rng):
        return {"w": _he(rng, (self.cout, self.cin), self.cin), "b": np.zeros(self.cout)}

    def out_shape(self, s):
        if s[1] != self.cin:
            raise InvalidArgument(f"conv1x1 expects {self.cin} channels, got {s[1]}")
        return (s[0], self.cout, s[2], s[3])

    def _apply(self, w, x):
        b, c, h, ww = x.shape
        return (w @ x.reshape(b, c, -1)).reshape(b, self.cout, h, ww)

    def forward(self, params, x, xd=None, train=False):
        self.out_shape(x.shape)
        y = self._apply(params["w"], x) + params["b"][None, :, None, None]
        yd = self._apply(params["w"], xd) if xd is not None else None
        return y, yd, (x, xd)

    def backward(self, params, cache, gy, gyd=None):
        x, xd = cache
        b = x.shape[0]
        w = params["w"]
        g = gy.reshape(b, self.cout, -1)
        gw = np.einsum("bon,bcn->oc", g, x.reshape(b, self.cin, -1))
        gx = (w.T @ g).reshape(x.shape)
        gxd = None
        if gyd is not None:
            gd = gyd.reshape(b, self.cout, -1)
            if xd is not None:
                gw = gw + np.einsum("bon,bcn->oc", gd, xd.reshape(b, self.cin, -1))
            gxd = (w.T @ gd).reshape(x.shape)
        return gx, gxd, {"w": gw, "b": gy.sum(axis=(0, 2, 3))}

    def config(self):
        return {"kind": self.kind, "cin": self.cin, "cout": self.cout}


class ReLU(Layer):
    """Active iff the pre-activation is strictly positive; second derivative taken as zero."""

    kind = "relu"

    def forward(self, params, x, xd=None, train=False):
        m = x > 0
        y = np.where(m, x, 0.0)
        yd = np.where(m, xd, 0.0) if xd is not None else None
        return y, yd, m

    def backward(self, params, cache, gy, gyd=None):
        m = cache
        return np.where(m, gy, 0.0), (np.where(m, gyd, 0.0) if gyd is not None else None), {}


class MaxPool2(Layer):
    """2x2 max pooling, stride 2; ties go to the first cell in row-major order."""

    kind = "maxpool2"

    def out_shape(self, s):
        if s[2] % 2 or s[3] % 2:
            raise InvalidArgument(f"maxpool2 needs even spatial dims, got {s[2:]}")
        return (s[0], s[1], s[2] // 2, s[3] // 2)

    @staticmethod
    def _windows(x):
        b, c, h, w = x.shape
        return x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)

    def forward(self, params, x, xd=None, train=False):
        self.out_shape(x.shape)
        r = self._windows(x)
        idx = np.argmax(r, axis=-1)[..., None]
        y = np.take_along_axis(r, idx, -1)[..., 0]
        yd = np.take_along_axis(self._windows(xd), idx, -1)[..., 0] if xd is not None else None
        return y, yd, (x.shape, idx)

    @staticmethod
    def _scatter(g, shape, idx):
        b, c, h, w = shape
        out = np.zeros((b, c, h // 2, w // 2, 4))
        np.put_along_axis(out, idx, g[..., None], -1)
        return out.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(shape)

    def backward(self, params, cache, gy, gyd=None):
        shape, idx = cache
        gxd = self._scatter(gyd, shape, idx) if gyd is not None else None
        return self._scatter(gy, shape, idx), gxd, {}


class TConv2x2s2(Layer):
    """Transposed convolution, 2x2 kernel, stride 2 (exact 2x upsampling)."""

    kind = "tconv2x2s2"

    def __init__(self, cin, cout):
        self.cin, self.cout = int(cin), int(cout)

    def param_shapes(self):
        return {"w": (self.cin, self.cout, 2, 2), "b": (self.cout,)}

    def init_params(self, rng):
        return {"w": _he(rng, (self.cin, self.cout, 2, 2), self.cin), "b": np.zeros(self.cout)}

    def out_shape(self, s):
        if s[1] != self.cin:
            raise InvalidArgument(f"tconv expects {self.cin} channels, got {s[1]}")
        return (s[0], self.cout, 2 * s[2], 2 * s[3])

    def _apply(self, w, x):
        b, _, h, ww = x.shape
        return np.einsum("bcij,coak->boiajk", x, w, optimize=True).reshape(b, self.cout, 2 * h, 2 * ww)

    def forward(self, params, x, xd=None, train=False):
        self.out_shape(x.shape)
        y = self._apply(params["w"], x) + params["b"][None, :, None, None]
        yd = self._apply(params["w"], xd) if xd is not None else None
        return y, yd, (x, xd)

    def backward(self, params, cache, gy, gyd=None):
        x, xd = cache
        b, _, h, w = x.shape
        wt = params["w"]
        g6 = gy.reshape(b, self.cout, h, 2, w, 2)
        gx = np.einsum("boiajk,coak->bcij", g6, wt, optimize=True)
        gw = np.einsum("bcij,boiajk->coak", x, g6, optimize=True)
        gxd = None
        if gyd is not None:
            d6 = gyd.reshape(b, self.cout, h, 2, w, 2)
            gxd = np.einsum("boiajk,coak->bcij", d6, wt, optimize=True)
            if xd is not None:
                gw = gw + np.einsum("bcij,boiajk->coak", xd, d6, optimize=True)
        return gx, gxd, {"w": gw, "b": gy.sum(axis=(0, 2, 3))}

    def config(self):
        return {"kind": self.kind, "cin": self.cin, "cout": self.cout}


class BatchNorm(Layer):
    """Per-channel batch normalisation.

    Train mode normalises with batch statistics and updates the running
    estimates; eval mode is the affine map given by the running estimates.
    Train mode has no second-order backward.
    """

    kind = "batchnorm"
    second_order = False

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.channels = int(channels)
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.running_mean = np.zeros(self.channels)
        self.running_var = np.ones(self.channels)

    def param_shapes(self):
        return {"gamma": (self.channels,), "beta": (self.channels,)}

    def init_params(self, rng):
        return {"gamma": np.ones(self.channels), "beta": np.zeros(self.channels)}

    def out_shape(self, s):
        if s[1] != self.channels:
            raise InvalidArgument(f"batchnorm expects {self.channels} channels, got {s[1]}")
        return s

    def forward(self, params, x, xd=None, train=False):
        self.out_shape(x.shape)
        gam = params["gamma"][None, :, None, None]
        bet = params["beta"][None, :, None, None]
        if train:
            mu = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            n = x.size // self.channels
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mu
            unbiased = var * n / (n - 1) if n > 1 else var
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * unbiased
        else:
            mu, var = self.running_mean, self.running_var
        s = np.sqrt(var + self.eps)[None, :, None, None]
        xhat = (x - mu[None, :, None, None]) / s
        y = gam * xhat + bet
        yd = xhat_d = None
        if xd is not None:
            if train:
                c = xd - xd.mean(axis=(0, 2, 3), keepdims=True)
                xhat_d = (c - xhat * (xhat * c).mean(axis=(0, 2, 3), keepdims=True)) / s
            else:
                xhat_d = xd / s
            yd = gam * xhat_d
        return y, yd, (train, xhat, s, xhat_d)

    def backward(self, params, cache, gy, gyd=None):
        train, xhat, s, xhat_d = cache
        gam = params["gamma"][None, :, None, None]
        ggam = (gy * xhat).sum(axis=(0, 2, 3))
        gbet = gy.sum(axis=(0, 2, 3))
        gh = gy * gam
        if train:
            if gyd is not None:
                raise ContractViolation("batchnorm in train mode has no second-order backward")
            gx = (gh - gh.mean(axis=(0, 2, 3), keepdims=True)
                  - xhat * (gh * xhat).mean(axis=(0, 2, 3), keepdims=True)) / s
            return gx, None, {"gamma": ggam, "beta": gbet}
        gx = gh / s
        gxd = None
        if gyd is not None:
            gxd = gyd * gam / s
            if xhat_d is not None:
                ggam = ggam + (gyd * xhat_d).sum(axis=(0, 2, 3))
        return gx, gxd, {"gamma": ggam, "beta": gbet}

    def config(self):
        return {"kind": self.kind, "channels": self.channels, "momentum": self.momentum, "eps": self.eps}


class Concat(Layer):
    """Channel concatenation of two inputs."""

    kind = "concat"
    n_inputs = 2

    def out_shape(self, a, b):
        if a[0] != b[0] or a[2:] != b[2:]:
            raise InvalidArgument(f"concat shape mismatch {a} vs {b}")
        return (a[0], a[1] + b[1], a[2], a[3])

    def forward(self, params, xs, xds=None, train=False):
        a, b = xs
        self.out_shape(a.shape, b.shape)
        y = np.concatenate([a, b], axis=1)
        yd = None
        if xds is not None:
            yd = np.concatenate([xds[0], xds[1]], axis=1)
        return y, yd, a.shape[1]

    def backward(self, params, cache, gy, gyd=None):
        c = cache
        gx = (gy[:, :c], gy[:, c:])
        gxd = (gyd[:, :c], gyd[:, c:]) if gyd is not None else None
        return gx, gxd, {}


class Add(Layer):
    kind = "add"
    n_inputs = 2

    def out_shape(self, a, b):
        if a != b:
            raise InvalidArgument(f"add shape mismatch {a} vs {b}")
        return a

    def forward(self, params, xs, xds=None, train=False):
        a, b = xs
        self.out_shape(a.shape, b.shape)
        yd = xds[0] + xds[1] if xds is not None else None
        return a + b, yd, None

    def backward(self, params, cache, gy, gyd=None):
        return (gy, gy), ((gyd, gyd) if gyd is not None else None), {}
