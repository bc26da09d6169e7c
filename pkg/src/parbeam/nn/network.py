"""Layer graphs, the residual mini U-Net builder and parameter checkpoints."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ContractViolation, InvalidArgument
from ..io import KIND_PARAMS, load_array, save_array
from .layers import (Add, BatchNorm, Concat, Conv1x1, Conv3x3, Layer, MaxPool2, ReLU, TConv2x2s2, _add,
                     check_tensor)

__all__ = ["Network", "Tape", "build_mini_unet", "build_sequential", "jvp", "backward",
           "second_order_param_grad", "save_checkpoint", "load_checkpoint", "unet_param_count"]

_KINDS = {cls.kind: cls for cls in (Conv3x3, Conv1x1, ReLU, MaxPool2, TConv2x2s2, BatchNorm, Concat, Add)}


@dataclass
class Tape:
    """Everything the backward pass needs from one forward call."""

    caches: list
    train: bool
    has_tangent: bool
    input_shape: tuple
    shapes: list = field(default_factory=list)


class Network:
    """A DAG of layers evaluated in insertion order.

    Node 0 is the network input; node ``i + 1`` is the output of
    ``layers[i]``, whose inputs are listed in ``inputs[i]``.  With
    ``residual`` set the network returns ``x + C(x)``, where ``C`` is the
    graph output.
    """

    def __init__(self, residual: bool = True, config: dict | None = None):
        self.layers: list[Layer] = []
        self.inputs: list[tuple] = []
        self.params: list[dict] = []
        self.residual = residual
        self.config = dict(config or {})
        self.declared: list = []
        self._tape: Tape | None = None

    def add(self, layer: Layer, *inputs, rng=None) -> int:
        if not inputs:
            inputs = (len(self.layers),)
        if len(inputs) != layer.n_inputs:
            raise InvalidArgument(f"{layer.kind} takes {layer.n_inputs} inputs, got {len(inputs)}")
        if any(i < 0 or i > len(self.layers) for i in inputs):
            raise InvalidArgument("layer inputs must refer to earlier nodes")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.layers.append(layer)
        self.inputs.append(tuple(inputs))
        self.params.append(layer.init_params(rng))
        return len(self.layers)

    # ---- parameters -------------------------------------------------------

    def _slots(self):
        for li, p in enumerate(self.params):
            for name in sorted(p):
                yield li, name

    @property
    def n_params(self) -> int:
        return int(sum(self.params[li][n].size for li, n in self._slots()))

    def flatten(self, grads: list | None = None) -> np.ndarray:
        src = self.params if grads is None else grads
        parts = [np.asarray(src[li][n], dtype=np.float64).ravel() for li, n in self._slots()]
        return np.concatenate(parts) if parts else np.zeros(0)

    def unflatten(self, vec) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise InvalidArgument(f"parameter vector has shape {vec.shape}, expected ({self.n_params},)")
        pos = 0
        for li, n in self._slots():
            shape = self.params[li][n].shape
            size = int(np.prod(shape))
            self.params[li][n] = vec[pos:pos + size].reshape(shape).copy()
            pos += size

    def zero_final(self):
        """Zero the last parametrised layer so that a residual net is the identity."""
        for li in range(len(self.layers) - 1, -1, -1):
            if self.params[li]:
                for n in self.params[li]:
                    self.params[li][n] = np.zeros_like(self.params[li][n])
                return
        raise ContractViolation("network has no parameters")

    @property
    def supports_second_order(self) -> bool:
        return all(l.second_order for l in self.layers)

    def running_stats(self) -> list:
        return [[l.running_mean.tolist(), l.running_var.tolist()] if isinstance(l, BatchNorm) else None
                for l in self.layers]

    def set_running_stats(self, stats) -> None:
        for l, s in zip(self.layers, stats):
            if s is not None:
                l.running_mean = np.array(s[0], dtype=np.float64)
                l.running_var = np.array(s[1], dtype=np.float64)

    # ---- shapes -----------------------------------------------------------

    def shapes_for(self, input_shape) -> list:
        shapes = [tuple(input_shape)]
        for layer, ins in zip(self.layers, self.inputs):
            shapes.append(tuple(layer.out_shape(*[shapes[i] for i in ins])))
        if self.residual and shapes[-1] != shapes[0]:
            raise InvalidArgument(f"residual network output {shapes[-1]} does not match input {shapes[0]}")
        return shapes

    # ---- evaluation -------------------------------------------------------

    def forward(self, x, xd=None, train: bool = False):
        """Return ``(y, yd, tape)``; ``yd`` is the jvp along ``xd`` (or ``None``)."""
        x = check_tensor(x, "input")
        if xd is not None:
            xd = check_tensor(xd, "direction")
            if xd.shape != x.shape:
                raise InvalidArgument(f"direction shape {xd.shape} does not match input {x.shape}")
        self.shapes_for(x.shape)
        vals, tans, caches = [x], [xd], []
        for layer, ins, p in zip(self.layers, self.inputs, self.params):
            if layer.n_inputs == 1:
                a, ad = vals[ins[0]], tans[ins[0]]
            else:
                a = tuple(vals[i] for i in ins)
                ad = tuple(tans[i] for i in ins) if xd is not None else None
            y, yd, cache = layer.forward(p, a, ad, train)
            vals.append(y)
            tans.append(yd)
            caches.append(cache)
        y, yd = vals[-1], tans[-1]
        if self.residual:
            y = x + y
            yd = xd + yd if xd is not None else None
        tape = Tape(caches, train, xd is not None, x.shape, [v.shape for v in vals])
        self._tape = tape
        return y, yd, tape

    def __call__(self, x, train: bool = False):
        return self.forward(x, None, train)[0]

    def backward(self, gy, gyd=None, tape: Tape | None = None):
        """Adjoint pass; returns ``(gx, gxd, flat parameter gradient)``.

        ``gyd`` is the adjoint of the tangent output and needs a forward pass
        that carried a direction.
        """
        tape = tape if tape is not None else self._tape
        if tape is None:
            raise ContractViolation("backward called before any forward pass")
        if gyd is not None and not tape.has_tangent:
            raise ContractViolation("tangent adjoint given but the forward pass carried no direction")
        gy = np.asarray(gy, dtype=np.float64)
        if gy.shape != tape.shapes[-1] and not (self.residual and gy.shape == tape.input_shape):
            raise InvalidArgument(f"upstream gradient shape {gy.shape} does not match output")
        n = len(self.layers)
        g = [None] * (n + 1)
        gd = [None] * (n + 1)
        g[n] = gy
        gd[n] = gyd
        if self.residual:
            g[0] = gy.copy()
            gd[0] = gyd.copy() if gyd is not None else None
        pgrads = [dict() for _ in range(n)]
        for li in range(n - 1, -1, -1):
            node = li + 1
            layer, ins = self.layers[li], self.inputs[li]
            if g[node] is None:
                g[node] = np.zeros(tape.shapes[node])
            gx, gxd, pg = layer.backward(self.params[li], tape.caches[li], g[node], gd[node])
            pgrads[li] = pg
            if layer.n_inputs == 1:
                gx, gxd = (gx,), (gxd,)
            elif gxd is None:
                gxd = (None,) * layer.n_inputs
            for i, a, ad in zip(ins, gx, gxd):
                g[i] = _add(g[i], a)
                gd[i] = _add(gd[i], ad)
        for li, p in enumerate(self.params):
            for name in p:
                if name not in pgrads[li]:
                    pgrads[li][name] = np.zeros_like(p[name])
        gx0 = g[0] if g[0] is not None else np.zeros(tape.input_shape)
        return gx0, gd[0], self.flatten(pgrads)


def jvp(net: Network, x, e, train: bool = False):
    """Directional derivative ``(d net)(x) . e``."""
    return net.forward(x, e, train)[1]


def backward(net: Network, x, upstream, train: bool = False):
    """Input and parameter gradients of ``<upstream, net(x)>``."""
    _, _, tape = net.forward(x, None, train)
    gx, _, gp = net.backward(upstream, None, tape)
    return gx, gp


def second_order_param_grad(net: Network, x, e, upstream):
    """Parameter gradient of ``W -> <upstream, (d net)(x) . e>``."""
    if not net.supports_second_order:
        raise ContractViolation("network contains layers without a second-order backward")
    _, _, tape = net.forward(x, e, train=False)
    _, _, gp = net.backward(np.zeros(tape.input_shape if net.residual else tape.shapes[-1]), upstream, tape)
    return gp


# --------------------------------------------------------------------------
# builders
# --------------------------------------------------------------------------

def build_sequential(specs, residual=False, seed=0) -> Network:
    """Chain of layers, e.g. ``[("conv3x3", 1, 2), ("relu",), ("conv1x1", 2, 1)]``."""
    rng = np.random.default_rng(seed)
    net = Network(residual, {"builder": "sequential", "specs": [list(s) for s in specs], "residual": residual,
                             "seed": seed})
    for s in specs:
        net.add(_KINDS[s[0]](*s[1:]), rng=rng)
    return net


def build_mini_unet(levels: int = 2, base_channels: int = 8, use_batchnorm: bool = False, seed: int = 0,
                    in_channels: int = 1, zero_final: bool = True, second_order: bool = False) -> Network:
    """Residual U-Net ``I + C``.

    Each stage is two 3x3 conv + ReLU pairs; downsampling is 2x2 max
    pooling, upsampling a stride-2 transposed conv followed by a skip
    concatenation.  With batchnorm enabled a BatchNorm layer follows every
    max pool and every concatenation.  ``second_order`` requests a network
    usable for reverse-over-forward products, which excludes batchnorm.
    """
    if levels not in (1, 2, 3):
        raise InvalidArgument(f"levels must be 1, 2 or 3, got {levels}")
    if not 1 <= base_channels <= 16:
        raise InvalidArgument(f"base_channels must be in [1, 16], got {base_channels}")
    if second_order and use_batchnorm:
        raise ContractViolation("batchnorm layers have no second-order backward; disable batchnorm")
    rng = np.random.default_rng(seed)
    cfg = {"builder": "mini_unet", "levels": levels, "base_channels": base_channels,
           "use_batchnorm": use_batchnorm, "seed": seed, "in_channels": in_channels, "zero_final": zero_final}
    net = Network(True, cfg)

    def block(cin, cout, src):
        net.add(Conv3x3(cin, cout), src, rng=rng)
        net.add(ReLU(), rng=rng)
        net.add(Conv3x3(cout, cout), rng=rng)
        return net.add(ReLU(), rng=rng)

    c = base_channels
    skips = [block(in_channels, c, 0)]
    node = skips[0]
    for l in range(1, levels + 1):
        node = net.add(MaxPool2(), node, rng=rng)
        cin = c * 2 ** (l - 1)
        if use_batchnorm:
            node = net.add(BatchNorm(cin), rng=rng)
        node = block(cin, c * 2 ** l, node)
        skips.append(node)
    for l in range(levels, 0, -1):
        up = net.add(TConv2x2s2(c * 2 ** l, c * 2 ** (l - 1)), node, rng=rng)
        node = net.add(Concat(), up, skips[l - 1], rng=rng)
        if use_batchnorm:
            node = net.add(BatchNorm(c * 2 ** l), rng=rng)
        node = block(c * 2 ** l, c * 2 ** (l - 1), node)
    net.add(Conv1x1(c, in_channels), node, rng=rng)
    if zero_final:
        net.zero_final()
    return net


def unet_param_count(levels: int, base: int, use_batchnorm: bool = False, in_channels: int = 1) -> int:
    """Closed-form parameter count of :func:`build_mini_unet`."""
    conv3 = lambda ci, co: 9 * ci * co + co  # noqa: E731
    total = conv3(in_channels, base) + conv3(base, base)
    for l in range(1, levels + 1):
        ci, co = base * 2 ** (l - 1), base * 2 ** l
        total += conv3(ci, co) + conv3(co, co) + (2 * ci if use_batchnorm else 0)
        # decoder stage l: tconv co -> ci, concat to co, block co -> ci
        total += 4 * co * ci + ci + conv3(co, ci) + conv3(ci, ci) + (2 * co if use_batchnorm else 0)
    return total + base * in_channels + in_channels


def _from_config(cfg) -> Network:
    if cfg.get("builder") == "mini_unet":
        return build_mini_unet(cfg["levels"], cfg["base_channels"], cfg["use_batchnorm"], cfg["seed"],
                               cfg.get("in_channels", 1), cfg.get("zero_final", True))
    if cfg.get("builder") == "sequential":
        return build_sequential([tuple(s) for s in cfg["specs"]], cfg["residual"], cfg["seed"])
    raise InvalidArgument(f"unknown network builder {cfg.get('builder')!r}")


def save_checkpoint(path, net: Network, extra: dict | None = None) -> Path:
    """Flat parameters as PBTK1 kind 2 plus a ``.json`` sidecar with the builder config."""
    path = Path(path)
    save_array(path, net.flatten(), KIND_PARAMS)
    side = {"config": net.config, "n_params": net.n_params, "running_stats": net.running_stats()}
    if extra:
        side["extra"] = extra
    path.with_suffix(".json").write_text(json.dumps(side, indent=1, sort_keys=True))
    return path


def load_checkpoint(path) -> Network:
    path = Path(path)
    side = json.loads(path.with_suffix(".json").read_text())
    net = _from_config(side["config"])
    vec = load_array(path, KIND_PARAMS).ravel()
    net.unflatten(vec)
    net.set_running_stats(side["running_stats"])
    return net
