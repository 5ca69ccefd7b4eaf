"""Backbones (CIFAR-style ResNet18 and a small CNN) built from numpy layers
with hand-written backward passes, injectable normalization, and one or two
linear classifier heads.

Forward passes are functional: each call returns logits plus a tape of layer
contexts, so attack generation can run any number of concurrent forwards
against frozen weights. `backward` consumes a tape, accumulates parameter
gradients in place, and optionally returns the input-pixel gradient.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigurationError
from .normcore import BranchTag, NormConfig, NormKind, NormLayerState

HEAD_CHOICES = ("default", "clean", "adv")


@dataclass
class Architecture:
    name: str = "small_cnn"
    width: float = 1.0
    classes: int = 10

    def __post_init__(self):
        if self.name not in ("small_cnn", "resnet18_cifar"):
            raise ConfigurationError(f"unknown architecture {self.name!r}")
        if self.width <= 0:
            raise ConfigurationError("width multiplier must be positive")


class _Pass:
    """Per-forward routing context threaded through the layer stack."""

    __slots__ = ("branch", "train", "update", "overrides", "capture", "norm_i")

    def __init__(self, branch, train, update, overrides, capture):
        self.branch = branch
        self.train = train
        self.update = update
        self.overrides = overrides
        self.capture = capture
        self.norm_i = 0


class Conv2d:
    def __init__(self, c_in, c_out, ksize, stride, pad, rng, dtype):
        fan_in = c_in * ksize * ksize
        self.weight = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                                 size=(c_out, c_in, ksize, ksize)).astype(dtype)
        self.grad = np.zeros_like(self.weight)
        self.ksize = ksize
        self.stride = stride
        self.pad = pad

    def forward(self, x, ps):
        n = x.shape[0]
        co = self.weight.shape[0]
        cols = kernels.im2col(x, self.ksize, self.ksize, self.stride, self.pad)
        ho, wo = kernels.conv_out_hw(
            x.shape[2], x.shape[3], self.ksize, self.ksize, self.stride, self.pad
        )
        w2 = self.weight.reshape(co, -1)
        y = (w2 @ cols).reshape(n, co, ho, wo)
        return y, (cols, x.shape)

    def backward(self, dy, ctx, need_dx, accumulate):
        cols, x_shape = ctx
        n, co = dy.shape[0], dy.shape[1]
        dy2 = dy.reshape(n, co, -1)
        if accumulate:
            dw = (dy2 @ cols.transpose(0, 2, 1)).sum(axis=0)
            self.grad += dw.reshape(self.weight.shape)
        if not need_dx:
            return None
        w2 = self.weight.reshape(co, -1)
        dcols = w2.T @ dy2
        return kernels.col2im(dcols, x_shape, self.ksize, self.ksize,
                              self.stride, self.pad)

    def zero_grad(self):
        self.grad.fill(0.0)

    def parameters(self, prefix):
        yield f"{prefix}weight", self.weight, self.grad


class Norm:
    """Thin adapter putting a NormLayerState into the layer stack."""

    def __init__(self, channels, config, dtype, name):
        self.state = NormLayerState(channels, config, dtype=dtype)
        self.name = name

    def forward(self, x, ps):
        override = None
        if ps.overrides is not None:
            override = ps.overrides[ps.norm_i]
        ps.norm_i += 1
        y, ctx = self.state.forward(
            x, ps.branch, ps.train, update=ps.update,
            stats_override=override, capture=ps.capture,
        )
        return y, ctx

    def backward(self, dy, ctx, need_dx, accumulate):
        return self.state.backward(dy, ctx, accumulate=accumulate)

    def zero_grad(self):
        self.state.zero_grad()

    def parameters(self, prefix):
        yield from self.state.parameters(prefix)


class ReLU:
    def forward(self, x, ps):
        y = np.maximum(x, 0.0)
        return y, y  # y doubles as the mask source (y > 0 iff x > 0)

    def backward(self, dy, y, need_dx, accumulate):
        return dy * (y > 0)

    def zero_grad(self):
        pass

    def parameters(self, prefix):
        return ()


class AvgPool2:
    """2x2 average pooling, stride 2; spatial dims must be even."""

    def forward(self, x, ps):
        q = np.asarray(0.25, dtype=x.dtype)
        y = (x[:, :, ::2, ::2] + x[:, :, ::2, 1::2]
             + x[:, :, 1::2, ::2] + x[:, :, 1::2, 1::2]) * q
        return y, x.shape

    def backward(self, dy, x_shape, need_dx, accumulate):
        d = dy * np.asarray(0.25, dtype=dy.dtype)
        dx = np.empty(x_shape, dtype=dy.dtype)
        dx[:, :, ::2, ::2] = d
        dx[:, :, ::2, 1::2] = d
        dx[:, :, 1::2, ::2] = d
        dx[:, :, 1::2, 1::2] = d
        return dx

    def zero_grad(self):
        pass

    def parameters(self, prefix):
        return ()


class GlobalAvgPool:
    def forward(self, x, ps):
        n, c = x.shape[:2]
        return x.reshape(n, c, -1).mean(axis=2), x.shape

    def backward(self, dy, x_shape, need_dx, accumulate):
        n, c, h, w = x_shape
        scale = np.asarray(1.0 / (h * w), dtype=dy.dtype)
        dx = np.empty(x_shape, dtype=dy.dtype)
        dx.reshape(n, c, -1)[:] = (dy * scale)[:, :, None]
        return dx

    def zero_grad(self):
        pass

    def parameters(self, prefix):
        return ()


class Linear:
    def __init__(self, n_in, n_out, rng, dtype):
        self.weight = rng.normal(0.0, np.sqrt(1.0 / n_in),
                                 size=(n_out, n_in)).astype(dtype)
        self.bias = np.zeros(n_out, dtype=dtype)
        self.gw = np.zeros_like(self.weight)
        self.gb = np.zeros_like(self.bias)

    def forward(self, x, ps=None):
        return x @ self.weight.T + self.bias, x

    def backward(self, dy, x, need_dx, accumulate):
        if accumulate:
            self.gw += dy.T @ x
            self.gb += dy.sum(axis=0)
        return dy @ self.weight if need_dx else None

    def zero_grad(self):
        self.gw.fill(0.0)
        self.gb.fill(0.0)

    def parameters(self, prefix):
        yield f"{prefix}weight", self.weight, self.gw
        yield f"{prefix}bias", self.bias, self.gb


class BasicBlock:
    """Two 3x3 conv+norm stages with an identity or projected shortcut."""

    def __init__(self, c_in, c_out, stride, norm_cfg, rng, dtype, name):
        self.conv1 = Conv2d(c_in, c_out, 3, stride, 1, rng, dtype)
        self.norm1 = Norm(c_out, norm_cfg, dtype, f"{name}.norm1")
        self.relu1 = ReLU()
        self.conv2 = Conv2d(c_out, c_out, 3, 1, 1, rng, dtype)
        self.norm2 = Norm(c_out, norm_cfg, dtype, f"{name}.norm2")
        self.proj = None
        self.proj_norm = None
        if stride != 1 or c_in != c_out:
            self.proj = Conv2d(c_in, c_out, 1, stride, 0, rng, dtype)
            self.proj_norm = Norm(c_out, norm_cfg, dtype, f"{name}.proj_norm")
        self.name = name

    def _main(self):
        return (self.conv1, self.norm1, self.relu1, self.conv2, self.norm2)

    def forward(self, x, ps):
        ctxs = []
        h = x
        for layer in self._main():
            h, c = layer.forward(h, ps)
            ctxs.append(c)
        if self.proj is not None:
            sc, c1 = self.proj.forward(x, ps)
            sc, c2 = self.proj_norm.forward(sc, ps)
            ctxs.append((c1, c2))
        else:
            sc = x
        out = h + sc
        mask = out > 0
        return np.maximum(out, 0.0), (ctxs, mask)

    def backward(self, dy, ctx, need_dx, accumulate):
        ctxs, mask = ctx
        d = dy * mask
        dmain = d
        layers = self._main()
        for i in range(len(layers) - 1, -1, -1):
            dmain = layers[i].backward(dmain, ctxs[i], True, accumulate)
        if self.proj is not None:
            c1, c2 = ctxs[-1]
            dsc = self.proj_norm.backward(d, c2, True, accumulate)
            dsc = self.proj.backward(dsc, c1, need_dx, accumulate)
            if not need_dx:
                return None
            return dmain + dsc
        return dmain + d

    def zero_grad(self):
        for layer in self._main():
            layer.zero_grad()
        if self.proj is not None:
            self.proj.zero_grad()
            self.proj_norm.zero_grad()

    def parameters(self, prefix):
        yield from self.conv1.parameters(f"{prefix}conv1.")
        yield from self.norm1.parameters(f"{prefix}norm1.")
        yield from self.conv2.parameters(f"{prefix}conv2.")
        yield from self.norm2.parameters(f"{prefix}norm2.")
        if self.proj is not None:
            yield from self.proj.parameters(f"{prefix}proj.")
            yield from self.proj_norm.parameters(f"{prefix}proj_norm.")

    def norms(self):
        out = [self.norm1, self.norm2]
        if self.proj_norm is not None:
            out.append(self.proj_norm)
        return out


class Model:
    """Trunk + head(s). All norm layers share one NormConfig."""

    def __init__(self, arch, norm_config, trunk, trunk_out, heads, dtype,
                 input_hw=32):
        self.arch = arch
        self.norm_config = norm_config
        self.trunk = trunk
        self.trunk_out = trunk_out
        self.heads = heads
        self.dtype = np.dtype(dtype)
        self.input_hw = input_hw
        self.norm_layers = []
        for layer in trunk:
            if isinstance(layer, Norm):
                self.norm_layers.append(layer)
            elif isinstance(layer, BasicBlock):
                self.norm_layers.extend(layer.norms())

    # ---- forward / backward -------------------------------------------

    def _head_index(self, head_select, branch):
        if head_select == "default":
            if isinstance(branch, np.ndarray):
                raise ConfigurationError(
                    "head_select='default' is ambiguous for mixed batches"
                )
            idx = branch.value
        elif head_select == "clean":
            idx = BranchTag.CLEAN.value
        elif head_select == "adv":
            idx = BranchTag.ADV.value
        else:
            raise ConfigurationError(f"head_select must be one of {HEAD_CHOICES}")
        if len(self.heads) == 1:
            return 0
        if idx >= len(self.heads):
            raise ConfigurationError(f"head {idx} requested but absent")
        return idx

    def forward_tape(self, x, branch, train_mode=False, head_select="default",
                     stats_overrides=None, update_running=None,
                     capture_stats=False, features_only=False):
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != self.input_hw \
                or x.shape[3] != self.input_hw:
            raise ConfigurationError(
                f"expected [N,3,{self.input_hw},{self.input_hw}] batch, got {x.shape}"
            )
        capture = [] if capture_stats else None
        ps = _Pass(branch, train_mode, update_running, stats_overrides, capture)
        h = x.astype(self.dtype, copy=False)
        tape = []
        for layer in self.trunk:
            h, ctx = layer.forward(h, ps)
            tape.append(ctx)
        head_idx = None
        if not features_only:
            head_idx = self._head_index(head_select, branch)
            h, hctx = self.heads[head_idx].forward(h)
            tape.append(hctx)
        return h, {"tape": tape, "head": head_idx, "capture": capture}

    def forward(self, x, branch, train_mode=False, head_select="default",
                stats_overrides=None, update_running=None):
        logits, _ = self.forward_tape(
            x, branch, train_mode, head_select, stats_overrides, update_running
        )
        return logits

    def backward(self, rec, dout, need_input_grad=False, accumulate=True):
        """Backprop a tape. `dout` is d(loss)/d(logits), or d(loss)/d(features)
        when the tape was recorded with features_only."""
        tape = rec["tape"]
        if rec["head"] is not None:
            d = self.heads[rec["head"]].backward(dout, tape[-1], True, accumulate)
            tail = len(tape) - 2
        else:
            d = dout
            tail = len(tape) - 1
        for i in range(tail, -1, -1):
            need = need_input_grad or i > 0
            d = self.trunk[i].backward(d, tape[i], need, accumulate)
        return d if need_input_grad else None

    # ---- parameter plumbing -------------------------------------------

    def parameters(self):
        for i, layer in enumerate(self.trunk):
            yield from layer.parameters(f"trunk{i}.")
        for j, head in enumerate(self.heads):
            yield from head.parameters(f"head{j}.")

    def zero_grad(self):
        for layer in self.trunk:
            layer.zero_grad()
        for head in self.heads:
            head.zero_grad()

    def copy(self):
        return copy.deepcopy(self)

    def param_count(self):
        """Trainable parameter count (running statistics are buffers)."""
        return sum(data.size for _, data, _ in self.parameters())

    def named_norm_layers(self):
        return [(nl.name, nl.state) for nl in self.norm_layers]

    def state_arrays(self):
        """All persistent arrays (parameters + running stats), named."""
        for name, data, _ in self.parameters():
            yield name, data
        for i, nl in enumerate(self.norm_layers):
            for j, st in enumerate(nl.state.stats):
                yield f"norm{i}.stats{j}.mean", st.mean
                yield f"norm{i}.stats{j}.var", st.var


def _width(base, mult):
    return max(1, int(round(base * mult)))


def build_model(arch: Architecture, norm: NormConfig, heads: int = 1,
                seed: int = 0, dtype=np.float32) -> Model:
    """Deterministic model construction: same seed, bitwise-same state."""
    if heads not in (1, 2):
        raise ConfigurationError("head count must be 1 or 2")
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype)

    def norm_for(c, name):
        cfg = norm
        if norm.kind is NormKind.GROUP and c % norm.group_count:
            raise ConfigurationError(
                f"group_count {norm.group_count} does not divide width {c}"
            )
        return Norm(c, cfg, dtype, name)

    trunk = []
    if arch.name == "small_cnn":
        widths = [_width(b, arch.width) for b in (16, 32, 64, 64)]
        c_prev = 3
        for i, c in enumerate(widths):
            trunk.append(Conv2d(c_prev, c, 3, 1, 1, rng, dtype))
            trunk.append(norm_for(c, f"conv{i + 1}.norm"))
            trunk.append(ReLU())
            if i < 2:
                trunk.append(AvgPool2())
            c_prev = c
        trunk.append(GlobalAvgPool())
        feat = widths[-1]
    else:  # resnet18_cifar: 3x3 stem, four stages of two basic blocks
        widths = [_width(b, arch.width) for b in (64, 128, 256, 512)]
        trunk.append(Conv2d(3, widths[0], 3, 1, 1, rng, dtype))
        trunk.append(norm_for(widths[0], "stem.norm"))
        trunk.append(ReLU())
        c_prev = widths[0]
        for si, c in enumerate(widths):
            for bi in range(2):
                stride = 2 if (si > 0 and bi == 0) else 1
                trunk.append(BasicBlock(c_prev, c, stride, norm,
                                        rng, dtype, f"stage{si + 1}.block{bi + 1}"))
                c_prev = c
        trunk.append(GlobalAvgPool())
        feat = widths[-1]

    head_layers = [Linear(feat, arch.classes, rng, dtype) for _ in range(heads)]
    return Model(arch, norm, trunk, feat, head_layers, dtype)


def input_gradient(model: Model, batch, labels, branch,
                   head_select="default", train_stats=False,
                   stats_overrides=None):
    """d(mean cross-entropy)/d(input pixels) under the routed configuration."""
    from .train import softmax_cross_entropy  # local import to avoid a cycle

    logits, rec = model.forward_tape(
        batch, branch, train_mode=train_stats, head_select=head_select,
        stats_overrides=stats_overrides, update_running=False,
    )
    _, dlogits = softmax_cross_entropy(logits, labels)
    return model.backward(rec, dlogits, need_input_grad=True, accumulate=False)
