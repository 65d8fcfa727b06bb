"""Minimal 4D-tensor CNN engine: the exact layer set the two shipped
architectures need, with hand-derived reverse-mode gradients.

Tensors are numpy arrays of shape (C, X, Y, Z). Convolutions are im2col +
GEMM with zero padding chosen to preserve the spatial shape. Normalization
statistics are computed per sample over the spatial axes (the engine
processes one patch at a time; running statistics accumulate across
patches and drive inference mode). All loops run in a fixed order, so
repeated forward passes are bitwise identical.
"""

import json
import math
import struct
from itertools import product

import numpy as np

CHECKPOINT_MAGIC = b"FODC"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class Layer:
    """Base layer: parameter dict, gradient buffers, forward/backward."""

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}
        self._cache = None

    def zero_grads(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def forward(self, xs, train):
        raise NotImplementedError

    def backward(self, gout):
        raise NotImplementedError

    def _need_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{type(self).__name__}: backward called without a cached forward")
        return self._cache


class Conv3d(Layer):
    """Zero-padded 3D convolution, computed as one GEMM per kernel offset
    over strided views of the padded input (fixed offset order)."""

    def __init__(self, cin, cout, kernel=3, dilation=1, dtype=np.float32):
        super().__init__()
        if kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        self.cin, self.cout, self.kernel, self.dilation = cin, cout, kernel, dilation
        self.params["weight"] = np.zeros((cout, cin, kernel, kernel, kernel), dtype=dtype)
        self.params["bias"] = np.zeros(cout, dtype=dtype)
        self.zero_grads()

    @property
    def fan_in(self):
        return self.cin * self.kernel ** 3

    def _pad(self):
        return self.dilation * (self.kernel - 1) // 2

    def _offsets(self, spatial):
        ox, oy, oz = spatial
        d = self.dilation
        for a, b, c in product(range(self.kernel), repeat=3):
            yield (a, b, c), (slice(a * d, a * d + ox), slice(b * d, b * d + oy),
                              slice(c * d, c * d + oz))

    def forward(self, xs, train):
        x = xs[0]
        if x.shape[0] != self.cin:
            raise ShapeError(f"conv expects {self.cin} input channels, got {x.shape[0]}")
        spatial = x.shape[1:]
        w = self.params["weight"]
        if self.kernel == 1:
            out = np.tensordot(w[:, :, 0, 0, 0], x, axes=(1, 0))
        else:
            pad = self._pad()
            xp = np.pad(x, ((0, 0),) + ((pad, pad),) * 3)
            out = np.zeros((self.cout,) + spatial, dtype=x.dtype)
            for (a, b, c), sl in self._offsets(spatial):
                out += np.tensordot(w[:, :, a, b, c], xp[:, sl[0], sl[1], sl[2]], axes=(1, 0))
        out += self.params["bias"].reshape(-1, 1, 1, 1)
        self._cache = (x, spatial)
        return out

    def backward(self, gout):
        x, spatial = self._need_cache()
        w = self.params["weight"]
        self.grads["bias"] += gout.sum(axis=(1, 2, 3))
        if self.kernel == 1:
            self.grads["weight"][:, :, 0, 0, 0] += np.tensordot(gout, x, axes=([1, 2, 3], [1, 2, 3]))
            return [np.tensordot(w[:, :, 0, 0, 0], gout, axes=(0, 0))]
        pad = self._pad()
        xp = np.pad(x, ((0, 0),) + ((pad, pad),) * 3)
        dxp = np.zeros_like(xp)
        dw = self.grads["weight"]
        for (a, b, c), sl in self._offsets(spatial):
            view = xp[:, sl[0], sl[1], sl[2]]
            dw[:, :, a, b, c] += np.tensordot(gout, view, axes=([1, 2, 3], [1, 2, 3]))
            dxp[:, sl[0], sl[1], sl[2]] += np.tensordot(w[:, :, a, b, c], gout, axes=(0, 0))
        ox, oy, oz = spatial
        return [dxp[:, pad:pad + ox, pad:pad + oy, pad:pad + oz]]


class BatchNorm(Layer):
    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)
        self.zero_grads()

    def forward(self, xs, train):
        x = xs[0]
        if x.shape[0] != self.channels:
            raise ShapeError(f"batchnorm expects {self.channels} channels, got {x.shape[0]}")
        flat = x.reshape(self.channels, -1)
        if train:
            mean = flat.mean(axis=1)
            var = flat.var(axis=1)
            m = self.momentum
            self.buffers["running_mean"] *= 1.0 - m
            self.buffers["running_mean"] += (m * mean).astype(self.buffers["running_mean"].dtype)
            self.buffers["running_var"] *= 1.0 - m
            self.buffers["running_var"] += (m * var).astype(self.buffers["running_var"].dtype)
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (flat - mean[:, None]) * inv[:, None]
        out = self.params["gamma"][:, None] * xhat + self.params["beta"][:, None]
        self._cache = (xhat, inv, train)
        return out.reshape(x.shape)

    def backward(self, gout):
        xhat, inv, train = self._need_cache()
        g = gout.reshape(self.channels, -1)
        self.grads["beta"] += g.sum(axis=1)
        self.grads["gamma"] += (g * xhat).sum(axis=1)
        gxhat = g * self.params["gamma"][:, None]
        if not train:
            return [(gxhat * inv[:, None]).reshape(gout.shape)]
        n = xhat.shape[1]
        dx = (inv[:, None] / n) * (
            n * gxhat
            - gxhat.sum(axis=1, keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=1, keepdims=True)
        )
        return [dx.reshape(gout.shape)]


class PReLU(Layer):
    def __init__(self, channels, dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.params["slope"] = np.full(channels, 0.25, dtype=dtype)
        self.zero_grads()

    def forward(self, xs, train):
        x = xs[0]
        slope = self.params["slope"].reshape(-1, 1, 1, 1)
        out = np.where(x > 0, x, slope * x)
        self._cache = x
        return out

    def backward(self, gout):
        x = self._need_cache()
        slope = self.params["slope"].reshape(-1, 1, 1, 1)
        neg = x <= 0
        self.grads["slope"] += (gout * np.where(neg, x, 0)).sum(axis=(1, 2, 3))
        return [gout * np.where(neg, slope, 1.0).astype(gout.dtype)]


class MaxPool2(Layer):
    def forward(self, xs, train):
        x = xs[0]
        c, sx, sy, sz = x.shape
        if sx % 2 or sy % 2 or sz % 2:
            raise ShapeError(f"max-pool-2 needs even spatial dims, got {x.shape[1:]}")
        blocks = x.reshape(c, sx // 2, 2, sy // 2, 2, sz // 2, 2)
        blocks = blocks.transpose(0, 1, 3, 5, 2, 4, 6).reshape(c, sx // 2, sy // 2, sz // 2, 8)
        arg = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        self._cache = (arg, x.shape)
        return out

    def backward(self, gout):
        arg, in_shape = self._need_cache()
        c, sx, sy, sz = in_shape
        scattered = np.zeros((c, sx // 2, sy // 2, sz // 2, 8), dtype=gout.dtype)
        np.put_along_axis(scattered, arg[..., None], gout[..., None], axis=-1)
        dx = scattered.reshape(c, sx // 2, sy // 2, sz // 2, 2, 2, 2)
        dx = dx.transpose(0, 1, 4, 2, 5, 3, 6).reshape(in_shape)
        return [dx]


class Upsample2(Layer):
    def forward(self, xs, train):
        x = xs[0]
        self._cache = x.shape
        return x.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, gout):
        c, sx, sy, sz = self._need_cache()
        g = gout.reshape(c, sx, 2, sy, 2, sz, 2)
        return [g.sum(axis=(2, 4, 6))]


class Add(Layer):
    def forward(self, xs, train):
        a, b = xs
        if a.shape != b.shape:
            raise ShapeError(f"residual add on mismatched shapes {a.shape} vs {b.shape}")
        self._cache = True
        return a + b

    def backward(self, gout):
        self._need_cache()
        return [gout, gout]


class Concat(Layer):
    def forward(self, xs, train):
        a, b = xs
        if a.shape[1:] != b.shape[1:]:
            raise ShapeError(f"concat on mismatched spatial shapes {a.shape} vs {b.shape}")
        self._cache = (a.shape[0], b.shape[0])
        return np.concatenate([a, b], axis=0)

    def backward(self, gout):
        ca, _ = self._need_cache()
        return [gout[:ca], gout[ca:]]


# ---------------------------------------------------------------------------
# network graph


class Network:
    """Single-input DAG of named layers executed in insertion order."""

    def __init__(self, in_channels, arch="", arch_kwargs=None):
        self.in_channels = in_channels
        self.arch = arch
        self.arch_kwargs = arch_kwargs or {}
        self.nodes = []          # (name, layer, input names); "input" is implicit
        self._acts = None

    def add(self, name, layer, inputs=("__prev__",)):
        if not self.nodes:
            prev = "input"
        else:
            prev = self.nodes[-1][0]
        resolved = tuple(prev if i == "__prev__" else i for i in inputs)
        self.nodes.append((name, layer, resolved))
        return name

    def forward(self, x, train=False):
        x = np.asarray(x)
        if x.ndim != 4 or x.shape[0] != self.in_channels:
            raise ShapeError(
                f"network expects (C={self.in_channels}, X, Y, Z) input, got {x.shape}"
            )
        acts = {"input": x}
        for name, layer, inputs in self.nodes:
            try:
                acts[name] = layer.forward([acts[i] for i in inputs], train)
            except ShapeError as exc:
                raise ShapeError(f"layer {name!r}: {exc}") from exc
        self._acts = acts if train else None
        return acts[self.nodes[-1][0]]

    def backward(self, gout):
        """Gradients for the cached training forward; returns d loss / d input."""
        if self._acts is None:
            raise RuntimeError("backward requires a preceding forward(train=True)")
        grads = {name: None for name, _, _ in self.nodes}
        grads["input"] = None
        grads[self.nodes[-1][0]] = np.asarray(gout)
        for name, layer, inputs in reversed(self.nodes):
            g = grads[name]
            if g is None:
                continue
            gins = layer.backward(g)
            for src, gin in zip(inputs, gins):
                grads[src] = gin if grads[src] is None else grads[src] + gin
        return grads["input"]

    def parameters(self):
        """Ordered (node_name, param_name) -> array mapping."""
        out = {}
        for name, layer, _ in self.nodes:
            for pname, arr in layer.params.items():
                out[(name, pname)] = arr
        return out

    def gradients(self):
        out = {}
        for name, layer, _ in self.nodes:
            for pname, arr in layer.grads.items():
                out[(name, pname)] = arr
        return out

    def named_buffers(self):
        out = {}
        for name, layer, _ in self.nodes:
            for bname, arr in layer.buffers.items():
                out[(name, bname)] = arr
        return out

    def zero_grads(self):
        for _, layer, _ in self.nodes:
            layer.zero_grads()

    def n_parameters(self):
        return sum(int(v.size) for v in self.parameters().values())

    def receptive_field(self):
        """Analytic receptive-field extent along one axis."""
        rf = {"input": (1, 1)}  # (extent, jump)
        for name, layer, inputs in self.nodes:
            fields = [rf[i] for i in inputs]
            extent = max(f[0] for f in fields)
            jump = fields[0][1]
            if isinstance(layer, Conv3d):
                extent += (layer.kernel - 1) * layer.dilation * jump
            elif isinstance(layer, MaxPool2):
                extent += jump
                jump *= 2
            elif isinstance(layer, Upsample2):
                jump = jump / 2
            rf[name] = (extent, jump)
        return math.ceil(rf[self.nodes[-1][0]][0])


def he_uniform_init(net, seed):
    """He-uniform conv weights, zero biases, PReLU slopes 0.25, unit BN."""
    rng = np.random.default_rng(seed)
    for _, layer, _ in net.nodes:
        if isinstance(layer, Conv3d):
            bound = math.sqrt(6.0 / layer.fan_in)
            w = layer.params["weight"]
            w[...] = rng.uniform(-bound, bound, size=w.shape).astype(w.dtype)
            layer.params["bias"][...] = 0.0
        elif isinstance(layer, BatchNorm):
            layer.params["gamma"][...] = 1.0
            layer.params["beta"][...] = 0.0
            layer.buffers["running_mean"][...] = 0.0
            layer.buffers["running_var"][...] = 1.0
        elif isinstance(layer, PReLU):
            layer.params["slope"][...] = 0.25
    net.zero_grads()


# ---------------------------------------------------------------------------
# optimizer


class RMSprop:
    """Squared-gradient accumulator update with decoupled-style weight decay:

    acc <- rho * acc + (1 - rho) * g^2
    p   <- p - lr * (g + wd * p) / (sqrt(acc) + eps)
    """

    def __init__(self, params, lr=3e-2, rho=0.9, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.rho = rho
        self.eps = eps
        self.weight_decay = weight_decay
        self.acc = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}

    def step(self, grads):
        for key, p in self.params.items():
            g = grads[key].astype(np.float64)
            acc = self.acc[key]
            acc *= self.rho
            acc += (1.0 - self.rho) * g * g
            update = self.lr * (g + self.weight_decay * p) / (np.sqrt(acc) + self.eps)
            p -= update.astype(p.dtype)
            # weight decay shrinks idle parameters geometrically; flush them
            # before they reach the (slow) subnormal float32 range
            p[np.abs(p) < 1e-30] = 0.0


# ---------------------------------------------------------------------------
# architectures


def _res_block(net, tag, channels, dilation, dtype):
    """Pre-activation residual block: 2 x (BN -> PReLU -> conv) + skip."""
    skip = net.nodes[-1][0]
    net.add(f"{tag}.bn1", BatchNorm(channels, dtype=dtype))
    net.add(f"{tag}.act1", PReLU(channels, dtype=dtype))
    net.add(f"{tag}.conv1", Conv3d(channels, channels, 3, dilation, dtype=dtype))
    net.add(f"{tag}.bn2", BatchNorm(channels, dtype=dtype))
    net.add(f"{tag}.act2", PReLU(channels, dtype=dtype))
    net.add(f"{tag}.conv2", Conv3d(channels, channels, 3, dilation, dtype=dtype))
    net.add(f"{tag}.add", Add(), inputs=("__prev__", skip))


def highresnet_lite(l_max=4, dtype=np.float32):
    """Trimmed high-resolution residual network: two dilation levels, four
    residual connections, receptive field 31.

    A parameter-free global skip feeds the input to the output head, so an
    untrained network is near-identity in coefficient space and training
    learns the correction toward the multi-shell coefficients.
    """
    n_out = (l_max + 1) * (l_max + 2) // 2
    w1, w2 = 16, 32
    net = Network(n_out, arch="highresnet_lite", arch_kwargs={"l_max": l_max})
    net.add("stem.conv", Conv3d(n_out, w1, 3, 1, dtype=dtype))
    net.add("stem.bn", BatchNorm(w1, dtype=dtype))
    net.add("stem.act", PReLU(w1, dtype=dtype))
    _res_block(net, "l1.b1", w1, 1, dtype)
    _res_block(net, "l1.b2", w1, 1, dtype)
    net.add("l2.trans", Conv3d(w1, w2, 3, 2, dtype=dtype))
    _res_block(net, "l2.b1", w2, 2, dtype)
    _res_block(net, "l2.b2", w2, 2, dtype)
    net.add("out.bn", BatchNorm(w2, dtype=dtype))
    net.add("out.act", PReLU(w2, dtype=dtype))
    net.add("out.conv", Conv3d(w2, n_out, 1, 1, dtype=dtype))
    net.add("out.skip", Add(), inputs=("__prev__", "input"))
    return net


def _conv_bn_act(net, tag, cin, cout, dtype):
    net.add(f"{tag}.conv", Conv3d(cin, cout, 3, 1, dtype=dtype))
    net.add(f"{tag}.bn", BatchNorm(cout, dtype=dtype))
    net.add(f"{tag}.act", PReLU(cout, dtype=dtype))


def unet_lite(l_max=4, dtype=np.float32):
    """Trimmed U-Net: one pooling level, ten 3^3 convolutions, receptive
    field 30."""
    n_out = (l_max + 1) * (l_max + 2) // 2
    w1, w2, w3 = 56, 112, 224
    net = Network(n_out, arch="unet_lite", arch_kwargs={"l_max": l_max})
    _conv_bn_act(net, "enc1.a", n_out, w1, dtype)
    _conv_bn_act(net, "enc1.b", w1, w1, dtype)
    net.add("pool", MaxPool2())
    _conv_bn_act(net, "enc2.a", w1, w2, dtype)
    _conv_bn_act(net, "enc2.b", w2, w2, dtype)
    _conv_bn_act(net, "mid.a", w2, w3, dtype)
    _conv_bn_act(net, "mid.b", w3, w3, dtype)
    net.add("up", Upsample2())
    net.add("skip", Concat(), inputs=("__prev__", "enc1.b.act"))
    _conv_bn_act(net, "dec2.a", w3 + w1, w2, dtype)
    _conv_bn_act(net, "dec2.b", w2, w2, dtype)
    _conv_bn_act(net, "dec1.a", w2, w1, dtype)
    _conv_bn_act(net, "dec1.b", w1, w1, dtype)
    net.add("out.conv", Conv3d(w1, n_out, 1, 1, dtype=dtype))
    net.add("out.skip", Add(), inputs=("__prev__", "input"))
    return net


ARCHITECTURES = {
    "highresnet_lite": highresnet_lite,
    "unet_lite": unet_lite,
}


def build(arch, **kwargs):
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}; have {sorted(ARCHITECTURES)}")
    return ARCHITECTURES[arch](**kwargs)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, net, optimizer=None, rng_state=None, provenance=None):
    """Versioned binary checkpoint: header JSON + layer-ordered float32 blobs."""
    entries = []
    blobs = []
    for (node, pname), arr in net.parameters().items():
        entries.append(["param", node, pname, list(arr.shape)])
        blobs.append(np.ascontiguousarray(arr, dtype="<f4"))
    for (node, bname), arr in net.named_buffers().items():
        entries.append(["buffer", node, bname, list(arr.shape)])
        blobs.append(np.ascontiguousarray(arr, dtype="<f4"))
    opt_meta = None
    if optimizer is not None:
        opt_meta = {
            "lr": optimizer.lr, "rho": optimizer.rho, "eps": optimizer.eps,
            "weight_decay": optimizer.weight_decay,
        }
        for (node, pname) in net.parameters():
            arr = optimizer.acc[(node, pname)]
            entries.append(["opt_acc", node, pname, list(arr.shape)])
            blobs.append(np.ascontiguousarray(arr, dtype="<f4"))
    header = {
        "arch": net.arch,
        "arch_kwargs": net.arch_kwargs,
        "entries": entries,
        "optimizer": opt_meta,
        "rng_state": rng_state,
        "provenance": provenance or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for b in blobs:
            fh.write(b.tobytes())


def load_checkpoint(path):
    """Returns (net, header); the optimizer accumulators, RNG state and
    provenance travel in the header (accumulators under key '_opt_acc')."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic at byte offset 0 (got {raw[:4]!r})")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unrecognized checkpoint version {version}")
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    net = build(header["arch"], **header["arch_kwargs"])
    params = net.parameters()
    buffers = net.named_buffers()
    offset = 12 + hlen
    opt_acc = {}
    for kind, node, name, shape in header["entries"]:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(shape)
        offset += 4 * n
        if kind == "param":
            params[(node, name)][...] = arr
        elif kind == "buffer":
            buffers[(node, name)][...] = arr
        elif kind == "opt_acc":
            opt_acc[(node, name)] = arr.astype(np.float64)
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes after declared blobs")
    header["_opt_acc"] = opt_acc
    return net, header
