"""Res-UNet and Res-Net segmentation networks built on :mod:`kitseg.tensor`.

Both networks map a 2.5D input ``[N,5,S,S]`` to per-pixel class
probabilities ``[N,3,S,S]`` (background, kidney, tumor). All convolutional
layers inside residual blocks are pre-activated: BN -> ReLU -> conv.
"""
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .exceptions import IncompatibleCheckpointError, ShapeError


@dataclass
class InitSpec:
    scheme: str = "truncated_normal"  # or "he_uniform"
    std: float = 0.1
    seed: int = 0


def init_weights(shape, init, rng, fan_in=None):
    """Sample a float32 kernel of ``shape``.

    Truncated-normal draws are resampled until they fall inside two standard
    deviations; He-uniform draws from ``U[-sqrt(6/fan_in), sqrt(6/fan_in)]``.
    """
    if fan_in is None:
        fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])
    if init.scheme == "truncated_normal":
        out = rng.standard_normal(shape) * init.std
        bad = np.abs(out) > 2 * init.std
        while bad.any():
            out[bad] = rng.standard_normal(int(bad.sum())) * init.std
            bad = np.abs(out) > 2 * init.std
    elif init.scheme == "he_uniform":
        limit = np.sqrt(6.0 / fan_in)
        out = rng.uniform(-limit, limit, size=shape)
    else:
        raise ValueError(f"unknown init scheme {init.scheme!r}")
    return out.astype(np.float32)


class Context:
    """Per-forward settings threaded through the layers."""

    def __init__(self, training=False, seed=0, step=0):
        self.training = training
        self.seed = seed
        self.step = step


class Module:
    def __init__(self):
        self._children = []
        self._params = []

    def add(self, name, module):
        self._children.append((name, module))
        setattr(self, name, module)
        return module

    def param(self, name, data):
        t = T.Tensor(data, requires_grad=True, name=name)
        self._params.append((name, t))
        setattr(self, name, t)
        return t

    def named_parameters(self, prefix=""):
        for name, t in self._params:
            yield prefix + name, t
        for name, child in self._children:
            yield from child.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix=""):
        for name, child in self._children:
            yield from child.named_buffers(prefix + name + ".")

    def kernels(self):
        """Convolution kernels, the only tensors under L2 regularization."""
        return [t for name, t in self.named_parameters() if name.endswith("kernel")]


class Conv2d(Module):
    def __init__(self, cin, cout, k, init, rng, stride=1, bias=True):
        super().__init__()
        self.stride = stride
        self.param("kernel", init_weights((cout, cin, k, k), init, rng))
        self.bias = self.param("bias", np.zeros(cout, np.float32)) if bias else None

    def __call__(self, x, ctx):
        return T.conv2d(x, self.kernel, self.bias, stride=self.stride, padding="same")


class ConvTranspose2d(Module):
    def __init__(self, cin, cout, init, rng, k=2):
        super().__init__()
        self.param("kernel", init_weights((cin, cout, k, k), init, rng, fan_in=cin * k * k))
        self.param("bias", np.zeros(cout, np.float32))

    def __call__(self, x, ctx, size=None):
        return T.conv2d_transpose(x, self.kernel, self.bias, output_size=size)


class BatchNorm2d(Module):
    def __init__(self, c):
        super().__init__()
        self.param("gamma", np.ones(c, np.float32))
        self.param("beta", np.zeros(c, np.float32))
        self.stats = T.RunningStats(c)

    def named_buffers(self, prefix=""):
        yield prefix + "running_mean", self.stats
        yield prefix + "running_var", self.stats

    def __call__(self, x, ctx):
        return T.batch_norm(x, self.gamma, self.beta, self.stats, training=ctx.training)


class PreAct(Module):
    """BN -> ReLU -> layer."""

    def __init__(self, cin, layer):
        super().__init__()
        self.add("bn", BatchNorm2d(cin))
        self.add("conv", layer)

    def __call__(self, x, ctx, drop=None, **kw):
        h = T.relu(self.bn(x, ctx))
        if drop is not None:
            h = drop(h)
        return self.conv(h, ctx, **kw)


class ResidualBlock(Module):
    """Two pre-activated 3x3 convs plus a linear, bias-free 1x1 shortcut conv.

    ``stride`` applies to the first conv and to the shortcut. ``dropout``
    acts on the second conv's activated input, after its batch norm, so the
    norm statistics never see dropout noise (train and eval variances match).
    """

    def __init__(self, cin, cout, init, rng, stride=1, dropout=0.0, layer_id=0):
        super().__init__()
        self.dropout = dropout
        self.layer_id = layer_id
        self.add("pre1", PreAct(cin, Conv2d(cin, cout, 3, init, rng, stride=stride)))
        self.add("pre2", PreAct(cout, Conv2d(cout, cout, 3, init, rng)))
        self.add("shortcut", Conv2d(cin, cout, 1, init, rng, stride=stride, bias=False))

    def __call__(self, x, ctx):
        def drop(h):
            return T.dropout(h, self.dropout, ctx.training, (ctx.seed, self.layer_id, ctx.step))
        h = self.pre2(self.pre1(x, ctx), ctx, drop=drop if self.dropout else None)
        return T.add(h, self.shortcut(x, ctx))


class Network(Module):
    """Common state handling for the two segmentation networks."""

    kind = None

    def __init__(self, spec, init):
        super().__init__()
        self.spec = spec
        self.init = init
        self.training = False
        self.step = 0

    def train(self, mode=True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    @property
    def arch(self):
        return {"kind": self.kind, "spec": asdict(self.spec), "init": asdict(self.init)}

    def parameters(self):
        return dict(self.named_parameters())

    def n_parameters(self):
        return int(sum(t.data.size for t in self.parameters().values()))

    def state_dict(self):
        out = {name: t.data.copy() for name, t in self.named_parameters()}
        for name, stats in self.named_buffers():
            out[name] = (stats.mean if name.endswith("running_mean") else stats.var).copy()
        return out

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = list(params) + list(buffers)
        missing = [n for n in expected if n not in state]
        extra = [n for n in state if n not in params and n not in buffers]
        if missing or extra:
            raise IncompatibleCheckpointError(
                f"parameter names do not match the architecture (missing {missing[:3]}, "
                f"unexpected {extra[:3]})")
        for name, t in params.items():
            arr = np.asarray(state[name], dtype=np.float32)
            if arr.shape != t.shape:
                raise IncompatibleCheckpointError(f"{name}: shape {arr.shape} != {t.shape}")
            t.data = arr.copy()
        for name, stats in buffers.items():
            arr = np.asarray(state[name], dtype=np.float32)
            if name.endswith("running_mean"):
                stats.mean = arr.copy()
            else:
                stats.var = arr.copy()
        return self

    def check_input(self, x):
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"expected input [N,{self.spec.in_channels},S,S], got {x.shape}")
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(f"input spatial dims must be even, got {x.shape[2:]}")

    def __call__(self, x, seed=0):
        """Forward pass returning class probabilities.

        In training mode each call advances the dropout step counter.
        """
        x = T.as_tensor(x)
        self.check_input(x)
        ctx = Context(self.training, seed, self.step)
        if self.training:
            self.step += 1
        return T.softmax_channels(self.logits(x, ctx))

    def predict_proba(self, X, batch_size=16):
        X = np.asarray(X, dtype=np.float32)
        was = self.training
        self.eval()
        out = []
        with T.no_grad():
            for i in range(0, len(X), batch_size):
                out.append(self(X[i:i + batch_size]).data)
        self.train(was)
        return np.concatenate(out, axis=0)


@dataclass
class ResUNetSpec:
    levels: int = 4
    base_channels: int = 32
    in_channels: int = 5
    out_classes: int = 3


class ResUNet(Network):
    kind = "res-unet"

    def __init__(self, spec, init):
        super().__init__(spec, init)
        rng = np.random.default_rng([init.seed, 0x0E7])
        widths = [spec.base_channels * 2 ** i for i in range(spec.levels)]
        cin = spec.in_channels
        for i, w in enumerate(widths):
            self.add(f"enc{i + 1}", ResidualBlock(cin, w, init, rng, stride=1 if i == 0 else 2))
            cin = w
        for i in range(spec.levels - 1, 0, -1):
            self.add(f"up{i}", ConvTranspose2d(widths[i], widths[i - 1], init, rng))
            self.add(f"dec{i}", ResidualBlock(2 * widths[i - 1], widths[i - 1], init, rng))
        self.add("head", PreAct(widths[0], Conv2d(widths[0], spec.out_classes, 1, init, rng)))

    def logits(self, x, ctx):
        skips = []
        for i in range(self.spec.levels):
            x = getattr(self, f"enc{i + 1}")(x, ctx)
            skips.append(x)
        for i in range(self.spec.levels - 1, 0, -1):
            x = getattr(self, f"up{i}")(x, ctx, size=skips[i - 1].shape[2:])
            x = getattr(self, f"dec{i}")(T.concat_channels(x, skips[i - 1]), ctx)
        return self.head(x, ctx)


@dataclass
class ResNetSpec:
    base_channels: int = 32
    n_blocks: int = 6
    dropout: float = 0.5
    in_channels: int = 5
    out_classes: int = 3
    stem_kernel: int = 7


class ResNet(Network):
    """Image-transformation style net: 7x7 stem, two stride-2 downsamples,
    a residual body, two stride-2 transposed upsamples and a 1x1 head."""

    kind = "res-net"

    def __init__(self, spec, init):
        super().__init__(spec, init)
        rng = np.random.default_rng([init.seed, 0x4E7])
        c = spec.base_channels
        self.add("stem", Conv2d(spec.in_channels, c, spec.stem_kernel, init, rng))
        self.add("down1", PreAct(c, Conv2d(c, 2 * c, 3, init, rng, stride=2)))
        self.add("down2", PreAct(2 * c, Conv2d(2 * c, 4 * c, 3, init, rng, stride=2)))
        for i in range(spec.n_blocks):
            self.add(f"block{i + 1}", ResidualBlock(4 * c, 4 * c, init, rng,
                                                   dropout=spec.dropout, layer_id=i + 1))
        self.add("up1", PreAct(4 * c, ConvTranspose2d(4 * c, 2 * c, init, rng)))
        self.add("up2", PreAct(2 * c, ConvTranspose2d(2 * c, c, init, rng)))
        self.add("head", PreAct(c, Conv2d(c, spec.out_classes, 1, init, rng)))

    def logits(self, x, ctx):
        full = self.stem(x, ctx)
        half = self.down1(full, ctx)
        x = self.down2(half, ctx)
        for i in range(self.spec.n_blocks):
            x = getattr(self, f"block{i + 1}")(x, ctx)
        x = self.up1(x, ctx, size=half.shape[2:])
        return self.head(self.up2(x, ctx, size=full.shape[2:]), ctx)


def _check_size(input_size):
    # odd sizes cannot be restored by the final stride-2 upsample
    if input_size is not None and (input_size < 2 or input_size % 2):
        raise ShapeError(f"input size {input_size} must be even")


def build_res_unet(spec=None, init=None, input_size=None):
    _check_size(input_size)
    return ResUNet(spec or ResUNetSpec(), init or InitSpec())


def build_res_net(spec=None, init=None, input_size=None):
    _check_size(input_size)
    return ResNet(spec or ResNetSpec(), init or InitSpec(scheme="he_uniform"))


def build_from_arch(arch):
    """Rebuild an (untrained) network from :attr:`Network.arch`."""
    try:
        kind = arch["kind"]
        init = InitSpec(**arch["init"])
        if kind == "res-unet":
            return build_res_unet(ResUNetSpec(**arch["spec"]), init)
        if kind == "res-net":
            return build_res_net(ResNetSpec(**arch["spec"]), init)
    except (KeyError, TypeError) as exc:
        raise IncompatibleCheckpointError(f"malformed architecture record: {exc}") from exc
    raise IncompatibleCheckpointError(f"unknown network kind {kind!r}")
