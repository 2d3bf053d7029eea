"""Network definitions: teacher/student classifiers and the pseudo-data generator.

Three families are supported through one NetSpec type:

* ``mlp``       — fully connected relu net; every hidden activation is a tap.
* ``convnet``   — a small wide-residual classifier: a stem conv, three groups
                  of pre-activation residual blocks (strides 1/2/2), a final
                  batchnorm+relu, global average pooling and a linear head.
                  Every residual block output is a tap, so a depth multiplier
                  of 2 yields exactly twice the taps.
* ``generator`` — linear projection of the noise vector to a base grid, then
                  three 3x3 convolutions with nearest-neighbor 2x upsampling
                  between them; batchnorm after the first two convs, optional
                  scaled tanh on the output.

Networks carry their parameters as autodiff Tensors, expose batchnorm running
buffers for checkpointing, and report activation taps through
``forward_with_activations``.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeMismatch


@dataclass
class ActivationSet:
    """Tapped activation blocks plus the penultimate feature matrix.

    ``blocks`` is an ordered list of (name, Tensor); classifier blocks are
    batch x channels x h x w (MLP taps are reshaped to batch x features x 1 x 1
    so the same attention-map reduction applies). ``penultimate`` is
    batch x features.
    """

    blocks: list
    penultimate: object


@dataclass(frozen=True)
class NetSpec:
    """Architecture description; hashable so checkpoints can fingerprint it.

    For ``mlp``: in_shape=(features,), hidden widths, classes.
    For ``convnet``: in_shape=(c,h,w), base_channels, depth_mult, width_mult,
    classes; group widths are base*(1,2,4) scaled by width_mult, each group
    holds 2*depth_mult residual blocks.
    For ``generator``: in_shape=(z_dim,), out_shape=(c,h,w) with h and w equal
    to 4x a positive base grid, gen_channels for the two hidden convs, and
    bounded=False to drop the output tanh.
    """

    kind: str
    in_shape: tuple
    classes: int = 0
    hidden: tuple = ()
    base_channels: int = 8
    depth_mult: int = 1
    width_mult: float = 1.0
    out_shape: tuple = ()
    gen_channels: tuple = (64, 64)
    bounded: bool = True
    out_scale: float = 1.0

    def canonical(self):
        """Stable one-line text form: digest input, embedded in checkpoints.

        Reversible via parse_netspec; field order is fixed.
        """
        parts = [f"kind={self.kind!r}",
                 f"in_shape={tuple(self.in_shape)!r}",
                 f"classes={self.classes!r}",
                 f"hidden={tuple(self.hidden)!r}",
                 f"base_channels={self.base_channels!r}",
                 f"depth_mult={self.depth_mult!r}",
                 f"width_mult={float(self.width_mult)!r}",
                 f"out_shape={tuple(self.out_shape)!r}",
                 f"gen_channels={tuple(self.gen_channels)!r}",
                 f"bounded={self.bounded!r}",
                 f"out_scale={float(self.out_scale)!r}"]
        return ";".join(parts)


def _he_uniform(rng, shape, fan_in):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Linear:
    def __init__(self, name, rng, fan_in, fan_out):
        self.name = name
        self.w = ad.Tensor(_he_uniform(rng, (fan_in, fan_out), fan_in), requires_grad=True)
        self.b = ad.Tensor(np.zeros(fan_out), requires_grad=True)

    def params(self):
        return [(self.name + ".w", self.w), (self.name + ".b", self.b)]

    def buffers(self):
        return []

    def __call__(self, x):
        return ad.add(ad.matmul(x, self.w), self.b)


class Conv:
    def __init__(self, name, rng, cin, cout, k=3, stride=1, pad=1, bias=True):
        self.name = name
        self.stride = stride
        self.pad = pad
        fan_in = cin * k * k
        self.w = ad.Tensor(_he_uniform(rng, (cout, cin, k, k), fan_in), requires_grad=True)
        self.b = ad.Tensor(np.zeros(cout), requires_grad=True) if bias else None

    def params(self):
        out = [(self.name + ".w", self.w)]
        if self.b is not None:
            out.append((self.name + ".b", self.b))
        return out

    def buffers(self):
        return []

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class BatchNorm:
    def __init__(self, name, channels):
        self.name = name
        self.gamma = ad.Tensor(np.ones(channels), requires_grad=True)
        self.beta = ad.Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def params(self):
        return [(self.name + ".gamma", self.gamma), (self.name + ".beta", self.beta)]

    def buffers(self):
        return [(self.name + ".running_mean", self.running_mean),
                (self.name + ".running_var", self.running_var)]

    def __call__(self, x, training):
        return ad.batch_norm(x, self.gamma, self.beta,
                             self.running_mean, self.running_var, training=training)


class ResidualBlock:
    """Pre-activation basic block: bn-relu-conv, bn-relu-conv, plus shortcut.

    The shortcut is identity when shape allows, otherwise a 1x1 conv on the
    pre-activated input (wide-resnet style).
    """

    def __init__(self, name, rng, cin, cout, stride):
        self.name = name
        self.bn1 = BatchNorm(name + ".bn1", cin)
        self.conv1 = Conv(name + ".conv1", rng, cin, cout, k=3, stride=stride, pad=1, bias=False)
        self.bn2 = BatchNorm(name + ".bn2", cout)
        self.conv2 = Conv(name + ".conv2", rng, cout, cout, k=3, stride=1, pad=1, bias=False)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = Conv(name + ".shortcut", rng, cin, cout, k=1, stride=stride, pad=0, bias=False)

    def params(self):
        out = self.bn1.params() + self.conv1.params() + self.bn2.params() + self.conv2.params()
        if self.shortcut is not None:
            out += self.shortcut.params()
        return out

    def buffers(self):
        return self.bn1.buffers() + self.bn2.buffers()

    def __call__(self, x, training):
        h = ad.relu(self.bn1(x, training))
        skip = x if self.shortcut is None else self.shortcut(h)
        h = self.conv1(h)
        h = ad.relu(self.bn2(h, training))
        h = self.conv2(h)
        return ad.add(h, skip)


def _scaled_widths(spec):
    w = spec.width_mult
    base = spec.base_channels
    return [max(1, int(round(base * m * w))) for m in (1, 2, 4)]


class Network:
    """A built network: ordered layers, named parameters, activation taps."""

    def __init__(self, spec):
        self.spec = spec
        self.mode = "train"
        self._params = []      # ordered (name, Tensor)
        self._buffers = []     # ordered (name, ndarray), batchnorm running stats
        self.taps = []         # tap names in layer order

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def _register(self, layer):
        for name, t in layer.params():
            self._params.append((name, t))
        for name, b in layer.buffers():
            self._buffers.append((name, b))
        return layer

    def parameters(self):
        """Ordered (name, Tensor) pairs; names are unique by construction."""
        return list(self._params)

    def buffers(self):
        return list(self._buffers)

    def param_count(self):
        return sum(t.data.size for _, t in self._params)

    def state(self):
        """Parameters then buffers, the flat record list for checkpointing."""
        out = [(name, t.data) for name, t in self._params]
        out += [(name, b) for name, b in self._buffers]
        return out

    def load_state(self, records):
        """Install arrays from a {name: array} mapping; shapes must match."""
        for name, t in self._params:
            if name not in records:
                raise ShapeMismatch(f"load_state: missing parameter '{name}'")
            arr = np.asarray(records[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ShapeMismatch(
                    f"load_state: '{name}' shape {arr.shape} != {t.data.shape}")
            t.data = arr.copy()
            t.grad = None
        for name, b in self._buffers:
            if name not in records:
                raise ShapeMismatch(f"load_state: missing buffer '{name}'")
            arr = np.asarray(records[name], dtype=np.float64)
            if arr.shape != b.shape:
                raise ShapeMismatch(
                    f"load_state: '{name}' shape {arr.shape} != {b.shape}")
            b[...] = arr

    def forward(self, x):
        return self.forward_with_activations(x)[0]

    def forward_with_activations(self, x):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)


class MlpNet(Network):
    def __init__(self, spec, seed):
        super().__init__(spec)
        rng = np.random.default_rng(seed)
        widths = [spec.in_shape[0], *spec.hidden]
        self.hidden_layers = []
        for i in range(len(spec.hidden)):
            layer = Linear(f"fc{i}", rng, widths[i], widths[i + 1])
            self.hidden_layers.append(self._register(layer))
            self.taps.append(f"fc{i}")
        self.head = self._register(Linear("head", rng, widths[-1], spec.classes))

    def forward_with_activations(self, x):
        if x.data.ndim != 2 or x.shape[1] != self.spec.in_shape[0]:
            raise ShapeMismatch(
                f"mlp forward: batch shape {x.shape} != (n, {self.spec.in_shape[0]})")
        h = x
        blocks = []
        for layer in self.hidden_layers:
            h = ad.relu(layer(h))
            # expose hidden activations as 4-d blocks so attention maps apply
            blocks.append((layer.name, ad.reshape(h, (h.shape[0], h.shape[1], 1, 1))))
        logits = self.head(h)
        return logits, ActivationSet(blocks=blocks, penultimate=h)


class ConvNet(Network):
    def __init__(self, spec, seed):
        super().__init__(spec)
        rng = np.random.default_rng(seed)
        cin = spec.in_shape[0]
        widths = _scaled_widths(spec)
        blocks_per_group = 2 * spec.depth_mult
        self.stem = self._register(Conv("stem", rng, cin, widths[0], k=3, stride=1, pad=1, bias=False))
        self.blocks = []
        c_prev = widths[0]
        for g, (c_out, stride) in enumerate(zip(widths, (1, 2, 2))):
            for b in range(blocks_per_group):
                name = f"g{g}b{b}"
                blk = ResidualBlock(name, rng, c_prev, c_out, stride if b == 0 else 1)
                self.blocks.append(self._register(blk))
                self.taps.append(name)
                c_prev = c_out
        self.bn_out = self._register(BatchNorm("bn_out", c_prev))
        self.head = self._register(Linear("head", rng, c_prev, spec.classes))

    def forward_with_activations(self, x):
        if x.data.ndim != 4 or x.shape[1:] != tuple(self.spec.in_shape):
            raise ShapeMismatch(
                f"convnet forward: batch shape {x.shape} != (n, {self.spec.in_shape})")
        training = self.mode == "train"
        h = self.stem(x)
        blocks = []
        for blk in self.blocks:
            h = blk(h, training)
            blocks.append((blk.name, h))
        h = ad.relu(self.bn_out(h, training))
        h = ad.reduce_mean(h, axis=(2, 3))    # global average pool -> (n, c)
        logits = self.head(h)
        return logits, ActivationSet(blocks=blocks, penultimate=h)


class GeneratorNet(Network):
    def __init__(self, spec, seed):
        super().__init__(spec)
        rng = np.random.default_rng(seed)
        c_out, h_out, w_out = spec.out_shape
        if h_out % 4 or w_out % 4 or h_out < 4 or w_out < 4:
            raise ConfigError(
                f"generator: output h,w must be 4x a positive base grid, got {h_out}x{w_out}")
        self.base_hw = (h_out // 4, w_out // 4)
        c1, c2 = spec.gen_channels
        self.c0 = c1
        self.proj = self._register(Linear("proj", rng, spec.in_shape[0],
                                          c1 * self.base_hw[0] * self.base_hw[1]))
        self.conv1 = self._register(Conv("conv1", rng, c1, c1, k=3, stride=1, pad=1))
        self.bn1 = self._register(BatchNorm("bn1", c1))
        self.conv2 = self._register(Conv("conv2", rng, c1, c2, k=3, stride=1, pad=1))
        self.bn2 = self._register(BatchNorm("bn2", c2))
        self.conv3 = self._register(Conv("conv3", rng, c2, c_out, k=3, stride=1, pad=1))
        self.conv_layer_count = 3

    def forward_with_activations(self, x):
        if x.data.ndim != 2 or x.shape[1] != self.spec.in_shape[0]:
            raise ShapeMismatch(
                f"generator forward: noise shape {x.shape} != (n, {self.spec.in_shape[0]})")
        training = self.mode == "train"
        n = x.shape[0]
        bh, bw = self.base_hw
        h = ad.reshape(self.proj(x), (n, self.c0, bh, bw))
        h = ad.relu(self.bn1(self.conv1(h), training))
        h = ad.upsample2x(h)
        h = ad.relu(self.bn2(self.conv2(h), training))
        h = ad.upsample2x(h)
        h = self.conv3(h)
        if self.spec.bounded:
            h = ad.scalar_mul(ad.tanh(h), self.spec.out_scale)
        flat = ad.reshape(h, (n, int(np.prod(self.spec.out_shape))))
        return h, ActivationSet(blocks=[], penultimate=flat)


def build_classifier(spec, seed):
    """Build an mlp or convnet classifier with He-uniform parameters."""
    if spec.kind == "mlp":
        if not spec.hidden or spec.classes < 2 or len(spec.in_shape) != 1:
            raise ConfigError(f"mlp spec needs hidden widths, classes >= 2 and a flat input, got {spec}")
        if any(w <= 0 for w in spec.hidden):
            raise ConfigError(f"mlp hidden widths must be positive, got {spec.hidden}")
        return MlpNet(spec, seed)
    if spec.kind == "convnet":
        if len(spec.in_shape) != 3 or spec.classes < 2:
            raise ConfigError(f"convnet spec needs (c,h,w) input and classes >= 2, got {spec}")
        if spec.base_channels <= 0 or spec.depth_mult <= 0 or spec.width_mult <= 0:
            raise ConfigError(f"convnet extents must be positive, got {spec}")
        return ConvNet(spec, seed)
    raise ConfigError(f"build_classifier: kind must be mlp or convnet, got '{spec.kind}'")


def build_generator(z_dim, output_shape, seed, gen_channels=(64, 64),
                    bounded=True, out_scale=1.0):
    """Build the three-conv pseudo-data generator for batch x z_dim noise."""
    if z_dim <= 0:
        raise ConfigError(f"generator z_dim must be positive, got {z_dim}")
    if len(output_shape) != 3:
        raise ConfigError(f"generator output_shape must be (c,h,w), got {output_shape}")
    spec = NetSpec(kind="generator", in_shape=(z_dim,), out_shape=tuple(output_shape),
                   gen_channels=tuple(gen_channels), bounded=bounded, out_scale=out_scale)
    return GeneratorNet(spec, seed)


def build_network(spec, seed):
    """Dispatch on spec.kind; the single entry point used by checkpoints."""
    if spec.kind == "generator":
        return build_generator(spec.in_shape[0], spec.out_shape, seed,
                               gen_channels=spec.gen_channels,
                               bounded=spec.bounded, out_scale=spec.out_scale)
    return build_classifier(spec, seed)


def parse_netspec(text):
    """Inverse of NetSpec.canonical()."""
    import ast
    fields = {}
    try:
        for part in text.split(";"):
            key, _, value = part.partition("=")
            fields[key] = ast.literal_eval(value)
        return NetSpec(**fields)
    except (ValueError, SyntaxError, TypeError) as exc:
        raise ConfigError(f"parse_netspec: cannot parse '{text}': {exc}") from None


def forward_with_activations(net, batch):
    return net.forward_with_activations(batch)
