"""Tree-3 and LeNet-5: configurations, parameters, initialization, forward passes.

Tree-3 layout for one image with ``C`` channels:

* grouped 5x5 conv, ``K`` filters per channel, shared by all branches
* activation, then 2x2 max-pool -> ``C*K`` maps of ``P x P``
* tree sampling: branch ``b`` sums its private weights over the ``K`` maps of a
  channel and over a band of ``rect_rows`` consecutive rows, giving ``R`` hidden
  units per channel and branch
* activation, then a bias-free fully connected layer to the outputs

The ten-tree variant is stored as one Tree-3 with ``10*M`` branches whose output
layer is block diagonal: tree ``t`` owns branches ``t*M .. (t+1)*M - 1`` and
drives logit ``t`` only.
"""

import enum
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import tensor_core as tc
from .exceptions import ConfigMismatchError, ShapeError
from .tensor_core import Activation


class Geometry(str, enum.Enum):
    CIFAR = "cifar"
    MNIST = "mnist"

    @property
    def channels(self):
        return 3 if self is Geometry.CIFAR else 1

    @property
    def size(self):
        return 32 if self is Geometry.CIFAR else 28

    @property
    def conv_size(self):
        return self.size - tc.KERNEL + 1

    @property
    def pool_size(self):
        return self.conv_size // 2

    @property
    def rect_rows(self):
        return 2 if self is Geometry.CIFAR else 4

    @property
    def rects(self):
        return self.pool_size // self.rect_rows

    @property
    def image_shape(self):
        return (self.channels, self.size, self.size)


class ParamSet:
    """Mixin for dataclasses whose fields are all weight arrays."""

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def names(self):
        return [f.name for f in fields(self)]

    def arrays(self):
        return [getattr(self, f.name) for f in fields(self)]

    def copy(self):
        return type(self)(*(a.copy() for a in self.arrays()))

    def astype(self, dtype):
        return type(self)(*(a.astype(dtype) for a in self.arrays()))

    def zeros_like(self):
        return type(self)(*(np.zeros_like(a) for a in self.arrays()))

    @property
    def dtype(self):
        return self.arrays()[0].dtype

    @property
    def size(self):
        return sum(a.size for a in self.arrays())

    def equal(self, other):
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))


@dataclass(frozen=True)
class Tree3Config:
    K: int = 6
    M: int = 16
    activation: Activation = Activation.RELU
    geometry: Geometry = Geometry.CIFAR
    outputs: int = 10
    trees: int = 1

    def __post_init__(self):
        object.__setattr__(self, "activation", Activation.parse(self.activation))
        object.__setattr__(self, "geometry", Geometry(self.geometry))
        for name in ("K", "M", "outputs", "trees"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.trees > 1 and self.outputs != self.trees:
            raise ValueError("a multi-tree model has exactly one output per tree")

    @property
    def branches(self):
        return self.M * self.trees

    @property
    def channels(self):
        return self.geometry.channels

    @property
    def hidden(self):
        """Length of the flattened tree layer."""
        return self.branches * self.channels * self.geometry.rects

    @property
    def bias(self):
        return False

    def shapes(self):
        g = self.geometry
        return {
            "w_conv": (g.channels, self.K, tc.KERNEL, tc.KERNEL),
            "w_tree": (self.branches, g.channels, self.K, g.pool_size, g.pool_size),
            "w_fc": (self.hidden, self.outputs),
        }

    def fc_mask(self):
        """Block-diagonal mask of the output layer (all ones for a single tree)."""
        if self.trees == 1:
            return None
        per_tree = self.M * self.channels * self.geometry.rects
        return np.kron(np.eye(self.trees), np.ones((per_tree, 1)))

    def to_dict(self):
        return {"arch": "tree3", "K": self.K, "M": self.M, "activation": self.activation.value,
                "geometry": self.geometry.value, "outputs": self.outputs, "trees": self.trees,
                "bias": False}


@dataclass(frozen=True)
class LeNet5Config:
    conv1: int = 6
    conv2: int = 16
    fc1: int = 120
    fc2: int = 84
    activation: Activation = Activation.RELU
    bias: bool = True
    geometry: Geometry = Geometry.CIFAR
    outputs: int = 10

    def __post_init__(self):
        object.__setattr__(self, "activation", Activation.parse(self.activation))
        object.__setattr__(self, "geometry", Geometry(self.geometry))

    @property
    def flat(self):
        side = ((self.geometry.size - 4) // 2 - 4) // 2
        return self.conv2 * side * side

    def shapes(self):
        c = self.geometry.channels
        return {
            "conv1_w": (self.conv1, c, 5, 5), "conv1_b": (self.conv1,),
            "conv2_w": (self.conv2, self.conv1, 5, 5), "conv2_b": (self.conv2,),
            "fc1_w": (self.flat, self.fc1), "fc1_b": (self.fc1,),
            "fc2_w": (self.fc1, self.fc2), "fc2_b": (self.fc2,),
            "fc3_w": (self.fc2, self.outputs), "fc3_b": (self.outputs,),
        }

    def to_dict(self):
        return {"arch": "lenet5", "conv1": self.conv1, "conv2": self.conv2, "fc1": self.fc1,
                "fc2": self.fc2, "activation": self.activation.value, "bias": self.bias,
                "geometry": self.geometry.value, "outputs": self.outputs}


def config_from_dict(d):
    d = dict(d)
    arch = d.pop("arch")
    if arch == "tree3":
        d.pop("bias", None)
        return Tree3Config(**d)
    if arch == "lenet5":
        return LeNet5Config(**d)
    raise ValueError(f"unknown architecture {arch!r}")


@dataclass
class Tree3Params(ParamSet):
    w_conv: np.ndarray
    w_tree: np.ndarray
    w_fc: np.ndarray


@dataclass
class LeNet5Params(ParamSet):
    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    fc1_w: np.ndarray
    fc1_b: np.ndarray
    fc2_w: np.ndarray
    fc2_b: np.ndarray
    fc3_w: np.ndarray
    fc3_b: np.ndarray


@dataclass
class ForwardTrace:
    x: np.ndarray
    conv_pre: np.ndarray
    pool: tc.PoolTrace
    tree_pre: np.ndarray  # (N, branches, C, R)
    tree_out: np.ndarray
    logits: np.ndarray


@dataclass
class LeNet5Trace:
    x: np.ndarray
    conv1_pre: np.ndarray
    pool1: tc.PoolTrace
    conv2_pre: np.ndarray
    pool2: tc.PoolTrace
    fc1_pre: np.ndarray
    fc2_pre: np.ndarray
    logits: np.ndarray
    activations: dict = field(default_factory=dict)


# Independent RNG streams derived from one master seed.
STREAM_INIT, STREAM_SHUFFLE, STREAM_AUGMENT, STREAM_SPLIT = 0, 1, 2, 3


def rng_for(seed, stream, *keys):
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream, *map(int, keys)]))


def _std(fan_in, fan_out, init):
    if init == "he":
        return np.sqrt(2.0 / fan_in)
    if init == "glorot":
        return np.sqrt(2.0 / (fan_in + fan_out))
    raise ValueError(f"unknown init {init!r}; expected 'he' or 'glorot'")


def init_tree3(config, seed=0, dtype=np.float32, init="he", output_scale=0.1):
    """Zero-mean Gaussian weights with std ``sqrt(2 / fan_in)``.

    ``output_scale`` multiplies the output-layer std so a fresh model starts at
    chance-level loss; pass 1.0 for plain He initialization everywhere.
    """
    g = config.geometry
    rng = rng_for(seed, STREAM_INIT)
    shapes = config.shapes()
    rect = g.rect_rows * g.pool_size
    per_tree_hidden = config.M * g.channels * g.rects
    stds = {
        "w_conv": _std(tc.TAPS, config.K * tc.TAPS, init),
        "w_tree": _std(rect * config.K, 1, init),
        "w_fc": _std(per_tree_hidden, config.outputs // config.trees, init) * output_scale,
    }
    arrays = {name: rng.normal(0.0, stds[name], shapes[name]).astype(dtype) for name in shapes}
    mask = config.fc_mask()
    if mask is not None:
        arrays["w_fc"] *= mask.astype(dtype)
    return Tree3Params(**arrays)


def init_lenet5(config, seed=0, dtype=np.float32, init="he", output_scale=0.1):
    rng = rng_for(seed, STREAM_INIT)
    out = {}
    for name, shape in config.shapes().items():
        if name.endswith("_b"):
            out[name] = np.zeros(shape, dtype=dtype)
            continue
        if len(shape) == 4:
            fan_in, fan_out = shape[1] * tc.TAPS, shape[0] * tc.TAPS
        else:
            fan_in, fan_out = shape
        std = _std(fan_in, fan_out, init) * (output_scale if name == "fc3_w" else 1.0)
        out[name] = rng.normal(0.0, std, shape).astype(dtype)
    return LeNet5Params(**out)


def check_params(params, config):
    for name, shape in config.shapes().items():
        got = getattr(params, name).shape
        if got != shape:
            raise ConfigMismatchError(f"parameter {name} has shape {got}, config expects {shape}")


def _check_image(x, geometry):
    xb, single = tc._batched(x, "image")
    if xb.shape[1:] != geometry.image_shape:
        raise ShapeError(
            f"image shape {xb.shape[1:]} does not match {geometry.value} geometry "
            f"{geometry.image_shape}", "image")
    return xb, single


def tree_sampling(pool, w_tree, geometry):
    """Per-branch weighted band sums: (N, C*K, P, P) -> (N, branches, C, R)."""
    g = geometry
    n = pool.shape[0]
    nb, c, k, p, _ = w_tree.shape
    r, rh = g.rects, g.rect_rows
    feat = k * rh * p
    out = np.empty((n, nb, c, r), dtype=np.result_type(pool, w_tree))
    pool6 = pool.reshape(n, c, k, r, rh, p)
    w6 = w_tree.reshape(nb, c, k, r, rh, p)
    for ch in range(c):
        a = pool6[:, ch].transpose(2, 0, 1, 3, 4).reshape(r, n, feat)
        b = w6[:, ch].transpose(2, 1, 3, 4, 0).reshape(r, feat, nb)
        out[:, :, ch, :] = np.matmul(a, b).transpose(1, 2, 0)
    return out


def tree3_forward(params, config, img):
    """Forward pass; returns a :class:`ForwardTrace` (batched when ``img`` is)."""
    check_params(params, config)
    xb, single = _check_image(img, config.geometry)
    act = config.activation
    conv_pre = tc.conv2d_grouped(xb, params.w_conv, groups=config.channels)
    pool = tc.maxpool2x2(act(conv_pre))
    tree_pre = tree_sampling(pool.output, params.w_tree, config.geometry)
    tree_out = act(tree_pre)
    logits = tc.dense_forward(tree_out.reshape(xb.shape[0], -1), params.w_fc)
    trace = ForwardTrace(xb, conv_pre, pool, tree_pre, tree_out, logits)
    if single:
        trace.logits = logits[0]
    return trace


def tree3_mnist_forward(params, config, img):
    if config.geometry is not Geometry.MNIST:
        raise ConfigMismatchError("tree3_mnist_forward requires the MNIST geometry")
    return tree3_forward(params, config, img)


def ten_tree_config(K=15, M=80, activation=Activation.RELU, geometry=Geometry.CIFAR):
    return Tree3Config(K=K, M=M, activation=activation, geometry=geometry, outputs=10, trees=10)


def stack_ten_tree(shared_conv, branch_params):
    """Fold ten single-output Tree-3 parameter sets into one ten-tree parameter set."""
    branch_params = list(branch_params)
    if len(branch_params) != 10:
        raise ValueError(f"ten-tree needs exactly 10 parameter sets, got {len(branch_params)}")
    for p in branch_params:
        if p.w_fc.shape[1] != 1:
            raise ShapeError(f"each tree must have one output, got {p.w_fc.shape[1]}", "outputs")
    w_tree = np.concatenate([p.w_tree for p in branch_params], axis=0)
    rows = branch_params[0].w_fc.shape[0]
    w_fc = np.zeros((10 * rows, 10), dtype=branch_params[0].w_fc.dtype)
    for t, p in enumerate(branch_params):
        w_fc[t * rows:(t + 1) * rows, t] = p.w_fc[:, 0]
    return Tree3Params(np.asarray(shared_conv), w_tree, w_fc)


def ten_tree_forward(shared_conv, branch_params, img, activation=Activation.RELU):
    """Logits of ten single-output trees sharing one conv layer."""
    params = stack_ten_tree(shared_conv, branch_params)
    k = params.w_conv.shape[1]
    m = branch_params[0].w_tree.shape[0]
    geometry = Geometry.CIFAR if params.w_conv.shape[0] == 3 else Geometry.MNIST
    config = ten_tree_config(K=k, M=m, activation=activation, geometry=geometry)
    return tree3_forward(params, config, img).logits


def lenet5_forward(params, config, img):
    check_params(params, config)
    xb, single = _check_image(img, config.geometry)
    act = config.activation
    use_bias = config.bias
    b = (lambda v: v) if use_bias else (lambda v: None)
    conv1_pre = tc.conv2d_full(xb, params.conv1_w, b(params.conv1_b))
    pool1 = tc.maxpool2x2(act(conv1_pre))
    conv2_pre = tc.conv2d_full(pool1.output, params.conv2_w, b(params.conv2_b))
    pool2 = tc.maxpool2x2(act(conv2_pre))
    flat = pool2.output.reshape(xb.shape[0], -1)
    fc1_pre = tc.dense_forward(flat, params.fc1_w, b(params.fc1_b))
    h1 = act(fc1_pre)
    fc2_pre = tc.dense_forward(h1, params.fc2_w, b(params.fc2_b))
    h2 = act(fc2_pre)
    logits = tc.dense_forward(h2, params.fc3_w, b(params.fc3_b))
    trace = LeNet5Trace(xb, conv1_pre, pool1, conv2_pre, pool2, fc1_pre, fc2_pre, logits,
                        {"flat": flat, "h1": h1, "h2": h2})
    if single:
        trace.logits = logits[0]
    return trace


def forward(params, config, img):
    if isinstance(config, LeNet5Config):
        return lenet5_forward(params, config, img)
    return tree3_forward(params, config, img)


def init_params(config, seed=0, dtype=np.float32, **kwargs):
    if isinstance(config, LeNet5Config):
        return init_lenet5(config, seed, dtype, **kwargs)
    return init_tree3(config, seed, dtype, **kwargs)


def layer_table(config):
    """Rows ``(type, weight_size, input_size, output_size)``, one per layer."""
    g = config.geometry
    c, k, m = g.channels, config.K, config.branches
    p, r = g.pool_size, g.rects
    return [
        ("Conv2d", (c, k, 5, 5), (c, g.size, g.size), (c * k, g.conv_size, g.conv_size)),
        ("MaxPool2d", (2, 2), (c * k, g.conv_size, g.conv_size), (c * k, p, p)),
        ("Tree Sampling", (c * k, m, p, p), (c * k, p, p), (c * m, r)),
        ("FC", (r * c * m, config.outputs), (c * m, r), (config.outputs,)),
    ]


LENET5_DEFAULT = LeNet5Config()


def count_lenet5_pre_fc_routes(config=LENET5_DEFAULT):
    """Routes from one first-layer hidden unit up to the flattened second pool."""
    routes, rem = divmod(config.conv2 * tc.TAPS, 4)
    assert rem == 0
    return routes


def count_routes(arch, lenet_config=LENET5_DEFAULT):
    """Maximal number of distinct routes from a first-layer weight to one output."""
    arch = str(arch).lower()
    if arch in ("lenet5", "lenet-5"):
        return count_lenet5_pre_fc_routes(lenet_config) * lenet_config.fc1 * lenet_config.fc2
    if arch in ("tree3", "tree-3", "tentree"):
        return 1
    raise ValueError(f"unknown architecture {arch!r}; expected 'lenet5' or 'tree3'")


def count_gradient_instances(arch, K=6, M=16, geometry=Geometry.CIFAR, post_pool=False):
    """Route-level gradient instances of the first (convolutional) layer per example."""
    arch = str(arch).lower()
    g = Geometry(geometry)
    if arch in ("tree3", "tree-3"):
        n = tc.TAPS * g.channels * K * g.conv_size ** 2 * M
        return n // 4 if post_pool else n
    if arch in ("lenet5", "lenet-5"):
        n = tc.TAPS * g.channels * LENET5_DEFAULT.conv1 * g.conv_size ** 2
        return n // 4 if post_pool else n
    raise ValueError(f"unknown architecture {arch!r}; expected 'lenet5' or 'tree3'")


def with_outputs(config, outputs):
    return replace(config, outputs=outputs)
