"""Inverse models: least squares, MLP, and 1D residual networks.

Three approximations of the map from a measured photovoltage curve u to the
doping profile C on the same grid:

* LinearModel        C-hat = A u, fitted by truncated-SVD least squares.
* MLP                resample(n -> L2), five dense transitions L2..L7 with
                     ReLU between them (none after the last), then
                     resample(L7 -> n).
* ResNet             resample(n -> power-of-two base), a convolutional gate
                     (conv + batchnorm + ReLU), a stack of residual blocks
                     (conv-bn-relu-conv-bn plus a shortcut), then a dense
                     decoder flattened back through resample(base -> n).

Configuration spaces match the published search spaces exactly: the MLP grid
has 71,118 admissible size tuples and the ResNet space factors into 48 gate,
9 encoder, and 18 decoder choices (7,776 total).  Network inputs and outputs
are affinely standardized with four scalar constants stored on the model, so
checkpoints are self-contained.
"""

from __future__ import annotations

import functools
import itertools
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .kernels import ParamStore, Tape, Tensor

__all__ = [
    "InvalidConfig", "DegenerateData", "LinearModel", "ls_fit",
    "MLPConfig", "mlp_config_count", "mlp_config_sample",
    "ResNetConfig", "resnet_configs", "resnet_config_count",
    "resnet_config_sample", "resample_base",
    "MLPModel", "ResNetModel", "build_mlp", "build_resnet",
    "param_count", "infer", "save_model", "load_model",
]


class InvalidConfig(ValueError):
    """A model configuration that cannot be built."""


class DegenerateData(ValueError):
    """Training data unusable for fitting (e.g. all-zero signal matrix)."""


# ---------------------------------------------------------------------------
# least squares


@dataclass(frozen=True, slots=True, eq=False)
class LinearModel:
    """The linear inverse map C-hat = A u on the probe grid."""

    matrix: np.ndarray

    def __post_init__(self) -> None:
        a = np.asarray(self.matrix, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("matrix must be square")
        if not np.all(np.isfinite(a)):
            raise ValueError("matrix must be finite")
        object.__setattr__(self, "matrix", a)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


def ls_fit(u_matrix: np.ndarray, c_matrix: np.ndarray,
           svd_threshold: float = 1e-10) -> LinearModel:
    """Fit A = argmin |A U - C|_F, minimum-norm among minimizers.

    Solves the normal form A = C U^T pinv(U U^T), with the pseudoinverse
    truncating singular values below svd_threshold * sigma_max.  Columns of
    the n x N inputs are records.
    """
    u = np.asarray(u_matrix, dtype=np.float64)
    c = np.asarray(c_matrix, dtype=np.float64)
    if u.ndim != 2 or u.shape != c.shape or u.shape[1] < 1:
        raise ValueError("signal and doping matrices must match, N >= 1")
    if not np.any(u):
        raise DegenerateData("signal matrix is identically zero")
    gram = u @ u.T
    a = c @ u.T @ np.linalg.pinv(gram, rcond=svd_threshold, hermitian=True)
    return LinearModel(matrix=a)


# ---------------------------------------------------------------------------
# configuration spaces

MLP_WIDTH_GRID = tuple(100 + 50 * i for i in range(9))
MLP_WIDTH_DELTAS = (0, 50, -50, 100, -100, -200)

GATE_KERNELS = (3, 5, 7, 9)
GATE_CHANNELS = (8, 16, 24, 32)
GATE_STRIDES = (1, 2, 4)
BLOCK_TYPES = ("basic", "fixed_channel")
BLOCK_COUNTS = (1, 2, 3)
DECODER_SINGLE = (100, 150, 200)
DECODER_FIRST = (100, 150, 200, 250, 300)
DECODER_SECOND = (100, 150, 200)


@dataclass(frozen=True, slots=True)
class MLPConfig:
    """Six dense layer widths L2..L7 (positive integers).

    The tuning space constrains L2 and L7 to the 100..500 grid and each of
    L3..L6 to differ from its predecessor by one of MLP_WIDTH_DELTAS;
    build_mlp itself accepts any positive widths.
    """

    sizes: tuple[int, ...]

    def __post_init__(self) -> None:
        sizes = tuple(int(s) for s in self.sizes)
        if len(sizes) != 6 or any(s <= 0 for s in sizes):
            raise InvalidConfig("an MLP needs six positive layer sizes")
        object.__setattr__(self, "sizes", sizes)


@functools.lru_cache(maxsize=1)
def mlp_config_count() -> int:
    """Exact size of the constrained MLP space (enumerated once)."""
    count = 0
    for l2 in MLP_WIDTH_GRID:
        widths = [l2]
        for _ in range(4):
            widths = [w + d for w in widths for d in MLP_WIDTH_DELTAS
                      if w + d > 0]
        count += len(widths) * len(MLP_WIDTH_GRID)
    return count


def mlp_config_sample(rng: np.random.Generator) -> MLPConfig:
    """Uniform draw from the admissible MLP space (rejection on positivity)."""
    while True:
        l2 = MLP_WIDTH_GRID[rng.integers(len(MLP_WIDTH_GRID))]
        sizes = [l2]
        ok = True
        for _ in range(4):
            nxt = sizes[-1] + MLP_WIDTH_DELTAS[
                rng.integers(len(MLP_WIDTH_DELTAS))]
            if nxt <= 0:
                ok = False
                break
            sizes.append(nxt)
        if not ok:
            continue
        sizes.append(MLP_WIDTH_GRID[rng.integers(len(MLP_WIDTH_GRID))])
        return MLPConfig(sizes=tuple(sizes))


@dataclass(frozen=True, slots=True)
class ResNetConfig:
    """Gate, encoder and decoder choices of a 1D residual network.

    gate_kernel/gate_channels/gate_stride  gate convolution shape
    block_type        "basic" (downsampling doubles channels) or
                      "fixed_channel" (depthwise shortcut, channels kept)
    block_count       residual blocks in the encoder (all of one type)
    downsample        halve the length in every block; forced true for
                      fixed_channel, all-true or all-false for basic
    decoder           one or two hidden layer widths of the decoder MLP
    """

    gate_kernel: int
    gate_channels: int
    gate_stride: int
    block_type: str
    block_count: int
    downsample: bool
    decoder: tuple[int, ...]

    def __post_init__(self) -> None:
        if (self.gate_kernel <= 0 or self.gate_kernel % 2 == 0
                or self.gate_channels <= 0 or self.gate_stride <= 0):
            raise InvalidConfig("gate needs an odd kernel, positive "
                                "channels and stride")
        if self.block_type not in BLOCK_TYPES:
            raise InvalidConfig(f"block_type must be one of {BLOCK_TYPES}")
        if self.block_count < 1:
            raise InvalidConfig("block_count must be positive")
        if self.block_type == "fixed_channel" and not self.downsample:
            raise InvalidConfig("fixed_channel blocks always downsample")
        decoder = tuple(int(d) for d in self.decoder)
        if not 1 <= len(decoder) <= 2 or any(d <= 0 for d in decoder):
            raise InvalidConfig("decoder takes one or two positive widths")
        object.__setattr__(self, "decoder", decoder)


@functools.lru_cache(maxsize=1)
def resnet_configs() -> tuple[ResNetConfig, ...]:
    """The full configuration space in a fixed deterministic order."""
    decoders = [(d,) for d in DECODER_SINGLE]
    decoders += [(a, b) for a in DECODER_FIRST for b in DECODER_SECOND]
    encoders = [("basic", count, down) for count in BLOCK_COUNTS
                for down in (True, False)]
    encoders += [("fixed_channel", count, True) for count in BLOCK_COUNTS]
    out = []
    for kernel, channels, stride in itertools.product(
            GATE_KERNELS, GATE_CHANNELS, GATE_STRIDES):
        for block_type, count, down in encoders:
            for decoder in decoders:
                out.append(ResNetConfig(
                    gate_kernel=kernel, gate_channels=channels,
                    gate_stride=stride, block_type=block_type,
                    block_count=count, downsample=down, decoder=decoder))
    return tuple(out)


def resnet_config_count() -> tuple[int, int, int, int]:
    """(gate, encoder, decoder, total) sizes of the ResNet space."""
    gate = len(GATE_KERNELS) * len(GATE_CHANNELS) * len(GATE_STRIDES)
    encoder = 2 * len(BLOCK_COUNTS) + len(BLOCK_COUNTS)
    decoder = len(DECODER_SINGLE) + len(DECODER_FIRST) * len(DECODER_SECOND)
    return gate, encoder, decoder, gate * encoder * decoder


def resnet_config_sample(rng: np.random.Generator) -> ResNetConfig:
    """Uniform draw from the enumerated ResNet space."""
    space = resnet_configs()
    return space[rng.integers(len(space))]


def resample_base(n: int) -> int:
    """Length of the network-facing resample: the largest power of two
    that fits the grid, capped at 256 (the full-scale value)."""
    if n < 2:
        raise InvalidConfig("model input length must be at least 2")
    return min(256, 1 << (int(n).bit_length() - 1))


# ---------------------------------------------------------------------------
# network models


IDENTITY_STANDARDIZATION = np.array([0.0, 1.0, 0.0, 1.0])


class MLPModel:
    """Dense network between two resampling layers.

    Forward maps standardized signals to standardized dopings; infer()
    wraps it with the stored standardization constants
    (u_mean, u_std, c_mean, c_std).
    """

    kind = "mlp"

    def __init__(self, config: MLPConfig, n: int,
                 rng: np.random.Generator | None = None) -> None:
        if n < 2:
            raise InvalidConfig("model input length must be at least 2")
        rng = rng or np.random.default_rng(0)
        self.config = config
        self.n = int(n)
        self.standardization = IDENTITY_STANDARDIZATION.copy()
        self.store = ParamStore()
        self._layers: list[tuple[Tensor, Tensor]] = []
        sizes = config.sizes
        for i in range(5):
            fan_in, fan_out = sizes[i], sizes[i + 1]
            w = self.store.tensor(f"layer{i + 1}.weight",
                                  K.uniform_init(rng, (fan_out, fan_in),
                                                 fan_in))
            b = self.store.tensor(f"layer{i + 1}.bias",
                                  K.uniform_init(rng, (fan_out,), fan_in))
            self._layers.append((w, b))

    def forward(self, x: np.ndarray, mode: str = "eval",
                tape: Tape | None = None) -> Tensor:
        """Standardized (B, n) batch -> standardized (B, n) prediction."""
        del mode  # no layers with distinct train behaviour
        t = K.resample_linear(Tensor(x), self.config.sizes[0], tape)
        for i, (w, b) in enumerate(self._layers):
            t = K.affine(t, w, b, tape)
            if i < len(self._layers) - 1:
                t = K.relu(t, tape)
        return K.resample_linear(t, self.n, tape)


class ResNetModel:
    """Convolutional gate, residual encoder, dense decoder.

    All convolution/normalization hyperparameters follow the published
    architecture: block convolutions have kernel 3, padding 1 and no bias;
    downsampling raises the first convolution's stride to 2 and routes the
    shortcut through a strided convolution plus normalization (1-wide for
    basic blocks, which double the channels; 2-wide depthwise for
    fixed-channel blocks).  The residual sum is not re-activated.
    """

    kind = "resnet"

    def __init__(self, config: ResNetConfig, n: int,
                 rng: np.random.Generator | None = None,
                 base: int | None = None) -> None:
        if n < 2:
            raise InvalidConfig("model input length must be at least 2")
        rng = rng or np.random.default_rng(0)
        self.config = config
        self.n = int(n)
        self.base = int(base) if base is not None else resample_base(n)
        self.standardization = IDENTITY_STANDARDIZATION.copy()
        store = ParamStore()
        self.store = store

        def conv_params(name, c_out, c_in_g, kern, bias):
            fan_in = c_in_g * kern
            w = store.tensor(f"{name}.weight",
                             K.uniform_init(rng, (c_out, c_in_g, kern),
                                            fan_in))
            b = (store.tensor(f"{name}.bias",
                              K.uniform_init(rng, (c_out,), fan_in))
                 if bias else None)
            return w, b

        def bn_params(name, channels):
            gamma = store.tensor(f"{name}.gamma", np.ones(channels))
            beta = store.tensor(f"{name}.beta", np.zeros(channels))
            return gamma, beta, store.running_stats(name, channels)

        cfg = config
        length = self.base
        self._gate_conv = conv_params("gate.conv", cfg.gate_channels, 1,
                                      cfg.gate_kernel, bias=True)
        self._gate_bn = bn_params("gate.bn", cfg.gate_channels)
        length = K.conv1d_output_length(length, cfg.gate_kernel,
                                        cfg.gate_stride, cfg.gate_kernel // 2)
        if length < 1:
            raise InvalidConfig("gate stride collapses the signal")

        self._blocks = []
        channels = cfg.gate_channels
        for i in range(cfg.block_count):
            name = f"block{i + 1}"
            stride = 2 if cfg.downsample else 1
            c_out = channels
            if cfg.downsample and cfg.block_type == "basic":
                c_out = 2 * channels
            conv1 = conv_params(f"{name}.conv1", c_out, channels, 3,
                                bias=False)[0]
            bn1 = bn_params(f"{name}.bn1", c_out)
            conv2 = conv_params(f"{name}.conv2", c_out, c_out, 3,
                                bias=False)[0]
            bn2 = bn_params(f"{name}.bn2", c_out)
            out_length = K.conv1d_output_length(length, 3, stride, 1)
            shortcut = None
            if cfg.downsample:
                if cfg.block_type == "basic":
                    sc_conv = conv_params(f"{name}.shortcut.conv", c_out,
                                          channels, 1, bias=False)[0]
                    sc_groups, sc_kernel = 1, 1
                else:
                    sc_conv = conv_params(f"{name}.shortcut.conv", c_out,
                                          1, 2, bias=False)[0]
                    sc_groups, sc_kernel = channels, 2
                sc_len = K.conv1d_output_length(length, sc_kernel, 2, 0)
                if sc_len != out_length or out_length < 1:
                    raise InvalidConfig(
                        f"downsampling collapses the signal at {name} "
                        f"(length {length})")
                shortcut = (sc_conv, bn_params(f"{name}.shortcut.bn", c_out),
                            sc_kernel, sc_groups)
            self._blocks.append((conv1, bn1, conv2, bn2, stride, shortcut))
            channels = c_out
            length = out_length

        self._decoder = []
        width = channels * length
        for j, hidden in enumerate(cfg.decoder):
            w = store.tensor(f"decoder{j + 1}.weight",
                             K.uniform_init(rng, (hidden, width), width))
            b = store.tensor(f"decoder{j + 1}.bias",
                             K.uniform_init(rng, (hidden,), width))
            self._decoder.append((w, b))
            width = hidden
        w = store.tensor("decoder_out.weight",
                         K.uniform_init(rng, (self.base, width), width))
        b = store.tensor("decoder_out.bias",
                         K.uniform_init(rng, (self.base,), width))
        self._decoder.append((w, b))
        self._flat_width = channels * length

    def forward(self, x: np.ndarray, mode: str = "eval",
                tape: Tape | None = None) -> Tensor:
        """Standardized (B, n) batch -> standardized (B, n) prediction."""
        cfg = self.config
        batch = np.asarray(x).shape[0]
        t = K.resample_linear(Tensor(x), self.base, tape)
        t = K.reshape(t, (batch, 1, self.base), tape)
        gw, gb = self._gate_conv
        t = K.conv1d(t, gw, gb, stride=cfg.gate_stride,
                     padding=cfg.gate_kernel // 2, tape=tape)
        gamma, beta, stats = self._gate_bn
        t = K.batchnorm1d(t, gamma, beta, stats, mode=mode, tape=tape)
        t = K.relu(t, tape)

        for conv1, bn1, conv2, bn2, stride, shortcut in self._blocks:
            y = K.conv1d(t, conv1, stride=stride, padding=1, tape=tape)
            y = K.batchnorm1d(y, bn1[0], bn1[1], bn1[2], mode=mode,
                              tape=tape)
            y = K.relu(y, tape)
            y = K.conv1d(y, conv2, stride=1, padding=1, tape=tape)
            y = K.batchnorm1d(y, bn2[0], bn2[1], bn2[2], mode=mode,
                              tape=tape)
            if shortcut is None:
                s = t
            else:
                sc_conv, sc_bn, sc_kernel, sc_groups = shortcut
                s = K.conv1d(t, sc_conv, stride=2, groups=sc_groups,
                             tape=tape)
                s = K.batchnorm1d(s, sc_bn[0], sc_bn[1], sc_bn[2],
                                  mode=mode, tape=tape)
            t = K.add(y, s, tape)

        t = K.reshape(t, (batch, self._flat_width), tape)
        for j, (w, b) in enumerate(self._decoder):
            t = K.affine(t, w, b, tape)
            if j < len(self._decoder) - 1:
                t = K.relu(t, tape)
        return K.resample_linear(t, self.n, tape)


def build_mlp(config, n: int,
              rng: np.random.Generator | None = None) -> MLPModel:
    """Build an MLP model for signals of length n."""
    if not isinstance(config, MLPConfig):
        config = MLPConfig(sizes=tuple(config))
    return MLPModel(config, n, rng)


def build_resnet(config: ResNetConfig, n: int,
                 rng: np.random.Generator | None = None,
                 base: int | None = None) -> ResNetModel:
    """Build a ResNet model for signals of length n."""
    return ResNetModel(config, n, rng, base=base)


def param_count(model) -> int:
    """Trainable scalars of a model (running statistics excluded)."""
    if isinstance(model, LinearModel):
        return int(model.matrix.size)
    return model.store.n_parameters


def infer(model, u: np.ndarray) -> np.ndarray:
    """Predict doping from signal: a length-n vector or an (n, N) matrix.

    Columns of a matrix input are records, matching the dataset layout.
    Network models run in eval mode with their stored standardization
    constants; the linear model multiplies directly.
    """
    arr = np.asarray(u, dtype=np.float64)
    if isinstance(model, LinearModel):
        if arr.shape[0] != model.n:
            raise K.ShapeMismatch(
                f"expected length {model.n}, got {arr.shape[0]}")
        return model.matrix @ arr
    if arr.ndim not in (1, 2) or arr.shape[-1 if arr.ndim == 1 else 0] != \
            model.n:
        raise K.ShapeMismatch(f"expected length {model.n} records")
    single = arr.ndim == 1
    batch = arr[None, :] if single else arr.T
    u_mean, u_std, c_mean, c_std = model.standardization
    out = model.forward((batch - u_mean) / u_std, mode="eval").values
    out = out * c_std + c_mean
    return out[0] if single else out.T


# ---------------------------------------------------------------------------
# checkpoints

_MODEL_MAGIC = b"DPMD"
_MODEL_VERSION = 1
_KIND_CODES = {"ls": 0, "mlp": 1, "resnet": 2}
_KIND_NAMES = {code: name for name, code in _KIND_CODES.items()}


def _flat_parameters(store: ParamStore) -> np.ndarray:
    if not store.params:
        return np.zeros(0)
    return np.concatenate([t.values.ravel() for t in store.params.values()])


def _load_parameters(store: ParamStore, flat: np.ndarray) -> None:
    offset = 0
    for t in store.params.values():
        t.values[...] = flat[offset:offset + t.size].reshape(t.shape)
        offset += t.size


def save_model(model, path) -> None:
    """Write a DPMD version-1 checkpoint.

    Little-endian layout: magic "DPMD", u8 version, u8 kind (0 ls / 1 mlp /
    2 resnet), a kind-specific configuration block, the four
    standardization constants as f64, u32 parameter count, then the
    parameters as f64 in the fixed registry order.
    """
    out = bytearray()
    out += _MODEL_MAGIC
    kind = "ls" if isinstance(model, LinearModel) else model.kind
    out += struct.pack("<BB", _MODEL_VERSION, _KIND_CODES[kind])
    if kind == "ls":
        out += struct.pack("<I", model.n)
        standardization = IDENTITY_STANDARDIZATION
        flat = model.matrix.ravel()
    elif kind == "mlp":
        out += struct.pack("<I", model.n)
        out += struct.pack("<B", len(model.config.sizes))
        out += struct.pack(f"<{len(model.config.sizes)}I",
                           *model.config.sizes)
        standardization = model.standardization
        flat = _flat_parameters(model.store)
    else:
        cfg = model.config
        out += struct.pack("<II", model.n, model.base)
        out += struct.pack("<BBBBBB", cfg.gate_kernel, cfg.gate_channels,
                           cfg.gate_stride,
                           BLOCK_TYPES.index(cfg.block_type),
                           cfg.block_count, int(cfg.downsample))
        out += struct.pack("<B", len(cfg.decoder))
        out += struct.pack(f"<{len(cfg.decoder)}I", *cfg.decoder)
        standardization = model.standardization
        flat = _flat_parameters(model.store)
    out += np.asarray(standardization, dtype="<f8").tobytes()
    out += struct.pack("<I", flat.size)
    out += np.ascontiguousarray(flat, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(out)


def load_model(path):
    """Read a DPMD version-1 checkpoint back into a model."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 6 or raw[:4] != _MODEL_MAGIC:
        raise ValueError("not a DPMD model file")
    version, kind_code = raw[4], raw[5]
    if version != _MODEL_VERSION:
        raise ValueError(f"unsupported model version {version}")
    if kind_code not in _KIND_NAMES:
        raise ValueError(f"unknown model kind code {kind_code}")
    kind = _KIND_NAMES[kind_code]
    off = 6
    if kind == "ls":
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        model = None
    elif kind == "mlp":
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        count = raw[off]
        off += 1
        sizes = struct.unpack_from(f"<{count}I", raw, off)
        off += 4 * count
        model = build_mlp(MLPConfig(sizes=sizes), n)
    else:
        n, base = struct.unpack_from("<II", raw, off)
        off += 8
        kernel, channels, stride, type_code, blocks, down = \
            struct.unpack_from("<BBBBBB", raw, off)
        off += 6
        dec_count = raw[off]
        off += 1
        decoder = struct.unpack_from(f"<{dec_count}I", raw, off)
        off += 4 * dec_count
        config = ResNetConfig(
            gate_kernel=kernel, gate_channels=channels, gate_stride=stride,
            block_type=BLOCK_TYPES[type_code], block_count=blocks,
            downsample=bool(down), decoder=decoder)
        model = build_resnet(config, n, base=base)

    standardization = np.frombuffer(raw, "<f8", 4, off).copy()
    off += 32
    (flat_size,) = struct.unpack_from("<I", raw, off)
    off += 4
    if off + 8 * flat_size != len(raw):
        raise ValueError("model file has the wrong parameter payload size")
    flat = np.frombuffer(raw, "<f8", flat_size, off).copy()

    if kind == "ls":
        if flat_size != n * n:
            raise ValueError("linear model payload does not match its size")
        return LinearModel(matrix=flat.reshape(n, n))
    if flat_size != model.store.n_parameters:
        raise ValueError("model file parameter count does not match the "
                         "architecture")
    _load_parameters(model.store, flat)
    model.standardization = standardization
    return model
