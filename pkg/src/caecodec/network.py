"""Symmetric convolutional autoencoder and its rate-distortion training loop.

The encoder has three downsampling units, each a stride-2 convolution followed
by a stride-1 convolution, every convolution followed by a PReLU. The decoder
mirrors it with transposed convolutions (stride 1 then stride 2 per unit); its
last layer is linear so reconstructions can approach 0 and 1 from either side.

Training minimises

    J = mean((x - g(f(x) + mu))**2) + lambda * mean(f(x)**2)

with ``mu`` i.i.d. uniform noise standing in for quantisation.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .fsutil import atomic_write
from .errors import CheckpointError, DatasetError, NonFiniteError, ShapeError, TrainingDivergedError

log = logging.getLogger(__name__)

DEFAULT_FILTERS = (32, 32, 64, 64, 64, 32)
ENCODER_STRIDES = (2, 1, 2, 1, 2, 1)
DOWNSAMPLE = 8


@dataclass(frozen=True)
class CaeArchitecture:
    filter_counts: tuple = DEFAULT_FILTERS
    patch_size: int = 128

    def __post_init__(self):
        fc = tuple(int(n) for n in self.filter_counts)
        object.__setattr__(self, "filter_counts", fc)
        if len(fc) != 6 or any(n < 1 for n in fc):
            raise ValueError(f"need six positive filter counts, got {fc}")
        if self.patch_size < DOWNSAMPLE or self.patch_size % DOWNSAMPLE:
            raise ValueError(f"patch_size must be a positive multiple of 8, got {self.patch_size}")

    @property
    def latent_channels(self) -> int:
        return self.filter_counts[-1]

    @property
    def latent_size(self) -> int:
        return self.patch_size // DOWNSAMPLE

    def encoder_channels(self):
        chans = (1,) + self.filter_counts
        return [(chans[i], chans[i + 1], ENCODER_STRIDES[i]) for i in range(6)]

    def decoder_channels(self):
        # decoder layer j mirrors encoder layer 5 - j
        return [(o, i, s) for (i, o, s) in reversed(self.encoder_channels())]


@dataclass
class CaeParams:
    architecture: CaeArchitecture
    encoder_layers: list
    decoder_layers: list

    @classmethod
    def initialize(cls, architecture: CaeArchitecture, seed: int = 0, dtype=np.float64):
        rng = np.random.default_rng(seed)
        enc = [T.ConvLayerParams.initialize(i, o, s, rng, dtype) for i, o, s in architecture.encoder_channels()]
        dec = [T.ConvLayerParams.initialize(i, o, s, rng, dtype) for i, o, s in architecture.decoder_channels()]
        return cls(architecture, enc, dec)

    def named_tensors(self):
        """Yields ``(name, layer, attribute)`` for every learnable tensor, in a fixed order.

        The final decoder layer is linear, so its PReLU slope is not learnable.
        """
        for prefix, layers in (("enc", self.encoder_layers), ("dec", self.decoder_layers)):
            for idx, layer in enumerate(layers):
                for attr in ("kernels", "bias", "prelu_slope"):
                    if prefix == "dec" and idx == len(layers) - 1 and attr == "prelu_slope":
                        continue
                    yield f"{prefix}{idx}.{attr}", layer, attr

    def tensors(self) -> dict:
        return {name: getattr(layer, attr) for name, layer, attr in self.named_tensors()}

    def copy(self) -> "CaeParams":
        def dup(layers):
            return [
                T.ConvLayerParams(l.kernels.copy(), l.bias.copy(), l.prelu_slope.copy(), l.stride)
                for l in layers
            ]

        return CaeParams(self.architecture, dup(self.encoder_layers), dup(self.decoder_layers))

    def astype(self, dtype) -> "CaeParams":
        out = self.copy()
        for _, layer, attr in out.named_tensors():
            setattr(layer, attr, getattr(layer, attr).astype(dtype))
        for layer in out.decoder_layers[-1:]:
            layer.prelu_slope = layer.prelu_slope.astype(dtype)
        return out

    @property
    def dtype(self):
        return self.encoder_layers[0].kernels.dtype

    def model_id(self) -> bytes:
        """8-byte digest of the serialised weights (optimizer state excluded)."""
        return hashlib.sha256(_serialize(self, {})).digest()[:8]


@dataclass
class TrainConfig:
    lam: float = 1.0
    noise_halfwidth: float = 2.0**-10
    batch_size: int = 16
    max_iterations: int = 10_000
    learning_rate: float = 1e-4
    seed: int = 0
    checkpoint_interval: int = 1000

    def __post_init__(self):
        if not self.noise_halfwidth > 0:
            raise ValueError("noise_halfwidth must be > 0")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.batch_size < 1 or self.checkpoint_interval < 1 or self.max_iterations < 0:
            raise ValueError("batch_size and checkpoint_interval must be positive, max_iterations >= 0")


def _check_patch(params: CaeParams, x):
    p = params.architecture.patch_size
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (p, p):
        raise ShapeError(f"expected patches of shape (B, 1, {p}, {p}), got {x.shape}")


def _check_latent(params: CaeParams, y):
    a = params.architecture
    expected = (a.latent_channels, a.latent_size, a.latent_size)
    if y.ndim != 4 or y.shape[1:] != expected:
        raise ShapeError(f"expected latents of shape (B, {expected[0]}, {expected[1]}, {expected[2]}), got {y.shape}")


def _encoder_forward(params, x, keep=False):
    cache = []
    h = x
    for layer in params.encoder_layers:
        pre = T.conv2d(h, layer)
        if keep:
            cache.append((h, pre))
        h = T.prelu(pre, layer.prelu_slope)
    return h, cache


def _decoder_forward(params, y, keep=False):
    cache = []
    h = y
    last = len(params.decoder_layers) - 1
    for idx, layer in enumerate(params.decoder_layers):
        pre = T.transposed_conv2d(h, layer)
        if keep:
            cache.append((h, pre))
        h = pre if idx == last else T.prelu(pre, layer.prelu_slope)
    return h, cache


def encode(params: CaeParams, patch: np.ndarray) -> np.ndarray:
    """Analysis transform: (B, 1, P, P) patches -> (B, N6, P/8, P/8) latents."""
    _check_patch(params, patch)
    return _encoder_forward(params, patch.astype(params.dtype, copy=False))[0]


def decode(params: CaeParams, latent: np.ndarray) -> np.ndarray:
    """Synthesis transform. Output is not clamped."""
    _check_latent(params, latent)
    return _decoder_forward(params, latent.astype(params.dtype, copy=False))[0]


def _encoder_backward(params, cache, grad, grads):
    for idx in reversed(range(len(params.encoder_layers))):
        layer = params.encoder_layers[idx]
        inp, pre = cache[idx]
        grad, grads[f"enc{idx}.prelu_slope"] = T.prelu_backward(pre, layer.prelu_slope, grad)
        grad, grads[f"enc{idx}.kernels"], grads[f"enc{idx}.bias"] = T.conv2d_backward(inp, layer, grad)
    return grad


def _decoder_backward(params, cache, grad, grads):
    last = len(params.decoder_layers) - 1
    for idx in reversed(range(last + 1)):
        layer = params.decoder_layers[idx]
        inp, pre = cache[idx]
        if idx != last:
            grad, grads[f"dec{idx}.prelu_slope"] = T.prelu_backward(pre, layer.prelu_slope, grad)
        grad, grads[f"dec{idx}.kernels"], grads[f"dec{idx}.bias"] = T.transposed_conv2d_backward(inp, layer, grad)
    return grad


@dataclass
class LossResult:
    total: float
    mse: float
    rate: float
    grads: dict = field(repr=False)


def sample_noise(rng: np.random.Generator, shape, halfwidth: float, dtype=np.float64):
    return rng.uniform(-halfwidth, halfwidth, size=shape).astype(dtype, copy=False)


def loss(params: CaeParams, patch: np.ndarray, config: TrainConfig, rng=None, noise=None) -> LossResult:
    """Rate-distortion loss and gradients for every learnable tensor.

    Pass ``noise`` to fix the additive perturbation of the latent; otherwise it
    is drawn from ``rng`` on ``[-noise_halfwidth, noise_halfwidth]``.
    """
    _check_patch(params, patch)
    x = patch.astype(params.dtype, copy=False)
    y, enc_cache = _encoder_forward(params, x, keep=True)
    if noise is None:
        if rng is None:
            raise ValueError("either rng or noise must be given")
        noise = sample_noise(rng, y.shape, config.noise_halfwidth, y.dtype)
    elif noise.shape != y.shape:
        raise ShapeError(f"noise shape {noise.shape} != latent shape {y.shape}")
    x_hat, dec_cache = _decoder_forward(params, y + noise, keep=True)

    residual = x_hat - x
    mse = T.mean_square(residual)
    rate = T.mean_square(y)
    total = mse + config.lam * rate
    if not np.isfinite(total):
        raise NonFiniteError(f"non-finite loss (mse={mse}, rate={rate})")

    grads = {}
    grad_y = _decoder_backward(params, dec_cache, T.mean_square_backward(residual), grads)
    grad_y = grad_y + config.lam * T.mean_square_backward(y)
    _encoder_backward(params, enc_cache, grad_y, grads)
    return LossResult(total, mse, rate, grads)


# --------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"CAEP"
CHECKPOINT_VERSION = 1


def _serialize(params: CaeParams, extra: dict) -> bytes:
    arch = params.architecture
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<B", CHECKPOINT_VERSION))
    buf.write(struct.pack("<B", len(arch.filter_counts)))
    buf.write(struct.pack(f"<{len(arch.filter_counts)}H", *arch.filter_counts))
    buf.write(struct.pack("<H", arch.patch_size))
    items = list(params.tensors().items()) + list(extra.items())
    buf.write(struct.pack("<I", len(items)))
    for name, arr in items:
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


@dataclass
class Checkpoint:
    params: CaeParams
    iteration: int = 0
    optimizer: dict = field(default_factory=dict)


def save_checkpoint(path, params: CaeParams, iteration: int = 0, optimizer: dict | None = None):
    """Write weights (and optionally Adam moments) atomically."""
    extra = {"meta.iteration": np.array([float(iteration)])}
    for name, st in (optimizer or {}).items():
        extra[f"adam.m.{name}"] = st.first_moment
        extra[f"adam.v.{name}"] = st.second_moment
        extra[f"adam.t.{name}"] = np.array([float(st.step_count)])
    atomic_write(path, _serialize(params, extra))


def _parse(data: bytes):
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic, not a CAEP checkpoint")
    (version,) = struct.unpack("<B", take(1))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (nlayers,) = struct.unpack("<B", take(1))
    filters = struct.unpack(f"<{nlayers}H", take(2 * nlayers))
    (patch_size,) = struct.unpack("<H", take(2))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        tensors[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(view):
        raise CheckpointError("trailing bytes after last tensor")
    return CaeArchitecture(tuple(filters), patch_size), tensors


def load_checkpoint(path) -> Checkpoint:
    arch, tensors = _parse(Path(path).read_bytes())
    params = CaeParams.initialize(arch, seed=0)
    for name, layer, attr in params.named_tensors():
        if name not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        arr = tensors[name]
        if arr.shape != getattr(layer, attr).shape:
            raise CheckpointError(f"tensor {name!r} has shape {arr.shape}, expected {getattr(layer, attr).shape}")
        setattr(layer, attr, arr.copy())
    iteration = int(tensors.get("meta.iteration", np.zeros(1))[0])
    optimizer = {}
    for name in params.tensors():
        if f"adam.m.{name}" in tensors:
            optimizer[name] = T.AdamState(
                tensors[f"adam.m.{name}"].copy(),
                tensors[f"adam.v.{name}"].copy(),
                int(tensors[f"adam.t.{name}"][0]),
            )
    return Checkpoint(params, iteration, optimizer)


def load_params(path) -> CaeParams:
    return load_checkpoint(path).params


# --------------------------------------------------------------------------
# training

@dataclass
class HistoryRow:
    iteration: int
    total: float
    mse: float
    rate: float


@dataclass
class TrainResult:
    params: CaeParams
    history: list
    checkpoints: list
    optimizer: dict


def write_history_csv(path, history):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "J", "mse_term", "rate_term"])
    for row in history:
        w.writerow([row.iteration, repr(row.total), repr(row.mse), repr(row.rate)])
    atomic_write(path, buf.getvalue().encode())


def _as_patch_array(dataset):
    arr = np.asarray(getattr(dataset, "patches", dataset))
    if arr.ndim == 3:
        arr = arr[:, None]
    return arr


def train(
    dataset,
    config: TrainConfig,
    architecture: CaeArchitecture | None = None,
    params: CaeParams | None = None,
    resume: Checkpoint | None = None,
    checkpoint_dir=None,
    dtype=np.float64,
    progress=None,
) -> TrainResult:
    """Minimise the rate-distortion loss with Adam.

    ``dataset`` is an array of patches shaped (N, 1, P, P) (or (N, P, P)), or
    any object with such a ``patches`` attribute. Each iteration draws a batch
    without replacement using a generator seeded from ``(seed, iteration)``,
    so a run resumed from a checkpoint continues the exact same sequence.
    """
    patches = _as_patch_array(dataset)
    if patches.shape[0] == 0:
        raise DatasetError("dataset is empty")
    if patches.shape[0] < config.batch_size:
        raise DatasetError(f"dataset has {patches.shape[0]} patches, fewer than batch_size={config.batch_size}")

    start = 0
    optimizer = {}
    if resume is not None:
        params = resume.params
        start = resume.iteration
        optimizer = resume.optimizer
    elif params is None:
        if architecture is None:
            architecture = CaeArchitecture(patch_size=patches.shape[-1])
        params = CaeParams.initialize(architecture, seed=config.seed, dtype=dtype)
    params = params.astype(dtype)
    patches = patches.astype(dtype, copy=False)

    for name, value in params.tensors().items():
        st = optimizer.get(name) or T.AdamState.zeros_like(value)
        st.learning_rate = config.learning_rate
        st.first_moment = st.first_moment.astype(dtype)
        st.second_moment = st.second_moment.astype(dtype)
        optimizer[name] = st

    history, checkpoints = [], []
    last_checkpoint = None
    for it in range(start, config.max_iterations):
        rng = np.random.default_rng([config.seed, it])
        batch = patches[rng.choice(patches.shape[0], config.batch_size, replace=False)]
        try:
            res = loss(params, batch, config, rng=rng)
            for name, layer, attr in params.named_tensors():
                setattr(layer, attr, T.adam_step(getattr(layer, attr), res.grads[name], optimizer[name], name))
        except NonFiniteError as exc:
            raise TrainingDivergedError(
                f"training diverged at iteration {it}: {exc}", iteration=it, last_checkpoint=last_checkpoint
            ) from exc
        history.append(HistoryRow(it, res.total, res.mse, res.rate))
        if progress is not None:
            progress(history[-1])
        done = it + 1
        if checkpoint_dir is not None and (done % config.checkpoint_interval == 0 or done == config.max_iterations):
            last_checkpoint = Path(checkpoint_dir) / f"ckpt_{done:08d}.caep"
            save_checkpoint(last_checkpoint, params, done, optimizer)
            checkpoints.append(last_checkpoint)
            log.info("iteration %d: J=%.6g, checkpoint %s", done, res.total, last_checkpoint)
    return TrainResult(params, history, checkpoints, optimizer)
