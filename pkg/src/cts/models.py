"""Small trainable architectures, masked forward passes, and SGD training.

Every model is a flat list of layer specs. Dense and conv *weights* are
maskable; biases and batch-norm affine parameters never are. The maskable
entries of all layers concatenate (in layer order, C-order within a layer)
into one flat vector of length d that masks and overlays index into.
"""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

ARCHS = ("mlp-2x256", "lenet-conv4", "resnet-tiny", "tiny-mlp")

BN_EPS = 1e-5


class ModelError(Exception):
    pass


class DivergenceError(ModelError):
    pass


# -- layer specs ----------------------------------------------------------

@dataclass(frozen=True)
class Dense:
    name: str
    in_dim: int
    out_dim: int


@dataclass(frozen=True)
class Conv:
    name: str
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1
    padding: int = 1


@dataclass(frozen=True)
class BatchNorm:
    name: str
    ch: int


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class AvgPool:
    k: int


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class GlobalAvgPool:
    pass


@dataclass(frozen=True)
class ResBlock:
    inner: tuple


@dataclass
class ForwardTrace:
    logits: Tensor
    features: list[Tensor]
    loss: Tensor


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-3
    lr_drops: tuple = ()  # ((step, factor), ...)
    rewind_step: int = 0
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.rewind_step < self.steps or self.steps == 0):
            raise ValueError("rewind step must satisfy 0 <= k < T")
        if self.lr <= 0 or self.batch_size <= 0:
            raise ValueError("rates and batch size must be positive")

    def lr_at(self, step: int) -> float:
        lr = self.lr
        for drop_step, factor in self.lr_drops:
            if step >= drop_step:
                lr *= factor
        return lr


@dataclass
class ModelState:
    arch: str
    seed: int
    input_shape: tuple
    num_classes: int
    specs: tuple
    params: dict[str, np.ndarray]
    # (param name, flat offset, size); weights of dense/conv layers only
    maskable_index: list[tuple[str, int, int]] = field(default_factory=list)

    @property
    def d(self) -> int:
        return sum(sz for _, _, sz in self.maskable_index)

    def maskable_layout(self) -> list[tuple[str, int]]:
        return [(name, sz) for name, _, sz in self.maskable_index]

    def maskable_vector(self) -> np.ndarray:
        return np.concatenate([self.params[n].reshape(-1) for n, _, _ in self.maskable_index])

    def set_maskable_vector(self, v: np.ndarray) -> None:
        for name, off, sz in self.maskable_index:
            self.params[name] = v[off:off + sz].reshape(self.params[name].shape).copy()

    def copy(self) -> "ModelState":
        return ModelState(self.arch, self.seed, self.input_shape, self.num_classes,
                          self.specs, {k: v.copy() for k, v in self.params.items()},
                          list(self.maskable_index))

    def param_names(self) -> list[str]:
        return sorted(self.params.keys())


def _flatten_specs(specs) -> list:
    out = []
    for s in specs:
        if isinstance(s, ResBlock):
            out.extend(_flatten_specs(s.inner))
        else:
            out.append(s)
    return out


def _arch_specs(arch: str, input_shape, num_classes: int):
    if arch == "mlp-2x256":
        in_dim = int(np.prod(input_shape))
        return (Flatten(), Dense("fc1", in_dim, 256), Relu(),
                Dense("fc2", 256, 256), Relu(),
                Dense("fc3", 256, num_classes))
    if arch == "tiny-mlp":
        in_dim = int(np.prod(input_shape))
        return (Flatten(), Dense("fc1", in_dim, 2), Relu(),
                Dense("fc2", 2, num_classes))
    if arch == "lenet-conv4":
        c, h, w = input_shape
        fh, fw = h // 4, w // 4
        return (Conv("conv1", c, 8, 3), Relu(), AvgPool(2),
                Conv("conv2", 8, 16, 3), Relu(), AvgPool(2),
                Flatten(), Dense("fc1", 16 * fh * fw, 32), Relu(),
                Dense("fc2", 32, num_classes))
    if arch == "resnet-tiny":
        c, h, w = input_shape
        ch = 8
        blocks = []
        for i in range(3):
            blocks.append(ResBlock((
                Conv(f"b{i}c1", ch, ch, 3), BatchNorm(f"b{i}n1", ch), Relu(),
                Conv(f"b{i}c2", ch, ch, 3), BatchNorm(f"b{i}n2", ch),
            )))
        return (Conv("stem", c, ch, 3), BatchNorm("stemn", ch), Relu(),
                *blocks, GlobalAvgPool(), Dense("fc", ch, num_classes))
    raise ModelError(f"unknown architecture '{arch}'")


def default_input_shape(arch: str):
    if arch == "mlp-2x256":
        return (784,)
    if arch == "tiny-mlp":
        return (4,)
    return (1, 8, 8)


def default_num_classes(arch: str) -> int:
    if arch == "mlp-2x256":
        return 10
    if arch == "tiny-mlp":
        return 2
    return 4


def build_model(arch: str, seed: int, input_shape=None, num_classes=None) -> ModelState:
    """Deterministic Kaiming fan-in init; zero biases; unit/zero batch-norm."""
    if arch not in ARCHS:
        raise ModelError(f"unknown architecture '{arch}'")
    if input_shape is None:
        input_shape = default_input_shape(arch)
    if num_classes is None:
        num_classes = default_num_classes(arch)
    input_shape = tuple(input_shape)
    specs = _arch_specs(arch, input_shape, num_classes)
    rng = np.random.default_rng(np.random.SeedSequence([17, seed]))
    params: dict[str, np.ndarray] = {}
    maskable: list[tuple[str, int, int]] = []
    offset = 0
    for s in _flatten_specs(specs):
        if isinstance(s, Dense):
            fan_in = s.in_dim
            w = rng.standard_normal((s.in_dim, s.out_dim)) * np.sqrt(2.0 / fan_in)
            params[s.name + ".w"] = w
            params[s.name + ".b"] = np.zeros(s.out_dim)
            maskable.append((s.name + ".w", offset, w.size))
            offset += w.size
        elif isinstance(s, Conv):
            fan_in = s.in_ch * s.kernel * s.kernel
            w = rng.standard_normal((s.out_ch, s.in_ch, s.kernel, s.kernel)) * np.sqrt(2.0 / fan_in)
            params[s.name + ".w"] = w
            params[s.name + ".b"] = np.zeros(s.out_ch)
            maskable.append((s.name + ".w", offset, w.size))
            offset += w.size
        elif isinstance(s, BatchNorm):
            params[s.name + ".g"] = np.ones(s.ch)
            params[s.name + ".b"] = np.zeros(s.ch)
    return ModelState(arch, seed, input_shape, num_classes, specs, params, maskable)


# -- forward ----------------------------------------------------------------

def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    n, c = logits.shape
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    logp = T.log_softmax(logits, axis=-1)
    return T.neg(T.mean(T.sum_(T.mul(logp, Tensor(onehot)), axis=-1)))


def _overlay_segment(overlay, off: int, sz: int, shape):
    if isinstance(overlay, Tensor):
        return T.reshape(T.narrow(overlay, slice(off, off + sz)), shape)
    return Tensor(np.asarray(overlay)[off:off + sz].reshape(shape))


def forward(model: ModelState, x: np.ndarray, y: np.ndarray | None = None,
            overlay=None, capture_features: bool = False,
            param_tensors: dict[str, Tensor] | None = None,
            effective_out: dict[str, Tensor] | None = None) -> ForwardTrace:
    """Run the network; maskable weights are multiplied by ``overlay``.

    ``overlay`` may be a numpy vector (hard mask), a tracked Tensor of
    length d (soft mask), or None. Batch norm always uses current-batch
    statistics. Features are the post-relu activations, logits excluded.
    """
    if overlay is not None:
        olen = overlay.size if isinstance(overlay, Tensor) else np.asarray(overlay).size
        if olen != model.d:
            raise ModelError(f"overlay length {olen} != d={model.d}")
    if param_tensors is None:
        param_tensors = {k: Tensor(v) for k, v in model.params.items()}
    mask_off = {name: (off, sz) for name, off, sz in model.maskable_index}

    def weight(name: str) -> Tensor:
        w = param_tensors[name]
        if overlay is not None and name in mask_off:
            off, sz = mask_off[name]
            w = T.mul(w, _overlay_segment(overlay, off, sz, w.shape))
        if effective_out is not None:
            effective_out[name] = w
        return w

    features: list[Tensor] = []

    def run(specs, h: Tensor) -> Tensor:
        for s in specs:
            if isinstance(s, Dense):
                b = param_tensors[s.name + ".b"]
                h = T.add(T.matmul(h, weight(s.name + ".w")), b)
            elif isinstance(s, Conv):
                b = param_tensors[s.name + ".b"]
                h = T.conv2d(h, weight(s.name + ".w"), stride=s.stride, padding=s.padding)
                h = T.add(h, T.reshape(b, (1, b.size, 1, 1)))
            elif isinstance(s, BatchNorm):
                axes = (0, 2, 3)
                mu = T.mean(h, axis=axes, keepdims=True)
                xc = T.add(h, T.neg(T.broadcast_to(mu, h.shape)))
                var = T.mean(T.mul(xc, xc), axis=axes, keepdims=True)
                inv = T.power(T.add(var, BN_EPS), -0.5)
                hn = T.mul(xc, T.broadcast_to(inv, h.shape))
                g = T.reshape(param_tensors[s.name + ".g"], (1, s.ch, 1, 1))
                b = T.reshape(param_tensors[s.name + ".b"], (1, s.ch, 1, 1))
                h = T.add(T.mul(hn, g), b)
            elif isinstance(s, Relu):
                h = T.relu(h)
                if capture_features:
                    features.append(h)
            elif isinstance(s, AvgPool):
                h = T.avg_pool2d(h, s.k)
            elif isinstance(s, GlobalAvgPool):
                h = T.mean(h, axis=(2, 3))
            elif isinstance(s, Flatten):
                h = T.reshape(h, (h.shape[0], int(np.prod(h.shape[1:]))))
            elif isinstance(s, ResBlock):
                h = T.relu(T.add(h, run(s.inner, h)))
                if capture_features:
                    features.append(h)
            else:
                raise ModelError(f"unknown spec {s}")
        return h

    x_arr = np.asarray(x, dtype=np.float64)
    logits = run(model.specs, Tensor(x_arr))
    loss = cross_entropy(logits, np.asarray(y)) if y is not None else Tensor(np.asarray(0.0))
    return ForwardTrace(logits=logits, features=features, loss=loss)


def evaluate(model: ModelState, x: np.ndarray, y: np.ndarray,
             mask: np.ndarray | None = None, batch_size: int = 256) -> tuple[float, float]:
    """Returns (accuracy, mean loss) over the given arrays."""
    correct = 0
    losses = []
    with T.no_grad():
        for i in range(0, len(x), batch_size):
            xb, yb = x[i:i + batch_size], y[i:i + batch_size]
            trace = forward(model, xb, yb, overlay=mask)
            pred = np.argmax(trace.logits.data, axis=1)
            correct += int((pred == yb).sum())
            losses.append(trace.loss.item() * len(xb))
    return correct / len(x), float(np.sum(losses) / len(x))


def _decayable(name: str) -> bool:
    # weight decay on dense/conv weights only, never biases or batch-norm
    return name.endswith(".w")


def train(model: ModelState, data, cfg: TrainConfig, mask: np.ndarray | None = None,
          start_step: int = 0, stop_step: int | None = None,
          augment: bool = False) -> ModelState:
    """SGD with momentum and weight decay; masked entries stay exactly zero.

    The learning-rate schedule is indexed by global step, so a retrain that
    resumes at step k inherits the schedule position.
    """
    out = model.copy()
    stop = cfg.steps if stop_step is None else stop_step
    if mask is not None:
        v = out.maskable_vector()
        v[mask == 0] = 0.0
        out.set_maskable_vector(v)
    names = [n for n in out.params]
    momentum = {n: np.zeros_like(out.params[n]) for n in names}
    mask_off = {name: (off, sz) for name, off, sz in out.maskable_index}

    def layer_mask(name):
        if mask is None or name not in mask_off:
            return None
        off, sz = mask_off[name]
        return mask[off:off + sz].reshape(out.params[name].shape)

    bad_steps = 0
    for step in range(start_step, stop):
        xb, yb = data.batch(step, cfg.batch_size, cfg.seed, split="train", augment=augment)
        try:
            leaves = {n: Tensor(out.params[n], requires_grad=True) for n in names}
            trace = forward(out, xb, yb, param_tensors=leaves)
            grads = T.backward(trace.loss, wrt=[leaves[n] for n in names])
            bad_steps = 0
        except T.NonFiniteError:
            bad_steps += 1
            if bad_steps >= 50:
                raise DivergenceError(f"non-finite loss for {bad_steps} consecutive steps")
            continue
        lr = cfg.lr_at(step)
        for n in names:
            g = grads[id(leaves[n])].data.copy()
            lm = layer_mask(n)
            if cfg.weight_decay and _decayable(n):
                decay = cfg.weight_decay * out.params[n]
                if lm is not None:
                    decay = decay * lm
                g = g + decay
            if lm is not None:
                g = g * lm
            momentum[n] = cfg.momentum * momentum[n] + g
            out.params[n] = out.params[n] - lr * momentum[n]
            if lm is not None:
                out.params[n] = out.params[n] * lm
    return out


# -- checkpoint container -----------------------------------------------------
# Layout (little-endian):
#   magic b"CTSCKPT1", uint32 header length, UTF-8 JSON header
#   {arch, seed, step, num_classes, input_shape, names: [(name, shape)...]}
#   then for each name in header order: float64 LE param values,
#   then for each name in header order: float64 LE momentum values.

_MAGIC = b"CTSCKPT1"


def save_checkpoint(path, model: ModelState, step: int = 0,
                    momentum: dict[str, np.ndarray] | None = None) -> None:
    names = model.param_names()
    header = json.dumps({
        "arch": model.arch, "seed": model.seed, "step": step,
        "num_classes": model.num_classes, "input_shape": list(model.input_shape),
        "names": [[n, list(model.params[n].shape)] for n in names],
    }).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for n in names:
            f.write(model.params[n].astype("<f8").tobytes())
        for n in names:
            buf = momentum[n] if momentum is not None else np.zeros_like(model.params[n])
            f.write(buf.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelState, int, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        if f.read(8) != _MAGIC:
            raise ModelError(f"{path}: bad checkpoint magic")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        model = build_model(header["arch"], header["seed"],
                            tuple(header["input_shape"]), header["num_classes"])
        for name, shape in header["names"]:
            n = int(np.prod(shape))
            model.params[name] = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(shape).copy()
        momentum = {}
        for name, shape in header["names"]:
            n = int(np.prod(shape))
            momentum[name] = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(shape).copy()
    return model, int(header["step"]), momentum
