"""
Minimal numpy layer engine for the navigation and bounding-box networks.

This module handles:
- Layers with forward/backward: conv3d ("same" padding, stride 1), batchnorm,
  relu, maxpool3d (2x2x2), dense, softmax, sizeconf (box head output)
- The three architectures, each with a navigation head (softmax over 19
  actions) and a bounding-box head (3 normalized sizes + predicted IOU)
- MSE loss, momentum SGD, versioned checkpoints

Tensors are channels-first: (N, C, X, Y, Z).

Usage:
    from neural_core import build_network, mse_loss, SGD

    net = build_network(1, "navigation", (16, 16, 16, 1), seed=3)
    out = net.forward(batch, mode="train")
    loss, grad = mse_loss(out, targets)
    grads = net.backward(grad)
    SGD(lr=0.1, momentum=0.9, clip_norm=1.0).step(net.params, grads)
"""
from __future__ import annotations

import copy
import itertools
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

log = logging.getLogger(__name__)

NAVIGATION = "navigation"
BBOX = "bbox"
HEADS = (NAVIGATION, BBOX)
ARCH_IDS = (1, 2, 3)
OUTPUT_SIZES = {NAVIGATION: 19, BBOX: 4}
KERNEL_SIZES = (3, 5, 7, 9)
DEFAULT_CHANNEL_WIDTHS = (16, 32, 32)

CHECKPOINT_MAGIC = b"ROILOCNN"
CHECKPOINT_VERSION = 2
OUTPUT_INIT_SCALE = 0.1


class NetworkError(ValueError):
    """Raised on invalid architectures, shape mismatches or a missing forward cache."""


class NonFiniteGradientError(NetworkError):
    """Raised by SGD when a gradient contains NaN or inf."""


# =================================================================
# ========== LAYERS ================================================
# =================================================================

class Layer:
    kind = "layer"

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        self._cache = None

    def describe(self) -> dict:
        return {"kind": self.kind}

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise NetworkError(f"❌ {self.kind}: backward called without a train-mode forward cache")
        cache, self._cache = self._cache, None
        return cache


class Conv3D(Layer):
    kind = "conv3d"

    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if kernel not in KERNEL_SIZES:
            raise NetworkError(f"❌ conv3d kernel must be one of {KERNEL_SIZES}, got {kernel}")
        if in_ch < 1 or out_ch < 1:
            raise NetworkError(f"❌ conv3d channel counts must be >= 1, got {in_ch}->{out_ch}")
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        fan_in = in_ch * kernel ** 3
        self.params["W"] = (rng.standard_normal((out_ch, in_ch, kernel, kernel, kernel))
                            * np.sqrt(2.0 / fan_in)).astype(dtype)
        self.params["b"] = np.zeros(out_ch, dtype=dtype)

    def describe(self) -> dict:
        return {"kind": self.kind, "kernel": self.kernel, "in_ch": self.in_ch, "out_ch": self.out_ch}

    def _offsets(self):
        return itertools.product(range(self.kernel), repeat=3)

    def forward(self, x, train):
        if x.ndim != 5 or x.shape[1] != self.in_ch:
            raise NetworkError(f"❌ conv3d expects (N, {self.in_ch}, X, Y, Z), got {x.shape}")
        W = self.params["W"]
        p = self.kernel // 2
        n, _, dx, dy, dz = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
        out = np.zeros((self.out_ch, n, dx, dy, dz), dtype=x.dtype)
        for i, j, k in self._offsets():
            out += np.tensordot(W[:, :, i, j, k], xp[:, :, i:i + dx, j:j + dy, k:k + dz], axes=([1], [1]))
        out = out.transpose(1, 0, 2, 3, 4) + self.params["b"][None, :, None, None, None]
        self._cache = xp if train else None
        return np.ascontiguousarray(out)

    def backward(self, dout):
        xp = self._take_cache()
        W = self.params["W"]
        p = self.kernel // 2
        _, _, dx, dy, dz = dout.shape
        g = dout.transpose(1, 0, 2, 3, 4)
        dW = np.zeros_like(W)
        dxp = np.zeros_like(xp)
        for i, j, k in self._offsets():
            window = xp[:, :, i:i + dx, j:j + dy, k:k + dz]
            dW[:, :, i, j, k] = np.tensordot(g, window, axes=([1, 2, 3, 4], [0, 2, 3, 4]))
            dxp[:, :, i:i + dx, j:j + dy, k:k + dz] += np.tensordot(
                W[:, :, i, j, k], g, axes=([0], [0])
            ).transpose(1, 0, 2, 3, 4)
        grads = {"W": dW, "b": dout.sum(axis=(0, 2, 3, 4))}
        return dxp[:, :, p:p + dx, p:p + dy, p:p + dz], grads


class BatchNorm3D(Layer):
    kind = "batchnorm"
    AXES = (0, 2, 3, 4)

    def __init__(self, channels: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def describe(self) -> dict:
        return {"kind": self.kind, "channels": self.channels}

    @staticmethod
    def _b(v):
        return v[None, :, None, None, None]

    def forward(self, x, train):
        if train:
            mean = x.mean(axis=self.AXES)
            var = x.var(axis=self.AXES)
            m = self.momentum
            self.buffers["running_mean"][...] = (1 - m) * self.buffers["running_mean"] + m * mean
            self.buffers["running_var"][...] = (1 - m) * self.buffers["running_var"] + m * var
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - self._b(mean)) * self._b(inv_std)
        self._cache = (xhat, inv_std) if train else None
        return (self._b(self.params["gamma"]) * xhat + self._b(self.params["beta"])).astype(x.dtype)

    def backward(self, dout):
        xhat, inv_std = self._take_cache()
        m = dout.size // dout.shape[1]
        dxhat = dout * self._b(self.params["gamma"])
        dx = self._b(inv_std) / m * (
            m * dxhat
            - self._b(dxhat.sum(axis=self.AXES))
            - xhat * self._b((dxhat * xhat).sum(axis=self.AXES))
        )
        grads = {"gamma": (dout * xhat).sum(axis=self.AXES), "beta": dout.sum(axis=self.AXES)}
        return dx.astype(dout.dtype), grads


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train):
        mask = x > 0
        self._cache = mask if train else None
        return x * mask

    def backward(self, dout):
        return dout * self._take_cache(), {}


class MaxPool3D(Layer):
    kind = "maxpool3d"

    def forward(self, x, train):
        n, c, dx, dy, dz = x.shape
        if dx % 2 or dy % 2 or dz % 2:
            raise NetworkError(f"❌ maxpool3d needs even spatial dims, got {x.shape[2:]}")
        windows = (x.reshape(n, c, dx // 2, 2, dy // 2, 2, dz // 2, 2)
                   .transpose(0, 1, 2, 4, 6, 3, 5, 7)
                   .reshape(n, c, dx // 2, dy // 2, dz // 2, 8))
        idx = windows.argmax(axis=-1)
        self._cache = (idx, x.shape) if train else None
        return np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        idx, shape = self._take_cache()
        n, c, dx, dy, dz = shape
        dwin = np.zeros(idx.shape + (8,), dtype=dout.dtype)
        np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
        dx_full = (dwin.reshape(n, c, dx // 2, dy // 2, dz // 2, 2, 2, 2)
                   .transpose(0, 1, 2, 5, 3, 6, 4, 7)
                   .reshape(shape))
        return dx_full, {}


class Dense(Layer):
    """flat @ W / sqrt(n_in) + b, W drawn from N(0, init_scale^2)."""

    kind = "dense"

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float32,
                 init_scale: float = 1.0):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.scale = float(1.0 / np.sqrt(n_in))
        self.params["W"] = (rng.standard_normal((n_in, n_out)) * init_scale).astype(dtype)
        self.params["b"] = np.zeros(n_out, dtype=dtype)

    def describe(self) -> dict:
        return {"kind": self.kind, "in": self.n_in, "out": self.n_out}

    def forward(self, x, train):
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.n_in:
            raise NetworkError(f"❌ dense expects {self.n_in} inputs, got {flat.shape[1]}")
        self._cache = (flat, x.shape) if train else None
        return (flat @ self.params["W"]) * self.scale + self.params["b"]

    def backward(self, dout):
        flat, shape = self._take_cache()
        grads = {"W": (flat.T @ dout) * self.scale, "b": dout.sum(axis=0)}
        return ((dout @ self.params["W"].T) * self.scale).reshape(shape), grads


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, train):
        e = np.exp(x - x.max(axis=1, keepdims=True))
        s = e / e.sum(axis=1, keepdims=True)
        self._cache = s if train else None
        return s

    def backward(self, dout):
        s = self._take_cache()
        return s * (dout - (dout * s).sum(axis=1, keepdims=True)), {}


class SizeConfidence(Layer):
    """Box head output: softplus over the 3 sizes, sigmoid for the confidence.
    Sizes stay positive and the confidence stays inside (0, 1)."""

    kind = "sizeconf"

    def forward(self, x, train):
        gate = expit(x)
        out = np.concatenate([np.logaddexp(0, x[:, :3]), gate[:, 3:]], axis=1).astype(x.dtype)
        self._cache = gate if train else None
        return out

    def backward(self, dout):
        gate = self._take_cache()
        local = np.concatenate([gate[:, :3], gate[:, 3:] * (1 - gate[:, 3:])], axis=1)
        return (dout * local).astype(dout.dtype), {}


# =================================================================
# ========== NETWORK ===============================================
# =================================================================

@dataclass
class NetworkSpec:
    arch_id: int
    head: str
    input_shape: Tuple[int, int, int, int]
    channel_widths: Tuple[int, int, int]
    output_size: int
    seed: int = 0
    layers: List[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        data = asdict(self)
        data["input_shape"] = list(self.input_shape)
        data["channel_widths"] = list(self.channel_widths)
        return data


class Network:
    def __init__(self, spec: NetworkSpec, layers: List[Layer]):
        self.spec = spec
        self.layers = layers
        self.spec.layers = [layer.describe() for layer in layers]

    @property
    def name(self) -> str:
        return f"arch{self.spec.arch_id}_{self.spec.head}"

    @property
    def dtype(self):
        return self.layers[0].params["W"].dtype

    @property
    def params(self) -> Dict[str, np.ndarray]:
        return {f"{i:02d}.{layer.kind}.{k}": v
                for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    @property
    def buffers(self) -> Dict[str, np.ndarray]:
        return {f"{i:02d}.{layer.kind}.{k}": v
                for i, layer in enumerate(self.layers) for k, v in layer.buffers.items()}

    def _as_batch(self, patch: np.ndarray) -> np.ndarray:
        px, py, pz, _ = self.spec.input_shape
        x = np.asarray(patch, dtype=self.dtype)
        if x.shape == (px, py, pz):
            x = x[None, None]
        elif x.ndim == 4 and x.shape[1:] == (px, py, pz):
            x = x[:, None]
        if x.ndim != 5 or x.shape[1:] != (1, px, py, pz):
            raise NetworkError(f"❌ {self.name}: input shape {np.shape(patch)} does not match {(px, py, pz)}")
        return x

    def forward(self, patch: np.ndarray, mode: str = "infer") -> np.ndarray:
        """Returns (N, output_size). Train mode caches activations and uses batch statistics."""
        if mode not in ("train", "infer"):
            raise NetworkError(f"❌ Unknown mode: {mode}")
        x = self._as_batch(patch)
        train = mode == "train"
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, loss_grad: np.ndarray) -> Dict[str, np.ndarray]:
        grads = {}
        g = np.asarray(loss_grad, dtype=self.dtype)
        for i in reversed(range(len(self.layers))):
            layer = self.layers[i]
            g, layer_grads = layer.backward(g)
            for k, v in layer_grads.items():
                grads[f"{i:02d}.{layer.kind}.{k}"] = v
        return grads

    def predict(self, patches: np.ndarray) -> np.ndarray:
        return self.forward(patches, mode="infer")


def _conv_block(layers, in_ch, out_ch, kernel, rng, dtype, relu=True):
    layers.append(Conv3D(in_ch, out_ch, kernel, rng, dtype))
    layers.append(BatchNorm3D(out_ch, dtype))
    if relu:
        layers.append(ReLU())


def build_network(arch_id: int, head: str, input_shape: Sequence[int],
                  channel_widths: Sequence[int] = DEFAULT_CHANNEL_WIDTHS,
                  seed: int = 0, dtype=np.float32) -> Network:
    """
    Architecture 1: conv7, conv5, conv3 (each + batchnorm + relu), dense.
    Architecture 2: conv7, conv7, pool, conv5, conv5, pool, conv3, conv3, dense.
    Architecture 3: conv9 + batchnorm prepended to architecture 1.
    Navigation heads end in softmax over 19 actions, bbox heads in sizeconf over 4.

    Raises:
        NetworkError: unknown arch/head, or an input too small for architecture 2's pooling
    """
    if arch_id not in ARCH_IDS:
        raise NetworkError(f"❌ arch_id must be one of {ARCH_IDS}, got {arch_id}")
    if head not in HEADS:
        raise NetworkError(f"❌ head must be one of {HEADS}, got {head}")
    shape = tuple(int(s) for s in input_shape)
    if len(shape) == 3:
        shape = shape + (1,)
    if len(shape) != 4 or shape[3] != 1 or min(shape[:3]) < 1:
        raise NetworkError(f"❌ input_shape must be (px, py, pz, 1), got {tuple(input_shape)}")
    widths = tuple(int(w) for w in channel_widths)
    if len(widths) != 3 or min(widths) < 1:
        raise NetworkError(f"❌ channel_widths needs 3 positive values, got {channel_widths}")

    rng = np.random.default_rng(seed)
    w0, w1, w2 = widths
    spatial = shape[:3]
    layers: List[Layer] = []

    if arch_id == 2:
        if any(s < 4 or s % 4 for s in spatial):
            raise NetworkError(f"❌ input {spatial} too small for two 2x2x2 poolings (need multiples of 4)")
        _conv_block(layers, 1, w0, 7, rng, dtype)
        _conv_block(layers, w0, w0, 7, rng, dtype)
        layers.append(MaxPool3D())
        _conv_block(layers, w0, w1, 5, rng, dtype)
        _conv_block(layers, w1, w1, 5, rng, dtype)
        layers.append(MaxPool3D())
        _conv_block(layers, w1, w2, 3, rng, dtype)
        _conv_block(layers, w2, w2, 3, rng, dtype)
        spatial = tuple(s // 4 for s in spatial)
    else:
        in_ch = 1
        if arch_id == 3:
            _conv_block(layers, 1, w0, 9, rng, dtype, relu=False)
            in_ch = w0
        _conv_block(layers, in_ch, w0, 7, rng, dtype)
        _conv_block(layers, w0, w1, 5, rng, dtype)
        _conv_block(layers, w1, w2, 3, rng, dtype)

    output_size = OUTPUT_SIZES[head]
    layers.append(Dense(w2 * int(np.prod(spatial)), output_size, rng, dtype, init_scale=OUTPUT_INIT_SCALE))
    layers.append(Softmax() if head == NAVIGATION else SizeConfidence())

    spec = NetworkSpec(arch_id=arch_id, head=head, input_shape=shape,
                       channel_widths=widths, output_size=output_size, seed=seed)
    return Network(spec, layers)


# =================================================================
# ========== LOSS / OPTIMIZER ======================================
# =================================================================

def mse_loss(output: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean over every element; returns (loss, d loss / d output)."""
    diff = output - np.asarray(target, dtype=output.dtype)
    return float(np.mean(diff ** 2)), (2.0 / diff.size) * diff


def global_norm(grads: Dict[str, np.ndarray]) -> float:
    """L2 norm over every gradient tensor, accumulated in float64."""
    return float(np.sqrt(sum(np.sum(np.square(g, dtype=np.float64)) for g in grads.values())))


class SGD:
    """Classic momentum: v <- momentum * v - lr * g; p <- p + v.
    With clip_norm set, the gradients are rescaled so their global L2 norm is at most clip_norm."""

    def __init__(self, lr: float = 0.01, momentum: float = 0.9, clip_norm: Optional[float] = None):
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]):
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"❌ non-finite gradient for {name}")
        if self.clip_norm:
            total = global_norm(grads)
            if total > self.clip_norm:
                factor = self.clip_norm / total
                grads = {name: g * factor for name, g in grads.items()}
        for name, p in params.items():
            if name not in grads:
                continue
            g = grads[name]
            if g.shape != p.shape:
                raise NetworkError(f"❌ gradient shape {g.shape} does not match {name} {p.shape}")
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(p)
            v = self.momentum * v - self.lr * g
            self.velocity[name] = v.astype(p.dtype)
            p += self.velocity[name]
        return params


# =================================================================
# ========== CHECKPOINTS ===========================================
# =================================================================

def save_checkpoint(network: Network, path) -> Path:
    """Header (magic, version, JSON length) + JSON spec/manifest + float32 LE payload."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {**network.params, **network.buffers}
    names = sorted(tensors)
    header = {
        "spec": network.spec.to_json(),
        "tensors": [{"name": n, "shape": list(tensors[n].shape)} for n in names],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for n in names:
            fh.write(np.ascontiguousarray(tensors[n], dtype="<f4").tobytes())
    return path


def load_checkpoint(path) -> Network:
    path = Path(path)
    data = path.read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise NetworkError(f"❌ {path.name} is not a network checkpoint")
    version, header_len = struct.unpack("<II", data[8:16])
    if version != CHECKPOINT_VERSION:
        raise NetworkError(f"❌ Unsupported checkpoint version {version} in {path.name}")
    header = json.loads(data[16:16 + header_len].decode("utf-8"))
    spec = header["spec"]
    network = build_network(spec["arch_id"], spec["head"], spec["input_shape"],
                            spec["channel_widths"], seed=spec.get("seed", 0))
    tensors = {**network.params, **network.buffers}
    offset = 16 + header_len
    for item in header["tensors"]:
        name, shape = item["name"], tuple(item["shape"])
        if name not in tensors or tensors[name].shape != shape:
            raise NetworkError(f"❌ Checkpoint tensor {name}{shape} does not match the architecture")
        count = int(np.prod(shape))
        tensors[name][...] = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += count * 4
    if offset != len(data):
        raise NetworkError(f"❌ Trailing bytes in checkpoint {path.name}")
    return network


# =================================================================
# ========== MODEL BUNDLE ==========================================
# =================================================================

@dataclass
class ModelBundle:
    """Navigation + bbox network for each architecture, plus the pre-selected box size."""

    networks: Dict[Tuple[int, str], Network]
    box_size: Tuple[int, int, int]
    patch_shape: Tuple[int, int, int]
    config_fingerprint: str = ""

    @classmethod
    def create(cls, patch_shape: Sequence[int], channel_widths: Sequence[int],
               box_size: Sequence[int], seed: int = 0, fingerprint: str = "") -> "ModelBundle":
        patch_shape = tuple(int(p) for p in patch_shape)
        networks = {}
        for n, (arch_id, head) in enumerate(itertools.product(ARCH_IDS, HEADS)):
            networks[(arch_id, head)] = build_network(
                arch_id, head, patch_shape + (1,), channel_widths, seed=seed * 100 + n
            )
        return cls(networks, tuple(int(s) for s in box_size), patch_shape, fingerprint)

    def network(self, arch_id: int, head: str) -> Network:
        try:
            return self.networks[(arch_id, head)]
        except KeyError:
            raise NetworkError(f"❌ Model bundle has no {head} network for architecture {arch_id}")

    def navigation(self, arch_id: int) -> Network:
        return self.network(arch_id, NAVIGATION)

    def bbox(self, arch_id: int) -> Network:
        return self.network(arch_id, BBOX)

    def copy(self) -> "ModelBundle":
        return copy.deepcopy(self)

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for (arch_id, head), network in sorted(self.networks.items()):
            save_checkpoint(network, directory / f"arch{arch_id}_{head}.ckpt")
        meta = {
            "box_size": list(self.box_size),
            "patch_shape": list(self.patch_shape),
            "config_fingerprint": self.config_fingerprint,
            "networks": [f"arch{a}_{h}.ckpt" for a, h in sorted(self.networks)],
        }
        (directory / "bundle.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
        return directory

    @classmethod
    def load(cls, directory) -> "ModelBundle":
        directory = Path(directory)
        meta_path = directory / "bundle.json"
        if not meta_path.exists():
            raise NetworkError(f"❌ No bundle.json in {directory}")
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        networks = {}
        for arch_id, head in itertools.product(ARCH_IDS, HEADS):
            path = directory / f"arch{arch_id}_{head}.ckpt"
            if not path.exists():
                raise NetworkError(f"❌ Missing checkpoint {path.name} in {directory}")
            networks[(arch_id, head)] = load_checkpoint(path)
        return cls(networks, tuple(meta["box_size"]), tuple(meta["patch_shape"]),
                   meta.get("config_fingerprint", ""))
