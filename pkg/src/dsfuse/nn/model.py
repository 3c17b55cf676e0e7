"""Slim 3D UNet branch with hand-written reverse-mode gradients.

Layer inventory for ``levels = L`` and ``base_channels = c``:

* encoder level ``l`` (width ``c * 2**l``): two ``conv3x3x3 -> ReLU``,
  followed by a 2x2x2 max-pool except at the bottom level;
* decoder level ``l = L-2 .. 0``: nearest upsample of the level below,
  concatenation ``[upsampled, skip]``, then two ``conv3x3x3 -> ReLU``;
* a final ``1x1x1`` convolution to one channel and a sigmoid.

Tensors are plain numpy arrays shaped ``(batch, channel, z, y, x)``;
gradients come back as dicts keyed like the parameters.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..errors import FormatError, ShapeError, UsageError
from . import layers

CHECKPOINT_MAGIC = b"DSFCKPT\x00"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    levels: int = 3
    base_channels: int = 4
    in_channels: int = 1
    # initial foreground probability, sets the head bias to its logit
    output_prior: float = 0.01

    def __post_init__(self):
        if self.levels < 1 or self.base_channels < 1 or self.in_channels < 1:
            raise UsageError(f"invalid model config {self}")
        if not (0.0 < self.output_prior < 1.0):
            raise UsageError(f"output_prior must lie in (0, 1), got {self.output_prior}")

    def widths(self) -> list[int]:
        return [self.base_channels * 2**level for level in range(self.levels)]

    def layer_inventory(self) -> list[tuple[str, int, int, int]]:
        """``(name, in_channels, out_channels, kernel)`` for every conv layer."""
        widths = self.widths()
        inv = []
        prev = self.in_channels
        for level, width in enumerate(widths):
            inv.append((f"enc{level}.conv1", prev, width, 3))
            inv.append((f"enc{level}.conv2", width, width, 3))
            prev = width
        for level in range(self.levels - 2, -1, -1):
            width = widths[level]
            inv.append((f"dec{level}.conv1", widths[level + 1] + width, width, 3))
            inv.append((f"dec{level}.conv2", width, width, 3))
        inv.append(("head", widths[0], 1, 1))
        return inv

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)


class Model:
    """One branch: named parameters plus the config that shaped them."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self.version = 0
        for name, cin, cout, k in config.layer_inventory():
            wshape = (cout, cin, 3, 3, 3) if k == 3 else (cout, cin)
            if params[f"{name}.weight"].shape != wshape or params[f"{name}.bias"].shape != (cout,):
                raise ShapeError(f"parameter shapes for {name} do not match the config")

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).dtype

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def touch(self) -> None:
        """Mark parameters as modified; forward caches taken earlier go stale."""
        self.version += 1

    def astype(self, dtype) -> "Model":
        return Model(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()})

    def forward(self, x):
        return forward(self, x)

    def backward(self, cache, grad_out):
        return backward(self, cache, grad_out)


@dataclass
class ForwardCache:
    model_id: int
    version: int
    samples: list
    input_shape: tuple


def init_model(cfg: ModelConfig, seed: int, dtype=np.float32) -> Model:
    """He-uniform kernels (bound ``sqrt(6 / fan_in)``) and zero biases.

    The head bias is the exception: it starts at ``logit(output_prior)`` so
    that a fresh branch predicts the (rare) foreground with that
    probability everywhere instead of 0.5.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, cin, cout, k in cfg.layer_inventory():
        fan_in = cin * k**3
        bound = np.sqrt(6.0 / fan_in)
        shape = (cout, cin, 3, 3, 3) if k == 3 else (cout, cin)
        params[f"{name}.weight"] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        params[f"{name}.bias"] = np.zeros(cout, dtype=dtype)
    prior = cfg.output_prior
    params["head.bias"][:] = np.log(prior / (1.0 - prior))
    return Model(cfg, params)


def _conv_relu(p, name, x, tape):
    y, c = layers.conv3d_forward(x, p[f"{name}.weight"], p[f"{name}.bias"])
    a, mask = layers.relu_forward(y)
    tape.append((name, c, mask))
    return a


def _forward_one(model: Model, x: np.ndarray):
    p, cfg = model.params, model.config
    tape = []
    skips = []
    pools = []
    h = x
    for level in range(cfg.levels):
        h = _conv_relu(p, f"enc{level}.conv1", h, tape)
        h = _conv_relu(p, f"enc{level}.conv2", h, tape)
        if level < cfg.levels - 1:
            skips.append(h)
            h, pc = layers.maxpool_forward(h)
            pools.append(pc)
    for level in range(cfg.levels - 2, -1, -1):
        up = layers.upsample_forward(h)
        h = np.concatenate([up, skips[level]], axis=0)
        h = _conv_relu(p, f"dec{level}.conv1", h, tape)
        h = _conv_relu(p, f"dec{level}.conv2", h, tape)
    logits, head_cache = layers.pointwise_forward(h, p["head.weight"], p["head.bias"])
    prob = layers.sigmoid(logits)
    return prob, (tape, pools, head_cache, prob)


def forward(model: Model, x):
    """Run the branch on ``x`` of shape ``(N, C, D, H, W)``; returns ``(prob, cache)``."""
    x = np.asarray(x)
    if x.ndim != 5 or x.shape[1] != model.config.in_channels:
        raise ShapeError(
            f"expected input (N, {model.config.in_channels}, D, H, W), got {x.shape}")
    div = model.config.divisor
    if any(n % div for n in x.shape[2:]):
        raise ShapeError(f"spatial dims {x.shape[2:]} must be divisible by {div}")
    x = x.astype(model.dtype, copy=False)
    probs, samples = [], []
    for sample in x:
        prob, c = _forward_one(model, sample)
        probs.append(prob)
        samples.append(c)
    return np.stack(probs), ForwardCache(id(model), model.version, samples, x.shape)


def _backward_one(model: Model, sample_cache, g: np.ndarray, grads: dict):
    cfg = model.config
    tape, pools, head_cache, prob = sample_cache
    tape = list(tape)

    def acc(name, dw, db):
        grads[f"{name}.weight"] += dw
        grads[f"{name}.bias"] += db

    def conv_relu_back(dh):
        name, c, mask = tape.pop()
        dx, dw, db = layers.conv3d_backward(c, layers.relu_backward(mask, dh))
        acc(name, dw, db)
        return dx

    dlogits = layers.sigmoid_backward(prob, g)
    dh, dw, db = layers.pointwise_backward(head_cache, dlogits)
    acc("head", dw, db)
    dskips = {}
    widths = cfg.widths()
    for level in range(cfg.levels - 1):
        dh = conv_relu_back(dh)
        dh = conv_relu_back(dh)
        n_up = widths[level + 1]
        dskips[level] = dh[n_up:]
        dh = layers.upsample_backward(dh[:n_up])
    for level in range(cfg.levels - 1, -1, -1):
        if level < cfg.levels - 1:
            dh = layers.maxpool_backward(pools[level], dh) + dskips[level]
        dh = conv_relu_back(dh)
        dh = conv_relu_back(dh)
    return dh


def backward(model: Model, cache: ForwardCache, grad_out) -> dict[str, np.ndarray]:
    """Parameter gradients (summed over the batch in sample order) plus ``"input"``."""
    if not isinstance(cache, ForwardCache):
        raise UsageError("backward needs the cache returned by forward")
    if cache.model_id != id(model) or cache.version != model.version:
        raise UsageError("stale forward cache: model changed since the forward pass")
    grad_out = np.asarray(grad_out)
    n = cache.input_shape[0]
    expected = (n, 1) + tuple(cache.input_shape[2:])
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape}, expected {expected}")
    grad_out = grad_out.astype(model.dtype, copy=False)
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    dinput = [_backward_one(model, c, g, grads) for c, g in zip(cache.samples, grad_out)]
    grads["input"] = np.stack(dinput)
    return grads


def write_blobs(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write a JSON header and named float32 little-endian blobs to one file."""
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = dict(meta)
    header.update({"version": CHECKPOINT_VERSION, "dtype": "float32-le", "arrays": entries})
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for raw in blobs:
            fh.write(raw)


def read_blobs(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"checkpoint not found: {path}") from exc
    if raw[:8] != CHECKPOINT_MAGIC or len(raw) < 16:
        raise FormatError(f"{path} is not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header in {path}") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unknown checkpoint version {header.get('version')!r}")
    body = raw[16 + hlen:]
    arrays = {}
    for e in header["arrays"]:
        chunk = body[e["offset"]:e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise FormatError(f"checkpoint {path} is truncated at {e['name']}")
        arrays[e["name"]] = np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(e["shape"])
    return header, arrays


def save_checkpoint(model: Model, path, meta: dict | None = None) -> None:
    header = {"kind": "model", "config": asdict(model.config)}
    if meta:
        header["meta"] = meta
    write_blobs(path, header, model.params)


def load_checkpoint(path) -> Model:
    header, arrays = read_blobs(path)
    if header.get("kind") != "model":
        raise FormatError(f"{path} does not hold model parameters")
    try:
        return Model(ModelConfig(**header["config"]), arrays)
    except (KeyError, TypeError, ShapeError, UsageError) as exc:
        raise FormatError(f"checkpoint {path} does not match its config: {exc}") from exc
