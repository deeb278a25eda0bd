"""Trainable feature extractor: affine-tanh stack onto the unit sphere.

The encoder maps ambient vectors to unit-norm feature vectors through a
small fully connected network. tanh keeps everything smooth so central
finite differences verify gradients cleanly.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataError
from .rng import substream

CHECKPOINT_MAGIC = b"CDRLCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    hidden_dims: tuple = (64, 64)
    output_dim: int = 16
    activation: str = "tanh"  # fixed; kept in the config for the checkpoint header
    init_seed: int = 0

    def __post_init__(self):
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) <= 0 for d in dims):
            raise ConfigError(f"encoder dims must be positive, got {dims}")
        if self.activation != "tanh":
            raise ConfigError(f"unsupported activation {self.activation!r}")
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))

    @property
    def layer_dims(self):
        return (self.input_dim, *self.hidden_dims, self.output_dim)


@dataclass
class EncoderParams:
    config: EncoderConfig
    weights: list = field(default_factory=list)  # Tensor per layer, fan_in x fan_out
    biases: list = field(default_factory=list)  # Tensor per layer, fan_out

    def all_tensors(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def zero_grad(self):
        for t in self.all_tensors():
            t.zero_grad()


def init(config):
    """Fresh parameters: weights uniform in +-1/sqrt(fan_in), biases zero."""
    rng = substream(config.init_seed, "encoder-init")
    dims = config.layer_dims
    params = EncoderParams(config=config)
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params.weights.append(ad.Tensor(w, requires_grad=True))
        params.biases.append(ad.Tensor(np.zeros(fan_out), requires_grad=True))
    return params


def forward(params, batch):
    """Encode a batch (Tensor or array, m x input_dim) to unit-norm rows."""
    if not isinstance(batch, ad.Tensor):
        batch = ad.Tensor(batch)
    if batch.values.ndim != 2 or batch.shape[1] != params.config.input_dim:
        raise ConfigError(
            f"batch shape {batch.shape} does not match input_dim {params.config.input_dim}"
        )
    h = batch
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = ad.add_bias(ad.matmul(h, w), b)
        if i != last:
            h = ad.tanh(h)
    return ad.row_l2_normalize(h)


def encode_array(params, arr):
    """Convenience: encode a numpy array with no gradient tracking."""
    return forward(params, ad.Tensor(np.asarray(arr, dtype=np.float64))).values


# ---------------------------------------------------------------------------
# checkpoint io: versioned binary blob, bit-exact round trip


def save_checkpoint(params, path):
    """Write magic + length-prefixed JSON header + raw little-endian float64."""
    cfg = params.config
    header = {
        "version": CHECKPOINT_VERSION,
        "config": {
            "input_dim": cfg.input_dim,
            "hidden_dims": list(cfg.hidden_dims),
            "output_dim": cfg.output_dim,
            "activation": cfg.activation,
            "init_seed": cfg.init_seed,
        },
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for t in params.all_tensors():
            fh.write(np.ascontiguousarray(t.values, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: not a checkpoint file")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header.get("version") != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {header.get('version')}")
        cfg_d = header["config"]
        config = EncoderConfig(
            input_dim=cfg_d["input_dim"],
            hidden_dims=tuple(cfg_d["hidden_dims"]),
            output_dim=cfg_d["output_dim"],
            activation=cfg_d["activation"],
            init_seed=cfg_d["init_seed"],
        )
        params = EncoderParams(config=config)
        dims = config.layer_dims
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w = np.frombuffer(fh.read(8 * fan_in * fan_out), dtype="<f8").reshape(
                fan_in, fan_out
            )
            b = np.frombuffer(fh.read(8 * fan_out), dtype="<f8")
            params.weights.append(ad.Tensor(w.copy(), requires_grad=True))
            params.biases.append(ad.Tensor(b.copy(), requires_grad=True))
        trailing = fh.read(1)
        if trailing:
            raise DataError(f"{path}: trailing bytes after parameter data")
    return params


def copy_params(params):
    """Deep copy (fresh Tensors, no grads)."""
    out = EncoderParams(config=params.config)
    for w, b in zip(params.weights, params.biases):
        out.weights.append(ad.Tensor(w.values.copy(), requires_grad=True))
        out.biases.append(ad.Tensor(b.values.copy(), requires_grad=True))
    return out
