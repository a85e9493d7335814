"""U-Net score network: configurable resolution levels, blocks of
conv+BN+LeakyReLU pairs, max-pool descent, nearest-neighbor ascent with skip
concatenation, and a 3x3 score head.

Checkpoint file layout (little-endian):
  magic "CMLK" | u32 version | u32 header length | JSON header | payload
where the header holds the architecture, an ordered tensor name/shape table
and free-form provenance, and the payload is the tensors' float32 data
concatenated in table order.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .errors import (
    ConfigError,
    CorruptCheckpointError,
    CheckpointVersionError,
    TruncatedCheckpointError,
    InconsistentCheckpointError,
)

_MAGIC = b"CMLK"
_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    """Network shape: filters at level L = base_filters * 2**L."""

    num_layers: int = 4
    blocks_per_layer: tuple = (3, 3, 4, 4)
    base_filters: int = 32
    in_channels: int = 1
    out_channels: int = 4
    leaky_slope: float = 0.01

    def __post_init__(self):
        if self.num_layers < 2:
            raise ConfigError(f"num_layers must be >= 2, got {self.num_layers}")
        if len(self.blocks_per_layer) != self.num_layers:
            raise ConfigError(
                f"blocks_per_layer has {len(self.blocks_per_layer)} entries "
                f"for {self.num_layers} layers"
            )
        if any(b < 1 for b in self.blocks_per_layer):
            raise ConfigError("every blocks_per_layer entry must be >= 1")
        if min(self.base_filters, self.in_channels, self.out_channels) < 1:
            raise ConfigError("channel counts must be >= 1")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigError(f"leaky_slope must be in (0,1), got {self.leaky_slope}")

    def filters(self, level):
        return self.base_filters * (2 ** level)

    @property
    def divisor(self):
        return 2 ** (self.num_layers - 1)

    def to_dict(self):
        d = asdict(self)
        d["blocks_per_layer"] = list(self.blocks_per_layer)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["blocks_per_layer"] = tuple(d["blocks_per_layer"])
        return cls(**d)


def default_arch():
    """Full-size configuration (400x400 inputs)."""
    return ArchConfig()


def desk_arch():
    """Small configuration for desk-scale phantom experiments."""
    return ArchConfig(num_layers=4, blocks_per_layer=(1, 1, 1, 1), base_filters=8)


def _conv_specs(arch):
    """Ordered (prefix, cin, cout) for every conv+bn pair, then the head."""
    specs = []
    cur = arch.in_channels
    for lv in range(arch.num_layers):
        f = arch.filters(lv)
        for blk in range(arch.blocks_per_layer[lv]):
            for j in (1, 2):
                cin = cur if j == 1 else f
                specs.append((f"enc{lv}.block{blk}.c{j}", cin, f))
            cur = f
    for lv in range(arch.num_layers - 2, -1, -1):
        f = arch.filters(lv)
        cur = arch.filters(lv + 1) + f  # upsampled channels + skip
        for blk in range(arch.blocks_per_layer[lv]):
            for j in (1, 2):
                cin = cur if j == 1 else f
                specs.append((f"dec{lv}.block{blk}.c{j}", cin, f))
            cur = f
    return specs, arch.filters(0)


def parameter_table(arch):
    """Canonical (name, shape) list for all learnable tensors of `arch`."""
    table = []
    specs, head_in = _conv_specs(arch)
    for prefix, cin, cout in specs:
        table.append((f"{prefix}.weight", (cout, cin, 3, 3)))
        table.append((f"{prefix}.bias", (cout,)))
        table.append((f"{prefix}.gamma", (cout,)))
        table.append((f"{prefix}.beta", (cout,)))
    table.append(("head.weight", (arch.out_channels, head_in, 3, 3)))
    table.append(("head.bias", (arch.out_channels,)))
    return table


def state_table(arch):
    """Canonical (name, shape) list for the batch-norm running state."""
    table = []
    specs, _ = _conv_specs(arch)
    for prefix, _cin, cout in specs:
        table.append((f"{prefix}.running_mean", (cout,)))
        table.append((f"{prefix}.running_var", (cout,)))
        table.append((f"{prefix}.count", (1,)))
    return table


class UNet:
    """Built network: parameter tensors + batch-norm state, walked by forward."""

    def __init__(self, arch, params, bn_state, dtype=np.float32):
        self.arch = arch
        self.params = params  # name -> ad.Tensor, canonical insertion order
        self.bn_state = bn_state  # conv prefix -> BatchNormState
        self.dtype = dtype

    @classmethod
    def build(cls, arch, seed, dtype=np.float32):
        """Deterministic He fan-in initialization from `seed`."""
        rng = np.random.default_rng(seed)
        params = {}
        bn_state = {}
        specs, head_in = _conv_specs(arch)
        for prefix, cin, cout in specs:
            params[f"{prefix}.weight"] = _he_conv(rng, cout, cin, dtype)
            params[f"{prefix}.bias"] = ad.Tensor(np.zeros(cout), True, dtype)
            params[f"{prefix}.gamma"] = ad.Tensor(np.ones(cout), True, dtype)
            params[f"{prefix}.beta"] = ad.Tensor(np.zeros(cout), True, dtype)
            bn_state[prefix] = ad.BatchNormState.new(cout, dtype)
        params["head.weight"] = _he_conv(rng, arch.out_channels, head_in, dtype)
        params["head.bias"] = ad.Tensor(np.zeros(arch.out_channels), True, dtype)
        return cls(arch, params, bn_state, dtype)

    def _block(self, x, prefix, mode):
        p = self.params
        for j in (1, 2):
            pre = f"{prefix}.c{j}"
            x = ad.conv2d(x, p[f"{pre}.weight"], p[f"{pre}.bias"])
            x = ad.batch_norm(
                x, p[f"{pre}.gamma"], p[f"{pre}.beta"], self.bn_state[pre], mode
            )
            x = ad.leaky_relu(x, self.arch.leaky_slope)
        return x

    def forward(self, batch, mode="eval"):
        """Scores [B, out_channels, H, W] for inputs [B, in_channels, H, W]."""
        if not isinstance(batch, ad.Tensor):
            batch = ad.Tensor(batch, dtype=self.dtype)
        B, C, H, W = batch.data.shape
        if C != self.arch.in_channels:
            raise ConfigError(
                f"expected {self.arch.in_channels} input channels, got {C}"
            )
        d = self.arch.divisor
        if H % d or W % d:
            raise ConfigError(
                f"input extents {H}x{W} must be divisible by {d} "
                f"(2^(num_layers-1))"
            )
        arch = self.arch
        x = batch
        skips = []
        for lv in range(arch.num_layers):
            for blk in range(arch.blocks_per_layer[lv]):
                x = self._block(x, f"enc{lv}.block{blk}", mode)
            if lv < arch.num_layers - 1:
                skips.append(x)
                x = ad.max_pool2(x)
        for lv in range(arch.num_layers - 2, -1, -1):
            x = ad.upsample2(x)
            x = ad.concat_channels(x, skips[lv])
            for blk in range(arch.blocks_per_layer[lv]):
                x = self._block(x, f"dec{lv}.block{blk}", mode)
        return ad.conv2d(x, self.params["head.weight"], self.params["head.bias"])

    def zero_grads(self):
        for t in self.params.values():
            t.grad = None

    def clone_weights(self):
        """Snapshot of (params, bn_state) as plain arrays, for best-epoch keeping."""
        params = {k: t.data.copy() for k, t in self.params.items()}
        state = {k: s.copy() for k, s in self.bn_state.items()}
        return params, state

    def load_weights(self, params, bn_state):
        for k, t in self.params.items():
            t.data = params[k].astype(self.dtype, copy=True)
        for k in self.bn_state:
            self.bn_state[k] = bn_state[k].copy()

    def parameter_count(self):
        return sum(t.data.size for t in self.params.values())


def _he_conv(rng, cout, cin, dtype):
    fan_in = cin * 9
    w = rng.standard_normal((cout, cin, 3, 3)) * np.sqrt(2.0 / fan_in)
    return ad.Tensor(w, True, dtype)


@dataclass
class Checkpoint:
    """Architecture + all tensor values + training provenance."""

    arch: ArchConfig
    params: dict
    norm_state: dict  # conv prefix -> BatchNormState
    provenance: dict = field(default_factory=dict)

    def to_model(self, dtype=np.float32):
        model = UNet.build(self.arch, seed=0, dtype=dtype)
        model.load_weights(self.params, self.norm_state)
        return model

    @classmethod
    def from_model(cls, model, provenance=None):
        params, state = model.clone_weights()
        return cls(model.arch, params, state, dict(provenance or {}))


def config_digest(obj):
    """Short stable digest of a JSON-serializable config."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _flat_tensors(ckpt):
    """All checkpoint tensors as (name, f32 array), in canonical order."""
    out = []
    for name, shape in parameter_table(ckpt.arch):
        arr = np.ascontiguousarray(ckpt.params[name], dtype=np.float32)
        if arr.shape != shape:
            raise ConfigError(f"tensor {name} has shape {arr.shape}, expected {shape}")
        out.append((name, arr))
    specs, _ = _conv_specs(ckpt.arch)
    for prefix, _cin, _cout in specs:
        st = ckpt.norm_state[prefix]
        out.append((f"{prefix}.running_mean", np.asarray(st.running_mean, np.float32)))
        out.append((f"{prefix}.running_var", np.asarray(st.running_var, np.float32)))
        out.append((f"{prefix}.count", np.asarray([st.count], np.float32)))
    return out


def save_checkpoint(ckpt, path):
    tensors = _flat_tensors(ckpt)
    header = {
        "arch": ckpt.arch.to_dict(),
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
        "provenance": ckpt.provenance,
    }
    hj = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<I", len(hj)))
        f.write(hj)
        for _name, arr in tensors:
            f.write(arr.astype("<f4", copy=False).tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12 or blob[:4] != _MAGIC:
        raise CorruptCheckpointError(f"{path}: not a CMLK checkpoint")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != _VERSION:
        raise CheckpointVersionError(f"{path}: version {version}, supported {_VERSION}")
    (hlen,) = struct.unpack("<I", blob[8:12])
    if len(blob) < 12 + hlen:
        raise TruncatedCheckpointError(f"{path}: header truncated")
    try:
        header = json.loads(blob[12 : 12 + hlen].decode())
        arch = ArchConfig.from_dict(header["arch"])
        table = [(t["name"], tuple(t["shape"])) for t in header["tensors"]]
    except (ValueError, KeyError, TypeError, ConfigError) as exc:
        raise CorruptCheckpointError(f"{path}: undecodable header ({exc})") from exc

    expected = parameter_table(arch) + state_table(arch)
    if table != expected:
        raise InconsistentCheckpointError(
            f"{path}: tensor table disagrees with the declared architecture"
        )
    payload = blob[12 + hlen :]
    need = sum(int(np.prod(shape)) for _n, shape in table) * 4
    if len(payload) < need:
        raise TruncatedCheckpointError(
            f"{path}: payload has {len(payload)} bytes, need {need}"
        )
    if len(payload) > need:
        raise CorruptCheckpointError(f"{path}: {len(payload) - need} trailing bytes")

    params = {}
    norm_state = {}
    off = 0
    values = {}
    for name, shape in table:
        cnt = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=cnt, offset=off)
        values[name] = arr.reshape(shape).astype(np.float32)
        off += cnt * 4
    for name, _shape in parameter_table(arch):
        params[name] = values[name]
    specs, _ = _conv_specs(arch)
    for prefix, _cin, cout in specs:
        st = ad.BatchNormState.new(cout)
        st.running_mean = values[f"{prefix}.running_mean"].copy()
        st.running_var = values[f"{prefix}.running_var"].copy()
        st.count = int(values[f"{prefix}.count"][0])
        norm_state[prefix] = st
    return Checkpoint(arch, params, norm_state, header.get("provenance", {}))
