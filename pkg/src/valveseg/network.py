"""Small 3D U-Net with memory key/value heads at the coarse encoder levels."""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .memory import EmptyMemoryError, bidirectional_read


class ShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class NetworkConfig:
    base_channels: int = 8
    n_levels: int = 3
    key_channels: int = 8
    value_channels: int = 16
    readout_levels: tuple = (2, 3)

    def __post_init__(self):
        self.readout_levels = tuple(sorted(int(l) for l in self.readout_levels))
        if self.n_levels < 2:
            raise ValueError(f"n_levels must be >= 2, got {self.n_levels}")
        if self.key_channels < 1 or self.value_channels < 1 or self.base_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if not set(self.readout_levels) <= set(range(1, self.n_levels + 1)):
            raise ValueError(f"readout_levels {self.readout_levels} outside 1..{self.n_levels}")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** (level - 1)


@dataclass
class FeatureSet:
    """Encoder output for a batch of B volumes.

    ``skips`` is indexed by level - 1, ``keys``/``values`` by readout slot
    (one per entry of ``levels``); every tensor carries the batch dimension.
    """

    skips: list
    keys: list
    values: list
    levels: tuple = ()
    batched: bool = False

    def spatial(self, level: int) -> tuple:
        return tuple(self.skips[level - 1].shape[-3:])

    @property
    def batch_size(self) -> int:
        return self.skips[0].shape[0]

    def sample(self, i: int = 0):
        """Per-level (keys, values) of one batch member, as stored in a memory bank."""
        return [k[i] for k in self.keys], [v[i] for v in self.values]


def _block(c_in, c_out):
    return nn.Sequential(
        nn.Conv3d(c_in, c_out, 3, padding=1),
        nn.InstanceNorm3d(c_out, affine=True),
        nn.ELU(),
        nn.Conv3d(c_out, c_out, 3, padding=1),
        nn.InstanceNorm3d(c_out, affine=True),
        nn.ELU(),
    )


class SegNet(nn.Module):
    def __init__(self, config: Optional[NetworkConfig] = None):
        super().__init__()
        self.config = cfg = config or NetworkConfig()
        L = cfg.n_levels
        self.enc = nn.ModuleList(
            [_block(1 if l == 1 else cfg.channels(l - 1), cfg.channels(l)) for l in range(1, L + 1)]
        )
        self.key_proj = nn.ModuleList([nn.Conv3d(cfg.channels(l), cfg.key_channels, 1) for l in cfg.readout_levels])
        self.value_proj = nn.ModuleList(
            [nn.Conv3d(cfg.channels(l), cfg.value_channels, 1) for l in cfg.readout_levels]
        )
        self.null = nn.ParameterList(
            [nn.Parameter(torch.zeros(cfg.value_channels)) for _ in cfg.readout_levels]
        )
        # query value plus forward and backward readouts
        extra = {l: 3 * cfg.value_channels for l in cfg.readout_levels}
        self.bottleneck = _block(cfg.channels(L) + extra.get(L, 0), cfg.channels(L))
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for l in range(L - 1, 0, -1):
            self.up.append(nn.ConvTranspose3d(cfg.channels(l + 1), cfg.channels(l), 2, stride=2))
            self.dec.append(_block(2 * cfg.channels(l) + extra.get(l, 0), cfg.channels(l)))
        self.head = nn.Conv3d(cfg.channels(1), 1, 1)

    # ----------------------------------------------------------------- parts

    def _as_input(self, volume):
        x = torch.as_tensor(volume)
        batched = x.ndim == 5
        if x.ndim == 3:
            x = x[None, None]
        elif x.ndim == 4:
            x, batched = x[:, None], True
        if x.ndim != 5 or x.shape[1] != 1:
            raise ShapeError(f"expected a 3D volume or a batch of them, got shape {tuple(x.shape)}")
        p = next(self.parameters())
        x = x.to(dtype=p.dtype, device=p.device)
        div = 2 ** (self.config.n_levels - 1)
        if any(s % div for s in x.shape[-3:]):
            raise ShapeError(f"volume shape {tuple(x.shape[-3:])} not divisible by {div}")
        return x, batched

    def encode(self, volume) -> FeatureSet:
        """Encoder features; accepts (D,H,W), (B,D,H,W) or (B,1,D,H,W)."""
        x, batched = self._as_input(volume)
        skips = []
        for l, block in enumerate(self.enc, start=1):
            if l > 1:
                x = F.avg_pool3d(x, 2)
            x = block(x)
            skips.append(x)
        keys, values = [], []
        for slot, l in enumerate(self.config.readout_levels):
            keys.append(self.key_proj[slot](skips[l - 1]))
            values.append(self.value_proj[slot](skips[l - 1]))
        return FeatureSet(skips, keys, values, self.config.readout_levels, batched)

    def null_readout(self, features: FeatureSet, i: int = 0) -> list:
        """Readout substitute for sample ``i`` when no memory is available."""
        out = []
        for slot, l in enumerate(self.config.readout_levels):
            n = self.null[slot].reshape(-1, 1, 1, 1).expand(-1, *features.spatial(l))
            out.append(torch.cat([n, n], 0))
        return out

    def read_memory(self, features: FeatureSet, banks, k: int, i: int = 0) -> list:
        """Bi-directional readout for sample ``i``; null readout when both banks are empty."""
        if banks is not None:
            try:
                return bidirectional_read(banks[0], banks[1], [q[i] for q in features.keys], k, list(self.null))
            except EmptyMemoryError:
                pass
        return self.null_readout(features, i)

    def decode_logits(self, features: FeatureSet, readouts: list) -> torch.Tensor:
        """``readouts`` holds one list per batch member, each with a (2*C^v, D', H', W') per slot."""
        cfg = self.config
        L = cfg.n_levels
        if len(readouts) != features.batch_size:
            raise ShapeError(f"{len(readouts)} readouts for a batch of {features.batch_size}")
        by_level = {}
        for slot, l in enumerate(cfg.readout_levels):
            rs = []
            for r in readouts:
                if len(r) != len(cfg.readout_levels):
                    raise ShapeError(f"expected {len(cfg.readout_levels)} readout levels, got {len(r)}")
                if tuple(r[slot].shape[-3:]) != features.spatial(l) or r[slot].shape[0] != 2 * cfg.value_channels:
                    raise ShapeError(
                        f"readout at level {l} has shape {tuple(r[slot].shape)}, expected "
                        f"({2 * cfg.value_channels}, {features.spatial(l)})"
                    )
                rs.append(r[slot])
            by_level[l] = torch.cat([features.values[slot], torch.stack(rs)], 1)
        x = features.skips[L - 1]
        if L in by_level:
            x = torch.cat([x, by_level[L]], 1)
        x = self.bottleneck(x)
        for i, l in enumerate(range(L - 1, 0, -1)):
            x = self.up[i](x)
            if x.shape[-3:] != features.skips[l - 1].shape[-3:]:
                raise ShapeError(f"level {l}: upsampled {tuple(x.shape[-3:])} vs skip {features.spatial(l)}")
            parts = [x, features.skips[l - 1]]
            if l in by_level:
                parts.append(by_level[l])
            x = self.dec[i](torch.cat(parts, 1))
        logits = self.head(x)[:, 0]
        return logits if features.batched else logits[0]

    def decode(self, features: FeatureSet, readouts: list) -> torch.Tensor:
        """Probability map with the encoder input's spatial shape."""
        return torch.sigmoid(self.decode_logits(features, readouts))

    def forward_segment(self, volume, banks=None, k: int = 16):
        """Return (P, FeatureSet) for one volume. ``banks`` is (M_f, M_b) or None."""
        feats = self.encode(volume)
        if feats.batched:
            raise ShapeError("forward_segment takes a single volume; use forward_batch")
        return self.decode(feats, [self.read_memory(feats, banks, k)]), feats

    def forward_batch(self, volumes, bank_views, k: int = 16):
        """Segment B volumes, each reading its own (M_f, M_b) view (or None)."""
        feats = self.encode(volumes)
        if len(bank_views) != feats.batch_size:
            raise ShapeError(f"{len(bank_views)} bank views for a batch of {feats.batch_size}")
        readouts = [self.read_memory(feats, b, k, i) for i, b in enumerate(bank_views)]
        return self.decode(feats, readouts), feats

    def forward(self, volume):
        return self.forward_segment(volume)[0]


# --------------------------------------------------------------------------- parameters


def get_parameters(model: nn.Module) -> "OrderedDict[str, torch.Tensor]":
    """Detached copy of every named parameter."""
    return OrderedDict((n, p.detach().clone()) for n, p in model.named_parameters())


def set_parameters(model: nn.Module, params) -> None:
    own = dict(model.named_parameters())
    if set(own) != set(params):
        raise ShapeError(f"parameter names differ: {sorted(set(own) ^ set(params))[:5]}")
    with torch.no_grad():
        for n, p in own.items():
            if p.shape != params[n].shape:
                raise ShapeError(f"{n}: shape {tuple(params[n].shape)} != {tuple(p.shape)}")
            p.copy_(params[n])


def parameter_digest(params) -> str:
    import hashlib

    h = hashlib.sha256()
    for n, t in params.items():
        h.update(n.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------- checkpoints

_MAGIC = b"VSEGCKPT"


def save_checkpoint(path, tensors: dict, config: dict, step: int) -> Path:
    """Named-tensor file: magic, header length, JSON manifest, little-endian float32 payloads."""
    entries, payloads, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy().astype("<f4")
        raw = arr.tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset,
                        "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps({"config": config, "step": int(step), "tensors": entries}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in payloads:
            f.write(raw)
    return path


def load_checkpoint(path):
    """Return (tensors, config, step)."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: no such checkpoint")
    blob = path.read_bytes()
    if blob[:8] != _MAGIC or len(blob) < 16:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16:16 + n])
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt manifest ({e})") from e
    base = 16 + n
    tensors = OrderedDict()
    for e in header["tensors"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(blob):
            raise CheckpointError(f"{path}: truncated payload for {e['name']}")
        arr = np.frombuffer(blob, dtype="<f4", count=e["nbytes"] // 4, offset=start)
        tensors[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).astype(np.float32))
    return tensors, header["config"], header["step"]


def network_config_dict(cfg: NetworkConfig) -> dict:
    d = asdict(cfg)
    d["readout_levels"] = list(cfg.readout_levels)
    return d
