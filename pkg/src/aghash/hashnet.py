"""Hashing networks, the tanh continuation activation, sign quantization,
encoding entry points, and checkpoint files.

A hashing network maps an image to a K-dimensional raw code (the output of
the final code layer, pre-activation). Stage-1 training squashes it with
tanh(beta * .) under a growing beta; retrieval-time encoding thresholds it
with sign (sign(0) = +1).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from ._init import init_layers
from .attention import AttentionNet, AttentionConfig, attend
from .losses import atanh_penalty


@dataclass(frozen=True)
class HashNetConfig:
    image_shape: tuple[int, int, int] = (32, 32, 3)
    code_length: int = 16
    conv_channels: tuple[int, ...] = (16, 32, 64)
    fc_dim: int = 128
    backbone: str = "small"  # "small" or "alexnet"

    def __post_init__(self):
        if self.code_length < 1:
            raise ValueError(f"code_length must be >= 1, got {self.code_length}")
        if self.backbone not in ("small", "alexnet"):
            raise ValueError(f"unknown backbone {self.backbone!r}")


class HashNet(nn.Module):
    """Conv backbone + hidden FC + K-node code layer (`fch`), no activation.

    The small backbone is three stride-2 GELU conv blocks; `alexnet` swaps in
    the torchvision AlexNet feature stack for larger inputs. The fch layer is
    exposed separately so the trainer can give it its own learning rate.
    """

    def __init__(self, config: HashNetConfig = HashNetConfig()):
        super().__init__()
        self.config = config
        h, w, in_ch = config.image_shape
        if config.backbone == "alexnet":
            from torchvision.models import alexnet

            if min(h, w) < 64:
                raise ValueError("alexnet backbone needs images of at least 64x64")
            net = alexnet(weights=None)
            self.features = nn.Sequential(net.features, net.avgpool, nn.Flatten(),
                                          *list(net.classifier[:-1]))
            feat_dim = net.classifier[-1].in_features
        else:
            convs = []
            prev = in_ch
            for ch in config.conv_channels:
                convs.append(nn.Conv2d(prev, ch, 3, stride=2, padding=1))
                prev = ch
            self.convs = nn.ModuleList(convs)
            down = 2 ** len(convs)
            if h % down or w % down:
                raise ValueError(f"image {h}x{w} not divisible by downsampling factor {down}")
            flat = prev * (h // down) * (w // down)
            self.fc = nn.Linear(flat, config.fc_dim)
            self.features = None
            feat_dim = config.fc_dim
        self.fch = nn.Linear(feat_dim, config.code_length)

    def reset_parameters(self, seed: int) -> None:
        init_layers(self, seed, small_std_names=("fch",))

    def fch_parameters(self):
        return self.fch.parameters()

    def backbone_parameters(self):
        fch_ids = {id(p) for p in self.fch.parameters()}
        return [p for p in self.parameters() if id(p) not in fch_ids]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W) images -> (B, K) raw codes."""
        if self.features is not None:
            return self.fch(self.features(x))
        for conv in self.convs:
            x = F.gelu(conv(x))
        x = F.gelu(self.fc(x.flatten(1)))
        return self.fch(x)


@dataclass(frozen=True)
class BetaSchedule:
    """Continuation scale: beta doubles (by `growth`) each epoch from 1 up to a cap."""

    growth: float = 2.0
    beta_max: float = 1024.0

    def __post_init__(self):
        if self.growth <= 1:
            raise ValueError(f"growth must be > 1, got {self.growth}")
        if self.beta_max < 1:
            raise ValueError(f"beta_max must be >= 1, got {self.beta_max}")

    def at_epoch(self, epoch: int) -> float:
        """Beta used during 0-based epoch `epoch`; epoch 0 runs at beta = 1."""
        if epoch < 0:
            raise ValueError(f"epoch must be >= 0, got {epoch}")
        return float(min(self.beta_max, self.growth ** epoch))


def atanh_activate(omega, beta: float, reg: float) -> tuple[torch.Tensor, float]:
    """Continuation activation: code = tanh(beta * omega), plus its penalty.

    The penalty reg * (1/beta)^2 is constant in omega, so it is returned as a
    scalar to be logged/added to the loss rather than baked into the code
    values. As beta grows the code approaches sign(omega) pointwise.
    """
    penalty = atanh_penalty(beta, reg)  # validates beta and reg
    t = torch.as_tensor(omega)
    if not t.is_floating_point():
        t = t.double()
    return torch.tanh(beta * t), penalty


def sign_quantize(omega) -> np.ndarray:
    """Elementwise threshold to {-1, +1}; zero maps to +1."""
    arr = np.asarray(torch.as_tensor(omega).detach().cpu().numpy())
    if not np.isfinite(arr).all():
        raise ValueError("codes must be finite")
    return np.where(arr >= 0, 1, -1).astype(np.int8)


def _to_nchw(images, image_shape) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    if t.ndim == 3:
        t = t[None]
    if t.ndim != 4 or tuple(t.shape[1:]) != tuple(image_shape):
        raise ValueError(f"images shape {tuple(t.shape)} incompatible with {tuple(image_shape)}")
    return t.permute(0, 3, 1, 2).contiguous()


def hash_forward(image, net: HashNet) -> torch.Tensor:
    """Raw K-dim code (fch output, pre-activation) for one H x W x C image."""
    t = torch.as_tensor(image)
    if not t.is_floating_point():
        t = t.double()
    if tuple(t.shape) != tuple(net.config.image_shape):
        raise ValueError(
            f"image shape {tuple(t.shape)} != configured {tuple(net.config.image_shape)}"
        )
    nchw = t.permute(2, 0, 1)[None].to(next(net.parameters()).dtype)
    return net(nchw)[0]


def encode_attention_guided(image, attention_net: AttentionNet, hash_net: HashNet) -> np.ndarray:
    """Attention-guided binary code: sign(hash(attention-composed image))."""
    return encode_attention_guided_many(np.asarray(image)[None], attention_net, hash_net)[0]


def encode_attention_guided_many(images, attention_net: AttentionNet,
                                 hash_net: HashNet) -> np.ndarray:
    """(N, H, W, C) images -> (N, K) {-1,+1} codes through the attention path."""
    nchw = _to_nchw(images, hash_net.config.image_shape)
    with torch.no_grad():
        attended, _ = attend(nchw, attention_net)
        omega = hash_net(attended)
    return sign_quantize(omega)


def encode_final(image, hash_net: HashNet) -> np.ndarray:
    """Final binary code for any image (gallery or unseen query alike)."""
    return encode_final_many(np.asarray(image)[None], hash_net)[0]


def encode_final_many(images, hash_net: HashNet) -> np.ndarray:
    """(N, H, W, C) images -> (N, K) {-1,+1} codes through the plain path."""
    nchw = _to_nchw(images, hash_net.config.image_shape)
    with torch.no_grad():
        omega = hash_net(nchw)
    return sign_quantize(omega)


# ---------------------------------------------------------------------------
# Checkpoints: manifest.json + one raw little-endian float32 blob per network
# ---------------------------------------------------------------------------

_NET_KINDS = {
    "attention": (AttentionNet, AttentionConfig),
    "hash": (HashNet, HashNetConfig),
}


def _net_kind(net: nn.Module) -> str:
    for kind, (cls, _) in _NET_KINDS.items():
        if isinstance(net, cls):
            return kind
    raise ValueError(f"cannot checkpoint network of type {type(net).__name__}")


def save_checkpoint(directory, nets: dict[str, nn.Module], meta: dict | None = None) -> None:
    """Persist named networks plus metadata.

    Writes manifest.json describing each network (kind, construction config,
    and per-tensor name/shape/offset) and one <name>.bin per network holding
    its state_dict tensors concatenated as little-endian float32.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"meta": meta or {}, "networks": {}}
    for name, net in nets.items():
        tensors = []
        offset = 0
        chunks = []
        for tname, tensor in net.state_dict().items():
            arr = tensor.detach().cpu().numpy().astype("<f4")
            tensors.append({"name": tname, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
            chunks.append(arr.reshape(-1))
        blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f4")
        blob_file = f"{name}.bin"
        blob.tofile(directory / blob_file)
        config = asdict(net.config)
        manifest["networks"][name] = {
            "kind": _net_kind(net),
            "config": config,
            "file": blob_file,
            "tensors": tensors,
            "total_floats": int(offset),
        }
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)


def load_checkpoint(directory) -> tuple[dict[str, nn.Module], dict]:
    """Rebuild the networks saved by save_checkpoint(); returns (nets, meta)."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json in {directory}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    nets: dict[str, nn.Module] = {}
    for name, entry in manifest["networks"].items():
        cls, cfg_cls = _NET_KINDS[entry["kind"]]
        raw_cfg = dict(entry["config"])
        for key in ("image_shape", "conv_channels"):
            if key in raw_cfg and raw_cfg[key] is not None:
                raw_cfg[key] = tuple(raw_cfg[key])
        net = cls(cfg_cls(**raw_cfg))
        blob = np.fromfile(directory / entry["file"], dtype="<f4")
        if blob.size != entry["total_floats"]:
            raise OSError(
                f"{directory / entry['file']}: {blob.size} floats, expected {entry['total_floats']}"
            )
        state = {}
        for spec in entry["tensors"]:
            size = int(np.prod(spec["shape"])) if spec["shape"] else 1
            flat = blob[spec["offset"]: spec["offset"] + size]
            state[spec["name"]] = torch.from_numpy(flat.reshape(spec["shape"]).copy())
        net.load_state_dict(state)
        nets[name] = net
    return nets, manifest.get("meta", {})
