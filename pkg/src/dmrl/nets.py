"""Anatomical encoder, modality encoder, SPADE decoder and conditional convolution.

Two encoder modes are supported:

* ``conv``: one independent encoder pair per modality.
* ``condconv``: a single encoder pair whose every convolution mixes ``n``
  expert kernels with modality-specific softmax weights.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import tensorio
from .config import ModelConfig, from_dict
from .errors import CheckpointError, ShapeError

Ids = Union[int, torch.Tensor]


def _check_ids(ids: Ids, n: int, m: int) -> torch.Tensor:
    if isinstance(ids, int):
        if not 0 <= ids < m:
            raise ValueError(f"modality_id {ids} out of range for m={m}")
        return torch.full((n,), ids, dtype=torch.long)
    ids = torch.as_tensor(ids, dtype=torch.long).reshape(-1)
    if ids.numel() != n:
        raise ValueError(f"got {ids.numel()} modality ids for a batch of {n}")
    if n and (ids.min() < 0 or ids.max() >= m):
        raise ValueError(f"modality ids must lie in [0, {m}), got {ids.tolist()}")
    return ids


def _grouped(x: torch.Tensor, ids: torch.Tensor, fn) -> torch.Tensor:
    """Apply ``fn(x_group, modality)`` per modality group, preserving batch order."""
    uniq = torch.unique(ids)
    if uniq.numel() == 1:
        return fn(x, int(uniq))
    order = torch.argsort(ids, stable=True)
    pieces = [fn(x[ids == u], int(u)) for u in uniq]
    out = torch.cat(pieces)
    return out[torch.argsort(order)]


def mix_kernels(weight: torch.Tensor, routing_row: torch.Tensor) -> torch.Tensor:
    """Softmax-weighted sum of expert kernels ``weight[n, ...]``."""
    beta = torch.softmax(routing_row, dim=0)
    return torch.tensordot(beta, weight, dims=1)


def cond_conv(
    x: torch.Tensor,
    modality_id: int,
    weight: torch.Tensor,
    routing: torch.Tensor,
    bias: torch.Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> torch.Tensor:
    """Conditional convolution for a single modality.

    The mixed kernel ``sum_k beta_k W_k`` is formed first and a single
    convolution is applied. No activation is applied here.
    """
    if not 0 <= modality_id < routing.shape[0]:
        raise ValueError(f"modality_id {modality_id} out of range for m={routing.shape[0]}")
    if x.shape[1] != weight.shape[2]:
        raise ShapeError(f"input has {x.shape[1]} channels, kernels expect {weight.shape[2]}")
    k = mix_kernels(weight, routing[modality_id])
    b = mix_kernels(bias, routing[modality_id]) if bias is not None else None
    return F.conv2d(x, k, b, stride=stride, padding=padding)


class CondConv2d(nn.Module):
    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        kernel_size: int,
        n_modalities: int,
        n_experts: int = 4,
        stride: int = 1,
        padding: int = 0,
        bias: bool = True,
        sigmoid: bool = False,
    ):
        super().__init__()
        self.stride, self.padding, self.sigmoid = stride, padding, sigmoid
        self.n_modalities, self.n_experts = n_modalities, n_experts
        self.weight = nn.Parameter(torch.empty(n_experts, out_ch, in_ch, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.empty(n_experts, out_ch)) if bias else None
        # zero logits: uniform mixture at start
        self.routing = nn.Parameter(torch.zeros(n_modalities, n_experts))
        self.reset_parameters()

    def reset_parameters(self) -> None:
        fan_in = self.weight[0, 0].numel()
        for k in range(self.n_experts):
            nn.init.kaiming_uniform_(self.weight[k], a=math.sqrt(5))
        if self.bias is not None:
            bound = 1 / math.sqrt(fan_in)
            nn.init.uniform_(self.bias, -bound, bound)

    def forward(self, x: torch.Tensor, ids: Ids) -> torch.Tensor:
        ids = _check_ids(ids, x.shape[0], self.n_modalities)

        def run(xg, i):
            y = cond_conv(xg, i, self.weight, self.routing, self.bias, self.stride, self.padding)
            return torch.sigmoid(y) if self.sigmoid else y

        return _grouped(x, ids, run)


class Conv2d(nn.Conv2d):
    """Plain convolution that accepts (and ignores) modality ids."""

    def forward(self, x, ids=None):  # type: ignore[override]
        return super().forward(x)


def _conv_factory(mode: str, m: int, cfg: ModelConfig):
    if mode == "condconv":

        def make(cin, cout, k, stride=1, padding=0, bias=True):
            return CondConv2d(cin, cout, k, m, cfg.n_experts, stride, padding, bias, cfg.cond_sigmoid)

    elif mode == "conv":

        def make(cin, cout, k, stride=1, padding=0, bias=True):
            return Conv2d(cin, cout, k, stride=stride, padding=padding, bias=bias)

    else:
        raise ValueError(f"unknown encoder mode {mode!r}")
    return make


class ConvBlock(nn.Module):
    """conv -> (BatchNorm) -> activation; optional 2x nearest upsampling first."""

    def __init__(self, conv, norm: bool, act: nn.Module, upsample: bool = False):
        super().__init__()
        self.conv = conv
        self.norm = nn.BatchNorm2d(conv.weight.shape[-4]) if norm else None
        self.act = act
        self.upsample = upsample

    def forward(self, x, ids):
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = self.conv(x, ids)
        if self.norm is not None:
            x = self.norm(x)
        return self.act(x)


class AnatomicalEncoder(nn.Module):
    """U-Net: strided C-blocks, a stride-1 bottleneck, CD-blocks with skips, softmax head."""

    def __init__(self, cfg: ModelConfig, make_conv):
        super().__init__()
        widths = list(cfg.anat_widths)
        self.factor = 2 ** len(widths)
        self.down = nn.ModuleList()
        prev = cfg.in_channels
        for w in widths:
            self.down.append(ConvBlock(make_conv(prev, w, 4, 2, 1, bias=False), True, nn.ReLU()))
            prev = w
        self.bottleneck = ConvBlock(make_conv(prev, cfg.bottleneck_width, 3, 1, 1, bias=False), True, nn.ReLU())
        prev = cfg.bottleneck_width
        self.up = nn.ModuleList()
        for w in reversed(widths):
            # skip of matching resolution is concatenated before upsampling
            self.up.append(ConvBlock(make_conv(prev + w, w, 3, 1, 1, bias=False), True, nn.ReLU(), upsample=True))
            prev = w
        self.head = make_conv(prev, cfg.anat_channels, 1)

    def check_input(self, x: torch.Tensor) -> None:
        H, W = x.shape[-2:]
        if H % self.factor or W % self.factor:
            raise ShapeError(f"anatomical encoder needs H, W divisible by {self.factor}, got {H}x{W}")

    def forward(self, x, ids):
        self.check_input(x)
        skips = []
        for blk in self.down:
            x = blk(x, ids)
            skips.append(x)
        x = self.bottleneck(x, ids)
        for blk, skip in zip(self.up, reversed(skips)):
            x = blk(torch.cat([x, skip], dim=1), ids)
        return torch.softmax(self.head(x, ids), dim=1)


class ModalityEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig, make_conv):
        super().__init__()
        self.layers = nn.ModuleList()
        prev = cfg.in_channels
        for w in cfg.mod_widths:
            self.layers.append(make_conv(prev, w, 3, 2, 1))
            prev = w
        self.min_size = 2 ** len(cfg.mod_widths)
        self.fc = nn.Linear(prev, cfg.z_dim)

    def forward(self, x, ids):
        if min(x.shape[-2:]) < self.min_size:
            raise ShapeError(f"modality encoder needs H, W >= {self.min_size}, got {tuple(x.shape[-2:])}")
        for conv in self.layers:
            x = F.leaky_relu(conv(x, ids), 0.2)
        return self.fc(x.mean(dim=(2, 3)))


class SPADE(nn.Module):
    def __init__(self, norm_nc: int, label_nc: int, hidden: int):
        super().__init__()
        self.param_free_norm = nn.BatchNorm2d(norm_nc, affine=False)
        self.mlp_shared = nn.Sequential(nn.Conv2d(label_nc, hidden, 3, padding=1), nn.ReLU())
        self.mlp_gamma = nn.Conv2d(hidden, norm_nc, 3, padding=1)
        self.mlp_beta = nn.Conv2d(hidden, norm_nc, 3, padding=1)

    def forward(self, x, segmap):
        normalized = self.param_free_norm(x)
        segmap = F.interpolate(segmap, size=x.shape[2:], mode="nearest")
        actv = self.mlp_shared(segmap)
        return normalized * (1 + self.mlp_gamma(actv)) + self.mlp_beta(actv)


class SPADEResBlock(nn.Module):
    def __init__(self, fin: int, fout: int, label_nc: int, hidden: int):
        super().__init__()
        fmid = min(fin, fout)
        self.learned_shortcut = fin != fout
        self.conv_0 = nn.Conv2d(fin, fmid, 3, padding=1)
        self.conv_1 = nn.Conv2d(fmid, fout, 3, padding=1)
        self.norm_0 = SPADE(fin, label_nc, hidden)
        self.norm_1 = SPADE(fmid, label_nc, hidden)
        if self.learned_shortcut:
            self.conv_s = nn.Conv2d(fin, fout, 1, bias=False)
            self.norm_s = SPADE(fin, label_nc, hidden)

    def forward(self, x, seg):
        x_s = self.conv_s(self.norm_s(x, seg)) if self.learned_shortcut else x
        dx = self.conv_0(F.leaky_relu(self.norm_0(x, seg), 0.2))
        dx = self.conv_1(F.leaky_relu(self.norm_1(dx, seg), 0.2))
        return x_s + dx


class Decoder(nn.Module):
    """z seeds a low-resolution map; each upsampling stage is SPADE-conditioned on s."""

    def __init__(self, cfg: ModelConfig, height: int, width: int):
        super().__init__()
        widths = list(cfg.dec_widths)
        self.n_up = len(widths) - 1
        f = 2**self.n_up
        if height % f or width % f:
            raise ShapeError(f"decoder needs H, W divisible by {f}, got {height}x{width}")
        self.height, self.width = height, width
        self.seed_shape = (widths[0], height // f, width // f)
        self.fc = nn.Linear(cfg.z_dim, int(np.prod(self.seed_shape)))
        self.stages = nn.ModuleList(
            SPADEResBlock(widths[k], widths[k + 1], cfg.anat_channels, cfg.spade_hidden) for k in range(self.n_up)
        )
        self.out = nn.Conv2d(widths[-1], cfg.in_channels, 3, padding=1)

    def forward(self, s: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        if tuple(s.shape[-2:]) != (self.height, self.width):
            raise ShapeError(f"decoder configured for {self.height}x{self.width}, got s of {tuple(s.shape[-2:])}")
        x = self.fc(z).view(z.shape[0], *self.seed_shape)
        for stage in self.stages:
            x = stage(F.interpolate(x, scale_factor=2, mode="nearest"), s)
        return self.out(F.leaky_relu(x, 0.2))


@dataclass
class BatchBundle:
    """One forward pass over ``B`` subjects with all ``m`` modalities.

    ``xt[b, i, j] = D(s_i, z_j)``; ``zt[b, j, i] = E^M(xt[b, j, i]; i)`` is the
    code re-encoded from an image synthesised with modality ``i``'s appearance.
    """

    x: torch.Tensor  # (B, m, C, H, W)
    s: torch.Tensor  # (B, m, A, H, W)
    z: torch.Tensor  # (B, m, Z)
    xt: torch.Tensor  # (B, m, m, C, H, W)
    zt: torch.Tensor  # (B, m, m, Z)
    partner: torch.Tensor  # (B,) derangement

    @property
    def m(self) -> int:
        return self.x.shape[1]


class ModelBundle(nn.Module):
    def __init__(self, cfg: ModelConfig, mode: str, m: int, height: int, width: int):
        super().__init__()
        if m < 2:
            raise ValueError("need at least 2 modalities")
        self.cfg, self.mode, self.m = cfg, mode, m
        self.height, self.width = height, width
        make = _conv_factory(mode, m, cfg)
        if mode == "condconv":
            self.anat = AnatomicalEncoder(cfg, make)
            self.mod = ModalityEncoder(cfg, make)
        else:
            self.anat = nn.ModuleList(AnatomicalEncoder(cfg, make) for _ in range(m))
            self.mod = nn.ModuleList(ModalityEncoder(cfg, make) for _ in range(m))
        self.dec = Decoder(cfg, height, width)

    def header(self) -> dict:
        return {"mode": self.mode, "m": self.m, "n": self.cfg.n_experts, "H": self.height, "W": self.width,
                "model": asdict(self.cfg)}

    def _route(self, encoders, x, ids):
        ids = _check_ids(ids, x.shape[0], self.m)
        if self.mode == "condconv":
            return encoders(x, ids)
        return _grouped(x, ids, lambda xg, i: encoders[i](xg, None))

    def encode_anatomy(self, x: torch.Tensor, ids: Ids) -> torch.Tensor:
        first = self.anat if self.mode == "condconv" else self.anat[0]
        first.check_input(x)
        return self._route(self.anat, x, ids)

    def encode_modality(self, x: torch.Tensor, ids: Ids) -> torch.Tensor:
        return self._route(self.mod, x, ids)

    def decode(self, s: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        return self.dec(s, z)

    def translate(self, x_src, src_id: int, x_tgt, tgt_id: int) -> torch.Tensor:
        """Anatomy of ``x_src`` rendered with the appearance code of ``x_tgt``."""
        return self.decode(self.encode_anatomy(x_src, src_id), self.encode_modality(x_tgt, tgt_id))

    def forward_batch(self, x: torch.Tensor, partner: torch.Tensor) -> BatchBundle:
        B, m, C, H, W = x.shape
        if m != self.m:
            raise ShapeError(f"batch has {m} modalities, model expects {self.m}")
        flat = x.reshape(B * m, C, H, W)
        ids = torch.arange(m).repeat(B)
        s = self.encode_anatomy(flat, ids)
        A = s.shape[1]
        s = s.view(B, m, A, H, W)
        z = self.encode_modality(flat, ids).view(B, m, -1)
        Z = z.shape[-1]
        s_rep = s[:, :, None].expand(B, m, m, A, H, W).reshape(-1, A, H, W)
        z_rep = z[:, None, :].expand(B, m, m, Z).reshape(-1, Z)
        xt = self.decode(s_rep, z_rep).view(B, m, m, C, H, W)
        # xt[b, j, i] carries modality i's appearance -> re-encode with id i
        zt = self.encode_modality(xt.reshape(-1, C, H, W), torch.arange(m).repeat(B * m)).view(B, m, m, Z)
        return BatchBundle(x, s, z, xt, zt, partner)


def build_model(cfg: ModelConfig, mode: str, m: int, height: int, width: int, seed: int = 0) -> ModelBundle:
    """Construct a model with parameters fixed by ``seed``."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return ModelBundle(cfg, mode, m, height, width)


# --------------------------------------------------------------------------
# checkpoints


def state_arrays(state: dict, prefix: str = "") -> dict[str, np.ndarray]:
    out = {}
    for k, v in state.items():
        a = v.detach().cpu().numpy()
        out[prefix + k] = a.astype(np.int32) if np.issubdtype(a.dtype, np.integer) else a.astype(np.float32)
    return out


def load_state_arrays(module: nn.Module, tensors: dict[str, np.ndarray], prefix: str = "") -> None:
    target = module.state_dict()
    missing = [k for k in target if prefix + k not in tensors]
    if missing:
        raise CheckpointError(f"checkpoint is missing tensor {prefix + missing[0]!r}")
    new = {}
    for k, ref in target.items():
        arr = tensors[prefix + k]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(f"tensor {prefix + k!r} has shape {arr.shape}, expected {tuple(ref.shape)}")
        new[k] = torch.from_numpy(np.array(arr)).to(ref.dtype)
    module.load_state_dict(new)


def save_model(path: str | Path, model: ModelBundle, header: dict | None = None, extra=None) -> None:
    hdr = {"kind": "encoder", **model.header(), **(header or {})}
    tensors = state_arrays(model.state_dict(), "model/")
    tensors.update(extra or {})
    tensorio.write_archive(path, hdr, tensors)


def load_model(path: str | Path) -> tuple[ModelBundle, dict, dict[str, np.ndarray]]:
    try:
        header, tensors = tensorio.read_archive(path)
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    for key in ("mode", "m", "H", "W", "model"):
        if key not in header:
            raise CheckpointError(f"checkpoint header lacks {key!r}")
    cfg = from_dict(ModelConfig, header["model"])
    model = ModelBundle(cfg, header["mode"], header["m"], header["H"], header["W"])
    load_state_arrays(model, tensors, "model/")
    model.eval()
    return model, header, tensors


def param_digest(module: nn.Module) -> str:
    """sha256 over all parameters and buffers (bitwise)."""
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def expert_routing(model: ModelBundle) -> Sequence[torch.Tensor]:
    return [mod.routing for mod in model.modules() if isinstance(mod, CondConv2d)]
