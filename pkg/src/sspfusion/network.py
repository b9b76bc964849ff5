"""U-shaped fusion backbone: two modality encoders with structure heads, one decoder.

Encoder level k (0-based here) runs at 1/2**k resolution with
``base_channels * 2**k`` channels. Levels after the first start with a 2x2
average-pool. Each level is a 3x3 conv followed by normalization-free residual
blocks; a 1x1 conv + sigmoid head projects every level to a soft structure map.
The decoder upsamples (nearest) from the coarsest fused level and concatenates
each finer fused level as a skip connection.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import spf
from .imagedata import ImagePair
from .structmap import Polarity, structure_pyramid_gt


@dataclass
class ModelConfig:
    n_levels: int = 3
    base_channels: int = 16
    residual_blocks_per_level: int = 2
    seed: int = 0
    merge: str = "sum"
    polarity: str = Polarity.EDGE.value

    def __post_init__(self):
        if self.n_levels < 1:
            raise ValueError("n_levels must be >= 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.residual_blocks_per_level < 0:
            raise ValueError("residual_blocks_per_level must be >= 0")
        if self.merge not in ("sum", "conv"):
            raise ValueError(f"merge must be 'sum' or 'conv', got {self.merge!r}")
        Polarity(self.polarity)

    def channels(self, k: int) -> int:
        return self.base_channels * 2**k

    @property
    def divisor(self) -> int:
        return 2 ** (self.n_levels - 1)


def conv3x3(cin: int, cout: int) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, padding=1)


class ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = conv3x3(ch, ch)
        self.conv2 = conv3x3(ch, ch)

    def forward(self, x):
        return F.relu(x + self.conv2(F.relu(self.conv1(x))))


class Encoder(nn.Module):
    """One modality's structural feature extractor."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.levels = nn.ModuleList()
        self.heads = nn.ModuleList()
        cin = 1
        for k in range(cfg.n_levels):
            ch = cfg.channels(k)
            blocks = [conv3x3(cin, ch), nn.ReLU()]
            blocks += [ResBlock(ch) for _ in range(cfg.residual_blocks_per_level)]
            self.levels.append(nn.Sequential(*blocks))
            self.heads.append(nn.Conv2d(ch, 1, 1))
            cin = ch

    def forward(self, x: torch.Tensor, with_heads: bool = True):
        feats = []
        for k, level in enumerate(self.levels):
            if k:
                x = F.avg_pool2d(x, 2)
            x = level(x)
            feats.append(x)
        soft = [torch.sigmoid(h(f)) for h, f in zip(self.heads, feats)] if with_heads else None
        return feats, soft


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        n = cfg.n_levels
        self.up = nn.ModuleList()
        self.merge = nn.ModuleList()
        for k in range(n - 1):
            self.up.append(conv3x3(cfg.channels(k + 1), cfg.channels(k)))
            self.merge.append(conv3x3(2 * cfg.channels(k), cfg.channels(k)))
        self.out = nn.Conv2d(cfg.channels(0), 1, 1)

    def forward(self, fused: list[torch.Tensor]) -> torch.Tensor:
        if len(fused) != len(self.up) + 1:
            raise ValueError(f"decoder expects {len(self.up) + 1} levels, got {len(fused)}")
        x = fused[-1]
        for k in reversed(range(len(self.up))):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            if x.shape[-2:] != fused[k].shape[-2:]:
                raise ValueError(f"level {k} is {tuple(fused[k].shape)}, upsampled coarse level is {tuple(x.shape)}")
            x = F.relu(self.up[k](x))
            x = F.relu(self.merge[k](torch.cat([x, fused[k]], dim=1)))
        return torch.sigmoid(self.out(x))


class ConvMerge(nn.Module):
    """Learned 1x1 merge of the two enhanced feature levels (alternative to summing)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv2d(2 * cfg.channels(k), cfg.channels(k), 1) for k in range(cfg.n_levels)
        )

    def forward(self, k, e_ir, e_vi):
        return self.convs[k](torch.cat([e_ir, e_vi], dim=1))


@dataclass
class FusionResult:
    fused: torch.Tensor
    soft_ir: list[torch.Tensor] | None
    soft_vi: list[torch.Tensor] | None
    fused_pyramid: list[torch.Tensor] = field(repr=False, default_factory=list)


class SSPFusionNet(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.enc_ir = Encoder(self.cfg)
        self.enc_vi = Encoder(self.cfg)
        self.decoder = Decoder(self.cfg)
        self.conv_merge = ConvMerge(self.cfg) if self.cfg.merge == "conv" else None
        self.reset_parameters(self.cfg.seed)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, nn.Conv2d):
                    nn.init.kaiming_uniform_(m.weight, nonlinearity="relu", generator=gen)
                    nn.init.zeros_(m.bias)

    def check_input(self, x: torch.Tensor) -> None:
        d = self.cfg.divisor
        h, w = x.shape[-2:]
        if h % d or w % d:
            raise ValueError(f"input {h}x{w} not divisible by {d}; pad or crop first")

    def encode(self, x: torch.Tensor, modality: str, with_heads: bool = True):
        self.check_input(x)
        enc = {"ir": self.enc_ir, "vi": self.enc_vi}[modality]
        return enc(x, with_heads)

    def decode(self, fused: list[torch.Tensor]) -> torch.Tensor:
        return self.decoder(fused)

    def parameter_groups(self) -> dict[str, list[str]]:
        """Parameter names per sub-network, used for freezing during pretraining."""
        groups: dict[str, list[str]] = {"encoder": [], "decoder": [], "merge": []}
        for name, _ in self.named_parameters():
            if name.startswith(("enc_ir.", "enc_vi.")):
                groups["encoder"].append(name)
            elif name.startswith("decoder."):
                groups["decoder"].append(name)
            else:
                groups["merge"].append(name)
        return groups

    def forward(
        self,
        ir: torch.Tensor,
        vi: torch.Tensor,
        struct_ir: list[torch.Tensor],
        struct_vi: list[torch.Tensor],
        spf_enabled: bool = True,
        sfe_enabled: bool = True,
    ) -> FusionResult:
        """ir, vi: (B, 1, H, W); struct_*: per-level binary (B, 1, h, w) maps."""
        f_ir, soft_ir = self.encode(ir, "ir", sfe_enabled)
        f_vi, soft_vi = self.encode(vi, "vi", sfe_enabled)
        merge = self.conv_merge if self.conv_merge is not None else spf.sum_merge
        if spf_enabled:
            fused = spf.fuse_pyramids(f_ir, f_vi, struct_ir, struct_vi, merge)
        else:
            fused = [merge(k, a, b) for k, (a, b) in enumerate(zip(f_ir, f_vi))]
        return FusionResult(self.decode(fused), soft_ir, soft_vi, fused)


def structure_batch(imgs: np.ndarray, n_levels: int, polarity=Polarity.EDGE, dtype=torch.float32) -> list[torch.Tensor]:
    """Ground-truth structure pyramids for a (B, H, W) stack as per-level (B, 1, h, w) tensors."""
    pyrs = [structure_pyramid_gt(img, n_levels, polarity) for img in np.asarray(imgs)]
    return [
        torch.from_numpy(np.stack([p.levels[k] for p in pyrs])[:, None].astype(np.float64)).to(dtype)
        for k in range(n_levels)
    ]


def forward_fusion(
    pair: ImagePair,
    model: SSPFusionNet,
    spf_enabled: bool = True,
    sfe_supervision_enabled: bool = True,
) -> FusionResult:
    """Run one registered pair through the network (dimensions must already be divisible)."""
    dtype = next(model.parameters()).dtype
    cfg = model.cfg
    ir = torch.from_numpy(pair.ir_y).to(dtype)[None, None]
    vi = torch.from_numpy(pair.vi_y.copy()).to(dtype)[None, None]
    s_ir = structure_batch(pair.ir_y[None], cfg.n_levels, cfg.polarity, dtype)
    s_vi = structure_batch(pair.vi_y[None], cfg.n_levels, cfg.polarity, dtype)
    return model(ir, vi, s_ir, s_vi, spf_enabled, sfe_supervision_enabled)


def pad_to_multiple(img: np.ndarray, d: int) -> np.ndarray:
    h, w = img.shape[:2]
    ph, pw = (-h) % d, (-w) % d
    widths = [(0, ph), (0, pw)] + [(0, 0)] * (img.ndim - 2)
    return np.pad(img, widths, mode="edge")


@torch.no_grad()
def fuse_pair(model: SSPFusionNet, pair: ImagePair, spf_enabled: bool = True) -> np.ndarray:
    """Fused Y plane at the pair's original size; replicate-pads right/bottom as needed."""
    h, w = pair.shape
    d = model.cfg.divisor
    padded = ImagePair(pad_to_multiple(pair.ir_y, d), pad_to_multiple(pair.vi_yuv, d), pair.pair_id)
    res = forward_fusion(padded, model, spf_enabled, sfe_supervision_enabled=False)
    return res.fused[0, 0, :h, :w].double().numpy()


def _atomic_savez(path: Path, arrays: dict[str, np.ndarray]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp.npz")
    os.close(fd)
    try:
        np.savez(tmp, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def model_arrays(model: SSPFusionNet) -> dict[str, np.ndarray]:
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays["model_config"] = np.array(json.dumps(asdict(model.cfg)))
    return arrays


def save_checkpoint(path, model: SSPFusionNet, extra: dict[str, np.ndarray] | None = None) -> Path:
    """Write an .npz archive: ``param/<name>`` arrays plus a JSON ``model_config`` entry."""
    path = Path(path)
    arrays = model_arrays(model)
    if extra:
        arrays.update(extra)
    _atomic_savez(path, arrays)
    return path


def load_checkpoint(path) -> tuple[SSPFusionNet, dict[str, np.ndarray]]:
    """Rebuild the model; the second value holds every non-parameter entry of the archive."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        data = {k: z[k] for k in z.files}
    cfg = ModelConfig(**json.loads(str(data.pop("model_config"))))
    model = SSPFusionNet(cfg)
    dtype = next(iter(v for k, v in data.items() if k.startswith("param/"))).dtype
    if dtype == np.float64:
        model.double()
    state = {k[len("param/"):]: torch.from_numpy(data.pop(k)) for k in list(data) if k.startswith("param/")}
    model.load_state_dict(state)
    return model, data
