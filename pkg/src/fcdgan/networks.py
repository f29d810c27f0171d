"""Segmentor, generator, discriminator and the frozen content feature extractor."""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture of the three trainable networks.

    ``bands`` is the raster band count and sets the first-layer width of the
    segmentor and generator.
    """

    bands: int = 4
    seg_widths: tuple[int, ...] = (32, 64, 128, 256)
    gen_width: int = 64
    gen_blocks: int = 8
    disc_widths: tuple[int, ...] = (32, 64, 128, 128)

    def __post_init__(self):
        if self.bands < 1:
            raise ValueError(f"bands must be >= 1, got {self.bands}")
        if not self.seg_widths or min(self.seg_widths) < 1:
            raise ValueError(f"invalid seg_widths {self.seg_widths}")
        if not 1 <= len(self.disc_widths) <= 4:
            raise ValueError("discriminator must have between 1 and 4 conv stages per branch")
        # tuples survive a JSON round trip as lists
        object.__setattr__(self, "seg_widths", tuple(self.seg_widths))
        object.__setattr__(self, "disc_widths", tuple(self.disc_widths))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


def architecture_hash(kind: str, config: Any) -> str:
    """Stable digest of a network's class and constructor arguments."""
    payload = json.dumps({"kind": kind, "config": config}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _check_pair(x: torch.Tensor, y: torch.Tensor):
    if x.shape != y.shape:
        raise ValueError(f"bi-temporal inputs differ in shape: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.dim() != 4:
        raise ValueError(f"expected (B, C, H, W) tensors, got {x.dim()} dims")


def _double_conv(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class Segmentor(nn.Module):
    """Siamese U-net with concatenate fusion at every encoder level.

    Both temporal images go through the same encoder. The fused features at
    each level form the skip connections of a bilinear-upsampling decoder
    whose sigmoid head yields the change probability map.
    """

    def __init__(self, bands: int = 4, widths=(32, 64, 128, 256)):
        super().__init__()
        widths = tuple(widths)
        self.bands = bands
        self.widths = widths
        self.encoder = nn.ModuleList()
        cin = bands
        for w in widths:
            self.encoder.append(_double_conv(cin, w))
            cin = w
        self.bottom = nn.Sequential(
            nn.Conv2d(2 * widths[-1], widths[-1], 1, bias=False),
            nn.BatchNorm2d(widths[-1]),
            nn.ReLU(inplace=True),
        )
        self.decoder = nn.ModuleList()
        for i in range(len(widths) - 1, 0, -1):
            self.decoder.append(_double_conv(widths[i] + 2 * widths[i - 1], widths[i - 1]))
        self.head = nn.Conv2d(widths[0], 1, 1)

    @property
    def downsampling(self) -> int:
        return 2 ** (len(self.widths) - 1)

    def _encode(self, x):
        feats = []
        for i, block in enumerate(self.encoder):
            if i:
                x = F.max_pool2d(x, 2)
            x = block(x)
            feats.append(x)
        return feats

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        """Return change probabilities shaped (B, 1, H, W)."""
        _check_pair(x, y)
        if x.shape[1] != self.bands:
            raise ValueError(f"segmentor expects {self.bands} bands, got {x.shape[1]}")
        h, w = x.shape[-2:]
        f = self.downsampling
        ph, pw = (-h) % f, (-w) % f
        if ph or pw:
            # reflect padding needs pad < dim; replicate covers tiny inputs
            mode = "reflect" if ph < h and pw < w else "replicate"
            x = F.pad(x, (0, pw, 0, ph), mode=mode)
            y = F.pad(y, (0, pw, 0, ph), mode=mode)
        fx, fy = self._encode(x), self._encode(y)
        z = self.bottom(torch.cat([fx[-1], fy[-1]], 1))
        for j, block in enumerate(self.decoder):
            i = len(fx) - 2 - j
            z = F.interpolate(z, size=fx[i].shape[-2:], mode="bilinear", align_corners=False)
            z = block(torch.cat([z, fx[i], fy[i]], 1))
        out = torch.sigmoid(self.head(z))
        return out[..., :h, :w]


class _ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(width, width, 3, padding=1, bias=False),
            nn.BatchNorm2d(width),
            nn.PReLU(width),
            nn.Conv2d(width, width, 3, padding=1, bias=False),
            nn.BatchNorm2d(width),
        )

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """SRGAN-style residual image-to-image network without upsampling.

    The last layer is a plain convolution: inputs are standardized, so the
    prediction must be free to take any real value.
    """

    def __init__(self, bands: int = 4, width: int = 64, blocks: int = 8):
        super().__init__()
        self.bands = bands
        self.stem = nn.Sequential(nn.Conv2d(bands, width, 9, padding=4), nn.PReLU(width))
        self.blocks = nn.Sequential(*[_ResidualBlock(width) for _ in range(blocks)])
        self.trunk_out = nn.Sequential(
            nn.Conv2d(width, width, 3, padding=1, bias=False),
            nn.BatchNorm2d(width),
        )
        self.out = nn.Conv2d(width, bands, 9, padding=4)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.bands:
            raise ValueError(f"generator expects (B, {self.bands}, H, W), got {tuple(x.shape)}")
        h = self.stem(x)
        return self.out(h + self.trunk_out(self.blocks(h)))


class Discriminator(nn.Module):
    """Shallow Siamese discriminator scoring how "changed" a masked pair looks.

    Each branch is a stack of stride-2 convolutions shared between the two
    inputs; the concatenated features are pooled into a sigmoid scalar. No
    normalization layers, so the score of one pair never depends on the rest
    of the batch.
    """

    def __init__(self, bands: int = 4, widths=(32, 64, 128, 128)):
        super().__init__()
        widths = tuple(widths)
        if len(widths) > 4:
            raise ValueError("at most 4 conv stages per branch")
        self.bands = bands
        layers = []
        cin = bands
        for w in widths:
            layers += [nn.Conv2d(cin, w, 3, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
            cin = w
        self.branch = nn.Sequential(*layers)
        self.fuse = nn.Sequential(nn.Conv2d(2 * cin, cin, 1), nn.LeakyReLU(0.2, inplace=True))
        self.score = nn.Linear(cin, 1)

    def forward(self, xm: torch.Tensor, ym: torch.Tensor) -> torch.Tensor:
        """Return one score in (0, 1) per pair, shaped (B,)."""
        _check_pair(xm, ym)
        z = self.fuse(torch.cat([self.branch(xm), self.branch(ym)], 1))
        z = z.mean(dim=(2, 3))
        return torch.sigmoid(self.score(z)).squeeze(1)


class ContentFeatureExtractor(nn.Module):
    """Frozen VGG16 trunk truncated after ``content_layer``.

    ``weights`` is a path to a torchvision ``vgg16`` state dict. Without one
    the trunk is initialized from a fixed seed, which keeps the loss
    deterministic but not perceptual; a warning says so.
    """

    def __init__(self, content_layer: int = 29, weights: str | Path | None = None):
        super().__init__()
        from torchvision.models.vgg import cfgs, make_layers

        state = torch.random.get_rng_state()
        torch.manual_seed(0)
        features = make_layers(cfgs["D"])  # the VGG16 conv trunk, classifier head never built
        n = len(features)
        if not 0 <= content_layer < n:
            torch.random.set_rng_state(state)
            raise ValueError(f"content_layer must be in [0, {n}), got {content_layer}")
        if weights is not None:
            sd = torch.load(weights, map_location="cpu", weights_only=True)
            features.load_state_dict({k[len("features."):]: v for k, v in sd.items() if k.startswith("features.")})
        else:
            warnings.warn(
                "no pretrained VGG16 weights given; content features come from a seeded random trunk",
                stacklevel=2,
            )
            for m in features.modules():
                if isinstance(m, nn.Conv2d):
                    nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                    nn.init.zeros_(m.bias)
        torch.random.set_rng_state(state)
        self.content_layer = content_layer
        self.features = features[: content_layer + 1]
        for p in self.features.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # always inference mode
        return super().train(False)

    def forward(self, img3: torch.Tensor) -> torch.Tensor:
        if img3.dim() != 4 or img3.shape[1] != 3:
            raise ValueError(f"content extractor takes 3-channel (B, 3, H, W) input, got {tuple(img3.shape)}")
        return self.features(img3)


@dataclass
class Networks:
    """The trainable triple built from one :class:`NetworkConfig`."""

    config: NetworkConfig
    segmentor: Segmentor = field(init=False)
    generator: Generator = field(init=False)
    discriminator: Discriminator = field(init=False)

    def __post_init__(self):
        c = self.config
        self.segmentor = Segmentor(c.bands, c.seg_widths)
        self.generator = Generator(c.bands, c.gen_width, c.gen_blocks)
        self.discriminator = Discriminator(c.bands, c.disc_widths)

    def to(self, dtype=None, device=None) -> "Networks":
        for m in (self.segmentor, self.generator, self.discriminator):
            m.to(device=device, dtype=dtype)
        return self


def network_spec(name: str, config: NetworkConfig) -> dict:
    """Constructor arguments that fully determine one network's architecture."""
    if name == "segmentor":
        return {"bands": config.bands, "widths": list(config.seg_widths)}
    if name == "generator":
        return {"bands": config.bands, "width": config.gen_width, "blocks": config.gen_blocks}
    if name == "discriminator":
        return {"bands": config.bands, "widths": list(config.disc_widths)}
    raise ValueError(f"unknown network {name!r}")


_CLASSES = {"segmentor": Segmentor, "generator": Generator, "discriminator": Discriminator}


def build_network(name: str, config: NetworkConfig) -> nn.Module:
    return _CLASSES[name](**network_spec(name, config))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# -- checkpoints -----------------------------------------------------------

class CheckpointMismatch(ValueError):
    """Raised when a checkpoint's architecture does not match the requested one."""


def save_checkpoint(module: nn.Module, name: str, config: NetworkConfig, path: str | Path, **meta) -> Path:
    """Write ``<path>`` (state dict) and ``<path>.json`` (metadata sidecar).

    The sidecar records the network kind, its constructor spec, the
    architecture hash and any extra fields such as regime, seed and epoch.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    spec = network_spec(name, config)
    torch.save(module.state_dict(), path)
    record = {
        "network": name,
        "arch_hash": architecture_hash(name, spec),
        "spec": spec,
        "bands": config.bands,
        "network_config": config.to_dict(),
        **meta,
    }
    sidecar_path(path).write_text(json.dumps(record, indent=2, sort_keys=True))
    return path


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def read_checkpoint_meta(path: str | Path) -> dict:
    return json.loads(sidecar_path(path).read_text())


def load_checkpoint(path: str | Path, name: str | None = None, config: NetworkConfig | None = None) -> tuple[nn.Module, dict]:
    """Rebuild a network from a checkpoint.

    With ``config`` given, the stored architecture hash must equal the one
    derived from ``config``; otherwise :class:`CheckpointMismatch` is raised.
    """
    meta = read_checkpoint_meta(path)
    stored = meta["network"]
    if name is not None and stored != name:
        raise CheckpointMismatch(f"checkpoint holds a {stored}, expected a {name}")
    spec = meta["spec"]
    if architecture_hash(stored, spec) != meta["arch_hash"]:
        raise CheckpointMismatch("checkpoint sidecar is inconsistent: spec does not hash to arch_hash")
    if config is not None:
        want = architecture_hash(stored, network_spec(stored, config))
        if want != meta["arch_hash"]:
            raise CheckpointMismatch(
                f"architecture hash mismatch for {stored}: checkpoint {meta['arch_hash']}, config {want}"
            )
    module = _CLASSES[stored](**spec)
    module.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    module.eval()
    return module, meta
