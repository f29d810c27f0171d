"""Flat run-configuration files and per-dataset presets.

A run config is a flat YAML mapping of the keys in :data:`KEYS`. A
``preset`` key (or ``--preset``) seeds every value from :data:`PRESETS`;
explicit keys override it. Unknown keys are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .data import TileGrid
from .losses import LossWeights
from .networks import NetworkConfig
from .training import TrainConfig


@dataclass(frozen=True)
class Key:
    type: type
    default: Any
    help: str
    source: str = ""  # provenance of the preset values


def _tuple_of_int(v):
    if isinstance(v, str):
        v = [int(p) for p in v.replace(",", " ").split()]
    return tuple(int(p) for p in v)


KEYS: dict[str, Key] = {
    "preset": Key(str, None, "dataset preset: wh, hy, bcd, bcd-an, bcd-gn, oscd, oscd-an, oscd-gn, oscd-fscd, synthetic-<regime>"),
    "regime": Key(str, "uscd", "uscd | wscd | rscd | fscd"),
    "manifest": Key(str, None, "dataset manifest (JSON) written by make-dataset"),
    "output_dir": Key(str, "runs/default", "run directory; relative paths resolve under $FCDGAN_OUTPUT_ROOT when set"),
    "normalization": Key(str, "per_image", "per_image | global band standardization", "USCD per image, WSCD global"),
    "tile_input_size": Key(int, 220, "inference tile size", "220x220 patches"),
    "tile_core_size": Key(int, 200, "central tile core kept in the stitched output", "centred 200x200"),
    "tile_context": Key(int, 10, "context border per side", "10 px overlap"),
    "crop_size": Key(int, 0, "training crop size for single-pair USCD; 0 trains on the inference tiles"),
    "crop_stride": Key(int, 0, "stride between training crops; 0 means crop_size"),
    # loss weights
    "lambda_l1": Key(float, 0.75, "sparsity weight (lambda / lambda_1)", "0.75 WH, 0.65 HY, 1.6 BCD, 0.02 OSCD"),
    "lambda_l2": Key(float, 0.0, "suppression weight lambda_2", "1.5 BCD, 2 OSCD"),
    "lambda_gen": Key(float, 1.0, "generation-loss weight lambda_3 (USCD always 1)", "0.2 BCD, 0.5 OSCD"),
    "mu_content": Key(float, 0.0, "content-loss weight mu", "0.2 WH, 0.65 HY, 0.5 BCD, 0.1 OSCD"),
    "disc_weight": Key(float, 1.0, "weight of the discrimination term; 0 gives the generation-only ablation", "kept 1"),
    # schedule
    "gen_pretrain_epochs": Key(int, 50, "generator pretraining epochs", "50"),
    "seg_pretrain_epochs": Key(int, 50, "USCD segmentor pretraining epochs", "50"),
    "joint_epochs": Key(int, 150, "USCD joint generator+segmentor epochs", "150"),
    "joint_mode": Key(str, "joint", "joint | alternating USCD stage-3 updates"),
    "adversarial_epochs": Key(int, 50, "WSCD/RSCD adversarial epochs", "50"),
    "supervised_epochs": Key(int, 50, "FSCD epochs"),
    "batch_size": Key(int, 10, "USCD and FSCD batch size", "10"),
    "gen_batch_size": Key(int, 50, "WSCD/RSCD generator pretraining batch size", "50"),
    "adv_batch_size": Key(int, 20, "adversarial batch size", "20"),
    "lr_gen": Key(float, 1e-4, "generator Adam learning rate"),
    "lr_seg": Key(float, 1e-4, "segmentor Adam learning rate (USCD, FSCD)"),
    "lr_seg_adv": Key(float, 5e-5, "segmentor RMSProp learning rate (WSCD, RSCD)"),
    "lr_disc": Key(float, 5e-6, "discriminator RMSProp learning rate; must stay below lr_seg_adv", "much lower than the segmentor"),
    "disc_clip": Key(float, 0.0, "clamp discriminator weights to [-c, c] after each update (WGAN-style); 0 disables"),
    "warmup_epochs": Key(int, 5, "linear warm-up length from 10% of the base rate"),
    "weight_decay": Key(float, 1e-3, "FSCD Adam L2 regularization", "0.001"),
    "augment": Key(bool, False, "random flips and quarter turns per batch"),
    "threshold": Key(float, 0.5, "probability threshold for change", "0.5"),
    "seed": Key(int, 0, "master seed fanned out to init/shuffle/augment/synth streams"),
    "content_layer": Key(int, 29, "VGG16 feature index ending the content extractor", "29th layer"),
    "content_weights": Key(str, None, "path to torchvision vgg16 weights (state dict)"),
    # network
    "bands": Key(int, 4, "raster band count", "4 GF-2/OSCD, 3 BCD"),
    "seg_widths": Key(_tuple_of_int, (32, 64, 128, 256), "segmentor encoder widths"),
    "gen_width": Key(int, 64, "generator width"),
    "gen_blocks": Key(int, 8, "generator residual blocks"),
    "disc_widths": Key(_tuple_of_int, (32, 64, 128, 128), "discriminator conv stage widths (<= 4)"),
}

_DESK_NET = {"seg_widths": (16, 32, 64, 128), "gen_width": 32, "gen_blocks": 4, "disc_widths": (16, 32, 64, 64)}
# the adversarial regimes run the segmentor on two pair batches per step, so they get a slimmer one
_DESK_ADV_NET = {**_DESK_NET, "seg_widths": (12, 24, 48, 96)}

PRESETS: dict[str, dict[str, Any]] = {
    "wh": {"regime": "uscd", "lambda_l1": 0.75, "mu_content": 0.2, "batch_size": 10, "gen_pretrain_epochs": 50,
           "seg_pretrain_epochs": 50, "joint_epochs": 150, "normalization": "per_image", "bands": 4},
    "hy": {"regime": "uscd", "lambda_l1": 0.65, "mu_content": 0.65, "batch_size": 10, "gen_pretrain_epochs": 50,
           "seg_pretrain_epochs": 50, "joint_epochs": 150, "normalization": "per_image", "bands": 4},
    "bcd": {"regime": "wscd", "lambda_l1": 1.6, "lambda_l2": 1.5, "lambda_gen": 0.2, "mu_content": 0.5,
            "gen_pretrain_epochs": 50, "adversarial_epochs": 50, "gen_batch_size": 50, "adv_batch_size": 20,
            "normalization": "global", "bands": 3},
    "bcd-an": {"regime": "wscd", "lambda_l1": 0.5, "lambda_l2": 1.5, "lambda_gen": 0.0, "mu_content": 0.5,
               "gen_pretrain_epochs": 50, "adversarial_epochs": 50, "gen_batch_size": 50, "adv_batch_size": 20,
               "normalization": "global", "bands": 3},
    "bcd-gn": {"regime": "wscd", "lambda_l1": 0.5, "lambda_l2": 1.0, "lambda_gen": 1.0, "mu_content": 0.5,
               "disc_weight": 0.0, "gen_pretrain_epochs": 50, "adversarial_epochs": 50, "gen_batch_size": 50,
               "adv_batch_size": 20, "normalization": "global", "bands": 3},
    "oscd": {"regime": "rscd", "lambda_l1": 0.02, "lambda_l2": 2.0, "lambda_gen": 0.5, "mu_content": 0.1,
             "gen_pretrain_epochs": 50, "adversarial_epochs": 50, "gen_batch_size": 50, "adv_batch_size": 20,
             "normalization": "global", "bands": 4},
    "oscd-an": {"regime": "rscd", "lambda_l1": 0.1, "lambda_l2": 2.0, "lambda_gen": 0.0, "mu_content": 0.1,
                "gen_pretrain_epochs": 50, "adversarial_epochs": 50, "gen_batch_size": 50, "adv_batch_size": 20,
                "normalization": "global", "bands": 4},
    "oscd-gn": {"regime": "rscd", "lambda_l1": 0.1, "lambda_l2": 2.0, "lambda_gen": 1.0, "mu_content": 0.1,
                "disc_weight": 0.0, "gen_pretrain_epochs": 50, "adversarial_epochs": 50, "gen_batch_size": 50,
                "adv_batch_size": 20, "normalization": "global", "bands": 4},
    "oscd-fscd": {"regime": "fscd", "weight_decay": 1e-3, "supervised_epochs": 50, "batch_size": 10,
                  "normalization": "global", "bands": 4},
    # desk-scale synthetic benchmarks (64x64 pairs, CPU)
    "synthetic-uscd": {"regime": "uscd", "lambda_l1": 0.5, "mu_content": 0.0, "gen_pretrain_epochs": 20,
                       "seg_pretrain_epochs": 20, "joint_epochs": 40, "batch_size": 10, "lr_gen": 1e-3,
                       "lr_seg": 1e-3, "augment": True, "normalization": "per_image", "crop_size": 32,
                       "crop_stride": 4, "bands": 4, **_DESK_NET},
    "synthetic-wscd": {"regime": "wscd", "lambda_l1": 1.6, "lambda_l2": 1.5, "lambda_gen": 0.0, "mu_content": 0.0,
                       "gen_pretrain_epochs": 20, "adversarial_epochs": 30, "adv_batch_size": 20,
                       "lr_seg_adv": 1e-3, "lr_disc": 1e-4, "augment": True, "normalization": "global",
                       "bands": 4, **_DESK_ADV_NET},
    # per-image standardization cancels the planted gain/offset, so x pasted into R leaves no radiometric seam
    "synthetic-rscd": {"regime": "rscd", "lambda_l1": 0.1, "lambda_l2": 2.0, "lambda_gen": 0.0, "mu_content": 0.0,
                       "gen_pretrain_epochs": 20, "adversarial_epochs": 30, "adv_batch_size": 20,
                       "lr_seg_adv": 1e-3, "lr_disc": 1e-4, "augment": True, "normalization": "per_image",
                       "bands": 4, **_DESK_ADV_NET},
    "synthetic-fscd": {"regime": "fscd", "supervised_epochs": 15, "batch_size": 10, "lr_seg": 1e-3,
                       "weight_decay": 1e-3, "augment": True, "normalization": "per_image", "bands": 4, **_DESK_NET},
}


class ConfigError(ValueError):
    """Invalid run configuration."""


def _coerce(name: str, value):
    key = KEYS[name]
    if value is None:
        return None
    if key.type is bool:
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{name}: expected a boolean, got {value!r}")
        return bool(value)
    try:
        return key.type(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: cannot interpret {value!r}: {exc}") from None


@dataclass
class RunConfig:
    values: dict[str, Any] = field(default_factory=dict)

    def __getitem__(self, k):
        return self.values[k]

    def get(self, k, default=None):
        return self.values.get(k, default)

    @property
    def grid(self) -> TileGrid:
        return TileGrid(self["tile_input_size"], self["tile_core_size"], self["tile_context"])

    def network(self) -> NetworkConfig:
        return NetworkConfig(**{f.name: self[f.name] for f in fields(NetworkConfig)})

    def weights(self) -> LossWeights:
        return LossWeights(**{f.name: self[f.name] for f in fields(LossWeights)})

    def train_config(self) -> TrainConfig:
        skip = {"weights", "network"}
        kw = {f.name: self[f.name] for f in fields(TrainConfig) if f.name not in skip}
        return TrainConfig(weights=self.weights(), network=self.network(), **kw)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.values.items()}


def build_config(overrides: dict | None = None, preset: str | None = None) -> RunConfig:
    """Defaults, then the preset, then ``overrides``; validated eagerly."""
    overrides = dict(overrides or {})
    unknown = sorted(set(overrides) - set(KEYS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    preset = preset or overrides.get("preset")
    values = {k: v.default for k, v in KEYS.items()}
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
        values.update(PRESETS[preset])
        values["preset"] = preset
    for k, v in overrides.items():
        values[k] = _coerce(k, v)
    if values["normalization"] not in ("per_image", "global"):
        raise ConfigError(f"normalization must be per_image or global, got {values['normalization']!r}")
    cfg = RunConfig(values)
    try:
        cfg.grid
        cfg.train_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path: str | Path, preset: str | None = None, extra: dict | None = None) -> RunConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not a valid config file: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a flat key: value mapping")
    nested = [k for k, v in data.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"{path}: config must be flat; nested key(s) {nested}")
    data.update(extra or {})
    return build_config(data, preset)


def describe_keys() -> str:
    """Documentation block for ``--help``."""
    lines = ["config keys (flat YAML, key: value):"]
    for k, key in KEYS.items():
        default = key.default if not isinstance(key.default, tuple) else ",".join(map(str, key.default))
        extra = f" [published: {key.source}]" if key.source else ""
        lines.append(f"  {k:<20} {key.help} (default {default}){extra}")
    return "\n".join(lines)
