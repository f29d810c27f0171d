"""Trainers for the four regimes, the warm-up schedule and tiled prediction."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import losses as L
from .data import TileGrid, core_of, oversample_changed, simulate_unchanged, stitch, tile
from .losses import LossWeights
from .networks import (
    ContentFeatureExtractor,
    NetworkConfig,
    Networks,
    Segmentor,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)

REGIMES = ("uscd", "wscd", "rscd", "fscd")


class NonFiniteLoss(RuntimeError):
    """A loss term became NaN or infinite; training was aborted."""


@dataclass
class TrainConfig:
    regime: str = "uscd"
    weights: LossWeights = field(default_factory=LossWeights)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    # uscd stages
    gen_pretrain_epochs: int = 50
    seg_pretrain_epochs: int = 50
    joint_epochs: int = 150
    joint_mode: str = "joint"  # "joint" or "alternating"
    # wscd / rscd
    adversarial_epochs: int = 50
    # fscd
    supervised_epochs: int = 50
    batch_size: int = 10  # uscd stages and fscd
    gen_batch_size: int = 50  # wscd/rscd generator pretraining
    adv_batch_size: int = 20
    lr_gen: float = 1e-4
    lr_seg: float = 1e-4  # Adam (uscd, fscd)
    lr_seg_adv: float = 5e-5  # RMSProp
    lr_disc: float = 5e-6  # RMSProp; 0 freezes the discriminator
    disc_clip: float = 0.0  # clamp discriminator weights to [-c, c] after each update; 0 disables
    warmup_epochs: int = 5
    threshold: float = 0.5
    seed: int = 0
    weight_decay: float = 1e-3  # fscd only
    augment: bool = False  # random flips / quarter turns per batch
    content_layer: int = 29
    content_weights: str | None = None

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.network, dict):
            self.network = NetworkConfig.from_dict(self.network)
        self.validate()

    def validate(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        for f in ("gen_pretrain_epochs", "seg_pretrain_epochs", "joint_epochs", "adversarial_epochs",
                  "supervised_epochs", "warmup_epochs"):
            if getattr(self, f) < 0:
                raise ValueError(f"{f} must be >= 0")
        for f in ("batch_size", "gen_batch_size", "adv_batch_size"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be >= 1")
        for f in ("lr_gen", "lr_seg", "lr_seg_adv"):
            if not getattr(self, f) > 0:
                raise ValueError(f"{f} must be > 0")
        if self.lr_disc < 0:
            raise ValueError("lr_disc must be >= 0")
        if self.disc_clip < 0:
            raise ValueError("disc_clip must be >= 0")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.joint_mode not in ("joint", "alternating"):
            raise ValueError(f"joint_mode must be 'joint' or 'alternating', got {self.joint_mode!r}")
        if self.regime in ("wscd", "rscd") and not self.lr_disc < self.lr_seg_adv:
            raise ValueError("the discriminator learning rate must be lower than the segmentor's")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["network"] = self.network.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainReport:
    """Per-epoch loss series, keyed ``losses[stage][term]``."""

    regime: str
    seed: int
    config: dict
    losses: dict[str, dict[str, list[float]]] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)  # optimizer steps per epoch per stage
    checkpoints: dict[str, str] = field(default_factory=dict)
    wall_time: float = 0.0
    networks: Networks | None = field(default=None, repr=False, compare=False)

    def series(self, stage: str, term: str) -> list[float]:
        return self.losses.get(stage, {}).get(term, [])

    def write_loss_table(self, path: str | Path) -> Path:
        """Tab-delimited ``stage, epoch, term, value`` rows."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t")
            w.writerow(["stage", "epoch", "term", "value"])
            for stage, terms in self.losses.items():
                for term, values in terms.items():
                    for e, v in enumerate(values, 1):
                        w.writerow([stage, e, term, repr(float(v))])
        return path

    @staticmethod
    def read_loss_table(path: str | Path) -> dict[str, dict[str, list[float]]]:
        out: dict[str, dict[str, list[float]]] = {}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh, delimiter="\t"):
                out.setdefault(row["stage"], {}).setdefault(row["term"], []).append(float(row["value"]))
        return out

    def write_manifest(self, path: str | Path) -> Path:
        path = Path(path)
        record = {
            "regime": self.regime,
            "seed": self.seed,
            "config": self.config,
            "steps_per_epoch": self.steps,
            "checkpoints": self.checkpoints,
            "wall_time": self.wall_time,
            "epochs": {s: max((len(v) for v in t.values()), default=0) for s, t in self.losses.items()},
        }
        path.write_text(json.dumps(record, indent=2))
        return path


# -- data containers --------------------------------------------------------

@dataclass
class PairSet:
    """In-memory, already normalized training pairs as float tensors."""

    x: torch.Tensor  # (N, C, H, W)
    y: torch.Tensor
    reference: torch.Tensor | None = None  # (N, H, W) {0, 1}
    region: torch.Tensor | None = None  # (N, H, W) {0, 1}

    def __post_init__(self):
        self.x = torch.as_tensor(np.asarray(self.x), dtype=torch.float32)
        self.y = torch.as_tensor(np.asarray(self.y), dtype=torch.float32)
        if self.x.shape != self.y.shape or self.x.dim() != 4:
            raise ValueError(f"pair tensors must share a (N, C, H, W) shape, got {tuple(self.x.shape)} and {tuple(self.y.shape)}")
        for name in ("reference", "region"):
            v = getattr(self, name)
            if v is not None:
                v = torch.as_tensor(np.asarray(v), dtype=torch.float32)
                if v.shape != (self.x.shape[0],) + self.x.shape[-2:]:
                    raise ValueError(f"{name} must be (N, H, W) matching the pairs, got {tuple(v.shape)}")
                setattr(self, name, v)

    def __len__(self):
        return self.x.shape[0]

    @property
    def bands(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "PairSet":
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        pick = lambda t: None if t is None else t[idx]  # noqa: E731
        return PairSet(self.x[idx], self.y[idx], pick(self.reference), pick(self.region))


def warmup_schedule(base_lr: float, epoch: int, warmup_epochs: int) -> float:
    """Linear ramp from 10% of ``base_lr`` at epoch 0 to ``base_lr`` at ``warmup_epochs``."""
    if warmup_epochs < 0:
        raise ValueError("warmup_epochs must be >= 0")
    if warmup_epochs == 0 or epoch >= warmup_epochs:
        return base_lr
    return base_lr * (0.1 + 0.9 * epoch / warmup_epochs)


# -- helpers ----------------------------------------------------------------

def _seeds(seed: int) -> dict[str, int]:
    init, shuffle, aug = np.random.SeedSequence(seed).spawn(3)
    return {
        "init": int(init.generate_state(1)[0]),
        "shuffle": int(shuffle.generate_state(1)[0]),
        "augment": int(aug.generate_state(1)[0]),
    }


def _set_lr(opt, base_lr, epoch, warmup):
    lr = warmup_schedule(base_lr, epoch, warmup)
    for g in opt.param_groups:
        g["lr"] = lr


def _batches(n: int, batch: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i : i + batch] for i in range(0, n, batch)]


def _augment(rng: np.random.Generator, *tensors):
    """Apply one random dihedral transform to every tensor of a batch (spatial dims last)."""
    k = int(rng.integers(4))
    flip = bool(rng.integers(2))
    out = []
    for t in tensors:
        if t is None:
            out.append(None)
            continue
        t = torch.rot90(t, k, dims=(-2, -1))
        out.append(torch.flip(t, dims=(-1,)) if flip else t)
    return out


def _check_finite(stage: str, epoch: int, terms: dict):
    for name, v in terms.items():
        if isinstance(v, torch.Tensor):
            v = v.detach()
        if not math.isfinite(float(v)):
            raise NonFiniteLoss(f"{stage} epoch {epoch}: loss term '{name}' is {float(v)}")


class _EpochLog:
    def __init__(self):
        self.sums: dict[str, float] = {}
        self.n = 0

    def add(self, terms: dict):
        for k, v in terms.items():
            self.sums[k] = self.sums.get(k, 0.0) + float(v)
        self.n += 1

    def means(self) -> dict[str, float]:
        return {k: v / self.n for k, v in self.sums.items()}


def _record(report: TrainReport, stage: str, means: dict[str, float]):
    series = report.losses.setdefault(stage, {})
    for k, v in means.items():
        series.setdefault(k, []).append(v)


@torch.no_grad()
def _clip_weights(module, c: float):
    if c > 0:
        for p in module.parameters():
            p.clamp_(-c, c)


def _set_trainable(module, flag: bool):
    module.train(flag)
    for p in module.parameters():
        p.requires_grad_(flag)


class _Run:
    """Shared state of one training run."""

    def __init__(self, config: TrainConfig, bands: int, out_dir: str | Path | None):
        if config.network.bands != bands:
            raise ValueError(f"network configured for {config.network.bands} bands, data has {bands}")
        self.config = config
        self.seeds = _seeds(config.seed)
        torch.manual_seed(self.seeds["init"])
        self.nets = Networks(config.network)
        self.shuffle = np.random.default_rng(self.seeds["shuffle"])
        self.aug = np.random.default_rng(self.seeds["augment"])
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.report = TrainReport(config.regime, config.seed, config.to_dict(), networks=self.nets)
        self.extractor = None
        if config.weights.mu_content > 0 and (config.weights.lambda_gen > 0 or config.regime == "uscd"):
            self.extractor = ContentFeatureExtractor(config.content_layer, config.content_weights)
        self.t0 = time.perf_counter()

    def maybe_augment(self, *tensors):
        return _augment(self.aug, *tensors) if self.config.augment else list(tensors)

    def checkpoint(self, stage: str, names: tuple[str, ...], epoch: int):
        if self.out_dir is None:
            return
        for name in names:
            module = getattr(self.nets, name)
            path = self.out_dir / "checkpoints" / f"{stage}_{name}.pt"
            save_checkpoint(module, name, self.config.network, path,
                            regime=self.config.regime, seed=self.config.seed, stage=stage, epoch=epoch)
            self.report.checkpoints[f"{stage}/{name}"] = str(path)
            self.report.checkpoints[name] = str(path)

    def epoch_loop(self, stage: str, epochs: int, steps_per_epoch: int, run_epoch: Callable[[int], _EpochLog]):
        self.report.losses.setdefault(stage, {})
        self.report.steps[stage] = steps_per_epoch
        for epoch in range(epochs):
            elog = run_epoch(epoch)
            means = elog.means()
            _check_finite(stage, epoch, means)
            _record(self.report, stage, means)
            log.info("%s epoch %d/%d %s", stage, epoch + 1, epochs,
                     " ".join(f"{k}={v:.4f}" for k, v in means.items()))

    def finish(self) -> TrainReport:
        for m in (self.nets.segmentor, self.nets.generator, self.nets.discriminator):
            _set_trainable(m, False)
        self.report.wall_time = time.perf_counter() - self.t0
        if self.out_dir is not None:
            self.report.write_loss_table(self.out_dir / "losses.tsv")
            self.report.write_manifest(self.out_dir / "run.json")
        return self.report


def _step_terms(stage, epoch, terms):
    terms = {k: float(v.detach()) for k, v in terms.items()}
    _check_finite(stage, epoch, terms)
    return terms


def _generator_pretrain(run: _Run, data: PairSet, epochs: int, batch: int, use_region: bool, stage="gen_pretrain"):
    """Train the generator alone; the loss mask is zero, or the region reference when ``use_region``."""
    cfg = run.config
    g = run.nets.generator
    _set_trainable(g, True)
    opt = torch.optim.Adam(g.parameters(), lr=cfg.lr_gen)
    n = len(data)

    def run_epoch(epoch):
        _set_lr(opt, cfg.lr_gen, epoch, cfg.warmup_epochs)
        elog = _EpochLog()
        for idx in _batches(n, batch, run.shuffle):
            x, y = data.x[idx], data.y[idx]
            mask = data.region[idx] if use_region else torch.zeros(x.shape[0], *x.shape[-2:])
            x, y, mask = run.maybe_augment(x, y, mask)
            loss = L.generation_loss(g(x), y, mask, cfg.weights.mu_content, run.extractor)
            _check_finite(stage, epoch, {"generation": loss})
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            elog.add({"generation": loss.detach()})
        return elog

    run.epoch_loop(stage, epochs, math.ceil(n / batch), run_epoch)
    _set_trainable(g, False)
    run.checkpoint(stage, ("generator",), epochs)


# -- USCD -------------------------------------------------------------------

def train_uscd(dataset: PairSet, config: TrainConfig, out_dir=None) -> TrainReport:
    """Unsupervised change detection in three stages.

    1. generator alone on whole tiles (empty mask);
    2. segmentor against the frozen generator;
    3. both together on the masked generation loss plus sparsity, either
       updated jointly every step or alternating step by step.
    """
    if len(dataset) == 0:
        raise ValueError("USCD needs at least one training tile")
    cfg = config
    run = _Run(cfg, dataset.bands, out_dir)
    s, g = run.nets.segmentor, run.nets.generator
    n = len(dataset)
    steps = math.ceil(n / cfg.batch_size)

    _generator_pretrain(run, dataset, cfg.gen_pretrain_epochs, cfg.batch_size, use_region=False)

    # stage 2: segmentor only
    _set_trainable(s, True)
    opt_s = torch.optim.Adam(s.parameters(), lr=cfg.lr_seg)

    def seg_epoch(epoch):
        _set_lr(opt_s, cfg.lr_seg, epoch, cfg.warmup_epochs)
        elog = _EpochLog()
        for idx in _batches(n, cfg.batch_size, run.shuffle):
            x, y = run.maybe_augment(dataset.x[idx], dataset.y[idx])
            with torch.no_grad():
                gen = g(x)
            total, terms = L.uscd_loss(gen, y, s(x, y), cfg.weights, run.extractor)
            terms = _step_terms("seg_pretrain", epoch, terms)
            opt_s.zero_grad(set_to_none=True)
            total.backward()
            opt_s.step()
            elog.add(terms)
        return elog

    run.epoch_loop("seg_pretrain", cfg.seg_pretrain_epochs, steps, seg_epoch)
    run.checkpoint("seg_pretrain", ("segmentor",), cfg.seg_pretrain_epochs)

    # stage 3: joint / alternating
    _set_trainable(g, True)
    _set_trainable(s, True)
    opt_s = torch.optim.Adam(s.parameters(), lr=cfg.lr_seg)
    opt_g = torch.optim.Adam(g.parameters(), lr=cfg.lr_gen)
    counter = [0]

    def joint_epoch(epoch):
        _set_lr(opt_s, cfg.lr_seg, epoch, cfg.warmup_epochs)
        _set_lr(opt_g, cfg.lr_gen, epoch, cfg.warmup_epochs)
        elog = _EpochLog()
        for idx in _batches(n, cfg.batch_size, run.shuffle):
            x, y = run.maybe_augment(dataset.x[idx], dataset.y[idx])
            if cfg.joint_mode == "joint":
                total, terms = L.uscd_loss(g(x), y, s(x, y), cfg.weights, run.extractor)
                terms = _step_terms("joint", epoch, terms)
                opt_s.zero_grad(set_to_none=True)
                opt_g.zero_grad(set_to_none=True)
                total.backward()
                opt_s.step()
                opt_g.step()
            elif counter[0] % 2 == 0:
                with torch.no_grad():
                    gen = g(x)
                total, terms = L.uscd_loss(gen, y, s(x, y), cfg.weights, run.extractor)
                terms = _step_terms("joint", epoch, terms)
                opt_s.zero_grad(set_to_none=True)
                total.backward()
                opt_s.step()
            else:
                with torch.no_grad():
                    mask = s(x, y)
                total, terms = L.uscd_loss(g(x), y, mask, cfg.weights, run.extractor)
                terms = _step_terms("joint", epoch, terms)
                opt_g.zero_grad(set_to_none=True)
                total.backward()
                opt_g.step()
            counter[0] += 1
            elog.add(terms)
        return elog

    run.epoch_loop("joint", cfg.joint_epochs, steps, joint_epoch)
    run.checkpoint("joint", ("segmentor", "generator"), cfg.joint_epochs)
    return run.finish()


# -- WSCD -------------------------------------------------------------------

def train_wscd(changed: PairSet, unchanged: PairSet, config: TrainConfig, out_dir=None) -> TrainReport:
    """Weakly supervised training from pair-level labels.

    Phase 1 pretrains the generator on unchanged pairs with Adam (skipped
    when the generation weight is 0, since the generator is then unused).
    Phase 2 alternates RMSProp steps of the discriminator and the segmentor
    over an oversampled schedule that pairs every unchanged pair once per
    epoch with a changed pair; the generator stays frozen.
    """
    if len(changed) == 0 or len(unchanged) == 0:
        raise ValueError("WSCD needs non-empty changed and unchanged pair sets")
    if changed.bands != unchanged.bands:
        raise ValueError("changed and unchanged pairs differ in band count")
    cfg = config
    run = _Run(cfg, changed.bands, out_dir)
    s, d, g = run.nets.segmentor, run.nets.discriminator, run.nets.generator
    w = cfg.weights

    gen_epochs = cfg.gen_pretrain_epochs if w.lambda_gen > 0 else 0
    if gen_epochs:
        _generator_pretrain(run, unchanged, gen_epochs, cfg.gen_batch_size, use_region=False)

    _set_trainable(s, True)
    _set_trainable(d, True)
    opt_s = torch.optim.RMSprop(s.parameters(), lr=cfg.lr_seg_adv)
    opt_d = torch.optim.RMSprop(d.parameters(), lr=cfg.lr_disc)
    n_u = len(unchanged)
    batch = cfg.adv_batch_size

    def adv_epoch(epoch):
        _set_lr(opt_s, cfg.lr_seg_adv, epoch, cfg.warmup_epochs)
        _set_lr(opt_d, cfg.lr_disc, epoch, cfg.warmup_epochs)
        schedule = np.asarray(oversample_changed(range(len(changed)), range(n_u), run.shuffle))
        elog = _EpochLog()
        for i in range(0, n_u, batch):
            ci, ui = schedule[i : i + batch, 0], schedule[i : i + batch, 1]
            xc, yc, xu, yu = run.maybe_augment(changed.x[ci], changed.y[ci], unchanged.x[ui], unchanged.y[ui])
            gen_c = None
            if w.lambda_gen > 0:
                with torch.no_grad():
                    gen_c = g(xc)
            mask_c = s(xc, yc)
            d_total, d_terms = L.wscd_discriminator_loss(d, xc, yc, xu, yu, mask_c)
            _check_finite("adversarial", epoch, {"disc": d_total})
            if cfg.lr_disc > 0:
                opt_d.zero_grad(set_to_none=True)
                d_total.backward()
                opt_d.step()
                _clip_weights(d, cfg.disc_clip)
            mask_u = s(xu, yu)
            s_total, s_terms = L.wscd_segmentor_loss(d, xc, yc, mask_c, mask_u, w, gen_c, run.extractor)
            s_terms = _step_terms("adversarial", epoch, s_terms)
            opt_s.zero_grad(set_to_none=True)
            s_total.backward()
            opt_s.step()
            elog.add({"disc": d_total.detach(), "ldu": d_terms["ldu"].detach(),
                      **{("seg_total" if k == "total" else k): v for k, v in s_terms.items()}})
        return elog

    run.epoch_loop("adversarial", cfg.adversarial_epochs, math.ceil(n_u / batch), adv_epoch)
    run.checkpoint("adversarial", ("segmentor", "discriminator"), cfg.adversarial_epochs)
    if gen_epochs:
        run.checkpoint("final", ("generator",), cfg.adversarial_epochs)
    return run.finish()


# -- RSCD -------------------------------------------------------------------

def train_rscd(pairs: PairSet, config: TrainConfig, out_dir=None) -> TrainReport:
    """Regional supervised training.

    Phase 1 pretrains the generator with the region reference as the loss
    mask. Phase 2 is the adversarial game in which the unchanged sample is
    the pair with the region interior of ``y`` replaced by ``x``.
    """
    if pairs.region is None:
        raise ValueError("RSCD needs a region reference on every pair")
    if len(pairs) == 0:
        raise ValueError("RSCD needs at least one pair")
    cfg = config
    run = _Run(cfg, pairs.bands, out_dir)
    s, d, g = run.nets.segmentor, run.nets.discriminator, run.nets.generator
    w = cfg.weights

    gen_epochs = cfg.gen_pretrain_epochs if w.lambda_gen > 0 else 0
    if gen_epochs:
        _generator_pretrain(run, pairs, gen_epochs, cfg.gen_batch_size, use_region=True)

    _set_trainable(s, True)
    _set_trainable(d, True)
    opt_s = torch.optim.RMSprop(s.parameters(), lr=cfg.lr_seg_adv)
    opt_d = torch.optim.RMSprop(d.parameters(), lr=cfg.lr_disc)
    n = len(pairs)
    batch = cfg.adv_batch_size

    def adv_epoch(epoch):
        _set_lr(opt_s, cfg.lr_seg_adv, epoch, cfg.warmup_epochs)
        _set_lr(opt_d, cfg.lr_disc, epoch, cfg.warmup_epochs)
        elog = _EpochLog()
        for idx in _batches(n, batch, run.shuffle):
            x, y, region = run.maybe_augment(pairs.x[idx], pairs.y[idx], pairs.region[idx])
            region = region.unsqueeze(1)
            y_sim = simulate_unchanged(x, y, region)
            gen = None
            if w.lambda_gen > 0:
                with torch.no_grad():
                    gen = g(x)
            mask = s(x, y)
            d_total, d_terms = L.rscd_discriminator_loss(d, x, y, y_sim, mask)
            _check_finite("adversarial", epoch, {"disc": d_total})
            if cfg.lr_disc > 0:
                opt_d.zero_grad(set_to_none=True)
                d_total.backward()
                opt_d.step()
                _clip_weights(d, cfg.disc_clip)
            s_total, s_terms = L.rscd_segmentor_loss(d, x, y, region, mask, w, gen, run.extractor)
            s_terms = _step_terms("adversarial", epoch, s_terms)
            opt_s.zero_grad(set_to_none=True)
            s_total.backward()
            opt_s.step()
            elog.add({"disc": d_total.detach(), "ldu": d_terms["ldu"].detach(),
                      **{("seg_total" if k == "total" else k): v for k, v in s_terms.items()}})
        return elog

    run.epoch_loop("adversarial", cfg.adversarial_epochs, math.ceil(n / batch), adv_epoch)
    run.checkpoint("adversarial", ("segmentor", "discriminator"), cfg.adversarial_epochs)
    if gen_epochs:
        run.checkpoint("final", ("generator",), cfg.adversarial_epochs)
    return run.finish()


# -- FSCD -------------------------------------------------------------------

def train_fscd(pairs: PairSet, config: TrainConfig, out_dir=None) -> TrainReport:
    """Segmentor alone, BCE against pixel references, Adam with L2 weight decay."""
    if pairs.reference is None:
        raise ValueError("FSCD needs pixel references")
    if len(pairs) == 0:
        raise ValueError("FSCD needs at least one pair")
    cfg = config
    run = _Run(cfg, pairs.bands, out_dir)
    s = run.nets.segmentor
    _set_trainable(s, True)
    opt = torch.optim.Adam(s.parameters(), lr=cfg.lr_seg, weight_decay=cfg.weight_decay)
    n = len(pairs)

    def sup_epoch(epoch):
        _set_lr(opt, cfg.lr_seg, epoch, cfg.warmup_epochs)
        elog = _EpochLog()
        for idx in _batches(n, cfg.batch_size, run.shuffle):
            x, y, ref = run.maybe_augment(pairs.x[idx], pairs.y[idx], pairs.reference[idx])
            loss = L.fscd_loss(s(x, y)[:, 0], ref)
            _check_finite("supervised", epoch, {"bce": loss})
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            elog.add({"bce": loss.detach()})
        return elog

    run.epoch_loop("supervised", cfg.supervised_epochs, math.ceil(n / cfg.batch_size), sup_epoch)
    run.checkpoint("supervised", ("segmentor",), cfg.supervised_epochs)
    return run.finish()


def train(config: TrainConfig, data: dict, out_dir=None) -> TrainReport:
    """Dispatch on ``config.regime``; ``data`` holds the PairSets the trainer needs."""
    if config.regime == "uscd":
        return train_uscd(data["pairs"], config, out_dir)
    if config.regime == "wscd":
        return train_wscd(data["changed"], data["unchanged"], config, out_dir)
    if config.regime == "rscd":
        return train_rscd(data["pairs"], config, out_dir)
    return train_fscd(data["pairs"], config, out_dir)


# -- inference --------------------------------------------------------------

def _segmentor_from(model, bands: int | None) -> Segmentor:
    if isinstance(model, (str, Path)):
        model, meta = load_checkpoint(model, "segmentor")
    if bands is not None and model.bands != bands:
        raise ValueError(f"segmentor was built for {model.bands} bands, pair has {bands}")
    return model


@torch.no_grad()
def predict_proba(model, x: np.ndarray, y: np.ndarray, grid: TileGrid | None = None, batch: int = 8) -> np.ndarray:
    """Change probability (H, W) for one normalized (C, H, W) pair.

    ``model`` is a Segmentor or a checkpoint path. With ``grid`` the pair is
    tiled, each tile is segmented, and only tile cores are stitched back;
    without it the whole pair goes through in one pass.
    """
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.float32)
    if x.shape != y.shape or x.ndim != 3:
        raise ValueError(f"pair rasters must share a (C, H, W) shape, got {x.shape} and {y.shape}")
    seg = _segmentor_from(model, x.shape[0])
    was_training = seg.training
    seg.eval()
    try:
        if grid is None:
            out = seg(torch.from_numpy(x)[None], torch.from_numpy(y)[None])
            return out[0, 0].numpy()
        h, w = x.shape[-2:]
        tx, ty = tile(x, grid), tile(y, grid)
        cores = []
        for i in range(0, len(tx), batch):
            bx = torch.from_numpy(np.stack([t for t, _ in tx[i : i + batch]]))
            by = torch.from_numpy(np.stack([t for t, _ in ty[i : i + batch]]))
            out = seg(bx, by)[:, 0].numpy()
            for o, (_, placement) in zip(out, tx[i : i + batch]):
                cores.append((core_of(o, grid), placement))
        return stitch(cores, h, w)
    finally:
        seg.train(was_training)


def predict(model, x, y, grid: TileGrid | None = None, threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(probability map, binary map)``; binarization is ``prob >= threshold``."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    prob = predict_proba(model, x, y, grid)
    return prob, (prob >= threshold).astype(np.uint8)


def predict_many(model, x: np.ndarray, y: np.ndarray, batch: int = 16) -> np.ndarray:
    """Whole-image probabilities for a (N, C, H, W) stack of equally sized pairs."""
    seg = _segmentor_from(model, x.shape[1])
    was_training = seg.training
    seg.eval()
    out = []
    try:
        with torch.no_grad():
            for i in range(0, len(x), batch):
                bx = torch.as_tensor(np.asarray(x[i : i + batch]), dtype=torch.float32)
                by = torch.as_tensor(np.asarray(y[i : i + batch]), dtype=torch.float32)
                out.append(seg(bx, by)[:, 0].numpy())
    finally:
        seg.train(was_training)
    return np.concatenate(out) if out else np.zeros((0,) + x.shape[-2:], np.float32)


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **kw)
