"""Hybrid-loss adversarial diffusion training and reverse-chain sampling."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .discriminator import Discriminator, DiscriminatorConfig
from .generator import ConfigError, Generator, GeneratorConfig
from .ingest import RoiTimeSeries, SubjectRecord, normalize_series
from .schedule import DiffusionState, NoiseSchedule, build_schedule, coupled_real_pair, posterior_sample

CHECKPOINT_VERSION = "becdiff-ckpt-1"
ABLATIONS = ("no_hierarchy", "sete_as_conv", "single_scale_D", "no_sma", "no_tma")


class NumericalError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    # diffusion
    T: int = 1000
    s: int = 250
    beta_min: float = 1e-4
    beta_max: float = 2e-2
    # generator
    base_channels: int = 2
    heads: int = 2
    levels: int = 2
    blocks_per_level: list = field(default_factory=lambda: [2, 2])
    timestep_embed_dim: int = 16
    ridge_lambda: float = 1e-2
    # discriminator
    d_heads: int = 2
    d_embed_dim: int = 32
    d_timestep: bool = False
    # classifier head
    cls_hidden: int = 64
    # objective
    gamma: float = 1.9
    lambda_rec: float = 100.0
    lambda_cls: float = 1.0
    # optimisation
    lr_g: float = 1e-3
    lr_d: float = 2e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    batch_size: int = 16
    epochs: int = 600
    seed: int = 0
    normalize: bool = True
    dtype: str = "float32"
    checkpoint_every: int = 0
    # ablations
    no_hierarchy: bool = False
    sete_as_conv: bool = False
    single_scale_D: bool = False
    no_sma: bool = False
    no_tma: bool = False

    def validate(self) -> None:
        if self.lr_g < 0 or self.lr_d < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be positive and epochs non-negative")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        if self.sete_as_conv and (self.no_sma or self.no_tma):
            raise ConfigError("sete_as_conv cannot be combined with no_sma/no_tma")
        if self.no_sma and self.no_tma:
            raise ConfigError("no_sma and no_tma together remove the SeTe block entirely")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def generator_config(self, n_rois: int, length: int) -> GeneratorConfig:
        return GeneratorConfig(
            n_rois=n_rois, length=length, base_channels=self.base_channels, heads=self.heads,
            levels=self.levels, blocks_per_level=self.blocks_per_level,
            timestep_embed_dim=self.timestep_embed_dim, ridge_lambda=self.ridge_lambda,
            no_hierarchy=self.no_hierarchy, sete_as_conv=self.sete_as_conv,
            no_sma=self.no_sma, no_tma=self.no_tma)

    def discriminator_config(self, n_rois: int, length: int) -> DiscriminatorConfig:
        return DiscriminatorConfig(
            n_rois=n_rois, length=length, heads=self.d_heads, embed_dim=self.d_embed_dim,
            single_scale=self.single_scale_D, use_timestep=self.d_timestep)

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.T, self.s, self.beta_min, self.beta_max)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    # desk-scale synthetic runs
    "tiny": dict(T=16, s=4, beta_min=1e-3, beta_max=0.3, base_channels=2, heads=1, levels=2,
                 blocks_per_level=[1, 1], d_embed_dim=16, d_heads=2, epochs=100, batch_size=16),
    "desk": dict(T=100, s=25, beta_min=1e-3, beta_max=0.1, base_channels=2, heads=2, levels=2,
                 blocks_per_level=[2, 2], epochs=200),
    "full": dict(T=1000, s=250, base_channels=2, heads=2, levels=5,
                  blocks_per_level=[2, 2, 2, 2, 2], epochs=600, batch_size=16),
}


def preset(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return TrainConfig(**{**PRESETS[name], **overrides})


# ------------------------------------------------------------------- losses


def loss_seg(d_fake):
    return -torch.log(d_fake)


def loss_mdd(d_real, d_fake):
    return -torch.log(d_real) - torch.log1p(-d_fake)


def loss_rec(f0_prime, f0):
    return (f0_prime - f0).abs().mean()


def loss_scp(a, gamma: float):
    """gamma * sum of |A_ij| off the diagonal; one value per matrix."""
    n = a.shape[-1]
    off = 1.0 - torch.eye(n, dtype=a.dtype, device=a.device)
    return gamma * (a.abs() * off).sum(dim=(-2, -1))


def loss_cls(logits, y):
    return F.cross_entropy(logits, y)


class ClassifierHead(nn.Module):
    """Two-layer perceptron over the off-diagonal entries of A."""

    def __init__(self, n_rois: int, n_classes: int, hidden: int = 64):
        super().__init__()
        self.n_rois = n_rois
        self.fc1 = nn.Linear(n_rois * (n_rois - 1), hidden)
        self.fc2 = nn.Linear(hidden, n_classes)
        self.register_buffer("off", ~torch.eye(n_rois, dtype=torch.bool), persistent=False)

    def forward(self, a):
        feats = a[..., self.off]
        return self.fc2(F.gelu(self.fc1(feats)))


# ------------------------------------------------------------------- models


@dataclass
class Models:
    cfg: TrainConfig
    classes: list
    n_rois: int
    length: int
    generator: Generator
    discriminator: Discriminator
    classifier: ClassifierHead
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer

    def modules(self) -> dict:
        return {"generator": self.generator, "discriminator": self.discriminator,
                "classifier": self.classifier}


def build_models(cfg: TrainConfig, n_rois: int, length: int, classes: Sequence[str]) -> Models:
    """Initialise all networks and optimisers from ``cfg.seed``."""
    cfg.validate()
    torch.manual_seed(cfg.seed)
    dtype = cfg.torch_dtype
    g = Generator(cfg.generator_config(n_rois, length)).to(dtype)
    d = Discriminator(cfg.discriminator_config(n_rois, length)).to(dtype)
    c = ClassifierHead(n_rois, len(classes), cfg.cls_hidden).to(dtype)
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    opt_g = torch.optim.Adam(list(g.parameters()) + list(c.parameters()), lr=cfg.lr_g, betas=betas)
    opt_d = torch.optim.Adam(d.parameters(), lr=cfg.lr_d, betas=betas)
    return Models(cfg, list(classes), n_rois, length, g, d, c, opt_g, opt_d)


def prepare_series(x, normalize: bool) -> np.ndarray:
    if isinstance(x, RoiTimeSeries):
        return normalize_series(x).values if normalize else x.values
    x = np.asarray(x, dtype=np.float64)
    return normalize_series(RoiTimeSeries(x)).values if normalize else x


def batch_tensors(batch: Sequence[SubjectRecord], models: Models):
    dtype = models.cfg.torch_dtype
    norm = models.cfg.normalize
    for r in batch:
        if r.clean is None:
            raise ValueError(f"subject {r.id} has no clean series for training")
    f0 = torch.tensor(np.stack([prepare_series(r.clean, norm) for r in batch]), dtype=dtype)
    x = torch.tensor(np.stack([prepare_series(r.rough, norm) for r in batch]), dtype=dtype)
    y = torch.tensor([models.classes.index(r.label) for r in batch], dtype=torch.long)
    return f0, x, y


# --------------------------------------------------------------- train step


@dataclass
class StepMetrics:
    step: int
    t: int
    loss_seg: float
    loss_mdd: float
    loss_rec: float
    loss_scp: float
    loss_cls: float
    total_g: float
    d_real: float
    d_fake: float


def generator_pass(models: Models, x, t: int, f_t, eps, sched: NoiseSchedule):
    """G forward plus the strided posterior jump; returns (F0_hat, A, fake F_{t-s})."""
    f0_hat, a = models.generator(f_t, x, torch.full((f_t.shape[0],), t))
    fake = posterior_sample(DiffusionState(f_t, t), f0_hat, sched, eps).sample
    return f0_hat, a, fake


def generator_losses(models: Models, f0_hat, a, fake, f0, y, t_prev: int):
    """Weighted generator objective and its unweighted parts."""
    cfg = models.cfg
    d_fake = models.discriminator(fake, torch.full((fake.shape[0],), t_prev))
    parts = {
        "loss_seg": loss_seg(d_fake).mean(),
        "loss_rec": loss_rec(f0_hat, f0),
        "loss_scp": loss_scp(a, cfg.gamma).mean(),
        "loss_cls": loss_cls(models.classifier(a), y),
    }
    total = (parts["loss_seg"] + cfg.lambda_rec * parts["loss_rec"] + parts["loss_scp"]
             + cfg.lambda_cls * parts["loss_cls"])
    return total, parts


def discriminator_objective(models: Models, f_prev, fake, t_prev: int):
    n = f_prev.shape[0]
    d_real = models.discriminator(f_prev, torch.full((n,), t_prev))
    d_fake = models.discriminator(fake, torch.full((n,), t_prev))
    return loss_mdd(d_real, d_fake).mean(), d_real, d_fake


def _check(value, step: int, t: int, name: str):
    if not math.isfinite(float(value.detach() if torch.is_tensor(value) else value)):
        raise NumericalError(f"non-finite {name} at step {step} (t={t})")


def train_step(batch: Sequence[SubjectRecord], models: Models, sched: NoiseSchedule,
               rng: torch.Generator, step: int = 0) -> StepMetrics:
    """One discriminator update followed by one generator/classifier update.

    A single diffusion step t is drawn for the whole batch from {s, 2s, ..., T}.
    """
    f0, x, y = batch_tensors(batch, models)
    k = int(torch.randint(1, sched.n_reverse_steps + 1, (1,), generator=rng))
    t = k * sched.s
    f_prev, f_t = coupled_real_pair(f0, t, sched, rng)
    eps = torch.randn(f0.shape, generator=rng, dtype=f0.dtype)

    f0_hat, a, fake = generator_pass(models, x, t, f_t, eps, sched)

    l_mdd, d_real, d_fake = discriminator_objective(models, f_prev, fake.detach(), t - sched.s)
    _check(l_mdd, step, t, "loss_mdd")
    models.opt_d.zero_grad(set_to_none=True)
    l_mdd.backward()
    models.opt_d.step()

    # generator is scored by the freshly updated discriminator
    total, parts = generator_losses(models, f0_hat, a, fake, f0, y, t - sched.s)
    for name, v in parts.items():
        _check(v, step, t, name)
    models.opt_g.zero_grad(set_to_none=True)
    total.backward()
    models.opt_g.step()

    def val(v):
        return float(v.detach())

    return StepMetrics(
        step=step, t=t,
        loss_seg=val(parts["loss_seg"]), loss_mdd=val(l_mdd),
        loss_rec=val(parts["loss_rec"]), loss_scp=val(parts["loss_scp"]),
        loss_cls=val(parts["loss_cls"]), total_g=val(total),
        d_real=val(d_real.mean()), d_fake=val(d_fake.mean()),
    )


# ------------------------------------------------------------ training loop


class Trainer:
    """Owns models, schedule and the seeded stream; runs epochs and checkpoints."""

    def __init__(self, cfg: TrainConfig, records: Sequence[SubjectRecord],
                 classes: Optional[Sequence[str]] = None):
        if not records:
            raise ValueError("no training records")
        self.records = list(records)
        n, d = self.records[0].rough.values.shape
        classes = list(classes) if classes is not None else sorted({r.label for r in records})
        self.models = build_models(cfg, n, d, classes)
        self.sched = cfg.schedule()
        self.rng = torch.Generator().manual_seed(cfg.seed)
        self.step = 0
        self.epoch = 0
        self.history: list[StepMetrics] = []

    @property
    def cfg(self) -> TrainConfig:
        return self.models.cfg

    def run_epoch(self) -> dict:
        order = torch.randperm(len(self.records), generator=self.rng).tolist()
        bs = self.cfg.batch_size
        start = len(self.history)
        for i in range(0, len(order), bs):
            batch = [self.records[j] for j in order[i:i + bs]]
            self.step += 1
            self.history.append(train_step(batch, self.models, self.sched, self.rng, self.step))
        self.epoch += 1
        return epoch_summary(self.epoch, self.history[start:])

    def fit(self, epochs: Optional[int] = None, run_dir=None, max_steps: Optional[int] = None) -> list:
        epochs = self.cfg.epochs if epochs is None else epochs
        log = None
        if run_dir is not None:
            run_dir = Path(run_dir)
            run_dir.mkdir(parents=True, exist_ok=True)
            log = open(run_dir / "metrics.jsonl", "a")
        summaries = []
        try:
            for _ in range(epochs):
                if max_steps is not None and self.step >= max_steps:
                    break
                summary = self.run_epoch()
                summaries.append(summary)
                if log is not None:
                    log.write(json.dumps(summary, sort_keys=True) + "\n")
                    log.flush()
                k = self.cfg.checkpoint_every
                if run_dir is not None and k and self.epoch % k == 0:
                    save_checkpoint(self, run_dir / "checkpoints" / f"epoch_{self.epoch:05d}.pt")
        finally:
            if log is not None:
                log.close()
        return summaries


def epoch_summary(epoch: int, steps: Sequence[StepMetrics]) -> dict:
    keys = ["loss_seg", "loss_mdd", "loss_rec", "loss_scp", "loss_cls", "total_g", "d_real", "d_fake"]
    out = {"epoch": epoch, "steps": len(steps), "last_step": steps[-1].step if steps else 0}
    for k in keys:
        out[k] = float(np.mean([getattr(m, k) for m in steps])) if steps else float("nan")
    return out


# ----------------------------------------------------------------- sampling


class SampleResult(NamedTuple):
    f0: np.ndarray
    bec: np.ndarray
    bec_std: Optional[np.ndarray]
    generator_calls: int


@torch.no_grad()
def sample_bec(x, models: Models, sched: NoiseSchedule, seed: int, n_samples: int = 1) -> SampleResult:
    """Run the T/s-step reverse chain from seeded Gaussian noise.

    The denoised series is the generator's prediction at the last step
    (t = s) and A is estimated from it. With ``n_samples > 1`` the A matrices
    of successive chains are averaged and their per-entry standard deviation
    is returned as well.
    """
    for name, mod in models.modules().items():
        for pname, p in mod.named_parameters():
            if not torch.all(torch.isfinite(p)):
                raise NumericalError(f"{name}.{pname} holds non-finite values")
    dtype = models.cfg.torch_dtype
    xt = torch.tensor(prepare_series(x, models.cfg.normalize), dtype=dtype)
    gen = torch.Generator().manual_seed(int(seed))
    g = models.generator
    was_training = g.training
    g.eval()
    calls = 0
    f0s, becs = [], []
    for _ in range(n_samples):
        f = torch.randn(xt.shape, generator=gen, dtype=dtype)
        state = DiffusionState(f, sched.T)
        for t in sched.reverse_steps:
            f0_hat, a = g(state.sample, xt, t)
            calls += 1
            if t > sched.s:
                eps = torch.randn(xt.shape, generator=gen, dtype=dtype)
                state = posterior_sample(state, f0_hat, sched, eps)
        f0s.append(f0_hat.double().numpy())
        becs.append(a.double().numpy())
    g.train(was_training)
    becs = np.stack(becs)
    std = becs.std(axis=0) if n_samples > 1 else None
    return SampleResult(np.mean(f0s, axis=0), becs.mean(axis=0), std, calls)


# -------------------------------------------------------------- checkpoints


def save_checkpoint(trainer: Trainer, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    m = trainer.models
    torch.save({
        "version": CHECKPOINT_VERSION,
        "config": asdict(m.cfg),
        "classes": m.classes,
        "shape": [m.n_rois, m.length],
        "generator": m.generator.state_dict(),
        "discriminator": m.discriminator.state_dict(),
        "classifier": m.classifier.state_dict(),
        "opt_g": m.opt_g.state_dict(),
        "opt_d": m.opt_d.state_dict(),
        "rng": trainer.rng.get_state(),
        "step": trainer.step,
        "epoch": trainer.epoch,
    }, path)


def _load_state(module: nn.Module, state: dict, namespace: str) -> None:
    own = module.state_dict()
    for name, tensor in own.items():
        if name not in state:
            raise CheckpointError(f"{namespace}.{name} missing from checkpoint")
        if tuple(state[name].shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"{namespace}.{name}: checkpoint shape {tuple(state[name].shape)} "
                f"!= model shape {tuple(tensor.shape)}")
    extra = set(state) - set(own)
    if extra:
        raise CheckpointError(f"{namespace}: unexpected parameters {sorted(extra)}")
    module.load_state_dict(state)


def read_checkpoint(path) -> dict:
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("version") != CHECKPOINT_VERSION:
        found = blob.get("version") if isinstance(blob, dict) else None
        raise CheckpointError(f"checkpoint version {found!r} != {CHECKPOINT_VERSION!r}")
    return blob


def load_checkpoint(path, models: Optional[Models] = None) -> Models:
    """Restore parameters (and optimiser state) into ``models`` or fresh models."""
    blob = read_checkpoint(path)
    if models is None:
        cfg = TrainConfig.from_dict(blob["config"])
        n, d = blob["shape"]
        models = build_models(cfg, n, d, blob["classes"])
    for name, mod in models.modules().items():
        _load_state(mod, blob[name], name)
    models.opt_g.load_state_dict(blob["opt_g"])
    models.opt_d.load_state_dict(blob["opt_d"])
    return models


def resume_trainer(path, records: Sequence[SubjectRecord]) -> Trainer:
    blob = read_checkpoint(path)
    cfg = TrainConfig.from_dict(blob["config"])
    trainer = Trainer(cfg, records, blob["classes"])
    load_checkpoint(path, trainer.models)
    trainer.rng.set_state(blob["rng"])
    trainer.step = blob["step"]
    trainer.epoch = blob["epoch"]
    return trainer
