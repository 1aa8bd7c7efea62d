"""Training loop: pair sampling, code assignment, gradient routing, Adam,
EMA codebook updates and per-epoch telemetry."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ndcore as nd
from .codebook import ConfigurationError, covariance_loss, ema_update, usage_stats
from .etf import etf_cross_entropy
from .losses import LossWeights, recon_loss, total_loss, zreg_loss
from .networks import (Dims, DmmModel, build_model, encode_input, encode_pair, generate,
                       straight_through)
from .synthdata import DmmDataset

log = logging.getLogger(__name__)

PAPER_SCHEDULE = ((0, 1e-4), (300, 5e-5), (900, 1e-5), (1200, 5e-6))
DESK_SCHEDULE = ((0, 1e-3), (150, 3e-4), (250, 1e-4))


@dataclass
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    epochs: int = 300
    warmup_epochs: int = 20
    batch_size: int = 32
    lr_schedule: Tuple[Tuple[int, float], ...] = DESK_SCHEDULE
    seed: int = 0
    kappa: float = 0.9
    dims: Dims = field(default_factory=Dims)
    fixed_codebook: bool = False
    learnable_classifier: bool = False
    log_recon: bool = True
    checkpoint_every: int = 0

    @property
    def N(self) -> int:
        return self.dims.N

    @property
    def m(self) -> int:
        return self.dims.m

    def validate(self) -> None:
        sched = list(self.lr_schedule)
        if not sched:
            raise ConfigurationError("learning-rate schedule is empty")
        if sched[0][0] != 0:
            raise ConfigurationError("learning-rate schedule must start at epoch 0")
        if any(b[0] <= a[0] for a, b in zip(sched, sched[1:])):
            raise ConfigurationError("learning-rate schedule epochs must be strictly increasing")
        if self.warmup_epochs < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs, warmup_epochs must be >= 0 and batch_size >= 1")
        if self.dims.N >= 2 * self.dims.m or self.dims.m < self.dims.N:
            raise ConfigurationError(f"need N <= m (and N < 2m), got N={self.dims.N}, m={self.dims.m}")

    def to_dict(self) -> dict:
        return {
            "alpha": self.weights.alpha, "beta": self.weights.beta, "gamma": self.weights.gamma,
            "epochs": self.epochs, "warmup_epochs": self.warmup_epochs,
            "batch_size": self.batch_size, "lr_schedule": [list(e) for e in self.lr_schedule],
            "seed": self.seed, "kappa": self.kappa, "dims": self.dims.to_dict(),
            "fixed_codebook": self.fixed_codebook,
            "learnable_classifier": self.learnable_classifier,
            "log_recon": self.log_recon, "checkpoint_every": self.checkpoint_every,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        weights = LossWeights(d.pop("alpha"), d.pop("beta"), d.pop("gamma"))
        dims = Dims.from_dict(d.pop("dims"))
        sched = tuple((int(e), float(r)) for e, r in d.pop("lr_schedule"))
        return cls(weights=weights, dims=dims, lr_schedule=sched, **d)


def paper_preset(**overrides) -> TrainConfig:
    """Hyperparameters of the original full-resolution experiments."""
    cfg = TrainConfig(
        weights=LossWeights(alpha=1.0, beta=0.25, gamma=0.01),
        epochs=1500, warmup_epochs=20, batch_size=32, lr_schedule=PAPER_SCHEDULE,
        dims=Dims(N=256, m=256),
    )
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


def lr_at(schedule: Sequence[Tuple[int, float]], epoch: int) -> float:
    """Rate of the last schedule entry starting at or before ``epoch``."""
    if not schedule:
        raise ConfigurationError("learning-rate schedule is empty")
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    rate = None
    for start, r in schedule:
        if start <= epoch:
            rate = r
        else:
            break
    if rate is None:
        raise ConfigurationError("learning-rate schedule does not cover epoch 0")
    return float(rate)


class Adam:
    """Adam with bias correction; parameters with no gradient see a zero gradient."""

    def __init__(self, params: Dict[str, nd.Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            v *= b2
            if p.grad is not None:
                g = p.grad.astype(m.dtype, copy=False)
                m += (1 - b1) * g
                v += (1 - b2) * (g * g)
            denom = v / c2
            np.sqrt(denom, out=denom)
            denom += self.eps
            step = (lr / c1) * m
            step /= denom
            p.data = (p.data - step).astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> Dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state_arrays(self, arrays: Dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for k in self.params:
            self.m[k] = arrays[f"adam.m.{k}"].copy()
            self.v[k] = arrays[f"adam.v.{k}"].copy()


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, state: dict):
        super().__init__(f"{message}: {state}")
        self.state = state


@dataclass
class StepResult:
    total: float
    recon: float
    ce: float
    zreg: float
    cov: float
    indices: np.ndarray


def forward_losses(x, y, model: DmmModel, weights: LossWeights, warmup: bool,
                   log_recon: bool = False):
    """Build the full objective on the active tape; returns (total, terms, indices, z, code)."""
    latent, h = encode_input(x, model)
    z = encode_pair(x, y, model)
    code, idx = straight_through(z, model.codebook)
    y_hat = generate(latent, code, model)
    terms = {
        "recon": recon_loss(y_hat, np.asarray(y).reshape(y_hat.shape)),
        "ce": etf_cross_entropy(h, model.classifier, idx),
        "zreg": zreg_loss(z, code.data),
        "cov": covariance_loss(model.codebook),
    }
    total = total_loss(terms, weights, warmup=warmup, log_recon=log_recon)
    return total, terms, idx, z, code


def train_step(x, y, model: DmmModel, weights: LossWeights, optimizer: Adam, lr: float,
               warmup: bool, fixed_codebook: bool = False, log_recon: bool = False) -> StepResult:
    """One gradient step on a batch followed by the EMA codebook update."""
    with nd.Tape() as tape:
        total, terms, idx, z, _ = forward_losses(x, y, model, weights, warmup, log_recon)
    values = {k: t.item() for k, t in terms.items()}
    if not all(math.isfinite(v) for v in (*values.values(), total.item())):
        raise TrainingDiverged("non-finite loss", {"total": total.item(), **values,
                                                   "adam_step": optimizer.t, "indices": idx.tolist()})
    optimizer.zero_grad()
    model.codebook.codes.grad = None
    model.etf.M.grad = None
    nd.backward(tape, total)
    optimizer.step(lr)
    if not fixed_codebook:
        ema_update(model.codebook, idx, z.data)
    return StepResult(total.item(), values["recon"], values["ce"], values["zreg"], values["cov"], idx)


@dataclass
class EpochTelemetry:
    epoch: int
    total: float
    recon: float
    ce: float
    zreg: float
    cov: float
    active_code_count: int
    mean_abs_pairwise_inner_product: float
    learning_rate: float


TELEMETRY_COLUMNS = [f.name for f in fields(EpochTelemetry)]


def write_telemetry(path, rows: Sequence[EpochTelemetry], append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with path.open("w" if new else "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(TELEMETRY_COLUMNS)
        for r in rows:
            w.writerow([r.epoch, *(repr(float(getattr(r, c))) for c in TELEMETRY_COLUMNS[1:6]),
                        r.active_code_count, repr(r.mean_abs_pairwise_inner_product),
                        repr(r.learning_rate)])


def read_telemetry(path) -> List[EpochTelemetry]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [EpochTelemetry(int(r["epoch"]), *(float(r[c]) for c in TELEMETRY_COLUMNS[1:6]),
                           int(r["active_code_count"]), float(r["mean_abs_pairwise_inner_product"]),
                           float(r["learning_rate"])) for r in rows]


@dataclass
class TrainState:
    config: TrainConfig
    model: DmmModel
    optimizer: Adam
    rng: np.random.Generator
    epoch: int = 0  # completed epochs
    telemetry: List[EpochTelemetry] = field(default_factory=list)


def init_state(config: TrainConfig) -> TrainState:
    config.validate()
    model = build_model(config.dims, seed=config.seed, kappa=config.kappa,
                        learnable_classifier=config.learnable_classifier)
    opt = Adam(model.trainable(fixed_codebook=config.fixed_codebook))
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(4)[3])
    return TrainState(config, model, opt, rng)


def steps_per_epoch(dataset: DmmDataset, batch_size: int) -> int:
    return max(1, math.ceil(len(dataset.pairs()) / batch_size))


class PairSampler:
    """Uniform with-replacement sampling over (input, label) pairs."""

    def __init__(self, dataset: DmmDataset):
        self.pairs = np.asarray(dataset.pairs(), dtype=np.int64)
        self.inputs = np.stack(dataset.inputs).astype(np.float32)
        h, w = dataset.dims
        self.labels = np.zeros((len(self.pairs), h, w), dtype=np.float32)
        for j, (i, k) in enumerate(self.pairs):
            self.labels[j] = dataset.labels[i][k]

    def sample(self, rng: np.random.Generator, batch_size: int):
        j = rng.integers(len(self.pairs), size=batch_size)
        return self.inputs[self.pairs[j, 0]], self.labels[j]


def run_epoch(state: TrainState, sampler: PairSampler, n_steps: int) -> EpochTelemetry:
    cfg = state.config
    epoch = state.epoch
    lr = lr_at(cfg.lr_schedule, epoch)
    warmup = epoch < cfg.warmup_epochs
    sums = np.zeros(5)
    used: list = []
    for _ in range(n_steps):
        x, y = sampler.sample(state.rng, cfg.batch_size)
        r = train_step(x, y, state.model, cfg.weights, state.optimizer, lr, warmup,
                       fixed_codebook=cfg.fixed_codebook, log_recon=cfg.log_recon)
        sums += (r.total, r.recon, r.ce, r.zreg, r.cov)
        used.append(r.indices)
    active, inner = usage_stats(np.concatenate(used), state.model.codebook)
    means = sums / n_steps
    row = EpochTelemetry(epoch, *map(float, means), active, inner, lr)
    state.epoch += 1
    state.telemetry.append(row)
    return row


def train(config: TrainConfig, dataset: DmmDataset, state: Optional[TrainState] = None,
          checkpoint_fn: Optional[Callable[[TrainState], None]] = None,
          telemetry_path=None) -> TrainState:
    """Run epochs ``state.epoch .. config.epochs - 1``.

    ``checkpoint_fn`` is called every ``config.checkpoint_every`` epochs and at
    completion. Telemetry rows are appended to ``telemetry_path`` as they are
    produced.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if tuple(dataset.dims) != (config.dims.H, config.dims.W):
        raise ConfigurationError(f"dataset dims {dataset.dims} != model dims "
                                 f"{(config.dims.H, config.dims.W)}")
    state = state or init_state(config)
    sampler = PairSampler(dataset)
    n_steps = steps_per_epoch(dataset, config.batch_size)
    if telemetry_path is not None and state.epoch == 0:
        write_telemetry(telemetry_path, [])
    while state.epoch < config.epochs:
        row = run_epoch(state, sampler, n_steps)
        log.info("epoch %d total=%.4f recon=%.4f ce=%.4f active=%d inner=%.3f", row.epoch,
                 row.total, row.recon, row.ce, row.active_code_count,
                 row.mean_abs_pairwise_inner_product)
        if telemetry_path is not None:
            write_telemetry(telemetry_path, [row], append=True)
        every = config.checkpoint_every
        if checkpoint_fn is not None and every and state.epoch % every == 0 \
                and state.epoch < config.epochs:
            checkpoint_fn(state)
    if checkpoint_fn is not None:
        checkpoint_fn(state)
    return state
