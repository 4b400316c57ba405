"""Unsupervised training against the Boltzmann target.

The per-trajectory objective is

    E[H(X_0)] - tau * sum_t h(q(Z_{t-1} | Z_t, m_t))
              + tau * sum_t E[-log p(Z_t | Z_{t-1}, m_t)]
              + tau * sum_t log q(m_t) / p(m_t)

with the entropy and the noise-matching expectation in closed form. The
mask term is exactly zero because both processes share one mask schedule.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .chain import ChainConfig, ChainError, clamp_logvar, reverse_step
from .denoisers import AttentionDenoiser, make_context, save_checkpoint
from .energy import TensorEnergy, energy_discrete_batch
from .masking import MaskSchedule, mask_log_prob, schedule_rate
from .problems import ProblemInstance
from .state import DTYPE, make_generator, softmax_decode

log = logging.getLogger(__name__)

LOG_2PIE = math.log(2 * math.pi * math.e)


class TrainingError(RuntimeError):
    pass


def _logit_mask(mask: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    if mask.shape == like.shape:
        return mask.to(DTYPE)
    return mask[..., None].expand_as(like).to(DTYPE)


def entropy_closed_form(logvar: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """1/2 sum over masked coordinates of (log 2 pi e + log sigma^2); sums the last two axes."""
    m = _logit_mask(mask, logvar)
    lv = torch.where(m > 0, logvar, torch.zeros_like(logvar))
    return 0.5 * (m * (LOG_2PIE + lv)).sum(dim=(-1, -2))


def noise_match_closed_form(Z_t, mu, var, mask, sigma_fwd: float) -> torch.Tensor:
    """E_q[-log p_fwd(Z_t | Z_{t-1}, m)] without the additive constant.

    The dropped constant is d_m * (log sigma_fwd + log(2 pi) / 2) for d_m
    masked coordinates.
    """
    if sigma_fwd <= 0:
        raise TrainingError("forward noise scale must be positive")
    m = _logit_mask(mask, Z_t)
    diff = torch.where(m > 0, Z_t - mu, torch.zeros_like(mu))
    v = torch.where(m > 0, var, torch.zeros_like(var))
    return ((diff**2).sum(dim=(-1, -2)) + v.sum(dim=(-1, -2))) / (2 * sigma_fwd**2)


def noise_match_constant(mask: torch.Tensor, K: int, sigma_fwd: float) -> torch.Tensor:
    d = mask.sum(dim=-1).to(DTYPE) * K
    return d * (math.log(sigma_fwd) + 0.5 * math.log(2 * math.pi))


@dataclass
class LossBreakdown:
    energy_term: float
    entropy_term: float
    noise_match_term: float
    mask_div_term: float
    total: float
    tau: float

    def recompute_total(self, entropy_weight: float = 1.0) -> float:
        return (
            self.energy_term
            - self.tau * entropy_weight * self.entropy_term
            + self.tau * self.noise_match_term
            + self.tau * self.mask_div_term
        )


@dataclass
class TrainConfig:
    epochs: int = 20
    steps_per_epoch: int = 50
    batch_size: int = 64  # the reference setup used 512
    lr: float = 1e-4
    weight_decay: float = 0.01
    dropout: float = 0.1
    T_unroll: int = 5
    estimator: str = "unrolled"  # or "single_step"
    tau_start: float = 1.0
    tau_end: float = 0.01
    entropy_weight: float = 1.0  # 0 trains without the entropy term
    lam: float | None = None
    schedule: str = "geometric"
    rho_min: float = 0.3
    rho_max: float = 0.9
    sigma_fwd: float = 1.0
    base_s: float = 1.0
    grad_clip: float | None = 1.0
    seed: int = 0
    holdout_steps: int = 50
    holdout_runs: int = 1
    checkpoint_every: int = 1

    def __post_init__(self):
        if self.T_unroll < 1:
            raise TrainingError("T_unroll must be >= 1")
        if self.tau_end < 0:
            raise TrainingError("tau_end must be >= 0")
        if self.estimator not in ("unrolled", "single_step"):
            raise TrainingError(f"unknown estimator {self.estimator!r}")

    def schedule_for(self, T: int) -> MaskSchedule:
        return MaskSchedule(self.schedule, self.rho_min, self.rho_max, T)

    def tau_at(self, epoch: int) -> float:
        if self.epochs <= 1:
            return self.tau_start
        frac = epoch / (self.epochs - 1)
        return self.tau_start + (self.tau_end - self.tau_start) * frac


def _base_batch(ctx, n_vars: int, K: int, s: float, rng) -> torch.Tensor:
    B = ctx.frozen.shape[0]
    Z = s * torch.randn(B, n_vars, K, generator=rng, dtype=DTYPE)
    return torch.where(ctx.frozen[..., None], ctx.pattern, Z)


def _uniform_mask(ctx, rho: float, rng):
    rates = (~ctx.frozen).to(DTYPE) * rho
    mask = torch.rand(rates.shape, generator=rng, dtype=DTYPE) < rates
    return mask, rates


class _Batch:
    def __init__(self, instances, lam):
        instances = list(instances)
        self.instances = instances
        self.n, self.K = instances[0].n_vars, instances[0].K
        self.ctx = make_context(instances)
        self.energy = TensorEnergy(instances, lam)


def _prepare(batch, lam) -> _Batch:
    return batch if isinstance(batch, _Batch) else _Batch(batch, lam)


def _step_terms(model, Z, t, sched, batch, config, rng):
    rho = schedule_rate(sched, t)
    mask, rates = _uniform_mask(batch.ctx, rho, rng)
    Z_prev, out = reverse_step(model, Z, mask, t, batch.ctx, rng)
    var = torch.exp(clamp_logvar(out.logvar))
    ent = entropy_closed_form(out.logvar, mask)
    nm = noise_match_closed_form(Z, out.mu, var, mask, config.sigma_fwd)
    # reverse and forward mask laws are both the shared schedule at step t
    fwd_rates = (~batch.ctx.frozen).to(DTYPE) * schedule_rate(sched, t)
    mdiv = mask_log_prob(rates, mask) - mask_log_prob(fwd_rates, mask)
    return Z_prev, ent, nm, mdiv


def _assemble(energy, ent, nm, mdiv, tau, config) -> tuple[torch.Tensor, LossBreakdown]:
    total = energy - tau * config.entropy_weight * ent + tau * nm + tau * mdiv
    for name, val in (("energy", energy), ("entropy", ent), ("noise_match", nm), ("total", total)):
        if not torch.isfinite(val):
            raise TrainingError(f"non-finite {name} term")
    vals = [float(v.detach()) for v in (energy, ent, nm, mdiv, total)]
    bd = LossBreakdown(*vals, float(tau))
    return total, bd


def loss_unrolled(model, instances, config: TrainConfig, rng: torch.Generator, tau: float):
    """Differentiable objective through ``config.T_unroll`` reverse steps.

    Returns ``(loss tensor, LossBreakdown)``; terms are batch means.
    """
    batch = _prepare(instances, config.lam)
    T = config.T_unroll
    sched = config.schedule_for(T)
    Z = _base_batch(batch.ctx, batch.n, batch.K, config.base_s, rng)
    ent = nm = mdiv = 0.0
    for t in range(T, 0, -1):
        Z, e, n_, d = _step_terms(model, Z, t, sched, batch, config, rng)
        ent, nm, mdiv = ent + e, nm + n_, mdiv + d
    energy = batch.energy(softmax_decode(Z)).mean()
    return _assemble(energy, ent.mean(), nm.mean(), mdiv.mean(), tau, config)


def loss_single_step(model, instances, config: TrainConfig, rng: torch.Generator, tau: float, t: int | None = None):
    """One differentiable reverse transition at a sampled step.

    Z_t comes from a gradient-free rollout of the current model from the base
    draw, so it has the same law as the unrolled chain's state at step t.
    The energy term is taken on the decode of the one-step output.
    """
    batch = _prepare(instances, config.lam)
    T = config.T_unroll
    sched = config.schedule_for(T)
    if t is None:
        t = int(torch.randint(1, T + 1, (), generator=rng))
    Z = _base_batch(batch.ctx, batch.n, batch.K, config.base_s, rng)
    with torch.no_grad():
        for s in range(T, t, -1):
            Z, *_ = _step_terms(model, Z, s, sched, batch, config, rng)
    Z_prev, ent, nm, mdiv = _step_terms(model, Z, t, sched, batch, config, rng)
    energy = batch.energy(softmax_decode(Z_prev)).mean()
    return _assemble(energy, ent.mean(), nm.mean(), mdiv.mean(), tau, config)


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    metrics: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None
    status: str = "ok"


METRIC_FIELDS = ["epoch", "energy_term", "entropy_term", "noise_match_term", "total", "tau", "holdout_solved_frac"]


def holdout_solved_fraction(model, instances, steps: int, runs: int = 1, seed: int = 0, chain: ChainConfig | None = None) -> float:
    """Fraction of instances for which some chain state decodes to a feasible assignment."""
    if not instances:
        return math.nan
    base = chain or ChainConfig()
    batch = _Batch(instances * runs, base.lam)
    cfg = ChainConfig(**{**base.__dict__, "T": steps})
    sched = cfg.mask_schedule()
    rng = make_generator(seed)
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    solved = np.zeros(len(instances) * runs, dtype=bool)
    with torch.no_grad():
        Z = _base_batch(batch.ctx, batch.n, batch.K, cfg.base_s, rng)
        for t in range(steps, -1, -1):
            assign = Z.argmax(dim=-1).numpy()
            for b, inst in enumerate(batch.instances):
                if not solved[b]:
                    solved[b] = energy_discrete_batch(assign[b : b + 1], inst)[3][0]
            if t == 0 or solved.all():
                break
            mask, _ = _uniform_mask(batch.ctx, schedule_rate(sched, t), rng)
            Z, _ = reverse_step(model, Z, mask, t, batch.ctx, rng)
    if was_training:
        model.train()
    per_instance = solved.reshape(runs, len(instances)).any(axis=0)
    return float(per_instance.mean())


def train(
    model: AttentionDenoiser,
    sampler: Callable[[np.random.Generator], ProblemInstance],
    config: TrainConfig,
    holdout: list[ProblemInstance] | None = None,
    out_dir=None,
    resume_from=None,
    time_limit: float | None = None,
) -> TrainResult:
    """Optimise ``model`` on instances drawn from ``sampler``.

    Each epoch runs ``steps_per_epoch`` AdamW updates on fresh batches at a
    linearly annealed temperature, then logs the loss terms and the holdout
    solved fraction. Checkpoints carry optimizer and RNG state for resuming.
    """
    torch.manual_seed(config.seed)
    np_rng = np.random.default_rng(config.seed)
    rng = make_generator(config.seed + 1)
    for mod in model.modules():
        if isinstance(mod, torch.nn.Dropout):
            mod.p = config.dropout
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    result = TrainResult()
    start_epoch = 0
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        result.checkpoint = out_dir / "checkpoint.pt"
    if resume_from is not None:
        payload = torch.load(resume_from, weights_only=False)
        model.load_state_dict(payload["state_dict"])
        opt.load_state_dict(payload["optimizer"])
        start_epoch = payload["epoch"] + 1
        rng.set_state(payload["torch_rng"])
        np_rng.bit_generator.state = payload["numpy_rng"]
        result.metrics = list(payload.get("metrics", []))

    def checkpoint(epoch):
        if result.checkpoint is None:
            return
        save_checkpoint(
            result.checkpoint,
            model,
            optimizer=opt.state_dict(),
            epoch=epoch,
            torch_rng=rng.get_state(),
            numpy_rng=np_rng.bit_generator.state,
            metrics=result.metrics,
            train_config=asdict(config),
        )

    if config.epochs == 0 or start_epoch >= config.epochs:
        checkpoint(start_epoch - 1)
        return result

    loss_fn = loss_unrolled if config.estimator == "unrolled" else loss_single_step
    t0 = time.monotonic()
    last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}
    for epoch in range(start_epoch, config.epochs):
        tau = config.tau_at(epoch)
        model.train()
        sums = np.zeros(5)
        for _ in range(config.steps_per_epoch):
            instances = [sampler(np_rng) for _ in range(config.batch_size)]
            try:
                loss, bd = loss_fn(model, instances, config, rng, tau)
            except (TrainingError, ChainError) as exc:
                model.load_state_dict(last_good)
                log.error("training diverged at epoch %d: %s", epoch, exc)
                checkpoint(epoch - 1)
                result.status = "diverged"
                return result
            opt.zero_grad()
            loss.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            sums += [bd.energy_term, bd.entropy_term, bd.noise_match_term, bd.total, bd.mask_div_term]
        last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}
        mean = sums / config.steps_per_epoch
        solved = (
            holdout_solved_fraction(
                model,
                holdout,
                config.holdout_steps,
                config.holdout_runs,
                seed=config.seed,
                chain=ChainConfig(schedule=config.schedule, rho_min=config.rho_min, rho_max=config.rho_max, base_s=config.base_s, lam=config.lam),
            )
            if holdout
            else math.nan
        )
        row = dict(zip(METRIC_FIELDS, [epoch, *mean[:4], tau, solved]))
        result.metrics.append(row)
        log.info("epoch %d tau=%.3f total=%.4f energy=%.4f holdout=%.3f", epoch, tau, mean[3], mean[0], solved)
        if out_dir is not None:
            write_metrics(out_dir / "metrics.csv", result.metrics)
        if (epoch + 1) % config.checkpoint_every == 0 or epoch == config.epochs - 1:
            checkpoint(epoch)
        if time_limit is not None and time.monotonic() - t0 > time_limit:
            checkpoint(epoch)
            result.status = "time_limit"
            break
    return result


def write_metrics(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow(r)
