"""Outer training loop: adversarial branch, SFT branch and their schedules.

Per batch, each example takes a branch:

* ``bernoulli`` -- adversarial with probability ``p``, otherwise SFT;
* ``multitask`` -- both, adversarial update first, then SFT;
* ``sft_only``  -- SFT always.

Gradients of all examples in a batch are accumulated into one update (two
updates per batch in multitask mode, adversarial then SFT).
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .adversary import InnerLoopConfig, LatConfig, Perturbation, inner_loop_batch, lat_pgd_batch
from .autodiff import ContractViolation, RngStream, Tensor
from .model import Batch, Example, ModelConfig, ParameterSet, batch_losses, init_params, make_batch

log = logging.getLogger(__name__)

MODES = ("bernoulli", "multitask", "sft_only")
ADVERSARIES = ("lap", "lat")
TRAIN_LOG_HEADER = ["step", "branch", "J0", "Jdelta", "delta_norm", "lambda"]


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.0
    warmup_ratio: float = 0.1
    decay: str = "cosine"
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0 or self.eps <= 0:
            raise ContractViolation("optimizer.learning_rate and weight_decay must be >= 0, eps > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ContractViolation("optimizer betas must lie in [0, 1)")
        if not 0 <= self.warmup_ratio < 1:
            raise ContractViolation("optimizer.warmup_ratio must lie in [0, 1)")
        if self.decay not in ("cosine", "constant"):
            raise ContractViolation(f"optimizer.decay must be 'cosine' or 'constant', got {self.decay!r}")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "bernoulli"
    p: float = 0.5
    adversary: str = "lap"
    inner: InnerLoopConfig = field(default_factory=InnerLoopConfig)
    lat: LatConfig = field(default_factory=LatConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 32
    epochs: int = 1
    seed: int = 0
    injection_layer: int | None = None
    perturb_positions: str = "prompt"
    stop_fraction: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractViolation(f"train.mode must be one of {MODES}, got {self.mode!r}")
        if self.adversary not in ADVERSARIES:
            raise ContractViolation(f"train.adversary must be one of {ADVERSARIES}, got {self.adversary!r}")
        if not 0 <= self.p <= 1:
            raise ContractViolation("train.p must lie in [0, 1]")
        if self.batch_size < 1 or self.epochs < 1:
            raise ContractViolation("train.batch_size and train.epochs must be >= 1")
        if self.perturb_positions not in ("prompt", "full"):
            raise ContractViolation("train.perturb_positions must be 'prompt' or 'full'")
        if not 0 < self.stop_fraction <= 1:
            raise ContractViolation("train.stop_fraction must lie in (0, 1]")


# --------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    config: OptimizerConfig
    total_steps: int
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    skipped: int = 0


def init_optimizer(params: ParameterSet, cfg: OptimizerConfig, total_steps: int) -> OptimizerState:
    return OptimizerState(cfg, max(1, total_steps), 0,
                          {k: np.zeros_like(t.data) for k, t in params.items()},
                          {k: np.zeros_like(t.data) for k, t in params.items()})


def learning_rate(state: OptimizerState) -> float:
    """Linear warmup over ``warmup_ratio`` of the steps, then cosine decay to zero."""
    cfg = state.config
    warmup = math.ceil(cfg.warmup_ratio * state.total_steps)
    if state.step < warmup:
        return cfg.learning_rate * (state.step + 1) / warmup
    if cfg.decay == "constant":
        return cfg.learning_rate
    progress = (state.step - warmup) / max(1, state.total_steps - warmup)
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))


def apply_gradients(params: ParameterSet, grads: dict[str, np.ndarray],
                    state: OptimizerState) -> tuple[ParameterSet, OptimizerState]:
    """One decoupled-weight-decay Adam step. Non-finite gradients skip the update."""
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        log.warning("non-finite gradient at optimizer step %d; update skipped", state.step)
        return params, OptimizerState(state.config, state.total_steps, state.step, state.m, state.v, state.skipped + 1)
    cfg = state.config
    t = state.step + 1
    lr = learning_rate(state)
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    new_arrays, new_m, new_v = {}, {}, {}
    for name, tensor in params.items():
        p = tensor.data
        g = grads[name].astype(p.dtype, copy=False)
        m = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g * g
        step = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if cfg.weight_decay:
            step = step + cfg.weight_decay * p
        new_arrays[name] = (p - lr * step).astype(p.dtype, copy=False)
        new_m[name], new_v[name] = m.astype(p.dtype, copy=False), v.astype(p.dtype, copy=False)
    return params.with_arrays(new_arrays), OptimizerState(cfg, state.total_steps, t, new_m, new_v, state.skipped)


def _gradients(params: ParameterSet, batch: Batch, delta: np.ndarray | None,
               layer: int | None) -> tuple[dict[str, np.ndarray], np.ndarray]:
    pt = params.tracked()
    d = None if delta is None else Tensor(delta, dtype=delta.dtype)
    losses = batch_losses(pt, batch, d, layer)
    if not np.all(np.isfinite(losses.data)):
        nan = {k: np.full_like(v.data, np.nan) for k, v in params.items()}
        return nan, losses.data
    grads = ad.backward(losses.mean(), wrt=list(pt.values()))
    return {name: grads[pt[name]].data for name in pt}, losses.data


def _as_list(examples) -> list[Example]:
    return [examples] if isinstance(examples, Example) else list(examples)


def sft_step(params: ParameterSet, examples: Example | Sequence[Example],
             state: OptimizerState) -> tuple[ParameterSet, OptimizerState]:
    """One optimizer update on the plain response loss."""
    batch = make_batch(_as_list(examples), params.config)
    grads, _ = _gradients(params, batch, None, None)
    return apply_gradients(params, grads, state)


def _full_delta(batch: Batch, perturbations: Sequence[Perturbation | None], d_model: int, dtype) -> np.ndarray:
    full = np.zeros(batch.tokens.shape + (d_model,), dtype=dtype)
    for i, pert in enumerate(perturbations):
        if pert is None:
            continue
        rows = np.flatnonzero(batch.perturb_mask[i])
        if pert.delta.dims != (rows.size, d_model):
            raise ContractViolation(f"perturbation {i} has dims {pert.delta.dims}, expected {(rows.size, d_model)}")
        full[i, rows] = pert.delta.data
    return full


def outer_step(params: ParameterSet, examples: Example | Sequence[Example],
               perturbations: Perturbation | Sequence[Perturbation],
               state: OptimizerState, positions: str = "prompt") -> tuple[ParameterSet, OptimizerState]:
    """One optimizer update on the perturbed loss with every perturbation held constant."""
    examples = _as_list(examples)
    perts = [perturbations] if isinstance(perturbations, Perturbation) else list(perturbations)
    if len(perts) != len(examples):
        raise ContractViolation("one perturbation per example is required")
    layers = {p.inject_layer for p in perts}
    if len(layers) != 1:
        raise ContractViolation("all perturbations in one step must share an injection layer")
    batch = make_batch(examples, params.config, positions)
    dtype = next(iter(params.values())).data.dtype
    delta = _full_delta(batch, perts, params.config.d_model, dtype)
    grads, _ = _gradients(params, batch, delta, layers.pop())
    return apply_gradients(params, grads, state)


# --------------------------------------------------------------------------
# full loop


@dataclass
class StepRecord:
    step: int
    branch: str
    j0: float
    jdelta: float | None = None
    delta_norm: float | None = None
    lam: float | None = None


@dataclass
class TrainLog:
    records: list[StepRecord] = field(default_factory=list)
    wall_clock: float = 0.0
    seed: int = 0

    def branch_counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.records:
            out[r.branch] = out.get(r.branch, 0) + 1
        return out

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRAIN_LOG_HEADER)
            for r in self.records:
                w.writerow([r.step, r.branch, repr(r.j0), _fmt(r.jdelta), _fmt(r.delta_norm), _fmt(r.lam)])
        return path


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(float(v))


@dataclass
class TrainResult:
    params: ParameterSet
    log: TrainLog
    optimizer: OptimizerState


def total_steps(n_examples: int, cfg: TrainConfig) -> int:
    per_batch = 2 if cfg.mode == "multitask" else 1
    return cfg.epochs * math.ceil(n_examples / cfg.batch_size) * per_batch


def _adversarial(params: ParameterSet, batch: Batch, cfg: TrainConfig, rngs: list[RngStream], layer: int):
    """Run the configured inner loop; returns (full delta, per-row stats, failed mask)."""
    if cfg.adversary == "lat":
        delta = lat_pgd_batch(params, batch, cfg.lat, rngs, layer)
        j0 = batch_losses(params.frozen(), batch).data
        norms = np.sqrt(np.sum(np.square(delta.astype(np.float64)), axis=(1, 2)))
        return delta, j0, norms, np.full(len(batch), np.nan), np.zeros(len(batch), dtype=bool)
    res = inner_loop_batch(params, batch, cfg.inner, rngs, layer)
    norms = np.sqrt(np.sum(np.square(res.delta.astype(np.float64)), axis=(1, 2)))
    lam = np.zeros(len(batch)) if cfg.inner.fix_lambda_zero else np.exp(res.log_lambda)
    delta = res.delta.copy()
    delta[res.failed] = 0
    return delta, res.j_0, norms, lam, res.failed


def train(dataset: Sequence[Example], cfg: TrainConfig, model: ModelConfig | ParameterSet) -> TrainResult:
    """Run the outer loop over ``dataset`` for ``cfg.epochs`` epochs.

    ``model`` is either a config (fresh init from the seed) or starting weights.
    """
    if not dataset:
        raise ContractViolation("training dataset is empty")
    started = time.perf_counter()
    root = RngStream(cfg.seed)
    params = init_params(model, root.child("model")) if isinstance(model, ModelConfig) else model
    mcfg = params.config
    layer = mcfg.default_injection_layer if cfg.injection_layer is None else cfg.injection_layer
    if not 0 <= layer <= mcfg.n_layers:
        raise ContractViolation(f"train.injection_layer {layer} outside [0, {mcfg.n_layers}]")

    n = len(dataset)
    n_batches = math.ceil(n / cfg.batch_size)
    total = total_steps(n, cfg)
    stop_at = math.ceil(cfg.stop_fraction * total)
    state = init_optimizer(params, cfg.optimizer, total)
    train_log = TrainLog(seed=cfg.seed)
    dtype = next(iter(params.values())).data.dtype

    for epoch in range(cfg.epochs):
        order = root.child("shuffle", epoch).generator().permutation(n)
        for b in range(n_batches):
            if state.step + state.skipped >= stop_at:
                break
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            examples = [dataset[i] for i in idx]
            batch = make_batch(examples, mcfg, cfg.perturb_positions)
            step = state.step + state.skipped

            if cfg.mode == "sft_only":
                adv = np.zeros(len(idx), dtype=bool)
            elif cfg.mode == "multitask":
                adv = np.ones(len(idx), dtype=bool)
            else:
                adv = root.child("branch", epoch, b).generator().random(len(idx)) < cfg.p

            delta = None
            stats = {}
            if adv.any():
                rows = np.flatnonzero(adv)
                rngs = [root.child("inner", epoch, b, int(k)) for k in rows]
                sub_batch = make_batch([examples[k] for k in rows], mcfg, cfg.perturb_positions)
                sub_delta, j0, norms, lam, failed = _adversarial(params, sub_batch, cfg, rngs, layer)
                if failed.any():
                    log.warning("falling back to SFT for %d example(s) in epoch %d batch %d",
                                int(failed.sum()), epoch, b)
                delta = np.zeros(batch.tokens.shape + (mcfg.d_model,), dtype=dtype)
                width = sub_delta.shape[1]
                for j, k in enumerate(rows):
                    if failed[j]:
                        adv[k] = False
                        continue
                    delta[k, :width] = sub_delta[j]
                    stats[int(k)] = (float(j0[j]), float(norms[j]), float(lam[j]))

            if cfg.mode == "multitask":
                grads, losses = _gradients(params, batch, delta, layer)
                params, state = apply_gradients(params, grads, state)
                grads, sft_losses = _gradients(params, batch, None, None)
                params, state = apply_gradients(params, grads, state)
                for k in range(len(idx)):
                    if k in stats:
                        j0, norm, lam = stats[k]
                        train_log.records.append(StepRecord(step, "adversarial", j0, float(losses[k]), norm, lam))
                    else:
                        train_log.records.append(StepRecord(step, "sft", float(losses[k])))
                    train_log.records.append(StepRecord(step + 1, "sft", float(sft_losses[k])))
                continue

            use_delta = delta if adv.any() else None
            grads, losses = _gradients(params, batch, use_delta, layer if use_delta is not None else None)
            params, state = apply_gradients(params, grads, state)
            for k in range(len(idx)):
                if adv[k]:
                    j0, norm, lam = stats[k]
                    train_log.records.append(StepRecord(step, "adversarial", j0, float(losses[k]), norm, lam))
                else:
                    train_log.records.append(StepRecord(step, "sft", float(losses[k])))

    train_log.wall_clock = time.perf_counter() - started
    return TrainResult(params, train_log, state)
