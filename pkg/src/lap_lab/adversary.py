"""Inner-loop perturbation search.

Two adversaries share the frozen-model machinery here:

* the paraphrase adversary, which pushes the perturbation norm up while a
  Lagrange multiplier (kept in log space) holds the induced change in
  language-modeling loss near a margin ``epsilon``;
* the untargeted latent adversary, projected gradient ascent on the loss
  inside an L2 ball.

Both run batched: rows of a :class:`~lap_lab.model.Batch` are independent
problems, so summing per-row objectives yields per-row gradients.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, NonFiniteError, RngStream, Tensor
from .model import Batch, Example, ParameterSet, batch_losses, make_batch

log = logging.getLogger(__name__)

DYNAMICS_HEADER = ["example_id", "iter", "delta_norm", "lambda", "J_delta", "J_0", "objective"]


class InnerLoopError(RuntimeError):
    """The inner loop hit a non-finite value for one example."""


@dataclass(frozen=True)
class InnerLoopConfig:
    epsilon: float = 0.05
    eta: float = 1e-2
    alpha: float = 1e-1
    T: int = 6
    init_sigma: float = 1e-3
    lambda_init: float = 1.0
    norm_p: int = 2
    fix_lambda_zero: bool = False
    log_lambda_ceiling: float = 20.0
    log_lambda_floor: float = -40.0

    def __post_init__(self):
        if self.epsilon <= 0 or self.eta <= 0 or self.init_sigma <= 0 or self.lambda_init <= 0:
            raise ContractViolation("inner.epsilon, inner.eta, inner.init_sigma and inner.lambda_init must be positive")
        if self.alpha < 0:
            raise ContractViolation("inner.alpha must be non-negative")
        if self.T < 0:
            raise ContractViolation("inner.T must be non-negative")
        if self.norm_p != 2:
            raise ContractViolation("inner.norm_p is fixed to 2")
        if self.log_lambda_floor >= self.log_lambda_ceiling:
            raise ContractViolation("inner.log_lambda_floor must be below inner.log_lambda_ceiling")


@dataclass(frozen=True)
class LatConfig:
    epsilon_ball: float = 1.0
    pgd_steps: int = 6
    pgd_step_size: float = 0.25
    init_sigma: float = 1e-3

    def __post_init__(self):
        if self.epsilon_ball <= 0 or self.pgd_steps <= 0 or self.pgd_step_size <= 0 or self.init_sigma <= 0:
            raise ContractViolation("lat.epsilon_ball, lat.pgd_steps, lat.pgd_step_size and lat.init_sigma "
                                    "must be positive")


@dataclass
class TraceRecord:
    iter: int
    delta_norm: float
    lam: float
    j_delta: float
    j_0: float
    objective: float


@dataclass
class Perturbation:
    delta: Tensor  # (masked positions, d_model)
    log_lambda: float
    inject_layer: int
    trace: list[TraceRecord] = field(default_factory=list)
    lambda_fixed_zero: bool = False

    @property
    def lam(self) -> float:
        return 0.0 if self.lambda_fixed_zero else math.exp(self.log_lambda)

    @property
    def norm(self) -> float:
        return _norm(self.delta.data)


def _norm(x: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.square(np.asarray(x, dtype=np.float64)))))


# --------------------------------------------------------------------------
# elementary steps


def lagrangian(delta_norm, lam, j_delta, j_0, epsilon):
    """-‖δ‖ + λ(|J_δ - J₀| - ε).

    Works on floats, numpy arrays (elementwise) or tensors (differentiable).
    """
    if not any(isinstance(v, Tensor) for v in (delta_norm, lam, j_delta, j_0)):
        values = [np.asarray(v, dtype=np.float64) for v in (delta_norm, lam, j_delta, j_0, epsilon)]
        if not all(np.all(np.isfinite(v)) for v in values):
            raise NonFiniteError("lagrangian inputs must be finite")
        out = -values[0] + values[1] * (np.abs(values[2] - values[3]) - values[4])
        return float(out) if out.ndim == 0 else out
    return -delta_norm + lam * (abs(j_delta - j_0) - epsilon)


def update_delta(perturbation: Perturbation, grad: Tensor, eta: float) -> Perturbation:
    """One descent step on the Lagrangian with the multiplier held fixed."""
    g = grad.data if isinstance(grad, Tensor) else np.asarray(grad)
    if g.shape != perturbation.delta.dims:
        raise ContractViolation(f"gradient dims {g.shape} != delta dims {perturbation.delta.dims}")
    if not np.all(np.isfinite(g)):
        raise InnerLoopError("non-finite gradient for the perturbation")
    new = perturbation.delta.data - np.asarray(eta, dtype=g.dtype) * g
    return replace(perturbation, delta=Tensor(new, dtype=new.dtype), trace=list(perturbation.trace))


def update_lambda(log_lambda, alpha: float, j_delta, j_0, epsilon: float,
                  ceiling: float = 20.0, floor: float = -40.0):
    """Multiplicative multiplier step: log λ += α λ (J_δ - J₀ - ε).

    The signed constraint gap is used as written (no absolute value). Results
    are clamped into [floor, ceiling] with a logged warning.
    """
    if alpha < 0:
        raise ContractViolation("alpha must be non-negative")
    log_lambda = np.asarray(log_lambda, dtype=np.float64)
    gap = np.asarray(j_delta, dtype=np.float64) - np.asarray(j_0, dtype=np.float64) - epsilon
    with np.errstate(over="ignore", invalid="ignore"):
        new = log_lambda + alpha * np.exp(log_lambda) * gap
    if np.any(np.isnan(new)):
        raise NonFiniteError("multiplier update produced NaN")
    clipped = np.clip(new, floor, ceiling)
    if np.any(clipped != new):
        log.warning("log-multiplier clamped into [%g, %g]", floor, ceiling)
    return float(clipped) if clipped.ndim == 0 else clipped


def project_l2(delta, radius: float):
    """Radial projection onto the L2 ball; returns the input object when already inside."""
    if radius <= 0:
        raise ContractViolation("projection radius must be positive")
    arr = delta.data if isinstance(delta, Tensor) else np.asarray(delta)
    norm = _norm(arr)
    if norm <= radius:
        return delta
    scale = radius / norm
    out = (arr * scale).astype(arr.dtype)
    # rounding can leave the result a hair outside; shrink until it is inside
    while _norm(out) > radius:
        scale *= 1.0 - 1e-7
        out = (arr * scale).astype(arr.dtype)
    return Tensor(out, dtype=out.dtype) if isinstance(delta, Tensor) else out


# --------------------------------------------------------------------------
# batched inner loops


def _subset(batch: Batch, rows: np.ndarray) -> Batch:
    return Batch(batch.tokens[rows], batch.targets[rows], batch.loss_mask[rows], batch.perturb_mask[rows],
                 batch.lengths[rows], batch.prompt_lengths[rows])


def _init_delta(batch: Batch, d_model: int, sigma: float, rngs: Sequence[RngStream], dtype) -> np.ndarray:
    delta = np.zeros(batch.tokens.shape + (d_model,), dtype=dtype)
    for i, rng in enumerate(rngs):
        rows = np.flatnonzero(batch.perturb_mask[i])
        delta[i, rows] = rng.child("delta_init").normal((rows.size, d_model), sigma).astype(dtype)
    return delta


@dataclass
class BatchPerturbation:
    """Result of a batched inner loop: full-width deltas plus per-row state."""

    delta: np.ndarray  # (batch, positions, d_model), zero outside perturb_mask
    log_lambda: np.ndarray
    j_0: np.ndarray
    traces: list[list[TraceRecord]]
    failed: np.ndarray  # bool per row

    def unpack(self, batch: Batch, inject_layer: int, fixed_zero: bool = False) -> list[Perturbation]:
        out = []
        for i in range(len(batch)):
            rows = np.flatnonzero(batch.perturb_mask[i])
            d = self.delta[i, rows].copy()
            out.append(Perturbation(Tensor(d, dtype=d.dtype), float(self.log_lambda[i]), inject_layer,
                                    self.traces[i], fixed_zero))
        return out


def inner_loop_batch(params: ParameterSet, batch: Batch, cfg: InnerLoopConfig, rngs: Sequence[RngStream],
                     inject_layer: int | None = None) -> BatchPerturbation:
    """Alternate δ and λ updates for every row of ``batch`` with θ frozen."""
    frozen = params.frozen()
    mcfg = params.config
    layer = mcfg.default_injection_layer if inject_layer is None else inject_layer
    if len(rngs) != len(batch):
        raise ContractViolation("one random stream per batch row is required")
    dtype = next(iter(frozen.values())).data.dtype
    n = len(batch)

    j_0 = batch_losses(frozen, batch).data.astype(np.float64)
    delta = _init_delta(batch, mcfg.d_model, cfg.init_sigma, rngs, dtype)
    log_lam = np.full(n, math.log(cfg.lambda_init))
    traces: list[list[TraceRecord]] = [[] for _ in range(n)]
    failed = ~np.isfinite(j_0)
    eta = np.asarray(cfg.eta, dtype=dtype)

    for it in range(1, cfg.T + 1):
        rows = np.flatnonzero(~failed)
        if rows.size == 0:
            break
        sub = _subset(batch, rows)
        lam = np.zeros(rows.size) if cfg.fix_lambda_zero else np.exp(log_lam[rows])
        dt = Tensor(delta[rows], tracked=True, dtype=dtype)
        j_delta = batch_losses(frozen, sub, dt, layer)
        objective = lagrangian(ad.l2_norm(dt, axis=(1, 2)), lam.astype(dtype), j_delta, j_0[rows].astype(dtype),
                               cfg.epsilon)
        bad = ~np.isfinite(objective.data)
        if bad.any():
            _fail(failed, rows[bad], it, "non-finite objective")
            continue
        grad = ad.backward(objective.sum(), wrt=[dt])[dt].data
        bad = ~np.all(np.isfinite(grad), axis=(1, 2))
        if bad.any():
            _fail(failed, rows[bad], it, "non-finite gradient")
            keep = ~bad
            rows, grad = rows[keep], grad[keep]
            sub = _subset(batch, rows)
        delta[rows] = delta[rows] - eta * grad

        j_new = batch_losses(frozen, sub, Tensor(delta[rows], dtype=dtype), layer).data.astype(np.float64)
        bad = ~np.isfinite(j_new)
        if bad.any():
            _fail(failed, rows[bad], it, "non-finite perturbed loss")
        ok = ~bad
        rows, j_new = rows[ok], j_new[ok]
        if not cfg.fix_lambda_zero:
            log_lam[rows] = update_lambda(log_lam[rows], cfg.alpha, j_new, j_0[rows], cfg.epsilon,
                                          cfg.log_lambda_ceiling, cfg.log_lambda_floor)
        lam_now = np.zeros(rows.size) if cfg.fix_lambda_zero else np.exp(log_lam[rows])
        norms = np.sqrt(np.sum(np.square(delta[rows].astype(np.float64)), axis=(1, 2)))
        objs = lagrangian(norms, lam_now, j_new, j_0[rows], cfg.epsilon)
        for k, i in enumerate(rows):
            traces[i].append(TraceRecord(it, float(norms[k]), float(lam_now[k]), float(j_new[k]), float(j_0[i]),
                                         float(objs[k])))

    return BatchPerturbation(delta, log_lam, j_0, traces, failed)


def _fail(failed: np.ndarray, rows: np.ndarray, it: int, why: str) -> None:
    failed[rows] = True
    log.warning("inner loop aborted for rows %s at iteration %d: %s", rows.tolist(), it, why)


def run_inner_loop(params: ParameterSet, example: Example, cfg: InnerLoopConfig, rng: RngStream | int = 0,
                   inject_layer: int | None = None, positions: str = "prompt") -> Perturbation:
    """Optimize one example's perturbation and multiplier for ``cfg.T`` iterations."""
    if isinstance(rng, int):
        rng = RngStream(rng)
    batch = make_batch([example], params.config, positions)
    layer = params.config.default_injection_layer if inject_layer is None else inject_layer
    result = inner_loop_batch(params, batch, cfg, [rng], layer)
    if result.failed[0]:
        raise InnerLoopError("inner loop produced a non-finite value")
    return result.unpack(batch, layer, cfg.fix_lambda_zero)[0]


def lat_pgd_batch(params: ParameterSet, batch: Batch, cfg: LatConfig, rngs: Sequence[RngStream],
                  inject_layer: int | None = None, norms_trace: list | None = None) -> np.ndarray:
    """L2 projected gradient ascent on each row's loss; returns full-width deltas."""
    frozen = params.frozen()
    mcfg = params.config
    layer = mcfg.default_injection_layer if inject_layer is None else inject_layer
    dtype = next(iter(frozen.values())).data.dtype
    delta = _init_delta(batch, mcfg.d_model, cfg.init_sigma, rngs, dtype)
    for i in range(len(batch)):
        delta[i] = project_l2(delta[i], cfg.epsilon_ball)
    if norms_trace is not None:
        norms_trace.append([_norm(delta[i]) for i in range(len(batch))])
    for _ in range(cfg.pgd_steps):
        dt = Tensor(delta, tracked=True, dtype=dtype)
        losses = batch_losses(frozen, batch, dt, layer)
        grad = ad.backward(losses.sum(), wrt=[dt])[dt].data
        if not np.all(np.isfinite(grad)):
            raise InnerLoopError("non-finite gradient in projected ascent")
        grad = grad * batch.perturb_mask[..., None]
        for i in range(len(batch)):
            gn = _norm(grad[i])
            if gn > 0:
                delta[i] = delta[i] + (cfg.pgd_step_size / gn) * grad[i]
            delta[i] = project_l2(delta[i], cfg.epsilon_ball)
        if norms_trace is not None:
            norms_trace.append([_norm(delta[i]) for i in range(len(batch))])
    return delta


def lat_inner_pgd(params: ParameterSet, example: Example, cfg: LatConfig, rng: RngStream | int = 0,
                  inject_layer: int | None = None, positions: str = "prompt",
                  norms_trace: list | None = None) -> Tensor:
    """Untargeted latent attack on one example: ascend the loss inside the ball."""
    if isinstance(rng, int):
        rng = RngStream(rng)
    batch = make_batch([example], params.config, positions)
    delta = lat_pgd_batch(params, batch, cfg, [rng], inject_layer, norms_trace)
    rows = np.flatnonzero(batch.perturb_mask[0])
    d = delta[0, rows].copy()
    return Tensor(d, dtype=d.dtype)


# --------------------------------------------------------------------------
# export


def write_dynamics_csv(path: str | Path, traces: Iterable[tuple[object, Sequence[TraceRecord]]]) -> Path:
    """One row per inner iteration: example_id,iter,delta_norm,lambda,J_delta,J_0,objective."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DYNAMICS_HEADER)
        for example_id, trace in traces:
            for r in trace:
                w.writerow([example_id, r.iter, repr(r.delta_norm), repr(r.lam), repr(r.j_delta), repr(r.j_0),
                            repr(r.objective)])
    return path
