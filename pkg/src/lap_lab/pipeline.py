"""End-to-end steps shared by the command line and the acceptance suite.

Every artifact carries the configuration digest and seed: JSON files embed
them, checkpoints put them in the manifest, and CSV files (whose headers are
fixed) get a ``<name>.meta.json`` sidecar.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence


from . import autodiff as ad
from .adversary import inner_loop_batch, lagrangian, write_dynamics_csv
from .analysis import ObservationReport, layer_sweep, observation_report, write_layer_sweep_csv
from .autodiff import RngStream, Tensor
from .bench import (Judge, ParaphraseCase, RobustnessReport, accuracy_table, gen_dataset, load_cases,
                    load_examples, save_cases, save_examples, winrate_report)
from .config import RunConfig, digest, dumps
from .model import (DecodeConfig, Example, ModelConfig, ParameterSet, generate_batch, init_params, lm_loss,
                    load_checkpoint, make_batch, perturbed_lm_loss, save_checkpoint)
from .trainer import TrainResult, train

log = logging.getLogger(__name__)


class MissingInput(FileNotFoundError):
    """A command needs an artifact that an earlier command produces."""


def stamp(cfg: RunConfig) -> dict:
    return {"config_digest": digest(cfg), "seed": cfg.seed}


def write_meta(path: Path, cfg: RunConfig, **extra) -> Path:
    meta = Path(str(path) + ".meta.json")
    meta.write_text(json.dumps({**stamp(cfg), **extra}, indent=1, sort_keys=True) + "\n")
    return meta


def write_json(path: Path, payload: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    return path


def write_effective_config(cfg: RunConfig) -> Path:
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.json"
    path.write_text(dumps(cfg))
    return path


# --------------------------------------------------------------------------
# data


def gen_data(cfg: RunConfig) -> tuple[Path, Path]:
    train_set, cases = gen_dataset(cfg.bench, cfg.seed)
    data = Path(cfg.paths.data_dir)
    train_path = save_examples(data / "train.json", train_set)
    eval_path = save_cases(data / "eval.json", cases)
    write_json(data / "data.meta.json", stamp(cfg))
    return train_path, eval_path


def _need(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingInput(f"missing {path}; {hint}")
    return path


def load_data(cfg: RunConfig) -> tuple[list[Example], list[ParaphraseCase]]:
    data = Path(cfg.paths.data_dir)
    train_set = load_examples(_need(data / "train.json", "run gen-data first"))
    cases = load_cases(_need(data / "eval.json", "run gen-data first"))
    return train_set, cases


# --------------------------------------------------------------------------
# training and evaluation


def train_model(cfg: RunConfig, train_set: Sequence[Example], **overrides) -> TrainResult:
    tcfg = dataclasses.replace(cfg.train, seed=cfg.seed, **overrides)
    return train(train_set, tcfg, cfg.model)


def reference_model(cfg: RunConfig, train_set: Sequence[Example]) -> ParameterSet:
    """Plain SFT stopped after ``eval.reference_fraction`` of the schedule; supplies baseline responses."""
    return train_model(cfg, train_set, mode="sft_only", stop_fraction=cfg.eval.reference_fraction).params


def save_training(cfg: RunConfig, result: TrainResult, directory: Path | None = None) -> Path:
    out = Path(cfg.paths.out_dir)
    ckpt = save_checkpoint(directory or out / "checkpoint", result.params, stamp(cfg))
    log_path = result.log.write_csv(out / "train_log.csv")
    write_meta(log_path, cfg)
    return ckpt


def respond(params: ParameterSet, prompts_per_case: Sequence[Sequence[Sequence[int]]], decode: DecodeConfig,
            rng: RngStream) -> list[list[list[int]]]:
    return [generate_batch(params, prompts, decode, rng.child("case", i)) for i, prompts in enumerate(prompts_per_case)]


def judge_of(cfg: RunConfig) -> Judge:
    return Judge(cfg.analysis.judge, cfg.analysis.tie_tolerance)


def evaluate(cfg: RunConfig, params: ParameterSet, reference: ParameterSet,
             cases: Sequence[ParaphraseCase]) -> RobustnessReport:
    root = RngStream(cfg.seed).child("eval")
    responses = respond(params, [c.prompts for c in cases], cfg.eval.decode, root.child("model"))
    originals = [c.prompts[:1] for c in cases]
    baseline = [r[0] for r in respond(reference, originals, cfg.eval.decode, root.child("reference"))]
    report = winrate_report(cases, responses, baseline, judge_of(cfg))
    report.meta = {**stamp(cfg), "accuracy": accuracy_table(report, cases)}
    return report


def load_or_train_reference(cfg: RunConfig, train_set: Sequence[Example]) -> ParameterSet:
    ref_dir = Path(cfg.paths.out_dir) / "reference"
    if (ref_dir / "manifest.json").exists():
        params, manifest = load_checkpoint(ref_dir)
        if manifest.get("config_digest") == digest(cfg):
            return params
        log.info("reference checkpoint was built from a different config; retraining")
    params = reference_model(cfg, train_set)
    save_checkpoint(ref_dir, params, stamp(cfg))
    return params


def run_eval(cfg: RunConfig) -> RobustnessReport:
    train_set, cases = load_data(cfg)
    out = Path(cfg.paths.out_dir)
    params, _ = load_checkpoint(_need(out / "checkpoint" / "manifest.json", "run train first").parent)
    report = evaluate(cfg, params, load_or_train_reference(cfg, train_set), cases)
    report.write(out / "report.json", out / "report.csv")
    write_meta(out / "report.csv", cfg)
    return report


def run_analyze(cfg: RunConfig) -> ObservationReport:
    _, cases = load_data(cfg)
    out = Path(cfg.paths.out_dir)
    params, _ = load_checkpoint(_need(out / "checkpoint" / "manifest.json", "run train first").parent)
    report = observation_report(params, cases, judge_of(cfg), cfg.analysis.embedding_layer, cfg.eval.decode,
                                RngStream(cfg.seed).child("analyze"), cfg.analysis.include_original)
    report.meta = stamp(cfg)
    for path in report.write_csvs(out):
        write_meta(path, cfg)
    write_json(out / "analysis.json", report.to_json())
    return report


# --------------------------------------------------------------------------
# inner-loop dynamics


def run_dynamics(cfg: RunConfig) -> list[Path]:
    """Inner loops only, once per configured margin; one trace CSV per margin.

    Uses ``out_dir/checkpoint`` when it exists, otherwise the seeded initial model.
    """
    train_set, _ = load_data(cfg)
    out = Path(cfg.paths.out_dir)
    ckpt = out / "checkpoint"
    if (ckpt / "manifest.json").exists():
        params, _ = load_checkpoint(ckpt)
        source = "checkpoint"
    else:
        params, source = init_params(cfg.model, RngStream(cfg.seed).child("model")), "init"
    examples = list(train_set[: cfg.dynamics.n_examples])
    batch = make_batch(examples, cfg.model, cfg.train.perturb_positions)
    layer = cfg.model.default_injection_layer if cfg.train.injection_layer is None else cfg.train.injection_layer
    paths = []
    for eps in cfg.dynamics.epsilons:
        inner = dataclasses.replace(cfg.train.inner, epsilon=eps, T=cfg.dynamics.iterations)
        rngs = [RngStream(cfg.seed).child("dynamics", i) for i in range(len(examples))]
        res = inner_loop_batch(params, batch, inner, rngs, layer)
        path = write_dynamics_csv(out / f"dynamics_eps{eps:g}.csv", list(enumerate(res.traces)))
        write_meta(path, cfg, epsilon=eps, model=source)
        paths.append(path)
    return paths


# --------------------------------------------------------------------------
# gradient checks


GRADCHECK_MODEL = ModelConfig(n_layers=2, d_model=16, n_heads=2, vocab_size=32, max_seq=16)


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    passed: bool


def gradcheck_suite(seed: int = 0, rtol: float = 1e-4, h: float = 5e-5, init_scale: float = 0.3,
                    epsilon: float = 0.05, lam: float = 1.3) -> list[GradCheckResult]:
    """Finite-difference checks of the perturbation Lagrangian and of every weight gradient of J0.

    Runs on a 2-layer, width-16, vocab-32 model in 64-bit precision. A larger
    init scale keeps every weight gradient well above the finite-difference
    noise floor.
    """
    cfg = GRADCHECK_MODEL
    root = RngStream(seed).child("gradcheck")
    gen = root.child("tokens").generator()
    x = [1] + [int(t) for t in gen.integers(4, cfg.vocab_size, size=5)] + [3]
    y = [int(t) for t in gen.integers(4, cfg.vocab_size, size=3)] + [2]
    example = Example(x, y)
    results = []
    with ad.precision(64):
        params = init_params(cfg, root.child("model"), scale=init_scale)
        j0 = lm_loss(params, example).item()
        layer = cfg.default_injection_layer
        delta0 = Tensor(root.child("delta").normal((len(x), cfg.d_model), 0.1))

        def objective(d: Tensor) -> Tensor:
            jd = perturbed_lm_loss(params, example, d, layer)
            return lagrangian(ad.l2_norm(d), lam, jd, j0, epsilon)

        r = ad.grad_check(objective, delta0, h=h, rtol=rtol)
        results.append(GradCheckResult("lagrangian/delta", r.max_rel_err, r.passed))
        for name in params:
            def loss_of(w: Tensor, name=name) -> Tensor:
                return lm_loss(ParameterSet(cfg, {**params, name: w}), example)

            r = ad.grad_check(loss_of, params[name], h=h, rtol=rtol)
            results.append(GradCheckResult(f"J0/{name}", r.max_rel_err, r.passed))
    return results


# --------------------------------------------------------------------------
# layer sweep and method comparison


def run_layer_sweep(cfg: RunConfig) -> Path:
    train_set, cases = load_data(cfg)
    reference = load_or_train_reference(cfg, train_set)

    def train_fn(layer: int) -> ParameterSet:
        return train_model(cfg, train_set, injection_layer=layer).params

    def eval_fn(params: ParameterSet) -> dict[str, float]:
        return evaluate(cfg, params, reference, cases).aggregates

    rows = layer_sweep(train_fn, eval_fn, cfg.sweep.resolve(cfg.model.n_layers))
    path = write_layer_sweep_csv(Path(cfg.paths.out_dir) / "layer_sweep.csv", rows)
    write_meta(path, cfg)
    return path


COMPARE_HEADER = ["seed", "method", "original_winrate", "best_winrate", "worst_winrate", "average_winrate",
                  "original_acc", "best_acc", "worst_acc", "average_acc", "worst_template_acc"]


def compare_methods(cfg: RunConfig) -> list[dict]:
    """SFT vs the configured adversarial schedule on fresh data, for each seed in ``compare.seeds``.

    Both methods get the same data, initialisation and number of optimizer steps.
    """
    rows = []
    for seed in cfg.compare.seeds:
        run = dataclasses.replace(cfg, seed=seed)
        train_set, cases = gen_dataset(run.bench, seed)
        reference = reference_model(run, train_set)
        methods = {"sft": train_model(run, train_set, mode="sft_only").params,
                   cfg.train.adversary: train_model(run, train_set).params}
        for method, params in methods.items():
            report = evaluate(run, params, reference, cases)
            acc = report.meta["accuracy"]
            rows.append({"seed": seed, "method": method,
                         **{f"{k}_winrate": v for k, v in report.aggregates.items()},
                         **{f"{k}_acc": v for k, v in acc.items()}})
            log.info("seed %d %s: %s", seed, method, acc)
    return rows


def write_compare(cfg: RunConfig, rows: Sequence[dict]) -> Path:
    path = Path(cfg.paths.out_dir) / "compare.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPARE_HEADER)
        for r in rows:
            w.writerow([r[k] if k in ("seed", "method") else repr(float(r[k])) for k in COMPARE_HEADER])
    write_meta(path, cfg)
    return path


def format_table(rows: Sequence[dict]) -> str:
    cols = COMPARE_HEADER
    lines = ["  ".join(f"{c:>18}" for c in cols)]
    for r in rows:
        lines.append("  ".join(f"{r[c]:>18}" if c in ("seed", "method") else f"{r[c]:>18.4f}" for c in cols))
    return "\n".join(lines)


def worst_template_wins(rows: Sequence[dict], method: str) -> tuple[int, int]:
    """(seeds where ``method`` >= sft on worst-template accuracy, number of seeds)."""
    by_seed: dict[int, dict[str, float]] = {}
    for r in rows:
        by_seed.setdefault(r["seed"], {})[r["method"]] = r["worst_template_acc"]
    wins = sum(1 for v in by_seed.values() if v[method] >= v["sft"])
    return wins, len(by_seed)


__all__ = [
    "COMPARE_HEADER", "GRADCHECK_MODEL", "GradCheckResult", "MissingInput", "compare_methods", "evaluate",
    "format_table", "gen_data", "gradcheck_suite", "load_data", "load_or_train_reference", "reference_model",
    "run_analyze", "run_dynamics", "run_eval", "run_layer_sweep", "save_training", "stamp", "train_model",
    "worst_template_wins", "write_compare", "write_effective_config", "write_meta",
]
