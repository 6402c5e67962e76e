"""Gate ablation: train each variant over several seeds and compare test F1."""

from __future__ import annotations

import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

from .data import Dataset
from .errors import ContractError
from .gate import check_variant
from .model import ModelConfig
from .train import TrainConfig, evaluate, train

# report order: ungated baseline, single-component gates, full gate
ABLATION_VARIANTS = ("plain", "ss-only", "cg-only", "full")
MIN_MARGIN = 2.0  # F1 points


@dataclass
class Job:
    index: int
    variant: str
    seed: int


@dataclass
class JobResult:
    variant: str
    seed: int
    test_f1: float
    test_iou: float
    best_epoch: int
    seconds: float


@dataclass
class AblationReport:
    results: list[JobResult] = field(default_factory=list)
    settings: dict = field(default_factory=dict)

    def f1s(self, variant: str) -> list[float]:
        return [r.test_f1 for r in self.results if r.variant == variant]

    def mean(self, variant: str) -> float:
        return statistics.fmean(self.f1s(variant))

    def std(self, variant: str) -> float:
        vals = self.f1s(variant)
        return statistics.pstdev(vals) if len(vals) > 1 else 0.0

    @property
    def variants(self) -> list[str]:
        seen: list[str] = []
        for r in self.results:
            if r.variant not in seen:
                seen.append(r.variant)
        return seen

    def margin(self) -> float:
        """mean F1(full) - mean F1(plain), in F1 points (x100)."""
        if not self.f1s("full") or not self.f1s("plain"):
            raise ContractError("direction needs both the full and plain variants")
        return 100.0 * (self.mean("full") - self.mean("plain"))

    @property
    def passed(self) -> bool:
        return self.margin() >= MIN_MARGIN

    def verdict(self) -> str:
        return f"DIRECTION full>plain: {'PASS' if self.passed else 'FAIL'} margin={self.margin():.2f}"

    def table(self) -> str:
        lines = [f"{'variant':<10} {'mean F1':>8} {'std':>7}  per-seed"]
        for v in self.variants:
            per = " ".join(f"{100 * f:.2f}" for f in self.f1s(v))
            lines.append(f"{v:<10} {100 * self.mean(v):8.2f} {100 * self.std(v):7.2f}  {per}")
        return "\n".join(lines)

    def to_json(self) -> dict:
        out = {
            "settings": self.settings,
            "variants": {
                v: {
                    "per_seed": [
                        {"seed": r.seed, "test_f1": r.test_f1, "test_iou": r.test_iou,
                         "best_epoch": r.best_epoch, "seconds": round(r.seconds, 2)}
                        for r in self.results if r.variant == v
                    ],
                    "mean_f1": self.mean(v),
                    "std_f1": self.std(v),
                }
                for v in self.variants
            },
        }
        if "full" in self.variants and "plain" in self.variants:
            out["direction"] = {"claim": "full>plain", "margin": self.margin(),
                                "min_margin": MIN_MARGIN, "passed": self.passed}
        return out


def _run_job(job: Job, dataset: Dataset, model_cfg: ModelConfig, train_cfg: TrainConfig) -> JobResult:
    start = time.perf_counter()
    cfg = replace(model_cfg, gate_variant=job.variant)
    result = train(cfg, dataset, replace(train_cfg, seed=job.seed))
    report = evaluate(result.params, dataset, "test")
    return JobResult(job.variant, job.seed, report.mean_f1, report.mean_iou, result.best_epoch,
                     time.perf_counter() - start)


def run_ablation(
    dataset: Dataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    seeds=(0, 1, 2),
    variants=ABLATION_VARIANTS,
    workers: int = 1,
    on_result=None,
) -> AblationReport:
    """Train every ``variant x seed`` pair; results are assembled in job order."""
    for v in variants:
        check_variant(v)
    if not seeds:
        raise ContractError("need at least one seed")
    jobs = [Job(i, v, s) for i, (v, s) in enumerate((v, s) for v in variants for s in seeds)]
    results: list[JobResult | None] = [None] * len(jobs)
    if workers <= 1:
        for job in jobs:
            results[job.index] = _run_job(job, dataset, model_cfg, train_cfg)
            if on_result:
                on_result(results[job.index])
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_run_job, job, dataset, model_cfg, train_cfg): job for job in jobs}
            for fut, job in futures.items():
                results[job.index] = fut.result()
                if on_result:
                    on_result(results[job.index])
    settings = {"seeds": list(seeds), "variants": list(variants), "model": model_cfg.to_dict(),
                "train": {k: v for k, v in vars(train_cfg).items() if k != "seed"}}
    return AblationReport([r for r in results if r is not None], settings)
