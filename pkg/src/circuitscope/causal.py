"""Impact scoring of interventions on a trained noise predictor.

Every score is paired: the baseline and the intervened forward see the same
(x0, eps, t) triples, drawn once per :class:`EvalSet`.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .diffusion import NoiseSchedule, q_sample
from .interventions import InterventionSpec
from .unet import LAYER_GROUPS, UNet

IMPACT_CSV_HEADER = ["kind", "target", "timestep", "baseline_mse", "intervened_mse", "impact", "rank", "n", "seed"]


class ImpactError(ValueError):
    pass


@dataclass
class EvalSet:
    """A fixed batch of clean images and matching unit-Gaussian noise."""

    x0: np.ndarray
    eps: np.ndarray
    seed: int = 0

    @classmethod
    def draw(cls, images: np.ndarray, n: int, seed: int = 0) -> "EvalSet":
        rng = np.random.default_rng(seed)
        idx = rng.choice(len(images), size=n, replace=n > len(images))
        x0 = np.asarray(images, dtype=np.float32)[np.sort(idx)]
        eps = rng.standard_normal(x0.shape).astype(np.float32)
        return cls(x0, eps, seed)

    def __len__(self) -> int:
        return len(self.x0)


@dataclass
class ImpactResult:
    spec: InterventionSpec
    baseline_mse: float
    intervened_mse: float
    impact: float
    n: int
    timestep: int
    rank: int | None = None
    seed: int = 0

    def csv_row(self) -> list:
        return [
            self.spec.kind,
            self.spec.label(),
            self.timestep,
            repr(self.baseline_mse),
            repr(self.intervened_mse),
            repr(self.impact),
            "" if self.rank is None else self.rank,
            self.n,
            self.seed,
        ]

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "target": self.spec.label(),
            "baseline_mse": self.baseline_mse,
            "intervened_mse": self.intervened_mse,
            "impact": self.impact,
            "n": self.n,
            "timestep": self.timestep,
            "rank": self.rank,
            "seed": self.seed,
        }


def impact_from_mse(baseline_mse: float, intervened_mse: float) -> float:
    """Relative MSE degradation (intervened - baseline) / baseline."""
    if baseline_mse <= 0:
        raise ImpactError("impact undefined for a zero baseline MSE")
    return (intervened_mse - baseline_mse) / baseline_mse


def eval_mse(
    model: UNet,
    eval_set: EvalSet,
    timestep: int,
    sched: NoiseSchedule,
    spec: InterventionSpec | None = None,
    n: int | None = None,
    batch_size: int = 32,
) -> float:
    """Per-element mean squared noise-prediction error over the first ``n`` eval triples."""
    n = len(eval_set) if n is None else n
    x0, eps = eval_set.x0[:n], eval_set.eps[:n]
    x_t = q_sample(x0, timestep, eps, sched)
    total = 0.0
    for i in range(0, n, batch_size):
        xb = x_t[i : i + batch_size]
        pred = model.predict(xb, np.full(len(xb), timestep), intervention=spec)
        total += float(((pred.astype(np.float64) - eps[i : i + batch_size]) ** 2).sum())
    return total / eps.size


def impact_score(
    model: UNet,
    spec: InterventionSpec,
    eval_set: EvalSet,
    timestep: int,
    sched: NoiseSchedule,
    n: int | None = None,
    baseline_mse: float | None = None,
) -> ImpactResult:
    if n is not None and n < 1:
        raise ImpactError("impact_score needs n >= 1")
    model.validate_intervention(spec)
    n = len(eval_set) if n is None else n
    base = eval_mse(model, eval_set, timestep, sched, None, n) if baseline_mse is None else baseline_mse
    if base <= 0:
        raise ImpactError("baseline MSE is zero; the model is a perfect predictor on this set")
    hit = eval_mse(model, eval_set, timestep, sched, spec, n)
    return ImpactResult(spec, base, hit, impact_from_mse(base, hit), n, int(timestep), seed=eval_set.seed)


def group_spec(layers: Sequence[str]) -> InterventionSpec:
    if len(layers) == 1:
        return InterventionSpec.ablate(layers[0])
    return InterventionSpec.interrupt([(name, None) for name in layers])


def rank_results(results: list[ImpactResult], names: Sequence[str]) -> None:
    """Assign ranks 1..n by descending impact; ties fall back to name order."""
    order = sorted(range(len(results)), key=lambda i: (-results[i].impact, names[i]))
    for rank, i in enumerate(order, start=1):
        results[i].rank = rank


def ablation_sweep(
    model: UNet,
    groups: Mapping[str, Sequence[str]] | None,
    timesteps: Sequence[int],
    eval_set: EvalSet,
    sched: NoiseSchedule,
    n: int | None = None,
) -> list[ImpactResult]:
    """Ablate each group of layers at each timestep; results ranked within a timestep."""
    groups = groups or {g: [g] for g in LAYER_GROUPS}
    seen: set[str] = set()
    for name, layers in groups.items():
        if not layers:
            raise ImpactError(f"layer group {name!r} is empty")
        overlap = seen.intersection(layers)
        if overlap:
            raise ImpactError(f"layer groups overlap on {sorted(overlap)}")
        seen.update(layers)
    out: list[ImpactResult] = []
    for t in timesteps:
        base = eval_mse(model, eval_set, t, sched, None, n)
        names = list(groups)
        results = [impact_score(model, group_spec(groups[g]), eval_set, t, sched, n, base) for g in names]
        rank_results(results, names)
        out.extend(results)
    return out


def head_importance(
    model: UNet, eval_set: EvalSet, timestep: int, sched: NoiseSchedule, n: int | None = None
) -> list[ImpactResult]:
    """Impact of ablating each attention head alone, in global head order."""
    base = eval_mse(model, eval_set, timestep, sched, None, n)
    out = []
    for layer in model.attention_layers:
        for h in model.heads_of(layer):
            out.append(impact_score(model, InterventionSpec.ablate(layer, head=h), eval_set, timestep, sched, n, base))
    return out


def standard_battery(model: UNet) -> list[InterventionSpec]:
    """Per-group ablation, alpha=0.5 perturbation and s in {0.5, 2} scaling per attention stage."""
    battery = [InterventionSpec.ablate(g) for g in LAYER_GROUPS]
    battery += [InterventionSpec.perturb(layer, 0.5) for layer in model.attention_layers]
    for layer in model.attention_layers:
        stage = layer.removesuffix(".attn")
        battery += [InterventionSpec.scale_features(stage, s) for s in (0.5, 2.0)]
    return battery


def robustness_from_impacts(impacts: Sequence[float]) -> float:
    """1 / (1 + mean impact); a battery that only helps counts as unaffected."""
    mean_impact = float(np.mean(impacts)) if len(impacts) else 0.0
    return 1.0 / (1.0 + max(0.0, mean_impact))


def robustness(
    model: UNet,
    eval_set: EvalSet,
    timestep: int,
    sched: NoiseSchedule,
    battery: Sequence[InterventionSpec] | None = None,
    n: int | None = None,
) -> tuple[float, list[ImpactResult]]:
    battery = standard_battery(model) if battery is None else battery
    base = eval_mse(model, eval_set, timestep, sched, None, n)
    results = [impact_score(model, spec, eval_set, timestep, sched, n, base) for spec in battery]
    return robustness_from_impacts([r.impact for r in results]), results


def write_impacts(results: Sequence[ImpactResult], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(IMPACT_CSV_HEADER)
        for r in results:
            w.writerow(r.csv_row())
