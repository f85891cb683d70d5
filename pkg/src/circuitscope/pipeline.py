"""Two-arm experiment pipeline: gen-data -> train -> trace -> analyze -> intervene -> stats -> report.

Each stage reads the previous stages' artifacts from the output directory and
leaves a completion marker, so a rerun with ``resume=True`` skips finished
stages whose marker carries the current config digest.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import causal, metrics, stats
from .causal import EvalSet
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .diffusion import cosine_schedule, prediction_accuracy, q_sample, train
from .faces import build_dataset, load_external_images, save_png, write_manifest
from .interventions import InterventionSpec
from .trace import TraceFile, read_trace, write_trace
from .unet import LAYER_GROUPS, UNet

logger = logging.getLogger(__name__)

STAGES = ("gen-data", "train", "trace", "analyze", "intervene", "stats", "report")
MIN_PHASE_TIMESTEPS = 4
PHASE_FRACTIONS = (0.7, 0.4, 0.1)


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"stage {stage!r} failed: {message}")


class Workspace:
    """Paths of every artifact under one output directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def data(self, arm: str) -> Path:
        return self.root / "data" / arm

    def images(self, arm: str) -> Path:
        return self.data(arm) / "images.npy"

    def checkpoint(self, arm: str) -> Path:
        return self.root / "models" / f"{arm}.dmck"

    def loss_curve(self, arm: str) -> Path:
        return self.root / "models" / f"{arm}_loss.csv"

    def trace(self, arm: str) -> Path:
        return self.root / "traces" / f"{arm}.dtrc"

    def analysis(self, arm: str) -> Path:
        return self.root / "analysis" / f"{arm}.json"

    def interventions(self, arm: str) -> Path:
        return self.root / "interventions" / f"{arm}.json"

    @property
    def stats(self) -> Path:
        return self.root / "stats" / "stats.json"

    @property
    def report(self) -> Path:
        return self.root / "report.json"

    def marker(self, stage: str) -> Path:
        return self.root / ".stages" / f"{stage}.done"


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(clean_json(obj), indent=2, allow_nan=False) + "\n")


def read_json(path: Path):
    return json.loads(path.read_text())


def clean_json(obj):
    """Recursively make ``obj`` JSON-safe: numpy scalars to Python, NaN/inf to None."""
    if isinstance(obj, dict):
        return {str(k): clean_json(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean_json(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return clean_json(obj.tolist())
    return obj


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_csv(path: Path, header: list[str], rows: Iterable[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def load_model(cfg: ExperimentConfig, ws: Workspace, arm: str) -> UNet:
    return load_checkpoint(ws.checkpoint(arm), cfg.model_config())


def load_images(ws: Workspace, arm: str) -> np.ndarray:
    return np.load(ws.images(arm))


# ---------------------------------------------------------------- stages


def stage_gen_data(cfg: ExperimentConfig, ws: Workspace) -> None:
    mc = cfg.model_config()
    for arm in cfg.arm_names:
        ext = cfg.external_dir(arm)
        if ext:
            ds = load_external_images(ext, mc.image_size, mc.channels)
        else:
            ds = build_dataset(cfg.dataset_config(arm))
        if len(ds) == 0:
            raise StageError("gen-data", f"arm {arm} has no images")
        ws.data(arm).mkdir(parents=True, exist_ok=True)
        np.save(ws.images(arm), ds.images)
        if ext:
            write_csv(ws.data(arm) / "manifest.csv", ["index", "path"], [[r["index"], r["path"]] for r in ds.manifest])
        else:
            write_manifest(ds.manifest, ws.data(arm) / "manifest.csv")
        samples = ws.data(arm) / "samples"
        samples.mkdir(exist_ok=True)
        for i in range(min(4, len(ds))):
            save_png(ds.images[i], samples / f"{i:03d}.png")


def stage_train(cfg: ExperimentConfig, ws: Workspace) -> None:
    tr = cfg.section("training")
    sched = cosine_schedule(cfg.T)
    for arm in cfg.arm_names:
        start = time.perf_counter()
        model, losses = train(
            load_images(ws, arm),
            cfg.model_config(),
            sched,
            steps=int(tr["steps"]),
            lr=float(tr["lr"]),
            seed=cfg.train_seed(),
            batch_size=int(tr["batch_size"]),
            log_every=max(1, int(tr["steps"]) // 10),
        )
        logger.info("arm %s trained in %.1fs", arm, time.perf_counter() - start)
        save_checkpoint(model, ws.checkpoint(arm))
        write_csv(ws.loss_curve(arm), ["step", "loss"], [[i, repr(v)] for i, v in enumerate(losses)])


def eval_set_for(cfg: ExperimentConfig, ws: Workspace, arm: str, n: int) -> EvalSet:
    return EvalSet.draw(load_images(ws, arm), n, seed=cfg.eval_seed(arm))


def capture_trace(model: UNet, eval_set: EvalSet, timesteps: Iterable[int], sched, batch: int) -> list:
    """Hook every layer group and attention map over ``eval_set`` at each timestep.

    Records carry the batch number in ``batch_index``.
    """
    hooks = model.hooks()
    for g in LAYER_GROUPS:
        hooks.subscribe(g, "activation")
    for layer in model.attention_layers:
        hooks.subscribe(layer, "attention")
    for t in timesteps:
        x_t = q_sample(eval_set.x0, t, eval_set.eps, sched)
        for b, start in enumerate(range(0, len(eval_set), batch)):
            hooks.batch_index = b
            xb = x_t[start : start + batch]
            model.predict(xb, np.full(len(xb), t), hooks=hooks)
    return hooks.records


def stage_trace(cfg: ExperimentConfig, ws: Workspace) -> None:
    a = cfg.section("analysis")
    sched = cosine_schedule(cfg.T)
    digest = bytes.fromhex(cfg.digest())
    for arm in cfg.arm_names:
        model = load_model(cfg, ws, arm)
        ev = eval_set_for(cfg, ws, arm, int(a["eval_count"]))
        records = capture_trace(model, ev, cfg.timesteps, sched, int(a["eval_batch"]))
        write_trace(records, ws.trace(arm), seed=cfg.seed, config_digest=digest)


# ---------------------------------------------------------------- analysis


def analyze_trace(
    trace: TraceFile | list,
    arm: str = "",
    bins: int = 16,
    per_row: bool = False,
    sparsity_eps: float = 1e-6,
) -> dict:
    """Every trace-derived metric for one arm.

    Returns the flat metric list plus per-batch observations (one value per
    trace batch) used as the unit of analysis for cross-arm statistics.
    """
    records = list(trace)
    timesteps = sorted({r.timestep for r in records})
    values: list[metrics.MetricValue] = []
    complexity: dict = {}
    heads: dict = {}
    per_batch: dict = {"complexity": {}, "entropy": {}, "specialization": {}}
    ife: dict = {}

    for t in timesteps:
        at_t = [r for r in records if r.timestep == t]
        acts = [r for r in at_t if r.kind == "activation"]
        attn = [r for r in at_t if r.kind == "attention"]
        batches = sorted({r.batch_index for r in at_t})

        if acts:
            mean_c, per_layer = metrics.circuit_complexity(acts, t, eps_sparsity=sparsity_eps)
            n_b = len({r.batch_index for r in acts})
            complexity[t] = {"mean": mean_c, "per_layer": per_layer}
            for layer, c in per_layer.items():
                values.append(metrics.MetricValue("complexity", c, layer, None, t, arm, n_b))
            values.append(metrics.MetricValue("complexity", mean_c, "all", None, t, arm, n_b))
            per_batch["complexity"][t] = [
                metrics.circuit_complexity([r for r in acts if r.batch_index == b], t, eps_sparsity=sparsity_eps)[0]
                for b in batches
                if any(r.batch_index == b for r in acts)
            ]
            ife[t] = _ife_at(acts, t, bins, arm, values)

        if attn:
            heads[t] = {}
            for h in sorted({r.head for r in attn}):
                recs = [r for r in attn if r.head == h]
                ent = [metrics.head_entropy(r, per_row) for r in recs]
                spec = [metrics.head_specialization(r, per_row) for r in recs]
                n_maps = sum(len(metrics.head_maps(r)) for r in recs)
                ent_all = float(np.mean([metrics.attention_entropy(m, per_row) for r in recs for m in metrics.head_maps(r)]))
                spec_all = float(np.mean([metrics.specialization(m, per_row) for r in recs for m in metrics.head_maps(r)]))
                heads[t][h] = {
                    "layer": recs[0].name,
                    "entropy": ent_all,
                    "specialization": spec_all,
                    "entropy_batches": ent,
                    "specialization_batches": spec,
                    "n": n_maps,
                }
                values.append(metrics.MetricValue("entropy", ent_all, recs[0].name, h, t, arm, n_maps))
                values.append(metrics.MetricValue("specialization", spec_all, recs[0].name, h, t, arm, n_maps))
            for key in ("entropy", "specialization"):
                per_batch[key][t] = [
                    float(np.mean([heads[t][h][f"{key}_batches"][i] for h in heads[t]]))
                    for i in range(min(len(heads[t][h][f"{key}_batches"]) for h in heads[t]))
                ]

    return {
        "arm": arm,
        "timesteps": timesteps,
        "metrics": [v.to_dict() for v in values],
        "complexity": complexity,
        "heads": heads,
        "ife": ife,
        "per_batch": per_batch,
        "settings": {"bins": bins, "per_row_entropy": per_row, "sparsity_eps": sparsity_eps},
    }


def _ife_at(acts: list, t: int, bins: int, arm: str, values: list) -> dict:
    present = [g for g in LAYER_GROUPS if any(r.name == g for r in acts)]
    out = {}
    for a, b in zip(present, present[1:]):
        xs, ys = [], []
        for batch in sorted({r.batch_index for r in acts}):
            ra = [r for r in acts if r.name == a and r.batch_index == batch]
            rb = [r for r in acts if r.name == b and r.batch_index == batch]
            if not ra or not rb or ra[0].payload.ndim != 4 or rb[0].payload.ndim != 4:
                continue
            x, y = metrics.pair_layers(ra[0].payload, rb[0].payload)
            xs.append(x)
            ys.append(y)
        if not xs:
            continue
        x, y = np.concatenate(xs), np.concatenate(ys)
        key = f"{a}->{b}"
        try:
            val = metrics.information_flow_efficiency(x, y, min(bins, x.size))
        except metrics.MetricError as exc:
            logger.warning("IFE %s at t=%d skipped: %s", key, t, exc)
            continue
        out[key] = val
        values.append(metrics.MetricValue("ife", val, key, None, t, arm, int(x.size)))
    return out


def _window_means(losses: list[float], window: int = 100) -> tuple[float | None, float | None]:
    if not losses:
        return None, None
    w = max(1, min(window, len(losses) // 2 or 1))
    return float(np.mean(losses[:w])), float(np.mean(losses[-w:]))


def read_loss_curve(path: Path) -> list[float]:
    with path.open() as fh:
        return [float(r["loss"]) for r in csv.DictReader(fh)]


def stage_analyze(cfg: ExperimentConfig, ws: Workspace) -> None:
    a = cfg.section("analysis")
    sched = cosine_schedule(cfg.T)
    all_rows = []
    for arm in cfg.arm_names:
        trace = read_trace(ws.trace(arm))
        result = analyze_trace(trace, arm, int(a["bins"]), bool(a["per_row_entropy"]), float(a["sparsity_eps"]))
        model = load_model(cfg, ws, arm)
        images = load_images(ws, arm)
        result["accuracy"] = {
            t: prediction_accuracy(model, images, t, int(a["eval_count"]), sched, seed=cfg.eval_seed(arm))
            for t in cfg.timesteps
        }
        losses = read_loss_curve(ws.loss_curve(arm))
        first, last = _window_means(losses)
        result["training"] = {"steps": len(losses), "initial_window_loss": first, "final_window_loss": last}
        result["trace_sha256"] = sha256_file(ws.trace(arm))
        write_json(ws.analysis(arm), result)
        all_rows += [metrics.MetricValue(**m).csv_row() for m in result["metrics"]]
    write_csv(ws.root / "metrics.csv", metrics.METRIC_CSV_HEADER, all_rows)


# ---------------------------------------------------------------- interventions


def stage_intervene(cfg: ExperimentConfig, ws: Workspace) -> None:
    iv = cfg.section("interventions")
    sched = cosine_schedule(cfg.T)
    mode = iv["mode"]
    rows = []
    for arm in cfg.arm_names:
        model = load_model(cfg, ws, arm)
        ev = eval_set_for(cfg, ws, arm, int(iv["n"]))
        groups = {g: [g] for g in LAYER_GROUPS}
        sweep = []
        for t in cfg.timesteps:
            base = causal.eval_mse(model, ev, t, sched)
            results = [
                causal.impact_score(model, InterventionSpec.ablate(g, mode=mode), ev, t, sched, baseline_mse=base)
                for g in groups
            ]
            causal.rank_results(results, list(groups))
            sweep += results
        joint = [
            causal.impact_score(
                model,
                InterventionSpec("circuit_interruption", nodes=tuple((g, None) for g in LAYER_GROUPS), mode=mode),
                ev,
                t,
                sched,
            )
            for t in cfg.timesteps
        ]
        importance = {t: causal.head_importance(model, ev, t, sched) for t in cfg.timesteps}
        robust = {t: causal.robustness(model, ev, t, sched) for t in cfg.timesteps}
        result = {
            "arm": arm,
            "ablation": [r.to_dict() for r in sweep],
            "joint_ablation": [r.to_dict() for r in joint],
            "head_importance": {t: [r.to_dict() for r in rs] for t, rs in importance.items()},
            "robustness": {
                t: {"value": val, "battery": [r.to_dict() for r in rs]} for t, (val, rs) in robust.items()
            },
        }
        write_json(ws.interventions(arm), result)
        every = sweep + joint + [r for rs in importance.values() for r in rs] + [
            r for _, rs in robust.values() for r in rs
        ]
        rows += [[arm] + r.csv_row() for r in every]
    write_csv(ws.root / "impacts.csv", ["arm"] + causal.IMPACT_CSV_HEADER, rows)


# ---------------------------------------------------------------- statistics


def stage_stats(cfg: ExperimentConfig, ws: Workspace) -> None:
    arms = [a for a in cfg.arm_names if ws.analysis(a).exists()]
    if len(arms) < 2:
        raise StageError("stats", f"two arms (A and B) are required for cross-arm statistics; found {arms or 'none'}")
    s = cfg.section("statistics")
    A, B = (read_json(ws.analysis(a)) for a in ("A", "B"))
    comparisons = []
    for metric in ("complexity", "entropy", "specialization"):
        for t in cfg.timesteps:
            sa = A["per_batch"][metric].get(str(t))
            sb = B["per_batch"][metric].get(str(t))
            if not sa or not sb or len(sa) < 2 or len(sb) < 2:
                continue
            res = stats.compare(
                sa,
                sb,
                resamples=int(s["resamples"]),
                coverage=float(s["coverage"]),
                alpha=float(s["alpha"]),
                seed=cfg.seed,
            )
            res.update(comparison="B_vs_A", metric=metric, timestep=t)
            comparisons.append(res)
    # one Bonferroni family: every p-value in this section
    family = [c["welch_p"] for c in comparisons] + [c["ks_p"] for c in comparisons]
    adjusted = stats.bonferroni(family) if family else []
    m = len(comparisons)
    for i, c in enumerate(comparisons):
        c["welch_p_adjusted"] = adjusted[i]
        c["ks_p_adjusted"] = adjusted[m + i]
    write_json(ws.stats, {"family_size": len(family), "comparisons": comparisons})
    write_csv(ws.root / "stats.csv", stats.STATS_CSV_HEADER, stats_rows(comparisons))


def stats_rows(comparisons: list[dict]) -> list[list]:
    rows = []
    for c in comparisons:
        common = [c["comparison"], c["metric"], c["timestep"]]
        tail = [c["n_a"], c["n_b"]]
        rows.append(common + ["welch_t", c["welch_t"], c["welch_p"], c["welch_p_adjusted"], "", "", ""] + tail + [""])
        rows.append(common + ["ks", c["ks_d"], c["ks_p"], c["ks_p_adjusted"], "", "", ""] + tail + [""])
        rows.append(common + ["cohens_d", c["cohens_d"], "", "", c["cohens_d"], "", ""] + tail + [""])
        rows.append(common + ["bootstrap_ci", "", "", "", "", c["ci_low"], c["ci_high"]] + tail + [""])
        rows.append(common + ["power", "", "", "", c["cohens_d"], "", ""] + tail + [c["power"]])
    return [[repr(v) if isinstance(v, float) else v for v in r] for r in rows]


# ---------------------------------------------------------------- phases


def phase_boundaries(T: int) -> list[int]:
    return [int(round(f * T)) for f in PHASE_FRACTIONS]


def segment_phases(complexity_series: dict, accuracy_series: dict | None, T: int) -> list[dict]:
    """Split the timestep axis into four phases at t/T = 0.7, 0.4, 0.1.

    Phase 1 is the noisiest ([0.7T, T)), phase 4 the cleanest ([0, 0.1T)).
    """
    ts = sorted(int(t) for t in complexity_series)
    if len(ts) < MIN_PHASE_TIMESTEPS:
        raise ValueError(f"phase segmentation needs at least {MIN_PHASE_TIMESTEPS} timesteps, got {len(ts)}")
    b1, b2, b3 = phase_boundaries(T)
    ranges = [(b1, T), (b2, b1), (b3, b2), (0, b3)]
    c = {int(k): v for k, v in complexity_series.items()}
    acc = {int(k): v for k, v in (accuracy_series or {}).items()}
    phases = []
    for i, (lo, hi) in enumerate(ranges, start=1):
        members = [t for t in ts if lo <= t < hi]
        cvals = [c[t] for t in members if c[t] is not None]
        avals = [acc[t] for t in members if t in acc]
        phases.append(
            {
                "phase": i,
                "t_start": hi - 1,
                "t_end": lo,
                "timesteps": members,
                "mean_complexity": float(np.mean(cvals)) if cvals else None,
                "mean_accuracy": float(np.mean(avals)) if avals else None,
            }
        )
    return phases


# ---------------------------------------------------------------- driver


def _stage_fn(name: str) -> Callable[[ExperimentConfig, Workspace], None]:
    from . import report

    return {
        "gen-data": stage_gen_data,
        "train": stage_train,
        "trace": stage_trace,
        "analyze": stage_analyze,
        "intervene": stage_intervene,
        "stats": stage_stats,
        "report": report.stage_report,
    }[name]


def run_stage(name: str, cfg: ExperimentConfig, ws: Workspace | None = None, resume: bool = False) -> bool:
    """Run one stage; returns False when skipped by ``resume``."""
    ws = ws or Workspace(cfg.output_dir)
    marker = ws.marker(name)
    if resume and marker.exists() and marker.read_text().strip() == cfg.digest():
        logger.info("stage %s already complete; skipping", name)
        return False
    start = time.perf_counter()
    try:
        _stage_fn(name)(cfg, ws)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
    marker.parent.mkdir(parents=True, exist_ok=True)
    marker.write_text(cfg.digest() + "\n")
    logger.info("stage %s done in %.1fs", name, time.perf_counter() - start)
    return True


def run_pipeline(cfg: ExperimentConfig, resume: bool = False, stages: Iterable[str] = STAGES) -> dict:
    ws = Workspace(cfg.output_dir)
    ws.root.mkdir(parents=True, exist_ok=True)
    write_json(ws.root / "config.json", cfg.to_dict(include_output=False))
    for name in stages:
        run_stage(name, cfg, ws, resume)
    return read_json(ws.report) if ws.report.exists() else {}
