"""Assemble, emit and verify ``report.json`` plus its CSV tables and plot data."""

from __future__ import annotations

import json
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .causal import IMPACT_CSV_HEADER
from .config import ExperimentConfig
from .metrics import METRIC_CSV_HEADER, MetricValue, divergence
from .pipeline import (
    Workspace,
    analyze_trace,
    clean_json,
    read_json,
    read_loss_curve,
    segment_phases,
    sha256_file,
    stats_rows,
    write_csv,
)
from .stats import STATS_CSV_HEADER
from .trace import read_trace

CONVENTIONS = {
    "prediction_accuracy": "repo convention: max(0, 1 - MSE(eps_hat, eps) / Var(eps)) on held-out noise draws",
    "error_bars": "complexity spread is reported twice, labeled: sd is the sample standard deviation over trace batches, sem is sd / sqrt(batches)",
    "unit_of_analysis": "each trace batch is one observation in cross-arm statistics",
    "impact_mse": "impact uses the per-element mean of the squared noise-prediction error",
    "ablation_rank": "strict ranking by descending impact with ties broken by layer name; the reference ablation table lists two entries at rank 2, which a strict ranking cannot produce",
    "timesteps": "analysis timesteps are given on a 1000-step axis and rescaled as round(t * T / 1000)",
    "not_reproduced": "complexity ratios, per-head entropies and effect sizes depend on the trained model; the reference values come from a far larger model and are not expected to match",
}

_NUM = {"type": ["number", "null"]}
REPORT_SCHEMA = {
    "type": "object",
    "required": ["provenance", "arms", "tables", "divergence", "phases"],
    "additionalProperties": False,
    "properties": {
        "provenance": {
            "type": "object",
            "required": ["config_digest", "seed", "seeds", "version", "trace_sha256", "settings", "conventions"],
        },
        "arms": {
            "type": "object",
            "required": ["A", "B"],
            "properties": {
                arm: {
                    "type": "object",
                    "required": ["metrics", "complexity", "accuracy", "training"],
                    "properties": {"metrics": {"type": "array", "items": {"type": "object"}}},
                }
                for arm in "AB"
            },
        },
        "tables": {
            "type": "object",
            "required": ["complexity_ratio", "head_specialization", "ablation", "cross_arm_stats"],
            "properties": {
                "complexity_ratio": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["timestep", "A", "B", "ratio"],
                        "properties": {"timestep": {"type": "integer"}, "A": _NUM, "B": _NUM, "ratio": _NUM},
                    },
                },
                "head_specialization": {"type": "array", "items": {"type": "object"}},
                "ablation": {"type": "array", "items": {"type": "object"}},
                "cross_arm_stats": {"type": "array", "items": {"type": "object"}},
            },
        },
        "divergence": {
            "type": "object",
            "required": ["entropy", "specialization"],
            "additionalProperties": {"type": "array"},
        },
        "phases": {"type": "object"},
    },
}


class VerificationError(RuntimeError):
    pass


def validate_report(report: dict) -> None:
    jsonschema.validate(report, REPORT_SCHEMA)


def _spread(values) -> tuple[float | None, float | None]:
    v = np.asarray(values or [], dtype=np.float64)
    if v.size < 2:
        return None, None
    sd = float(v.std(ddof=1))
    return sd, sd / float(np.sqrt(v.size))


def _arm_block(analysis: dict) -> dict:
    complexity = []
    for t in sorted(analysis["complexity"], key=int):
        c = analysis["complexity"][t]
        sd, sem = _spread(analysis["per_batch"]["complexity"].get(t))
        complexity.append(
            {"timestep": int(t), "mean": c["mean"], "sd": sd, "sem": sem, "per_layer": c["per_layer"]}
        )
    return {
        "metrics": analysis["metrics"],
        "complexity": complexity,
        "accuracy": [{"timestep": int(t), "value": v} for t, v in sorted(analysis.get("accuracy", {}).items(), key=lambda kv: int(kv[0]))],
        "ife": [
            {"timestep": int(t), "pair": pair, "value": v}
            for t in sorted(analysis["ife"], key=int)
            for pair, v in analysis["ife"][t].items()
        ],
        "training": analysis.get("training", {}),
    }


def _complexity_ratio(arms: dict, stats_doc: dict | None) -> list[dict]:
    a = {r["timestep"]: r for r in arms["A"]["complexity"]}
    b = {r["timestep"]: r for r in arms["B"]["complexity"]}
    pvals = {}
    for c in (stats_doc or {}).get("comparisons", []):
        if c["metric"] == "complexity":
            pvals[c["timestep"]] = (c["welch_p"], c["welch_p_adjusted"])
    rows = []
    for t in sorted(set(a) & set(b)):
        ca, cb = a[t]["mean"], b[t]["mean"]
        ratio = cb / ca if ca not in (0, None) and cb is not None else None
        p, p_adj = pvals.get(t, (None, None))
        rows.append(
            {
                "timestep": t,
                "A": ca,
                "B": cb,
                "ratio": ratio,
                "A_sd": a[t]["sd"],
                "A_sem": a[t]["sem"],
                "B_sd": b[t]["sd"],
                "B_sem": b[t]["sem"],
                "welch_p": p,
                "welch_p_adjusted": p_adj,
            }
        )
    return rows


def _head_table(analyses: dict, interventions: dict) -> list[dict]:
    rows = []
    for arm, an in analyses.items():
        importance = {}
        for t, results in (interventions.get(arm) or {}).get("head_importance", {}).items():
            for r in results:
                importance[(int(t), r["spec"]["head"])] = r["impact"]
        for t in sorted(an["heads"], key=int):
            for h in sorted(an["heads"][t], key=int):
                info = an["heads"][t][h]
                rows.append(
                    {
                        "arm": arm,
                        "timestep": int(t),
                        "head": int(h),
                        "layer": info["layer"],
                        "entropy": info["entropy"],
                        "specialization": info["specialization"],
                        "importance": importance.get((int(t), int(h))),
                        "n": info["n"],
                    }
                )
    return rows


def _ablation_table(interventions: dict) -> list[dict]:
    rows = []
    for arm in sorted(interventions):
        for r in interventions[arm].get("ablation", []):
            rows.append(
                {
                    "arm": arm,
                    "kind": r["spec"]["kind"],
                    "target": r["target"],
                    "timestep": r["timestep"],
                    "baseline_mse": r["baseline_mse"],
                    "intervened_mse": r["intervened_mse"],
                    "impact": r["impact"],
                    "rank": r["rank"],
                    "n": r["n"],
                    "seed": r["seed"],
                }
            )
    return rows


def _divergence(analyses: dict) -> dict:
    out = {}
    for key in ("entropy", "specialization"):
        series = {}
        for arm in ("A", "B"):
            series[arm] = {int(t): [v[key] for v in heads.values()] for t, heads in analyses[arm]["heads"].items()}
        common = sorted(set(series["A"]) & set(series["B"]))
        div = divergence({t: series["A"][t] for t in common}, {t: series["B"][t] for t in common})
        out[key] = [{"timestep": t, "value": v} for t, v in div.items()]
    return out


def _phases(cfg: ExperimentConfig, arms: dict) -> dict:
    out = {}
    for arm, block in arms.items():
        cs = {r["timestep"]: r["mean"] for r in block["complexity"]}
        acc = {r["timestep"]: r["value"] for r in block["accuracy"]}
        try:
            out[arm] = {"boundaries_applied": True, "phases": segment_phases(cs, acc, cfg.T)}
        except ValueError as exc:
            out[arm] = {"boundaries_applied": False, "reason": str(exc), "phases": []}
    return out


def build_report(cfg: ExperimentConfig, ws: Workspace) -> dict:
    """Collect every stage's stored output into one JSON-ready document."""
    missing = [a for a in ("A", "B") if not ws.analysis(a).exists()]
    if missing:
        raise FileNotFoundError(f"analysis output missing for arm(s) {missing}; both arms are required for a report")
    analyses = {a: read_json(ws.analysis(a)) for a in ("A", "B")}
    interventions = {a: read_json(ws.interventions(a)) for a in ("A", "B") if ws.interventions(a).exists()}
    stats_doc = read_json(ws.stats) if ws.stats.exists() else None
    arms = {a: _arm_block(analyses[a]) for a in ("A", "B")}
    for a in interventions:
        arms[a]["robustness"] = [
            {"timestep": int(t), "value": v["value"]}
            for t, v in sorted(interventions[a]["robustness"].items(), key=lambda kv: int(kv[0]))
        ]
    a = cfg.section("analysis")
    report = {
        "provenance": {
            "config_digest": cfg.digest(),
            "seed": cfg.seed,
            "seeds": {
                "train": cfg.train_seed(),
                **{f"data_{arm}": cfg.dataset_config(arm).seed for arm in cfg.arm_names},
                **{f"eval_{arm}": cfg.eval_seed(arm) for arm in cfg.arm_names},
            },
            "version": __version__,
            "T": cfg.T,
            "timesteps": cfg.timesteps,
            "trace_sha256": {arm: analyses[arm]["trace_sha256"] for arm in ("A", "B")},
            "settings": {
                "bins": int(a["bins"]),
                "per_row_entropy": bool(a["per_row_entropy"]),
                "sparsity_eps": float(a["sparsity_eps"]),
            },
            "conventions": CONVENTIONS,
        },
        "arms": arms,
        "tables": {
            "complexity_ratio": _complexity_ratio(arms, stats_doc),
            "head_specialization": _head_table(analyses, interventions),
            "ablation": _ablation_table(interventions),
            "cross_arm_stats": (stats_doc or {}).get("comparisons", []),
        },
        "divergence": _divergence(analyses),
        "phases": _phases(cfg, arms),
    }
    report = clean_json(report)
    validate_report(report)
    return report


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _r(v):
    return "" if v is None else repr(v) if isinstance(v, float) else v


def emit_report(report: dict, out_dir: str | Path) -> None:
    """Write report.json, one CSV per table, and per-figure-family CSVs under plotdata/."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(dumps_report(report))
    tables, plots = out / "tables", out / "plotdata"
    t = report["tables"]

    cr_cols = ["timestep", "A", "B", "ratio", "A_sd", "A_sem", "B_sd", "B_sem", "welch_p", "welch_p_adjusted"]
    write_csv(tables / "complexity_ratio.csv", cr_cols, [[_r(row[c]) for c in cr_cols] for row in t["complexity_ratio"]])
    hs_cols = ["arm", "timestep", "head", "layer", "entropy", "specialization", "importance", "n"]
    write_csv(tables / "head_specialization.csv", hs_cols, [[_r(row[c]) for c in hs_cols] for row in t["head_specialization"]])
    write_csv(
        tables / "ablation.csv",
        ["arm"] + IMPACT_CSV_HEADER,
        [[_r(row["arm"])] + [_r(row[c]) for c in IMPACT_CSV_HEADER] for row in t["ablation"]],
    )
    write_csv(tables / "cross_arm_stats.csv", STATS_CSV_HEADER, stats_rows(t["cross_arm_stats"]))

    metric_rows = {"complexity": [], "entropy": [], "ife": []}
    for arm in ("A", "B"):
        for m in report["arms"][arm]["metrics"]:
            row = MetricValue(**m).csv_row()
            metric_rows["entropy" if m["kind"] in ("entropy", "specialization") else m["kind"]].append(row)
    write_csv(plots / "complexity_evolution.csv", METRIC_CSV_HEADER, metric_rows["complexity"])
    write_csv(plots / "attention_entropy.csv", METRIC_CSV_HEADER, metric_rows["entropy"])
    write_csv(plots / "information_flow.csv", METRIC_CSV_HEADER, metric_rows["ife"])
    div_rows = [
        MetricValue("divergence", d["value"], key, None, d["timestep"], "A|B").csv_row()
        for key in sorted(report["divergence"])
        for d in report["divergence"][key]
    ]
    write_csv(plots / "divergence.csv", METRIC_CSV_HEADER, div_rows)
    write_csv(
        plots / "ablation_impacts.csv",
        ["arm", "target", "timestep", "impact", "rank"],
        [[row["arm"], row["target"], row["timestep"], _r(row["impact"]), _r(row["rank"])] for row in t["ablation"]],
    )
    write_csv(
        plots / "accuracy.csv",
        ["arm", "timestep", "accuracy"],
        [[arm, r["timestep"], _r(r["value"])] for arm in ("A", "B") for r in report["arms"][arm]["accuracy"]],
    )


def emit_loss_curves(ws: Workspace, arms=("A", "B")) -> None:
    rows = []
    for arm in arms:
        if ws.loss_curve(arm).exists():
            rows += [[arm, i, repr(v)] for i, v in enumerate(read_loss_curve(ws.loss_curve(arm)))]
    write_csv(ws.root / "plotdata" / "loss_curve.csv", ["arm", "step", "loss"], rows)


def stage_report(cfg: ExperimentConfig, ws: Workspace) -> None:
    report = build_report(cfg, ws)
    emit_report(report, ws.root)
    emit_loss_curves(ws)


# ---------------------------------------------------------------- verification


def _recomputable(report: dict) -> list[tuple[str, str, object, float | None]]:
    """(arm, description, locator, stored value) for numbers derived purely from traces."""
    items = []
    for arm in ("A", "B"):
        for m in report["arms"][arm]["metrics"]:
            loc = (m["kind"], m["layer"], m["head"], m["timestep"])
            items.append((arm, f"arms.{arm}.metrics {loc}", loc, m["value"]))
    for row in report["tables"]["complexity_ratio"]:
        items.append(("A|B", f"tables.complexity_ratio t={row['timestep']}", ("ratio", row["timestep"]), row["ratio"]))
    return items


def verify(out_dir: str | Path, seed: int = 0, count: int = 3) -> list[dict]:
    """Recompute ``count`` randomly chosen report numbers from the stored traces.

    Returns one entry per checked number; raises :class:`VerificationError` on
    any mismatch or when a trace no longer matches its recorded sha256.
    """
    ws = Workspace(out_dir)
    report = json.loads(ws.report.read_text())
    prov = report["provenance"]
    fresh: dict[str, dict] = {}
    for arm in ("A", "B"):
        path = ws.trace(arm)
        if sha256_file(path) != prov["trace_sha256"][arm]:
            raise VerificationError(f"trace {path} does not match the sha256 recorded in the report")
        s = prov["settings"]
        result = clean_json(analyze_trace(read_trace(path), arm, s["bins"], s["per_row_entropy"], s["sparsity_eps"]))
        fresh[arm] = {(m["kind"], m["layer"], m["head"], m["timestep"]): m["value"] for m in result["metrics"]}

    items = _recomputable(report)
    if not items:
        raise VerificationError("report holds no trace-derived numbers to verify")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(items), size=min(count, len(items)), replace=False)
    checked = []
    for i in sorted(int(p) for p in picks):
        arm, label, loc, stored = items[i]
        if arm == "A|B":
            t = loc[1]
            a = fresh["A"].get(("complexity", "all", None, t))
            b = fresh["B"].get(("complexity", "all", None, t))
            value = b / a if a not in (0, None) and b is not None else None
        else:
            value = fresh[arm].get(loc)
        ok = value == stored
        checked.append({"item": label, "stored": stored, "recomputed": value, "match": ok})
        if not ok:
            raise VerificationError(f"{label}: report has {stored!r}, traces give {value!r}")
    return checked
