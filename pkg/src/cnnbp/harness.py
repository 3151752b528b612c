"""End-to-end experiment pipeline and k-fold cross-workload evaluation.

A run takes a list of workloads (trace files or synthetic generator
specs), screens each for hard-to-predict branches under a baseline
predictor, trains one helper per hard branch per mode on a single
workload, and measures the misprediction reduction that helper delivers
on every held-out workload; each choice of training workload is one fold
and results are averaged across folds.

Helpers only ever override the baseline's prediction for their own static
branch; the baseline continues to train on actual outcomes, so statistics
for every other branch are untouched.

Reports carry three artifacts: a canonical YAML report, a per-evaluation
CSV, and a plain-text summary table.  The YAML report from ``run_crossval``
is bit-deterministic for a fixed config; the emission timestamp is added
only at write time and lives in the single ``generated_at`` field.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import synth
from .baselines import (
    BranchStats,
    H2pScreenConfig,
    PerceptronConfig,
    PerceptronPredictor,
    TageLite,
    TageLiteConfig,
    screen_h2ps,
    simulate_baseline,
)
from .cnn import CnnModel, TrainConfig, init_model, predict_fp_batch, train
from .deploy import DeployedHelper, predict as deployed_predict, storage_bytes
from .encoder import EncoderConfig, collect_training_set, encode_trace, extract_windows
from .rng import derive_seed
from .trace import Trace, read_trace

MODES = ("fp", "tp")

# Static prediction-latency figures for the report, quoted from the
# reference design's published complexity comparison; never measured here.
LATENCY_METADATA = {
    "serial_computations": {"tp_cnn": 6, "tage_8kb": 34, "tage_64kb": 32},
    "serial_table_lookups": {"tp_cnn": 0, "tage_8kb": 2, "tage_64kb": 2},
    "popcount_circuit_stages": {"8_filters": 13, "32_filters": 15},
    "source": "published reference values; static metadata, not computed",
}


class ConfigError(ValueError):
    """Bad experiment configuration (unknown keys, missing fields, bad values)."""


@dataclass(frozen=True)
class WorkloadSpec:
    """One workload: either a trace file path or a synthetic generator spec."""

    path: str | None = None
    kind: str | None = None  # "corrloop" | "spread"
    num_calls: int = 10_000
    seed: int = 0
    position_spread: int | None = None

    def __post_init__(self):
        if (self.path is None) == (self.kind is None):
            raise ConfigError("workload needs exactly one of 'path' or 'kind'")
        if self.kind is not None and self.kind not in ("corrloop", "spread"):
            raise ConfigError(f"unknown synthetic workload kind {self.kind!r}")
        if self.kind == "spread" and self.position_spread is None:
            raise ConfigError("spread workloads need 'position_spread'")


@dataclass
class ExperimentConfig:
    workloads: list[WorkloadSpec]
    baseline_kind: str = "tage"
    tage: TageLiteConfig = field(default_factory=TageLiteConfig)
    perceptron: PerceptronConfig = field(default_factory=PerceptronConfig)
    screen: H2pScreenConfig = field(default_factory=H2pScreenConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    modes: tuple[str, ...] = MODES
    min_workloads_per_h2p: int = 3
    output_dir: str = "out"
    seed: int = 0

    def __post_init__(self):
        if len(self.workloads) < 2:
            raise ConfigError("cross-validation needs at least 2 workloads")
        if self.min_workloads_per_h2p < 2:
            raise ConfigError("min_workloads_per_h2p must be >= 2")
        if self.baseline_kind not in ("tage", "perceptron"):
            raise ConfigError(f"unknown baseline {self.baseline_kind!r}")
        bad = set(self.modes) - set(MODES)
        if bad:
            raise ConfigError(f"unknown modes {sorted(bad)}")

    def make_baseline(self):
        if self.baseline_kind == "tage":
            return TageLite(self.tage)
        return PerceptronPredictor(self.perceptron)


def _from_mapping(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    allowed = {f.name for f in fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}")


def experiment_config_from_dict(data: dict) -> ExperimentConfig:
    """Strict construction from a config mapping; unknown keys are errors."""
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    known = {
        "workloads", "baseline", "screen", "encoder", "train", "modes",
        "min_workloads_per_h2p", "output_dir", "seed",
    }
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"config: unknown keys {sorted(unknown)}")
    if "workloads" not in data:
        raise ConfigError("config: 'workloads' is required")
    workloads = [
        _from_mapping(WorkloadSpec, w, f"workloads[{i}]")
        for i, w in enumerate(data["workloads"])
    ]
    baseline = dict(data.get("baseline", {}))
    kind = baseline.pop("kind", "tage")
    kw: dict[str, Any] = {"workloads": workloads, "baseline_kind": kind}
    if kind == "tage":
        kw["tage"] = _from_mapping(TageLiteConfig, baseline, "baseline")
    elif kind == "perceptron":
        kw["perceptron"] = _from_mapping(PerceptronConfig, baseline, "baseline")
    elif baseline:
        raise ConfigError(f"baseline: unknown kind {kind!r}")
    if "screen" in data:
        kw["screen"] = _from_mapping(H2pScreenConfig, data["screen"], "screen")
    if "encoder" in data:
        kw["encoder"] = _from_mapping(EncoderConfig, data["encoder"], "encoder")
    if "train" in data:
        kw["train"] = _from_mapping(TrainConfig, data["train"], "train")
    if "modes" in data:
        kw["modes"] = tuple(data["modes"])
    for key in ("min_workloads_per_h2p", "output_dir", "seed"):
        if key in data:
            kw[key] = data[key]
    return ExperimentConfig(**kw)


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f)
    return experiment_config_from_dict(data)


def config_as_dict(config: ExperimentConfig) -> dict:
    d = asdict(config)
    d["modes"] = list(config.modes)
    return d


def load_workload(spec: WorkloadSpec) -> Trace:
    if spec.path is not None:
        return read_trace(spec.path)
    cfg = synth.SynthConfig(num_calls=spec.num_calls, seed=spec.seed)
    if spec.kind == "corrloop":
        return synth.generate_corrloop_trace(cfg)
    return synth.generate_spread_trace(cfg, spec.position_spread)


def compute_mpki(stats: dict[int, BranchStats], instruction_count: int | None) -> float:
    """Mispredictions per kilo-instruction across all branches in ``stats``."""
    if not instruction_count:
        raise ValueError("instruction_count required for MPKI")
    total = sum(s.mispredictions for s in stats.values())
    return total * 1000.0 / instruction_count


# ---------------------------------------------------------------------------
# helper evaluation over a full trace


def eval_fp_on_trace(model: CnnModel, trace: Trace, h2p_ip: int,
                     encoder: EncoderConfig, chunk: int = 8192) -> BranchStats:
    """Frozen FP helper accuracy over every occurrence of the branch."""
    occ = np.flatnonzero(trace.ips == np.uint64(h2p_ip))
    encoded = encode_trace(trace, encoder.p)
    wrong = 0
    for lo in range(0, len(occ), chunk):
        part = occ[lo : lo + chunk]
        windows = extract_windows(encoded, part, encoder.history_len)
        preds = predict_fp_batch(model, windows) > 0.0
        wrong += int(np.count_nonzero(preds != (trace.taken[part] == 1)))
    return BranchStats(len(occ), wrong)


def eval_deployed_on_trace(helper: DeployedHelper, trace: Trace, h2p_ip: int) -> BranchStats:
    """Stream the whole trace through the deployed engine: one FIFO update
    per record, one popcount prediction per occurrence of the branch."""
    encoded = encode_trace(trace, helper.p).tolist()
    is_target = (trace.ips == np.uint64(h2p_ip)).tolist()
    dirs = trace.taken.tolist()
    fifo = helper.make_fifo()
    rows_s, rows_v = helper.table.rows_s, helper.table.rows_v
    push = fifo.push_row
    n = wrong = 0
    for i, e in enumerate(encoded):
        if is_target[i]:
            taken_pred, _ = deployed_predict(helper, fifo)
            n += 1
            if taken_pred != (dirs[i] == 1):
                wrong += 1
        push(rows_s[e], rows_v[e])
    return BranchStats(n, wrong)


# ---------------------------------------------------------------------------
# folds


def _train_helper(config: ExperimentConfig, trace: Trace, h2p_ip: int, mode: str,
                  fold: int) -> CnnModel:
    tc = config.train
    seed = derive_seed(config.seed, f"fold{fold}:h2p{h2p_ip:x}:{mode}")
    sample_seed = derive_seed(config.seed, f"fold{fold}:h2p{h2p_ip:x}:sample")
    dataset = collect_training_set(trace, h2p_ip, config.encoder, tc.sample_budget, sample_seed)
    model = init_model(
        config.encoder.p, tc.filters, config.encoder.history_len,
        mode="ternary" if mode == "tp" else "fp", q=tc.q, seed=seed,
    )
    run_cfg = TrainConfig(
        epochs=tc.epochs, sample_budget=tc.sample_budget,
        learning_rate=tc.learning_rate, beta1=tc.beta1, beta2=tc.beta2,
        epsilon=tc.epsilon, batch_size=tc.batch_size, q=tc.q,
        mode=model.mode, filters=tc.filters, seed=seed,
    )
    train(model, dataset, run_cfg)
    return model


def run_fold(
    config: ExperimentConfig,
    train_index: int,
    workloads: list[Trace] | None = None,
    base_stats: list[dict[int, BranchStats]] | None = None,
    h2p_sets: list[list[int]] | None = None,
    eligible: set[int] | None = None,
) -> dict:
    """One fold: screen the training workload, train one helper per hard
    branch per mode, evaluate each on every held-out workload.

    Pairs where the branch is absent from the held-out workload (or where
    the baseline never mispredicts it) are skipped with a recorded reason.
    Precomputed per-workload state may be passed in by run_crossval.
    """
    if workloads is None:
        workloads = [load_workload(w) for w in config.workloads]
    if base_stats is None:
        base_stats = [simulate_baseline(t, config.make_baseline()) for t in workloads]
    if h2p_sets is None:
        h2p_sets = [
            screen_h2ps(s, config.screen, t.meta.instruction_count)
            for s, t in zip(base_stats, workloads)
        ]
    fold_h2ps = list(h2p_sets[train_index])
    if eligible is not None:
        fold_h2ps = [ip for ip in fold_h2ps if ip in eligible]

    results = []
    skips = []
    helper_stats: dict[tuple[int, str, int], BranchStats] = {}
    for h2p_ip in fold_h2ps:
        for mode in config.modes:
            model = _train_helper(config, workloads[train_index], h2p_ip, mode, train_index)
            deployed = DeployedHelper.from_model(model) if mode == "tp" else None
            for g, heldout in enumerate(workloads):
                if g == train_index:
                    continue
                held_id = heldout.meta.workload_id
                base = base_stats[g].get(h2p_ip)
                if base is None or base.predictions == 0:
                    skips.append({"h2p": f"0x{h2p_ip:x}", "mode": mode,
                                  "heldout": held_id, "reason": "absent"})
                    continue
                if base.mispredictions == 0:
                    skips.append({"h2p": f"0x{h2p_ip:x}", "mode": mode,
                                  "heldout": held_id, "reason": "baseline_perfect"})
                    continue
                if mode == "tp":
                    hstat = eval_deployed_on_trace(deployed, heldout, h2p_ip)
                else:
                    hstat = eval_fp_on_trace(model, heldout, h2p_ip, config.encoder)
                helper_stats[(h2p_ip, mode, g)] = hstat
                reduction = (base.mispredictions - hstat.mispredictions) / base.mispredictions
                results.append({
                    "h2p": f"0x{h2p_ip:x}", "mode": mode, "heldout": held_id,
                    "base_mispredictions": base.mispredictions,
                    "helper_mispredictions": hstat.mispredictions,
                    "reduction": reduction,
                })

    mpki = {}
    held_indices = [g for g in range(len(workloads)) if g != train_index]
    total_instr = sum(workloads[g].meta.instruction_count or 0 for g in held_indices)
    base_total = sum(
        sum(s.mispredictions for s in base_stats[g].values()) for g in held_indices
    )
    for mode in config.modes:
        after = base_total
        for g in held_indices:
            for h2p_ip in fold_h2ps:
                st = helper_stats.get((h2p_ip, mode, g))
                if st is not None:
                    after += st.mispredictions - base_stats[g][h2p_ip].mispredictions
        mpki[mode] = {
            "before": base_total * 1000.0 / total_instr if total_instr else 0.0,
            "after": after * 1000.0 / total_instr if total_instr else 0.0,
        }

    return {
        "fold": train_index,
        "train_workload": workloads[train_index].meta.workload_id,
        "h2ps": [f"0x{ip:x}" for ip in fold_h2ps],
        "results": results,
        "skips": skips,
        "mpki": mpki,
    }


def run_crossval(config: ExperimentConfig) -> dict:
    """All folds (each workload once as training source), plus aggregates.

    Helpers are trained only for branches screened as hard in at least
    ``min_workloads_per_h2p`` workloads.  Returns the report mapping; the
    ``empty`` flag is set when no branch is eligible.
    """
    workloads = [load_workload(w) for w in config.workloads]
    ids = [t.meta.workload_id for t in workloads]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"workload ids must be unique, got {ids}")
    base_stats = [simulate_baseline(t, config.make_baseline()) for t in workloads]
    h2p_sets = [
        screen_h2ps(s, config.screen, t.meta.instruction_count)
        for s, t in zip(base_stats, workloads)
    ]
    counts: dict[int, int] = {}
    for s in h2p_sets:
        for ip in s:
            counts[ip] = counts.get(ip, 0) + 1
    eligible = {ip for ip, c in counts.items() if c >= config.min_workloads_per_h2p}

    folds = [
        run_fold(config, i, workloads, base_stats, h2p_sets, eligible)
        for i in range(len(workloads))
    ]

    # per-(h2p, mode): average per-fold reductions, each fold itself the
    # mean over its held-out workloads
    per_h2p: dict[str, dict[str, dict]] = {}
    for mode in config.modes:
        for ip in sorted(eligible):
            key = f"0x{ip:x}"
            fold_means = []
            for fold in folds:
                rs = [r["reduction"] for r in fold["results"]
                      if r["h2p"] == key and r["mode"] == mode]
                if rs:
                    fold_means.append(float(np.mean(rs)))
            if fold_means:
                per_h2p.setdefault(key, {})[mode] = {
                    "mean_reduction": float(np.mean(fold_means)),
                    "folds_evaluated": len(fold_means),
                }

    aggregates = {}
    for mode in config.modes:
        reds = [v[mode]["mean_reduction"] for v in per_h2p.values() if mode in v]
        winners = [r for r in reds if r > 0.0]
        aggregates[mode] = {
            "num_h2ps": len(reds),
            "pct_winners": 100.0 * len(winners) / len(reds) if reds else 0.0,
            "mean_reduction_winners": float(np.mean(winners)) if winners else 0.0,
            "mean_reduction_all": float(np.mean(reds)) if reds else 0.0,
            "mpki_before": float(np.mean([f["mpki"][mode]["before"] for f in folds])),
            "mpki_after": float(np.mean([f["mpki"][mode]["after"] for f in folds])),
        }

    enc, tc = config.encoder, config.train
    return {
        "schema": "cnnbp-report-v1",
        "generated_at": "",
        "config": config_as_dict(config),
        "workloads": [
            {"id": ids[i], "records": len(workloads[i]),
             "instructions": workloads[i].meta.instruction_count,
             "h2ps": [f"0x{ip:x}" for ip in h2p_sets[i]]}
            for i in range(len(workloads))
        ],
        "eligible_h2ps": [f"0x{ip:x}" for ip in sorted(eligible)],
        "empty": not eligible,
        "folds": folds,
        "per_h2p": per_h2p,
        "aggregates": aggregates,
        "storage_bytes_per_helper": storage_bytes(enc.p, tc.filters, enc.history_len),
        "latency_metadata": LATENCY_METADATA,
    }


# ---------------------------------------------------------------------------
# report emission

CSV_COLUMNS = ["fold", "train_workload", "heldout_workload", "h2p", "mode",
               "base_mispredictions", "helper_mispredictions", "reduction"]


def report_to_yaml(report: dict) -> str:
    return yaml.safe_dump(report, sort_keys=True, default_flow_style=False)


def report_from_yaml(text: str) -> dict:
    return yaml.safe_load(text)


def folds_csv_text(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(CSV_COLUMNS)
    for fold in report["folds"]:
        for r in fold["results"]:
            w.writerow([
                fold["fold"], fold["train_workload"], r["heldout"], r["h2p"],
                r["mode"], r["base_mispredictions"], r["helper_mispredictions"],
                repr(r["reduction"]),
            ])
    return buf.getvalue()


def summary_text(report: dict) -> str:
    lines = []
    lines.append("Helper evaluation summary")
    lines.append("=" * 72)
    lines.append(f"workloads: {len(report['workloads'])}, "
                 f"folds: {len(report['folds'])}, "
                 f"eligible hard branches: {len(report['eligible_h2ps'])}")
    lines.append(f"storage per helper: {report['storage_bytes_per_helper']} bytes")
    lines.append("")
    header = (f"{'Mode':<8}{'# H2Ps':>8}{'% Winners':>12}"
              f"{'Red./winner':>14}{'Red./all':>12}{'MPKI':>16}")
    lines.append(header)
    lines.append("-" * len(header))
    for mode, agg in sorted(report["aggregates"].items()):
        mpki = f"{agg['mpki_before']:.3f}->{agg['mpki_after']:.3f}"
        lines.append(
            f"{mode:<8}{agg['num_h2ps']:>8}{agg['pct_winners']:>11.1f}%"
            f"{agg['mean_reduction_winners'] * 100:>13.1f}%"
            f"{agg['mean_reduction_all'] * 100:>11.1f}%{mpki:>16}"
        )
    lines.append("")
    lm = report["latency_metadata"]
    lines.append(f"latency metadata ({lm['source']}):")
    lines.append(f"  serial computations: {lm['serial_computations']}")
    lines.append(f"  popcount circuit stages: {lm['popcount_circuit_stages']}")
    skips = [s for fold in report["folds"] for s in fold["skips"]]
    if skips:
        lines.append("")
        lines.append(f"skipped evaluations: {len(skips)}")
        for s in skips:
            lines.append(f"  fold h2p={s['h2p']} mode={s['mode']} "
                         f"heldout={s['heldout']}: {s['reason']}")
    return "\n".join(lines) + "\n"


def emit_report(report: dict, out_dir: str | Path, timestamp: str | None = None) -> dict[str, Path]:
    """Write report.yaml, folds.csv and summary.txt; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stamped = dict(report)
    if timestamp is not None:
        stamped["generated_at"] = timestamp
    paths = {
        "report": out / "report.yaml",
        "csv": out / "folds.csv",
        "summary": out / "summary.txt",
    }
    paths["report"].write_text(report_to_yaml(stamped), encoding="utf-8")
    paths["csv"].write_text(folds_csv_text(report), encoding="utf-8")
    paths["summary"].write_text(summary_text(report), encoding="utf-8")
    return paths
