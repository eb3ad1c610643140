"""Multi-trial execution, CSV output, aggregation and report tables."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import traceback
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data import make_dataset
from .metrics import SCHEMA_VERSION, ExperimentRecord, MoGEvaluator
from .models import build_model
from .trainers import TrainingAborted, run_training

log = logging.getLogger(__name__)

RESULTS_FILE = "results.csv"
SUMMARY_FILE = "final-summary.csv"
SWEEP_FILE = "sweep.csv"
SUMMARY_COLUMNS = ["schema_version", "config_hash", "method", "divergence", "r0", "metric", "mean", "stderr", "n", "status"]
SWEEP_COLUMNS = ["axis_value", "metric", "mean", "stderr"]


class ReportError(ValueError):
    """Malformed results file; message is ``path:line: reason``."""


@dataclass
class TrialResult:
    trial: int
    records: list[ExperimentRecord] = field(default_factory=list)
    failed: bool = False
    error: str = ""
    samples: np.ndarray | None = None


def trial_rngs(seed: int) -> list[np.random.Generator]:
    """Independent data / init / train / eval streams for one trial."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)]


def _record(cfg: ExperimentConfig, trial: int, seed: int, step: int, metrics: dict) -> ExperimentRecord:
    t = cfg.train
    rec = ExperimentRecord(trial, seed, step, t.method, t.divergence, float(t.r0))
    reasons = metrics.get("null_reasons", {})
    for name in ExperimentRecord.METRICS:
        rec.set_metric(name, metrics.get(name), reasons.get(name, ""))
    if cfg.record_wall_time:
        rec.set_metric("wall_time", metrics.get("wall_time"))
    else:
        # timing would break byte-identical reruns
        rec.set_metric("wall_time", None, "not_recorded")
    return rec


def run_trial(cfg: ExperimentConfig, trial: int, out_dir: str | None = None) -> TrialResult:
    """Train and evaluate one seeded trial; failures are captured, not raised."""
    seed = cfg.seed_for(trial)
    res = TrialResult(trial)
    data_rng, init_rng, train_rng, eval_rng = trial_rngs(seed)
    model = None
    try:
        ds = make_dataset(cfg.dataset, data_rng, cfg.eval.n_test)
        model = build_model(cfg.model, init_rng, cfg.np_dtype)
        ev = cfg.eval
        evaluator = MoGEvaluator(
            cfg.dataset, ds.test_x, eval_rng, ev.n_generated, ev.mode_threshold, ev.mc_samples, ev.is_proposals
        )
        train = replace(cfg.train, seed=seed, eval_every=ev.every)
        for event in run_training(train, model, ds.train_x, train_rng, evaluator):
            res.records.append(_record(cfg, trial, seed, event.step, event.metrics))
        z = model.sample_prior(ev.n_generated, eval_rng)
        res.samples = np.asarray(model.generator.sample(z, eval_rng, train=False), dtype=float)
    except TrainingAborted as exc:
        res.failed, res.error = True, f"aborted: {exc}"
    except Exception as exc:  # noqa: BLE001 - any mid-run failure keeps partial rows
        res.failed, res.error = True, f"{type(exc).__name__}: {exc}"
        log.debug("trial %d failed\n%s", trial, traceback.format_exc())
    if res.failed:
        log.error("trial %d (seed %d) failed: %s", trial, seed, res.error)
    if out_dir is not None and cfg.save_models and model is not None:
        save_model(model, Path(out_dir) / "models" / f"trial-{trial:03d}.npz")
    return res


def save_model(model, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for name, net in model.networks().items():
        mlp = getattr(net, "net", None)
        if mlp is None:
            continue
        for key, val in mlp.state_dict().items():
            arrays[f"{name}/{key}"] = val
    np.savez(path, **arrays)


def run_trials(cfg: ExperimentConfig, threads: int = 1, out_dir: str | None = None) -> list[TrialResult]:
    """All trials, in trial order regardless of worker scheduling."""
    ids = list(range(cfg.trials))
    if threads <= 1 or cfg.trials == 1:
        return [run_trial(cfg, t, out_dir) for t in ids]
    with ProcessPoolExecutor(max_workers=min(threads, cfg.trials)) as pool:
        return list(pool.map(run_trial, [cfg] * len(ids), ids, [out_dir] * len(ids)))


# -- aggregation -----------------------------------------------------------


def mean_stderr(values) -> tuple[float | None, float | None]:
    """Mean and ``std(ddof=1) / sqrt(n)``; stderr is None below two values."""
    v = np.asarray([x for x in values if x is not None], dtype=float)
    if v.size == 0:
        return None, None
    if v.size == 1:
        return float(v[0]), None
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def final_records(records: list[ExperimentRecord]) -> list[ExperimentRecord]:
    """Last evaluation of each trial."""
    last: dict[int, ExperimentRecord] = {}
    for r in records:
        if r.trial not in last or r.step >= last[r.trial].step:
            last[r.trial] = r
    return [last[t] for t in sorted(last)]


def summarize(records: list[ExperimentRecord], metrics=ExperimentRecord.METRICS) -> dict[str, tuple]:
    return summarize_finals(final_records(records), metrics)


def summarize_finals(finals: list[ExperimentRecord], metrics=ExperimentRecord.METRICS) -> dict[str, tuple]:
    """``{metric: (mean, stderr, n_non_null)}`` over one record per trial."""
    out = {}
    for m in metrics:
        vals = [getattr(r, m) for r in finals]
        mean, se = mean_stderr(vals)
        out[m] = (mean, se, sum(v is not None for v in vals))
    return out


# -- writers ---------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_results(path: Path, records: list[ExperimentRecord], config_hash: str) -> None:
    rows = sorted(records, key=lambda r: (r.trial, r.step))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ExperimentRecord.columns())
        for r in rows:
            w.writerow(r.row(config_hash))


def write_summary(path: Path, cfg: ExperimentConfig, results: list[TrialResult]) -> dict:
    records = [r for res in results for r in res.records]
    n_failed = sum(res.failed for res in results)
    status = "ok" if n_failed == 0 else f"failed:{n_failed}/{len(results)}"
    summary = summarize(records)
    t = cfg.train
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for m, (mean, se, n) in summary.items():
            w.writerow([SCHEMA_VERSION, cfg.hash(), t.method, t.divergence, _fmt(float(t.r0)), m, _fmt(mean), _fmt(se), n, status])
    return summary


def write_samples(path: Path, results: list[TrialResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial", "x0", "x1"])
        for res in results:
            if res.samples is None:
                continue
            for a, b in res.samples:
                w.writerow([res.trial, repr(float(a)), repr(float(b))])


@dataclass
class RunOutcome:
    out_dir: Path
    results: list[TrialResult]
    summary: dict

    @property
    def failed(self) -> bool:
        return any(r.failed for r in self.results)


def execute(cfg: ExperimentConfig, out_dir: str | Path, threads: int = 1) -> RunOutcome:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = run_trials(cfg, threads, str(out))
    records = [r for res in results for r in res.records]
    write_results(out / RESULTS_FILE, records, cfg.hash())
    summary = write_summary(out / SUMMARY_FILE, cfg, results)
    write_samples(out / "samples.csv", results)
    return RunOutcome(out, results, summary)


def write_sweep(path: Path, per_value: list[tuple[object, dict]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for value, summary in per_value:
            for m, (mean, se, _n) in summary.items():
                w.writerow([value, m, _fmt(mean), _fmt(se)])


# -- reading / reporting ---------------------------------------------------

_INT_FIELDS = {"trial", "seed", "step", "modes_covered"}
_STR_FIELDS = {"method", "divergence", "schema_version", "config_hash", "null_reasons"}


def read_results(path: str | Path) -> list[ExperimentRecord]:
    """Parse a results file, raising :class:`ReportError` anchored to the bad row."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ReportError(f"{path}: cannot read: {exc.strerror}") from None
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ReportError(f"{path}:1: empty file") from None
    expected = ExperimentRecord.columns()
    if header != expected:
        raise ReportError(f"{path}:1: unexpected header (want {','.join(expected)})")
    out = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ReportError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        vals = dict(zip(header, row))
        if vals["schema_version"] != str(SCHEMA_VERSION):
            raise ReportError(f"{path}:{lineno}: unsupported schema_version {vals['schema_version']!r}")
        kw = {}
        for name, raw in vals.items():
            if name in ("schema_version", "config_hash"):
                continue
            try:
                if name == "null_reasons":
                    kw[name] = dict(item.split(":", 1) for item in raw.split(";") if item)
                elif name in ("method", "divergence"):
                    kw[name] = raw
                elif raw == "":
                    if name in ("trial", "seed", "step", "method", "divergence", "r0"):
                        raise ValueError("required field is empty")
                    kw[name] = None
                elif name in _INT_FIELDS:
                    kw[name] = int(raw)
                else:
                    kw[name] = float(raw)
            except ValueError as exc:
                raise ReportError(f"{path}:{lineno}: column {name!r}: {exc}") from None
        out.append(ExperimentRecord(**kw))
    return out


def find_results(paths) -> list[Path]:
    found = []
    for p in map(Path, paths):
        if p.is_dir():
            found += sorted(p.rglob(RESULTS_FILE))
        else:
            found.append(p)
    return found


def _series_key(r: ExperimentRecord) -> tuple:
    return (r.method, r.divergence, r.r0)


def group_records(paths) -> dict[tuple, list[list[ExperimentRecord]]]:
    """Records grouped by (method, divergence, r0); one inner list per file."""
    groups: dict[tuple, list[list[ExperimentRecord]]] = defaultdict(list)
    for path in find_results(paths):
        by_key = defaultdict(list)
        for r in read_results(path):
            by_key[_series_key(r)].append(r)
        for k, recs in by_key.items():
            groups[k].append(recs)
    return dict(groups)


def _label(key: tuple) -> str:
    method, div, r0 = key
    if method == "vae":
        return "vae"
    label = f"{method}-{div}"
    return label + (f"-r0={r0:g}" if r0 else "")


def summary_table(groups: dict, metrics=None) -> tuple[list[str], list[list[str]]]:
    """Header and rows of final-step mean / stderr per series."""
    metrics = list(metrics or ExperimentRecord.METRICS)
    rows, keep = [], set()
    stats = {}
    for key in sorted(groups, key=lambda k: (k[0], k[1], k[2])):
        finals = [r for recs in groups[key] for r in final_records(recs)]
        s = summarize_finals(finals, metrics)
        stats[key] = (len(finals), s)
        keep |= {m for m, (mean, _, _) in s.items() if mean is not None}
    metrics = [m for m in metrics if m in keep]
    header = ["series", "trials"] + [c for m in metrics for c in (m, "stderr")]
    for key, (n, s) in stats.items():
        row = [_label(key), str(n)]
        for m in metrics:
            mean, se, _ = s[m]
            row += ["" if mean is None else f"{mean:.4f}", "" if se is None else f"{se:.4f}"]
        rows.append(row)
    return header, rows


def format_table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(header[i]), *(len(r[i]) for r in rows)) if rows else len(header[i]) for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths))))
    return "\n".join(lines)


def write_curves(path: Path, groups: dict, metrics=("objective_lvae", "cc", "modes_covered", "mode_revkl")) -> int:
    """Per-step mean / stderr across trials for every series; returns row count."""
    n_rows = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["series", "step", "metric", "mean", "stderr", "n"])
        for key in sorted(groups, key=lambda k: (k[0], k[1], k[2])):
            by_step = defaultdict(list)
            for recs in groups[key]:
                for r in recs:
                    by_step[r.step].append(r)
            for step in sorted(by_step):
                for m in metrics:
                    vals = [getattr(r, m) for r in by_step[step]]
                    mean, se = mean_stderr(vals)
                    if mean is None:
                        continue
                    w.writerow([_label(key), step, m, _fmt(mean), _fmt(se), sum(v is not None for v in vals)])
                    n_rows += 1
    return n_rows


def output_root(flag: str | None, default: str) -> Path:
    """``--out`` wins, then ``$AGES_OUT/<default name>``, then ``default``."""
    if flag:
        return Path(flag)
    env = os.environ.get("AGES_OUT")
    if env:
        return Path(env) / Path(default).name
    return Path(default)
