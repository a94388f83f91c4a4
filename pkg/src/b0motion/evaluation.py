"""Residual statistics, the four-way comparison (NC, PR0, EPI, PRFT) and fine-tuning sweeps.

Residuals are |prediction - ground truth| over the tissue mask of the new head
position. Quantiles use linear interpolation between order statistics
(``numpy.quantile(method="linear")``).
"""
from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataset import Subject, instances
from .nn.training import FINETUNE_HYPER, TrainHyper, finetune, predict_batch
from .nn.unet import UNetParams
from .volume import Mask3D, Units, Volume3D, write_volume

APPROACHES = ("NC", "PR0", "EPI", "PRFT")
SCHEMA_VERSION = 1
EXACT_MAX_N = 25


class EvaluationError(ValueError):
    pass


def residual_stats(pred: Volume3D, gt: Volume3D, mask: Mask3D) -> tuple[float, float]:
    """Median and IQR (Hz) of |pred - gt| inside ``mask``."""
    pred.require_units(Units.HZ)
    gt.require_units(Units.HZ)
    if not (pred.grid.same_as(gt.grid) and mask.grid.same_as(gt.grid)):
        raise ValueError("prediction, ground truth and mask must share one grid")
    if not mask.data.any():
        raise ValueError("residual statistics need a non-empty mask")
    r = np.abs(np.asarray(pred.data, np.float64) - np.asarray(gt.data, np.float64))[mask.data]
    q1, med, q3 = np.quantile(r, [0.25, 0.5, 0.75], method="linear")
    return float(med), float(q3 - q1)


# -------------------------------------------------------------- paired test

def _signed_ranks(d: np.ndarray) -> np.ndarray:
    """Doubled mid-ranks of |d| (integers, so ties stay exact)."""
    order = np.argsort(np.abs(d), kind="stable")
    a = np.abs(d)[order]
    ranks2 = np.empty(len(d), dtype=np.int64)
    i = 0
    while i < len(a):
        j = i
        while j + 1 < len(a) and a[j + 1] == a[i]:
            j += 1
        ranks2[order[i:j + 1]] = i + j + 2  # 2 * mean of 1-based ranks i+1 .. j+1
        i = j + 1
    return ranks2


def paired_test(a: Sequence[float], b: Sequence[float]) -> float:
    """Two-sided Wilcoxon signed-rank p-value for paired samples.

    Zero differences are dropped. For n <= 25 nonzero differences the null
    distribution is enumerated exactly (ties handled with mid-ranks); larger
    samples use the tie-corrected normal approximation with continuity
    correction. All differences zero gives p = 1.
    """
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1D and of equal length")
    if len(a) < 6:
        raise ValueError("paired test needs at least 6 pairs")
    d = a - b
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return 1.0
    r2 = _signed_ranks(d)
    w2 = int(r2[d > 0].sum())
    total = int(r2.sum())
    if n <= EXACT_MAX_N:
        counts = np.zeros(total + 1, dtype=np.float64)
        counts[0] = 1.0
        for r in r2:
            counts[r:] += counts[:-r].copy()
        counts /= 2.0**n
        lower = counts[:w2 + 1].sum()
        upper = counts[w2:].sum()
        return float(min(1.0, 2 * min(lower, upper)))
    mean = total / 4.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts**3 - tie_counts) / 48.0
    # w2 is twice W+, so the continuity correction of 0.5 becomes 1 on the doubled scale
    z = (abs(w2 - 2 * mean) - 1.0) / (2 * math.sqrt(var))
    return float(min(1.0, math.erfc(max(z, 0.0) / math.sqrt(2))))


# ------------------------------------------------------------------ reports

@dataclass(frozen=True)
class ApproachResult:
    approach: str
    subject: int
    position: int
    median_abs_hz: float
    iqr_abs_hz: float
    residual_path: str | None = None


@dataclass
class EvalReport:
    results: list[ApproachResult]
    p_values: dict[str, float | None] = field(default_factory=dict)
    sweeps: dict[str, list[dict]] = field(default_factory=dict)

    def cells(self, approach: str) -> list[ApproachResult]:
        return sorted((r for r in self.results if r.approach == approach), key=lambda r: (r.subject, r.position))

    def medians(self, approach: str) -> np.ndarray:
        return np.array([r.median_abs_hz for r in self.cells(approach)])

    def aggregates(self) -> dict[str, dict[str, float]]:
        """Median of per-position medians and of per-position IQRs, per approach."""
        out = {}
        for a in APPROACHES:
            cells = self.cells(a)
            if cells:
                out[a] = {
                    "median_of_medians_hz": float(np.median([c.median_abs_hz for c in cells])),
                    "median_of_iqrs_hz": float(np.median([c.iqr_abs_hz for c in cells])),
                    "n_positions": len(cells),
                }
        return out

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "approaches": list(APPROACHES),
            "results": [asdict(r) for r in sorted(self.results, key=lambda r: (r.approach, r.subject, r.position))],
            "aggregates": self.aggregates(),
            "p_values": dict(sorted(self.p_values.items())),
            "sweeps": self.sweeps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        validate_report(d)
        return cls([ApproachResult(**r) for r in d["results"]], dict(d["p_values"]), dict(d["sweeps"]))


def validate_report(d: dict) -> None:
    """Schema and completeness checks for a report dictionary; raises EvaluationError."""
    required = {"schema_version", "approaches", "results", "aggregates", "p_values", "sweeps"}
    missing = required - set(d)
    if missing:
        raise EvaluationError(f"report is missing keys: {sorted(missing)}")
    if d["schema_version"] != SCHEMA_VERSION:
        raise EvaluationError(f"unsupported report schema {d['schema_version']}")
    fields = set(ApproachResult.__dataclass_fields__)
    seen = {}
    for r in d["results"]:
        if set(r) != fields:
            raise EvaluationError(f"result row has fields {sorted(r)}, expected {sorted(fields)}")
        if r["approach"] not in APPROACHES:
            raise EvaluationError(f"unknown approach {r['approach']!r}")
        if not 0 <= r["median_abs_hz"] or not r["iqr_abs_hz"] >= 0:
            raise EvaluationError("residual statistics must be non-negative")
        seen.setdefault((r["subject"], r["position"]), set()).add(r["approach"])
    holes = [f"subject {s} position {p}: {sorted(set(APPROACHES) - got)}"
             for (s, p), got in sorted(seen.items()) if got != set(APPROACHES)]
    if holes:
        raise EvaluationError("missing cells: " + "; ".join(holes))
    recomputed = EvalReport([ApproachResult(**r) for r in d["results"]]).aggregates()
    if json.loads(json.dumps(recomputed)) != d["aggregates"]:
        raise EvaluationError("aggregates do not match the per-position rows")


def _pairwise_p(report: EvalReport) -> dict[str, float | None]:
    out = {}
    for x, y in itertools.combinations(APPROACHES, 2):
        a, b = report.medians(x), report.medians(y)
        out[f"{x}-{y}"] = paired_test(a, b) if len(a) >= 6 and len(a) == len(b) else None
    return out


def _predictions(params: UNetParams, subject: Subject, indices: Sequence[int], batch: int = 8) -> list[np.ndarray]:
    ins = instances(subject, indices)
    out = []
    for start in range(0, len(ins), batch):
        out.extend(predict_batch(params, np.stack([i.inputs for i in ins[start:start + batch]])))
    return out


def compare_approaches(subjects: Subject | Sequence[Subject], params: UNetParams,
                       finetuned: UNetParams | Mapping[int, UNetParams],
                       eval_indices: Sequence[int], residual_dir=None) -> EvalReport:
    """Evaluate NC, PR0, EPI and PRFT on the held-out positions of each subject.

    ``finetuned`` is either one parameter set or a mapping from subject seed to
    that subject's fine-tuned parameters. If ``residual_dir`` is given the
    signed residual maps (prediction - ground truth) are written there.
    """
    if isinstance(subjects, Subject):
        subjects = [subjects]
    if not eval_indices:
        raise EvaluationError("comparison needs at least one held-out position")
    if isinstance(finetuned, UNetParams):
        finetuned = {s.seed: finetuned for s in subjects}
    absent = [f"PRFT of subject {s.seed}" for s in subjects if s.seed not in finetuned]
    if absent:
        raise EvaluationError("missing artifacts for cells: " + ", ".join(absent))
    results = []
    for s in subjects:
        n = len(s.positions)
        bad = [i for i in eval_indices if not 0 < i < n]
        if bad:
            raise EvaluationError(f"subject {s.seed} has no held-out positions {bad}")
        pr0 = _predictions(params, s, eval_indices)
        prft = _predictions(finetuned[s.seed], s, eval_indices)
        for k, i in enumerate(eval_indices):
            pos = s.positions[i]
            gt = pos.field_gt
            preds = {
                "NC": s.initial.field_gt.data,
                "PR0": pr0[k],
                "EPI": pos.nav_field.data,
                "PRFT": prft[k],
            }
            for a in APPROACHES:
                vol = gt.with_data(np.asarray(preds[a], np.float64))
                med, iqr = residual_stats(vol, gt, pos.mask)
                path = None
                if residual_dir is not None:
                    rel = Path(f"subject_{s.seed:03d}") / f"{a}_pos{i:03d}.b0v"
                    (Path(residual_dir) / rel.parent).mkdir(parents=True, exist_ok=True)
                    write_volume(gt.with_data(vol.data - gt.data), Path(residual_dir) / rel)
                    path = rel.as_posix()
                results.append(ApproachResult(a, s.seed, i, med, iqr, path))
    report = EvalReport(results)
    report.p_values = _pairwise_p(report)
    return report


# ------------------------------------------------------------------- sweeps

def _sweep_rows(kind: str, value: int, params: UNetParams, subjects, eval_indices) -> list[dict]:
    rows = []
    for s in subjects:
        for k, pred in zip(eval_indices, _predictions(params, s, eval_indices)):
            pos = s.positions[k]
            med, iqr = residual_stats(pos.field_gt.with_data(pred), pos.field_gt, pos.mask)
            rows.append({kind: value, "subject": s.seed, "position": k, "median_abs_hz": med, "iqr_abs_hz": iqr})
    return rows


def sweep_finetune(subjects: Subject | Sequence[Subject], params: UNetParams, epochs_list: Sequence[int],
                   volumes_list: Sequence[int], finetune_indices: Sequence[int], eval_indices: Sequence[int],
                   hyper: TrainHyper = FINETUNE_HYPER) -> dict[str, list[dict]]:
    """Held-out residuals versus fine-tuning epochs and versus fine-tuning volumes.

    The epoch sweep snapshots one continuous fine-tuning run (all of
    ``finetune_indices``) after each listed epoch count; 0 means the general
    network (the PR0 row). The volume sweep fine-tunes for ``hyper.epochs`` on
    the first v fine-tuning positions for each v.
    """
    if isinstance(subjects, Subject):
        subjects = [subjects]
    if any(e < 0 for e in epochs_list) or any(v < 1 for v in volumes_list):
        raise ValueError("sweep points must be non-negative epochs and positive volume counts")
    need = max(volumes_list, default=0)
    if len(finetune_indices) < need:
        raise EvaluationError(f"volume sweep needs {need} fine-tuning positions, got {len(finetune_indices)}")
    if set(finetune_indices) & set(eval_indices):
        raise EvaluationError("fine-tuning and held-out positions overlap")
    epochs_rows: list[dict] = []
    volume_rows: list[dict] = []
    wanted = sorted(set(epochs_list))
    for s in subjects:
        if max(list(finetune_indices) + list(eval_indices)) >= len(s.positions):
            raise EvaluationError(f"subject {s.seed} has only {len(s.positions)} positions")
        if 0 in wanted:
            epochs_rows += _sweep_rows("epochs", 0, params, [s], eval_indices)
        targets = [e for e in wanted if e > 0]
        if targets:
            def snap(epoch, p, _loss, s=s):
                if epoch in targets:
                    epochs_rows.extend(_sweep_rows("epochs", epoch, p, [s], eval_indices))

            finetune(params, instances(s, finetune_indices), TrainHyper(**{**asdict(hyper), "epochs": max(targets)}),
                     on_epoch_end=snap)
        for v in sorted(set(volumes_list)):
            tuned = finetune(params, instances(s, list(finetune_indices)[:v]), hyper).params
            volume_rows += _sweep_rows("volumes", v, tuned, [s], eval_indices)
    key = lambda r: (r.get("epochs", r.get("volumes")), r["subject"], r["position"])
    return {"epochs": sorted(epochs_rows, key=key), "volumes": sorted(volume_rows, key=key)}


def sweep_summary(rows: Sequence[dict], kind: str) -> dict[int, float]:
    """Median of per-position medians for each sweep point."""
    values = sorted({r[kind] for r in rows})
    return {v: float(np.median([r["median_abs_hz"] for r in rows if r[kind] == v])) for v in values}


# ------------------------------------------------------------------ writers

CSV_NOTE = "# boxplot convention: box = Q1..Q3 of per-position medians, whiskers at 1.5*IQR"


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(CSV_NOTE + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_report(report: EvalReport, directory) -> Path:
    """report.json plus the plot-ready CSV tables."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    d = report.to_dict()
    validate_report(d)
    (directory / "report.json").write_text(json.dumps(d, indent=1, sort_keys=True) + "\n")
    _write_csv(directory / "fig3_aggregates.csv",
               ["approach", "subject", "position", "median_abs_hz", "iqr_abs_hz"],
               [[r.approach, r.subject, r.position, repr(r.median_abs_hz), repr(r.iqr_abs_hz)]
                for a in APPROACHES for r in report.cells(a)])
    write_sweep_tables(report.sweeps, directory)
    return directory / "report.json"


def write_sweep_tables(sweeps: Mapping[str, Sequence[dict]], directory) -> None:
    """fig4_epochs.csv and fig5_volumes.csv (header only when a sweep is absent)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for kind, name in (("epochs", "fig4_epochs.csv"), ("volumes", "fig5_volumes.csv")):
        rows = sweeps.get(kind, [])
        _write_csv(directory / name, [kind, "subject", "position", "median_abs_hz", "iqr_abs_hz"],
                   [[r[kind], r["subject"], r["position"], repr(r["median_abs_hz"]), repr(r["iqr_abs_hz"])]
                    for r in rows])


def read_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))
