"""Robust accuracy, the four-row ablation, angle probes and metrics output."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .attacks import AttackSpec, run_attack
from .data import Dataset
from .models import Classifier
from .regularizers import true_class_angles


@dataclass
class MetricsRecord:
    tag: str
    natural_accuracy: float
    robust_accuracy: Dict[str, float] = field(default_factory=dict)
    loss_total: float = float("nan")
    loss_ce: float = float("nan")
    loss_wfc: float = float("nan")
    loss_sep: float = float("nan")
    epoch: Optional[int] = None
    run: str = "run"
    seed: int = 0
    extra: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        for name, v in [("natural", self.natural_accuracy), *self.robust_accuracy.items()]:
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"accuracy {name}={v} outside [0, 1]")

    def fields(self) -> Dict[str, object]:
        out: Dict[str, object] = {"tag": self.tag}
        if self.epoch is not None:
            out["epoch"] = self.epoch
        out["seed"] = self.seed
        out["natural_acc"] = self.natural_accuracy
        for name, v in self.robust_accuracy.items():
            out[f"robust_acc.{name}"] = v
        losses = {"loss": self.loss_total, "ce": self.loss_ce, "wfc": self.loss_wfc, "sep": self.loss_sep}
        out.update({k: v for k, v in losses.items() if not math.isnan(v)})  # eval-only records carry no losses
        out.update(self.extra)
        return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    text = str(v)
    if not text or any(c.isspace() for c in text) or "=" in text:
        raise ValueError(f"metric value {text!r} cannot contain spaces or '='")
    return text


def format_fields_line(run: str, fields: Mapping[str, object], ts: Optional[datetime] = None) -> str:
    """``ts=<iso8601> run=<id> key=value ...`` on one line."""
    ts = ts or datetime.now(timezone.utc)
    parts = [f"ts={ts.isoformat(timespec='seconds')}", f"run={_fmt(run)}"]
    parts += [f"{k}={_fmt(v)}" for k, v in fields.items()]
    return " ".join(parts)


def format_metrics_line(record: MetricsRecord, ts: Optional[datetime] = None) -> str:
    return format_fields_line(record.run, record.fields(), ts)


def parse_metrics_line(line: str) -> Dict[str, str]:
    out = {}
    for token in line.split():
        key, sep, value = token.partition("=")
        if not sep or not key:
            raise ValueError(f"malformed metrics token {token!r}")
        out[key] = value
    if "ts" not in out or "run" not in out:
        raise ValueError("metrics line needs ts= and run=")
    return out


def summary_table(records: Sequence[MetricsRecord], columns: Optional[Sequence[str]] = None) -> str:
    """Aligned plain-text table, accuracies in percent."""
    if columns is None:
        columns = []
        for r in records:
            for k in r.robust_accuracy:
                if k not in columns:
                    columns.append(k)
    header = ["run", "natural", *columns]
    rows = []
    for r in records:
        row = [r.tag if r.run == "run" else r.run, f"{100 * r.natural_accuracy:.2f}"]
        for c in columns:
            v = r.robust_accuracy.get(c)
            row.append("-" if v is None else f"{100 * v:.2f}")
        rows.append(row)
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    lines = ["  ".join(h.ljust(w) if i == 0 else h.rjust(w) for i, (h, w) in enumerate(zip(header, widths)))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(x.ljust(w) if i == 0 else x.rjust(w) for i, (x, w) in enumerate(zip(row, widths))))
    return "\n".join(lines)


# -- accuracy --------------------------------------------------------------

def natural_accuracy(classifier: Classifier, dataset: Dataset) -> float:
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    return float(np.mean(classifier.predict(dataset.features) == dataset.labels))


def robust_accuracy(classifier: Classifier, dataset: Dataset, attack: AttackSpec,
                    workers: int = 1) -> float:
    """Fraction of points still classified correctly after the attack."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    x_adv = run_attack(classifier, dataset.features, dataset.labels, attack, workers)
    return float(np.mean(classifier.predict(x_adv) == dataset.labels))


def evaluate(classifier: Classifier, dataset: Dataset, attacks: Mapping[str, AttackSpec],
             tag: str = "eval", run: str = "run", seed: int = 0, workers: int = 1) -> MetricsRecord:
    robust = {name: robust_accuracy(classifier, dataset, spec, workers)
              for name, spec in attacks.items() if spec.family != "none"}
    return MetricsRecord(tag, natural_accuracy(classifier, dataset), robust, run=run, seed=seed,
                         extra={"data_sha256": dataset.checksum()[:16]})


# -- angles -----------------------------------------------------------------

def angle_statistics(classifier: Classifier, dataset: Dataset, attack: AttackSpec,
                     workers: int = 1, return_samples: bool = False):
    """Mean true-class angle on clean inputs and on attacked inputs."""
    if classifier.head_kind != "he":
        raise ValueError("angle statistics need a hypersphere head")
    f = classifier.frozen()
    x_adv = run_attack(classifier, dataset.features, dataset.labels, attack, workers)
    clean = true_class_angles(f.features(dataset.features), f.head, dataset.labels).data
    adv = true_class_angles(f.features(x_adv), f.head, dataset.labels).data
    if return_samples:
        return float(clean.mean()), float(adv.mean()), clean, adv
    return float(clean.mean()), float(adv.mean())


# -- ablation ------------------------------------------------------------------

ABLATION_ROWS: Tuple[Tuple[str, bool, bool], ...] = (
    ("ce", False, False),
    ("ce+wfc", True, False),
    ("ce+sep", False, True),
    ("ce+wfc+sep", True, True),
)


@dataclass(frozen=True)
class AblationPlan:
    alpha: float
    beta: float

    @property
    def rows(self) -> List[Tuple[str, float, float]]:
        return [(tag, self.alpha if a else 0.0, self.beta if b else 0.0) for tag, a, b in ABLATION_ROWS]


def run_ablation(train_data: Dataset, test_data: Dataset, base, attacks: Mapping[str, AttackSpec],
                 hidden: Sequence[int] = (128, 64), feature_dim: int = 32,
                 workers: int = 1, run: str = "ablation") -> List[MetricsRecord]:
    """Train the four loss configurations with identical seed and data."""
    from .training import train

    base = base.replace(objective="angular_at")
    records = []
    for tag, alpha, beta in AblationPlan(base.alpha, base.beta).rows:
        spec = base.replace(alpha=alpha, beta=beta)
        model, history = train(train_data, spec, hidden, feature_dim, run_id=f"{run}.{tag}")
        rec = evaluate(model, test_data, attacks, tag=tag, run=f"{run}.{tag}", seed=spec.seed,
                       workers=workers)
        last = history[-1]
        rec.loss_total, rec.loss_ce, rec.loss_wfc, rec.loss_sep = (
            last.loss_total, last.loss_ce, last.loss_wfc, last.loss_sep)
        rec.extra.update({"alpha": alpha, "beta": beta, "checksum": model.checksum()[:16]})
        records.append(rec)
    return records


def mean_std(values: Sequence[float]) -> Tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return math.nan, math.nan
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0
