"""Per-sample metric reports, cumulative competition ranking and category deltas."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import metrics as M
from .fixations import FixationMap

DEFAULT_RANK_SUBSET = ("sAUC", "CC", "KLD")


# --- metric reports ----------------------------------------------------------------


@dataclass
class MetricReport:
    """Per-sample values (``None`` marks a missing/undefined metric) and their means."""

    names: list[str]
    values: list[dict[str, float | None]]
    categories: list[str | None] = field(default_factory=list)
    metrics: tuple[str, ...] = M.METRIC_NAMES

    def column(self, metric: str) -> list[float | None]:
        return [row.get(metric) for row in self.values]

    def aggregate(self) -> dict[str, dict]:
        out = {}
        for m in self.metrics:
            vals = [v for v in self.column(m) if v is not None]
            out[m] = {"mean": float(np.mean(vals)) if vals else None,
                      "n": len(vals), "missing": len(self.values) - len(vals)}
        return out

    def category_means(self) -> dict[str, dict[str, float | None]]:
        groups: dict[str, list[int]] = {}
        for i, c in enumerate(self.categories):
            if c is None:
                raise ValueError(f"sample {self.names[i]!r} has no category")
            groups.setdefault(c, []).append(i)
        out = {}
        for c, idx in groups.items():
            out[c] = {}
            for m in self.metrics:
                vals = [self.values[i].get(m) for i in idx]
                vals = [v for v in vals if v is not None]
                out[c][m] = float(np.mean(vals)) if vals else None
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample", "category", *self.metrics])
        for i, row in enumerate(self.values):
            cat = self.categories[i] if self.categories else ""
            w.writerow([self.names[i], cat or "",
                        *("NA" if row.get(m) is None else repr(row[m]) for m in self.metrics)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"samples": len(self.values), "aggregate": self.aggregate()}, indent=2)


def evaluate_sample(pred, density, fixations: FixationMap, other_fixations=(), seed: int = 0,
                    n_splits: int = M.DEFAULT_SPLITS, grid=M.DEFAULT_EMD_GRID,
                    baseline=None, eps: float = M.DEFAULT_EPS) -> dict[str, float | None]:
    calls = {
        "AUC_J": lambda: M.metric_auc_judd(pred, fixations),
        "SIM": lambda: M.metric_sim(pred, density),
        "EMD": lambda: M.metric_emd(pred, density, grid),
        "AUC_B": lambda: M.metric_auc_borji(pred, fixations, n_splits, seed),
        "sAUC": lambda: M.metric_sauc(pred, fixations, other_fixations, n_splits, seed),
        "CC": lambda: M.metric_cc(pred, density),
        "NSS": lambda: M.metric_nss(pred, fixations),
        "KLD": lambda: M.metric_kld(pred, density, eps),
        "IG": lambda: M.metric_ig(pred, fixations, baseline, eps),
    }
    out: dict[str, float | None] = {}
    for name, fn in calls.items():
        try:
            out[name] = fn()
        except M.UndefinedMetric:
            out[name] = None
        except ValueError:
            # sAUC without a usable pool is reported missing rather than zero
            if name != "sAUC":
                raise
            out[name] = None
    return out


def evaluate(predictions, samples, seed: int = 0, grid=M.DEFAULT_EMD_GRID,
             n_splits: int = M.DEFAULT_SPLITS, workers: int = 1) -> MetricReport:
    """Score each prediction against its sample; sAUC pools every other sample's fixations."""
    fixs = [s.fixations for s in samples]

    def one(i):
        others = fixs[:i] + fixs[i + 1:]
        return evaluate_sample(predictions[i], samples[i].density, fixs[i], others,
                               seed=seed + i, n_splits=n_splits, grid=grid)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as ex:
            values = list(ex.map(one, range(len(samples))))
    else:
        values = [one(i) for i in range(len(samples))]
    return MetricReport([s.name for s in samples], values, [s.category for s in samples])


# --- ranking -----------------------------------------------------------------------


def competition_ranks(values, higher_is_better: bool) -> list[int]:
    """Standard competition ranking ("1224"): 1 + number of strictly better entries."""
    vals = list(values)
    if higher_is_better:
        return [1 + sum(1 for o in vals if o > v) for v in vals]
    return [1 + sum(1 for o in vals if o < v) for v in vals]


@dataclass
class RankTable:
    models: list[str]
    values: dict[str, dict[str, float]]
    ranks: dict[str, dict[str, int]]
    cumulative: dict[str, int]
    subset: tuple[str, ...]

    def ordered(self) -> list[str]:
        """Models by ascending cumulative rank; ties keep input order."""
        return sorted(self.models, key=lambda m: (self.cumulative[m], self.models.index(m)))

    def position(self, model: str) -> int:
        """Competition position of ``model`` by cumulative rank."""
        return 1 + sum(1 for m in self.models if self.cumulative[m] < self.cumulative[model])

    def render(self) -> str:
        width = max(len(m) for m in self.models) + 2
        head = f"{'model':<{width}}" + "".join(f"{s:>12}" for s in self.subset) + f"{'cum.rank':>10}"
        lines = [head, "-" * len(head)]
        for m in self.ordered():
            cells = "".join(f"{self.values[m][s]:>7g} ({self.ranks[m][s]:>2})" for s in self.subset)
            lines.append(f"{m:<{width}}{cells}{self.cumulative[m]:>10}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", *self.subset, *(f"rank_{s}" for s in self.subset), "cumulative_rank"])
        for m in self.ordered():
            w.writerow([m, *(self.values[m][s] for s in self.subset),
                        *(self.ranks[m][s] for s in self.subset), self.cumulative[m]])
        return buf.getvalue()


def cumulative_rank(table: dict[str, dict[str, float]], subset=DEFAULT_RANK_SUBSET,
                    directions: dict[str, bool] | None = None) -> RankTable:
    """Sum of per-metric competition ranks over ``subset`` for each model."""
    directions = directions or M.METRIC_DIRECTIONS
    models = list(table)
    subset = tuple(subset)
    for s in subset:
        if s not in directions:
            raise KeyError(f"no direction known for metric {s!r}")
        for m in models:
            if s not in table[m] or table[m][s] is None or math.isnan(table[m][s]):
                raise KeyError(f"model {m!r} has no value for metric {s!r}")
    ranks: dict[str, dict[str, int]] = {m: {} for m in models}
    for s in subset:
        col = competition_ranks([table[m][s] for m in models], directions[s])
        for m, r in zip(models, col):
            ranks[m][s] = r
    cumulative = {m: sum(ranks[m].values()) for m in models}
    return RankTable(models, {m: dict(table[m]) for m in models}, ranks, cumulative, subset)


# --- values files ------------------------------------------------------------------

_COLUMN_ALIASES = {"AUC-J": "AUC_J", "AUC-B": "AUC_B", "AUC_JUDD": "AUC_J", "AUC_BORJI": "AUC_B"}


def read_values(path, group: str | None = None) -> dict[str, dict[str, float]]:
    """Load a multi-model values CSV (``model`` column, optional ``group``, metric columns)."""
    text = Path(path).read_text(encoding="utf-8")
    return _parse_values(text, group)


def _parse_values(text: str, group: str | None) -> dict[str, dict[str, float]]:
    reader = csv.DictReader(io.StringIO(text))
    out: dict[str, dict[str, float]] = {}
    for row in reader:
        if group is not None and row.get("group") != group:
            continue
        vals = {}
        for k, v in row.items():
            if k in ("model", "group") or v in (None, "", "NA"):
                continue
            vals[_COLUMN_ALIASES.get(k, k)] = float(v)
        out[row["model"]] = vals
    if not out:
        raise ValueError("values file has no matching rows")
    return out


def benchmark_table(name: str, group: str | None = None) -> dict[str, dict[str, float]]:
    """Bundled benchmark values: ``"mit300"`` or ``"cat2000"``."""
    text = resources.files("msinet.data_files").joinpath(f"{name}.csv").read_text(encoding="utf-8")
    return _parse_values(text, group)


# --- category aggregation ----------------------------------------------------------


@dataclass
class CategoryComparison:
    model_a: dict[str, dict[str, float | None]]
    model_b: dict[str, dict[str, float | None]]
    delta: dict[str, dict[str, float | None]]  # a - b
    improvement_rank: RankTable | None = None

    def render(self, metrics=M.METRIC_NAMES) -> str:
        cats = self.improvement_rank.ordered() if self.improvement_rank else list(self.delta)
        lines = [f"{'category':<14}" + "".join(f"{m:>9}" for m in metrics)]
        for c in cats:
            cells = "".join("       NA" if self.delta[c].get(m) is None else f"{self.delta[c][m]:>+9.3f}"
                            for m in metrics)
            lines.append(f"{c:<14}{cells}")
        return "\n".join(lines)


def aggregate_by_category(report_a: MetricReport, report_b: MetricReport,
                          subset=DEFAULT_RANK_SUBSET) -> CategoryComparison:
    """Per-category means for two models, signed deltas (A - B) and a ranking of categories
    by how much A improves on B across ``subset``."""
    if report_a.categories != report_b.categories:
        raise ValueError("reports must cover the same samples in the same order")
    ma, mb = report_a.category_means(), report_b.category_means()
    delta = {}
    for c in ma:
        delta[c] = {m: None if ma[c][m] is None or mb[c][m] is None else ma[c][m] - mb[c][m]
                    for m in report_a.metrics}
    # improvement is the signed change in the "better" direction
    gains = {c: {m: (d if M.METRIC_DIRECTIONS[m] else -d)
                 for m, d in delta[c].items() if d is not None} for c in delta}
    usable = [c for c in gains if all(s in gains[c] for s in subset)]
    rank = None
    if usable:
        rank = cumulative_rank({c: gains[c] for c in usable}, subset,
                               {s: True for s in subset})
    return CategoryComparison(ma, mb, delta, rank)
