"""Synthetic ablation benchmark: plain TCN against the attention + topic model.

Each seed draws one synthetic topic suite. The first topic is the forecast
target, and every month's dominant topic across the suite supplies the
topic feature. Both variants are trained and scored on identical windows.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import (
    SplitSpec,
    SyntheticSpec,
    dominant_topics_from_series,
    generate_synthetic,
    make_windows,
    monthly_topic_features,
)
from .model import ModelConfig, build
from .training import EvalReport, TrainConfig, evaluate, format_comparison_table, train

DEFAULT_SEEDS = (0, 1, 2, 3, 4)


def suite_spec(seed: int) -> SyntheticSpec:
    return SyntheticSpec(months=114, n_topics=6, base=(20.0, 60.0), slope=(-0.2, 0.4),
                         amplitude=(2.0, 10.0), noise=2.0, seed=seed)


@dataclass
class Variant:
    name: str
    use_attention: bool
    topic_features: bool


PLAIN_TCN = Variant("TCN", use_attention=False, topic_features=False)
FULL_MODEL = Variant("SHDP-TCN", use_attention=True, topic_features=True)


@dataclass
class AblationResult:
    seeds: list
    reports: dict = field(default_factory=dict)  # variant name -> list of EvalReport

    def mean_macro_f1(self, name: str) -> float:
        return float(np.mean([r.model.classification.macro_f1 for r in self.reports[name]]))

    def mean_baseline_f1(self, baseline: str) -> float:
        first = next(iter(self.reports.values()))
        return float(np.mean([r.baselines[baseline].classification.macro_f1 for r in first]))

    def gap(self) -> float:
        """Full-model minus plain-TCN mean macro-F1."""
        return self.mean_macro_f1(FULL_MODEL.name) - self.mean_macro_f1(PLAIN_TCN.name)

    def table(self) -> str:
        def mean_row(reports: Sequence[EvalReport], pick):
            vals = np.array([[pick(r).macro_precision, pick(r).macro_recall, pick(r).macro_f1]
                             for r in reports])
            p, rcl, f = vals.mean(axis=0)
            return _Macro(p, rcl, f)

        rows = []
        first = next(iter(self.reports.values()))
        for b in first[0].baselines:
            rows.append((b, mean_row(first, lambda r, b=b: r.baselines[b].classification), None))
        for v in (PLAIN_TCN, FULL_MODEL):
            if v.name not in self.reports:
                continue
            cls = mean_row(self.reports[v.name], lambda r: r.model.classification)
            rows.append((v.name, None, cls) if v.topic_features else (v.name, cls, None))
        return format_comparison_table(rows)

    def to_dict(self) -> dict:
        return {
            "seeds": list(self.seeds),
            "mean_macro_f1": {k: self.mean_macro_f1(k) for k in self.reports},
            "reports": {k: [r.to_dict() for r in v] for k, v in self.reports.items()},
        }


@dataclass
class _Macro:
    macro_precision: float
    macro_recall: float
    macro_f1: float


def run_ablation(seeds: Sequence[int] = DEFAULT_SEEDS, window_len: int = 12, topic_dim: int = 50,
                 train_config: TrainConfig = TrainConfig(),
                 variants: Sequence[Variant] = (PLAIN_TCN, FULL_MODEL),
                 split: SplitSpec = SplitSpec()) -> AblationResult:
    result = AblationResult(list(seeds))
    for seed in seeds:
        suite = [s.series for s in generate_synthetic(suite_spec(seed))]
        target = suite[0]
        features = monthly_topic_features(dominant_topics_from_series(suite), topic_dim)
        for v in variants:
            dim = topic_dim if v.topic_features else 0
            win = make_windows(target, window_len, split, topic_dim=dim,
                               topic_features=features if dim else None)
            cfg = ModelConfig(window_len=window_len, topic_dim=dim, use_attention=v.use_attention,
                              seed=seed)
            model = build(cfg)
            train(model, win.train, replace(train_config, shuffle_seed=seed))
            report = evaluate(model, win.test, win.trend_epsilon, name=v.name)
            result.reports.setdefault(v.name, []).append(report)
    return result
