"""ROC evaluation of detection methods on synthetic original/variant pairs.

For every method and difficulty rung the harness runs ``trials``
original/original tests (the null distribution of the statistic) and
``trials`` original/variant tests, and summarises how well the statistic
separates them with the ROC AUC. Random streams are keyed by
``(seed, method, role, trial)`` and never by the rung, so all rungs share
their noise draws and AUC curves across the ladder are smooth.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, InvalidInputError
from .simulator import (
    SyntheticModel,
    apply_variant,
    correct_probabilities,
    power_of_two_ladder,
    prompt_view,
    sample_categorical,
    stable_hash,
    synthetic_questions,
)
from .stats import lt_statistic_arrays

GOOD_DETECTION_AUC = 0.9
METHODS = ("LT", "MET", "MMLU")
_METHOD_CODE = {"LT": 1, "MET": 2, "MMLU": 3}
_NULL_A, _NULL_B, _ALT_ORIGINAL, _ALT_VARIANT = range(4)


# -- ROC ------------------------------------------------------------------------


@dataclass(frozen=True)
class RocResult:
    auc: float
    fpr: np.ndarray = field(repr=False)
    tpr: np.ndarray = field(repr=False)
    n_null: int = 0
    n_alt: int = 0

    @property
    def curve(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def _as_scores(values: Iterable[float], name: str) -> np.ndarray:
    arr = np.asarray(list(values) if not isinstance(values, np.ndarray) else values, dtype=float).ravel()
    if arr.size == 0:
        raise InvalidInputError(f"{name} statistics are empty")
    if np.isnan(arr).any():
        raise InvalidInputError(f"{name} statistics contain NaN")
    return arr


def roc_auc(null_stats: Iterable[float], alt_stats: Iterable[float]) -> RocResult:
    """AUC as ``P(alt > null) + P(alt == null) / 2`` plus the threshold-swept curve.

    The AUC is computed from integer pair counts, so it equals a brute-force
    pairwise count exactly.
    """
    null = _as_scores(null_stats, "null")
    alt = _as_scores(alt_stats, "alternative")
    null_sorted = np.sort(null)
    below = np.searchsorted(null_sorted, alt, side="left")
    at_or_below = np.searchsorted(null_sorted, alt, side="right")
    doubled = int(2 * below.sum() + (at_or_below - below).sum())
    auc = doubled / (2 * null.size * alt.size)

    thresholds = np.unique(np.concatenate([null, alt]))[::-1]
    alt_sorted = np.sort(alt)
    fpr = (null.size - np.searchsorted(null_sorted, thresholds, side="left")) / null.size
    tpr = (alt.size - np.searchsorted(alt_sorted, thresholds, side="left")) / alt.size
    fpr = np.concatenate([[0.0], fpr])
    tpr = np.concatenate([[0.0], tpr])
    return RocResult(auc, fpr, tpr, null.size, alt.size)


# -- bootstrap ------------------------------------------------------------------


@dataclass(frozen=True)
class AucLeaf:
    """Null and alternative statistics of one (model, variant) cell."""

    null: np.ndarray
    alt: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "null", _as_scores(self.null, "null"))
        object.__setattr__(self, "alt", _as_scores(self.alt, "alternative"))


@dataclass(frozen=True)
class Interval:
    low: float
    high: float
    point: float
    level: float
    degenerate: bool = False

    def contains(self, value: float) -> bool:
        return self.low <= value <= self.high


def _row_mean(a: np.ndarray) -> np.ndarray:
    out = a.mean(axis=1)
    # keep constant rows exact; a float mean of equal values can drift by an ulp
    same = (a == a[:, :1]).all(axis=1)
    out[same] = a[same, 0]
    return out


def _resample_counts(n: int, count: int, rng: np.random.Generator) -> np.ndarray:
    idx = rng.integers(0, n, size=(count, n))
    offsets = (np.arange(count) * n)[:, None]
    return np.bincount((idx + offsets).ravel(), minlength=count * n).reshape(count, n).astype(float)


def _leaf_point(leaf: Any) -> float:
    if isinstance(leaf, AucLeaf):
        return roc_auc(leaf.null, leaf.alt).auc
    values = np.asarray(leaf, dtype=float)
    return float(values[0]) if (values == values[0]).all() else float(values.mean())


def _leaf_draws(leaf: Any, count: int, rng: np.random.Generator) -> np.ndarray:
    if isinstance(leaf, AucLeaf):
        # pairwise win matrix; a resample's AUC is a weighted mean of it
        wins = (leaf.alt[None, :] > leaf.null[:, None]) + 0.5 * (leaf.alt[None, :] == leaf.null[:, None])
        w_null = _resample_counts(leaf.null.size, count, rng)
        w_alt = _resample_counts(leaf.alt.size, count, rng)
        return ((w_null @ wins) * w_alt).sum(axis=1) / (leaf.null.size * leaf.alt.size)
    values = np.asarray(leaf, dtype=float).ravel()
    if values.size == 0:
        raise InvalidInputError("empty bootstrap layer")
    if (values == values[0]).all():
        return np.full(count, values[0])
    idx = rng.integers(0, values.size, size=(count, values.size))
    return values[idx].mean(axis=1)


def _is_leaf(node: Any) -> bool:
    if isinstance(node, AucLeaf):
        return True
    if isinstance(node, np.ndarray):
        return node.ndim <= 1
    return all(isinstance(x, (int, float, np.floating, np.integer)) for x in node)


def _draws(node: Any, count: int, rng: np.random.Generator) -> np.ndarray:
    if _is_leaf(node):
        return _leaf_draws(node, count, rng)
    children = list(node)
    if not children:
        raise InvalidInputError("empty bootstrap layer")
    choice = rng.integers(0, len(children), size=(count, len(children)))
    values = np.empty(choice.shape)
    for c, child in enumerate(children):
        where = choice == c
        n = int(where.sum())
        if n:
            values[where] = _draws(child, n, rng)
    return _row_mean(values)


def _point(node: Any) -> float:
    if _is_leaf(node):
        return _leaf_point(node)
    points = np.array([[_point(child) for child in node]])
    return float(_row_mean(points)[0])


def bootstrap_ci(layers: Any, resamples: int = 10_000, level: float = 0.95, seed: int = 0) -> Interval:
    """Percentile interval from hierarchical resampling.

    ``layers`` is a nested sequence. Each nesting level (models, variants,
    ...) is resampled with replacement, independently inside every drawn
    parent, and values are averaged upwards. Leaves are either arrays of
    numbers (summarised by their mean) or :class:`AucLeaf` cells, whose null
    and alternative statistics are resampled separately and summarised by
    their ROC AUC.
    """
    if resamples < 100:
        raise InvalidInputError("use at least 100 bootstrap resamples")
    if not 0 < level < 1:
        raise InvalidInputError("level must be in (0, 1)")
    rng = np.random.default_rng(seed)
    draws = _draws(layers, resamples, rng)
    low, high = np.quantile(draws, [(1 - level) / 2, (1 + level) / 2])
    low, high = float(low), float(high)
    if (draws == draws[0]).all():
        low = high = float(draws[0])
    return Interval(low, high, _point(layers), level, degenerate=low == high)


# -- experiment plan --------------------------------------------------------------


@dataclass(frozen=True)
class PromptSpec:
    text: str
    noise_scale: float = 1.0


def _default_ladder() -> tuple[float, ...]:
    return (0.0, *power_of_two_ladder(-10, 0))


@dataclass(frozen=True)
class ExperimentPlan:
    """Configuration for :func:`run_benchmark` and :func:`prompt_ablation`.

    Each seed builds a distinct synthetic base model, playing the role of a
    separate LLM.
    """

    methods: tuple[str, ...] = METHODS
    ladder: tuple[float, ...] = field(default_factory=_default_ladder)
    variant_kind: str = "logit-shift"
    trials: int = 200
    n_per_test: int = 10
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    vocab_size: int = 64
    noise_sigma: float = 0.05
    top_k: int = 20
    logit_scale: float = 2.0
    met_prompts: int = 25
    met_length: int = 50
    met_temperature: float = 1.0
    mmlu_questions: int = 100
    mmlu_temperature: float = 0.1
    bootstrap_resamples: int = 1000
    ci_level: float = 0.95
    prompts: tuple[PromptSpec, ...] = (PromptSpec("x"),)
    ablation_magnitude: float = 2.0**-5

    def __post_init__(self) -> None:
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ConfigError(f"unknown methods {sorted(unknown)}; expected a subset of {METHODS}")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if not self.ladder:
            raise ConfigError("difficulty ladder is empty")
        if self.n_per_test < 2:
            raise ConfigError("n_per_test must be >= 2")
        if not self.seeds:
            raise ConfigError("at least one seed is required")

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> ExperimentPlan:
        known = {f for f in cls.__dataclass_fields__}
        extra = set(raw) - known
        if extra:
            raise ConfigError(f"unknown plan keys: {sorted(extra)}")
        kwargs = dict(raw)
        for key in ("methods", "ladder", "seeds"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        if "prompts" in kwargs:
            kwargs["prompts"] = tuple(
                PromptSpec(p) if isinstance(p, str) else PromptSpec(**p) for p in kwargs["prompts"]
            )
        return cls(**kwargs)

    def to_dict(self) -> dict:
        raw = asdict(self)
        raw["prompts"] = [asdict(p) for p in self.prompts]
        for key in ("methods", "ladder", "seeds"):
            raw[key] = list(raw[key])
        return raw

    def model(self, seed: int) -> SyntheticModel:
        return SyntheticModel.random(self.vocab_size, self.noise_sigma, self.top_k, seed, self.logit_scale)


def _rng(seed: int, method: str, role: int, trial: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([seed, _METHOD_CODE[method], role, trial, *extra])


# -- per-method statistics ----------------------------------------------------------


def _lt_draws(model: SyntheticModel, plan: ExperimentPlan, seed: int, role: int, extra: tuple[int, ...] = ()):
    n = plan.n_per_test
    logprobs = np.empty((plan.trials, n, model.vocab_size))
    observed = np.empty(logprobs.shape, dtype=bool)
    for t in range(plan.trials):
        logprobs[t], observed[t] = model.draw_dense(n, _rng(seed, "LT", role, t, *extra))
    return logprobs, observed


def lt_statistics(
    model_a: SyntheticModel,
    model_b: SyntheticModel,
    plan: ExperimentPlan,
    seed: int,
    roles: tuple[int, int],
    extra: tuple[int, ...] = (),
) -> np.ndarray:
    va, oa = _lt_draws(model_a, plan, seed, roles[0], extra)
    vb, ob = _lt_draws(model_b, plan, seed, roles[1], extra)
    return lt_statistic_arrays(va, oa, vb, ob)


def _met_sequences(model: SyntheticModel, plan: ExperimentPlan, seed: int, role: int) -> np.ndarray:
    """Sequences for every trial, shape ``(trials, n, prompts, length)``."""
    cdf = model.sequence_cdf(range(plan.met_prompts), plan.met_length, plan.met_temperature)
    shape = (plan.n_per_test, plan.met_prompts, plan.met_length)
    u = np.stack([_rng(seed, "MET", role, t).random(shape) for t in range(plan.trials)])
    return sample_categorical(cdf, u).astype(np.int16)


def met_statistics(seqs_a: np.ndarray, seqs_b: np.ndarray, vocab_size: int) -> np.ndarray:
    """Pooled-prompt Hamming MMD for each trial; inputs ``(trials, n, prompts, length)``.

    Only responses to the same prompt are compared. Kernel sums only depend
    on how many sequences of each group hold token ``v`` at each (prompt,
    position), so they are computed from those counts.
    """
    trials, n, prompts, length = seqs_a.shape
    cells = prompts * length * vocab_size
    offsets = (np.arange(prompts * length) * vocab_size).reshape(prompts, length)
    within_pairs = prompts * n * (n - 1)
    cross_pairs = prompts * n * n
    out = np.empty(trials)
    for t in range(trials):
        count_a = np.bincount((seqs_a[t] + offsets).ravel(), minlength=cells).astype(np.int64)
        count_b = np.bincount((seqs_b[t] + offsets).ravel(), minlength=cells).astype(np.int64)
        aa = count_a @ count_a - n * prompts * length
        bb = count_b @ count_b - n * prompts * length
        ab = count_a @ count_b
        out[t] = (aa / within_pairs + bb / within_pairs - 2 * ab / cross_pairs) / length
    return out


def _mmlu_correct(model: SyntheticModel, plan: ExperimentPlan, seed: int, role: int) -> np.ndarray:
    questions = synthetic_questions(plan.mmlu_questions, model.vocab_size, seed)
    probs = correct_probabilities(model, questions, plan.mmlu_temperature)
    out = np.empty((plan.trials, plan.n_per_test, len(questions)), dtype=np.int8)
    for t in range(plan.trials):
        u = _rng(seed, "MMLU", role, t).random((plan.n_per_test, len(questions)))
        out[t] = u < probs
    return out


def mmlu_statistics(correct_a: np.ndarray, correct_b: np.ndarray) -> np.ndarray:
    return np.abs(correct_a.mean(axis=1) - correct_b.mean(axis=1)).mean(axis=1)


def method_draws(method: str, model: SyntheticModel, plan: ExperimentPlan, seed: int, role: int):
    """Raw per-trial samples of one side of a comparison."""
    if method == "LT":
        return _lt_draws(model, plan, seed, role)
    if method == "MET":
        return _met_sequences(model, plan, seed, role)
    if method == "MMLU":
        return _mmlu_correct(model, plan, seed, role)
    raise InvalidInputError(f"unknown method {method!r}")


def compare_draws(method: str, draws_a, draws_b, vocab_size: int) -> np.ndarray:
    if method == "LT":
        return lt_statistic_arrays(*draws_a, *draws_b)
    if method == "MET":
        return met_statistics(draws_a, draws_b, vocab_size)
    if method == "MMLU":
        return mmlu_statistics(draws_a, draws_b)
    raise InvalidInputError(f"unknown method {method!r}")


def method_statistics(
    method: str, original: SyntheticModel, other: SyntheticModel, plan: ExperimentPlan, seed: int, roles: tuple[int, int]
) -> np.ndarray:
    """Test statistic per trial for ``method`` comparing ``original`` with ``other``."""
    return compare_draws(
        method,
        method_draws(method, original, plan, seed, roles[0]),
        method_draws(method, other, plan, seed, roles[1]),
        original.vocab_size,
    )


# -- benchmark ----------------------------------------------------------------------


@dataclass
class BenchmarkResult:
    plan: ExperimentPlan
    rows: list[dict] = field(default_factory=list)
    curves: list[dict] = field(default_factory=list)
    statistics: dict = field(default_factory=dict, repr=False)

    def summary(self, method: str) -> list[dict]:
        return [r for r in self.rows if r["method"] == method and r["seed"] == "all"]

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "jsonl": out / "results.jsonl",
            "csv": out / "results.csv",
            "curves": out / "roc_curves.csv",
            "plan": out / "plan.json",
        }
        with paths["jsonl"].open("w", encoding="utf-8") as fh:
            for row in self.rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        with paths["csv"].open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(self.rows[0]))
            writer.writeheader()
            writer.writerows(self.rows)
        with paths["curves"].open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=["method", "magnitude", "seed", "fpr", "tpr"])
            writer.writeheader()
            writer.writerows(self.curves)
        paths["plan"].write_text(json.dumps(self.plan.to_dict(), indent=2, sort_keys=True) + "\n")
        return paths


def _row(method, plan, magnitude, seed, auc, interval, n_null, n_alt, median=None) -> dict:
    row = {
        "method": method,
        "kind": plan.variant_kind,
        "magnitude": magnitude,
        "seed": seed,
        "auc": auc,
        "auc_median": auc if median is None else median,
        "ci_low": interval.low,
        "ci_high": interval.high,
        "n_null": n_null,
        "n_alt": n_alt,
        "good_detection": auc >= GOOD_DETECTION_AUC,
    }
    return row


def run_benchmark(plan: ExperimentPlan, keep_statistics: bool = False) -> BenchmarkResult:
    """ROC AUC per (method, difficulty), per seed and aggregated over seeds.

    Aggregate rows report the mean AUC over seeds, its median, and a
    hierarchical bootstrap interval over seeds and test statistics.
    """
    result = BenchmarkResult(plan)
    for method in plan.methods:
        null_by_seed = {}
        # the original model's side of every alternative comparison is shared across rungs
        original_draws = {}
        for seed in plan.seeds:
            original = plan.model(seed)
            null_by_seed[seed] = method_statistics(method, original, original, plan, seed, (_NULL_A, _NULL_B))
            original_draws[seed] = method_draws(method, original, plan, seed, _ALT_ORIGINAL)
        for magnitude in plan.ladder:
            leaves = []
            aucs = []
            for seed in plan.seeds:
                original = plan.model(seed)
                variant = apply_variant(original, (plan.variant_kind, magnitude))
                variant_draws = method_draws(method, variant, plan, seed, _ALT_VARIANT)
                alt = compare_draws(method, original_draws[seed], variant_draws, original.vocab_size)
                roc = roc_auc(null_by_seed[seed], alt)
                leaf = AucLeaf(null_by_seed[seed], alt)
                leaves.append(leaf)
                aucs.append(roc.auc)
                interval = bootstrap_ci(leaf, plan.bootstrap_resamples, plan.ci_level, seed)
                result.rows.append(_row(method, plan, magnitude, seed, roc.auc, interval, roc.n_null, roc.n_alt))
                for fpr, tpr in roc.curve:
                    result.curves.append({"method": method, "magnitude": magnitude, "seed": seed, "fpr": fpr, "tpr": tpr})
                if keep_statistics:
                    result.statistics[(method, magnitude, seed)] = (null_by_seed[seed], alt)
            interval = bootstrap_ci(leaves, plan.bootstrap_resamples, plan.ci_level, plan.seeds[0])
            n_null = sum(leaf.null.size for leaf in leaves)
            n_alt = sum(leaf.alt.size for leaf in leaves)
            result.rows.append(
                _row(method, plan, magnitude, "all", interval.point, interval, n_null, n_alt, float(np.median(aucs)))
            )
    return result


def prompt_ablation(plan: ExperimentPlan) -> list[dict]:
    """Relative LT performance of each prompt, averaged over models.

    For every model the absolute performance of a prompt is its AUC at
    ``plan.ablation_magnitude``; its relative performance is that minus the
    mean absolute performance of all prompts on the same model.
    """
    if len(plan.prompts) < 2:
        raise InvalidInputError("prompt ablation needs at least two prompts")
    absolute = np.empty((len(plan.seeds), len(plan.prompts)))
    for i, seed in enumerate(plan.seeds):
        original = plan.model(seed)
        variant = apply_variant(original, (plan.variant_kind, plan.ablation_magnitude))
        for j, prompt in enumerate(plan.prompts):
            extra = (stable_hash(prompt.text), int(round(prompt.noise_scale * 1_000_000)))
            view_o = prompt_view(original, prompt.text, prompt.noise_scale)
            view_v = prompt_view(variant, prompt.text, prompt.noise_scale)
            null = lt_statistics(view_o, view_o, plan, seed, (_NULL_A, _NULL_B), extra)
            alt = lt_statistics(view_o, view_v, plan, seed, (_ALT_ORIGINAL, _ALT_VARIANT), extra)
            absolute[i, j] = roc_auc(null, alt).auc
    relative = absolute - _row_mean(absolute)[:, None]
    rows = []
    for j, prompt in enumerate(plan.prompts):
        rows.append(
            {
                "prompt": prompt.text,
                "noise_scale": prompt.noise_scale,
                "relative": float(_row_mean(relative[:, j][None, :])[0]),
                "absolute_mean": float(absolute[:, j].mean()),
                "absolute": absolute[:, j].tolist(),
                "relative_per_model": relative[:, j].tolist(),
            }
        )
    return rows


def sensitivity_threshold(rows: Sequence[Mapping[str, Any]], threshold: float = GOOD_DETECTION_AUC) -> float | None:
    """Smallest magnitude from which every larger rung has AUC at or above ``threshold``."""
    ladder = sorted((r["magnitude"], r["auc"]) for r in rows)
    best = None
    for magnitude, auc in reversed(ladder):
        if auc < threshold:
            break
        best = magnitude
    return best


def is_nondecreasing(values: Sequence[float]) -> bool:
    return all(b >= a for a, b in zip(values, values[1:]))
