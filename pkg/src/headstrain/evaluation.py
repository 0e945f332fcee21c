"""Metrics, the Wilcoxon signed-rank test, and the 20-run experiment protocol.

Error metrics follow one fixed aggregation order: element-mean first (one
value per impact), impact-mean second (one value per evaluation). Flagged
impacts (non-finite predictions) are excluded from aggregates but always
counted, and a run whose every impact is flagged reports None instead of a
number - failures are visible, never averaged away.

The experiment runner executes a plan of strategies over n_runs fresh random
partitions of the on-field dataset, evaluates every strategy on each run's
test partition, and closes with pairwise Wilcoxon signed-rank comparisons of
the per-run MAE vectors. Reports serialize to canonical JSON (sorted keys,
fixed separators), so identical plans and seeds reproduce identical bytes.
"""

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import __version__
from .errors import (
    IncompatibilityError,
    InsufficientDataError,
    InvalidDataError,
    InvalidParameterError,
)
from .features import extract_feature_matrix
from .oracle import (
    REGION_CODES,
    build_dataset,
    config_fingerprint,
    get_profile,
    sample_surrogate_config,
)
from .strategies import (
    StrategySpec,
    canonical_quantity,
    default_train_config,
    fine_tune,
    fusion_train,
    partition_indices,
    predict_features,
    pretrain,
    scratch_train,
)

REPORT_VERSION = 1

# exact sign-assignment enumeration is used up to this many non-zero pairs
EXACT_ENUMERATION_LIMIT = 25

_SEED_ONFIELD_SPLIT = 12


# ---------------------------------------------------------------------------
# per-impact metrics


def _pair_1d(pred, ref):
    p = np.asarray(pred, dtype=np.float64)
    r = np.asarray(ref, dtype=np.float64)
    if p.shape != r.shape or p.ndim != 1:
        raise IncompatibilityError(
            f"prediction and reference must be matching 1-d vectors, got {p.shape} and {r.shape}"
        )
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(r))):
        raise InvalidDataError("metric inputs must be finite")
    return p, r


def impact_mae(pred, ref) -> float:
    p, r = _pair_1d(pred, ref)
    return float(np.mean(np.abs(p - r)))


def impact_rmse(pred, ref) -> float:
    p, r = _pair_1d(pred, ref)
    return float(np.sqrt(np.mean((p - r) ** 2)))


def impact_r2(pred, ref) -> float:
    """1 - SSres/SStot over elements; nan when the reference has no variance."""
    p, r = _pair_1d(pred, ref)
    ss_tot = float(np.sum((r - r.mean()) ** 2))
    if ss_tot == 0.0:
        return float("nan")
    return 1.0 - float(np.sum((p - r) ** 2)) / ss_tot


@dataclass(frozen=True)
class MetricsSummary:
    """Per-impact metric lists plus aggregates over the unflagged impacts."""

    mae: np.ndarray
    rmse: np.ndarray
    r2: np.ndarray
    flagged: np.ndarray
    r2_undefined: np.ndarray

    @property
    def n_impacts(self) -> int:
        return int(self.mae.size)

    @property
    def n_flagged(self) -> int:
        return int(np.count_nonzero(self.flagged))

    @property
    def n_r2_undefined(self) -> int:
        return int(np.count_nonzero(self.r2_undefined))

    def _aggregate(self, values, extra_mask=None) -> dict:
        keep = ~self.flagged if extra_mask is None else ~self.flagged & ~extra_mask
        vals = values[keep]
        if vals.size == 0:
            return {"mean": None, "median": None, "std": None}
        return {
            "mean": float(vals.mean()),
            "median": float(np.median(vals)),
            "std": float(vals.std()),
        }

    def to_dict(self) -> dict:
        return {
            "per_impact": {
                "mae": _jsonable_floats(self.mae),
                "rmse": _jsonable_floats(self.rmse),
                "r2": _jsonable_floats(self.r2),
            },
            "dataset": {
                "mae": self._aggregate(self.mae),
                "rmse": self._aggregate(self.rmse),
                "r2": self._aggregate(self.r2, extra_mask=self.r2_undefined),
            },
            "n_impacts": self.n_impacts,
            "n_flagged": self.n_flagged,
            "n_r2_undefined": self.n_r2_undefined,
        }


def _jsonable_floats(values) -> list:
    return [float(v) if np.isfinite(v) else None for v in np.asarray(values)]


def compute_metrics(pred, ref, flags=None) -> MetricsSummary:
    """Score an (impacts, elements) prediction block against its reference."""
    p = np.asarray(pred, dtype=np.float64)
    r = np.asarray(ref, dtype=np.float64)
    if p.shape != r.shape or p.ndim != 2:
        raise IncompatibilityError(
            f"prediction and reference must be matching 2-d blocks, got {p.shape} and {r.shape}"
        )
    n = p.shape[0]
    flagged = np.zeros(n, dtype=bool) if flags is None else np.asarray(flags, dtype=bool).copy()
    if flagged.shape != (n,):
        raise IncompatibilityError(f"flags shape {flagged.shape} does not match {n} impacts")
    flagged |= ~np.all(np.isfinite(p), axis=1)
    mae = np.full(n, np.nan)
    rmse = np.full(n, np.nan)
    r2 = np.full(n, np.nan)
    undefined = np.zeros(n, dtype=bool)
    for i in range(n):
        if flagged[i]:
            continue
        mae[i] = impact_mae(p[i], r[i])
        rmse[i] = impact_rmse(p[i], r[i])
        r2[i] = impact_r2(p[i], r[i])
        undefined[i] = not np.isfinite(r2[i])
    return MetricsSummary(mae=mae, rmse=rmse, r2=r2, flagged=flagged, r2_undefined=undefined)


def region_mae(pred, ref, region_map, flags=None) -> dict:
    """Dataset MAE restricted to each region's elements.

    region_map assigns one of the seven region codes to every element; an
    empty region reports None.
    """
    p = np.asarray(pred, dtype=np.float64)
    r = np.asarray(ref, dtype=np.float64)
    codes = np.asarray(region_map)
    if p.shape != r.shape or p.ndim != 2:
        raise IncompatibilityError(
            f"prediction and reference must be matching 2-d blocks, got {p.shape} and {r.shape}"
        )
    if codes.shape != (p.shape[1],):
        raise IncompatibilityError(
            f"region map covers {codes.size} elements, predictions have {p.shape[1]}"
        )
    unknown = set(codes.tolist()) - set(REGION_CODES)
    if unknown:
        raise InvalidParameterError(f"unknown region codes {sorted(unknown)}")
    n = p.shape[0]
    flagged = np.zeros(n, dtype=bool) if flags is None else np.asarray(flags, dtype=bool)
    flagged = flagged | ~np.all(np.isfinite(p), axis=1)
    keep = ~flagged
    out = {}
    err = np.abs(p[keep] - r[keep])
    for code in REGION_CODES:
        mask = codes == code
        if not mask.any() or not keep.any():
            out[code] = None
        else:
            out[code] = float(err[:, mask].mean())
    return out


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    p_value: float
    n: int
    exact: bool
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "p_value": self.p_value,
            "n": self.n,
            "exact": self.exact,
            "degenerate": self.degenerate,
        }


def _midranks(x) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _exact_two_sided_p(doubled_ranks, doubled_w) -> float:
    # distribution of the doubled positive-rank sum over all 2^m sign vectors;
    # counts stay below 2^25 so int64 arithmetic is exact
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    low = int(counts[: doubled_w + 1].sum())
    high = int(counts[total - doubled_w:].sum())
    overlap = 0
    if total - doubled_w <= doubled_w:
        overlap = int(counts[total - doubled_w: doubled_w + 1].sum())
    return (low + high - overlap) / float(2 ** len(doubled_ranks))


def wilcoxon_signed_rank(a, b) -> WilcoxonResult:
    """Two-sided paired test on W = min(positive, negative rank sum).

    Zero differences are dropped, tied magnitudes get mid-ranks, and the
    two-sided p counts the sign assignments whose min rank sum is at most
    the observed one - exactly for m <= 25, by normal approximation with
    continuity and tie corrections above that.
    """
    av = np.asarray(a, dtype=np.float64)
    bv = np.asarray(b, dtype=np.float64)
    if av.shape != bv.shape or av.ndim != 1:
        raise IncompatibilityError(
            f"paired samples must be matching 1-d vectors, got {av.shape} and {bv.shape}"
        )
    if not (np.all(np.isfinite(av)) and np.all(np.isfinite(bv))):
        raise InvalidDataError("paired samples must be finite")
    d = av - bv
    d = d[d != 0.0]
    if d.size == 0:
        return WilcoxonResult(statistic=0.0, p_value=1.0, n=0, exact=True, degenerate=True)
    m = int(d.size)
    if m < 5:
        raise InsufficientDataError(f"only {m} non-zero differences; need at least 5")
    ranks = _midranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if m <= EXACT_ENUMERATION_LIMIT:
        doubled = np.rint(ranks * 2.0).astype(np.int64)
        p = _exact_two_sided_p(doubled, int(round(2.0 * w)))
        return WilcoxonResult(statistic=w, p_value=p, n=m, exact=True)
    mu = m * (m + 1) / 4.0
    sigma2 = m * (m + 1) * (2 * m + 1) / 24.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    sigma2 -= float(np.sum(tie_counts.astype(np.float64) ** 3 - tie_counts)) / 48.0
    z = (w - mu + 0.5) / math.sqrt(sigma2)
    p = min(1.0, math.erfc(-z / math.sqrt(2.0)))
    return WilcoxonResult(statistic=w, p_value=p, n=m, exact=False)


# ---------------------------------------------------------------------------
# percentiles and example selection


def percentile_value(values, q) -> float:
    """Linear-interpolation percentile between order statistics."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise InvalidDataError("percentile of an empty field")
    if not np.all(np.isfinite(x)):
        raise InvalidDataError("percentile inputs must be finite")
    if not (0.0 <= float(q) <= 100.0):
        raise InvalidParameterError(f"percentile must lie in [0, 100], got {q}")
    return float(np.percentile(x, float(q)))


def select_median_example(predictions, q: float = 95.0, ids=None):
    """Pick the impact whose q-th percentile value is median-ranked.

    Returns the index (or the matching entry of ids). Even counts take the
    lower of the two middle ranks.
    """
    p = np.asarray(predictions, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise InvalidDataError(f"need a non-empty (impacts, elements) block, got {p.shape}")
    scores = np.array([percentile_value(row, q) for row in p])
    order = np.argsort(scores, kind="stable")
    chosen = int(order[(p.shape[0] - 1) // 2])
    if ids is not None:
        ids = list(ids)
        if len(ids) != p.shape[0]:
            raise IncompatibilityError(f"{len(ids)} ids for {p.shape[0]} impacts")
        return ids[chosen]
    return chosen


# ---------------------------------------------------------------------------
# experiment plans


@dataclass(frozen=True)
class DatasetSpec:
    """Recipe for one synthetic dataset inside an experiment plan.

    The three scale multipliers shift the oscillator bank's sampled
    parameters, emulating a systematic response difference between data
    sources measured on the same element layout.
    """

    name: str
    profile: str
    n_impacts: int
    seed: int
    augment: bool = False
    freq_scale: float = 1.0
    damping_scale: float = 1.0
    gain_scale: float = 1.0

    def __post_init__(self):
        if self.n_impacts < 1:
            raise InvalidParameterError("dataset needs at least one impact")
        for v in (self.freq_scale, self.damping_scale, self.gain_scale):
            if not (v > 0):
                raise InvalidParameterError("scale multipliers must be positive")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "profile": self.profile,
            "n_impacts": self.n_impacts,
            "seed": self.seed,
            "augment": self.augment,
            "freq_scale": self.freq_scale,
            "damping_scale": self.damping_scale,
            "gain_scale": self.gain_scale,
        }


def _check_ratios(ratios):
    r = tuple(float(v) for v in ratios)
    if len(r) != 3 or any(v <= 0 for v in r):
        raise InvalidParameterError(f"need three positive ratios, got {ratios!r}")
    if abs(sum(r) - 1.0) > 1e-9:
        raise InvalidParameterError(f"ratios must sum to 1, got {sum(r)!r}")
    return r


def sweep_ratios(train_ratio: float):
    """A sweep point puts the remainder half in validation, half in test."""
    rho = float(train_ratio)
    if not (0.0 < rho < 1.0):
        raise InvalidParameterError(f"training ratio must lie in (0, 1), got {rho}")
    rest = (1.0 - rho) / 2.0
    return (rho, rest, rest)


@dataclass(frozen=True)
class ExperimentPlan:
    """Everything needed to reproduce one family of 20-run comparisons."""

    basis: DatasetSpec
    onfield: DatasetSpec
    quantity: str
    strategies: tuple
    n_elements: int = 256
    brain_seed: int = 0
    ratios: tuple = (0.70, 0.15, 0.15)
    sweep: tuple = None
    n_runs: int = 20
    base_seed: int = 0
    epochs: int = 500
    name: str = "experiment"

    def __post_init__(self):
        object.__setattr__(self, "quantity", canonical_quantity(self.quantity))
        object.__setattr__(self, "ratios", _check_ratios(self.ratios))
        specs = tuple(
            s if isinstance(s, StrategySpec) else StrategySpec(name=str(s))
            for s in self.strategies
        )
        if not specs:
            raise InvalidParameterError("plan needs at least one strategy")
        if len({s.name for s in specs}) != len(specs):
            raise InvalidParameterError("duplicate strategies in plan")
        object.__setattr__(self, "strategies", specs)
        if self.n_runs < 1:
            raise InvalidParameterError("n_runs must be positive")
        if self.n_elements < len(REGION_CODES):
            raise InvalidParameterError(
                f"need at least {len(REGION_CODES)} elements for the region layout"
            )
        if self.epochs < 0:
            raise InvalidParameterError("epochs must be non-negative")
        if self.sweep is not None:
            sweep = tuple(float(v) for v in self.sweep)
            n = self.onfield.n_impacts
            for rho in sweep:
                r = sweep_ratios(rho)
                n_val = int(round(r[1] * n))
                n_test = n - int(round(r[0] * n)) - n_val
                if n_val < 10 or n_test < 10:
                    raise InvalidParameterError(
                        f"sweep ratio {rho} leaves {n_val} validation / {n_test} test "
                        f"impacts; need at least 10 of each"
                    )
            object.__setattr__(self, "sweep", sweep)

    def ratio_schedule(self) -> list:
        if self.sweep is None:
            return [self.ratios]
        return [sweep_ratios(rho) for rho in self.sweep]

    def strategy_names(self) -> list:
        return [s.name for s in self.strategies]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "basis": self.basis.to_dict(),
            "onfield": self.onfield.to_dict(),
            "quantity": self.quantity,
            "strategies": [
                {
                    "name": s.name,
                    "train": None if s.train is None else {
                        "learning_rate": s.train.learning_rate,
                        "epochs": s.train.epochs,
                        "batch_size": s.train.batch_size,
                        "l2_lambda": s.train.l2_lambda,
                    },
                    "freeze_grid": list(s.freeze_grid),
                    "lr_grid": None if s.lr_grid is None else [float(v) for v in s.lr_grid],
                    "epoch_grid": list(s.epoch_grid),
                }
                for s in self.strategies
            ],
            "n_elements": self.n_elements,
            "brain_seed": self.brain_seed,
            "ratios": list(self.ratios),
            "sweep": None if self.sweep is None else list(self.sweep),
            "n_runs": self.n_runs,
            "base_seed": self.base_seed,
            "epochs": self.epochs,
        }


# ---------------------------------------------------------------------------
# the experiment runner


@dataclass(frozen=True)
class ExperimentReport:
    plan: dict
    provenance: dict
    results: dict

    def to_json_bytes(self) -> bytes:
        doc = {
            "version": REPORT_VERSION,
            "plan": self.plan,
            "provenance": self.provenance,
            "results": self.results,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ": "), indent=1,
                          allow_nan=False).encode("utf-8")


@dataclass
class _RunContext:
    """Per-process state for executing runs: datasets, features, plan."""

    plan: ExperimentPlan
    basis_ds: object
    basis_X: np.ndarray
    onfield_ds: object
    onfield_X: np.ndarray
    region_map: tuple


_WORKER_CTX = None


def _init_worker(ctx):
    global _WORKER_CTX
    _WORKER_CTX = ctx


def _pool_run(args):
    ratios, run_index = args
    return execute_run(_WORKER_CTX, ratios, run_index)


def _train_seed(run_seed: int, slot: int) -> int:
    return int(run_seed) * 101 + slot


_STRATEGY_SLOTS = {name: i for i, name in enumerate(
    ("pretrained", "scratch_whiten", "scratch_log", "fusion_whiten", "fusion_log", "transfer")
)}


def materialize_plan(plan: ExperimentPlan) -> _RunContext:
    """Build both datasets and their feature matrices once, up front."""
    def build(spec: DatasetSpec):
        cfg = sample_surrogate_config(
            n_elements=plan.n_elements,
            seed=plan.brain_seed,
            freq_scale=spec.freq_scale,
            damping_scale=spec.damping_scale,
            gain_scale=spec.gain_scale,
        )
        ds = build_dataset(get_profile(spec.profile), spec.n_impacts, cfg,
                           seed=spec.seed, augment=spec.augment)
        return cfg, ds

    cfg_b, basis_ds = build(plan.basis)
    cfg_o, onfield_ds = build(plan.onfield)
    return _RunContext(
        plan=plan,
        basis_ds=basis_ds,
        basis_X=extract_feature_matrix(basis_ds.recordings),
        onfield_ds=onfield_ds,
        onfield_X=extract_feature_matrix(onfield_ds.recordings),
        region_map=cfg_o.region_map,
    ), {"basis": config_fingerprint(cfg_b), "onfield": config_fingerprint(cfg_o)}


def _base_config(plan: ExperimentPlan, spec, seed: int):
    if spec is not None and spec.train is not None:
        cfg = spec.train
        return type(cfg)(learning_rate=cfg.learning_rate, epochs=cfg.epochs,
                         batch_size=cfg.batch_size, l2_lambda=cfg.l2_lambda, seed=seed)
    return default_train_config(plan.quantity, epochs=plan.epochs, seed=seed)


def execute_run(ctx: _RunContext, ratios, run_index: int) -> dict:
    """Execute every strategy for one run and score it on the test partition."""
    plan = ctx.plan
    run_seed = plan.base_seed + run_index
    labels = ctx.onfield_ds.mps if plan.quantity == "mps" else ctx.onfield_ds.mpsr
    tr, va, te = partition_indices(
        ctx.onfield_ds.n_recordings, ratios,
        np.random.default_rng([int(run_seed), _SEED_ONFIELD_SPLIT]),
    )
    train_pair = (ctx.onfield_X[tr], labels[tr])
    val_pair = (ctx.onfield_X[va], labels[va])
    tag = plan.onfield.name

    names = plan.strategy_names()
    basis_bundle = None
    if "pretrained" in names or "transfer" in names:
        # the basis is trained once per run and shared by both strategies;
        # only an explicit "pretrained" entry can override its hyperparameters
        pre_spec = next((s for s in plan.strategies if s.name == "pretrained"), None)
        cfg = _base_config(plan, pre_spec, _train_seed(run_seed, _STRATEGY_SLOTS["pretrained"]))
        basis_bundle = pretrain(ctx.basis_ds, plan.quantity, cfg,
                                features=ctx.basis_X, split_seed=run_seed)

    out = {"run": run_index, "seed": run_seed, "strategies": {}}
    for spec in plan.strategies:
        slot = _STRATEGY_SLOTS[spec.name]
        seed = _train_seed(run_seed, slot)
        extra = {}
        if spec.name == "pretrained":
            bundle = basis_bundle
        elif spec.name == "transfer":
            bundle = fine_tune(
                basis_bundle, train_pair, val_pair, ctx.basis_X,
                freeze_grid=spec.freeze_grid, lr_grid=spec.lr_grid,
                epoch_grid=spec.epoch_grid, seed=seed, dataset_tag=tag,
            )
            extra["selected"] = bundle.provenance["selected"]
        elif spec.name in ("scratch_whiten", "scratch_log"):
            cfg = _base_config(plan, spec, seed)
            bundle = scratch_train(train_pair, spec.name == "scratch_whiten",
                                   plan.quantity, cfg, dataset_tag=tag)
        elif spec.name in ("fusion_whiten", "fusion_log"):
            cfg = _base_config(plan, spec, seed)
            bundle = fusion_train(ctx.basis_ds, train_pair,
                                  spec.name == "fusion_whiten", plan.quantity, cfg,
                                  features=ctx.basis_X, split_seed=run_seed,
                                  dataset_tag=tag)
        else:
            raise InvalidParameterError(f"unknown strategy {spec.name!r}")
        pred, flags = predict_features(bundle, ctx.onfield_X[te])
        metrics = compute_metrics(pred, labels[te], flags)
        record = metrics.to_dict()
        record["region_mae"] = region_mae(pred, labels[te], ctx.region_map, flags)
        record.update(extra)
        out["strategies"][spec.name] = record
    return out


def _over_runs(records, key) -> list:
    return [r["dataset"][key]["mean"] for r in records]


def _aggregate_runs(records) -> dict:
    out = {}
    for key in ("mae", "rmse", "r2"):
        vals = [v for v in _over_runs(records, key) if v is not None]
        if vals:
            arr = np.asarray(vals, dtype=np.float64)
            out[key] = {"mean": float(arr.mean()), "median": float(np.median(arr)),
                        "std": float(arr.std())}
        else:
            out[key] = {"mean": None, "median": None, "std": None}
    out["n_failed_runs"] = sum(1 for v in _over_runs(records, "mae") if v is None)
    out["n_flagged_impacts"] = int(sum(r["n_flagged"] for r in records))
    return out


def _mean_region_mae(records) -> dict:
    out = {}
    for code in REGION_CODES:
        vals = [r["region_mae"][code] for r in records if r["region_mae"][code] is not None]
        out[code] = float(np.mean(vals)) if vals else None
    return out


def _pairwise_wilcoxon(strategy_records: dict) -> dict:
    names = sorted(strategy_records)
    out = {}
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            mae_a = _over_runs(strategy_records[a], "mae")
            mae_b = _over_runs(strategy_records[b], "mae")
            keep = [(x, y) for x, y in zip(mae_a, mae_b) if x is not None and y is not None]
            dropped = len(mae_a) - len(keep)
            entry = {"n_pairs": len(keep), "n_dropped_pairs": dropped}
            if keep:
                xs = np.array([x for x, _ in keep])
                ys = np.array([y for _, y in keep])
                entry["median_difference"] = float(np.median(xs - ys))
                try:
                    entry.update(wilcoxon_signed_rank(xs, ys).to_dict())
                except InsufficientDataError:
                    entry.update({"statistic": None, "p_value": None, "n": len(keep),
                                  "exact": None, "degenerate": False,
                                  "insufficient": True})
            else:
                entry.update({"statistic": None, "p_value": None, "n": 0,
                              "exact": None, "degenerate": False, "insufficient": True})
            out[f"{a}|{b}"] = entry
    return out


def _ratio_key(ratios) -> str:
    return "/".join(repr(round(float(v), 10)) for v in ratios)


def run_experiments(plan: ExperimentPlan, jobs: int = 1, progress=None) -> ExperimentReport:
    """Execute the full plan and assemble a deterministic report."""
    if jobs < 1:
        raise InvalidParameterError("jobs must be at least 1")
    ctx, fingerprints = materialize_plan(plan)
    results = {}
    for ratios in plan.ratio_schedule():
        tasks = [(ratios, r) for r in range(plan.n_runs)]
        if jobs == 1:
            run_outputs = []
            for t in tasks:
                run_outputs.append(execute_run(ctx, *t))
                if progress is not None:
                    progress(ratios, t[1])
        else:
            with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker,
                                     initargs=(ctx,)) as pool:
                run_outputs = list(pool.map(_pool_run, tasks))
        # merge keyed by run index so completion order can never reorder results
        run_outputs.sort(key=lambda r: r["run"])
        strategy_records = {
            name: [r["strategies"][name] for r in run_outputs]
            for name in plan.strategy_names()
        }
        results[_ratio_key(ratios)] = {
            "ratios": list(ratios),
            "runs": run_outputs,
            "aggregates": {name: _aggregate_runs(recs)
                           for name, recs in strategy_records.items()},
            "region_mae": {name: _mean_region_mae(recs)
                           for name, recs in strategy_records.items()},
            "wilcoxon": _pairwise_wilcoxon(strategy_records),
        }
    provenance = {
        "package_version": __version__,
        "config_fingerprints": fingerprints,
        "basis_manifest": dict(ctx.basis_ds.manifest),
        "onfield_manifest": dict(ctx.onfield_ds.manifest),
    }
    return ExperimentReport(plan=plan.to_dict(), provenance=provenance, results=results)
