"""Threshold-sweep runner, ROI metrics, and deterministic report emission.

The sweep evaluates collaborative inference over a list of confidence
thresholds against one trace set. Routing work that does not depend on
the threshold is computed once; each threshold then only re-applies the
gate and re-prices the batches. Reports are written as a commented CSV
plus a schema-versioned JSON, byte-identical across runs with the same
inputs and seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from .cost import (
    BatchCost,
    CommModel,
    CostProfile,
    ZERO_COST,
    compose_batch_cost,
    load_cost_profiles,
)
from .data import load_builtin_partitions, builtin_device_profiles
from .errors import ConfigError
from .partition import DomainSet, PartitionMap, load_partition_map
from .router import apply_gate, compute_routing_primitives
from .trace import TraceSet, load_trace_set, shuffle_trace_set, topk_accuracy

__all__ = [
    "SweepConfig",
    "SweepRow",
    "BaselineRow",
    "SweepResult",
    "roi_ratios",
    "baseline_costs",
    "run_sweep",
    "emit_report",
    "load_report",
]

SCHEMA_VERSION = 1

_BASELINE_NAMES = ("edge_only", "near_edge_only")


@dataclass(frozen=True)
class SweepConfig:
    """Everything a sweep needs, loadable from a JSON config document."""

    thresholds: tuple[float, ...]
    k: int
    partitions: str  # path or builtin:<name>
    manifest: str
    profiles: str  # path or "builtin"
    edge_profile: tuple[str, str]  # (device, model)
    near_profile: tuple[str, str]
    expert_profiles: Mapping[str, tuple[str, str]] | None = None  # domain label -> key
    comm: CommModel = CommModel()
    aggregation: str = "monolithic"
    batch_size: int = 10
    normalize_against: str = "edge_only"
    seed: int = 0
    shuffle: bool = False
    mask_to_domain: bool = False

    def __post_init__(self):
        taus = tuple(float(t) for t in self.thresholds)
        if any(not 0.0 <= t <= 1.0 for t in taus):
            raise ConfigError(f"thresholds must lie in [0,1], got {list(taus)}")
        if any(b > a for a, b in zip(taus, taus[1:])):
            raise ConfigError("thresholds must be sorted descending")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.normalize_against not in _BASELINE_NAMES:
            raise ConfigError(
                f"normalize_against must be one of {_BASELINE_NAMES}, "
                f"got {self.normalize_against!r}"
            )
        object.__setattr__(self, "thresholds", taus)

    @classmethod
    def from_mapping(cls, doc: Mapping) -> "SweepConfig":
        known = {
            "thresholds", "k", "partitions", "manifest", "profiles",
            "edge_profile", "near_profile", "expert_profiles", "comm",
            "aggregation", "batch_size", "normalize_against", "seed",
            "shuffle", "mask_to_domain",
        }
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown sweep config keys: {sorted(unknown)}")
        missing = {"thresholds", "k", "partitions", "manifest", "profiles",
                   "edge_profile", "near_profile"} - set(doc)
        if missing:
            raise ConfigError(f"sweep config missing keys: {sorted(missing)}")

        def profile_key(value, what: str) -> tuple[str, str]:
            if (
                isinstance(value, Mapping)
                and set(value) == {"device", "model"}
            ):
                return (str(value["device"]), str(value["model"]))
            raise ConfigError(f"{what} must be an object with 'device' and 'model'")

        kwargs: dict = {
            "thresholds": tuple(doc["thresholds"]),
            "k": doc["k"],
            "partitions": str(doc["partitions"]),
            "manifest": str(doc["manifest"]),
            "profiles": str(doc["profiles"]),
            "edge_profile": profile_key(doc["edge_profile"], "edge_profile"),
            "near_profile": profile_key(doc["near_profile"], "near_profile"),
        }
        if doc.get("expert_profiles") is not None:
            kwargs["expert_profiles"] = {
                label: profile_key(v, f"expert_profiles[{label!r}]")
                for label, v in doc["expert_profiles"].items()
            }
        if "comm" in doc:
            comm = doc["comm"]
            extra = set(comm) - {"rtt_ms", "per_sample_ms", "per_sample_mj"}
            if extra:
                raise ConfigError(f"unknown comm keys: {sorted(extra)}")
            kwargs["comm"] = CommModel(**{k: float(v) for k, v in comm.items()})
        for key in ("aggregation", "batch_size", "normalize_against", "seed",
                    "shuffle", "mask_to_domain"):
            if key in doc:
                kwargs[key] = doc[key]
        return cls(**kwargs)


@dataclass(frozen=True)
class SweepRow:
    """One collaborative operating point of the sweep."""

    threshold: float
    alpha: float
    accuracy: float
    offload_count: int
    histogram: Mapping[DomainSet, int]
    cost: BatchCost  # totals over the whole stream
    num_batches: int
    acc_to_latency_per_ms: float | None = None
    acc_to_energy_per_mj: float | None = None
    latency_vs_baseline: float | None = None
    energy_vs_baseline: float | None = None

    @property
    def t_per_batch_ms(self) -> float:
        return self.cost.t_total_ms / self.num_batches

    @property
    def e_per_batch_mj(self) -> float:
        return self.cost.e_total_mj / self.num_batches


@dataclass(frozen=True)
class BaselineRow:
    """Edge-Only or Near-Edge-Only reference point."""

    name: str
    alpha: float
    accuracy: float | None
    cost: BatchCost
    num_batches: int

    @property
    def t_per_batch_ms(self) -> float:
        return self.cost.t_total_ms / self.num_batches

    @property
    def e_per_batch_mj(self) -> float:
        return self.cost.e_total_mj / self.num_batches


@dataclass(frozen=True)
class SweepResult:
    config: SweepConfig
    num_samples: int
    num_classes: int
    baselines: Mapping[str, BaselineRow]
    rows: tuple[SweepRow, ...]


def roi_ratios(
    acc_co: float,
    acc_edge: float,
    t_co: float,
    t_edge: float,
    e_co: float,
    e_edge: float,
) -> tuple[float | None, float | None]:
    """Accuracy gained per extra ms and per extra mJ over the edge baseline.

    A non-positive denominator means the operating point is not paying
    extra cost in that dimension, so the ratio is undefined (None)
    rather than an error.
    """
    dt, de = t_co - t_edge, e_co - e_edge
    dacc = acc_co - acc_edge
    return (
        dacc / dt if dt > 0 else None,
        dacc / de if de > 0 else None,
    )


def _batch_sizes(num_samples: int, batch_size: int) -> list[int]:
    sizes = [batch_size] * (num_samples // batch_size)
    if num_samples % batch_size:
        sizes.append(num_samples % batch_size)
    return sizes


def _resolve_profile(
    profiles: Mapping[tuple[str, str], CostProfile], key: tuple[str, str], what: str
) -> CostProfile:
    profile = profiles.get(key)
    if profile is None:
        raise ConfigError(f"{what} profile {key[0]}/{key[1]} not found in the profile document")
    return profile


def _expert_profile_map(
    cfg: SweepConfig, profiles: Mapping[tuple[str, str], CostProfile]
) -> dict[DomainSet, CostProfile] | None:
    if cfg.expert_profiles is None:
        return None
    return {
        DomainSet.from_label(label): _resolve_profile(profiles, key, f"expert {label}")
        for label, key in cfg.expert_profiles.items()
    }


def baseline_costs(
    cfg: SweepConfig,
    ts: TraceSet,
    profiles: Mapping[tuple[str, str], CostProfile],
) -> dict[str, BaselineRow]:
    """Edge-Only (nothing offloaded) and Near-Edge-Only (everything) rows.

    Near-Edge-Only accuracy comes from the trace set's near-edge
    generalist entry when present, else it is left undefined; its cost
    charges the near profile plus communication for every sample, with
    no edge term.
    """
    edge_prof = _resolve_profile(profiles, cfg.edge_profile, "edge")
    near_prof = _resolve_profile(profiles, cfg.near_profile, "near-edge")
    sizes = _batch_sizes(ts.num_samples, cfg.batch_size)
    whole_domain = DomainSet.of([1])

    edge_total = ZERO_COST
    near_total = ZERO_COST
    for b in sizes:
        edge_total = edge_total + compose_batch_cost(
            b, {}, edge_prof, near_profile=near_prof, comm=cfg.comm
        )
        near_total = near_total + compose_batch_cost(
            b, {whole_domain: b}, None, near_profile=near_prof, comm=cfg.comm
        )

    near_acc = (
        topk_accuracy(ts.near_generalist, 1) if ts.near_generalist is not None else None
    )
    n = len(sizes)
    return {
        "edge_only": BaselineRow(
            name="edge_only",
            alpha=0.0,
            accuracy=topk_accuracy(ts.edge, 1),
            cost=edge_total,
            num_batches=n,
        ),
        "near_edge_only": BaselineRow(
            name="near_edge_only",
            alpha=1.0,
            accuracy=near_acc,
            cost=near_total,
            num_batches=n,
        ),
    }


def run_sweep(
    cfg: SweepConfig,
    ts: TraceSet | None = None,
    pm: PartitionMap | None = None,
    profiles: Mapping[tuple[str, str], CostProfile] | None = None,
) -> SweepResult:
    """Evaluate every configured threshold and price the realized offloads.

    ``ts``, ``pm``, and ``profiles`` may be passed pre-loaded (tests,
    library callers); otherwise they are loaded from the config paths.
    ``builtin:<name>`` partition specs and ``profiles="builtin"`` pull
    packaged data.
    """
    if pm is None:
        if cfg.partitions.startswith("builtin:"):
            pm = load_builtin_partitions(cfg.partitions.removeprefix("builtin:"))
        else:
            pm = load_partition_map(cfg.partitions)
    if ts is None:
        ts = load_trace_set(cfg.manifest, pm, cfg.k)
    if profiles is None:
        if cfg.profiles == "builtin":
            profiles = builtin_device_profiles()
        else:
            profiles = load_cost_profiles(cfg.profiles)
    if cfg.shuffle:
        ts = shuffle_trace_set(ts, cfg.seed)

    edge_prof = _resolve_profile(profiles, cfg.edge_profile, "edge")
    near_prof = _resolve_profile(profiles, cfg.near_profile, "near-edge")
    expert_profs = _expert_profile_map(cfg, profiles)
    if cfg.aggregation != "monolithic" and expert_profs is None:
        raise ConfigError(f"{cfg.aggregation} aggregation needs expert_profiles in the config")

    primitives = compute_routing_primitives(ts, pm, cfg.k, cfg.mask_to_domain)
    baselines = baseline_costs(cfg, ts, profiles)
    base = baselines[cfg.normalize_against]
    edge_base = baselines["edge_only"]
    sizes = _batch_sizes(ts.num_samples, cfg.batch_size)

    rows = []
    for tau in cfg.thresholds:
        try:
            outcome = apply_gate(primitives, ts.labels, tau)
            total = ZERO_COST
            start = 0
            for b in sizes:
                hist: dict[DomainSet, int] = {}
                for i in range(start, start + b):
                    if outcome.offloaded[i]:
                        dom = outcome.domains[i]
                        hist[dom] = hist.get(dom, 0) + 1
                total = total + compose_batch_cost(
                    b, hist, edge_prof,
                    near_profile=near_prof,
                    expert_profiles=expert_profs,
                    comm=cfg.comm,
                    aggregation=cfg.aggregation,
                )
                start += b
        except ConfigError:
            raise
        except Exception as exc:
            raise RuntimeError(f"sweep failed at threshold {tau}: {exc}") from exc

        lat_roi, en_roi = roi_ratios(
            outcome.accuracy, edge_base.accuracy,
            total.t_total_ms, edge_base.cost.t_total_ms,
            total.e_total_mj, edge_base.cost.e_total_mj,
        )
        rows.append(
            SweepRow(
                threshold=tau,
                alpha=outcome.offload_proportion,
                accuracy=outcome.accuracy,
                offload_count=outcome.offload_count,
                histogram=dict(outcome.histogram),
                cost=total,
                num_batches=len(sizes),
                acc_to_latency_per_ms=lat_roi,
                acc_to_energy_per_mj=en_roi,
                latency_vs_baseline=(
                    total.t_total_ms / base.cost.t_total_ms
                    if base.cost.t_total_ms > 0 else None
                ),
                energy_vs_baseline=(
                    total.e_total_mj / base.cost.e_total_mj
                    if base.cost.e_total_mj > 0 else None
                ),
            )
        )

    return SweepResult(
        config=cfg,
        num_samples=ts.num_samples,
        num_classes=ts.num_classes,
        baselines=baselines,
        rows=tuple(rows),
    )


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------


def _fmt(value: float | int | None) -> str:
    """Fixed 6-significant-digit rendering; None becomes an empty field."""
    if value is None:
        return ""
    if isinstance(value, int):
        return str(value)
    return f"{value:.6g}"


def _num(value: float | int | None):
    if value is None or isinstance(value, int):
        return value
    return float(f"{value:.6g}")


def _hist_str(hist: Mapping[DomainSet, int]) -> str:
    return ";".join(f"{d.label}:{hist[d]}" for d in sorted(hist))


_CSV_COLUMNS = (
    "tau", "alpha", "accuracy", "offload_count",
    "t_edge_ms", "t_near_ms", "t_comm_ms", "t_total_ms",
    "e_edge_mj", "e_near_mj", "e_comm_mj", "e_total_mj",
    "t_per_batch_ms", "e_per_batch_mj",
    "acc_to_latency_per_ms", "acc_to_energy_per_mj",
    "latency_vs_baseline", "energy_vs_baseline",
    "offload_histogram",
)


def _baseline_comment(name: str, row: BaselineRow) -> str:
    return (
        f"# baseline {name}: alpha={_fmt(row.alpha)} accuracy={_fmt(row.accuracy)}"
        f" t_total_ms={_fmt(row.cost.t_total_ms)} e_total_mj={_fmt(row.cost.e_total_mj)}"
        f" t_per_batch_ms={_fmt(row.t_per_batch_ms)} e_per_batch_mj={_fmt(row.e_per_batch_mj)}"
    )


def emit_report(result: SweepResult, out_base: str | Path) -> tuple[Path, Path]:
    """Write <base>.csv and <base>.json; returns both paths.

    Output is a pure function of the result: no timestamps, fixed key
    and column order, floats at 6 significant digits.
    """
    out_base = Path(out_base)
    out_base.parent.mkdir(parents=True, exist_ok=True)
    csv_path = out_base.with_suffix(".csv")
    json_path = out_base.with_suffix(".json")
    cfg = result.config

    lines = [
        "# collaborative inference threshold sweep",
        f"# samples={result.num_samples} classes={result.num_classes} "
        f"k={cfg.k} batch_size={cfg.batch_size} aggregation={cfg.aggregation} "
        f"seed={cfg.seed}",
        f"# normalized columns divide by the {cfg.normalize_against} baseline",
    ]
    for name in _BASELINE_NAMES:
        lines.append(_baseline_comment(name, result.baselines[name]))
    lines.append(",".join(_CSV_COLUMNS))
    for row in result.rows:
        lines.append(
            ",".join(
                (
                    _fmt(row.threshold),
                    _fmt(row.alpha),
                    _fmt(row.accuracy),
                    str(row.offload_count),
                    _fmt(row.cost.t_edge_ms),
                    _fmt(row.cost.t_near_ms),
                    _fmt(row.cost.t_comm_ms),
                    _fmt(row.cost.t_total_ms),
                    _fmt(row.cost.e_edge_mj),
                    _fmt(row.cost.e_near_mj),
                    _fmt(row.cost.e_comm_mj),
                    _fmt(row.cost.e_total_mj),
                    _fmt(row.t_per_batch_ms),
                    _fmt(row.e_per_batch_mj),
                    _fmt(row.acc_to_latency_per_ms),
                    _fmt(row.acc_to_energy_per_mj),
                    _fmt(row.latency_vs_baseline),
                    _fmt(row.energy_vs_baseline),
                    _hist_str(row.histogram),
                )
            )
        )
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    def cost_obj(cost: BatchCost) -> dict:
        return {
            "t_edge_ms": _num(cost.t_edge_ms),
            "t_near_ms": _num(cost.t_near_ms),
            "t_comm_ms": _num(cost.t_comm_ms),
            "t_total_ms": _num(cost.t_total_ms),
            "e_edge_mj": _num(cost.e_edge_mj),
            "e_near_mj": _num(cost.e_near_mj),
            "e_comm_mj": _num(cost.e_comm_mj),
            "e_total_mj": _num(cost.e_total_mj),
        }

    doc = {
        "schema_version": SCHEMA_VERSION,
        "config": {
            "thresholds": [_num(t) for t in cfg.thresholds],
            "k": cfg.k,
            "partitions": cfg.partitions,
            "manifest": cfg.manifest,
            "profiles": cfg.profiles,
            "edge_profile": {"device": cfg.edge_profile[0], "model": cfg.edge_profile[1]},
            "near_profile": {"device": cfg.near_profile[0], "model": cfg.near_profile[1]},
            "expert_profiles": (
                None
                if cfg.expert_profiles is None
                else {
                    label: {"device": key[0], "model": key[1]}
                    for label, key in sorted(cfg.expert_profiles.items())
                }
            ),
            "comm": {
                "rtt_ms": _num(cfg.comm.rtt_ms),
                "per_sample_ms": _num(cfg.comm.per_sample_ms),
                "per_sample_mj": _num(cfg.comm.per_sample_mj),
            },
            "aggregation": cfg.aggregation,
            "batch_size": cfg.batch_size,
            "normalize_against": cfg.normalize_against,
            "seed": cfg.seed,
            "shuffle": cfg.shuffle,
            "mask_to_domain": cfg.mask_to_domain,
        },
        "num_samples": result.num_samples,
        "num_classes": result.num_classes,
        "baselines": {
            name: {
                "alpha": _num(row.alpha),
                "accuracy": _num(row.accuracy),
                "num_batches": row.num_batches,
                "cost": cost_obj(row.cost),
                "t_per_batch_ms": _num(row.t_per_batch_ms),
                "e_per_batch_mj": _num(row.e_per_batch_mj),
            }
            for name, row in sorted(result.baselines.items())
        },
        "rows": [
            {
                "tau": _num(row.threshold),
                "alpha": _num(row.alpha),
                "accuracy": _num(row.accuracy),
                "offload_count": row.offload_count,
                "num_batches": row.num_batches,
                "cost": cost_obj(row.cost),
                "t_per_batch_ms": _num(row.t_per_batch_ms),
                "e_per_batch_mj": _num(row.e_per_batch_mj),
                "acc_to_latency_per_ms": _num(row.acc_to_latency_per_ms),
                "acc_to_energy_per_mj": _num(row.acc_to_energy_per_mj),
                "latency_vs_baseline": _num(row.latency_vs_baseline),
                "energy_vs_baseline": _num(row.energy_vs_baseline),
                "offload_histogram": {
                    d.label: row.histogram[d] for d in sorted(row.histogram)
                },
            }
            for row in result.rows
        ],
    }
    json_path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return csv_path, json_path


def load_report(json_path: str | Path) -> dict:
    """Read back an emitted JSON report, checking the schema version."""
    path = Path(json_path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read report {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"report {path} is not valid JSON: {exc}") from exc
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(
            f"report schema version {doc.get('schema_version')!r} is not "
            f"{SCHEMA_VERSION}"
        )
    return doc
