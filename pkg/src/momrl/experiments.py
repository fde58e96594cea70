"""Seeded experiment manifests, runners for every pipeline, and result records.

A manifest names an experiment kind, a root seed, parameters and thresholds.
Each run derives named random streams from the seed ("instance", "data",
"learner", ...), so a manifest always reproduces the same metrics. Runtime
measurements are kept apart from metrics for that reason.
"""

from __future__ import annotations

import itertools
import json
import math
import os
import platform
import subprocess
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import yaml

from . import __version__
from .activations import Activation
from .instances import make_action_independent, make_planted_q, random_net
from .mdp import evaluate_policy_exact, exact_dp_solve
from .moments import (MomentIndices, estimate_P2, estimate_Q1, estimate_Q2, estimate_R3,
                      naive_moment_contractions)
from .recovery import RecoveryConfig, exact_recover, noisy_recover, sample_planted
from .rng import child_seed, stream

MANIFEST_SCHEMA = "momrl.manifest/1"
RESULT_SCHEMA = "momrl.result/1"
SWEEP_SCHEMA = "momrl.sweep/1"


class ManifestError(ValueError):
    def __init__(self, problems: dict[str, str]):
        self.problems = problems
        super().__init__("; ".join(f"{k}: {v}" for k, v in problems.items()))


class CapExceeded(ValueError):
    pass


# ---------------------------------------------------------------------------
# caps


_CAP_DEFAULTS = {"d": 64, "k": 8, "p": 4, "H": 10, "n": 4_000_000, "grid": 500, "workers": 8}


def cap(name: str) -> int:
    """Desk-scale cap, overridable with MOMRL_MAX_<NAME>."""
    raw = os.environ.get(f"MOMRL_MAX_{name.upper()}")
    return int(float(raw)) if raw else _CAP_DEFAULTS[name]


# ---------------------------------------------------------------------------
# kinds


@dataclass(frozen=True)
class Kind:
    params: dict[str, Any]
    thresholds: dict[str, Any]
    runner: Callable[[dict, int], dict]


def _noisy(params: dict, seed: int) -> dict:
    net = random_net(stream(seed, "instance"), params["d"], params["k"])
    batch = sample_planted(net, params["n"], stream(seed, "data"), params["noise"])
    rep = noisy_recover(batch, params["k"], RecoveryConfig(n=params["n"]),
                        stream(seed, "learner"), reference=net)
    ref = rep.diagnostics.get("reference", {})
    return {"status": rep.status, "kappa": net.kappa,
            "relative_row_error": ref.get("relative_row_error", math.inf),
            "relative_frobenius": ref.get("relative_frobenius", math.inf),
            "signs_match": bool(ref.get("signs_match", False))}


def _exact(params: dict, seed: int) -> dict:
    net = random_net(stream(seed, "instance"), params["d"], params["k"])
    batch = sample_planted(net, params["n"], stream(seed, "data"))
    rep = exact_recover(batch, params["k"], RecoveryConfig(n=params["n"]),
                        stream(seed, "learner"), reference=net)
    ref = rep.diagnostics.get("reference", {})
    return {"status": rep.status, "final_loss": rep.diagnostics.get("final_loss", math.inf),
            "gd_iterations": rep.diagnostics.get("gd_iterations", 0),
            "frobenius_error": ref.get("frobenius_error", math.inf),
            "signs_match": bool(ref.get("signs_match", False)),
            "loss_monotone": bool(rep.diagnostics.get("monotone", False))}


def _moment_check(params: dict, seed: int) -> dict:
    act = Activation()
    indices = MomentIndices.select(act)
    worst = 0.0
    for b in range(params["batches"]):
        net = random_net(stream(seed, "instance", b), params["d"], params["k"])
        batch = sample_planted(net, params["n"], stream(seed, "data", b))
        rng = stream(seed, "probe", b)
        alpha = rng.standard_normal(params["d"])
        alpha /= np.linalg.norm(alpha)
        V = np.linalg.qr(rng.standard_normal((params["d"], params["k"])))[0]
        fast = {"P2": estimate_P2(batch, alpha, indices),
                "R3": estimate_R3(batch, alpha, V, indices),
                "Q1": estimate_Q1(batch, alpha, indices),
                "Q2": estimate_Q2(batch, alpha, V, indices)}
        slow = naive_moment_contractions(batch, alpha, indices, V)
        worst = max(worst, *(float(np.max(np.abs(fast[key] - slow[key]))) for key in fast))
    return {"max_oracle_diff": worst}


def _rl_common(stack, mdp, eps: float | None, seed: int) -> dict:
    from .rl import diagnose, telescoping_holds
    diag = diagnose(stack, mdp, rng=stream(seed, "probes"))
    out = {"v_star": diag["v_star"], "v_pi": diag["v_pi"],
           "suboptimality": diag["suboptimality"],
           "queries_per_level": diag["queries"], "total_queries": diag["total_queries"],
           "truncated_per_level": stack.truncated.tolist(),
           "policy_q_error": [ld.policy_q_error for ld in diag["levels"]],
           "optimal_q_error": [ld.optimal_q_error for ld in diag["levels"]],
           "probe_error": [ld.probe_error for ld in diag["levels"]],
           "level1_probe_error": diag["levels"][0].probe_error,
           "exactly_optimal": bool(diag["suboptimality"] <= 1e-9)}
    if eps is not None:
        out["telescoping"] = telescoping_holds(diag, eps, mdp.horizon)
    return out


def _rl(variant: str) -> Callable[[dict, int], dict]:
    def runner(params: dict, seed: int) -> dict:
        from . import rl
        irng = stream(seed, "instance")
        common = dict(d=params["d"], k=params["k"], H=params["H"], S=params["S"], A=params["A"])
        if variant in ("deterministic", "gap"):
            mdp = make_planted_q(irng, min_gap=params.get("rho") if variant == "gap" else None,
                                 rank_deficient_level=params.get("rank_deficient_level"),
                                 **common)
        else:
            mdp = make_action_independent(irng, stochastic=variant == "policy_complete",
                                          **common)
        cfg = rl.NeuralRlConfig(n=params["n"], k=params["k"], eps=params.get("eps", 0.2),
                                rho=params.get("rho"))
        learn = {"deterministic": rl.learn_deterministic, "policy_complete": rl.learn_policy_complete,
                 "bellman": rl.learn_bellman_complete, "gap": rl.learn_with_gap}[variant]
        try:
            stack = learn(mdp, cfg, child_seed(seed, "learner"))
        except rl.LevelFailure as exc:
            return {"failed_level": exc.level, "failed_stage": exc.stage, "error": str(exc)}
        out = _rl_common(stack, mdp, params.get("eps") if variant == "policy_complete" else None,
                         seed)
        if variant == "gap":
            out["measured_gap"] = stack.measured_gap
            out["gap_violation"] = bool(stack.gap_violation)
        return out
    return runner


def _poly(online: bool) -> Callable[[dict, int], dict]:
    def runner(params: dict, seed: int) -> dict:
        from .poly import FamilySpec, dp_generative, dp_online, make_planted_poly
        mdp = make_planted_poly(stream(seed, "instance"), d=params["d"], H=params["H"],
                                S=params["S"], A=params["A"], p=params["p"])
        spec = FamilySpec("rank_k", params["d"], 1, params["p"])
        res = (dp_online if online else dp_generative)(mdp, spec, child_seed(seed, "learner"))
        sol = exact_dp_solve(mdp)
        _, Vpi = evaluate_policy_exact(mdp, res.policy)
        budget = 2 * spec.D * mdp.horizon
        key = "episodes" if online else "queries"
        return {"suboptimality": float(sol.V[0, mdp.initial_state] - Vpi[0, mdp.initial_state]),
                "policy_matches_oracle": bool(np.array_equal(res.policy.table, sol.policy.table)),
                f"{key}_per_level": res.queries.tolist(), f"total_{key}": res.total,
                "budget_2DH": budget, f"{key}_equal_2DH": res.total == budget,
                "measure_proposals": res.measure_proposals,
                "fit_status": [f.status for f in res.fits]}
    return runner


def _separation(params: dict, seed: int) -> dict:
    from .poly import separation_experiment
    rep = separation_experiment(params["d"], params["p"], params["H"], seed)
    later = [r for r in rep.rows if r.level >= 2]
    return {"lambda_size": rep.lambda_size, "planted": [list(a) for a in rep.planted],
            "online_worst": [r.online_worst for r in rep.rows],
            "online_mean": [r.online_mean for r in rep.rows],
            "online_best": [r.online_best for r in rep.rows],
            "generative_queries": [r.generative_queries for r in rep.rows],
            "generative_budget": later[0].generative_budget if later else rep.rows[0].generative_budget,
            "online_worst_is_lambda_minus_one": all(r.online_worst == rep.lambda_size - 1
                                                    for r in later),
            "generative_within_2D": all(r.generative_queries <= r.generative_budget
                                        for r in rep.rows),
            "all_identified": all(r.identified for r in rep.rows),
            "delta_sum_exact": all(s == 1.0 for s in rep.delta_sums),
            "v_star_1": rep.v_star_1, "v_star_matches": rep.v_star_1 == float(rep.horizon),
            "table": rep.table()}


_RL_BASE = {"d": 10, "k": 2, "H": 2, "S": 4, "A": 16, "n": 200_000}
_POLY_BASE = {"d": 3, "p": 2, "H": 2, "S": 3, "A": 8}

KINDS: dict[str, Kind] = {
    "moment-check": Kind({"d": 4, "k": 1, "n": 1000, "batches": 1},
                         {"max_oracle_diff": 1e-10}, _moment_check),
    "recover-noisy": Kind({"d": 10, "k": 2, "n": 400_000, "noise": 0.1},
                          {"max_relative_row_error": 0.1, "signs_match": True}, _noisy),
    "recover-exact": Kind({"d": 10, "k": 2, "n": 200_000},
                          {"max_frobenius_error": 1e-6, "loss_monotone": True}, _exact),
    "rl-det": Kind({**_RL_BASE, "rank_deficient_level": None},
                   {"max_suboptimality": 1e-9}, _rl("deterministic")),
    "rl-policy": Kind({**_RL_BASE, "eps": 0.2},
                      {"max_suboptimality": 0.2, "telescoping": True}, _rl("policy_complete")),
    "rl-bellman": Kind({**_RL_BASE, "n": 2_000_000, "eps": 0.2},
                       {"max_level1_probe_error": 0.2}, _rl("bellman")),
    "rl-gap": Kind({**_RL_BASE, "n": 1_000_000, "rho": 0.5},
                   {"max_suboptimality": 1e-9, "gap_violation": False}, _rl("gap")),
    "poly-generative": Kind(dict(_POLY_BASE), {"policy_matches_oracle": True,
                                               "queries_equal_2DH": True}, _poly(False)),
    "poly-online": Kind(dict(_POLY_BASE), {"policy_matches_oracle": True,
                                           "episodes_equal_2DH": True}, _poly(True)),
    "hard-separation": Kind({"d": 4, "p": 2, "H": 3},
                            {"online_worst_is_lambda_minus_one": True,
                             "generative_within_2D": True, "all_identified": True,
                             "delta_sum_exact": True, "v_star_matches": True}, _separation),
}

# metric compared against each threshold when the names differ
_METRIC_FOR = {"max_relative_row_error": "relative_row_error",
               "max_frobenius_error": "frobenius_error", "max_suboptimality": "suboptimality",
               "max_level1_probe_error": "level1_probe_error", "max_oracle_diff": "max_oracle_diff"}


# ---------------------------------------------------------------------------
# manifest


@dataclass
class ExperimentManifest:
    kind: str
    seed: int
    params: dict[str, Any] = field(default_factory=dict)
    thresholds: dict[str, Any] = field(default_factory=dict)
    output: str | None = None
    schema: str = MANIFEST_SCHEMA

    def resolved_params(self) -> dict:
        return {**KINDS[self.kind].params, **self.params}

    def resolved_thresholds(self) -> dict:
        return {**KINDS[self.kind].thresholds, **self.thresholds}

    def to_dict(self) -> dict:
        return {"schema": self.schema, "kind": self.kind, "seed": self.seed,
                "params": dict(self.params), "thresholds": dict(self.thresholds),
                "output": self.output}

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)

    @classmethod
    def from_dict(cls, data: Any) -> "ExperimentManifest":
        problems: dict[str, str] = {}
        if not isinstance(data, dict):
            raise ManifestError({"<root>": "manifest must be a mapping"})
        unknown = set(data) - {"schema", "kind", "seed", "params", "thresholds", "output"}
        for key in sorted(unknown):
            problems[key] = "unknown field"
        if data.get("schema", MANIFEST_SCHEMA) != MANIFEST_SCHEMA:
            problems["schema"] = f"expected {MANIFEST_SCHEMA}"
        kind = data.get("kind")
        if kind not in KINDS:
            problems["kind"] = f"must be one of {', '.join(sorted(KINDS))}"
        seed = data.get("seed")
        if seed is None:
            problems["seed"] = "seed is mandatory"
        elif isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
            problems["seed"] = "must be a non-negative integer"
        params = data.get("params") or {}
        thresholds = data.get("thresholds") or {}
        if not isinstance(params, dict):
            problems["params"] = "must be a mapping"
            params = {}
        if not isinstance(thresholds, dict):
            problems["thresholds"] = "must be a mapping"
            thresholds = {}
        if kind in KINDS:
            problems.update(_check_params(KINDS[kind], params))
            for key in thresholds:
                if key not in KINDS[kind].thresholds:
                    problems[f"thresholds.{key}"] = f"not a threshold of {kind}"
        if problems:
            raise ManifestError(problems)
        params = {k: _coerce(KINDS[kind].params[k], v) for k, v in params.items()}
        return cls(kind, seed, params, dict(thresholds), data.get("output"),
                   data.get("schema", MANIFEST_SCHEMA))

    @classmethod
    def loads(cls, text: str) -> "ExperimentManifest":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ManifestError({"<root>": f"not valid YAML: {exc}"}) from exc
        return cls.from_dict(data)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentManifest":
        return cls.loads(Path(path).read_text())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())


def _coerce(default, value):
    if isinstance(value, float) and (isinstance(default, int) or default is None) and value.is_integer():
        return int(value)
    return value


def _check_params(kind: Kind, params: dict) -> dict[str, str]:
    problems = {}
    for key, value in params.items():
        if key not in kind.params:
            problems[f"params.{key}"] = "unknown parameter"
            continue
        default = kind.params[key]
        if value is None:
            continue
        if isinstance(value, str):
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems[f"params.{key}"] = "must be a number"
            continue
        if isinstance(default, int) and not isinstance(default, bool) and int(value) != value:
            problems[f"params.{key}"] = "must be an integer"
            continue
        if value < 0 or (key in ("d", "k", "p", "H", "n", "S", "A", "batches") and value < 1):
            problems[f"params.{key}"] = "out of range"
            continue
        if key in _CAP_DEFAULTS and value > cap(key):
            problems[f"params.{key}"] = f"exceeds cap {cap(key)} (set MOMRL_MAX_{key.upper()})"
    return problems


# ---------------------------------------------------------------------------
# records


def build_hash() -> str:
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=here,
                             capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def fingerprint() -> dict:
    return {"version": __version__, "build": build_hash(),
            "python": platform.python_version(), "numpy": np.__version__}


@dataclass
class ResultRecord:
    manifest: dict
    status: str                       # passed | failed
    metrics: dict
    verdicts: dict
    fingerprint: dict
    runtime: dict
    error: str | None = None
    schema: str = RESULT_SCHEMA

    @property
    def passed(self) -> bool:
        return self.status == "passed"

    def payload(self) -> dict:
        """Everything except runtime measurements; stable across reruns."""
        return {"schema": self.schema, "manifest": self.manifest, "status": self.status,
                "metrics": self.metrics, "verdicts": self.verdicts, "error": self.error}

    def to_dict(self) -> dict:
        return {**self.payload(), "fingerprint": self.fingerprint, "runtime": self.runtime}

    def to_json(self) -> str:
        return json.dumps(_plain(self.to_dict()), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ResultRecord":
        return cls(data["manifest"], data["status"], data["metrics"], data["verdicts"],
                   data.get("fingerprint", {}), data.get("runtime", {}), data.get("error"),
                   data.get("schema", RESULT_SCHEMA))


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    return obj


def _verdict(name: str, threshold, metrics: dict) -> dict:
    metric = _METRIC_FOR.get(name, name)
    value = metrics.get(metric)
    if value is None:
        ok = False
    elif isinstance(threshold, bool):
        ok = bool(value) == threshold
    elif name.startswith("min_"):
        ok = float(value) >= threshold
    else:
        ok = float(value) <= threshold
    return {"metric": metric, "value": value, "threshold": threshold, "pass": bool(ok)}


def run(manifest: ExperimentManifest, out_dir: str | Path | None = None) -> ResultRecord:
    """Run one manifest; pipeline errors become a failed record, not an exception."""
    params = manifest.resolved_params()
    thresholds = manifest.resolved_thresholds()
    start = time.perf_counter()
    error = None
    try:
        metrics = KINDS[manifest.kind].runner(params, manifest.seed)
    except Exception as exc:  # recorded, not raised: the record carries the failure
        metrics, error = {}, f"{type(exc).__name__}: {exc}"
    if "error" in metrics:
        error = metrics["error"]
    metrics = _plain(metrics)
    verdicts = {name: _verdict(name, thr, metrics) for name, thr in sorted(thresholds.items())}
    ok = error is None and all(v["pass"] for v in verdicts.values())
    status = "passed" if ok else "failed"
    runtime = {"seconds": round(time.perf_counter() - start, 3),
               "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())}
    record = ResultRecord(manifest.to_dict(), status, metrics, verdicts, fingerprint(), runtime,
                          error)
    target = out_dir if out_dir is not None else manifest.output
    if target is not None:
        write_atomic(Path(target) / f"{manifest.kind}-seed{manifest.seed}.json",
                     record.to_json() + "\n")
    return record


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# sweeps


def grid_points(grid: dict[str, list]) -> list[dict]:
    if not grid or any(len(v) == 0 for v in grid.values()):
        return []
    keys = sorted(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def _point_manifest(template: ExperimentManifest, point: dict) -> ExperimentManifest:
    data = template.to_dict()
    data["params"] = {**data["params"], **{k: v for k, v in point.items() if k != "seed"}}
    if "seed" in point:
        data["seed"] = point["seed"]
    return ExperimentManifest.from_dict(data)


def _run_point(args) -> dict:
    manifest_dict, out_dir, index = args
    record = run(ExperimentManifest.from_dict(manifest_dict))
    if out_dir is not None:
        write_atomic(Path(out_dir) / "points" / f"{index:05d}.json", record.to_json() + "\n")
    return record.to_dict()


@dataclass
class SweepResult:
    records: list[ResultRecord]
    summary: list[dict]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.records)

    def table(self) -> str:
        return summary_table(self.summary)


def sweep(template: ExperimentManifest, grid: dict[str, list], workers: int = 1,
          out_dir: str | Path | None = None) -> SweepResult:
    """One record per grid point, then a summary grouped over everything but the seed."""
    points = grid_points(grid)
    if len(points) > cap("grid"):
        raise CapExceeded(f"grid has {len(points)} points, cap is {cap('grid')} "
                          "(set MOMRL_MAX_GRID)")
    workers = max(1, min(int(workers), cap("workers")))
    manifests = [_point_manifest(template, p).to_dict() for p in points]
    jobs = [(m, None if out_dir is None else str(out_dir), i) for i, m in enumerate(manifests)]
    if workers == 1 or len(jobs) <= 1:
        raw = [_run_point(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            raw = list(pool.map(_run_point, jobs))
    records = [ResultRecord.from_dict(r) for r in raw]
    summary = summarize(records, [k for k in sorted(grid) if k != "seed"])
    if out_dir is not None:
        out = Path(out_dir)
        write_atomic(out / "records.jsonl", "".join(r.to_json() + "\n" for r in records))
        write_atomic(out / "summary.txt", summary_table(summary) + "\n")
    return SweepResult(records, summary)


def summarize(records: list[ResultRecord], keys: list[str] | None = None) -> list[dict]:
    """Pass rate plus mean and median of scalar metrics per group of grid values."""
    if keys is None:
        keys = sorted({k for r in records for k in r.manifest.get("params", {})})
    groups: dict[tuple, list[ResultRecord]] = {}
    for r in records:
        params = r.manifest.get("params", {})
        key = (r.manifest["kind"],) + tuple(params.get(k) for k in keys)
        groups.setdefault(key, []).append(r)
    rows = []
    for key, recs in sorted(groups.items(), key=lambda kv: str(kv[0])):
        row = {"kind": key[0], **dict(zip(keys, key[1:])), "runs": len(recs),
               "pass_rate": sum(r.passed for r in recs) / len(recs)}
        scalars = sorted({m for r in recs for m, v in r.metrics.items()
                          if isinstance(v, (int, float)) and not isinstance(v, bool)})
        for m in scalars:
            vals = [float(r.metrics[m]) for r in recs
                    if isinstance(r.metrics.get(m), (int, float))]
            row[f"mean_{m}"] = float(np.mean(vals))
            row[f"median_{m}"] = float(np.median(vals))
        rows.append(row)
    return rows


def summary_table(rows: list[dict], columns: list[str] | None = None) -> str:
    if not rows:
        return "(no records)"
    if columns is None:
        columns = [c for c in rows[0] if not c.startswith(("mean_", "median_"))]
        columns += [c for c in rows[0] if c.startswith("median_")]
    fmt = lambda v: f"{v:.4g}" if isinstance(v, float) else str(v)
    cells = [[fmt(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(columns, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def load_records(path: str | Path) -> list[ResultRecord]:
    """Records from a .jsonl file, a single .json record, or a directory of either."""
    path = Path(path)
    files = sorted(path.rglob("*.json*")) if path.is_dir() else [path]
    if path.is_dir() and (path / "records.jsonl").exists():
        files = [path / "records.jsonl"]
    out = []
    for f in files:
        for line in f.read_text().splitlines():
            if line.strip():
                data = json.loads(line)
                if data.get("schema") != RESULT_SCHEMA:
                    raise ValueError(f"{f}: unrecognised record schema")
                out.append(ResultRecord.from_dict(data))
    return out
