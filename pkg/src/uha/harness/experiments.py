"""Experiment orchestration: per-seed runs, the Student-t bound table, subset study, extrapolation, moments."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from multiprocessing import get_context
from pathlib import Path

from .. import rng
from ..bounds import AnnealParams, BoundSampler, Estimate, estimate_bound, pool_estimates
from ..targets import GaussianTarget, LogisticRegression, MeanFieldGaussian, StudentT, Target, load_libsvm
from ..tuning import (
    GridSpec,
    OptimizeResult,
    ReferenceMoments,
    TrainConfig,
    UsageError,
    extrapolate_params,
    grid_search_hais,
    moment_error,
    optimize,
)
from .config import ExperimentConfig, SubsetsConfig, Table1Config, TargetSpec
from .records import RecordWriter, read_records

log = logging.getLogger(__name__)

ALL_GROUPS = ("q", "eps", "eta", "Sigma", "beta", "eps_of_beta", "psi_of_beta")
LOW_CONFIDENCE_SAMPLES = 100


def build_target(spec: TargetSpec) -> Target:
    if spec.kind == "student_t":
        return StudentT(spec.dim, spec.nu)
    if spec.kind == "gaussian":
        return GaussianTarget.standard(spec.dim)
    data = load_libsvm(spec.dataset, spec.n_features, spec.max_rows)
    return LogisticRegression(data)


def seed_for(base_seed: int, index: int) -> int:
    return rng.derive_seed(base_seed, ("seed", index))


def estimate_from_dict(d: dict) -> Estimate:
    """Rebuild an Estimate (with its M2) from a persisted record."""
    n = int(d["n"])
    stderr = d["stderr"] if d["stderr"] is not None else math.nan
    m2 = d.get("m2")
    if m2 is None:
        m2 = stderr ** 2 * n * (n - 1) if n > 1 else 0.0
    return Estimate(d["mean"] if d["mean"] is not None else math.nan, stderr, n, int(d["diverged"]), m2)


def _estimate_dict(est: Estimate) -> dict:
    out = est.as_dict()
    out["m2"] = est.m2
    return out


_VI_CACHE: dict = {}


def fit_plain_vi(target: Target, steps: int, learning_rates, batch_size: int, eval_draws: int,
                 seed: int) -> OptimizeResult:
    """Plain-VI fit from a standard normal q; memoized per process."""
    key = (id(target), steps, tuple(learning_rates), batch_size, eval_draws, seed)
    hit = _VI_CACHE.get(key)
    if hit is not None and hit[0] is target:
        return hit[1]
    p0 = AnnealParams.initial(target.dim, 1, trainable=("q",))
    cfg = TrainConfig(method="plain_vi", K=1, steps=steps, batch_size=batch_size,
                      learning_rates=tuple(learning_rates), trainable=("q",), seed=seed,
                      eval_draws=eval_draws)
    res = optimize(cfg, p0, target)
    _VI_CACHE[key] = (target, res)
    return res


def initial_params(method: str, dim: int, K: int, q: MeanFieldGaussian, trainable, init_eps: float,
                   init_eta: float, eps_max: float) -> AnnealParams:
    if method in ("uha", "hais"):
        return AnnealParams.initial(dim, K, init_eps, init_eta, q=q, eps_max=eps_max, trainable=trainable)
    return AnnealParams.initial(dim, 1, q=q, trainable=("q",))


def train_cell(method: str, K: int, target: Target, q: MeanFieldGaussian, *, trainable, steps: int,
               learning_rates, batch_size: int, eval_draws: int, seed: int, init_eps: float = 0.05,
               init_eta: float = 0.5, eps_max: float = 0.5) -> tuple[OptimizeResult, AnnealParams]:
    params0 = initial_params(method, target.dim, K, q, trainable, init_eps, init_eta, eps_max)
    cfg = TrainConfig(method=method, K=K, steps=steps, batch_size=batch_size,
                      learning_rates=tuple(learning_rates), trainable=tuple(params0.trainable),
                      seed=seed, eval_draws=eval_draws)
    return optimize(cfg, params0, target), params0


def _q_for(cfg: ExperimentConfig, target: Target, seed: int) -> tuple[MeanFieldGaussian, dict | None]:
    if cfg.init_q == "standard" or cfg.method == "plain_vi":
        return MeanFieldGaussian.standard(target.dim), None
    vi = fit_plain_vi(target, cfg.vi_steps or cfg.steps, cfg.learning_rates, cfg.batch_size,
                      cfg.eval_draws, rng.derive_seed(seed, ("vi", 0)))
    return vi.params.q, {"estimate": _estimate_dict(vi.estimate), "learning_rate": vi.learning_rate,
                         "wall_clock": vi.wall_clock}


def run_seed(cfg: ExperimentConfig, index: int) -> dict:
    """One seed of an experiment as a record; failures become partial records."""
    seed = seed_for(cfg.base_seed, index)
    rec = {"kind": "run", "method": cfg.method, "K": cfg.K, "seed_index": index, "seed": seed,
           "config": cfg.model_dump(mode="json"), "config_hash": cfg.content_hash(), "status": "ok"}
    t0 = time.perf_counter()
    try:
        target = build_target(cfg.target)
        rec["target"] = target.describe()
        q, vi = _q_for(cfg, target, seed)
        rec["init_fit"] = vi
        if cfg.method == "hais":
            params0 = initial_params("hais", target.dim, cfg.K, q, (), cfg.init_eps, cfg.init_eta,
                                     cfg.eps_max)
            rec["params_before"] = params0.realized()
            g = cfg.grid
            out = grid_search_hais(GridSpec(tuple(g.etas), tuple(g.target_rejection_rates)), params0,
                                   target, cfg.K, cfg.eval_draws, g.pilot_draws, seed, eps_hi=g.eps_hi)
            rec.update(params_after=out["params"].realized(), params=out["params"].to_dict(),
                       grid=out["cells"], final=_estimate_dict(out["estimate"]))
        else:
            res, params0 = train_cell(cfg.method, cfg.K, target, q, trainable=cfg.trainable,
                                      steps=cfg.steps, learning_rates=cfg.learning_rates,
                                      batch_size=cfg.batch_size, eval_draws=cfg.eval_draws, seed=seed,
                                      init_eps=cfg.init_eps, init_eta=cfg.init_eta, eps_max=cfg.eps_max)
            rec.update(params_before=params0.realized(), params_after=res.params.realized(),
                       params=res.params.to_dict(), final=_estimate_dict(res.estimate),
                       initial=_estimate_dict(res.initial_estimate), learning_rate=res.learning_rate,
                       per_rate=[{k: v for k, v in r.items() if k != "params"} for r in res.per_rate],
                       trace=res.trace)
    except Exception as exc:  # noqa: BLE001 - persisted as a partial record
        rec.update(status="failed", error=f"{type(exc).__name__}: {exc}", traceback=traceback.format_exc())
    rec["wall_clock"] = time.perf_counter() - t0
    return rec


def _run_seed_json(args):
    cfg_json, index = args
    return run_seed(ExperimentConfig.model_validate_json(cfg_json), index)


def summarize(records: list[dict], **extra) -> dict:
    ok = [r for r in records if r.get("status") == "ok" and r.get("final")]
    pooled = pool_estimates([estimate_from_dict(r["final"]) for r in ok]) if ok else None
    out = {"kind": "summary", "n_seeds": len(records), "n_ok": len(ok),
           "pooled": _estimate_dict(pooled) if pooled else None,
           "per_seed_means": [r["final"]["mean"] for r in ok]}
    out.update(extra)
    return out


def run_experiment(cfg: ExperimentConfig, writer: RecordWriter, workers: int = 1) -> tuple[list, dict]:
    """All seeds of ``cfg`` plus a pooled summary; records are written in seed order."""
    indices = list(range(cfg.n_seeds))
    if workers > 1 and len(indices) > 1:
        with ProcessPoolExecutor(workers, mp_context=get_context("spawn")) as ex:
            results = list(ex.map(_run_seed_json, [(cfg.model_dump_json(), i) for i in indices]))
    else:
        results = [run_seed(cfg, i) for i in indices]
    records = [writer.append(r) for r in results]
    summary = writer.append(summarize(records, method=cfg.method, K=cfg.K,
                                      config_hash=cfg.content_hash(), trainable=cfg.trainable))
    return records, summary


# Student-t bound table (the table1 command)

def table1_cells(cfg: Table1Config) -> list[tuple[str, str, int]]:
    cells = [("plain_vi", "plain_vi", 1)]
    cells += [(f"uha_K{k}", "uha", k) for k in cfg.uha_Ks]
    cells += [(f"iw_K{k}", "iw", k) for k in cfg.iw_Ks]
    return cells


def table1_header(cfg: Table1Config) -> list[str]:
    cols = ["dim"]
    for label, _, _ in table1_cells(cfg):
        cols += [label, f"{label}_stderr"]
    return cols


def run_table1(cfg: Table1Config, writer: RecordWriter, csv_path: str | Path | None = None) -> list[dict]:
    """Plain VI, UHA and IW across dims; UHA and IW start from each seed's plain-VI q."""
    rows = []
    for dim in cfg.dims:
        target = StudentT(dim, cfg.nu)
        per_cell: dict[str, list] = {label: [] for label, _, _ in table1_cells(cfg)}
        for s in range(cfg.n_seeds):
            seed = seed_for(cfg.base_seed, s)
            vi = None
            for label, method, K in table1_cells(cfg):
                rec = {"kind": "table1_cell", "dim": dim, "cell": label, "method": method, "K": K,
                       "seed_index": s, "seed": seed, "status": "ok"}
                t0 = time.perf_counter()
                try:
                    if method == "plain_vi":
                        vi = fit_plain_vi(target, cfg.steps, cfg.learning_rates, cfg.batch_size,
                                          cfg.eval_draws, seed)
                        res = vi
                    else:
                        if vi is None:
                            raise RuntimeError("plain-VI initialization failed for this seed")
                        batch = (cfg.iw_batch_size or cfg.batch_size) if method == "iw" else cfg.batch_size
                        res, _ = train_cell(method, K, target, vi.params.q,
                                            trainable=("q", "eps", "eta") if method == "uha" else ("q",),
                                            steps=cfg.steps, learning_rates=cfg.learning_rates,
                                            batch_size=batch, eval_draws=cfg.eval_draws,
                                            seed=rng.derive_seed(seed, (label, 0)),
                                            init_eps=cfg.init_eps, init_eta=cfg.init_eta,
                                            eps_max=cfg.eps_max)
                    rec.update(final=_estimate_dict(res.estimate), params_after=res.params.realized(),
                               params=res.params.to_dict(), learning_rate=res.learning_rate)
                except Exception as exc:  # noqa: BLE001 - cell failures become NaN
                    rec.update(status="failed", error=f"{type(exc).__name__}: {exc}",
                               traceback=traceback.format_exc())
                rec["wall_clock"] = time.perf_counter() - t0
                per_cell[label].append(writer.append(rec))
                log.info("dim %d %s seed %d: %s", dim, label, s, rec.get("final", rec.get("error")))
        row = {"dim": dim}
        for label, _, _ in table1_cells(cfg):
            summary = summarize(per_cell[label], dim=dim, cell=label)
            writer.append(summary)
            pooled = summary["pooled"]
            row[label] = pooled["mean"] if pooled else math.nan
            row[f"{label}_stderr"] = pooled["stderr"] if pooled else math.nan
        rows.append(row)
    if csv_path is not None:
        write_table1_csv(cfg, rows, csv_path)
    return rows


def write_table1_csv(cfg: Table1Config, rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=table1_header(cfg))
        w.writeheader()
        for row in rows:
            w.writerow({k: (v if not (isinstance(v, float) and math.isnan(v)) else "nan")
                        for k, v in row.items()})


# subsets

def unique_subsets(subsets) -> list[tuple[str, ...]]:
    seen, out = set(), []
    for s in subsets:
        key = frozenset(s)
        if key in seen:
            log.warning("duplicate subset %s dropped", sorted(key))
            continue
        seen.add(key)
        out.append(tuple(g for g in ALL_GROUPS if g in key))
    return out


def run_subsets(cfg: SubsetsConfig, writer: RecordWriter, workers: int = 1) -> list[dict]:
    """One experiment per subset at matched seeds and initialization, sorted by pooled mean."""
    summaries = []
    for subset in unique_subsets(cfg.subsets):
        exp = ExperimentConfig.model_validate({**cfg.experiment.model_dump(), "trainable": list(subset)})
        _, summary = run_experiment(exp, writer, workers)
        summaries.append(summary)
    ranked = sorted(summaries, key=lambda s: -(s["pooled"]["mean"] if s["pooled"] else -math.inf))
    writer.append({"kind": "subsets_ranking",
                   "ranking": [{"trainable": s["trainable"], "pooled": s["pooled"]} for s in ranked]})
    return ranked


# extrapolation and moments

def _trained_records(records: list[dict], method: str | None = None) -> list[dict]:
    out = [r for r in records if r.get("kind") in ("run", "table1_cell") and r.get("status") == "ok"
           and r.get("params") is not None and (method is None or r.get("method") == method)]
    if not out:
        raise UsageError("record file holds no trained parameters")
    return out


def _target_of(record: dict) -> Target:
    if "config" in record:
        return build_target(TargetSpec.model_validate(record["config"]["target"]))
    return StudentT(record["dim"])


def run_extrapolate(record_path, K1: int, eval_draws: int, writer: RecordWriter) -> dict:
    """Carry each trained UHA record to K1 bridges and evaluate with the record's eval seed."""
    records = _trained_records(read_records(record_path), "uha")
    out, sources = [], []
    for r in records:
        params = AnnealParams.from_dict(r["params"])
        new = extrapolate_params(params, K1)
        target = _target_of(r)
        est = estimate_bound(BoundSampler("uha", new, target), eval_draws,
                             rng.derive_seed(r["seed"], ("eval", 0)))
        sources.append(estimate_from_dict(r["final"]))
        out.append(writer.append({"kind": "extrapolate", "source_K": params.n_bridges, "K": K1,
                                  "seed": r["seed"], "status": "ok", "final": _estimate_dict(est),
                                  "source_final": r["final"], "params_after": new.realized()}))
    src = pool_estimates(sources)
    return writer.append(summarize(out, kind="summary", method="uha_extrapolated", K=K1,
                                   source_pooled=_estimate_dict(src)))


def run_moments(record_path, n_samples: int, writer: RecordWriter, reference_path=None,
                seed_offset: int = 0) -> list[dict]:
    """Moment errors of final annealing states for each trained record."""
    records = _trained_records(read_records(record_path))
    ref = None
    if reference_path is not None:
        ref = ReferenceMoments.from_json(Path(reference_path).read_text())
    out = []
    for r in records:
        params = AnnealParams.from_dict(r["params"])
        if r.get("method") == "iw":
            params = AnnealParams.initial(params.dim, 1, q=params.q, trainable=("q",))
        target = _target_of(r)
        reference = ref or ReferenceMoments.from_target(target)
        mean_mae, var_mae = moment_error(params, target, None, n_samples, reference,
                                         seed=rng.derive_seed(r["seed"], ("moments", seed_offset)))
        out.append(writer.append({
            "kind": "moments", "method": r.get("method"), "K": params.n_bridges, "seed": r["seed"],
            "mean_mae": mean_mae, "var_mae": var_mae, "n_samples": n_samples,
            "reference_checksum": reference.checksum(), "reference_source": reference.source,
            "low_confidence": n_samples < LOW_CONFIDENCE_SAMPLES, "status": "ok"}))
    return out


def export_csv(record_path, csv_path) -> int:
    cols = ["kind", "method", "dim", "cell", "K", "seed", "status", "mean", "stderr", "n", "diverged",
            "mean_mae", "var_mae"]
    rows = []
    for r in read_records(record_path):
        est = r.get("final") or r.get("pooled") or {}
        row = {c: r.get(c) for c in cols}
        row.update({k: est.get(k) for k in ("mean", "stderr", "n", "diverged")})
        rows.append(row)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols)
    w.writeheader()
    w.writerows(rows)
    Path(csv_path).write_text(buf.getvalue())
    return len(rows)


__all__ = [
    "build_target",
    "seed_for",
    "fit_plain_vi",
    "train_cell",
    "run_seed",
    "run_experiment",
    "summarize",
    "run_table1",
    "table1_header",
    "write_table1_csv",
    "unique_subsets",
    "run_subsets",
    "run_extrapolate",
    "run_moments",
    "export_csv",
    "estimate_from_dict",
]
