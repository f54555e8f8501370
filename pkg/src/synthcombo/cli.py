"""Command line driver tying the library into reproducible runs.

Subcommands: simulate, design, fit, predict, evaluate, check.  Every run
writes a JSON manifest next to its primary output recording the tool
version, the full flag configuration, the seed, wall time, and SHA-256
hashes of all inputs and outputs, so two invocations can be compared
byte-for-byte.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from synthcombo import __version__
from synthcombo.baselines import (
    CompletionProblem,
    SynthComboPredictor,
    evaluate_mse,
    perunit_lasso,
    soft_impute,
)
from synthcombo.design import (
    AssumptionReport,
    DesignParams,
    DesignPlan,
    check_horizontal_span,
    check_incoherence,
    check_spectrum_and_subspace,
    design_sample,
)
from synthcombo.estimator import (
    FittedSynthCombo,
    IntervalsUnavailableError,
    Panel,
    RejectedUnitError,
    SynthComboConfig,
    _pilot_lambda,
    fit,
    model_from_dict,
    model_to_dict,
    predict,
    predict_interval,
)
from synthcombo.hypercube import Combination, character_matrix
from synthcombo.perm import load_rankings, perm_to_combination_panel
from synthcombo.simdata import (
    SimConfig,
    gen_truth,
    heavy_unit_ids,
    realize_panel,
    truth_from_dict,
    truth_to_dict,
)
from synthcombo.sparse_regress import NumericalError
from synthcombo._rng import substream

PANEL_HEADER = ["unit", "combo", "outcome"]
QUERY_HEADER = ["unit", "combo"]
PREDICTIONS_HEADER = ["unit", "combo", "estimate", "std_err"]
EVAL_HEADER = ["method", "seed", "mse"]
EVAL_METHODS = ("synthcombo", "lasso", "softimpute")


class UsageError(Exception):
    """Bad flags or flag combinations; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse's own complaints to exit 1
        raise UsageError(f"{self.prog}: {message}")


@dataclass(frozen=True)
class RunConfig:
    """One parsed invocation: the command plus its flag settings."""

    command: str
    args: dict
    seed: int

    def __post_init__(self) -> None:
        if self.seed < 0:
            raise UsageError("--seed must be >= 0")


@dataclass
class CommandResult:
    """What a command touched, for the manifest."""

    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    summary: str = ""


# ---------------------------------------------------------------------------
# file helpers


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(65536), b""):
            h.update(block)
    return h.hexdigest()


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path: str) -> dict:
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not valid JSON ({exc})") from None


def load_panel(path: str, p: int | None = None) -> Panel:
    """Parse the long-format panel CSV; complaints carry line numbers."""
    per_unit: dict[int, list[tuple[int, float]]] = {}
    max_mask = 0
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != PANEL_HEADER:
            raise ValueError(f"{path}:1: expected header {','.join(PANEL_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                unit = int(row[0])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad unit id {row[0]!r}") from None
            if unit < 0:
                raise ValueError(f"{path}:{lineno}: unit id must be >= 0")
            try:
                mask = int(row[1])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad combo {row[1]!r}") from None
            if mask < 0:
                raise ValueError(f"{path}:{lineno}: combo must be >= 0")
            if p is not None and mask >= (1 << p):
                raise ValueError(
                    f"{path}:{lineno}: combo {mask} exceeds 2^{p} - 1"
                )
            try:
                outcome = float(row[2])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad outcome {row[2]!r}") from None
            max_mask = max(max_mask, mask)
            per_unit.setdefault(unit, []).append((mask, outcome))
    if p is None:
        p = max(1, max_mask.bit_length())
    if not per_unit:
        raise ValueError(f"{path}: no data rows; a panel needs at least one observation")
    n_units = max(per_unit) + 1
    masks = []
    outs = []
    for u in range(n_units):
        rows = per_unit.get(u, [])
        masks.append(np.array([m for m, _ in rows], dtype=np.int64))
        outs.append(np.array([y for _, y in rows], dtype=np.float64))
    return Panel(p, tuple(masks), tuple(outs))


def save_panel(path: str, panel: Panel) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PANEL_HEADER)
        for u in range(panel.n_units):
            for mask, y in zip(panel.unit_masks[u], panel.unit_outcomes[u]):
                writer.writerow([u, int(mask), repr(float(y))])


def load_queries(path: str, p: int) -> list[tuple[int, int]]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != QUERY_HEADER:
            raise ValueError(f"{path}:1: expected header {','.join(QUERY_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ValueError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            try:
                unit = int(row[0])
                mask = int(row[1])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad query row {row!r}") from None
            if mask < 0 or mask >= (1 << p):
                raise ValueError(f"{path}:{lineno}: combo {mask} exceeds 2^{p} - 1")
            rows.append((unit, mask))
    return rows


def _value_matrix(alphas, combos: np.ndarray) -> np.ndarray:
    """Noiseless values, one column per coefficient vector."""
    cols = []
    for a in alphas:
        if a.nnz == 0:
            cols.append(np.zeros(combos.size))
        else:
            cols.append(character_matrix(combos, a.support_bits) @ a.coefficients)
    if not cols:
        return np.zeros((combos.size, 0))
    return np.column_stack(cols)


# ---------------------------------------------------------------------------
# commands


def _sim_config(ns, pattern: str) -> SimConfig:
    try:
        return SimConfig(
            n_units=ns.n_units,
            p=ns.p,
            r=ns.r,
            snr=ns.snr,
            pattern=pattern,
            base_nnz=ns.base_nnz,
            donor_count=ns.donor_count,
            donor_obs=ns.donor_obs,
            nondonor_obs=ns.nondonor_obs,
            seed=ns.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _design_params(ns, *, s: int | None = None) -> DesignParams:
    sparsity = s if s is not None else ns.r * math.ceil(ns.p**1.5)
    try:
        return DesignParams(
            n_units=ns.n_units,
            p=ns.p,
            r=ns.r,
            s=sparsity,
            gamma=ns.gamma,
            delta=ns.delta,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_simulate(ns) -> CommandResult:
    pattern = "confounded" if ns.preset == "observational" else "design"
    config = _sim_config(ns, pattern)
    truth = gen_truth(config)
    result = CommandResult()
    if ns.preset == "design":
        if ns.out_plan is None:
            raise UsageError("--preset design requires --out-plan")
        params = _design_params(ns)
        plan = design_sample(params, seed=ns.seed, preset="sims")
        panel = realize_panel(truth, plan, seed=ns.seed)
        _write_json(ns.out_plan, plan.to_dict())
        result.outputs.append(ns.out_plan)
    else:
        panel = realize_panel(
            truth,
            "confounded",
            seed=ns.seed,
            donor_count=ns.donor_count,
            donor_obs=ns.donor_obs,
            nondonor_obs=ns.nondonor_obs,
        )
    save_panel(ns.out_panel, panel)
    _write_json(ns.out_truth, truth_to_dict(truth))
    result.outputs = [ns.out_panel, ns.out_truth] + result.outputs
    n_obs = sum(int(m.size) for m in panel.unit_masks)
    result.summary = (
        f"{ns.preset} panel with {panel.n_units} units, {n_obs} observations"
    )
    return result


def cmd_design(ns) -> CommandResult:
    params = _design_params(ns, s=ns.s)
    plan = design_sample(params, seed=ns.seed, preset=ns.preset)
    _write_json(ns.out, plan.to_dict())
    return CommandResult(
        outputs=[ns.out],
        summary=(
            f"{len(plan.donor_ids)} donors, {plan.donor_combos.size} donor combos, "
            f"{plan.nondonor_combos.size} non-donor combos"
        ),
    )


def _estimator_config(ns) -> SynthComboConfig:
    donor_ids = None
    if ns.donor_ids != "auto":
        try:
            donor_ids = tuple(int(tok) for tok in ns.donor_ids.split(","))
        except ValueError:
            raise UsageError(
                f"--donor-ids must be 'auto' or comma-separated ints, got {ns.donor_ids!r}"
            ) from None
    try:
        return SynthComboConfig(
            horizontal=ns.horizontal.replace("-", "_"),
            cv_folds=ns.cv_folds,
            min_obs=ns.min_obs,
            donor_threshold=ns.donor_threshold,
            donor_ids=donor_ids,
            lambda_rule=ns.lambda_rule,
            lambda_fixed=ns.lambda_fixed,
            lambda_c=ns.lambda_c,
            cart_leaves=ns.cart_leaves,
            kappa_method=ns.kappa_method,
            kappa_fixed=ns.kappa_fixed,
            vertical_threshold=ns.vertical_threshold,
            seed=ns.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_fit(ns) -> CommandResult:
    config = _estimator_config(ns)
    if ns.rankings:
        panel = perm_to_combination_panel(load_rankings(ns.input))
    else:
        panel = load_panel(ns.input, p=ns.p)
    model = fit(panel, config)
    _write_json(ns.out, model_to_dict(model))
    return CommandResult(
        inputs=[ns.input],
        outputs=[ns.out],
        summary=(
            f"p={model.p}, {len(model.donor_ids)} donors, "
            f"{len(model.transfers)} transfers, {len(model.rejected_units)} rejected"
        ),
    )


def cmd_predict(ns) -> CommandResult:
    model = model_from_dict(_read_json(ns.model))
    queries = load_queries(ns.queries, model.p)
    with open(ns.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PREDICTIONS_HEADER)
        for unit, mask in queries:
            if unit < 0 or unit >= model.n_units:
                raise ValueError(
                    f"{ns.queries}: unit {unit} outside the fitted panel "
                    f"(0..{model.n_units - 1})"
                )
            combo = Combination(model.p, mask)
            estimate = predict(model, unit, combo)
            try:
                std_err = repr(float(predict_interval(model, unit, combo).std_err))
            except IntervalsUnavailableError:
                std_err = ""
            writer.writerow([unit, mask, repr(float(estimate)), std_err])
    return CommandResult(
        inputs=[ns.model, ns.queries],
        outputs=[ns.out],
        summary=f"{len(queries)} predictions",
    )


def _resize_plan(plan, donor_obs, nondonor_obs, seed):
    """Redraw a plan's combo sets at explicit sizes, same sampling scheme."""
    cube = 1 << plan.params.p
    donor_combos = plan.donor_combos
    nondonor_combos = plan.nondonor_combos
    if donor_obs is not None:
        if donor_obs > cube:
            raise UsageError(f"--donor-obs {donor_obs} exceeds the cube size {cube}")
        rng = substream(seed, "plan-resize-donor")
        donor_combos = tuple(
            sorted(rng.choice(cube, size=donor_obs, replace=False).tolist())
        )
    if nondonor_obs is not None:
        if nondonor_obs > cube:
            raise UsageError(
                f"--nondonor-obs {nondonor_obs} exceeds the cube size {cube}"
            )
        rng = substream(seed, "plan-resize-nondonor")
        nondonor_combos = tuple(
            sorted(rng.choice(cube, size=nondonor_obs, replace=False).tolist())
        )
    return DesignPlan(
        donor_ids=plan.donor_ids,
        donor_combos=donor_combos,
        nondonor_combos=nondonor_combos,
        params=plan.params,
    )


def _evaluate_seed(ns, methods: list[str], seed: int) -> dict[str, float]:
    pattern = "confounded" if ns.preset == "observational" else "design"
    config = SimConfig(
        n_units=ns.n_units,
        p=ns.p,
        r=ns.r,
        snr=ns.snr,
        pattern=pattern,
        base_nnz=ns.base_nnz,
        donor_count=ns.donor_count,
        donor_obs=ns.donor_obs,
        nondonor_obs=ns.nondonor_obs,
        seed=seed,
    )
    truth = gen_truth(config)
    if ns.preset == "design":
        params = _design_params(ns)
        plan = design_sample(params, seed=seed, preset="sims")
        # --donor-obs / --nondonor-obs rescale the plan's combo budgets;
        # the mechanism itself (uniform draws without replacement, shared
        # across the group) is unchanged
        if ns.donor_obs is not None or ns.nondonor_obs is not None:
            plan = _resize_plan(plan, ns.donor_obs, ns.nondonor_obs, seed)
        panel = realize_panel(truth, plan, seed=seed)
        donors = plan.donor_ids
    else:
        panel = realize_panel(
            truth,
            "confounded",
            seed=seed,
            donor_count=ns.donor_count,
            donor_obs=ns.donor_obs,
            nondonor_obs=ns.nondonor_obs,
        )
        donors = heavy_unit_ids(truth, seed, donor_count=ns.donor_count)
    if ns.p <= 14:
        combo_set = np.arange(1 << ns.p, dtype=np.int64)
    else:
        rng = substream(seed, "eval-shared")
        combo_set = np.sort(rng.choice(1 << ns.p, size=4096, replace=False)).astype(
            np.int64
        )
    out: dict[str, float] = {}
    for method in methods:
        if method == "synthcombo":
            cfg = SynthComboConfig(
                horizontal=ns.horizontal.replace("-", "_"),
                donor_ids=tuple(donors),
                kappa_method=ns.kappa_method,
                kappa_fixed=ns.kappa_fixed,
                lambda_c=ns.lambda_c,
                vertical_threshold=math.inf,
                seed=seed,
            )
            predictor = SynthComboPredictor(fit(panel, cfg))
        elif method == "lasso":
            # same pilot constant as the synthcombo donors, for a fair race
            predictor = perunit_lasso(
                panel, lambda sample: _pilot_lambda(sample, ns.lambda_c)
            )
        else:
            problem = CompletionProblem.from_panel(
                panel,
                eval_combos=combo_set,
                lam=ns.softimpute_lam,
                max_rank=None if ns.softimpute_lam > 0 else (ns.softimpute_rank or ns.r),
            )
            predictor = soft_impute(problem)
        out[method] = evaluate_mse(predictor, truth, combo_set=combo_set, seed=seed).aggregate
    return out


def cmd_evaluate(ns) -> CommandResult:
    methods = [tok.strip() for tok in ns.methods.split(",") if tok.strip()]
    if not methods:
        raise UsageError("--methods must name at least one method")
    for tok in methods:
        if tok not in EVAL_METHODS:
            raise UsageError(
                f"--methods: unknown method {tok!r}; choose from {','.join(EVAL_METHODS)}"
            )
    if ns.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    seeds = [ns.seed + i for i in range(ns.seeds)]
    workers = max(1, ns.threads)
    if workers == 1 or len(seeds) == 1:
        per_seed = [_evaluate_seed(ns, methods, s) for s in seeds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_seed = list(pool.map(lambda s: _evaluate_seed(ns, methods, s), seeds))
    with open(ns.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EVAL_HEADER)
        for seed, row in zip(seeds, per_seed):
            for method in methods:
                writer.writerow([method, seed, repr(row[method])])
    medians = {
        m: float(np.median([row[m] for row in per_seed])) for m in methods
    }
    parts = ", ".join(f"{m} median={medians[m]:.5g}" for m in methods)
    return CommandResult(outputs=[ns.out], summary=parts)


def cmd_check(ns) -> CommandResult:
    plan = DesignPlan.from_dict(_read_json(ns.plan))
    truth = truth_from_dict(_read_json(ns.truth))
    p = plan.params.p
    if truth.p != p:
        raise ValueError(
            f"plan is over p={p} but truth is over p={truth.p}"
        )
    if truth.n_units < plan.params.n_units:
        raise ValueError(
            f"plan expects {plan.params.n_units} units, truth has {truth.n_units}"
        )
    donor_alphas = [truth.alphas[u] for u in plan.donor_ids]
    span = check_horizontal_span(
        [set(int(b) for b in a.support_bits) for a in donor_alphas],
        plan.donor_combos,
    )
    mode = ns.incoherence_mode
    if mode == "auto":
        mode = "exact" if p <= 10 else "monte_carlo"
    inco = check_incoherence(
        plan.donor_combos,
        p,
        plan.params.s,
        mode=mode,
        n_pairs=ns.incoherence_pairs,
        cprime=ns.cprime,
        seed=ns.seed,
    )
    panel_matrix = _value_matrix(donor_alphas, plan.nondonor_combos)
    taken = set(int(m) for m in plan.nondonor_combos)
    rng = substream(ns.seed, "check-queries")
    candidates = rng.integers(0, 1 << p, size=max(4 * ns.query_count, 64))
    held_out = []
    for m in candidates:
        if int(m) not in taken and int(m) not in held_out:
            held_out.append(int(m))
        if len(held_out) >= ns.query_count:
            break
    queries = _value_matrix(donor_alphas, np.array(sorted(held_out), dtype=np.int64))
    vert = check_spectrum_and_subspace(panel_matrix, queries, r=plan.params.r)
    report = AssumptionReport(horizontal=span, incoherence=inco, vertical=vert)
    _write_json(ns.out, report.as_dict())
    return CommandResult(
        inputs=[ns.plan, ns.truth],
        outputs=[ns.out],
        summary=f"all_pass={report.all_pass}",
    )


# ---------------------------------------------------------------------------
# parser


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--seed", type=int, default=0, help="root seed (default 0)")
    sub.add_argument(
        "--threads",
        type=int,
        default=os.cpu_count() or 1,
        help="worker cap for parallel sections (default: hardware count)",
    )
    sub.add_argument(
        "--manifest",
        default=None,
        help="manifest path (default: <primary output>.manifest.json)",
    )


def _add_sim_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--p", type=int, required=True, help="number of interventions")
    sub.add_argument("--n-units", type=int, default=100)
    sub.add_argument("--r", type=int, default=3, help="rank of the coefficient matrix")
    sub.add_argument("--snr", type=float, default=1.0)
    sub.add_argument("--base-nnz", type=int, default=None,
                     help="nonzeros per base vector (default ceil(p^1.5))")
    sub.add_argument("--donor-count", type=int, default=None)
    sub.add_argument("--donor-obs", type=int, default=None)
    sub.add_argument("--nondonor-obs", type=int, default=None)
    sub.add_argument("--gamma", type=float, default=0.1,
                     help="design failure budget (design preset)")
    sub.add_argument("--delta", type=float, default=0.5,
                     help="design slack (design preset)")


def _add_estimator_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument(
        "--horizontal",
        choices=["lasso", "select-ridge", "cart"],
        default="lasso",
    )
    sub.add_argument("--cv-folds", type=int, default=5)
    sub.add_argument("--min-obs", type=int, default=None)
    sub.add_argument("--donor-threshold", type=float, default=None)
    sub.add_argument("--donor-ids", default="auto",
                     help="'auto' or comma-separated unit ids")
    sub.add_argument("--lambda-rule", choices=["pilot", "fixed", "path"],
                     default="pilot")
    sub.add_argument("--lambda-fixed", type=float, default=None)
    sub.add_argument("--lambda-c", type=float, default=4.0)
    sub.add_argument("--cart-leaves", type=int, default=16)
    sub.add_argument("--kappa-method", choices=["cv", "fixed"], default="cv")
    sub.add_argument("--kappa-fixed", type=int, default=None)
    sub.add_argument("--vertical-threshold", type=float, default=None)


def build_parser() -> _Parser:
    parser = _Parser(prog="synthcombo", description=__doc__)
    parser.add_argument("--version", action="version", version=f"synthcombo {__version__}")
    subs = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    sim = subs.add_parser("simulate", help="generate a synthetic panel + ground truth")
    sim.add_argument("--preset", choices=["observational", "design"], required=True)
    _add_sim_flags(sim)
    sim.add_argument("--out-panel", required=True)
    sim.add_argument("--out-truth", required=True)
    sim.add_argument("--out-plan", default=None,
                     help="plan JSON (required for --preset design)")
    _add_common(sim)
    sim.set_defaults(func=cmd_simulate, primary_out="out_panel")

    des = subs.add_parser("design", help="sample an experiment assignment plan")
    des.add_argument("--n-units", type=int, required=True)
    des.add_argument("--p", type=int, required=True)
    des.add_argument("--r", type=int, required=True)
    des.add_argument("--s", type=int, required=True, help="per-unit sparsity bound")
    des.add_argument("--gamma", type=float, default=0.1)
    des.add_argument("--delta", type=float, default=0.5)
    des.add_argument("--preset", choices=["sims"], default=None,
                     help="use the benchmark sizes instead of the theory sizes")
    des.add_argument("--out", required=True)
    _add_common(des)
    des.set_defaults(func=cmd_design, primary_out="out")

    fit_p = subs.add_parser("fit", help="fit the estimator to a panel CSV")
    fit_p.add_argument("--input", required=True)
    fit_p.add_argument("--rankings", action="store_true",
                       help="input is a rankings CSV (unit,ranks,outcome)")
    fit_p.add_argument("--p", type=int, default=None,
                       help="intervention count (default: inferred from combos)")
    _add_estimator_flags(fit_p)
    fit_p.add_argument("--out", required=True)
    _add_common(fit_p)
    fit_p.set_defaults(func=cmd_fit, primary_out="out")

    pred = subs.add_parser("predict", help="evaluate a fitted model at query combos")
    pred.add_argument("--model", required=True)
    pred.add_argument("--queries", required=True, help="CSV with header unit,combo")
    pred.add_argument("--out", required=True)
    _add_common(pred)
    pred.set_defaults(func=cmd_predict, primary_out="out")

    ev = subs.add_parser("evaluate", help="benchmark estimators on synthetic data")
    ev.add_argument("--methods", default="synthcombo,lasso,softimpute")
    ev.add_argument("--preset", choices=["observational", "design"],
                    default="observational")
    _add_sim_flags(ev)
    ev.add_argument("--seeds", type=int, default=5,
                    help="number of replicates (seeds seed..seed+n-1)")
    ev.add_argument(
        "--horizontal",
        choices=["lasso", "select-ridge"],
        default="select-ridge",
        help="donor-stage regression (default select-ridge: support "
        "selection followed by a least-squares refit, which avoids the "
        "shrinkage bias that hurts lasso at this noise level)",
    )
    ev.add_argument("--kappa-method", choices=["cv", "fixed"], default="cv")
    ev.add_argument("--kappa-fixed", type=int, default=None)
    ev.add_argument("--lambda-c", type=float, default=2.0)
    ev.add_argument("--softimpute-rank", type=int, default=None,
                    help="hard rank for completion (default: the true r)")
    ev.add_argument("--softimpute-lam", type=float, default=0.0,
                    help="soft shrinkage instead of hard rank when > 0")
    ev.add_argument("--out", required=True)
    _add_common(ev)
    ev.set_defaults(func=cmd_evaluate, primary_out="out")

    chk = subs.add_parser("check", help="run design assumption checkers on a plan")
    chk.add_argument("--plan", required=True)
    chk.add_argument("--truth", required=True)
    chk.add_argument("--cprime", type=float, default=1.0)
    chk.add_argument("--incoherence-mode",
                     choices=["auto", "exact", "monte_carlo"], default="auto")
    chk.add_argument("--incoherence-pairs", type=int, default=20000)
    chk.add_argument("--query-count", type=int, default=16)
    chk.add_argument("--out", required=True)
    _add_common(chk)
    chk.set_defaults(func=cmd_check, primary_out="out")

    return parser


def _echo_config(ns) -> dict:
    skip = {"func", "primary_out", "command"}
    out = {}
    for key, value in sorted(vars(ns).items()):
        if key in skip:
            continue
        out[key] = value
    return out


def run(argv: list[str]) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return 0 if exc.code in (0, None) else 1
    if getattr(ns, "command", None) is None:
        print("usage error: a command is required (see --help)", file=sys.stderr)
        return 1
    started = time.perf_counter()
    try:
        run_config = RunConfig(command=ns.command, args=_echo_config(ns), seed=ns.seed)
        result = ns.func(ns)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except RejectedUnitError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    # LinAlgError subclasses ValueError, so the numerical arm must come first
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    wall = time.perf_counter() - started
    manifest_path = ns.manifest
    if manifest_path is None:
        manifest_path = getattr(ns, ns.primary_out) + ".manifest.json"
    manifest = {
        "tool": "synthcombo",
        "version": __version__,
        "command": run_config.command,
        "config": run_config.args,
        "seed": run_config.seed,
        "wall_time_s": wall,
        "inputs": {os.path.basename(p): _sha256(p) for p in result.inputs},
        "outputs": {os.path.basename(p): _sha256(p) for p in result.outputs},
        "output_paths": [os.path.abspath(p) for p in result.outputs],
    }
    _write_json(manifest_path, manifest)
    print(f"{run_config.command}: {result.summary}")
    return 0


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
