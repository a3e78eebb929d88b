"""Command-line entry point: decide, refine, oracle and jet."""
from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from .bundle import Bundle, RefineConfig, RefinementReport, refine
from .domain import DomainError
from .expressions import EvaluationError, ExpressionError, ScalarExpression, jet_from_expression
from .jets import ContractError, multi_indices
from .oracle import FitConfig, OracleSizeError, OracleVerdict, eh_criterion, whitney_fit
from .system import SCHEMA_VERSION, Decision, ProblemError, SystemSpec, build_bundle, decide, load_problem

EXIT_SOLVABLE, EXIT_UNSOLVABLE, EXIT_INCONCLUSIVE, EXIT_INPUT, EXIT_DISAGREE = 0, 1, 2, 3, 4
VERDICT_EXIT = {"solvable": EXIT_SOLVABLE, "unsolvable": EXIT_UNSOLVABLE, "inconclusive": EXIT_INCONCLUSIVE}
INPUT_ERRORS = (ProblemError, ContractError, ExpressionError, EvaluationError, DomainError, OracleSizeError)
EH_TAG = "epstein-hochster"


class InputError(click.ClickException):
    exit_code = EXIT_INPUT


def _load(path: str, k_bar, l_star, seed, threads) -> SystemSpec:
    try:
        spec = load_problem(path)
        over = {k: v for k, v in (("k_bar", k_bar), ("l_star", l_star), ("seed", seed), ("threads", threads)) if v is not None}
        return spec.with_config(**over) if over else spec
    except INPUT_ERRORS as err:
        raise InputError(str(err)) from err


def _problem_name(spec: SystemSpec, path: str) -> str:
    return spec.name or Path(path).stem


def _config_dict(cfg: RefineConfig) -> dict:
    # thread count never affects results, so it stays out of reports
    d = cfg.to_dict()
    d.pop("threads")
    return d


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, ensure_ascii=False) + "\n")


def _emit(rows: list[list]) -> None:
    for r in rows:
        click.echo("\t".join(str(v) for v in r))


def _plot_coords(points: np.ndarray) -> tuple[np.ndarray, str]:
    """First and last coordinates; 1-D domains are drawn on a line."""
    if points.shape[1] == 1:
        return np.column_stack([points[:, 0], np.zeros(len(points))]), "x1"
    return points[:, [0, -1]], f"x1 / x{points.shape[1]}"


def _figure_decision(path: Path, spec: SystemSpec, dec: Decision, final_dims: list[int]) -> None:
    from . import plotting

    xy, label = _plot_coords(spec.domain.points)
    mean_dims = [float(np.mean([d for d in t["dims"] if d >= 0] or [0])) for t in dec.trace if "dims" in t]
    emptied = [len(t["emptied"]) for t in dec.trace]
    fails = np.array([f.index for f in dec.failures], dtype=int)
    plotting.decision_figure(path, xy, label, np.array(final_dims), fails, emptied, mean_dims, dec.verdict)


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
def cli():
    """Decide C^m solvability of linear systems A F = f over sampled domains."""


def common(f):
    f = click.option("--threads", type=click.IntRange(min=1), default=None, help="Worker threads for refinement.")(f)
    f = click.option("--seed", type=click.IntRange(min=0), default=None, help="Seed for tuple subsampling.")(f)
    f = click.option("--l-star", "l_star", type=click.IntRange(min=1), default=None, help="Refinement iteration cap.")(f)
    f = click.option("--k-bar", "k_bar", type=click.IntRange(1, 3), default=None, help="Neighbors per tuple.")(f)
    f = click.option("--out", type=click.Path(file_okay=False), default=None, help="Directory for reports and figures.")(f)
    f = click.option("--problem", required=True, type=str, help="Problem JSON file.")(f)
    return f


@cli.command("decide")
@common
@click.option("--mode", type=click.Choice(["standard", "strong"]), default="strong", show_default=True)
def cmd_decide(problem, out, k_bar, l_star, seed, threads, mode):
    """Run the decision pipeline on one problem."""
    spec = _load(problem, k_bar, l_star, seed, threads)
    keep: dict = {}
    try:
        dec = decide(spec, mode=mode, keep=keep)
    except INPUT_ERRORS as err:
        raise InputError(str(err)) from err
    name = _problem_name(spec, problem)
    report = {
        "schema_version": SCHEMA_VERSION,
        "command": "decide",
        "problem": name,
        "mode": mode,
        "config": _config_dict(spec.config),
        "decision": dec.to_dict(),
    }
    _emit([["problem", "verdict", "iterations", "failures", "ambiguous"], [name, dec.verdict, dec.iterations, len(dec.failures), len(dec.ambiguous)]])
    for fp in dec.failures:
        _emit([["failure", fp.index, ",".join(repr(v) for v in fp.point), fp.tag, fp.reason, fp.iteration]])
    if out:
        out = Path(out)
        _write_json(out / "decision.json", report)
        _figure_decision(out / "decision.png", spec, dec, keep["final"].dims())
    sys.exit(VERDICT_EXIT[dec.verdict])


@cli.command("refine")
@common
@click.option("--iters", type=click.IntRange(min=0), required=True, help="Number of refinement passes.")
@click.option("--mode", type=click.Choice(["standard", "strong"]), default="strong", show_default=True)
def cmd_refine(problem, out, k_bar, l_star, seed, threads, iters, mode):
    """Refine a problem's bundle ``--iters`` times, dumping every iterate."""
    spec = _load(problem, k_bar, l_star, seed, threads)
    try:
        B: Bundle = build_bundle(spec)
    except INPUT_ERRORS as err:
        raise InputError(str(err)) from err
    out = Path(out) if out else None
    if out:
        _write_json(out / "bundle_000.json", B.to_dict())
    bundles, reports = [B], []
    _emit([["iteration", "proper", "changed", "emptied", "ambiguous", "total_dim"], [0, B.proper, 0, len(B.empty_points()), 0, _total_dim(B)]])
    for it in range(1, iters + 1):
        B, rep = refine(B, mode, spec.config, iteration=it)
        bundles.append(B)
        reports.append(rep)
        _emit([[it, rep.proper, rep.changed, len(rep.emptied), len(rep.ambiguous), _total_dim(B)]])
        if out:
            _write_json(out / f"bundle_{it:03d}.json", B.to_dict())
            _write_json(out / f"report_{it:03d}.json", {"schema_version": SCHEMA_VERSION, "command": "refine", **rep.to_dict()})
    if out:
        from . import plotting

        plotting.refinement_figure(out / "refinement.png", [b.dims() for b in bundles], _refine_verdict(B, reports))
    sys.exit(VERDICT_EXIT[_refine_verdict(B, reports)])


def _total_dim(B: Bundle) -> int:
    return int(sum(d for d in B.dims() if d >= 0))


def _refine_verdict(B: Bundle, reports: list[RefinementReport]) -> str:
    if not B.proper:
        return "unsolvable"
    if reports and reports[-1].ambiguous:
        return "inconclusive"
    return "solvable"


def _oracle_one(path: str, k_bar, l_star, seed, threads, with_decide: bool) -> dict:
    spec = _load(path, k_bar, l_star, seed, threads)
    try:
        B = build_bundle(spec)
        fit = whitney_fit(B, FitConfig(radii=spec.config.radii))
        eh = eh_criterion(spec.f[0]) if EH_TAG in spec.tags else None
        dec = decide(spec) if with_decide else None
    except INPUT_ERRORS as err:
        raise InputError(f"{path}: {err}") from err
    verdicts = {"whitney_fit": _label(fit)}
    if eh is not None:
        verdicts["eh_criterion"] = _label(eh)
    if dec is not None:
        verdicts["decide"] = dec.verdict
    return {
        "problem": _problem_name(spec, path),
        "verdicts": verdicts,
        "agree": len(set(verdicts.values())) == 1,
        "whitney_fit": fit.to_dict(),
        "eh_criterion": None if eh is None else eh.to_dict(),
    }


def _label(v: OracleVerdict) -> str:
    return "solvable" if v.solvable else "unsolvable"


@cli.command("oracle")
@click.option("--problem", "problems", required=True, multiple=True, type=str, help="Problem JSON file; repeatable.")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Directory for reports and figures.")
@click.option("--k-bar", "k_bar", type=click.IntRange(1, 3), default=None)
@click.option("--l-star", "l_star", type=click.IntRange(min=1), default=None)
@click.option("--seed", type=click.IntRange(min=0), default=None)
@click.option("--threads", type=click.IntRange(min=1), default=None)
@click.option("--decide/--no-decide", "with_decide", default=True, show_default=True, help="Also run the engine and compare.")
def cmd_oracle(problems, out, k_bar, l_star, seed, threads, with_decide):
    """Run the independent oracles and compare verdicts."""
    results = [_oracle_one(p, k_bar, l_star, seed, threads, with_decide) for p in problems]
    _emit([["problem", "decide", "whitney_fit", "eh_criterion", "agree", "witness"]])
    for r in results:
        v = r["verdicts"]
        witness = (r["eh_criterion"] or r["whitney_fit"])["witness"]
        _emit([[r["problem"], v.get("decide", "-"), v["whitney_fit"], v.get("eh_criterion", "-"), r["agree"], witness]])
    disagree = [r["problem"] for r in results if not r["agree"]]
    for name in disagree:
        click.echo(f"disagreement: {name}", err=True)
    if out:
        from . import plotting

        out = Path(out)
        body = [{k: r[k] for k in ("problem", "verdicts", "agree", "whitney_fit", "eh_criterion")} for r in results]
        _write_json(out / "oracle.json", {"schema_version": SCHEMA_VERSION, "command": "oracle", "results": body, "disagreements": disagree})
        plotting.oracle_figure(out / "oracle.png", [r["problem"] for r in results], [r["verdicts"] for r in results])
    if disagree:
        sys.exit(EXIT_DISAGREE)
    if len(results) == 1:
        sys.exit(VERDICT_EXIT[results[0]["verdicts"]["whitney_fit"]])
    sys.exit(0)


@cli.command("jet")
@click.option("--expr", "exprs", required=True, multiple=True, help="Expression in prefix form; repeatable for components.")
@click.option("--at", "at", required=True, help="Base point, comma separated.")
@click.option("--m", "m", type=click.IntRange(min=0), required=True, help="Jet order.")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Directory for the JSON report.")
def cmd_jet(exprs, at, m, out):
    """Print the m-jet of one or more expressions at a point."""
    try:
        x = [float(v) for v in at.split(",")]
        es = [ScalarExpression.parse(e) for e in exprs]
        J = jet_from_expression(es, x, m)
    except ValueError as err:
        raise InputError(str(err)) from err
    alphas = multi_indices(len(x), m)
    coeffs = J.coeffs.reshape(len(es), len(alphas))
    _emit([["component", "alpha", "coefficient"]])
    for c in range(len(es)):
        for a, v in zip(alphas, coeffs[c]):
            _emit([[c, ",".join(map(str, a)), repr(float(v))]])
    if out:
        _write_json(
            Path(out) / "jet.json",
            {"schema_version": SCHEMA_VERSION, "command": "jet", "point": x, "m": m, "alphas": [list(a) for a in alphas], "coeffs": coeffs.tolist()},
        )


def main(argv: list[str] | None = None) -> None:
    """Console entry; usage errors exit with the input-error code."""
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Abort:
        sys.exit(EXIT_INPUT)
    except click.ClickException as err:
        err.show()
        sys.exit(err.exit_code if isinstance(err, InputError) else EXIT_INPUT)
    sys.exit(0)


if __name__ == "__main__":
    main()
