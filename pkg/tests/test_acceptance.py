"""Acceptance criteria, one test each; every test prints a PASS/FAIL line."""
import time

import numpy as np
import pytest

from jetbundle.bundle import RefineConfig, bundle_scalar_product, refine
from jetbundle.cli import main
from jetbundle.corpus import EH_FAMILY, corpus_paths, parse
from jetbundle.expressions import ScalarExpression, jet_from_expression, jet_transport_error
from jetbundle.jets import Jet, jet_dim, jet_multiply
from jetbundle.oracle import FitConfig, eh_criterion, whitney_fit
from jetbundle.system import build_bundle, decide, load_problem, scalar_compat_check, spec_from_dict

pytestmark = pytest.mark.acceptance


@pytest.fixture
def report(capsys):
    def emit(number: int, title: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\nACCEPTANCE {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})")
        assert ok, detail

    return emit


def random_poly(rng, n: int, degree: int = 3, terms: int = 4) -> ScalarExpression:
    """Random polynomial in x1..xn with up to ``terms`` monomials of degree <= ``degree``."""
    parts = []
    for _ in range(terms):
        c = round(float(rng.uniform(-2, 2)), 3)
        factors = [f"x{int(rng.integers(n)) + 1}" for _ in range(int(rng.integers(0, degree + 1)))]
        parts.append(f"(mul {c} {' '.join(factors)})" if factors else str(c))
    return parse(f"(add {' '.join(parts)})")


def rel_close(a, b, rtol=1e-12) -> bool:
    return float(np.abs(a - b).max()) <= rtol * max(1.0, float(np.abs(a).max()), float(np.abs(b).max()))


def test_1_jet_ring_suite(report):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    checks = failures = 0
    for k in range(1000):
        n, m = int(rng.integers(1, 4)), int(rng.integers(0, 5))
        x = tuple(rng.uniform(-1, 1, n))
        dim = jet_dim(n, m)
        P, Q, R = (Jet(n, 1, m, x, rng.uniform(-5, 5, (1, dim))) for _ in range(3))
        kind = k % 4
        if kind == 0:
            ok = rel_close(jet_multiply(jet_multiply(P, Q), R).coeffs, jet_multiply(P, jet_multiply(Q, R)).coeffs)
        elif kind == 1:
            ok = rel_close(jet_multiply(P, Q).coeffs, jet_multiply(Q, P).coeffs)
        elif kind == 2:
            ok = rel_close(jet_multiply(P, Jet.constant([1.0], n, m, x)).coeffs, P.coeffs)
        else:
            F, G = random_poly(rng, n, 3), random_poly(rng, n, 3)
            lhs = jet_from_expression([ScalarExpression("mul", (F, G))], x, m).coeffs
            rhs = jet_multiply(jet_from_expression([F], x, m), jet_from_expression([G], x, m)).coeffs
            ok = rel_close(lhs, rhs)
        checks += 1
        failures += not ok
    elapsed = time.perf_counter() - t0
    report(1, "jet ring", failures == 0 and elapsed < 5.0, f"{checks} checks, {failures} failures, {elapsed:.2f}s")


def test_2_taylor_transport(report):
    t0 = time.perf_counter()
    F = [parse("(exp (add (mul 0.7 x1) (mul -0.4 x2)))")]
    x = np.array([0.2, -0.1])
    u = np.array([0.6, 0.8])
    m_hi, m_lo = 3, 2
    hs = [2.0 ** -k for k in range(2, 8)]  # five halvings
    tables = [jet_transport_error(F, x, x + h * u, m_hi, m_lo) for h in hs]
    worst = np.inf
    for alpha in tables[0]:
        need = 2.0 ** (m_hi - sum(alpha)) * 0.8
        ratios = [tables[i][alpha] / tables[i + 1][alpha] for i in range(len(hs) - 1)]
        worst = min(worst, min(ratios) / need)
    elapsed = time.perf_counter() - t0
    report(2, "Taylor transport", worst >= 1.0 and elapsed < 5.0, f"min ratio/required {worst:.3f}, {elapsed:.2f}s")


def test_3_epstein_hochster_agreement(report, corpus):
    t0 = time.perf_counter()
    rows, mismatches = [], []
    for key in EH_FAMILY:
        spec = load_problem(corpus / f"eh_{key}.json")
        label = eh_criterion(spec.f[0]).solvable
        engine = decide(spec).verdict == "solvable"
        fit = whitney_fit(build_bundle(spec), FitConfig(radii=spec.config.radii)).solvable
        rows.append((key, label, engine, fit))
        if not (label == engine == fit):
            mismatches.append(key)
    elapsed = time.perf_counter() - t0
    solvable = sum(r[1] for r in rows)
    detail = f"{len(rows)} systems, {solvable} solvable per criterion, mismatches {mismatches}, {elapsed:.0f}s"
    report(3, "Epstein-Hochster three-way agreement", not mismatches and elapsed < 300.0, detail)


def test_4_subbundle_and_section_preservation(report):
    worst_residual, dim_violations, systems = 0.0, 0, []
    for path in corpus_paths():
        spec = load_problem(path)
        sol = spec.source.get("solution")
        if not sol:
            continue
        F = [parse(s) for s in sol]
        keep: dict = {}
        dec = decide(spec, keep=keep)
        history = keep["history"]
        jets = [jet_from_expression(F, x, spec.m) for x in spec.domain.points]
        for B in history:
            worst_residual = max(worst_residual, max(Fb.distance(J) for Fb, J in zip(B.fibers, jets)))
        dims = np.array([B.dims() for B in history])
        dim_violations += int(np.sum(np.diff(dims, axis=0) > 0))
        systems.append((path.stem, dec.verdict, len(history) - 1))
    ok = worst_residual <= 1e-6 and dim_violations == 0 and systems
    detail = f"{len(systems)} systems, max membership residual {worst_residual:.2e}, dimension increases {dim_violations}"
    report(4, "subbundle chain and section preservation", bool(ok), detail)


def test_5_phi_compatibility(report):
    rng = np.random.default_rng(5)
    compat_fail, commute_checked, commute_fail, worst = [], [], [], 0.0
    for path in corpus_paths():
        spec = load_problem(path)
        for _ in range(50):
            phi = random_poly(rng, spec.n)
            f = [random_poly(rng, spec.n) for _ in spec.f]
            if not scalar_compat_check(spec.with_f(f), phi):
                compat_fail.append(path.stem)
        B = build_bundle(spec)
        if not B.proper:
            continue
        G, _ = refine(B, "strong", spec.config)
        if not G.proper:
            continue
        phi = random_poly(rng, spec.n)
        L, _ = refine(bundle_scalar_product(phi, B), "strong", spec.config)
        R = bundle_scalar_product(phi, G)
        res = 0.0
        for a, b in zip(L.fibers, R.fibers):
            if a.dim != b.dim:
                res = np.inf
                break
            span_gap = max(
                float(np.abs(a.span - (a.span @ b.span.T) @ b.span).max(initial=0.0)),
                float(np.abs(b.span - (b.span @ a.span.T) @ a.span).max(initial=0.0)),
            )
            res = max(res, a.distance(b.offset), b.distance(a.offset), span_gap)
        worst = max(worst, res)
        commute_checked.append(path.stem)
        if res > 1e-6:
            commute_fail.append(path.stem)
    ok = not compat_fail and not commute_fail and commute_checked
    detail = (
        f"compat failures {sorted(set(compat_fail))}; commutation on {len(commute_checked)} proper instances, "
        f"max residual {worst:.2e}, failures {commute_fail}"
    )
    report(5, "phi-compatibility and commutation", bool(ok), detail)


def test_6_degenerate_domains(report):
    pts = [[0.0, 0.0], [3.0, 0.0], [0.0, 3.0], [3.0, 3.0], [-3.0, 1.5]]
    spec = spec_from_dict(
        {"n": 2, "m": 1, "N": 1, "M": 1, "A": [["x1"]], "f": ["(mul x1 x2)"], "domain": {"points": pts}}
    )
    cfg = RefineConfig(radii=(1.0, 0.5, 0.25, 0.125))
    B = build_bundle(spec)
    G, rep = refine(B, "strong", cfg)
    identity = all(F.same_set(H, 0.0) and F.dim == H.dim for F, H in zip(B.fibers, G.fibers))
    grid = [[v] for v in np.linspace(-1, 1, 17).tolist()]
    dec = decide(spec_from_dict({"n": 1, "m": 0, "N": 1, "M": 1, "A": [["x"]], "f": ["1"], "domain": {"points": grid}}))
    located = dec.verdict == "unsolvable" and [f.point for f in dec.failures] == [[0.0]]
    detail = f"isolated refinement identity {identity}; A=(x), f=1 verdict {dec.verdict} at {[f.point for f in dec.failures]}"
    report(6, "degenerate-domain identities", identity and located, detail)


def _decide_outputs(path, threads, out_dir, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["decide", "--problem", str(path), "--threads", str(threads), "--out", str(out_dir)])
    stdout = capsys.readouterr().out
    return (exc.value.code, stdout, (out_dir / "decision.json").read_bytes(), (out_dir / "decision.png").read_bytes())


def test_7_determinism_across_threads(report, tmp_path, capsys):
    differing = []
    paths = corpus_paths()
    for path in paths:
        runs = [_decide_outputs(path, t, tmp_path / f"{path.stem}_{t}", capsys) for t in (1, 4, 8)]
        if not (runs[0] == runs[1] == runs[2]):
            differing.append(path.stem)
    report(7, "byte-identical decide output for --threads 1/4/8", not differing, f"{len(paths)} problems, differing {differing}")
