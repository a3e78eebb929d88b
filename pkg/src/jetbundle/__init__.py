"""Jets, affine jet bundles over sampled domains, Glaeser refinement and
solvability decisions for linear systems ``A F = f``."""
from .bundle import Bundle, RefineConfig, RefinementReport, iterate_refine, refine, refine_fiber, whitney_form
from .domain import SampledDomain, StratumDescription, from_points, sample, shells
from .expressions import ScalarExpression, jet_from_expression
from .jets import ContractError, Jet, jet_multiply, jet_project, multi_indices
from .oracle import FitConfig, OracleVerdict, eh_criterion, verify_section, whitney_fit
from .subspace import AffineJetSet, PSDQuadraticForm, min_psd_over_affine, module_closure
from .system import Decision, SystemSpec, build_bundle, build_module, decide, load_problem, scalar_compat_check

__all__ = [
    "AffineJetSet",
    "Bundle",
    "ContractError",
    "Decision",
    "FitConfig",
    "Jet",
    "OracleVerdict",
    "PSDQuadraticForm",
    "RefineConfig",
    "RefinementReport",
    "SampledDomain",
    "ScalarExpression",
    "StratumDescription",
    "SystemSpec",
    "build_bundle",
    "build_module",
    "decide",
    "eh_criterion",
    "from_points",
    "iterate_refine",
    "jet_from_expression",
    "jet_multiply",
    "jet_project",
    "load_problem",
    "min_psd_over_affine",
    "module_closure",
    "multi_indices",
    "refine",
    "refine_fiber",
    "sample",
    "scalar_compat_check",
    "shells",
    "verify_section",
    "whitney_fit",
    "whitney_form",
]
