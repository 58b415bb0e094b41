"""Acceptance suite: one PASS/FAIL line per criterion.

Printed reference values (information criteria, parameter counts and
values of time) are transcribed from the published tables of the AUB
and Swissmetro case studies.
"""

import itertools
import os
import time

import numpy as np
import pytest

from conftest import random_design, two_class_design
from gplccm.cli import main
from gplccm.data import CountUtilitySpec, enumerate_count_alternatives, load_features, load_panel
from gplccm.design import LinearUtilitySpec
from gplccm.evaluation import aic, bic, count_parameters, fold_assignments, kfold_cv, value_of_time
from gplccm.gp import fit_laplace, log_marginal_likelihood_and_gradient, ovr_fit
from gplccm.gp_lccm import FittedGpLccm, GpLccmConfig, fit_gp_lccm
from gplccm.kernels import Constant, Matern, SquaredExponential, kernel_gradients, pack, unpack
from gplccm.lccm import FittedLccm, MembershipParams, fit_lccm
from gplccm.mnl import ChoiceParams, weighted_loglik_and_gradient
from gplccm.models import ModelSpec, fit_model
from oracles import direct_mnl_fit, exact_gp_predictive, fd_gradient, relative_error

pytestmark = pytest.mark.filterwarnings("ignore::UserWarning")


@pytest.fixture
def verdict(request):
    """Write one PASS/FAIL line past output capture, then assert."""
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def check(name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'} [{name}] {detail}"
        if reporter is not None:
            reporter.write_line(line)
        else:
            print(line)
        assert ok, line

    return check


# (model, M, LL, AIC, BIC)
AUB_FITS = [
    ("LCCM K=2", 47, -4910.92, 9915.84, 10191.41),
    ("GBM-LCCM K=2", 61, -4911.08, 9944.16, 10301.82),
    ("GP-LCCM K=2", 44, -4877.73, 9843.46, 10101.44),
    ("GBM-LCCM K=3", 80, -4893.29, 9946.58, 10415.64),
    ("GP-LCCM K=3", 72, -4691.25, 9526.50, 9948.66),
]
SWISS_LCCM_FITS = [(2, 23, -5930.76, 11907.52, 12069.75), (3, 42, -5202.71, 10489.41, 10785.67),
           (4, 61, -4870.51, 9863.02, 10293.29), (5, 80, -4687.99, 9535.99, 10100.28)]
SWISS_GP_FITS = [(2, 10, -5916.43, 11852.86, 11923.39), (3, 18, -5176.06, 10388.11, 10515.08),
           (4, 24, -4878.84, 9805.68, 9974.97), (5, 30, -4825.55, 9711.11, 9922.72),
           (6, 36, -4742.13, 9556.26, 9810.19), (7, 42, -4649.20, 9382.39, 9678.65)]


def test_information_criteria(verdict):
    rows = [(f"AUB {m}", M, LL, A, B, 2600) for m, M, LL, A, B in AUB_FITS]
    rows += [(f"Swissmetro LCCM K={k}", M, LL, A, B, 8550) for k, M, LL, A, B in SWISS_LCCM_FITS]
    rows += [(f"Swissmetro GP-LCCM K={k}", M, LL, A, B, 8550) for k, M, LL, A, B in SWISS_GP_FITS]
    worst = max(max(abs(aic(M, LL) - A), abs(bic(M, LL, D) - B)) for _, M, LL, A, B, D in rows)
    verdict("AIC/BIC reproduction", worst <= 0.05, f"{len(rows)} rows, worst deviation {worst:.4f} (tol 0.05)")


def gp_model(K, template, kernel):
    """A GP-LCCM shell with K one-versus-rest classifiers on toy features."""
    rng = np.random.default_rng(K)
    S = rng.normal(size=(4 * K, 2))
    labels = np.arange(4 * K) % K
    ovr = ovr_fit(S, labels, kernel, K, optimize=False)
    resp = np.eye(K)[labels]
    return FittedGpLccm(K, ovr, tuple([template] * K), resp, labels, (0.0,), (0.0,))


SWISSMETRO = LinearUtilitySpec(asc=("Train", "Car"), generic=("TIME", "COST"))
AUB = CountUtilitySpec(
    modes=("ST", "SH", "Car"),
    total_trips=5,
    mode_attributes={"Car": ("cost_Car", "time_Car", "head"), "ST": ("cost_ST", "time_ST"), "SH": ("cost_SH", "time_SH")},
    fixed_constants={("ST", 0), ("SH", 0), ("Car", 0), ("Car", 5)},
)


def test_parameter_counting(verdict):
    assert AUB.n_params == 21
    matern15 = Matern(nu=1.5, fixed={"variance"})
    swiss = ChoiceParams.create(SWISSMETRO.names)
    got8 = [count_parameters(gp_model(k, swiss, matern15)) for k, *_ in SWISS_GP_FITS]
    want8 = [M for _, M, *_ in SWISS_GP_FITS]
    aub = ChoiceParams.create(AUB.names)
    got2 = count_parameters(gp_model(2, aub, Matern(nu=2.5, fixed={"variance"})))
    ok = got8 == want8 and got2 == 44
    verdict("Parameter counting", ok, f"Swissmetro GP-LCCM {got8} vs {want8}; AUB GP-LCCM K=2 {got2} vs 44")


def test_parameter_counting_lccm(verdict):
    swiss = ChoiceParams.create(SWISSMETRO.names)
    got = []
    for k, *_ in SWISS_LCCM_FITS:
        shell = FittedLccm(k, MembershipParams.zeros(k, 14), tuple([swiss] * k), np.ones((1, k)) / k, (0.0,), True)
        got.append(count_parameters(shell))
    want = [M for _, M, *_ in SWISS_LCCM_FITS]
    verdict("Parameter counting (LCCM)", got == want, f"{got} vs {want}")


# (label, beta_time, beta_cost, printed VOT in $/hr)
AUB_VOT = [
    ("LCCM c1 Car", -0.409, -0.0446, 6.11), ("LCCM c1 ST", -0.372, -0.101, 2.44), ("LCCM c1 SH", -0.252, -0.0400, 4.20),
    ("LCCM c2 Car", -0.658, -0.0456, 9.61), ("LCCM c2 ST", -0.646, -0.109, 3.96), ("LCCM c2 SH", -0.387, -0.0998, 2.59),
    ("GBM c1 Car", -0.409, -0.0442, 6.16), ("GBM c1 ST", -0.372, -0.101, 2.45), ("GBM c1 SH", -0.252, -0.0401, 4.19),
    ("GBM c2 Car", -0.653, -0.0462, 9.42), ("GBM c2 ST", -0.641, -0.110, 3.90), ("GBM c2 SH", -0.384, -0.0993, 2.58),
    ("GP c1 Car", -0.420, -0.0425, 6.59), ("GP c1 ST", -0.380, -0.105, 2.42), ("GP c1 SH", -0.255, -0.0399, 4.26),
]


def test_value_of_time(verdict):
    errs = {lab: abs(value_of_time(bt, bc, 1 / 1.5) - v) for lab, bt, bc, v in AUB_VOT}
    hits = sum(e <= 0.03 for e in errs.values())
    worst = max(errs, key=errs.get)
    detail = f"{hits}/{len(errs)} entries within 0.03 (need 9); worst {worst} off by {errs[worst]:.4f}"
    verdict("VOT reproduction", hits >= 9, detail)


def test_choice_set_enumeration(verdict):
    ok = len(enumerate_count_alternatives(3, 5)) == 21
    for m, t in itertools.product(range(1, 5), range(0, 7)):
        brute = sorted(c for c in itertools.product(range(t + 1), repeat=m) if sum(c) == t)
        ok &= sorted(enumerate_count_alternatives(m, t).alternatives) == brute
    verdict("Choice-set enumeration", ok, "21 alternatives for (3, 5); brute force agrees for m<=4, t<=6")


ORDERS = {2: 20, 3: 16, 4: 12, 5: 10, 6: 8}


def test_laplace_fidelity(verdict):
    rng = np.random.default_rng(11)
    start, worst = time.perf_counter(), 0.0
    Q = np.linspace(-3, 3, 7)
    for case in range(25):
        n = int(rng.integers(2, 7))
        X = rng.uniform(-2, 2, n)
        y = rng.integers(0, 2, n)
        v, ell = rng.uniform(0.5, 2.0, 2)
        k = SquaredExponential(v, ell) if case % 2 else Matern(variance=v, lengthscale=ell, nu=2.5)
        p = fit_laplace(k, X[:, None], y).predict(Q[:, None])
        worst = max(worst, np.max(np.abs(p - exact_gp_predictive(k, X, y, Q, order=ORDERS[n]))))
    took = time.perf_counter() - start
    verdict("Laplace fidelity", worst <= 0.02 and took < 60, f"25 problems, worst |dp| {worst:.4f} (tol 0.02), {took:.1f}s")


KERNEL_VARIANTS = {
    "se": SquaredExponential(1.0, 1.0),
    "se_ard": SquaredExponential(1.0, (1.0, 1.0)),
    "matern15": Matern(nu=1.5),
    "matern25": Matern(nu=2.5),
    "matern25_ard": Matern(lengthscale=(1.0, 1.0), nu=2.5),
    "constant": Constant(1.0),
    "constant+matern": Constant(1.0) + Matern(nu=2.5),
    "constant*se": Constant(1.0) * SquaredExponential(1.0, 1.0),
}


def kernel_fd(spec, S, h=1e-3):
    """Five-point central differences; a tiny gradient next to O(1) kernel
    entries would otherwise sit below the two-point rounding floor."""
    theta = pack(spec)
    out = []
    for j in range(len(theta)):
        e = np.zeros_like(theta)
        e[j] = h
        K = {m: unpack(spec, theta + m * e)(S) for m in (-2, -1, 1, 2)}
        out.append((K[-2] - 8 * K[-1] + 8 * K[1] - K[2]) / (12 * h))
    return out


def test_gradient_suites(verdict):
    rng = np.random.default_rng(5)
    start = time.perf_counter()
    kern = {}
    for name, base in KERNEL_VARIANTS.items():
        worst = 0.0
        for _ in range(50):
            spec = unpack(base, pack(base) + rng.normal(0, 0.4, len(pack(base))))
            S = rng.normal(size=(int(rng.integers(2, 9)), 2))
            for a, b in zip(kernel_gradients(spec, S), kernel_fd(spec, S)):
                worst = max(worst, relative_error(a, b))
        kern[name] = worst
    lml = 0.0
    bases = list(KERNEL_VARIANTS.values())
    for i in range(25):
        base = bases[i % len(bases)]
        spec = unpack(base, pack(base) + rng.normal(0, 0.3, len(pack(base))))
        S = rng.normal(size=(6, 2))
        y = rng.integers(0, 2, 6)
        _, g = log_marginal_likelihood_and_gradient(spec, S, y)
        fd = fd_gradient(lambda th: log_marginal_likelihood_and_gradient(unpack(spec, th), S, y)[0], pack(spec), 1e-5)
        lml = max(lml, relative_error(g, fd))
    mnl = 0.0
    for _ in range(50):
        d = random_design(rng, n_persons=3, n_scen=2, n_alt=3, n_par=4, availability=True)
        w = rng.random(3) * 2
        p = ChoiceParams.create(d.names, rng.normal(size=4))
        _, g = weighted_loglik_and_gradient(d, p, w)
        fd = fd_gradient(lambda b: weighted_loglik_and_gradient(d, p.with_beta(b), w)[0], p.beta, 1e-6)
        mnl = max(mnl, relative_error(g, fd))
    took = time.perf_counter() - start
    ok = max(kern.values()) < 1e-5 and lml < 1e-4 and mnl < 1e-5 and took < 60
    detail = (
        f"(a) kernels worst {max(kern.values()):.2e} over {len(kern)}x50; (b) LML worst {lml:.2e} over 25; "
        f"(c) weighted MNL worst {mnl:.2e} over 50; {took:.1f}s"
    )
    verdict("Gradient suites", ok, detail)


def test_degenerate_equivalences(verdict):
    rng = np.random.default_rng(50)
    d = random_design(rng, n_persons=50, n_scen=3)
    S = rng.normal(size=(50, 2))
    oracle, ll = direct_mnl_fit(d)
    lccm = fit_lccm(d, S, 1, restarts=1)
    gp = fit_gp_lccm(d, S, 1, Matern(nu=2.5))
    dll = max(abs(lccm.marginal_loglik - ll), abs(gp.marginal_loglik - ll))
    dpar = max(np.max(np.abs(lccm.betas[0].beta - oracle)), np.max(np.abs(gp.betas[0].beta - oracle)))
    verdict("Degenerate equivalences", dll <= 1e-8 and dpar <= 1e-4, f"|dLL| {dll:.2e} (tol 1e-8), |dbeta| {dpar:.2e} (tol 1e-4)")


def test_em_monotonicity(verdict):
    worst = np.inf
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        d, S, _ = two_class_design(rng, n_persons=50, n_scen=4)
        fit = fit_lccm(d, S, 2, seed=seed, restarts=2)
        worst = min(worst, np.min(np.diff(fit.trace)))
    mstep = np.inf
    for seed in range(3):
        rng = np.random.default_rng(200 + seed)
        d, S, _ = two_class_design(rng, n_persons=40, n_scen=4)
        fit = fit_gp_lccm(d, S, 2, Matern(nu=2.5), seed=seed, config=GpLccmConfig(restarts=2, hyper_restarts=1))
        mstep = min(mstep, min(after - before for it in fit.mstep_objectives for before, after in it))
    ok = worst >= -1e-9 and mstep >= 0
    verdict("EM monotonicity", ok, f"LCCM smallest trace step {worst:.2e} over 10 fixtures; GP M-step smallest gain {mstep:.2e}")


@pytest.fixture(scope="module")
def recovery(tmp_path_factory):
    out = tmp_path_factory.mktemp("recovery")
    start = time.perf_counter()
    assert main(["simulate", "--seed", "7", "--out", str(out)]) == 0
    panel = load_panel(out / "choices.csv")
    features = load_features(out / "persons.csv", "person_id", ["s1", "s2"])
    utility = LinearUtilitySpec(generic=("x1", "x2"))
    feats = ("s1", "s2")
    gp = ModelSpec("gp-lccm", utility, 2, Matern(nu=2.5), feats, feats, restarts=5)
    lccm = ModelSpec("lccm", utility, 2, None, feats, feats, restarts=5)
    fitted = fit_model(gp, panel, features, seed=1)
    folds = fold_assignments(panel.n_persons, 5, 11)
    cv = {s.kind: kfold_cv(s, panel, features, folds=folds, seed=3) for s in (gp, ModelSpec("mnl", utility), lccm)}
    return panel, fitted, cv, time.perf_counter() - start


def test_synthetic_recovery(verdict, recovery):
    panel, fitted, cv, took = recovery
    B = np.array([b.beta for b in fitted.betas])
    truth = np.array([[-2.0, 1.0], [1.0, -2.0]])
    err = min(np.max(np.abs(B - truth)), np.max(np.abs(B[::-1] - truth)))
    g, m, lc = (cv[k].mean_fold_loglik for k in ("gp-lccm", "mnl", "lccm"))
    ok = panel.n_persons == 500 and err <= 0.15 and g > m and g > lc and took < 600
    detail = (
        f"max |beta error| {err:.3f} (tol 0.15); 5-fold mean LL GP {g:.1f} > MNL {m:.1f}, LCCM {lc:.1f}; {took:.0f}s"
    )
    verdict("Synthetic recovery", ok, detail)


def test_convergence_contract(verdict, recovery):
    _, fitted, _, _ = recovery
    trace = fitted.model.marginal_trace
    rng = np.random.default_rng(9)
    d, S, _ = two_class_design(rng, n_persons=60, n_scen=4)
    cfg = GpLccmConfig(restarts=2, hyper_restarts=1)
    a = fit_gp_lccm(d, S, 2, Matern(nu=2.5), seed=5, config=cfg)
    b = fit_gp_lccm(d, S, 2, Matern(nu=2.5), seed=5, config=cfg)
    la = fit_lccm(d, S, 2, seed=5, restarts=2)
    lb = fit_lccm(d, S, 2, seed=5, restarts=2)
    terminated = all(
        f.converged and abs(t[-1] - t[-2]) < 1e-4 for f, t in ((fitted.model, trace), (a, a.marginal_trace), (la, la.trace))
    )
    identical = (
        a.marginal_trace == b.marginal_trace
        and np.array_equal(a.responsibilities, b.responsibilities)
        and all(np.array_equal(x.beta, y.beta) for x, y in zip(a.betas, b.betas))
        and la.trace == lb.trace
    )
    detail = f"final |dLL| {abs(trace[-1] - trace[-2]):.1e} on the recovery fit; repeated seeded fits bit-identical: {identical}"
    verdict("Convergence contract", terminated and identical, detail)


def test_swissmetro_soft_diagnostic(request):
    """Reported, never asserted: needs the public data prepared as a run config."""
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")
    path = os.environ.get("GPLCCM_SWISSMETRO_CONFIG")
    if not path:
        line = "SKIPPED [Swissmetro soft diagnostic] set GPLCCM_SWISSMETRO_CONFIG to a run config to report it"
    else:
        import json
        from pathlib import Path

        from gplccm.cli import _load_inputs, build_spec

        cfg = json.loads(Path(path).read_text())
        panel, features, *_ = _load_inputs(cfg, Path(path).resolve().parent)
        train = fold_assignments(panel.n_persons, 5, int(cfg.get("seed", 0)))
        keep = np.sort(np.concatenate(train[1:]))
        spec = build_spec({**cfg, "model": {**cfg.get("model", {}), "kind": "lccm"}}, None, 2)
        fitted = fit_model(spec, panel.subset(keep), features, 0)
        gap = abs(fitted.marginal_loglik / -5930.76 - 1)
        line = f"INFO [Swissmetro soft diagnostic] LCCM K=2 training LL {fitted.marginal_loglik:.2f}, {gap:.1%} from -5930.76"
    if reporter is not None:
        reporter.write_line(line)
