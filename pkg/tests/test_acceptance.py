"""The ten acceptance criteria, each at its stated tolerance.

Every test logs one ``ACCEPTANCE <k> PASS|FAIL`` line (collected in the
terminal summary by conftest) before asserting, so a failing criterion still
reports its measured numbers.  Flow-based criteria read the checked-in
configs under ``configs/acceptance``; the configs run once per session.
"""
import itertools
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import catalog_reward
from oracles import (cell_uniform_variance, dirichlet_policy, entropic_2x2, free_energy_value,
                     gaussian_weights, heat_variance)
from policyflow.cli import _run
from policyflow.config import build_reward, load_config
from policyflow.exact_ot import brute_force_entropic_ot, w2_exact_1d
from policyflow.flows import kl_trust_region_step
from policyflow.fokker_planck import fp_solve
from policyflow.langevin import init_particles, sample_variance, simulate
from policyflow.measures import (DiscreteMeasure, RewardField, first_variation, gibbs_policy,
                                 make_grid, total_variation)
from policyflow.sinkhorn import (SinkhornParams, cost_matrix, gibbs_kernel,
                                 gradient_wrt_first_marginal, sinkhorn, sinkhorn_cost,
                                 sinkhorn_log_domain)

ACCEPTANCE = Path(__file__).resolve().parent.parent / "configs" / "acceptance"
CSV_OUTPUTS = ("trace.csv", "measures.csv")


def run_configs(root):
    runs = {}
    for path in sorted(ACCEPTANCE.glob("*.json")):
        cfg = load_config(path)
        t0 = time.perf_counter()
        report, trace = _run(cfg, root / cfg.name, None)
        runs[cfg.name] = {"cfg": cfg, "report": report, "trace": trace,
                          "wall": time.perf_counter() - t0, "out": root / cfg.name}
    return runs


@pytest.fixture(scope="session")
def acceptance_runs(tmp_path_factory):
    return run_configs(tmp_path_factory.mktemp("acceptance"))


def random_pair(rng):
    n, m = (int(k) for k in rng.integers(2, 30, size=2))
    gx = make_grid(-1, 1, n)
    gy = make_grid(float(rng.uniform(-1.5, 0)), float(rng.uniform(0.5, 2)), m)
    return (DiscreteMeasure.from_weights(gx, rng.dirichlet(np.ones(n)) + 1e-3),
            DiscreteMeasure.from_weights(gy, rng.dirichlet(np.ones(m)) + 1e-3))


def test_1_gibbs_stationarity(acceptance_runs, acceptance_log):
    worst_tv = worst_res = slowest = 0.0
    cases = []
    for kind in ("quadratic", "bimodal", "linear"):
        for tag, beta in (("0p1", 0.1), ("0p5", 0.5)):
            run = acceptance_runs[f"gibbs_{kind}_beta{tag}"]
            cfg = run["cfg"]
            assert (cfg.grid.lo, cfg.grid.hi, cfg.grid.n, cfg.beta) == (-2.0, 2.0, 256, beta)
            assert cfg.stepper == "fokker-planck"
            tv = run["trace"].column("tv_to_gibbs")[-1]
            res = run["trace"].column("residual")[-1]
            worst_tv, worst_res = max(worst_tv, tv), max(worst_res, res)
            slowest = max(slowest, run["wall"])
            cases.append(tv < 1e-3 and res < 1e-6 and run["wall"] < 10)
    ok = len(cases) == 6 and all(cases)
    acceptance_log(1, ok, f"6 cases, max TV {worst_tv:.2e} (<1e-3), max residual {worst_res:.2e} "
                          f"(<1e-6), slowest {slowest:.1f}s (<10s)")
    assert ok


def test_2_three_way_agreement(acceptance_runs, acceptance_log):
    names = ("bimodal_jko_mirror", "bimodal_fokker_planck", "bimodal_langevin")
    runs = [acceptance_runs[n] for n in names]
    assert runs[2]["cfg"].langevin.N == 200_000
    cfg0 = runs[0]["cfg"]
    for run in runs[1:]:
        assert (run["cfg"].grid, run["cfg"].reward, run["cfg"].beta) == (cfg0.grid, cfg0.reward, cfg0.beta)
    finals = [run["trace"].final for run in runs]
    gibbs = gibbs_policy(build_reward(cfg0), cfg0.beta)
    pair = max(total_variation(a, b) for a, b in itertools.combinations(finals, 2))
    to_gibbs = max(total_variation(f, gibbs) for f in finals)
    wall = sum(run["wall"] for run in runs)
    ok = pair <= 0.03 and to_gibbs <= 0.03 and wall < 60
    acceptance_log(2, ok, f"max pairwise TV {pair:.2e}, max TV to Gibbs {to_gibbs:.2e} (<=0.03), "
                          f"runtime {wall:.1f}s (<60s)")
    assert ok


def test_3_free_energy_monotone(acceptance_runs, acceptance_log):
    steppers = {"jko-mirror", "jko-coupling", "kl-trust-region", "fokker-planck"}
    checked = bad = 0
    worst = 0.0
    seen = set()
    for run in acceptance_runs.values():
        if run["cfg"].stepper not in steppers:
            continue
        seen.add(run["cfg"].stepper)
        trace = run["trace"]
        assert np.all(np.diff(trace.steps) >= 1)
        drops = np.diff(trace.column("free_energy"))
        checked += len(drops)
        bad += int(np.sum(drops < -1e-9))
        worst = min(worst, float(drops.min()))
    ok = seen == steppers and bad == 0 and checked > 0
    acceptance_log(3, ok, f"{checked - bad}/{checked} recorded steps non-decreasing within 1e-9 "
                          f"(largest drop {-worst:.1e}) across {sorted(seen)}")
    assert ok


def test_4_sinkhorn_correctness(acceptance_log):
    rng = np.random.default_rng(4)
    marg = struct = 0.0
    for _ in range(200):
        mu, nu = random_pair(rng)
        eps = float(10 ** rng.uniform(-1.3, 0.5))
        C = cost_matrix(mu.grid, nu.grid)
        res = sinkhorn(mu, nu, C, SinkhornParams(eps, tol=1e-10))
        P = res.plan.matrix
        marg = max(marg, np.abs(P.sum(1) - mu.w).max(), np.abs(P.sum(0) - nu.w).max())
        scaled = res.u[:, None] * gibbs_kernel(C, eps) * res.v[None, :]
        struct = max(struct, float(np.max(np.abs(P - scaled) / scaled)))
    bf_err = scan_err = 0.0
    for _ in range(30):
        mu = DiscreteMeasure.from_weights(make_grid(-1, 1, 2), rng.dirichlet([2, 2]))
        nu = DiscreteMeasure.from_weights(make_grid(-0.5, 1.5, 2), rng.dirichlet([2, 2]))
        C = cost_matrix(mu.grid, nu.grid)
        P = sinkhorn(mu, nu, C, SinkhornParams(0.5, tol=1e-13)).plan.matrix
        bf_err = max(bf_err, np.abs(P - brute_force_entropic_ot(mu, nu, 0.5).matrix).max())
        scan_err = max(scan_err, np.abs(P - entropic_2x2(mu.w, nu.w, C.C, 0.5)).max())
    ok = marg <= 1e-9 and struct <= 1e-12 and bf_err <= 1e-6
    acceptance_log(4, ok, f"marginal error {marg:.1e} (<=1e-9), scaling structure {struct:.1e} "
                          f"(<=1e-12), 2x2 vs brute force {bf_err:.1e} (<=1e-6; scan oracle {scan_err:.1e})")
    assert ok


def test_5_entropic_bias_trend(acceptance_log):
    g = make_grid(-2, 2, 64)
    mu = DiscreteMeasure(g, gaussian_weights(g.centers, -0.5, 0.3))
    nu = DiscreteMeasure(g, gaussian_weights(g.centers, 0.5, 0.4))
    exact, _ = w2_exact_1d(mu, nu)
    C = cost_matrix(g)
    errors = []
    for eps in (1.0, 0.3, 0.1):
        errors.append(abs(sinkhorn_cost(mu, nu, eps, tol=1e-10).cost - exact))
    for eps in (0.03, 0.01):
        res = sinkhorn_log_domain(mu, nu, C, SinkhornParams(eps, tol=1e-10))
        assert res.converged
        errors.append(abs(res.cost - exact))
    rel = errors[-1] / exact
    monotone = all(a > b for a, b in zip(errors, errors[1:]))
    ok = monotone and rel < 0.02
    acceptance_log(5, ok, f"exact {exact:.4f}; relative errors "
                          + ", ".join(f"{e / exact:.2%}" for e in errors)
                          + f"; monotone={monotone}, last < 2%")
    assert ok


def test_6_gradient_fidelity(acceptance_log):
    rng = np.random.default_rng(6)
    worst = 0.0
    t = 1e-5
    for _ in range(20):
        mu, nu = random_pair(rng)
        eps = float(rng.uniform(0.05, 1.0))
        grad = gradient_wrt_first_marginal(sinkhorn_cost(mu, nu, eps, tol=1e-13))
        xi = rng.dirichlet(np.ones(mu.grid.n)) - mu.w  # sums to zero

        def W(w):
            return sinkhorn_cost(DiscreteMeasure(mu.grid, w), nu, eps, tol=1e-13).reg_cost

        fd = (W(mu.w + t * xi) - W(mu.w - t * xi)) / (2 * t)
        worst = max(worst, abs(fd - grad @ xi))
    ok = worst <= 1e-4
    acceptance_log(6, ok, f"20 instances, max |FD - <g, xi>| = {worst:.1e} (<=1e-4)")
    assert ok


def test_7_first_variation_fidelity(acceptance_log):
    rng = np.random.default_rng(7)
    worst = 0.0
    t = 1e-6
    for k in range(50):
        r = catalog_reward(("quadratic", "bimodal", "linear")[k % 3], n=40)
        beta = float(rng.uniform(0.05, 2.0))
        w = dirichlet_policy(rng, 40)
        xi = dirichlet_policy(rng, 40) - w
        exact = float(first_variation(DiscreteMeasure(r.grid, w), r, beta).density @ xi)
        fd = (free_energy_value(w + t * xi, r.r, beta, r.grid.h)
              - free_energy_value(w - t * xi, r.r, beta, r.grid.h)) / (2 * t)
        worst = max(worst, abs(fd - exact) / abs(exact))
    spread = 0.0
    for kind in ("quadratic", "bimodal", "linear"):
        r = catalog_reward(kind, n=256)
        for beta in (0.1, 0.5):
            spread = max(spread, float(np.ptp(first_variation(gibbs_policy(r, beta), r, beta).density)))
    ok = worst <= 1e-4 and spread <= 1e-10
    acceptance_log(7, ok, f"50 pairs, max relative Gateaux error {worst:.1e} (<=1e-4); "
                          f"spread at Gibbs {spread:.1e} (<=1e-10)")
    assert ok


def test_8_heat_flow(acceptance_log):
    g = make_grid(-1, 1, 256)
    flat = RewardField(g, np.zeros(g.n))
    beta, T = 0.05, 0.04
    pi0 = DiscreteMeasure(g, gaussian_weights(g.centers, 0.0, 0.1))
    var0 = cell_uniform_variance(pi0.w, g.centers, g.h)
    out = fp_solve(pi0, flat, beta, T).final
    pde = cell_uniform_variance(out.w, g.centers, g.h) / heat_variance(var0, beta, T) - 1

    g2 = make_grid(-2, 2, 64)
    e = init_particles(DiscreteMeasure.point_mass(g2, 32), 200_000, 8)
    v0 = sample_variance(e)
    e = simulate(e, RewardField(g2, np.zeros(g2.n)), 0.5, 0.1)
    sde = sample_variance(e) / heat_variance(v0, 0.5, 0.1) - 1
    ok = abs(pde) <= 0.02 and abs(sde) <= 0.05
    acceptance_log(8, ok, f"PDE variance error {pde:+.1e} (<=2%), Langevin N=2e5 error {sde:+.2%} (<=5%)")
    assert ok


def test_9_trust_region_limits(acceptance_log):
    r = catalog_reward("quadratic", n=128)
    beta = 0.5
    gibbs = gibbs_policy(r, beta)
    uniform = DiscreteMeasure.uniform(r.grid)
    long_tv = total_variation(kl_trust_region_step(uniform, r, beta, 1e6), gibbs)
    pi_k = DiscreteMeasure(r.grid, gaussian_weights(r.grid.centers, 0.8, 0.5))
    short_tv = max(total_variation(kl_trust_region_step(p, r, beta, 1e-4), p) for p in (uniform, pi_k))
    ok = long_tv <= 1e-6 and short_tv <= 1e-3
    acceptance_log(9, ok, f"tau=1e6 TV to Gibbs {long_tv:.1e} (<=1e-6), "
                          f"tau=1e-4 TV to pi_k {short_tv:.1e} (<=1e-3)")
    assert ok


def test_10_reproducibility(acceptance_runs, acceptance_log, tmp_path):
    again = run_configs(tmp_path)
    compared = differ = 0
    for name, run in acceptance_runs.items():
        for fname in CSV_OUTPUTS:
            compared += 1
            if (run["out"] / fname).read_bytes() != (again[name]["out"] / fname).read_bytes():
                differ += 1
    ok = compared == 2 * len(acceptance_runs) and differ == 0 and len(acceptance_runs) >= 13
    acceptance_log(10, ok, f"{compared - differ}/{compared} CSV files byte-identical "
                           f"over {len(acceptance_runs)} configs")
    assert ok
