"""Acceptance criteria 1-13, each printed as one pass/fail line in the terminal summary."""

import json
import time
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest
from scipy.special import ndtri

from sobolev_ipm.autodiff import MlpCritic, grad_params_of_gradnorm, param_finite_difference, sobolev_constraint
from sobolev_ipm.autodiff.nets import LinearCritic
from sobolev_ipm.cli import main
from sobolev_ipm.densities import Categorical, Gaussian, mu_average
from sobolev_ipm.descent import sobolev_descent
from sobolev_ipm.gan import ALMState, GanConfig, alm_critic_step, sample_generator, train
from sobolev_ipm.grid import support_grid
from sobolev_ipm.ipm import (
    FourierFeatures,
    LinearFeatures,
    cramer_1d,
    fisher_ipm,
    restricted_ipm,
    sobolev_ipm_cdf_form,
    sobolev_ipm_conditional_form,
    wasserstein1_1d,
)
from sobolev_ipm.pde import mass_region, pde_residual, solve_critic_pde, stein_identity_check
from sobolev_ipm.seqgen import TextGanConfig, train_text_gan
from sobolev_ipm.ssl import SSLConfig, train_ce_only, train_ssl

P2 = Gaussian([1.0, 0.0], [[1.9, 0.8], [0.8, 1.3]])
Q2 = Gaussian([1.0, -2.0], [[1.9, -0.8], [-0.8, 1.3]])
MU2 = mu_average(P2, Q2)
CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def rel(a, b):
    return abs(a - b) / max(abs(a), abs(b))


def test_c01_point_masses(record):
    t = time.perf_counter()
    p, q = Categorical([0.0], [1.0]), Categorical([3.0], [1.0])
    c, w = cramer_1d(p, q).value, wasserstein1_1d(p, q).value
    f2 = fisher_ipm(p, q, "counting").meta["squared"]
    dt = time.perf_counter() - t
    ok = abs(c - 3) <= 1e-9 and abs(w - 3) <= 1e-9 and f2 == 2.0 and dt < 1.0
    record(1, ok, f"cramer={c!r} w1={w!r} fisher^2={f2!r} in {dt:.3f}s")
    assert ok


def test_c02_form_equivalence(record):
    t = time.perf_counter()
    grid = support_grid([P2, Q2], 256)
    a = sobolev_ipm_cdf_form(P2, Q2, MU2, grid).value
    b = sobolev_ipm_conditional_form(P2, Q2, MU2, grid).value
    dt = time.perf_counter() - t
    ok = rel(a, b) <= 1e-3 and dt < 120
    record(2, ok, f"cdf={a:.6g} conditional={b:.6g} rel={rel(a, b):.2e} in {dt:.1f}s")
    assert ok


def _svg_structure(svg: Path, p_mean, q_mean) -> tuple[bool, str]:
    """Heatmap sign under the P and Q markers and quiver direction between them."""
    root = ET.parse(svg).getroot()
    tag = lambda e: e.tag.rsplit("}", 1)[-1]
    heat = [e for e in root.iter() if tag(e) == "rect" and e.get("class") == "heat"]
    circles = [e for e in root.iter() if tag(e) == "circle"]
    quiver = [e for e in root.iter() if tag(e) == "line" and e.get("class") == "quiver"]
    # markers are emitted P then Q
    (px, py), (qx, qy) = [(float(c.get("cx")), float(c.get("cy"))) for c in circles[:2]]

    def fill_at(x, y):
        for r in heat:
            x0, y0 = float(r.get("x")), float(r.get("y"))
            if x0 <= x <= x0 + float(r.get("width")) and y0 <= y <= y0 + float(r.get("height")):
                f = r.get("fill")
                return int(f[1:3], 16), int(f[5:7], 16)
        raise AssertionError("no heatmap cell under marker")

    red_p, blue_p = fill_at(px, py)
    red_q, blue_q = fill_at(qx, qy)
    positive_p = red_p == 255 and blue_p < 255
    negative_q = blue_q == 255 and red_q < 255
    # arrows in the band between the modes should point from Q toward P (up in data, -y in pixels)
    lo, hi = min(py, qy), max(py, qy)
    dys = [float(e.get("y2")) - float(e.get("y1")) for e in quiver
           if lo <= float(e.get("y1")) <= hi and abs(float(e.get("x1")) - px) < 60]
    toward_p = len(dys) > 0 and np.mean(dys) * np.sign(py - qy) > 0
    ok = positive_p and negative_q and toward_p
    return ok, f"svg lobes P+={positive_p} Q-={negative_q} arrows Q->P={toward_p} ({len(dys)} arrows)"


def test_c03_pde_triangle(tmp_path, record):
    assert main(["pde", "--config", str(CONFIGS / "two_gaussians.cfg"), "--out", str(tmp_path)]) == 0
    s = json.loads((tmp_path / "pde.json").read_text())
    s_pde, s_cdf, s_int = s["S"], s["S_cdf_form"], s["integral_f_star_P_minus_Q"]
    pairs = {"pde~cdf": rel(s_pde, s_cdf), "pde~int": rel(s_pde, s_int), "cdf~int": rel(s_cdf, s_int)}
    energy = s["E_mu_grad_f_star_sq"]
    svg_ok, svg_detail = _svg_structure(tmp_path / "critic.svg", P2.mean, Q2.mean)
    ok = (max(pairs.values()) <= 0.02 and abs(energy - 1) <= 1e-2 and s["pde_residual"] <= 1e-8 and svg_ok)
    detail = (f"S_pde={s_pde:.6g} S_cdf={s_cdf:.6g} int={s_int:.6g} "
              + " ".join(f"{k}={v:.2e}" for k, v in pairs.items())
              + f" E|grad f*|^2={energy:.5f} residual={s['pde_residual']:.1e} {svg_detail}")
    record(3, ok, detail)
    assert ok


def test_c04_1d_reduction(record):
    p, q = Gaussian([0.0], [[1.0]]), Gaussian([1.0], [[1.5]])
    mu = mu_average(p, q)
    grid = support_grid([p, q], 4096)
    sol = solve_critic_pde(p, q, mu, grid)
    x = grid.points()
    exact = (q.cdf(x) - p.cdf(x)) / mu.pdf(x)
    err = float(np.max(np.abs(sol.f_hat.gradient().values[:, 0] - exact)[mass_region(grid, mu.pdf(x), 0.99)]))
    record(4, err <= 1e-3, f"sup error {err:.2e} over the 99% mass interval")
    assert err <= 1e-3


def test_c05_stein(record):
    devs = []
    for n in (64, 128, 256):
        sol = solve_critic_pde(P2, Q2, MU2, n)
        devs.append(stein_identity_check(sol.f_star, P2, Q2, MU2, sol.S))
    ok = devs[-1] <= 5e-2 and devs[1] <= devs[0] / 2 and devs[2] <= devs[1] / 2
    record(5, ok, "deviation at 64/128/256: " + ", ".join(f"{d:.3e}" for d in devs))
    assert ok


def test_c06_restricted_monotone(record):
    grid = support_grid([P2, Q2], 128)
    s_pde = solve_critic_pde(P2, Q2, MU2, grid).S
    s_cdf = sobolev_ipm_cdf_form(P2, Q2, MU2, grid).value
    # per-axis std of the average measure
    sigma = np.sqrt([1.9, 2.3])
    ok, rows = True, []
    for seed in range(5):
        feats = FourierFeatures.random(256, grid, 4.0 / sigma, np.random.default_rng(seed))
        vals = [restricted_ipm(feats.subset(k), P2, Q2, MU2, grid=grid).result.value for k in (16, 64, 256)]
        gaps = [s_pde - v for v in vals]
        ok &= all(v <= s_pde + 1e-4 and v <= s_cdf + 1e-4 for v in vals)
        ok &= gaps[0] > gaps[1] > gaps[2]
        rows.append("/".join(f"{v:.4f}" for v in vals))
    record(6, ok, f"S_pde={s_pde:.6f}; restricted 16/64/256 per seed: " + " ".join(rows))
    assert ok


def test_c07_double_backward(record):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(10):
        depth = int(rng.integers(1, 3))
        widths = tuple(int(w) for w in rng.integers(4, 65, size=depth))
        critic = MlpCritic(int(rng.integers(1, 4)), widths, rng=rng)
        x = rng.standard_normal((8, critic.input_dim))
        analytic = np.concatenate([g.ravel() for g in grad_params_of_gradnorm(critic, x)])
        numeric = param_finite_difference(critic, lambda: sobolev_constraint(critic, x, create_graph=False))
        worst = max(worst, float(np.max(np.abs(analytic - numeric)) / np.max(np.abs(numeric))))
    record(7, worst <= 1e-4, f"worst relative error {worst:.2e} over 10 tanh MLPs")
    assert worst <= 1e-4


def _quantile_batch(g, n):
    z = ndtri((np.arange(n) + 0.5) / n)
    z = (z - z.mean()) / z.std()
    return (g.mean[0] + np.sqrt(g.cov[0, 0]) * z)[:, None]


def test_c08_alm_oracle(record):
    p, q = Gaussian([1.0], [[1.0]]), Gaussian([-0.5], [[2.0]])
    mu = mu_average(p, q)
    errs = {}
    for kind, intercept in (("sobolev", False), ("fisher", True)):
        oracle = restricted_ipm(LinearFeatures(1, intercept), p, q, mu, norm=kind, grid=4097).coef
        c = LinearCritic([0.1], 0.0)
        st = ALMState(c, None, kind=kind, rho=0.1, lr=0.03, n_critic=1, batch=256)
        real, fake = _quantile_batch(p, 256), _quantile_batch(q, 256)
        for _ in range(2000):
            alm_critic_step(st, real, fake)
        got = np.r_[c.w.data, c.b.data][: len(oracle)]
        errs[kind] = float(np.max(np.abs(got - oracle)))
    ok = max(errs.values()) <= 1e-3
    record(8, ok, " ".join(f"{k} max|a-a*|={v:.2e}" for k, v in errs.items()))
    assert ok


def test_c09_descent(record):
    t = time.perf_counter()
    res = sobolev_descent(Gaussian([2.0], [[1.0]]), Gaussian([-2.0], [[1.0]]), 512, 200, 0.1,
                          np.random.default_rng(0))
    dt = time.perf_counter() - t
    e = np.array(res.energies)
    mean = float(res.final.positions.mean())
    decay = 1 - e[-1] / e[0]
    sm = np.convolve(e, np.ones(5) / 5, mode="valid")
    worst = float(np.max(sm[1:] / sm[:-1]))
    # nonincreasing up to 5% relative noise per step
    ok = abs(mean - 2) <= 0.2 and decay >= 0.9 and worst <= 1.05 and dt < 300
    record(9, ok, f"final mean {mean:.4f} decay {decay:.4f} worst smoothed step ratio {worst:.4f} in {dt:.0f}s")
    assert ok


@pytest.mark.slow
def test_c10_toy_gan(record):
    t = time.perf_counter()
    cfg = GanConfig(P2, seed=0, kind="sobolev", rule="average", iters=20000, lr=1e-4, rho=1e-3)
    state, hist = train(cfg)
    dt = time.perf_counter() - t
    x = sample_generator(state.generator, 100_000, np.random.default_rng(123))
    mean_err = float(np.linalg.norm(x.mean(axis=0) - P2.mean))
    cov_err = float(np.linalg.norm(np.cov(x.T) - P2.cov))
    tail = np.array(hist["Omega"])[np.array(hist["iter"]) >= cfg.iters - 1000]
    omega = float(tail.mean())
    ok = mean_err <= 0.15 and cov_err <= 0.3 and 0.8 <= omega <= 1.2 and dt < 900
    record(10, ok, f"mean err {mean_err:.3f} cov err {cov_err:.3f} mean Omega over last 1k iters {omega:.3f} "
                   f"in {dt:.0f}s")
    assert ok


@pytest.mark.slow
def test_c11_text(record):
    t = time.perf_counter()
    sob, fis = [], []
    for seed in range(3):
        for kind, rule, out in (("sobolev", "smoothed_annealed", sob), ("fisher", "average", fis)):
            # 4000 iterations keeps six runs inside the time budget
            r = train_text_gan(TextGanConfig(seed=seed, kind=kind, rule=rule, sigma0=1.5, iters=4000))
            out.append(r["final"] / r["baseline"])
    dt = time.perf_counter() - t
    ms, mf = float(np.median(sob)), float(np.median(fis))
    ok = ms <= 0.5 and mf >= 0.8 and dt < 1800
    record(11, ok, f"median JS-4 ratio sobolev {ms:.3f} fisher {mf:.3f} "
                   f"(per seed {np.round(sob, 3).tolist()} / {np.round(fis, 3).tolist()}) in {dt:.0f}s")
    assert ok


@pytest.mark.slow
def test_c12_ssl(record):
    t = time.perf_counter()
    ssl, ce = [], []
    for seed in range(5):
        cfg = SSLConfig(seed=seed)
        ssl.append(train_ssl(cfg)["final_test_error"])
        ce.append(train_ce_only(cfg)["final_test_error"])
    dt = time.perf_counter() - t
    ms, mc = float(np.median(ssl)), float(np.median(ce))
    ok = ms <= mc and dt < 600
    record(12, ok, f"median test error ssl {ms:.4f} ce-only {mc:.4f} (ssl {ssl} ce {ce}) in {dt:.0f}s")
    assert ok


DETERMINISM_RUNS = {
    "ipm": ["--config", str(CONFIGS / "two_gaussians.cfg"), "--grid", "64"],
    "pde": ["--config", str(CONFIGS / "two_gaussians.cfg"), "--grid", "64"],
    "descent": ["--config", str(CONFIGS / "descent_1d.cfg"), "--iters", "20"],
    "gan": ["--config", str(CONFIGS / "gan_gaussian.cfg"), "--iters", "200"],
    "seqgen": ["--seed", "3", "--iters", "100"],
    "ssl": ["--seed", "3", "--iters", "200"],
    "selftest": [],
}


def test_c13_determinism(tmp_path, record):
    mismatched = []
    for command, extra in DETERMINISM_RUNS.items():
        sums = []
        for rep in ("a", "b"):
            out = tmp_path / command / rep
            assert main([command, "--out", str(out), "--threads", "1", *extra]) == 0
            m = json.loads((out / "manifest.json").read_text())
            sums.append([(a["path"], a["sha256"]) for a in m["artifacts"]])
        if sums[0] != sums[1] or not sums[0]:
            mismatched.append(command)
    ok = not mismatched
    record(13, ok, f"{len(DETERMINISM_RUNS)} subcommands byte-identical" if ok else f"differ: {mismatched}")
    assert ok
