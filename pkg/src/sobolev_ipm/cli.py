"""Command-line experiment runner.

Every run writes its result files plus ``manifest.json`` (config echo, a
git-style hash of the config bytes, library versions, wall time and a sha256
per artifact) into the output directory.  A run that aborts still writes the
manifest, with ``partial`` set and the error message recorded.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import platform
import sys
import time
from pathlib import Path
from typing import Any, Callable

import numpy as np
import scipy
from threadpoolctl import threadpool_limits

from . import __version__
from .config import TRAINING_COMMANDS, ConfigError, echo, load_config, parse_density
from .densities import Categorical, Gaussian, UniformMeasure, mu_average
from .grid import support_grid

log = logging.getLogger(__name__)

COMMANDS = ("ipm", "pde", "descent", "gan", "seqgen", "ssl", "selftest")
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path: Path, header: list[str], rows) -> Path:
    """RFC-4180 CSV with CRLF line endings and round-trip float formatting."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    return path


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_json(path: Path, obj) -> Path:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def git_blob_sha1(data: bytes) -> str:
    """Object id git would assign to a blob with these bytes."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Run:
    """Per-invocation context: parsed config, seed, output directory, artifacts."""

    def __init__(self, command: str, cfg: dict, seed: int | None, out: Path, args: argparse.Namespace):
        self.command, self.cfg, self.seed, self.out, self.args = command, cfg, seed, out, args
        self.artifacts: list[Path] = []

    def path(self, name: str) -> Path:
        p = self.out / name
        self.artifacts.append(p)
        return p

    def rng(self, offset: int = 0) -> np.random.Generator:
        return np.random.default_rng([self.seed or 0, offset])


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _pair(run: Run):
    p = parse_density(run.cfg["P"], "P")
    q = parse_density(run.cfg["Q"], "Q")
    if p.dim != q.dim:
        raise ConfigError("P and Q must have the same dimension")
    return p, q


def _mu(run: Run, p, q):
    rule = run.cfg["mu"]
    if rule["rule"] == "uniform":
        return UniformMeasure(p.dim, rule["level"])
    return mu_average(p, q)


def _grid_n(run: Run, default: int | None) -> int | None:
    if run.args.grid is not None:
        return run.args.grid
    n = run.cfg.get("grid", {}).get("n")
    return default if n is None else n


def cmd_ipm(run: Run) -> int:
    from .ipm import (cramer_1d, fisher_ipm, sobolev_ipm_cdf_form, sobolev_ipm_conditional_form,
                      wasserstein1_1d)
    from .pde import solve_critic_pde

    p, q = _pair(run)
    discrete = isinstance(p, Categorical) and isinstance(q, Categorical)
    n = _grid_n(run, 256)
    if run.cfg["ipm"]["methods"] is not None:
        methods = run.cfg["ipm"]["methods"]
    elif discrete:
        methods = ["fisher", "cramer", "wasserstein1"]
    elif p.dim == 1:
        methods = ["fisher", "cramer", "wasserstein1", "sobolev_cdf", "sobolev_conditional", "sobolev_pde"]
    else:
        methods = ["fisher", "sobolev_cdf", "sobolev_conditional", "sobolev_pde"]

    def pde(p, q, mu, n):
        from .ipm import IpmResult
        sol = solve_critic_pde(p, q, mu, n)
        return IpmResult(sol.S, "sobolev_pde", sol.f_hat.grid.n, None,
                         {"iterations": sol.iterations, "residual": sol.residual})

    table: dict[str, Callable] = {
        "fisher": lambda: fisher_ipm(p, q, "counting" if discrete else _mu(run, p, q), None if discrete else n),
        "cramer": lambda: cramer_1d(p, q),
        "wasserstein1": lambda: wasserstein1_1d(p, q),
        "sobolev_cdf": lambda: sobolev_ipm_cdf_form(p, q, _mu(run, p, q), n),
        "sobolev_conditional": lambda: sobolev_ipm_conditional_form(p, q, _mu(run, p, q), n),
        "sobolev_pde": lambda: pde(p, q, _mu(run, p, q), n),
    }
    unknown = [m for m in methods if m not in table]
    if unknown:
        raise ConfigError(f"[ipm] methods: unknown {', '.join(unknown)} (allowed: {', '.join(table)})")
    results = []
    for m in methods:
        r = table[m]()
        d = r.to_dict()
        meta = d.pop("meta")
        if "squared" in meta:
            d["squared"] = meta["squared"]
        results.append(d)
        print(f"{m:22s} {r.value!r}")
    write_json(run.path("ipm.json"), {"results": results})
    return EXIT_OK


def cmd_pde(run: Run) -> int:
    from .ipm import sobolev_ipm_cdf_form
    from .pde import integration_by_parts_check, pde_residual, solve_critic_pde
    from .svg import critic_figure, line_plot

    p, q = _pair(run)
    mu = _mu(run, p, q)
    grid = support_grid([p, q], _grid_n(run, 256))
    sol = solve_critic_pde(p, q, mu, grid)
    f_star = sol.f_star
    grad = f_star.gradient()
    x = grid.points()
    pts = x.reshape(-1, grid.dim)
    fv = f_star.values.ravel()
    gv = grad.values.reshape(-1, grid.dim)
    coords = ["x", "y"][: grid.dim]
    write_csv(run.path("critic.csv"), [*coords, "f"], (list(a) + [b] for a, b in zip(pts, fv)))
    write_csv(run.path("gradient.csv"), [*coords, *(f"df_d{c}" for c in coords)],
              (list(a) + list(b) for a, b in zip(pts, gv)))
    summary = {
        "S": sol.S,
        "iterations": sol.iterations,
        "cg_relative_residual": sol.residual,
        "pde_residual": pde_residual(f_star, p, q, mu, sol.S),
        "integral_f_star_P_minus_Q": grid.integrate(f_star.values * (p.pdf(x) - q.pdf(x))),
        "E_mu_grad_f_star_sq": grid.integrate(np.sum(grad.values**2, axis=-1) * mu.pdf(x)),
        "integration_by_parts_gap": integration_by_parts_check(sol.f_hat, p, q, mu),
        "grid": list(grid.n),
    }
    if run.cfg["pde"]["with_cdf_form"]:
        summary["S_cdf_form"] = sobolev_ipm_cdf_form(p, q, mu, grid).value
    write_json(run.path("pde.json"), summary)
    if grid.dim == 2:
        markers = []
        for d, name in ((p, "P"), (q, "Q")):
            if isinstance(d, Gaussian):
                markers.append((d.mean[0], d.mean[1], name))
        fig = critic_figure(f_star, grad, markers, title="optimal critic f* and grad f*",
                            arrows=run.cfg["pde"]["arrows"])
    else:
        x = grid.axes[0]
        fig = line_plot({"f*": (x, f_star.values), "df*/dx": (x, grad.values[:, 0])}, title="optimal critic")
    fig.save(run.path("critic.svg"))
    print(f"S = {sol.S!r} ({sol.iterations} CG iterations)")
    return EXIT_OK


def cmd_descent(run: Run) -> int:
    from .descent import sobolev_descent
    from .svg import line_plot

    c = run.cfg["descent"]
    target = parse_density(run.cfg["target"], "target")
    init = parse_density(run.cfg["init"], "init")
    steps = run.args.iters if run.args.iters is not None else c["steps"]
    res = sobolev_descent(target, init, c["particles"], steps, c["dt"], run.rng(),
                          critic_source=c["critic_source"], grid=_grid_n(run, None),
                          n_features=c["features"], keep_every=c["keep_every"])
    d = target.dim

    def rows():
        for cloud in res.trajectory:
            for i, x in enumerate(cloud.positions):
                yield [cloud.step, i, *x]

    write_csv(run.path("trajectory.csv"), ["step", "particle", *(f"x{k}" for k in range(d))], rows())
    clamped = [0] + list(res.clamped)
    write_csv(run.path("energy.csv"), ["step", "energy", "clamped"],
              ([t, e, clamped[t]] for t, e in enumerate(res.energies)))
    line_plot({"Sobolev energy": (np.arange(len(res.energies)), res.energies)},
              title="descent energy (log10)", logy=True).save(run.path("energy.svg"))
    final = res.final.positions
    write_json(run.path("descent.json"), {
        "final_mean": final.mean(axis=0), "energy_first": res.energies[0], "energy_last": res.energies[-1],
        "steps": steps, "total_clamped": int(sum(res.clamped)),
    })
    print(f"energy {res.energies[0]!r} -> {res.energies[-1]!r}; final mean {final.mean(axis=0)}")
    return EXIT_OK


def cmd_gan(run: Run) -> int:
    from .gan import GanConfig, sample_generator, save_checkpoint, train

    c = dict(run.cfg["gan"])
    target = parse_density(run.cfg["target"], "target")
    n_samples = c.pop("samples")
    if run.args.iters is not None:
        c["iters"] = run.args.iters
    cfg = GanConfig(target=target, seed=run.seed, **c)
    state, hist = train(cfg)
    keys = list(hist)
    write_csv(run.path("history.csv"), keys, zip(*(hist[k] for k in keys)))
    save_checkpoint(run.path("generator.ckpt"), state.generator.arrays())
    save_checkpoint(run.path("critic.ckpt"), state.critic.arrays())
    x = sample_generator(state.generator, n_samples, run.rng(1))
    write_csv(run.path("samples.csv"), [f"x{k}" for k in range(target.dim)], x)
    summary = {"sample_mean": x.mean(axis=0), "sample_cov": np.atleast_2d(np.cov(x.T)),
               "final_lambda": state.lam, "final_Omega": hist["Omega"][-1] if hist["Omega"] else None}
    if isinstance(target, Gaussian):
        summary["mean_error"] = float(np.linalg.norm(x.mean(axis=0) - target.mean))
        summary["cov_frobenius_error"] = float(np.linalg.norm(np.atleast_2d(np.cov(x.T)) - target.cov))
    write_json(run.path("gan.json"), summary)
    print(f"mean error {summary.get('mean_error')!r}, Omega {summary['final_Omega']!r}")
    return EXIT_OK


def cmd_seqgen(run: Run) -> int:
    from .seqgen import TextGanConfig, train_text_gan

    c = dict(run.cfg["seqgen"])
    if run.args.iters is not None:
        c["iters"] = run.args.iters
    res = train_text_gan(TextGanConfig(seed=run.seed, **c))
    if c["debug_copy"]:
        write_csv(run.path("js4.csv"), ["iter", "js4"], zip(res["iter"], res["js4"]))
    else:
        write_csv(run.path("js4.csv"), ["iter", "js4", "Omega", "lam"],
                  zip(res["iter"], res["js4"], res["Omega"], res["lam"]))
        alphabet = "abcdefghijklmnopqrstuvwxyz0123456789"
        with open(run.path("samples.txt"), "w", encoding="utf-8", newline="\n") as fh:
            for row in res["samples"]:
                fh.write("".join(alphabet[t] if t < len(alphabet) else "?" for t in row) + "\n")
    write_json(run.path("seqgen.json"), {"baseline_js4": res["baseline"], "final_js4": res["final"],
                                         "ratio": res["final"] / res["baseline"] if res["baseline"] else None})
    print(f"JS-4 {res['baseline']!r} -> {res['final']!r}")
    return EXIT_OK


def ssl_config(section: dict, seed: int):
    from .ssl import SSL_PRESETS, SSLConfig

    kw: dict[str, Any] = {"formulation": section["formulation"]}
    if section["preset"] != "toy":
        kw.update(SSL_PRESETS[section["preset"]])
    for key in ("lambda_ce", "rho_f", "rho_s", "lr", "steps", "n_classes", "n_labeled", "n_unlabeled", "n_test"):
        if section[key] is not None:
            kw[key] = section[key]
    return SSLConfig(seed=seed, **kw)


def cmd_ssl(run: Run) -> int:
    from .ssl import train_ce_only, train_ssl

    sec = dict(run.cfg["ssl"])
    if run.args.iters is not None:
        sec["steps"] = run.args.iters
    cfg = ssl_config(sec, run.seed)
    hist = train_ssl(cfg)
    write_csv(run.path("error.csv"), ["step", "test_error", "CE", "Omega_F", "Omega_S"],
              zip(hist["step"], hist["test_error"], hist["CE"], hist["Omega_F"], hist["Omega_S"]))
    summary = {"ssl_test_error": hist["final_test_error"], "formulation": cfg.formulation}
    if sec["baseline"]:
        summary["ce_only_test_error"] = train_ce_only(cfg)["final_test_error"]
    write_json(run.path("ssl.json"), summary)
    print(" ".join(f"{k}={v!r}" for k, v in summary.items()))
    return EXIT_OK


def selftest_checks() -> list[tuple[str, Callable[[], tuple[bool, str]]]]:
    """Fast invariant checks run by the `selftest` subcommand."""
    from .autodiff.functional import grad_params_of_gradnorm, param_finite_difference, sobolev_constraint
    from .autodiff.nets import MlpCritic
    from .ipm import cramer_1d, fisher_ipm, sobolev_ipm_cdf_form, sobolev_ipm_conditional_form, wasserstein1_1d
    from .pde import solve_critic_pde
    from .seqgen import AnnealSchedule, anneal, js4

    def point_masses():
        p, q = Categorical([0.0], [1.0]), Categorical([3.0], [1.0])
        c, w = cramer_1d(p, q).value, wasserstein1_1d(p, q).value
        f2 = fisher_ipm(p, q, "counting").meta["squared"]
        ok = abs(c - 3) <= 1e-9 and abs(w - 3) <= 1e-9 and f2 == 2.0
        return ok, f"cramer={c!r} w1={w!r} fisher^2={f2!r}"

    def forms_agree():
        p = Gaussian([1.0, 0.0], [[1.9, 0.8], [0.8, 1.3]])
        q = Gaussian([1.0, -2.0], [[1.9, -0.8], [-0.8, 1.3]])
        mu = mu_average(p, q)
        a = sobolev_ipm_cdf_form(p, q, mu, 32).value
        b = sobolev_ipm_conditional_form(p, q, mu, 32).value
        return abs(a - b) <= 1e-6 * a, f"cdf={a!r} conditional={b!r}"

    def pde_1d():
        p, q = Gaussian([0.0], [[1.0]]), Gaussian([1.0], [[1.0]])
        mu = mu_average(p, q)
        s_pde = solve_critic_pde(p, q, mu, 1025).S
        s_cdf = sobolev_ipm_cdf_form(p, q, mu, 1025).value
        return abs(s_pde - s_cdf) <= 1e-3 * s_cdf, f"pde={s_pde!r} cdf={s_cdf!r}"

    def double_backward():
        rng = np.random.default_rng(0)
        critic = MlpCritic(2, (8,), activation="tanh", rng=rng)
        x = rng.standard_normal((16, 2))
        analytic = np.concatenate([g.ravel() for g in grad_params_of_gradnorm(critic, x)])
        numeric = param_finite_difference(critic, lambda: sobolev_constraint(critic, x, create_graph=False))
        rel = float(np.max(np.abs(analytic - numeric)) / np.max(np.abs(numeric)))
        return rel <= 1e-4, f"relative error {rel:.3g}"

    def anneal_ends():
        s = AnnealSchedule(1.5, 100)
        return anneal(s, 0) == 1.5 and anneal(s, 100) == 0.0, "sigma(0)=1.5, sigma(max)=0"

    def js_identity():
        x = np.random.default_rng(1).integers(0, 3, (50, 6))
        v = js4(x, x)
        return v == 0.0, f"js4(x, x)={v!r}"

    return [("point_mass_identity", point_masses), ("form_equivalence", forms_agree),
            ("pde_1d_reduction", pde_1d), ("double_backward", double_backward),
            ("anneal_schedule", anneal_ends), ("js4_identity", js_identity)]


def cmd_selftest(run: Run) -> int:
    rows, failed = [], 0
    for name, check in selftest_checks():
        try:
            ok, detail = check()
        except Exception as exc:  # a crashing check is a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        failed += not ok
        rows.append({"check": name, "passed": bool(ok), "detail": detail})
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    write_json(run.path("selftest.json"), {"checks": rows, "failed": failed})
    return EXIT_OK if failed == 0 else EXIT_FAIL


HANDLERS = {"ipm": cmd_ipm, "pde": cmd_pde, "descent": cmd_descent, "gan": cmd_gan,
            "seqgen": cmd_seqgen, "ssl": cmd_ssl, "selftest": cmd_selftest}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sobolev-ipm", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in COMMANDS:
        sp = sub.add_parser(name, help=f"run the {name} experiment")
        sp.add_argument("--config", type=Path, help="INI or JSON config file")
        sp.add_argument("--seed", type=int, help="64-bit seed (overrides [run] seed)")
        sp.add_argument("--out", type=Path, help="output directory (default runs/<command>)")
        sp.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1, deterministic)")
        sp.add_argument("--grid", type=int, help="grid nodes per axis")
        sp.add_argument("--iters", type=int, help="training iterations or descent steps")
        sp.add_argument("-v", "--verbose", action="store_true")
    return ap


def _versions() -> dict:
    return {"sobolev_ipm": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    command = args.command
    try:
        cfg = load_config(command, args.config)
    except (ConfigError, OSError) as exc:
        print(f"sobolev-ipm {command}: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    seed = args.seed if args.seed is not None else cfg["run"]["seed"]
    if seed is not None and not 0 <= seed < 2**64:
        print(f"sobolev-ipm {command}: seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_USAGE
    if command in TRAINING_COMMANDS and seed is None:
        print(f"sobolev-ipm {command}: a seed is required (--seed or [run] seed)", file=sys.stderr)
        return EXIT_USAGE
    if args.threads < 1:
        print(f"sobolev-ipm {command}: --threads must be positive", file=sys.stderr)
        return EXIT_USAGE
    out = args.out or Path(cfg["run"]["out"] or Path("runs") / command)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"sobolev-ipm {command}: cannot create {out}: {exc}", file=sys.stderr)
        return EXIT_USAGE

    config_bytes = args.config.read_bytes() if args.config is not None else b""
    run = Run(command, cfg, seed, out, args)
    t0 = time.perf_counter()
    status, error = EXIT_FAIL, None
    try:
        with threadpool_limits(limits=args.threads):
            status = HANDLERS[command](run)
    except ConfigError as exc:
        status, error = EXIT_USAGE, f"config error: {exc}"
    except Exception as exc:  # recorded in the manifest, then reported
        log.debug("run failed", exc_info=True)
        error = f"{type(exc).__name__}: {exc}"
    wall = time.perf_counter() - t0

    artifacts = [{"path": p.name, "sha256": sha256_file(p), "bytes": p.stat().st_size}
                 for p in run.artifacts if p.exists()]
    write_json(out / "manifest.json", {
        "command": command,
        "argv": sys.argv[1:] if argv is None else list(argv),
        "config": echo(cfg),
        "config_file": str(args.config) if args.config is not None else None,
        "config_sha1": git_blob_sha1(config_bytes),
        "seed": seed,
        "threads": args.threads,
        "overrides": {"grid": args.grid, "iters": args.iters},
        "versions": _versions(),
        "wall_time_s": wall,
        "artifacts": artifacts,
        "partial": error is not None or len(artifacts) < len(run.artifacts),
        "error": error,
        "exit_status": status,
    })
    if error is not None:
        print(f"sobolev-ipm {command}: {error}", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
