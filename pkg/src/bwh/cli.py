"""Command line front end.

Every subcommand reads a JSON config, runs one study, and writes its
artifacts into the output directory.  The resolved config's SHA-256 and the
seed are stamped into every artifact (a leading ``#`` line for CSV, top-level
keys for JSON) so a result file can always be traced back to its inputs.
Exit codes: 0 on success, 2 for configuration errors, 3 for numerical
failures.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError

_ERGODIC_FNS = {
    "one": lambda *g: np.ones_like(g[0]),
    "sin_first": lambda *g: np.sin(2.0 * np.pi * g[0]),
    "cos_first": lambda *g: np.cos(2.0 * np.pi * g[0]),
    "sin_sum": lambda *g: np.sin(2.0 * np.pi * sum(g)),
}


@dataclass
class RunContext:
    config: dict
    seed: int
    out: str
    threads: int
    sha: str


def _load_config(args) -> RunContext:
    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            config = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {args.config}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(config, dict):
        raise ConfigError("config root must be a JSON object")

    seed = args.seed if args.seed is not None else int(config.get("seed", 0))
    out = args.out if args.out is not None else str(config.get("out", "."))
    threads = args.threads if args.threads is not None else int(config.get("threads", 1))
    if threads < 1:
        raise ConfigError("--threads must be at least 1")

    effective = dict(config)
    effective["seed"] = seed
    effective["threads"] = threads
    effective.pop("out", None)
    effective["subcommand"] = args.command
    digest = hashlib.sha256(json.dumps(effective, sort_keys=True, separators=(",", ":")).encode()).hexdigest()

    os.makedirs(out, exist_ok=True)
    return RunContext(config=config, seed=seed, out=out, threads=threads, sha=digest)


def _write_json(path: str, payload: dict, ctx: RunContext) -> None:
    doc = {"config_sha256": ctx.sha, "seed": ctx.seed}
    doc.update(payload)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _stamp_csv(path: str, ctx: RunContext) -> None:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        body = fh.read()
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# config_sha256={ctx.sha} seed={ctx.seed}\n")
        fh.write(body)


def _medium(ctx: RunContext):
    from .fields import medium_from_dict, medium_from_json

    spec = ctx.config.get("medium")
    if spec is None:
        raise ConfigError("config needs a 'medium' entry (inline object or file path)")
    if isinstance(spec, str):
        return medium_from_json(spec)
    if isinstance(spec, dict):
        return medium_from_dict(spec)
    raise ConfigError("'medium' must be an object or a path string")


def _deformation(ctx: RunContext, seed_override: bool):
    from .stochastic import build_perturbed_identity

    spec = ctx.config.get("deformation")
    if spec is None:
        raise ConfigError("config needs a 'deformation' entry (inline object or file path)")
    if isinstance(spec, str):
        with open(spec, "r", encoding="utf-8") as fh:
            spec = json.load(fh)
    if not isinstance(spec, dict):
        raise ConfigError("'deformation' must be an object or a path string")
    doc = dict(spec)
    if seed_override or "seed" not in doc:
        doc["seed"] = ctx.seed
    return build_perturbed_identity(doc)


def _critical_point(ctx: RunContext, medium, return_info: bool = False):
    from .effective import find_critical

    band = int(ctx.config.get("band", 0))
    theta_init = np.asarray(ctx.config.get("theta_init", [0.0] * medium.dim), dtype=float)
    return find_critical(medium, band=band, theta_init=theta_init, return_info=return_info)


def _series_pipeline(ctx: RunContext, medium, dspec):
    from .cell_problems import first_auxiliary, first_order_correctors
    from .effective import effective_coefficients, quasi_perfect_series

    point = _critical_point(ctx, medium)
    aux = first_auxiliary(medium, point)
    eff = effective_coefficients(medium, point, aux)
    cors = first_order_correctors(medium, point, aux, dspec.egrad_z, dspec.ediv_z)
    series = quasi_perfect_series(medium, point, aux, cors, dspec.egrad_z, dspec.ediv_z)
    return point, aux, eff, series


def _envelope(ctx: RunContext, length: float):
    from .evolution import gaussian_envelope

    spec = ctx.config.get("v0", {})
    kind = spec.get("kind", "gaussian")
    if kind != "gaussian":
        raise ConfigError(f"unknown envelope kind {kind!r}")
    sigma = float(spec.get("sigma", length / 12.0))
    center = float(spec.get("center", length / 2.0))
    return gaussian_envelope(length, sigma=sigma, center=center)


# ---------------------------------------------------------------------------
# subcommands


def _run_bands(ctx: RunContext) -> list[str]:
    from .bands import band_surface

    medium = _medium(ctx)
    bands = ctx.config.get("bands", [0])
    grid = ctx.config.get("grid", 17)
    period = int(ctx.config.get("period", 1))
    surf = band_surface(medium, bands, grid, period=period)
    path = os.path.join(ctx.out, "bands.csv")
    surf.to_csv(path)
    _stamp_csv(path, ctx)
    return [path]


def _run_critical(ctx: RunContext) -> list[str]:
    medium = _medium(ctx)
    point, info = _critical_point(ctx, medium, return_info=True)
    path = os.path.join(ctx.out, "critical.json")
    _write_json(
        path,
        {
            "band": point.band,
            "theta_star": [float(t) for t in point.theta],
            "lambda_star": point.lam,
            "residual": point.residual,
            "iterations": info["iterations"],
        },
        ctx,
    )
    return [path]


def _run_effective(ctx: RunContext) -> list[str]:
    from .cell_problems import first_auxiliary
    from .effective import effective_coefficients

    medium = _medium(ctx)
    point = _critical_point(ctx, medium)
    aux = first_auxiliary(medium, point)
    eff = effective_coefficients(medium, point, aux)
    path = os.path.join(ctx.out, "effective.json")
    payload = eff.to_dict()
    payload["band"] = point.band
    _write_json(path, payload, ctx)
    return [path]


def _run_perturb(ctx: RunContext, seed_override: bool) -> list[str]:
    medium = _medium(ctx)
    dspec = _deformation(ctx, seed_override)
    point, _, eff, series = _series_pipeline(ctx, medium, dspec)
    path = os.path.join(ctx.out, "perturb.json")
    _write_json(
        path,
        {
            "band": point.band,
            "theta_star": [float(t) for t in point.theta],
            "lambda_star": point.lam,
            "theta1": [float(t) for t in np.real(series.theta1)],
            "lambda1": float(series.lambda1),
            "A_star": [float(x) for x in eff.A_star.reshape(-1)],
            "A1": [float(x) for x in series.A1.reshape(-1)],
            "U_star": float(eff.U_star),
            "U1": float(series.U1),
            "B0": [float(x) for x in np.real(series.B0).reshape(-1)],
            "B1": [float(x) for x in np.real(series.B1).reshape(-1)],
            "B1_imag_max": float(np.max(np.abs(np.imag(series.B1)))),
        },
        ctx,
    )
    return [path]


def _run_oracle(ctx: RunContext, seed_override: bool) -> list[str]:
    from .effective import supercell_oracle
    from .fields import build_lattice

    medium = _medium(ctx)
    dspec = _deformation(ctx, seed_override)
    etas = ctx.config.get("etas")
    if not etas:
        raise ConfigError("oracle needs a nonempty 'etas' list")
    _, _, _, series = _series_pipeline(ctx, medium, dspec)
    realization = dspec.sample_realization()
    cut = int(ctx.config.get("supercell_cutoff", max(medium.cutoff * dspec.period, 24)))
    lattice = build_lattice(medium.dim, cut)
    table = supercell_oracle(
        medium,
        realization,
        [float(e) for e in etas],
        band=int(ctx.config.get("band", 0)),
        period=dspec.period,
        lattice=lattice,
        series=series,
    )
    path = os.path.join(ctx.out, "oracle.csv")
    table.to_csv(path)
    _stamp_csv(path, ctx)
    return [path]


def _run_evolve(ctx: RunContext, seed_override: bool) -> list[str]:
    import csv as _csv

    from .cell_problems import first_auxiliary
    from .effective import effective_coefficients
    from .evolution import (
        EvolutionConfig,
        corrector_error,
        evolve_eps,
        evolve_homogenized,
        save_state,
        well_prepared_initial,
    )

    medium = _medium(ctx)
    eps_list = ctx.config.get("eps")
    if eps_list is None:
        raise ConfigError("evolve needs 'eps' (a value or list of values)")
    if np.isscalar(eps_list):
        eps_list = [eps_list]
    eps_list = [float(e) for e in eps_list]

    length = float(ctx.config.get("L", 1.0))
    horizon = float(ctx.config.get("T", 0.05))
    dt = ctx.config.get("dt")
    v0 = _envelope(ctx, length)
    snap_times = [float(t) for t in ctx.config.get("snapshot_times", [])]

    realization, eta = None, 0.0
    if "deformation" in ctx.config:
        dspec = _deformation(ctx, seed_override)
        eta = float(ctx.config.get("eta", dspec.eta))
        realization = dspec.sample_realization()

    point = _critical_point(ctx, medium)
    aux = first_auxiliary(medium, point)
    eff = effective_coefficients(medium, point, aux)
    a_star = float(eff.A_star.reshape(-1)[0])
    u_star = float(eff.U_star)
    theta_star = float(point.theta[0])

    def one(eps: float):
        cfg = EvolutionConfig(
            eps=eps,
            L=length,
            T=horizon,
            v0=v0,
            theta_star=theta_star,
            lambda_star=point.lam,
            psi=point.psi,
            dt=None if dt is None else float(dt),
            npts=None if ctx.config.get("npts") is None else int(ctx.config["npts"]),
            points_per_cell=int(ctx.config.get("points_per_cell", 16)),
            snapshot_times=tuple(snap_times),
        )
        state = well_prepared_initial(cfg, medium, realization=realization, eta=eta)
        final, info = evolve_eps(state, medium, cfg, realization=realization, eta=eta)
        v_samples = np.asarray(v0(state.grid.points()), dtype=complex)
        v_final = evolve_homogenized(v_samples, state.grid, a_star, u_star, horizon)
        err = corrector_error(final, v_final, point.psi, theta_star, point.lam, realization=realization, eta=eta)
        return err, info

    if ctx.threads > 1 and len(eps_list) > 1:
        with ThreadPoolExecutor(max_workers=ctx.threads) as pool:
            results = list(pool.map(one, eps_list))
    else:
        results = [one(e) for e in eps_list]

    paths = []
    path = os.path.join(ctx.out, "corrector.csv")
    with open(path, "w", newline="") as fh:
        wr = _csv.writer(fh)
        wr.writerow(["eps", "error", "mass_drift"])
        for eps, (err, info) in zip(eps_list, results):
            wr.writerow([f"{eps:.17g}", f"{err:.17g}", f"{info['mass_drift']:.17g}"])
    _stamp_csv(path, ctx)
    paths.append(path)

    for eps, (_, info) in zip(eps_list, results):
        for snap in info.get("snapshots", []):
            prefix = os.path.join(ctx.out, f"state_eps{eps:g}_t{snap.t:g}")
            save_state(snap, prefix)
            paths.extend([prefix + ".bin", prefix + ".json"])
    return paths


def _run_split(ctx: RunContext, seed_override: bool) -> list[str]:
    from .evolution import BoxGrid, splitting_series

    medium = _medium(ctx)
    dspec = _deformation(ctx, seed_override)
    etas = ctx.config.get("etas")
    if not etas:
        raise ConfigError("split needs a nonempty 'etas' list")
    gspec = ctx.config.get("grid", {})
    grid = BoxGrid(float(gspec.get("L", 16.0)), int(gspec.get("npts", 256)))
    res = splitting_series(
        medium,
        dspec,
        [float(e) for e in etas],
        band=int(ctx.config.get("band", 0)),
        grid=grid,
        T=float(ctx.config.get("T", 0.05)),
        v0=_envelope(ctx, grid.L) if "v0" in ctx.config else None,
        fd_step=ctx.config.get("fd_step"),
    )
    path = os.path.join(ctx.out, "split.csv")
    res.to_csv(path)
    _stamp_csv(path, ctx)
    return [path]


def _run_ergodic(ctx: RunContext, seed_override: bool) -> list[str]:
    import csv as _csv

    from .stochastic import ergodic_table

    dspec = _deformation(ctx, seed_override)
    name = ctx.config.get("f", "sin_first")
    if name not in _ERGODIC_FNS:
        raise ConfigError(f"unknown ergodic integrand {name!r}; choose from {sorted(_ERGODIC_FNS)}")
    ts = ctx.config.get("ts")
    if not ts:
        raise ConfigError("ergodic needs a nonempty 'ts' list of window sizes")
    omega = ctx.config.get("omega")
    rows = ergodic_table(
        dspec,
        _ERGODIC_FNS[name],
        [float(t) for t in ts],
        omega=omega,
        subdivisions=int(ctx.config.get("subdivisions", 32)),
    )
    path = os.path.join(ctx.out, "ergodic.csv")
    with open(path, "w", newline="") as fh:
        wr = _csv.writer(fh)
        wr.writerow(["t", "estimate", "closed_form", "abs_error"])
        for row in rows:
            wr.writerow([f"{row[k]:.17g}" for k in ("t", "estimate", "closed_form", "abs_error")])
    _stamp_csv(path, ctx)
    return [path]


def _matrix_from_json(data, dim: int) -> np.ndarray:
    arr = np.asarray(data, dtype=float)
    if arr.shape == (dim, dim, 2):
        return arr[..., 0] + 1j * arr[..., 1]
    if arr.shape == (dim, dim):
        return arr.astype(complex)
    raise ConfigError(f"series matrix must be {dim}x{dim} (optionally with trailing [re, im] pairs)")


def _run_perturb_matrix(ctx: RunContext) -> list[str]:
    from .perturbation import MatrixSeries, isolation_check, track_branches

    cfg = ctx.config
    dim = int(cfg.get("dim", 0))
    if dim <= 0:
        raise ConfigError("perturb-matrix needs a positive 'dim'")
    entries = cfg.get("coefficients")
    if not entries:
        raise ConfigError("perturb-matrix needs a nonempty 'coefficients' list")
    coeffs = {}
    for entry in entries:
        idx = tuple(int(v) for v in entry["index"])
        coeffs[idx] = _matrix_from_json(entry["matrix"], dim)
    series = MatrixSeries(dim=dim, coefficients=coeffs, tail_ratio=cfg.get("tail_ratio"))

    samples = np.asarray(cfg.get("samples"), dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    result = track_branches(
        series,
        float(cfg.get("lambda0", 0.0)),
        int(cfg.get("multiplicity", 1)),
        samples,
    )
    iso = cfg.get("isolation")
    if iso:
        isolation_check(series, result, float(iso["d"]), float(iso["d_prime"]))
    path = os.path.join(ctx.out, "branches.csv")
    result.to_csv(path)
    _stamp_csv(path, ctx)
    return [path]


# ---------------------------------------------------------------------------
# driver


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bwh", description="Spectral homogenization studies for Schrodinger operators")
    sub = parser.add_subparsers(dest="command", required=True)
    names = [
        ("bands", "sweep band surfaces over a Bloch frequency grid"),
        ("critical", "locate a critical point of a band"),
        ("effective", "effective tensor and potential at a critical point"),
        ("perturb", "order-eta expansion of the homogenized data"),
        ("oracle", "deformed supercell sweep validating the expansion"),
        ("evolve", "Schrodinger evolution and corrector error"),
        ("split", "first-order envelope splitting study"),
        ("ergodic", "Birkhoff means against the closed-form average"),
        ("perturb-matrix", "analytic branch tracking for matrix pencils"),
    ]
    for name, help_text in names:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to a JSON config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="output directory (default: config 'out' or '.')")
        p.add_argument("--threads", type=int, default=None, help="cap for parallel sweeps (default 1)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        ctx = _load_config(args)
        seeded = args.seed is not None
        if args.command == "bands":
            paths = _run_bands(ctx)
        elif args.command == "critical":
            paths = _run_critical(ctx)
        elif args.command == "effective":
            paths = _run_effective(ctx)
        elif args.command == "perturb":
            paths = _run_perturb(ctx, seeded)
        elif args.command == "oracle":
            paths = _run_oracle(ctx, seeded)
        elif args.command == "evolve":
            paths = _run_evolve(ctx, seeded)
        elif args.command == "split":
            paths = _run_split(ctx, seeded)
        elif args.command == "ergodic":
            paths = _run_ergodic(ctx, seeded)
        elif args.command == "perturb-matrix":
            paths = _run_perturb_matrix(ctx)
        else:  # pragma: no cover - argparse enforces the choices
            raise ConfigError(f"unknown subcommand {args.command!r}")
    except ConfigError as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc), "exit_code": 2}, sys.stderr)
        sys.stderr.write("\n")
        return 2
    except NumericalError as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc), "exit_code": 3}, sys.stderr)
        sys.stderr.write("\n")
        return 3
    for p in paths:
        print(f"wrote {p}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
