"""Command-line experiment driver.

Every command reads a JSON config (validated against ``CONFIG_SCHEMA``), applies the
flag overrides, writes the resolved config next to its reports and exits with
0 on success, 2 on a configuration error and 3 when a tolerance or gate fails.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np

from . import corpus as corpus_mod
from .grid import GoodnessParams, estimate_pi_good, exact_pi_good, sample_grid, standard_grid
from .kernels import KERNEL_NAMES, QuadratureSpec, TruncationSpec, builtin_kernel
from .models import norm_harness, random_shift, shift_apply
from .representation import (extract_representation, martingale_split, reassembly_error,
                             representation_constants, representation_csv, representation_json)
from .sparse import (corollary_check, corollary_constant, default_eps_ladder, layer_multiplicity,
                     shift_adapter, sparse_dominate, universal_constant, universal_dominates,
                     universal_sparse, verify_sparse, stopping_constant)

log = logging.getLogger("dyadrep")

EXIT_OK, EXIT_CONFIG, EXIT_GATE = 0, 2, 3
COMMANDS = ("decompose", "extract", "coeff-bounds", "pi-good", "sparse", "norms", "corollary")

DEFAULTS = {
    "experiment": "default",
    "kernel": "beurling-re",
    "delta0": 0.0,
    "quad": {"order": 4, "near_factor": 4},
    "trunc": {"kind": "smooth", "eps": 0.125},
    "grid": {"n": 1, "L": 6, "S": 0, "r": 4, "alpha": 1.0, "omega_seed": 0},
    "eps_ladder": None,
    "corpus": {"seed": 0, "per_family": 4, "families": list(corpus_mod.FAMILIES)},
    "seed": 0,
    "eta": 0.5,
    "trials": 200,
    "shifts": 20,
    "tolerance": 1e-9,
    "pi_levels": [4, 6, 8],
    "figures": True,
    "threads": 1,
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "experiment": {"type": "string"},
        "kernel": {"enum": list(KERNEL_NAMES)},
        "delta0": {"type": "number", "minimum": 0},
        "quad": {"type": "object", "additionalProperties": False,
                 "properties": {"order": {"type": "integer", "minimum": 1, "maximum": 16},
                                "near_factor": {"type": "integer", "minimum": 1}}},
        "trunc": {"type": "object", "additionalProperties": False,
                  "properties": {"kind": {"enum": ["sharp", "smooth", "smooth-band"]},
                                 "eps": {"type": "number", "exclusiveMinimum": 0},
                                 "eps2": {"type": ["number", "null"]}}},
        "grid": {"type": "object", "additionalProperties": False,
                 "properties": {"n": {"const": 1},
                                "L": {"type": "integer", "minimum": 3, "maximum": 12},
                                "S": {"type": "integer", "maximum": 0},
                                "r": {"type": "integer", "minimum": 1},
                                "alpha": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                                "omega_seed": {"type": ["integer", "null"]}}},
        "eps_ladder": {"type": ["array", "null"], "items": {"type": "number", "exclusiveMinimum": 0}},
        "corpus": {"type": "object", "additionalProperties": False,
                   "properties": {"seed": {"type": "integer"},
                                  "per_family": {"type": "integer", "minimum": 1},
                                  "families": {"type": "array", "minItems": 1, "items": {
                                      "enum": list(corpus_mod.FAMILIES + corpus_mod.EXTRA_FAMILIES)}}}},
        "seed": {"type": "integer"},
        "eta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "trials": {"type": "integer", "minimum": 1},
        "shifts": {"type": "integer", "minimum": 1},
        "tolerance": {"type": "number", "exclusiveMinimum": 0},
        "pi_levels": {"type": "array", "items": {"type": "integer"}},
        "figures": {"type": "boolean"},
        "threads": {"type": "integer", "minimum": 1},
    },
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(path: str | None, overrides: dict) -> dict:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        raise ConfigError(f"config does not match the schema: {e.message}") from e
    cfg = _merge(DEFAULTS, raw)
    cfg = _merge(cfg, {k: v for k, v in overrides.items() if v is not None})
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        raise ConfigError(f"override does not match the schema: {e.message}") from e
    g = cfg["grid"]
    if g["S"] > g["L"]:
        raise ConfigError("grid.S must not exceed grid.L")
    tr = cfg["trunc"]
    if tr["kind"] == "smooth-band" and (tr.get("eps2") is None or tr["eps2"] < tr["eps"]):
        raise ConfigError("smooth-band truncation needs eps2 >= eps")
    return cfg


# ---------------------------------------------------------------------- helpers
def _objects(cfg: dict):
    K = builtin_kernel(cfg["kernel"], cfg["delta0"])
    tr = cfg["trunc"]
    trunc = TruncationSpec(tr["kind"], float(tr["eps"]), tr.get("eps2"))
    quad = QuadratureSpec(**cfg["quad"])
    g = cfg["grid"]
    params = GoodnessParams.from_alpha(g["alpha"], g["n"], g["r"])
    if g.get("omega_seed") is None:
        grid = standard_grid(g["n"], g["L"], g["S"])
    else:
        grid = sample_grid(g["omega_seed"], (g["S"], g["L"]), g["n"])
    return K, trunc, quad, params, grid


def _corpus(cfg: dict):
    c = cfg["corpus"]
    return corpus_mod.default_corpus(cfg["grid"]["L"], c["seed"], c["per_family"], c["families"])


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, header: list, rows: list) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    path.write_text(buf.getvalue())


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=float) + "\n")


def _figure(cfg, fn, *args, **kw):
    if not cfg["figures"]:
        return
    from . import plotting
    getattr(plotting, fn)(*args, **kw)


# ---------------------------------------------------------------------- commands
def cmd_decompose(cfg: dict, out: Path) -> int:
    K, trunc, quad, params, grid = _objects(cfg)
    tol = cfg["tolerance"]
    rows, worst = [], 0.0
    for t in _corpus(cfg):
        rep = martingale_split(K, trunc, grid, *t.functions(), quad=quad, check=False)
        rows.append([t.name, rep.sigma1, rep.sigma2, rep.sigma3, rep.remainder, rep.total, rep.reference,
                     rep.rel_error])
        worst = max(worst, rep.rel_error)
    _write_csv(out / "decompose.csv", ["triple", "sigma1", "sigma2", "sigma3", "remainder", "total",
                                       "reference", "rel_error"], rows)
    _write_json(out / "decompose.json", {"max_rel_error": worst, "tolerance": tol, "triples": len(rows)})
    print(f"decompose: {len(rows)} triples, max relative error {worst:.3e} (tolerance {tol:g})")
    return EXIT_OK if worst <= tol else EXIT_GATE


def _extraction_rows(cfg):
    K, trunc, quad, params, grid = _objects(cfg)
    constants = representation_constants(K, trunc, grid, quad, seed=cfg["seed"])
    results = []
    for t in _corpus(cfg):
        rep = extract_representation(K, trunc, grid, params, *t.functions(), quad=quad, constants=constants,
                                     strict=False)
        results.append((t, rep, reassembly_error(rep, *t.functions()) if rep.target != 0 else 0.0))
    return constants, results


def cmd_extract(cfg: dict, out: Path) -> int:
    constants, results = _extraction_rows(cfg)
    rows = []
    worst = 0.0
    for t, rep, err in results:
        r = rep.report
        rows.append([t.name, rep.coefficient_count, rep.target, rep.residual, err, r["no_parent_terms"]])
        worst = max(worst, err)
        (out / f"{t.name}.csv").write_text(representation_csv(rep))
        (out / f"{t.name}.json").write_text(representation_json(rep) + "\n")
    _write_csv(out / "extract.csv", ["triple", "coefficients", "target", "residual", "reassembly_error",
                                     "no_parent_terms"], rows)
    print(f"extract: {len(rows)} triples, max reassembly error {worst:.3e}")
    return EXIT_OK if worst <= cfg["tolerance"] else EXIT_GATE


def cmd_coeff_bounds(cfg: dict, out: Path) -> int:
    constants, results = _extraction_rows(cfg)
    rows = []
    series = {"separated": [], "diagonal": [], "error": [], "carleson": []}
    fail = False
    for t, rep, _ in results:
        r = rep.report
        mr = r["max_ratio"]
        carl = max(r["carleson"].values()) if r["carleson"] else 0.0
        rows.append([t.name, mr["separated"], mr["diagonal"], mr["error"], carl,
                     r["coefficients_checked"]["separated"] + r["coefficients_checked"]["diagonal"]
                     + r["coefficients_checked"]["error"]])
        for b in ("separated", "diagonal", "error"):
            series[b].append(mr[b])
        series["carleson"].append(carl)
        fail |= r["max_ratio_overall"] >= 1.0 or carl > 1.0
    _write_csv(out / "coeff_bounds.csv", ["triple", "separated", "diagonal", "error", "carleson",
                                          "coefficients"], rows)
    summary = {b: max(v) if v else 0.0 for b, v in series.items()}
    _write_json(out / "coeff_bounds.json", {"max_ratio": summary, "constants": constants.to_json(),
                                            "passed": not fail})
    _figure(cfg, "ratio_histogram", {b: series[b] for b in ("separated", "diagonal", "error")},
            out / "coeff_bounds.png", title="max coefficient ratio per triple")
    print("coeff-bounds: max ratio " + ", ".join(f"{b} {v:.4f}" for b, v in summary.items()))
    return EXIT_GATE if fail else EXIT_OK


def cmd_pi_good(cfg: dict, out: Path) -> int:
    g = cfg["grid"]
    params = GoodnessParams.from_alpha(g["alpha"], g["n"], g["r"])
    L, S = max(g["L"], max(cfg["pi_levels"]) + 1), g["S"]
    rows = []
    for i, lev in enumerate(cfg["pi_levels"]):
        est = estimate_pi_good(params, lev, cfg["trials"], [cfg["seed"], i], L=L, S=S)
        try:
            exact = exact_pi_good(params, lev, L, S)
        except ValueError:
            exact = float("nan")
        lo, hi = est.interval(3.0)
        rows.append([lev, est.value, est.stderr, lo, hi, exact, est.trials])
        print(f"pi-good: level {lev}: {est.value:.4f} +/- {est.stderr:.4f} "
              f"(3-sigma interval [{lo:.4f}, {hi:.4f}], exact {exact:.4f})")
    _write_csv(out / "pi_good.csv", ["base_level", "estimate", "stderr", "lo3", "hi3", "exact", "trials"], rows)
    _figure(cfg, "level_profile", [r[0] for r in rows], [r[1] for r in rows], out / "pi_good.png",
            ylabel="pi_good", title=f"r = {params.r}, gamma = {params.gamma:.4f}",
            errors=[3 * r[2] for r in rows])
    return EXIT_OK


def cmd_sparse(cfg: dict, out: Path) -> int:
    K, trunc, quad, params, grid = _objects(cfg)
    grid = standard_grid(1, grid.L, grid.S)
    eta = cfg["eta"]
    rng = np.random.default_rng(cfg["seed"])
    rows, fail = [], False
    first = None
    for t in _corpus(cfg):
        fs = t.functions()
        i, j, k = (int(v) for v in rng.integers(0, 3, 3))
        spec = random_shift(grid, i, j, k, rng, density=0.5, max_records=4000)
        B = norm_harness(lambda a, b: shift_apply(spec, a, b), grid.L, 4.0, 4.0, 10, rng.integers(2**32)).max_ratio
        F = shift_adapter(spec, bound_B=B)
        S, dom = sparse_dominate(F, *fs, eta)
        vs = verify_sparse(S)
        stage_ok = all(s["bound_ok"] for s in S.stages)
        U = universal_sparse(*fs, eta, grid)
        vu = verify_sparse(U)
        ud = universal_dominates(S, U, *fs)
        fail |= not (vs.passed and stage_ok and vu.passed) or layer_multiplicity(U) > 1
        rows.append([t.name, len(S), vs.min_ratio, stage_ok, f"{i}{j}{k}", B, dom.rho, dom.form, dom.sparse,
                     dom.ratio, len(U), vu.min_ratio, ud["ratio"]])
        if first is None:
            first = S
        if len(S) == 1:
            print(f"sparse: {t.name}: S = {{Q0}} = {S.cubes[0].to_json()}")
    _write_csv(out / "sparse.csv", ["triple", "cubes", "major_ratio_min", "stage_bound", "shift", "B", "rho",
                                    "form", "lambda", "domination_ratio", "universal_cubes",
                                    "universal_major_ratio_min", "lambda_S_over_lambda_U"], rows)
    _write_json(out / "sparse.json", {"eta": eta, "C0": stopping_constant(eta), "C": universal_constant(eta),
                                      "max_domination_ratio": max(r[9] for r in rows),
                                      "max_universal_ratio": max(r[12] for r in rows), "passed": not fail,
                                      "first_family": first.to_json() if first is not None else None})
    if first is not None:
        _figure(cfg, "sparse_family", first.cubes, grid.L, out / "sparse_family.png",
                title=f"stopping family, eta = {eta}")
    print(f"sparse: {len(rows)} triples, max domination ratio {max(r[9] for r in rows):.4g}, "
          f"max Lambda_S / Lambda_U {max(r[12] for r in rows):.4g}")
    return EXIT_GATE if fail else EXIT_OK


def cmd_norms(cfg: dict, out: Path) -> int:
    g = cfg["grid"]
    grid = standard_grid(1, g["L"], 0)
    rng = np.random.default_rng(cfg["seed"])
    rows = []
    for s in range(cfg["shifts"]):
        i, j, k = (int(v) for v in rng.integers(0, 3, 3))
        spec = random_shift(grid, i, j, k, rng, density=0.5, max_records=4000)
        rep = norm_harness(lambda a, b: shift_apply(spec, a, b), g["L"], 4.0, 4.0, cfg["trials"],
                           int(rng.integers(2**32)))
        rows.append([s, f"{i}{j}{k}", len(spec), rep.max_ratio, float(np.median(rep.ratios))])
    maxes = np.array([r[3] for r in rows])
    med = float(np.median(maxes))
    stable = bool(np.all(maxes <= 10 * med))
    _write_csv(out / "norms.csv", ["shift", "levels", "records", "max_ratio", "median_ratio"], rows)
    _write_json(out / "norms.json", {"max_ratio": float(maxes.max()), "median_of_max": med, "stable": stable})
    _figure(cfg, "ratio_series", maxes, out / "norms.png", ylabel="||S(f,g)||_2 / (||f||_4 ||g||_4)",
            reference=10 * med)
    print(f"norms: {len(rows)} shifts, max ratio {maxes.max():.4f}, median {med:.4f}, stable {stable}")
    return EXIT_OK if stable else EXIT_GATE


def cmd_corollary(cfg: dict, out: Path) -> int:
    K, trunc, quad, params, grid = _objects(cfg)
    grid = standard_grid(1, grid.L, grid.S)
    ladder = cfg["eps_ladder"] or default_eps_ladder()
    const = corollary_constant(K, ladder, grid.L, quad)
    rows = []
    for t in _corpus(cfg):
        r = corollary_check(K, ladder, *t.functions(), cfg["eta"], grid, const, quad)
        rows.append([t.name, r["sup"], r["lambda"], r["ratio"], r["cubes"], r["sparse_ok"]])
    worst = max(r[3] for r in rows)
    _write_csv(out / "corollary.csv", ["triple", "sup_pairing", "lambda", "ratio", "cubes", "sparse_ok"], rows)
    _write_json(out / "corollary.json", {"constant": const, "eps_ladder": ladder, "max_ratio": worst})
    _figure(cfg, "ratio_series", [r[3] for r in rows], out / "corollary.png",
            ylabel="sup |<T_eps(f,g),h>| / (C_est Lambda_S)", reference=1.0)
    print(f"corollary: C_est {const['C_est']:.4f}, max ratio {worst:.4g}")
    return EXIT_OK if worst <= 1.0 else EXIT_GATE


HANDLERS = {"decompose": cmd_decompose, "extract": cmd_extract, "coeff-bounds": cmd_coeff_bounds,
            "pi-good": cmd_pi_good, "sparse": cmd_sparse, "norms": cmd_norms, "corollary": cmd_corollary}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dyadrep", description="Dyadic representation and sparse-domination experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON config file")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", default=None, help="output directory (default out/<command>)")
        s.add_argument("--threads", type=int, help="accepted for compatibility; runs single-threaded")
        s.add_argument("--eta", type=float)
        s.add_argument("--r", type=int)
        s.add_argument("--trials", type=int)
        s.add_argument("--eps", type=float, help="truncation eps (or the first ladder point for corollary)")
        s.add_argument("--no-figures", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    over = {"seed": args.seed, "eta": args.eta, "trials": args.trials, "threads": args.threads}
    if args.r is not None:
        over["grid"] = {"r": args.r}
    if args.eps is not None:
        if args.command == "corollary":
            over["eps_ladder"] = default_eps_ladder(base=args.eps)
        else:
            over["trunc"] = {"eps": args.eps}
    if args.no_figures:
        over["figures"] = False
    try:
        cfg = resolve_config(args.config, over)
        _objects(cfg)
    except (ConfigError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out or Path("out") / args.command)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg)
    t0 = time.perf_counter()
    code = HANDLERS[args.command](cfg, out)
    log.info("%s finished in %.1f s with exit code %d", args.command, time.perf_counter() - t0, code)
    return code


if __name__ == "__main__":
    sys.exit(main())
