"""Command-line pipeline around the library.

Subcommands: ``validate`` (load and report on study CSVs), ``mom``
(method-of-moments stratum proportions), ``fit`` (posterior sampling,
writes draws.csv + diagnostics.json), ``estimate`` (data augmentation over
a draws file, writes estimands.csv / profiles.json / homophily.csv),
``simulate`` (synthetic study with truth.json), ``gradcheck``
(finite-difference audit of the analytic gradient), and ``diagnose``
(recompute convergence diagnostics from a draws file).

Every run writes ``manifest.json`` into the output directory: subcommand,
effective options, inlined config, and sha256 digests of each input file.
A fit-then-estimate pair is reproducible from the two manifests alone.
Exit codes: 0 success, 1 usage or validation failure, 2 sampler failure,
3 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .data import CovariateSpec, StudyData, ValidationError, load_study, \
    validation_report, write_study
from .estimands import ESTIMAND_COLUMNS, default_requests, compute_estimands, \
    summary_rows
from .model import ParamSpace, PriorConfig, make_posterior
from .sampler import SamplerConfig, SamplerError, diagnose, sample
from .simulate import SimConfig, generate, truth_to_dict
from .strata import STRATUM_CODES, STRATUM_LABELS, mom_estimate

DRAWS_FILE = "draws.csv"


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse maps its own failures to exit code 2; we want 1."""

    def error(self, message):
        raise _UsageError(message)


@dataclass
class RunConfig:
    """Resolved invocation: subcommand, paths, and effective options."""

    subcommand: str
    classes: str | None = None
    students: str | None = None
    edges: str | None = None
    out: str | None = None
    seed: int = 0
    chains: int = 4
    warmup: int = 1000
    samples: int = 1000
    threads: int = 1
    s_grid: tuple = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
    contrasts: tuple = ((2, 1), (3, 1), (3, 2))
    config_path: str | None = None
    config: dict = field(default_factory=dict)

    def options_dict(self) -> dict:
        return {
            "classes": self.classes, "students": self.students,
            "edges": self.edges, "out": self.out, "seed": self.seed,
            "chains": self.chains, "warmup": self.warmup,
            "samples": self.samples, "threads": self.threads,
            "s_grid": list(self.s_grid),
            "contrasts": [list(c) for c in self.contrasts],
        }


def _build_parser() -> _Parser:
    p = _Parser(prog="netstrat", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="subcommand", required=True)
    for name, desc in (
        ("validate", "check study CSVs and print a structure report"),
        ("mom", "method-of-moments stratum proportions with bootstrap SEs"),
        ("fit", "sample the posterior; writes draws.csv and diagnostics.json"),
        ("estimate", "augmentation over draws.csv; writes estimands/profiles/homophily"),
        ("simulate", "generate a synthetic study plus truth.json"),
        ("gradcheck", "finite-difference audit of the analytic gradient"),
        ("diagnose", "recompute split R-hat / ESS from draws.csv"),
    ):
        sp = sub.add_parser(name, help=desc)
        sp.add_argument("--classes", help="classes.csv path (simulate: class count)")
        sp.add_argument("--students", help="students.csv path (simulate: class size)")
        sp.add_argument("--edges", help="edges.csv path (simulate: edge probability)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--chains", type=int, default=4)
        sp.add_argument("--warmup", type=int, default=1000)
        sp.add_argument("--samples", type=int, default=1000)
        sp.add_argument("--threads", type=int, default=None,
                        help="chain threads; NETSTRAT_THREADS as fallback")
        sp.add_argument("--s-grid", dest="s_grid",
                        help="comma-separated mediator values for controlled effects")
        sp.add_argument("--contrasts",
                        help="arm contrasts like 2-1,3-1,3-2")
        sp.add_argument("--config", dest="config_path",
                        help="JSON file with prior/sampler/model overrides")
    return p


def _parse_args(argv) -> RunConfig:
    ns = _build_parser().parse_args(argv)
    threads = ns.threads
    if threads is None:
        threads = int(os.environ.get("NETSTRAT_THREADS", "1"))
    if threads < 1:
        raise _UsageError("--threads must be positive")
    cfg = {}
    if ns.config_path:
        try:
            with open(ns.config_path, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise _UsageError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(cfg, dict):
            raise _UsageError("config must be a JSON object")
    rc = RunConfig(subcommand=ns.subcommand, classes=ns.classes,
                   students=ns.students, edges=ns.edges, out=ns.out,
                   seed=ns.seed, chains=ns.chains, warmup=ns.warmup,
                   samples=ns.samples, threads=threads,
                   config_path=ns.config_path, config=cfg)
    if ns.s_grid:
        try:
            rc.s_grid = tuple(float(v) for v in ns.s_grid.split(","))
        except ValueError as exc:
            raise _UsageError(f"bad --s-grid: {ns.s_grid!r}") from exc
    if ns.contrasts:
        try:
            rc.contrasts = tuple(
                tuple(int(a) for a in pair.split("-"))
                for pair in ns.contrasts.split(","))
        except ValueError as exc:
            raise _UsageError(f"bad --contrasts: {ns.contrasts!r}") from exc
        for pair in rc.contrasts:
            if len(pair) != 2 or not all(a in (1, 2, 3) for a in pair):
                raise _UsageError(f"bad contrast {pair}: arms are 1, 2, 3")
    return rc


# ---------------------------------------------------------------------------
# shared helpers


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _ensure_out(rc: RunConfig) -> str:
    if not rc.out:
        raise _UsageError(f"{rc.subcommand} requires --out")
    os.makedirs(rc.out, exist_ok=True)
    return rc.out


def _write_manifest(rc: RunConfig, inputs: dict, outputs: list):
    doc = {
        "package_version": __version__,
        "subcommand": rc.subcommand,
        "seed": rc.seed,
        "options": rc.options_dict(),
        "config": rc.config,
        "inputs": {name: {"path": path, "sha256": _sha256(path)}
                   for name, path in inputs.items()},
        "outputs": sorted(outputs),
    }
    path = os.path.join(rc.out, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_data(rc: RunConfig) -> StudyData:
    missing = [flag for flag, val in
               (("--classes", rc.classes), ("--students", rc.students),
                ("--edges", rc.edges)) if not val]
    if missing:
        raise _UsageError(f"{rc.subcommand} requires {', '.join(missing)}")
    data = load_study(rc.classes, rc.students, rc.edges)
    masks = rc.config.get("covariates")
    if masks:
        spec = data.covariate_spec
        chosen_s = masks.get("strata", list(spec.names))
        chosen_o = masks.get("outcome", list(spec.names))
        unknown = (set(chosen_s) | set(chosen_o)) - set(spec.names)
        if unknown:
            raise ValidationError(f"config covariates not in data: {sorted(unknown)}")
        new_spec = CovariateSpec(
            names=spec.names, kinds=spec.kinds,
            strata_mask=tuple(n in chosen_s for n in spec.names),
            outcome_mask=tuple(n in chosen_o for n in spec.names))
        data = StudyData(students=data.students, classes=data.classes,
                         network=data.network, covariate_spec=new_spec)
    return data


def _data_inputs(rc: RunConfig) -> dict:
    inputs = {"classes": rc.classes, "students": rc.students, "edges": rc.edges}
    if rc.config_path:
        inputs["config"] = rc.config_path
    return inputs


def _prior_from_config(rc: RunConfig) -> PriorConfig:
    raw = rc.config.get("prior", {})
    allowed = {"sd_strata_coef", "sd_outcome_coef", "sd_sigma"}
    unknown = set(raw) - allowed
    if unknown:
        raise _UsageError(f"unknown prior fields: {sorted(unknown)}")
    return PriorConfig(**raw)


def _sampler_config(rc: RunConfig) -> SamplerConfig:
    raw = dict(rc.config.get("sampler", {}))
    raw.setdefault("chains", rc.chains)
    raw.setdefault("warmup", rc.warmup)
    raw.setdefault("samples", rc.samples)
    raw.setdefault("seed", rc.seed)
    raw.setdefault("threads", rc.threads)
    try:
        return SamplerConfig(**raw)
    except TypeError as exc:
        raise _UsageError(f"bad sampler config: {exc}") from exc


def _free_beta_s3(rc: RunConfig) -> bool:
    return bool(rc.config.get("free_beta_s3", False))


def _write_draws_csv(path: str, draws):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["chain", "iteration", "log_posterior"] + list(draws.names))
        for c in range(draws.n_chains):
            for i in range(draws.n_samples):
                writer.writerow(
                    [c, i, repr(float(draws.log_posts[c, i]))]
                    + [repr(float(v)) for v in draws.positions[c, i]])


def _read_draws_csv(path: str):
    """Returns (names, chain ids, (n_rows, dim) matrix, log posts)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:3] != ["chain", "iteration", "log_posterior"]:
            raise ValidationError(f"{path} is not a draws file")
        names = header[3:]
        chains, lps, rows = [], [], []
        for rec in reader:
            chains.append(int(rec[0]))
            lps.append(float(rec[2]))
            rows.append([float(v) for v in rec[3:]])
    if not rows:
        raise ValidationError(f"{path} holds no draws")
    return names, np.array(chains), np.array(rows), np.array(lps)


def _stack_by_chain(chain_ids: np.ndarray, flat: np.ndarray) -> np.ndarray:
    labels = np.unique(chain_ids)
    per = [flat[chain_ids == c] for c in labels]
    if len({p.shape[0] for p in per}) != 1:
        raise ValidationError("chains have unequal lengths in draws file")
    return np.stack(per)


def _diag_dict(diag) -> dict:
    return diag.as_dict()


# ---------------------------------------------------------------------------
# subcommands


def _cmd_validate(rc: RunConfig) -> int:
    data = _load_data(rc)
    report = validation_report(data)
    print(json.dumps(report, indent=2, sort_keys=True))
    if rc.out:
        _ensure_out(rc)
        with open(os.path.join(rc.out, "report.json"), "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
        _write_manifest(rc, _data_inputs(rc), ["report.json"])
    print(f"ok: {data.n_students} students in {data.n_classes} classes, "
          f"{len(data.network.edges)} friendship ties")
    return 0


def _cmd_mom(rc: RunConfig) -> int:
    data = _load_data(rc)
    est = mom_estimate(data, seed=rc.seed)
    print("stratum proportions (method of moments, cluster bootstrap SE):")
    for k, code in enumerate(STRATUM_CODES):
        print(f"  {STRATUM_LABELS[code]:<22s} {code}  "
              f"{est.proportions[k]:.3f}  (SE {est.standard_errors[k]:.3f})")
    if est.monotonicity_violation:
        print("  warning: some raw proportions fall outside [0, 1]")
    if rc.out:
        _ensure_out(rc)
        with open(os.path.join(rc.out, "mom.json"), "w", encoding="utf-8") as fh:
            json.dump(est.as_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        _write_manifest(rc, _data_inputs(rc), ["mom.json"])
    return 0


def _cmd_fit(rc: RunConfig) -> int:
    data = _load_data(rc)
    out = _ensure_out(rc)
    posterior = make_posterior(data, prior=_prior_from_config(rc),
                               free_beta_s3=_free_beta_s3(rc))
    space = posterior.space
    scfg = _sampler_config(rc)
    draws = sample(posterior.log_post, posterior.grad, space.dim, scfg,
                   value_and_grad=posterior.value_and_grad,
                   names=space.names(), constrain=space.constrain_matrix)
    _write_draws_csv(os.path.join(out, DRAWS_FILE), draws)
    diag = diagnose(draws)
    with open(os.path.join(out, "diagnostics.json"), "w", encoding="utf-8") as fh:
        json.dump(_diag_dict(diag), fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(rc, _data_inputs(rc), [DRAWS_FILE, "diagnostics.json"])
    print(f"fit: {scfg.chains} chains x {scfg.samples} draws, "
          f"{int(draws.divergences.sum())} divergent, "
          f"max split R-hat {np.nanmax(diag.rhat):.3f}, "
          f"min ESS {np.nanmin(diag.ess):.0f}")
    return 0


def _requests_from(rc: RunConfig):
    cse_pairs = rc.config.get("cse_pairs")
    if cse_pairs is not None:
        cse_pairs = [tuple(float(v) for v in pair) for pair in cse_pairs]
    return default_requests(contrasts=rc.contrasts, s_grid=rc.s_grid,
                            cse_pairs=cse_pairs)


def _cmd_estimate(rc: RunConfig) -> int:
    data = _load_data(rc)
    out = _ensure_out(rc)
    draws_path = os.path.join(out, DRAWS_FILE)
    if not os.path.exists(draws_path):
        raise ValidationError(
            f"no {DRAWS_FILE} in {out}; run `netstrat fit --out {out}` first")
    names, _chains, flat, _lps = _read_draws_csv(draws_path)
    space = ParamSpace.for_data(data, free_beta_s3=_free_beta_s3(rc))
    if names != space.names():
        raise ValidationError(
            "draws file parameter names do not match this data/config; "
            "re-run fit with the same inputs")
    requests = _requests_from(rc)
    if not requests:
        raise ValidationError("estimate needs a non-empty request list")
    summaries, profiles, homophily = compute_estimands(
        data, flat, requests, seed=rc.seed, space=space)

    est_path = os.path.join(out, "estimands.csv")
    with open(est_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(ESTIMAND_COLUMNS)
        writer.writerows(summary_rows(summaries))
    with open(os.path.join(out, "profiles.json"), "w", encoding="utf-8") as fh:
        json.dump(profiles, fh, indent=2, sort_keys=True)
        fh.write("\n")
    homo_path = os.path.join(out, "homophily.csv")
    with open(homo_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stratum"] + [f"friend_{c}" for c in STRATUM_CODES])
        for k, code in enumerate(STRATUM_CODES):
            writer.writerow([code] + [repr(v) for v in homophily["matrix"][k]])
    inputs = _data_inputs(rc)
    inputs["draws"] = draws_path
    _write_manifest(rc, inputs, ["estimands.csv", "profiles.json", "homophily.csv"])
    print(f"estimate: {len(summaries)} estimand summaries from {flat.shape[0]} draws")
    return 0


def _cmd_simulate(rc: RunConfig) -> int:
    out = _ensure_out(rc)
    overrides = dict(rc.config.get("sim", {}))
    for key in ("gamma", "alpha", "beta_s", "beta_x", "phi", "cov_names",
                "cov_kinds", "s_grid"):
        if key in overrides:
            overrides[key] = tuple(overrides[key])
    if "delta" in overrides:
        overrides["delta"] = tuple(tuple(row) for row in overrides["delta"])
    if rc.classes is not None:
        overrides["n_classes"] = int(rc.classes)
    if rc.students is not None:
        overrides["class_size"] = int(rc.students)
    if rc.edges is not None:
        overrides["edge_prob"] = float(rc.edges)
    overrides["seed"] = rc.seed
    try:
        config = SimConfig(**overrides)
    except (TypeError, ValueError) as exc:
        raise _UsageError(f"bad simulate config: {exc}") from exc
    data, truth = generate(config)
    write_study(data, out)
    with open(os.path.join(out, "truth.json"), "w", encoding="utf-8") as fh:
        json.dump(truth_to_dict(truth), fh, indent=2, sort_keys=True)
        fh.write("\n")
    inputs = {"config": rc.config_path} if rc.config_path else {}
    _write_manifest(rc, inputs,
                    ["classes.csv", "students.csv", "edges.csv", "truth.json"])
    shares = truth.true_shares()
    print(f"simulate: {data.n_students} students in {data.n_classes} classes, "
          f"{len(data.network.edges)} ties; true shares "
          + "/".join(f"{code}={shares[k]:.3f}" for k, code in enumerate(STRATUM_CODES)))
    return 0


def _cmd_gradcheck(rc: RunConfig) -> int:
    if rc.classes or rc.students or rc.edges:
        data = _load_data(rc)
    else:
        data, _ = generate(SimConfig(n_classes=6, class_size=8,
                                     edge_prob=0.3, seed=rc.seed))
    posterior = make_posterior(data, prior=_prior_from_config(rc),
                               free_beta_s3=_free_beta_s3(rc))
    dim = posterior.space.dim
    rng = np.random.default_rng(np.random.SeedSequence(entropy=rc.seed))
    h = 1e-5
    worst = 0.0
    for rep in range(5):
        u = rng.uniform(-1.0, 1.0, size=dim)
        ana = posterior.grad(u)
        fd = np.empty(dim)
        for k in range(dim):
            step = np.zeros(dim)
            step[k] = h
            fd[k] = (posterior.log_post(u + step) - posterior.log_post(u - step)) / (2 * h)
        rel = np.abs(ana - fd) / np.maximum(np.maximum(np.abs(ana), np.abs(fd)), 1e-8)
        worst = max(worst, float(rel.max()))
        print(f"  state {rep}: max relative gradient error {rel.max():.3e}")
    print(f"gradcheck: worst relative error {worst:.3e} over 5 states ({dim} coordinates)")
    if rc.out:
        _ensure_out(rc)
        _write_manifest(rc, _data_inputs(rc) if rc.classes else {}, [])
    if worst > 1e-4:
        print("gradcheck FAILED: analytic gradient disagrees with finite differences",
              file=sys.stderr)
        return 1
    return 0


def _cmd_diagnose(rc: RunConfig) -> int:
    if not rc.out:
        raise _UsageError("diagnose requires --out pointing at a fit directory")
    draws_path = os.path.join(rc.out, DRAWS_FILE)
    if not os.path.exists(draws_path):
        raise ValidationError(f"no {DRAWS_FILE} in {rc.out}; run fit first")
    names, chain_ids, flat, _lps = _read_draws_csv(draws_path)
    positions = _stack_by_chain(chain_ids, flat)
    diag = diagnose(positions, names=names)
    print(f"{'parameter':<24s} {'R-hat':>8s} {'ESS':>10s}")
    for k, name in enumerate(names):
        flag = "  (degenerate)" if diag.degenerate[k] else ""
        print(f"{name:<24s} {diag.rhat[k]:>8.4f} {diag.ess[k]:>10.1f}{flag}")
    print(f"max split R-hat {np.nanmax(diag.rhat):.4f}, "
          f"min ESS {np.nanmin(diag.ess):.1f}")
    _write_manifest(rc, {"draws": draws_path}, ["diagnostics.json"])
    with open(os.path.join(rc.out, "diagnostics.json"), "w", encoding="utf-8") as fh:
        json.dump(_diag_dict(diag), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


_COMMANDS = {
    "validate": _cmd_validate,
    "mom": _cmd_mom,
    "fit": _cmd_fit,
    "estimate": _cmd_estimate,
    "simulate": _cmd_simulate,
    "gradcheck": _cmd_gradcheck,
    "diagnose": _cmd_diagnose,
}


def run(argv=None) -> int:
    """Parse argv, execute the subcommand, and map failures to exit codes."""
    if argv is None:
        argv = sys.argv[1:]
    try:
        rc = _parse_args(list(argv))
        return _COMMANDS[rc.subcommand](rc)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 1
    except SamplerError as exc:
        print(f"sampler error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except SystemExit as exc:  # argparse --help / --version
        code = exc.code
        return 0 if code is None else int(code) if str(code).isdigit() else 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
