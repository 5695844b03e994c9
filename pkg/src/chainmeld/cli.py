"""Config-driven command-line front end.

Subcommands: ``validate`` (config + chain checks), ``pool-grid`` (export a
normalized pooled-prior grid), ``sample`` (run the configured sampler and
write sample/diagnostic CSVs), ``oracle`` (exact enumeration for discrete
chains, with sampler TV when a sampler is configured), and ``diag``
(recompute diagnostics from a previously written sample CSV).

All numeric CSV output uses the shortest round-trip decimal representation
and a deterministic row order, so a fixed config and seed byte-reproduce
every artifact.  Exit codes: 0 ok, 1 config error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .builtins import (
    BuiltChain,
    builtin_discrete_chain,
    builtin_gaussian_chain,
    empirical_table,
    enumerate_melded_posterior,
    tv_distance,
)
from .chain import UnitFactorization, validate_chain
from .errors import ChainmeldError, ConfigError
from .normal_approx import build_normal_approx_target, fit_gaussian_moments
from .pooling import (
    GridSpec,
    PooledPrior,
    dictatorial_complete,
    dictatorial_partial,
    factorize_for_sampler,
    grid_normalize,
    linear_pooling,
    log_pooling,
    poe_pooling,
)
from .samplers import (
    MHKernelConfig,
    MeldedChainOutput,
    mh_step,
    run_parallel_stage_two,
    run_parallel_stage_two_unitwise,
    run_sequential,
    run_stage_one_pair,
)
from .diagnostics import ess_bulk, ess_tail, split_rhat

__all__ = ["main", "run_from_config", "load_config", "build_model", "build_pool"]

_SAMPLER_KINDS = ("parallel", "parallel-unitwise", "sequential", "normal-approx")


def _require(cfg: dict, path: str, types=None):
    node = cfg
    walked = []
    for key in path.split("."):
        walked.append(key)
        if not isinstance(node, dict) or key not in node:
            raise ConfigError(f"{'.'.join(walked)}: missing required key")
        node = node[key]
    if types is not None and not isinstance(node, types):
        raise ConfigError(f"{path}: expected {types}, got {type(node).__name__}")
    return node


def load_config(path: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"config file unreadable: {exc}") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    cfg["_sha256"] = hashlib.sha256(text.encode()).hexdigest()
    return cfg


def validate_config(cfg: dict) -> None:
    name = _require(cfg, "model.name", str)
    if name not in ("gaussian-chain", "discrete-chain"):
        raise ConfigError(f"model.name: unknown builtin {name!r}")
    _require(cfg, "pooling.method", str)
    if "sampler" in cfg:
        kind = _require(cfg, "sampler.kind", str)
        if kind not in _SAMPLER_KINDS:
            raise ConfigError(f"sampler.kind: unknown sampler {kind!r}")
        seed = _require(cfg, "sampler.seed")
        if not isinstance(seed, int):
            raise ConfigError("sampler.seed: must be an integer (no default)")
        iters = _require(cfg, "sampler.iterations", dict)
        for stage, n in iters.items():
            if not isinstance(n, int) or n < 100:
                raise ConfigError(f"sampler.iterations.{stage}: must be an int >= 100")
    _require(cfg, "outputs.directory", str)


def build_model(cfg: dict) -> BuiltChain:
    name = _require(cfg, "model.name", str)
    params = dict(cfg["model"].get("params", {}))
    if name == "gaussian-chain":
        return builtin_gaussian_chain(**params)
    for key in ("prior1", "prior2", "prior3"):
        if key in params:
            params[key] = np.asarray(params[key], dtype=float)
    if "likelihoods" in params:
        params["likelihoods"] = tuple(
            None if t is None else np.asarray(t, dtype=float)
            for t in params["likelihoods"]
        )
    if "units" in params:
        params["units"] = tuple(
            None
            if u is None
            else UnitFactorization(
                tuple(tuple(i) for i in u["phi_indices"]),
                tuple(tuple(i) for i in u["psi_indices"]),
            )
            for u in params["units"]
        )
    return builtin_discrete_chain(**params)


def build_pool(cfg: dict, built: BuiltChain) -> PooledPrior:
    method = _require(cfg, "pooling.method", str)
    lam = cfg["pooling"].get("lambda")
    marginals = built.boundary_marginals
    if method in ("logarithmic", "log"):
        if lam is None:
            raise ConfigError("pooling.lambda: required for logarithmic pooling")
        return log_pooling(built.model, lam)
    if method == "poe":
        return poe_pooling(built.model)
    if method == "linear":
        if lam is None:
            raise ConfigError("pooling.lambda: required for linear pooling")
        return linear_pooling(built.model, lam, marginals)
    if method == "dictatorial-partial":
        return dictatorial_partial(
            built.model,
            int(_require(cfg, "pooling.authoritative")),
            side_weights=lam,
            boundary_marginals=marginals,
        )
    if method == "dictatorial-complete":
        return dictatorial_complete(
            built.model,
            _require(cfg, "pooling.choices", list),
            boundary_marginals=marginals,
        )
    raise ConfigError(f"pooling.method: unknown method {method!r}")


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _write_csv(path: Path, header: list[str], rows) -> None:
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _vector_columns(name: str, dim: int) -> list[str]:
    if dim == 1:
        return [name]
    return [f"{name}_{i}" for i in range(dim)]


def _write_manifest(out_dir: Path, cfg: dict, extra: dict) -> None:
    lines = [
        f"seed: {cfg.get('sampler', {}).get('seed', 'n/a')}",
        f"config_sha256: {cfg.get('_sha256', 'n/a')}",
        f"chainmeld_version: {__version__}",
        f"numpy_version: {np.__version__}",
        f"scipy_version: {scipy.__version__}",
    ]
    for key in sorted(extra):
        lines.append(f"{key}: {extra[key]}")
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n")


def _sample_columns(output: MeldedChainOutput) -> tuple[list[str], list[str]]:
    names = []
    groups = []
    for group in ("phi12", "phi23", "psi2", "psi1", "psi3"):
        dim = getattr(output, group).shape[2]
        if dim == 0:
            continue
        names.extend(_vector_columns(group, dim))
        groups.extend([group] * dim)
    return names, groups


def _write_samples(out_dir: Path, output: MeldedChainOutput) -> Path:
    names, groups = _sample_columns(output)
    chains, kept = output.phi12.shape[:2]
    rows = []
    for c in range(chains):
        for t in range(kept):
            row = [c, t]
            for group in ("phi12", "phi23", "psi2", "psi1", "psi3"):
                arr = getattr(output, group)
                if arr.shape[2]:
                    row.extend(arr[c, t])
            rows.append(row)
    path = out_dir / "melded_samples.csv"
    _write_csv(path, ["chain", "iteration"] + names, rows)
    return path


def _write_diagnostics(out_dir: Path, output: MeldedChainOutput) -> Path:
    names, groups = _sample_columns(output)
    rates = output.acceptance_rates()
    mean_rate = sum(rates.values()) / max(1, len(rates))
    rows = []
    col_of_group: dict[str, int] = {}
    for name, group in zip(names, groups):
        k = col_of_group.get(group, 0)
        col_of_group[group] = k + 1
        traces = getattr(output, group)[:, :, k]
        rhat = split_rhat(traces) if traces.shape[0] > 1 else None
        rows.append(
            [
                name,
                float("nan") if rhat is None else rhat.value,
                ess_bulk(traces).value,
                ess_tail(traces).value,
                mean_rate,
            ]
        )
    path = out_dir / "diagnostics.csv"
    _write_csv(path, ["parameter", "rhat", "ess_bulk", "ess_tail", "acceptance_rate"], rows)
    return path


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------


def _kernels(cfg: dict) -> dict[str, MHKernelConfig]:
    scales = cfg.get("sampler", {}).get("scales", {})
    return {
        stage: MHKernelConfig(scales=float(scales.get(stage, 0.5)))
        for stage in ("stage_one", "stage_two", "stage_three")
    }


def _run_sampler(cfg: dict, built: BuiltChain, pool: PooledPrior) -> MeldedChainOutput:
    sampler = cfg["sampler"]
    kind = sampler["kind"]
    seed = sampler["seed"]
    chains = int(sampler.get("chains", 1))
    iters = sampler["iterations"]
    warmup = float(sampler.get("warmup_frac", 0.1))
    factor = factorize_for_sampler(pool, sampler.get("factorization", "subprior-ends"))
    kernels = _kernels(cfg)
    if kind == "sequential":
        return run_sequential(
            built.model,
            factor,
            kernels["stage_one"],
            kernels["stage_two"],
            kernels["stage_three"],
            (
                iters.get("stage_one", 1000),
                iters.get("stage_two", 1000),
                iters.get("stage_three", 1000),
            ),
            chains=chains,
            seed=seed,
            warmup_frac=warmup,
        )
    if kind == "normal-approx":
        return _run_normal_approx(cfg, built, factor, kernels, chains, seed, warmup)
    store1, store3 = run_stage_one_pair(
        built.model,
        factor,
        kernels["stage_one"],
        kernels["stage_one"],
        iters.get("stage_one", 1000),
        chains=chains,
        seed=seed,
        warmup_frac=warmup,
    )
    runner = run_parallel_stage_two if kind == "parallel" else run_parallel_stage_two_unitwise
    return runner(
        built.model,
        factor,
        store1,
        store3,
        kernels["stage_two"],
        iters.get("stage_two", 1000),
        chains=chains,
        seed=seed + 1,
        warmup_frac=warmup,
    )


def _run_normal_approx(cfg, built: BuiltChain, factor, kernels, chains, seed, warmup):
    model = built.model
    iters = cfg["sampler"]["iterations"]
    store1, store3 = run_stage_one_pair(
        model, factor, kernels["stage_one"], kernels["stage_one"],
        iters.get("stage_one", 1000), chains=chains, seed=seed, warmup_frac=warmup,
    )
    g1_post = fit_gaussian_moments(store1, "phi")
    g3_post = fit_gaussian_moments(store3, "phi")
    g1_prior = built.meta["prior1"]
    g3_prior = built.meta["prior3"]
    mode = cfg["sampler"].get("normal_approx_mode", "ratio")
    target = build_normal_approx_target(model, g1_post, g1_prior, g3_post, g3_prior, mode)
    d12 = model.phi_blocks[0].dim
    d23 = model.phi_blocks[1].dim
    spec2 = model.submodels[1]
    coords = (
        tuple(model.phi_blocks[0].coords)
        + tuple(model.phi_blocks[1].coords)
        + tuple(spec2.psi_coords)
    )

    def log_target(state):
        return target(state[:d12], state[d12 : d12 + d23], state[d12 + d23 :])

    n2 = iters.get("stage_two", 1000)
    keep = n2 - int(warmup * n2)
    out = {
        "phi12": np.empty((chains, keep, d12)),
        "phi23": np.empty((chains, keep, d23)),
        "psi1": np.zeros((chains, keep, 0)),
        "psi2": np.empty((chains, keep, spec2.psi_dim)),
        "psi3": np.zeros((chains, keep, 0)),
        "indices": np.zeros((chains, keep, 0), dtype=int),
    }
    accepted = 0
    for c, ss in enumerate(np.random.SeedSequence(seed + 1).spawn(chains)):
        rng = np.random.default_rng(ss)
        state = np.concatenate(
            [g1_post.mean, g3_post.mean, np.zeros(spec2.psi_dim)]
        )
        log_p = log_target(state)
        for t in range(n2):
            state, log_p, acc = mh_step(
                state, log_p, log_target, coords, kernels["stage_two"], rng
            )
            accepted += acc
            if t >= n2 - keep:
                k = t - (n2 - keep)
                out["phi12"][c, k] = state[:d12]
                out["phi23"][c, k] = state[d12 : d12 + d23]
                out["psi2"][c, k] = state[d12 + d23 :]
    return MeldedChainOutput(
        **out,
        accept_counts={"normal-approx": accepted},
        proposal_counts={"normal-approx": chains * n2},
        seed=seed,
    )


def _cmd_validate(cfg: dict) -> int:
    validate_config(cfg)
    built = build_model(cfg)
    build_pool(cfg, built)
    report = validate_chain(built.model)
    for line in report:
        print(f"invalid: {line}")
    print("config ok" if not report else f"{len(report)} problems found")
    return 0 if not report else 1


def _cmd_pool_grid(cfg: dict, out_dir: Path) -> int:
    built = build_model(cfg)
    pool = build_pool(cfg, built)
    axes = cfg.get("grid", {}).get("axes")
    if axes is None:
        raise ConfigError("grid.axes: required for pool-grid")
    spec = GridSpec(tuple((float(a[0]), float(a[1]), int(a[2])) for a in axes))
    table = grid_normalize(pool, spec)
    dim = len(spec.axes)
    header = [f"x{i}" for i in range(dim)] + ["density"]
    _write_csv(out_dir / "pooled_grid.csv", header, table.rows())
    print(f"grid mass {table.total_mass()!r}")
    if dim >= 2:
        print(f"grid correlation {table.correlation(0, 1)!r}")
    _write_manifest(out_dir, cfg, {"artifact": "pooled_grid.csv"})
    return 0


def _cmd_sample(cfg: dict, out_dir: Path) -> int:
    validate_config(cfg)
    if "sampler" not in cfg:
        raise ConfigError("sampler: required for the sample command")
    built = build_model(cfg)
    pool = build_pool(cfg, built)
    output = _run_sampler(cfg, built, pool)
    _write_samples(out_dir, output)
    _write_diagnostics(out_dir, output)
    rates = output.acceptance_rates()
    _write_manifest(
        out_dir,
        cfg,
        {f"acceptance_rate.{k}": repr(v) for k, v in rates.items()},
    )
    print(f"wrote {out_dir / 'melded_samples.csv'}")
    return 0


def _cmd_oracle(cfg: dict, out_dir: Path) -> int:
    built = build_model(cfg)
    if built.supports is None:
        raise ConfigError("model.name: oracle enumeration requires discrete-chain")
    pool = build_pool(cfg, built)
    oracle = enumerate_melded_posterior(built, pool)
    header = [f"x{i}" for i in range(oracle.states.shape[1])] + ["probability"]
    rows = [tuple(oracle.states[k]) + (oracle.probs[k],) for k in range(len(oracle.probs))]
    _write_csv(out_dir / "oracle_posterior.csv", header, rows)
    extra = {"artifact": "oracle_posterior.csv"}
    if "sampler" in cfg:
        validate_config(cfg)
        output = _run_sampler(cfg, built, pool)
        tv = tv_distance(empirical_table(output.state_matrix(), oracle), oracle)
        print(f"sampler TV {tv!r}")
        extra["sampler_tv"] = repr(tv)
    _write_manifest(out_dir, cfg, extra)
    return 0


def _cmd_diag(cfg: dict, out_dir: Path) -> int:
    path = out_dir / "melded_samples.csv"
    if not path.exists():
        raise ChainmeldError(f"no sample file at {path}; run the sample command first")
    with path.open() as handle:
        reader = csv.reader(handle)
        header = next(reader)
        data = np.array([[float(v) for v in row] for row in reader])
    chain_ids = data[:, 0].astype(int)
    chains = chain_ids.max() + 1
    rows = []
    for j, name in enumerate(header[2:], start=2):
        traces = np.stack([data[chain_ids == c, j] for c in range(chains)])
        rhat = split_rhat(traces).value if chains > 1 else float("nan")
        rows.append([name, rhat, ess_bulk(traces).value, ess_tail(traces).value, float("nan")])
    _write_csv(
        out_dir / "diagnostics.csv",
        ["parameter", "rhat", "ess_bulk", "ess_tail", "acceptance_rate"],
        rows,
    )
    print(f"wrote {out_dir / 'diagnostics.csv'}")
    return 0


def run_from_config(cfg: dict, command: str = "sample") -> int:
    out_dir = Path(_require(cfg, "outputs.directory", str))
    out_dir.mkdir(parents=True, exist_ok=True)
    if command == "validate":
        return _cmd_validate(cfg)
    if command == "pool-grid":
        return _cmd_pool_grid(cfg, out_dir)
    if command == "sample":
        return _cmd_sample(cfg, out_dir)
    if command == "oracle":
        return _cmd_oracle(cfg, out_dir)
    if command == "diag":
        return _cmd_diag(cfg, out_dir)
    raise ConfigError(f"unknown command {command!r}")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="chainmeld",
        description="Chained model melding: pooled priors and multi-stage samplers.",
    )
    parser.add_argument("command", choices=["validate", "pool-grid", "sample", "oracle", "diag"])
    parser.add_argument("--config", required=True, help="path to a JSON run config")
    parser.add_argument("--seed", type=int, default=None, help="override sampler seed")
    parser.add_argument("--out-dir", default=None, help="override outputs.directory")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.setdefault("sampler", {})["seed"] = args.seed
        if args.out_dir is not None:
            cfg.setdefault("outputs", {})["directory"] = args.out_dir
        if args.command in ("validate", "sample"):
            validate_config(cfg)
        return run_from_config(cfg, args.command)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except ChainmeldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
