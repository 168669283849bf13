"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 I/O or file-format error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from mpsrnn.ansatz import DegenerateStateError, RnnParams, random_params
from mpsrnn.diagnostics import connected_correlations, relative_error, term_contributions, write_site_csv
from mpsrnn.hamiltonian import build_afhm, build_tfim
from mpsrnn.io import (
    ConfigError,
    ContainerError,
    import_mps,
    load_checkpoint,
    load_config,
    parse_config,
    save_checkpoint,
)
from mpsrnn.lattice import Lattice
from mpsrnn.mapping import (
    build_area_law_params,
    gauge_absorb,
    lift_1d_to_2d,
    lift_2d_to_tensor,
    lift_to_compressed,
    mps_to_vanilla,
    statevector_to_mps,
)
from mpsrnn.oracle import (
    ConvergenceError,
    all_configs,
    config_index,
    cut_entropy,
    energy_expectation,
    enumerate_wavefunction,
    exact_ground_state,
    sampler_total_variation,
)
from mpsrnn.sampling import sample_batch
from mpsrnn.vmc import TrainingDiverged, VmcConfig, default_schedule, fast_energies, train, write_metrics_csv

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("mpsrnn")


def _config(args) -> dict:
    if getattr(args, "config", None):
        return load_config(args.config)
    return parse_config("")


def _lattice(cfg) -> Lattice:
    try:
        return Lattice(cfg["lattice.kind"], cfg["lattice.L"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _hamiltonian(cfg, lattice):
    if cfg["hamiltonian"] == "afhm":
        return build_afhm(lattice, cfg["hamiltonian.marshall"])
    return build_tfim(lattice, cfg["hamiltonian.g"])


def _lattice_from_meta(meta, cfg=None) -> Lattice:
    if "lattice.kind" in meta and "lattice.L" in meta:
        return Lattice(meta["lattice.kind"], int(meta["lattice.L"]))
    if cfg is not None:
        return _lattice(cfg)
    raise ConfigError("checkpoint has no lattice metadata; pass --config")


def _meta(lattice: Lattice, **extra) -> dict:
    out = {"lattice.kind": lattice.kind, "lattice.L": lattice.L}
    out.update({k: v for k, v in extra.items() if v is not None})
    return out


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True))


# ---------------------------------------------------------------------------
# subcommands


def cmd_map(args) -> int:
    cfg = _config(args)
    lattice = _lattice(cfg)
    chi = args.chi or cfg["ansatz.chi"]
    if args.mps:
        mps = import_mps(args.mps)
        source = "mps-file"
    else:
        if args.statevector:
            psi = np.load(args.statevector)
            source = "statevector-file"
        else:
            _, psi = exact_ground_state(_hamiltonian(cfg, lattice))
            source = "exact-ground-state"
        mps = statevector_to_mps(psi, chi)
    if mps.V != lattice.V:
        raise ConfigError(f"MPS has {mps.V} sites, lattice has {lattice.V}")
    params = mps_to_vanilla(mps, pad=True)
    if args.to == "oned":
        params = gauge_absorb(params)
    save_checkpoint(args.output, params, _meta(lattice, source=source))
    _emit({"command": "map", "variant": params.variant, "chi": params.chi, "output": args.output})
    return EXIT_OK


def cmd_lift(args) -> int:
    params, meta = load_checkpoint(args.input)
    lattice = _lattice_from_meta(meta)
    to = args.to
    if to == "twod":
        out = lift_1d_to_2d(params, lattice, args.noise_std, args.seed)
    elif to == "tensor":
        out = lift_2d_to_tensor(params, args.noise_std, args.seed)
    else:
        out = lift_to_compressed(params, args.noise_std, args.seed)
    if args.phase is not None:
        out = out.replace(phase_enabled=args.phase == "on")
    save_checkpoint(args.output, out, _meta(lattice, source=f"lift:{params.variant}"))
    _emit({"command": "lift", "from": params.variant, "to": out.variant, "output": args.output})
    return EXIT_OK


def _initial_params(cfg, lattice, init) -> RnnParams:
    if init and init != "random":
        params, _ = load_checkpoint(init)
        return params
    return random_params(
        cfg["ansatz.variant"],
        lattice.V,
        cfg["ansatz.chi"],
        seed=cfg["vmc.seed"],
        phase_enabled=cfg.get("ansatz.phase_enabled", True),
    )


def cmd_train(args) -> int:
    cfg = _config(args)
    lattice = _lattice(cfg)
    h = _hamiltonian(cfg, lattice)
    params = _initial_params(cfg, lattice, args.init or cfg["init.from"])
    if params.V != lattice.V:
        raise ConfigError(f"initial parameters have {params.V} sites, lattice has {lattice.V}")
    if "vmc.lr_schedule" in cfg:
        schedule = cfg["vmc.lr_schedule"]
    else:
        schedule = default_schedule(params.chi, cfg.get("vmc.steps", 40000))
    steps = args.steps if args.steps is not None else cfg.get("vmc.steps")
    vcfg = VmcConfig(
        batch_size=cfg["vmc.batch_size"],
        lr_schedule=schedule,
        clip_norm=cfg["vmc.clip_norm"],
        seed=cfg["vmc.seed"],
        eval_samples=cfg["vmc.eval_samples"],
    )
    try:
        result = train(params, lattice, h, vcfg, steps=steps)
    except TrainingDiverged as exc:
        save_checkpoint(args.output, exc.params, _meta(lattice, step=exc.step, status="diverged"))
        if args.metrics:
            write_metrics_csv(args.metrics, exc.metrics)
        log.error("%s; last good parameters written to %s", exc, args.output)
        return EXIT_NUMERICAL
    save_checkpoint(args.output, result.params, _meta(lattice, seed=vcfg.seed, step=len(result.metrics)))
    if args.metrics:
        write_metrics_csv(args.metrics, result.metrics)
    last = result.metrics[-1].energy.real if result.metrics else None
    _emit({"command": "train", "steps": len(result.metrics), "final_energy": last, "events": len(result.events)})
    return EXIT_OK


def cmd_sample(args) -> int:
    params, meta = load_checkpoint(args.checkpoint)
    lattice = _lattice_from_meta(meta)
    batch = sample_batch(params, lattice, args.n, args.seed)
    with open(args.output, "w", encoding="utf-8") as fh:
        fh.write("sample,config,log_prob\n")
        for k, (c, lp) in enumerate(zip(batch.configs, batch.log_probs)):
            fh.write(f"{k},{''.join(map(str, c))},{lp!r}\n")
    _emit({"command": "sample", "n": args.n, "seed": args.seed, "output": args.output})
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    params, meta = load_checkpoint(args.checkpoint)
    lattice = _lattice_from_meta(meta, cfg)
    h = _hamiltonian(cfg, lattice)
    record = {"command": "evaluate"}
    if args.exact:
        psi = enumerate_wavefunction(params, lattice)
        record["energy"] = energy_expectation(psi, h)
        record["method"] = "enumeration"
    else:
        n = args.samples or cfg["vmc.eval_samples"]
        eloc = []
        for start in range(0, n, 1 << 14):
            size = min(1 << 14, n - start)
            batch = sample_batch(params, lattice, size, args.seed, first_id=start)
            eloc.append(fast_energies(params, lattice, h, batch.configs))
        eloc = np.concatenate(eloc)
        record["energy"] = float(np.mean(eloc.real))
        record["stderr"] = float(np.std(eloc.real, ddof=1) / np.sqrt(n))
        record["variance"] = float(np.var(eloc))
        record["samples"] = n
        record["method"] = "sampling"
    if lattice.V <= 16 and not args.no_reference:
        e0, _ = exact_ground_state(h)
        record["reference"] = e0
        record["relative_error"] = relative_error(record["energy"], e0)
    _emit(record)
    return EXIT_OK


def cmd_oracle(args) -> int:
    cfg = _config(args)
    lattice = _lattice(cfg)
    h = _hamiltonian(cfg, lattice)
    e0, psi0 = exact_ground_state(h)
    record = {"command": "oracle", "V": lattice.V, "ground_energy": e0}
    half = list(range(lattice.V // 2))
    record["ground_half_entropy"] = cut_entropy(psi0, half)
    if args.checkpoint:
        params, _ = load_checkpoint(args.checkpoint)
        psi = enumerate_wavefunction(params, lattice)
        e = energy_expectation(psi, h)
        record.update(energy=e, relative_error=relative_error(e, e0), half_entropy=cut_entropy(psi, half))
        if args.tv_samples:
            batch = sample_batch(params, lattice, args.tv_samples, args.seed)
            record["total_variation"] = sampler_total_variation(batch, psi)
    _emit(record)
    return EXIT_OK


def cmd_arealaw(args) -> int:
    try:
        params = build_area_law_params(args.L)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    lattice = Lattice("square", args.L)
    L = args.L
    psi = enumerate_wavefunction(params, lattice)
    configs = all_configs(lattice.V)
    top = [lattice.index(x, 0) for x in range(L)]
    bottom = [lattice.index(x, L - 1) for x in range(L)]
    support = np.all(configs[:, top] == configs[:, bottom], axis=1)
    prob = np.abs(psi) ** 2
    target = support * 2.0 ** (-L * (L - 1))
    entropies = {}
    for y in range(1, L - 1):
        region = [lattice.index(x, yy) for yy in range(y + 1) for x in range(L)]
        entropies[f"rows_0_{y}"] = cut_entropy(psi, region)
    record = {
        "command": "arealaw",
        "L": L,
        "support_size": int(np.count_nonzero(prob > 0)),
        "max_probability_error": float(np.max(np.abs(prob - target))),
        "entropies": entropies,
        "expected_entropy": L * float(np.log(2)),
    }
    if args.output:
        save_checkpoint(args.output, params, _meta(lattice, source="area-law"))
    _emit(record)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    params, meta = load_checkpoint(args.checkpoint)
    lattice = _lattice_from_meta(meta)
    batch = sample_batch(params, lattice, args.samples, args.seed)
    corr, err = connected_correlations(batch, args.ref_site)
    write_site_csv(f"{args.prefix}_correlations.csv", {"correlation": corr, "stderr": err})
    record = {"command": "diagnose", "correlations": f"{args.prefix}_correlations.csv"}
    if params.variant in ("twod", "tensor", "compressed"):
        tc = term_contributions(params, lattice, batch)
        write_site_csv(
            f"{args.prefix}_terms.csv",
            {name: tc[name] for name in ("tensor", "matrix_x", "matrix_y", "vector")},
        )
        record["terms"] = f"{args.prefix}_terms.csv"
    _emit(record)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mpsrnn", description="MPS-RNN variational states")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("map", help="state vector or MPS file to a vanilla/oned checkpoint")
    s.add_argument("--config")
    src = s.add_mutually_exclusive_group()
    src.add_argument("--mps", help="MPS container with tensors M_{i}_{s}")
    src.add_argument("--statevector", help=".npy file with 2**V amplitudes")
    s.add_argument("--chi", type=int, help="truncation bond dimension (default ansatz.chi)")
    s.add_argument("--to", choices=("vanilla", "oned"), default="oned")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_map)

    s = sub.add_parser("lift", help="oned->twod, twod->tensor, twod/tensor->compressed")
    s.add_argument("input")
    s.add_argument("--to", choices=("twod", "tensor", "compressed"), required=True)
    s.add_argument("--noise-std", type=float, default=1e-7)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--phase", choices=("on", "off"))
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_lift)

    s = sub.add_parser("train", help="VMC optimisation")
    s.add_argument("--config")
    s.add_argument("--init", help="checkpoint to start from (default init.from)")
    s.add_argument("--steps", type=int)
    s.add_argument("--metrics", help="CSV file for per-step metrics")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw exact samples to CSV")
    s.add_argument("checkpoint")
    s.add_argument("-n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("evaluate", help="energy estimate of a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--config")
    s.add_argument("--samples", type=int)
    s.add_argument("--seed", type=int, default=12345)
    s.add_argument("--exact", action="store_true", help="enumerate instead of sampling")
    s.add_argument("--no-reference", action="store_true")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("oracle", help="exact diagonalisation and checks")
    s.add_argument("--config")
    s.add_argument("--checkpoint")
    s.add_argument("--tv-samples", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_oracle)

    s = sub.add_parser("arealaw", help="build and verify the area-law state")
    s.add_argument("--L", type=int, default=4)
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_arealaw)

    s = sub.add_parser("diagnose", help="correlations and term contributions")
    s.add_argument("checkpoint")
    s.add_argument("--samples", type=int, default=10000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--ref-site", type=int, default=0)
    s.add_argument("--prefix", default="diagnose")
    s.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DegenerateStateError, ConvergenceError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ContainerError as exc:
        print(f"format error [{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
