"""Command-line entry point: ``ale-minihydro run|bench-complexity|bench-throughput|bench-scaling``"""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from pydantic import ValidationError

from ale_minihydro.bench import bench_complexity, bench_strong_scaling, bench_throughput, worked_example
from ale_minihydro.driver import RunResult, run_ale
from ale_minihydro.exceptions import ConfigError, NumericalError
from ale_minihydro.memory_pool import MemoryManager
from ale_minihydro.models import CycleRecord, RunConfig
from ale_minihydro.pa_operators import dump_matrix, full_assemble
from ale_minihydro.parameters import ALL_PRESETS, TmopMode
from ale_minihydro.settings import LogLevel, Settings
from ale_minihydro.state_io import write_state

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_NUMERICAL = 2
EXIT_CONFIG = 3

# flat option name -> location in RunConfig
CONFIG_KEYS: dict[str, tuple[str, ...]] = {
    "preset": ("preset",),
    "elements": ("elements",),
    "mesh_file": ("mesh_file",),
    "order": ("order",),
    "q1d": ("q1d",),
    "exec": ("exec_place",),
    "gamma": ("gamma",),
    "cycles": ("cycles",),
    "remap_every": ("remap_every",),
    "min_detj": ("min_detj_trigger",),
    "cfl": ("steps", "cfl"),
    "t_final": ("steps", "t_final"),
    "dt_min": ("steps", "dt_min"),
    "dt_max": ("steps", "dt_max"),
    "q1": ("viscosity", "q1"),
    "q2": ("viscosity", "q2"),
    "tmop": ("tmop", "mode"),
    "tmop_newton_tol": ("tmop", "newton_rel_tol"),
    "tmop_max_newton": ("tmop", "max_newton"),
    "limiting_weight": ("tmop", "limiting_weight"),
    "pseudo_steps": ("remap", "n_pseudo_steps"),
    "pseudo_cfl": ("remap", "pseudo_cfl"),
    "limiter": ("remap", "use_limiter"),
    "energy_fixup": ("energy_fixup",),
    "cg_rel_tol": ("cg_rel_tol",),
    "cg_max_iter": ("cg_max_iter",),
    "mem_report": ("mem_report",),
    "out": ("out_dir",),
    "dump_matrix": ("dump_matrix",),
}

# other spellings accepted in config files
KEY_ALIASES = {
    "mesh": "mesh_file",
    "cartesian": "elements",
    "tfinal": "t_final",
    "remap_steps": "pseudo_steps",
}

# "q1,q2" pair unpacked into the two viscosity keys
VISC_KEY = "visc"


def read_config_file(path: str | Path) -> dict[str, str]:
    """``key=value`` lines; blank lines and ``#`` comments are skipped"""
    values = {}
    for number, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        key = KEY_ALIASES.get(key, key)
        if not sep or (key not in CONFIG_KEYS and key != VISC_KEY):
            raise ConfigError(f"{path}:{number}: expected one of {sorted([*CONFIG_KEYS, VISC_KEY])} as key=value")
        values[key] = value.strip()
    return values


def _elements(value) -> list[int] | None:
    if value is None or isinstance(value, list):
        return value
    try:
        return [int(n) for n in str(value).replace("x", ",").split(",") if n.strip()]
    except ValueError as exc:
        raise ConfigError(f"invalid element counts {value!r}") from exc


def _viscosity(value) -> tuple[str, str]:
    parts = [part.strip() for part in str(value).split(",")]
    if len(parts) != 2 or not all(parts):
        raise ConfigError(f"viscosity expects q1,q2, got {value!r}")
    return parts[0], parts[1]


def build_run_config(file_values: dict[str, str], overrides: dict[str, object]) -> RunConfig:
    """Merge config-file values with flag overrides (flags win) into a validated RunConfig"""
    flat = {KEY_ALIASES.get(k, k): v for k, v in file_values.items()}
    flat.update({KEY_ALIASES.get(k, k): v for k, v in overrides.items() if v is not None})
    if (visc := flat.pop(VISC_KEY, None)) is not None:
        flat["q1"], flat["q2"] = _viscosity(visc)
    flat["elements"] = _elements(flat.get("elements"))
    nested: dict = {}
    for key, value in flat.items():
        if value is None:
            continue
        *parents, leaf = CONFIG_KEYS[key]
        target = nested
        for name in parents:
            target = target.setdefault(name, {})
        target[leaf] = value
    return RunConfig.model_validate(nested)


def _run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="file of key=value lines mirroring the flags")
    parser.add_argument("--preset", choices=ALL_PRESETS)
    parser.add_argument("--cartesian", "--elements", dest="elements", help="elements per axis: nx,ny[,nz]")
    parser.add_argument("--mesh", "--mesh-file", dest="mesh_file", help="mesh text file")
    parser.add_argument("--order", type=int)
    parser.add_argument("--q1d", type=int)
    parser.add_argument("--exec", help="seq or threads:N")
    parser.add_argument("--gamma", type=float)
    parser.add_argument("--visc", help="artificial viscosity coefficients q1,q2")
    parser.add_argument("--cycles", type=int)
    parser.add_argument("--remap-every", dest="remap_every", type=int)
    parser.add_argument("--min-detj", dest="min_detj", type=float, help="also remesh below this min detJ")
    parser.add_argument("--cfl", type=float)
    parser.add_argument("--tfinal", "--t-final", dest="t_final", type=float)
    parser.add_argument("--tmop", choices=[m.value for m in TmopMode])
    parser.add_argument("--tmop-newton-tol", dest="tmop_newton_tol", type=float)
    parser.add_argument("--tmop-max-newton", dest="tmop_max_newton", type=int)
    parser.add_argument("--remap-steps", "--pseudo-steps", dest="pseudo_steps", type=int)
    parser.add_argument("--pseudo-cfl", dest="pseudo_cfl", type=float)
    parser.add_argument("--no-limiter", dest="limiter", action="store_const", const=False)
    parser.add_argument("--no-energy-fixup", dest="energy_fixup", action="store_const", const=False)
    parser.add_argument("--mem-report", dest="mem_report", action="store_const", const=True)
    parser.add_argument("--dump-matrix", dest="dump_matrix", help="write the assembled velocity mass matrix")
    parser.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ale-minihydro", description=__doc__)
    parser.add_argument("--log-level", dest="log_level", choices=[lvl.value for lvl in LogLevel])
    sub = parser.add_subparsers(dest="command", required=True)

    _run_options(sub.add_parser("run", help="three-phase ALE run"))

    complexity = sub.add_parser("bench-complexity", help="full vs partial assembly storage and FLOPs")
    complexity.add_argument("--max-order", dest="max_order", type=int, default=4)
    complexity.add_argument("--out", help="output directory")

    throughput = sub.add_parser("bench-throughput", help="DOF throughput over orders and sizes")
    _run_options(throughput)
    throughput.add_argument("--orders", default="1,2,3")
    throughput.add_argument("--sizes", default="2,4,8", help="elements per axis")

    scaling = sub.add_parser("bench-scaling", help="thread strong scaling of the Lagrange phase")
    _run_options(scaling)
    scaling.add_argument("--workers", default="1,2,4")
    return parser


def _ints(text: str) -> list[int]:
    try:
        return [int(n) for n in text.split(",") if n.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


def _config_from_args(args: argparse.Namespace, settings: Settings) -> RunConfig:
    file_values = read_config_file(args.config) if args.config else {}
    overrides = {key: getattr(args, key, None) for key in [*CONFIG_KEYS, VISC_KEY]}
    # environment settings sit below config files and flags
    for key, value in [
        ("exec", settings.exec_place),
        ("cg_rel_tol", settings.cg_rel_tol),
        ("cg_max_iter", settings.cg_max_iter),
    ]:
        if key not in file_values and overrides[key] is None:
            overrides[key] = value
    return build_run_config(file_values, overrides)


def _out_dir(path: str | None, settings: Settings) -> Path:
    out = Path(path or settings.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2) + "\n")


def _write_cycles(path: Path, cycles: list[CycleRecord]) -> None:
    with path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(CycleRecord.model_fields), lineterminator="\n")
        writer.writeheader()
        for record in cycles:
            writer.writerow(record.model_dump())


def _report_run(result: RunResult, config: RunConfig, out: Path) -> None:
    write_state(out / "state.bin", result.state, result.mesh, result.hydro.thermo_order)
    _write_cycles(out / "cycles.csv", result.cycles)
    _write_json(
        out / "summary.json",
        {
            "config": config.model_dump(mode="json"),
            "initial": result.initial.model_dump(),
            "final": result.final.model_dump(),
            "mass_drift": result.mass_drift,
            "energy_drift": result.energy_drift,
            "timings": {phase.value: seconds for phase, seconds in result.timings.items()},
            "tmop": [s.model_dump() for s in result.tmop],
            "remaps": [d.model_dump() for d in result.remaps],
        },
    )
    if config.mem_report:
        report = [
            {
                "arena": s.arena.value,
                "current": s.current_bytes,
                "peak": s.peak_bytes,
                "capacity": s.pool_capacity_bytes,
                "alloc_count": s.allocation_count,
                "release_count": s.release_count,
                "growth_events": s.growth_events,
            }
            for s in result.pool.values()
        ]
        _write_json(out / "mem_report.json", report)
        print(json.dumps(report, indent=2))


def command_run(args: argparse.Namespace, settings: Settings) -> None:
    config = _config_from_args(args, settings)
    memory = MemoryManager(initial_block=settings.pool_initial_bytes, alignment=settings.pool_alignment)
    result = run_ale(config, memory=memory)
    out = _out_dir(config.out_dir, settings)
    if config.dump_matrix:
        matrix = full_assemble(result.hydro.mass_v, settings.full_assembly_max_dofs)
        dump_matrix(matrix, out / config.dump_matrix)
    _report_run(result, config, out)
    memory.shutdown()
    print(
        f"{len(result.cycles)} cycles, {len(result.remaps)} remaps, t={result.state.t:.6e}, "
        f"mass drift {result.mass_drift:.3e}, energy drift {result.energy_drift:.3e}"
    )


def command_bench_complexity(args: argparse.Namespace, settings: Settings) -> None:
    rows, slopes = bench_complexity(orders=range(1, args.max_order + 1))
    examples = worked_example()
    out = _out_dir(args.out, settings)
    _write_json(
        out / "complexity.json",
        {
            "rows": [r.model_dump() for r in rows],
            "slopes": [s.model_dump() for s in slopes],
            "worked_example": [dict(e.model_dump(), ratio=e.ratio) for e in examples],
        },
    )
    print("d  p  PA storage  FA storage  PA apply flops")
    for r in rows:
        print(f"{r.d}  {r.p}  {r.pa_storage:10d}  {r.fa_storage:10d}  {r.pa_apply_flops:14d}")
    for s in slopes:
        print(
            f"d={s.d} slopes: PA storage {s.pa_storage:.2f} (expect {s.expected_pa_storage}), "
            f"PA apply {s.pa_apply:.2f} (expect {s.expected_pa_apply}), "
            f"FA storage {s.fa_storage:.2f} (expect {s.expected_fa_storage})"
        )
    for e in examples:
        print(f"{e.convention}: {e.fa_values:,} vs {e.pa_values:,} stored values ({e.ratio:.1f}x)")


def command_bench_throughput(args: argparse.Namespace, settings: Settings) -> None:
    config = _config_from_args(args, settings)
    out = _out_dir(config.out_dir, settings)
    records = bench_throughput(config, _ints(args.orders), _ints(args.sizes), out / "throughput.csv")
    for r in records:
        print(f"{r.phase.value:9s} p={r.p} dofs={r.dofs:8d} {r.dof_per_s:.4e} dof/s")


def command_bench_scaling(args: argparse.Namespace, settings: Settings) -> None:
    config = _config_from_args(args, settings)
    out = _out_dir(config.out_dir, settings)
    rows = bench_strong_scaling(config, _ints(args.workers))
    _write_json(out / "scaling.json", [r.model_dump() for r in rows])
    for r in rows:
        print(f"{r.workers:3d} workers  {r.seconds_per_cycle:.4e} s/cycle  efficiency {r.efficiency:.2f}")


COMMANDS = {
    "run": command_run,
    "bench-complexity": command_bench_complexity,
    "bench-throughput": command_bench_throughput,
    "bench-scaling": command_bench_scaling,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    settings = Settings.load()
    if args.log_level:
        logging.getLogger().setLevel(args.log_level)
    try:
        COMMANDS[args.command](args, settings)
    except (ConfigError, ValidationError) as exc:
        logger.error(f"configuration error: {exc}")
        return EXIT_CONFIG
    except NumericalError as exc:
        logger.error(f"numerical abort: {exc}")
        return EXIT_NUMERICAL
    except Exception:
        logger.exception(f"{args.command} failed")
        return EXIT_FAILURE
    return EXIT_OK


def cli() -> None:
    sys.exit(main())
