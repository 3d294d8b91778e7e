import sys
import glob
import time
import logging
import argparse
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd
from pydantic import ValidationError

from modules.config import get_settings
from modules.case_ingest import build_admittance, load_case
from modules.diagnostics import eta_series, phase_align_and_compare, reference_opf, trace_frame
from modules.drohs_engine import run
from modules.models import (
    DrohsError,
    EngineConfig,
    NetworkCase,
    ReferenceSolution,
    RunResult,
    RunStatus,
    StartMode,
)
from modules.network_tensor import build_star_model, model_report

settings = get_settings()
logging.basicConfig(level=settings.logging_level, format="%(levelname)s %(name)s: %(message)s")
logger = logging.getLogger(__name__)

EXIT_OK, EXIT_ERROR, EXIT_MAX_ITER = 0, 1, 2
COMPARE_TOL = 1e-4


class Parser(argparse.ArgumentParser):
    """Usage errors exit with 1 like every other failure."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(EXIT_ERROR)


# --- Helpers ---

def resolve_case(name: str) -> Path:
    """A path as given, or a bare case name looked up in the cases directory."""
    path = Path(name)
    if path.is_file():
        return path
    for candidate in (settings.cases_dir / name, settings.cases_dir / f"{name}.m",
                      settings.cases_dir / f"{name}.json"):
        if candidate.is_file():
            return candidate
    raise DrohsError(f"case file not found: {name}")


def read_solution(path: str):
    """RunResult or ReferenceSolution JSON."""
    text = Path(path).read_text()
    for model in (RunResult, ReferenceSolution):
        try:
            return model.model_validate_json(text)
        except ValidationError:
            continue
    raise DrohsError(f"{path} is neither a run result nor a reference solution")


def voltages(solution) -> np.ndarray:
    return np.asarray(solution.voltages_re) + 1j * np.asarray(solution.voltages_im)


def engine_config(args) -> EngineConfig:
    start, warm = args.start, None
    if start.startswith("warm:"):
        v = voltages(read_solution(start.split(":", 1)[1]))
        warm = np.r_[v.real, v.imag].tolist()
        start = StartMode.WARM.value
    elif start not in (StartMode.COLD.value, StartMode.FLAT.value):
        raise DrohsError(f"unknown start mode '{args.start}' (cold, flat or warm:PATH)")
    return EngineConfig(
        rho_power=args.rho_power, rho_voltage=args.rho_voltage, delta0=args.delta0, a=args.a,
        tau0=args.tau0, max_iter=args.max_iter, tol=args.tol, seed=args.seed, start=start,
        warm_voltage=warm, workers=args.workers, timing=args.timing,
    )


# --- Subcommands ---

def cmd_run(args) -> int:
    config = engine_config(args)
    case = load_case(resolve_case(args.case))
    if args.trace:
        Path(args.trace).unlink(missing_ok=True)
    result = run(case, config, trace_path=args.trace)
    if args.out:
        Path(args.out).write_text(result.model_dump_json(indent=2))
    print(f"{case.name}: {result.status.value} after {result.iterations} iterations, "
          f"objective {result.objective + result.constant_cost:.4f}, "
          f"worst residual {result.feasibility.worst:.2e}")
    return EXIT_OK if result.status == RunStatus.CONVERGED else EXIT_MAX_ITER


def cmd_check_model(args) -> int:
    case = load_case(resolve_case(args.case))
    report = model_report(case, build_admittance(case))
    print(f"{'bus':>6} {'nl':>3} {'ng':>3} {'n_x':>5} {'n_mu':>5} {'residual':>10}  ranks")
    for node in report.nodes:
        ranks = " ".join(f"{k}={v}" for k, v in node.ranks.items())
        flag = "" if node.ok else "  MISMATCH"
        print(f"{node.bus:>6} {node.nl:>3} {node.ng:>3} {node.n_x:>5} {node.n_mu:>5} "
              f"{node.max_residual:>10.2e}  {ranks}{flag}")
    if args.out:
        Path(args.out).write_text(report.model_dump_json(indent=2))
    return EXIT_OK if report.ok else EXIT_ERROR


def cmd_compare(args) -> int:
    result, reference = read_solution(args.result), read_solution(args.reference)
    comparison = phase_align_and_compare(voltages(result), voltages(reference),
                                         result.objective, reference.objective)
    print(comparison.model_dump_json(indent=2))
    if isinstance(result, RunResult) and reference.objective != 0:
        eta = eta_series([row.W for row in result.trace], reference.objective)
        if eta:
            print(f"eta (reference): first {eta[0]:.3e}, last {eta[-1]:.3e}")
    ok = comparison.distance <= COMPARE_TOL and (comparison.objective_gap or 0.0) <= COMPARE_TOL
    return EXIT_OK if ok else EXIT_ERROR


def cmd_reference(args) -> int:
    case = load_case(resolve_case(args.case))
    solution = reference_opf(case, build_admittance(case))
    Path(args.out).write_text(solution.model_dump_json(indent=2))
    print(f"{case.name}: {solution.status}, objective {solution.objective + solution.constant_cost:.4f}")
    return EXIT_OK if solution.status == "Optimal" else EXIT_ERROR


def cmd_bench(args) -> int:
    paths = sorted(glob.glob(args.cases))
    if not paths:
        raise DrohsError(f"no case files match {args.cases}")
    rows: List[dict] = []
    for path in paths:
        case: NetworkCase = load_case(path)
        config = EngineConfig(max_iter=args.max_iter, workers=args.workers, timing=True, monitor=False)
        adm = build_admittance(case)
        model = build_star_model(case, adm, config, workers=config.workers)
        totals, node_ms, n_iter = [], [], 0
        for _ in range(args.repeat):
            started = time.perf_counter()
            result = run(case, config, adm=adm, model=model)
            totals.append((time.perf_counter() - started) * 1e3)
            node_ms.append(float(trace_frame(result.trace)["max_node_ms"].max()))
            n_iter = result.iterations
        rows.append({"case": case.name, "Nb": case.Nb, "n_var_max": model.n_var_max, "N_iter": n_iter,
                     "max_node_ms": max(node_ms), "total_ms": float(np.mean(totals)),
                     "total_ms_std": float(np.std(totals))})
        logger.info(f"bench {case.name}: {rows[-1]}")
    frame = pd.DataFrame(rows)
    if args.out:
        frame.to_csv(args.out, index=False)
    print(frame.to_string(index=False))
    if frame["n_var_max"].nunique() > 1:
        slope = np.polyfit(np.log(frame["n_var_max"]), np.log(frame["max_node_ms"]), 1)[0]
        print(f"max nodal time ~ n_var_max^{slope:.3f}")
    return EXIT_OK


# --- Command line ---

def build_parser() -> argparse.ArgumentParser:
    parser = Parser(prog="app.py", description="Distributed AC optimal power flow on a star-network model.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("run", help="run the distributed iteration on a case")
    p.add_argument("--case", required=True)
    p.add_argument("--start", default="flat", help="cold, flat or warm:PATH")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iter", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-7)
    p.add_argument("--a", type=float, default=0.02)
    p.add_argument("--rho-power", type=float, default=20.0)
    p.add_argument("--rho-voltage", type=float, default=200.0)
    p.add_argument("--delta0", type=float, default=0.3)
    p.add_argument("--tau0", type=float, default=1e-3)
    p.add_argument("--workers", type=int, default=settings.workers)
    p.add_argument("--timing", action="store_true", help="record nodal solve times in the trace")
    p.add_argument("--trace")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_run)

    p = sub.add_parser("check-model", help="verify nodal ranks and cardinalities")
    p.add_argument("--case", required=True)
    p.add_argument("--out")
    p.set_defaults(handler=cmd_check_model)

    p = sub.add_parser("compare", help="compare a result against a reference solution")
    p.add_argument("--result", required=True)
    p.add_argument("--reference", required=True)
    p.set_defaults(handler=cmd_compare)

    p = sub.add_parser("reference", help="solve the central problem directly")
    p.add_argument("--case", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_reference)

    p = sub.add_parser("bench", help="time the iteration over several cases")
    p.add_argument("--cases", required=True, help="glob of case files")
    p.add_argument("--repeat", type=int, default=1)
    p.add_argument("--max-iter", type=int, default=100)
    p.add_argument("--workers", type=int, default=settings.workers)
    p.add_argument("--out")
    p.set_defaults(handler=cmd_bench)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (DrohsError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except ValidationError as e:
        logger.error(f"{args.command}: invalid parameters: {e}")
        print(f"error: invalid parameters: {e.errors()[0]['loc'][0]}: {e.errors()[0]['msg']}", file=sys.stderr)
        return EXIT_ERROR

if __name__ == "__main__":
    sys.exit(main())
