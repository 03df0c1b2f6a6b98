"""``eotdiff`` command line.

Exit codes: 0 success, 1 tolerance failure or non-convergence, 2 input error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from . import bench
from .errors import ContractError
from .linalg import DEFAULT_ALPHA

EXIT_OK = 0
EXIT_TOLERANCE = 1
EXIT_INPUT = 2


def parse_config(path) -> Dict[str, str]:
    """Flat ``key = value`` text; blank lines and ``#`` comments are skipped."""
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ContractError(f"{path}:{lineno}: empty key")
        out[key] = value
    return out


def _int_list(text: str) -> List[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _float_list(text: str) -> List[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eotdiff", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=Path, default=Path("."))
        p.add_argument("--format", choices=("json", "csv"), default="json")

    p = sub.add_parser("grad-check", help="analytic derivatives against finite differences")
    common(p)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--d", type=int, default=2)
    p.add_argument("--eps", type=float, default=0.05)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--dist", choices=("eot", "sinkhorn"), default="eot")
    p.add_argument("--hessian", action="store_true", help="also check the Hessian")
    p.add_argument("--rtol", type=float, default=None)
    p.add_argument("--sinkhorn-tol", type=float, default=1e-12)

    p = sub.add_parser("hessian-bench", help="marginal-error success rates")
    common(p)
    p.add_argument("--n-list", type=_int_list, default=[10, 20, 120])
    p.add_argument("--eps-list", type=_float_list, default=[0.005])
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    p.add_argument("--no-reg", action="store_true", help="alpha = 0, no truncation")

    p = sub.add_parser("spectrum", help="smallest positive eigenvalue of H over a grid")
    common(p)
    p.add_argument("--n-list", type=_int_list, default=[50, 100, 200])
    p.add_argument("--eps-list", type=_float_list, default=[0.1, 0.01])
    p.add_argument("--dataset", choices=("circle", "uniform_square"), default="circle")

    for name, text in (("shuffled-reg", "Gaussian-mixture shuffled regression"),
                       ("register3d", "3-D point-cloud registration")):
        p = sub.add_parser(name, help=text)
        common(p)
        p.add_argument("--config", type=Path, default=None)
        p.add_argument("--gd-only", action="store_true")
        p.add_argument("--skip-gd", action="store_true")
        if name == "register3d":
            p.add_argument("--source", type=Path, default=None, help="point-cloud text file")
    return parser


def run(args: argparse.Namespace) -> bench.Report:
    watch = bench.Stopwatch()
    if args.command == "grad-check":
        report = bench.run_grad_check(
            n=args.n, d=args.d, eps=args.eps, trials=args.trials, seed=args.seed, dist=args.dist,
            hessian=args.hessian, tol=args.sinkhorn_tol, rtol=args.rtol, watch=watch,
        )
    elif args.command == "hessian-bench":
        report = bench.run_hessian_bench(
            args.n_list, args.eps_list, args.trials, args.seed,
            alpha=0.0 if args.no_reg else args.alpha, watch=watch,
        )
    elif args.command == "spectrum":
        report = bench.run_spectrum(args.n_list, args.eps_list, args.dataset, args.seed, watch=watch)
    else:
        settings = parse_config(args.config) if args.config else {}
        if args.command == "register3d" and args.source is not None:
            settings["source"] = str(args.source)
        runner = bench.run_shuffled_reg if args.command == "shuffled-reg" else bench.run_register3d
        report = runner(settings, seed=args.seed, gd_only=args.gd_only, skip_gd=args.skip_gd,
                        watch=watch)
    bench.write_report(report, args.out, args.format, watch.timing())
    return report


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    try:
        report = run(args)
    except (ContractError, ValueError, OSError) as exc:
        print(f"eotdiff: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK if report.ok else EXIT_TOLERANCE


if __name__ == "__main__":
    sys.exit(main())
