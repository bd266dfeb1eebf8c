"""``wisca`` command line: apply, replay, verify, report, simulate, norm-theorem.

Exit codes: 0 ok, 1 I/O, 2 parse or resolution error (including bad flags),
3 equivalence failure, 4 structural inequivalence, 5 replay mismatch,
6 statistical assertion failure. ``WISCA_WORKERS`` sets the default worker
count for parallel commands.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

from . import __version__
from .checkpoint import parse_checkpoint, serialize_checkpoint, write_checkpoint
from .errors import CheckpointParseError, DomainError, ResolutionError, StructuralInequivalenceError, WiscaError
from .landscape import NEVER, SimConfig, sgd_momentum_run, sweep, trajectory_svg
from .layout import STRATEGY_ORDER, LayoutDescriptor, load_descriptor, preset_names, resolve_layout
from .pipeline import (
    apply_strategies,
    norm_report,
    ordered_strategies,
    report_csv,
    report_table,
    sha256_bytes,
    verify_checkpoints,
)
from .stats import convergence_experiment
from .tensor import make_rng
from .verify import DEFAULT_BATTERY

EXIT_OK = 0
EXIT_IO = 1
EXIT_PARSE = 2
EXIT_EQUIV = 3
EXIT_STRUCT = 4
EXIT_REPLAY = 5
EXIT_STATS = 6

DEFAULT_SIZES = "16x16,64x64,256x256,1024x1024"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags already; route it through our handler
    def error(self, message):
        raise UsageError(message)


def default_workers() -> int:
    raw = os.environ.get("WISCA_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _err(msg: str) -> None:
    print(f"wisca: {msg}", file=sys.stderr)


def _read_bytes(path) -> bytes:
    return Path(path).read_bytes()


def _load_layout(source) -> tuple[LayoutDescriptor, str, str | None]:
    """Descriptor, its label for the manifest, and the sha256 of its file (None for presets)."""
    path = Path(source)
    if path.exists():
        return load_descriptor(path), str(source), sha256_bytes(path.read_bytes())
    return load_descriptor(source), str(source), None


def _write_text(path, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


# --- apply / replay ------------------------------------------------------


def run_apply(in_blob: bytes, ld: LayoutDescriptor, strategies, norm, verify, tol, battery, seed, workers):
    cp = parse_checkpoint(in_blob)
    layers = resolve_layout(cp, ld)
    return apply_strategies(cp, layers, strategies, norm, verify, tol, battery, seed, workers)


def build_manifest(args, ld, layout_label, layout_sha, in_blob, out_blob, strategies, result) -> dict:
    reports = [r.equivalence for r in result.records if r.equivalence is not None]
    return {
        "tool": "wisca",
        "version": __version__,
        "command": "apply",
        "input": {"path": str(args.inp), "sha256": sha256_bytes(in_blob)},
        "output": {"path": str(args.out), "sha256": sha256_bytes(out_blob)},
        "layout": {"source": layout_label, "sha256": layout_sha, "descriptor": ld.to_dict()},
        "strategies": strategies,
        "norm": args.norm,
        "seed": args.seed,
        "verify": args.verify,
        "battery": args.battery,
        "tol": args.tol,
        "layers": [r.as_dict() for r in result.records],
        "warnings": result.warnings,
        "equivalence": {
            "checked_layers": len(reports),
            "passed": all(r.passed for r in reports),
            "max_rel_dev": max((r.max_rel_dev for r in reports), default=0.0),
        },
    }


def cmd_apply(args) -> int:
    ld, label, layout_sha = _load_layout(args.layout)
    strategies = ordered_strategies(args.strategy or ld.strategies)
    if not strategies:
        raise UsageError("no strategy given (use --strategy or list them in the descriptor)")
    in_blob = _read_bytes(args.inp)
    result = run_apply(in_blob, ld, strategies, args.norm, args.verify, args.tol, args.battery, args.seed, args.workers)
    for rec in result.records:
        if rec.equivalence is not None:
            e = rec.equivalence
            print(f"{rec.layer_id}: max rel dev {e.max_rel_dev:.3e} (tol {e.tolerance:.1e}) {'ok' if e.passed else 'FAIL'}")
    for w in result.warnings:
        _err(f"warning: {w}")
    if not result.passed:
        _err("equivalence check failed; no output written")
        return EXIT_EQUIV
    out_blob = serialize_checkpoint(result.checkpoint)
    manifest = build_manifest(args, ld, label, layout_sha, in_blob, out_blob, strategies, result)
    write_checkpoint(result.checkpoint, args.out)
    manifest_path = args.manifest or f"{args.out}.manifest.json"
    Path(manifest_path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {args.out} and {manifest_path}")
    return EXIT_OK


MANIFEST_KEYS = ("input", "output", "layout", "strategies", "norm", "verify", "tol", "battery", "seed")


def _load_manifest(path) -> dict:
    try:
        m = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"manifest {path}: invalid JSON: {exc}") from None
    missing = [k for k in MANIFEST_KEYS if k not in m]
    if missing:
        raise UsageError(f"manifest {path} lacks keys {missing}")
    return m


def cmd_replay(args) -> int:
    m = _load_manifest(args.manifest)
    in_path = args.inp or m["input"]["path"]
    in_blob = _read_bytes(in_path)
    if sha256_bytes(in_blob) != m["input"]["sha256"]:
        _err(f"input {in_path} does not match the manifest's sha256")
        return EXIT_REPLAY
    ld = LayoutDescriptor.from_dict(m["layout"]["descriptor"])
    result = run_apply(in_blob, ld, m["strategies"], m["norm"], m["verify"], m["tol"], m["battery"], m["seed"], args.workers)
    if not result.passed:
        _err("equivalence check failed during replay")
        return EXIT_EQUIV
    out_blob = serialize_checkpoint(result.checkpoint)
    digest = sha256_bytes(out_blob)
    if args.out:
        write_checkpoint(result.checkpoint, args.out)
    if digest != m["output"]["sha256"]:
        _err(f"replayed output sha256 {digest} != recorded {m['output']['sha256']}")
        return EXIT_REPLAY
    print(f"replay ok: sha256 {digest}")
    return EXIT_OK


# --- verify / report -----------------------------------------------------


def cmd_verify(args) -> int:
    ld, _, _ = _load_layout(args.layout)
    cp_a = parse_checkpoint(_read_bytes(args.a))
    cp_b = parse_checkpoint(_read_bytes(args.b))
    layers_a = resolve_layout(cp_a, ld)
    try:
        layers_b = resolve_layout(cp_b, ld)
    except ResolutionError as exc:
        raise StructuralInequivalenceError(f"{args.b} does not fit the layout that {args.a} fits:\n{exc}") from None
    reports = verify_checkpoints(cp_a, layers_a, cp_b, layers_b, args.tol, args.battery, args.seed)
    for lid, r in reports:
        status = "pass" if r.passed else "FAIL"
        print(
            f"{lid}: {status} battery={r.battery_size} max_abs_dev={r.max_abs_dev:.6e} "
            f"max_rel_dev={r.max_rel_dev:.6e} tol={r.tolerance:.1e}"
        )
    return EXIT_OK if all(r.passed for _, r in reports) else EXIT_EQUIV


def cmd_report(args) -> int:
    ld, _, _ = _load_layout(args.layout)
    cp = parse_checkpoint(_read_bytes(args.inp))
    rows = norm_report(resolve_layout(cp, ld))
    _write_text(args.output, report_csv(rows) if args.format == "csv" else report_table(rows))
    return EXIT_OK


# --- simulate / norm-theorem ---------------------------------------------


def cmd_simulate(args) -> int:
    cfg = SimConfig(c=args.c, eta=args.eta, beta=args.beta, eps=args.eps, max_iters=args.max_iters)
    if args.sweep is not None:
        if args.sweep < 1:
            raise DomainError(f"--sweep must be >= 1, got {args.sweep}")
        res = sweep(args.sweep, cfg, make_rng(args.seed))
        lines = ["q0,k0,raw_iters,wisca_iters"]
        for (q, k), r, w in zip(res.inits, res.raw_iters, res.wisca_iters):
            lines.append(f"{q:.17g},{k:.17g},{_iters(r)},{_iters(w)}")
        _write_text(args.csv, "\n".join(lines) + "\n")
        verdict = "holds" if res.median_raw >= res.median_wisca else "violated"
        summary = (
            f"median raw {res.median_raw:g} >= median wisca {res.median_wisca:g}: {verdict}; "
            f"wisca strictly fewer in {res.frac_strictly_fewer:.1%}, fewer or equal in {res.frac_fewer_or_equal:.1%}"
        )
        print(summary, file=sys.stderr if args.csv in (None, "-") else sys.stdout)
        return EXIT_OK
    if args.q0 is None or args.k0 is None:
        raise UsageError("--q0 and --k0 are required unless --sweep is given")
    traj = sgd_momentum_run(args.q0, args.k0, cfg, wisca_init=args.wisca_init)
    if args.csv:
        _write_text(args.csv, traj.to_csv())
    if args.svg:
        other = sgd_momentum_run(args.q0, args.k0, cfg, wisca_init=not args.wisca_init)
        label, other_label = ("wisca", "raw") if args.wisca_init else ("raw", "wisca")
        Path(args.svg).write_text(trajectory_svg({label: traj, other_label: other}, cfg.c))
    msg = f"converged at iter {traj.iters_to_converge}" if traj.converged else (
        "diverged" if traj.diverged else f"did not converge within {cfg.max_iters} iterations"
    )
    final = traj.steps[-1]
    print(f"{msg} (Q={final.q:.6g}, K={final.k:.6g}, loss={final.loss:.6g})", file=sys.stderr if args.csv == "-" else sys.stdout)
    return EXIT_OK


def _iters(v) -> str:
    return "never" if v == NEVER else str(int(v))


def parse_sizes(text: str) -> list[tuple[int, int]]:
    sizes = []
    for part in text.split(","):
        try:
            m, n = (int(x) for x in part.lower().split("x"))
        except ValueError:
            raise UsageError(f"bad size {part!r}; expected MxN") from None
        sizes.append((m, n))
    return sizes


def cmd_norm_theorem(args) -> int:
    table = convergence_experiment(parse_sizes(args.sizes), args.trials, args.sigma, args.seed, args.workers)
    _write_text(args.out, table.to_csv())
    if table.insufficient():
        _err(f"warning: {args.trials} trials is too few for the concentration assertions; skipped")
        return EXIT_OK
    failures = table.check()
    for f in failures:
        _err(f"assertion failed: {f}")
    return EXIT_STATS if failures else EXIT_OK


# --- parser --------------------------------------------------------------


def _positive_float(text: str) -> float:
    v = float(text)
    if not (math.isfinite(v) and v > 0):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="wisca", description="Norm-balancing weight rescaling that leaves model outputs unchanged.")
    p.add_argument("--version", action="version", version=f"wisca {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    layout_help = f"layout descriptor JSON, or a preset name ({', '.join(preset_names())})"

    a = sub.add_parser("apply", help="rescale a checkpoint and write it with a manifest")
    a.add_argument("--in", dest="inp", required=True, help="input .safetensors")
    a.add_argument("--out", required=True, help="output .safetensors")
    a.add_argument("--layout", required=True, help=layout_help)
    a.add_argument("--strategy", action="append", choices=STRATEGY_ORDER, help="repeatable; applied qk, then vo, then lora")
    a.add_argument("--verify", action=argparse.BooleanOptionalAction, default=True)
    a.add_argument("--tol", type=_positive_float, default=None, help="default: 1e-10 f64, 1e-6 f32, 5e-3 f16, 2e-2 bf16")
    a.add_argument("--battery", type=int, default=DEFAULT_BATTERY)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--norm", choices=("l1", "l2"), default="l1")
    a.add_argument("--manifest", default=None, help="default: <out>.manifest.json")
    a.add_argument("--workers", type=int, default=default_workers())
    a.set_defaults(func=cmd_apply)

    r = sub.add_parser("replay", help="re-run an apply manifest and check the output hash")
    r.add_argument("manifest")
    r.add_argument("--in", dest="inp", default=None, help="override the recorded input path")
    r.add_argument("--out", default=None, help="also write the replayed checkpoint here")
    r.add_argument("--workers", type=int, default=default_workers())
    r.set_defaults(func=cmd_replay)

    v = sub.add_parser("verify", help="check two checkpoints for functional equivalence")
    v.add_argument("--a", required=True)
    v.add_argument("--b", required=True)
    v.add_argument("--layout", required=True, help=layout_help)
    v.add_argument("--battery", type=int, default=DEFAULT_BATTERY)
    v.add_argument("--tol", type=_positive_float, default=None)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify)

    rep = sub.add_parser("report", help="per-layer norm diagnostics (read-only)")
    rep.add_argument("--in", dest="inp", required=True)
    rep.add_argument("--layout", required=True, help=layout_help)
    rep.add_argument("--format", choices=("csv", "table"), default="table")
    rep.add_argument("--output", default=None, help="write here instead of stdout")
    rep.set_defaults(func=cmd_report)

    s = sub.add_parser("simulate", help="toy landscape L(Q, K) = (QK - C)^2 under SGD with momentum")
    s.add_argument("--q0", type=float)
    s.add_argument("--k0", type=float)
    s.add_argument("--c", type=float, default=1.0)
    s.add_argument("--eta", type=float, default=0.01)
    s.add_argument("--beta", type=float, default=0.9)
    s.add_argument("--eps", type=float, default=1e-2)
    s.add_argument("--max-iters", type=int, default=10_000)
    s.add_argument("--wisca-init", action="store_true", help="project the start onto |Q| == |K| first")
    s.add_argument("--csv", default=None, help="trajectory (or sweep) CSV path, '-' for stdout")
    s.add_argument("--svg", default=None, help="trajectory plot path (raw and projected starts)")
    s.add_argument("--sweep", type=int, default=None, metavar="N", help="compare raw and projected starts over N random inits")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_simulate)

    n = sub.add_parser("norm-theorem", help="Monte Carlo concentration of Gaussian norm ratios")
    n.add_argument("--sizes", default=DEFAULT_SIZES)
    n.add_argument("--trials", type=int, default=1000)
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--sigma", type=_positive_float, default=1.0)
    n.add_argument("--workers", type=int, default=default_workers())
    n.add_argument("--out", default=None, help="CSV path (default stdout)")
    n.set_defaults(func=cmd_norm_theorem)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        _err(str(exc))
        return EXIT_PARSE
    try:
        return args.func(args)
    except UsageError as exc:
        _err(str(exc))
        return EXIT_PARSE
    except StructuralInequivalenceError as exc:
        _err(f"structural mismatch: {exc}")
        return EXIT_STRUCT
    except (CheckpointParseError, ResolutionError, DomainError) as exc:
        _err(str(exc))
        return EXIT_PARSE
    except WiscaError as exc:
        _err(str(exc))
        return EXIT_PARSE
    except OSError as exc:
        _err(f"I/O error: {exc}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
