"""Command-line driver.

Four commands cover the artifact lifecycle: ``offline`` builds the
reduced model from a config file, ``online`` answers parameter queries
from the artifacts, ``validate`` checks true errors against the
certified bounds, and ``mesh`` generates or inspects mesh files.

Exit codes: 0 on success, 2 for configuration or input errors, 3 for
numerical failures.
"""

import argparse
import logging
import sys

from . import config as cfgmod
from . import meshing, pipeline
from .exceptions import InvalidInputError, SolverFailure

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _parse_mus(values):
    out = []
    for chunk in values or []:
        for piece in chunk.split(","):
            piece = piece.strip()
            if not piece:
                continue
            try:
                out.append(float(piece))
            except ValueError:
                raise InvalidInputError(f"cannot parse parameter value {piece!r}")
    return out


def build_parser():
    parser = argparse.ArgumentParser(
        prog="smagrb",
        description=(
            "Certified reduced-order solver for steady 2D flow with a "
            "Smagorinsky eddy-viscosity closure."
        ),
    )
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="enable debug logging"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_off = sub.add_parser(
        "offline",
        help="build the reduced model (mesh, sweep, interpolation, "
        "certification, greedy, operators)",
    )
    p_off.add_argument("--config", required=True, help="configuration file")
    p_off.add_argument(
        "--out", help="artifact directory (overrides the config's run.output)"
    )
    p_off.add_argument(
        "--jobs", type=int, help="parallel truth solves (overrides run.jobs)"
    )
    p_off.add_argument(
        "--fresh", action="store_true",
        help="recompute every stage even if artifacts exist",
    )

    p_on = sub.add_parser(
        "online", help="query the reduced model at given parameters"
    )
    p_on.add_argument("artifacts", help="artifact directory from an offline run")
    p_on.add_argument(
        "--mu", action="append", required=True,
        help="parameter value(s); repeatable, comma lists accepted",
    )
    p_on.add_argument("--out", help="report path prefix (default inside artifacts)")
    p_on.add_argument(
        "--dump", action="store_true",
        help="also store reconstructed velocity/pressure fields per query",
    )
    p_on.add_argument(
        "--benchmark", action="store_true",
        help="time a truth solve per query and report speedups and errors",
    )

    p_val = sub.add_parser(
        "validate",
        help="compare true errors against the certified bounds on a grid",
    )
    p_val.add_argument("artifacts", help="artifact directory from an offline run")
    p_val.add_argument(
        "--mu", action="append",
        help="verification parameters (default: config's validation grid)",
    )
    p_val.add_argument("--out", help="report path prefix (default inside artifacts)")

    p_mesh = sub.add_parser("mesh", help="generate or inspect mesh files")
    mesh_sub = p_mesh.add_subparsers(dest="mesh_command", required=True)
    p_gen = mesh_sub.add_parser("generate", help="write a benchmark mesh")
    p_gen.add_argument(
        "--benchmark", choices=("cavity", "step"), default="cavity"
    )
    p_gen.add_argument("--resolution", type=int, default=16)
    p_gen.add_argument("--out", required=True, help="output mesh file")
    p_ins = mesh_sub.add_parser("inspect", help="print mesh statistics")
    p_ins.add_argument("path", help="mesh file to inspect")
    return parser


def cmd_offline(args):
    cfg = cfgmod.load_config(args.config)
    if args.out:
        cfg.run.output = args.out
    if args.jobs is not None:
        cfg.run.jobs = args.jobs
        cfgmod.validate_config(cfg, args.config)
    summary = pipeline.run_offline(cfg, resume=not args.fresh)
    print(
        f"offline complete: {summary['eim_modes']} interpolation modes, "
        f"{summary['velocity_basis']} velocity + "
        f"{summary['pressure_basis']} pressure basis vectors "
        f"-> {cfg.run.output}"
    )
    return EXIT_OK


def cmd_online(args):
    mus = _parse_mus(args.mu)
    if not mus:
        raise InvalidInputError("online requires at least one --mu value")
    if args.benchmark:
        rows = pipeline.run_benchmark(args.artifacts, mus, out_prefix=args.out)
        for row in rows:
            if "error" in row:
                print(f"mu={row['mu']:g}: FAILED ({row['error']})")
            else:
                print(
                    f"mu={row['mu']:g}: speedup {row['speedup']:.1f}x, "
                    f"err_u_T {row['err_u_T']:.3e}, err_p_L2 {row['err_p_L2']:.3e}"
                )
        return EXIT_OK
    rows = pipeline.run_online(
        args.artifacts, mus, out_prefix=args.out, dump=args.dump
    )
    for row in rows:
        flag = "  [outside configured range]" if row["out_of_range"] else ""
        print(
            f"mu={row['mu']:g}: {row['iterations']} iterations in "
            f"{row['t_online_s'] * 1e3:.2f} ms{flag}"
        )
    return EXIT_OK


def cmd_validate(args):
    mus = _parse_mus(args.mu) or None
    payload = pipeline.run_validate(args.artifacts, mus=mus, out_prefix=args.out)
    certified = payload["certified_fraction"]
    print(
        f"validation: {certified:.0%} certified, "
        f"max effectivity {payload['max_effectivity']}, "
        f"median {payload['median_effectivity']}"
    )
    return EXIT_OK


def cmd_mesh(args):
    if args.mesh_command == "generate":
        if args.benchmark == "cavity":
            mesh = meshing.generate_cavity_mesh(args.resolution)
        else:
            mesh = meshing.generate_step_mesh(args.resolution)
        meshing.write_mesh(mesh, args.out)
        print(
            f"wrote {args.benchmark} mesh: {mesh.nodes.shape[0]} nodes, "
            f"{mesh.triangles.shape[0]} triangles -> {args.out}"
        )
        return EXIT_OK
    mesh = meshing.read_mesh(args.path)
    h = mesh.diameters()
    areas = mesh.signed_areas()
    tags = mesh.boundary_tags
    print(f"{args.path}:")
    print(f"  nodes      {mesh.nodes.shape[0]}")
    print(f"  triangles  {mesh.triangles.shape[0]}")
    print(f"  boundary   {mesh.boundary_edges.shape[0]} edges "
          f"(inflow {int((tags == meshing.TAG_INFLOW).sum())}, "
          f"wall {int((tags == meshing.TAG_WALL).sum())}, "
          f"outflow {int((tags == meshing.TAG_NEUMANN).sum())})")
    print(f"  h          [{h.min():.6g}, {h.max():.6g}]")
    print(f"  area       {areas.sum():.6g}")
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    handlers = {
        "offline": cmd_offline,
        "online": cmd_online,
        "validate": cmd_validate,
        "mesh": cmd_mesh,
    }
    try:
        return handlers[args.command](args)
    except InvalidInputError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except SolverFailure as exc:
        log.error("%s", exc)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
