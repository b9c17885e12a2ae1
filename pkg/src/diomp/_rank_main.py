"""Per-rank entry point executed by the launcher."""

from __future__ import annotations

import json
import os
import sys
import traceback

from . import collectives as coll
from .apps import bench as bench_mod
from .apps.cannon import MatmulSpec, cannon_matmul
from .apps.stencil import StencilSpec, dump_bytes, run_stencil
from .runtime import finalize, init


def _run_p2p(rt, opts) -> str:
    kind = {"put": bench_mod.BenchKind.PutLatency,
            "get": bench_mod.BenchKind.GetLatency,
            "bw": bench_mod.BenchKind.Bandwidth}[opts["mode"]]
    sizes = tuple(opts["sizes"] or bench_mod.latency_sizes())
    spec = bench_mod.BenchSpec(kind, sizes, opts["iters"], opts["warmup"])
    rows = bench_mod.run_p2p(rt, spec)
    return bench_mod.to_csv(rows) if rows else ""


def _run_collective(rt, opts) -> str:
    kind = {"bcast": bench_mod.BenchKind.Bcast,
            "allreduce": bench_mod.BenchKind.Allreduce}[opts["op"]]
    sizes = tuple(opts["sizes"] or bench_mod.collective_sizes())
    spec = bench_mod.BenchSpec(kind, sizes, opts["iters"], opts["warmup"])
    rows = bench_mod.run_collective(rt, spec)
    return bench_mod.to_csv(rows) if rows else ""


def _run_matmul(rt, opts) -> str:
    res = cannon_matmul(rt, MatmulSpec(opts["n"], opts["p"]),
                        seed=opts["seed"], identity_b=opts["identity"])
    if rt.rank != 0:
        return ""
    header = "kind,n,p,residual,seconds,overlap"
    row = (f"matmul,{opts['n']},{opts['p']},{res.residual:.3e},"
           f"{res.seconds:.4f},{int(res.overlap_observed())}")
    return header + "\n" + row + "\n"


def _run_stencil(rt, opts) -> str:
    nx, ny, nz = opts["grid"]
    spec = StencilSpec(nx, ny, nz, steps=opts["steps"],
                       source_amplitude=1.0 if opts["source"] else 0.0)
    res = run_stencil(rt, spec, exchange=opts["exchange"])
    if rt.rank != 0:
        return ""
    if opts.get("dump_field") and res.field is not None:
        with open(opts["dump_field"], "wb") as fh:
            fh.write(dump_bytes(res.field))
    header = "kind,nx,ny,nz,steps,checksum,seconds"
    row = f"stencil,{nx},{ny},{nz},{opts['steps']},{res.checksum},{res.seconds:.4f}"
    return header + "\n" + row + "\n"


def _run_selftest(rt, opts) -> str:
    from .selftest import run_selftest
    if rt.rank != 0:
        return ""
    failures = run_selftest(only=opts.get("only"))
    if failures:
        raise SystemExit(1)
    return ""


_RUNNERS = {"p2p": _run_p2p, "collective": _run_collective,
            "matmul": _run_matmul, "stencil": _run_stencil,
            "selftest": _run_selftest}


def main() -> int:
    plan = json.loads(os.environ["DIOMP_PLAN"])
    out_file = os.environ.get("DIOMP_OUT_FILE")
    rt = init()
    try:
        text = _RUNNERS[plan["subcommand"]](rt, plan["opts"])
        if out_file and text:
            with open(out_file, "w") as fh:
                fh.write(text)
    finally:
        finalize(rt)
    return 0


if __name__ == "__main__":
    try:
        sys.exit(main())
    except SystemExit:
        raise
    except Exception:
        traceback.print_exc()
        sys.exit(1)
