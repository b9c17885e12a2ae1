"""Multi-process launcher and experiment CLI.

`diomp-run` spawns one process per rank on this host, assigns simulated
node ids (so InterNode paths exist without a cluster), opens the rendezvous
socket through rank 0, runs one subcommand per rank, merges per-rank CSV
output in rank order, and reaps everything on failure.

Exit codes: 0 success, 2 usage error, 3 child failure, 4 launch timeout.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import secrets
import signal
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field

from .emulate import free_port
from .errors import UsageError

SUBCOMMANDS = ("p2p", "collective", "matmul", "stencil", "selftest")


@dataclass
class RunPlan:
    nranks: int
    devices_per_rank: int
    node_ids: list[int]
    subcommand: str
    opts: dict = field(default_factory=dict)
    env: dict = field(default_factory=dict)
    out: str | None = None
    baseline: str | None = None
    launch_timeout: float = 600.0


def _sizes_arg(text: str) -> list[int]:
    try:
        sizes = [int(s) for s in text.split(",") if s]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size list {text!r}")
    if not sizes or sizes != sorted(sizes):
        raise argparse.ArgumentTypeError("sizes must be ascending")
    return sizes


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="diomp-run", allow_abbrev=False,
        description="Launch multi-process runs of the runtime's benchmarks "
                    "and applications on one host.")
    ap.add_argument("-n", "--nranks", type=int, default=1)
    ap.add_argument("--nodes", type=int, default=None,
                    help="number of simulated nodes (contiguous rank blocks)")
    ap.add_argument("--node-map", type=str, default=None,
                    help="explicit comma-separated node id per rank")
    ap.add_argument("--devices-per-rank", type=int, default=None)
    ap.add_argument("--transport", choices=("tcp", "shm"), default=None)
    ap.add_argument("--segment-bytes", type=int, default=None)
    ap.add_argument("--allocator", choices=("linear", "buddy"), default=None)
    ap.add_argument("--peer-matrix", choices=("full", "none"), default=None)
    ap.add_argument("--max-active-streams", type=int, default=None)
    ap.add_argument("--sim-task-us", type=int, default=None)
    ap.add_argument("--kernels", choices=("auto", "cy", "py"), default=None)
    ap.add_argument("--timeout", type=float, default=None,
                    help="runtime handshake/progress timeout (seconds)")
    ap.add_argument("--launch-timeout", type=float, default=600.0)
    ap.add_argument("--out", type=str, default=None, help="merged CSV path")
    ap.add_argument("--baseline", type=str, default=None,
                    help="baseline CSV for the log10 ratio column")

    sub = ap.add_subparsers(dest="subcommand", required=True)

    p2p = sub.add_parser("p2p", help="point-to-point latency/bandwidth sweep")
    p2p.add_argument("--mode", choices=("put", "get", "bw"), default="put")
    p2p.add_argument("--sizes", type=_sizes_arg, default=None)
    p2p.add_argument("--iters", type=int, default=100)
    p2p.add_argument("--warmup", type=int, default=5)

    colp = sub.add_parser("collective", help="bcast/allreduce latency sweep")
    colp.add_argument("--op", choices=("bcast", "allreduce"), default="bcast")
    colp.add_argument("--sizes", type=_sizes_arg, default=None)
    colp.add_argument("--iters", type=int, default=100)
    colp.add_argument("--warmup", type=int, default=5)

    mm = sub.add_parser("matmul", help="ring-exchange distributed matmul")
    mm.add_argument("--n", type=int, required=True)
    mm.add_argument("--p", type=int, default=None,
                    help="endpoint count (default: nranks * devices)")
    mm.add_argument("--seed", type=int, default=0)
    mm.add_argument("--identity", action="store_true")

    st = sub.add_parser("stencil", help="acoustic stencil with halo exchange")
    st.add_argument("--grid", type=int, nargs="+", required=True,
                    metavar="N", help="nx [ny nz]")
    st.add_argument("--steps", type=int, default=100)
    st.add_argument("--exchange", choices=("onesided", "twosided"),
                    default="onesided")
    st.add_argument("--no-source", action="store_true")
    st.add_argument("--dump-field", type=str, default=None)

    sf = sub.add_parser("selftest", help="run the invariant suite")
    sf.add_argument("--only", type=str, default=None,
                    help="comma-separated property name filters")
    return ap


def parse_args(argv) -> RunPlan:
    ap = _build_parser()
    args = ap.parse_args(argv)
    n = args.nranks
    if n < 1:
        raise UsageError("-n must be >= 1")
    if args.node_map is not None:
        node_ids = [int(x) for x in args.node_map.split(",")]
        if len(node_ids) != n:
            raise UsageError(f"--node-map needs {n} entries")
    else:
        k = args.nodes if args.nodes is not None else n
        if not 1 <= k <= n:
            raise UsageError(f"--nodes {k} must be in [1, {n}]")
        node_ids = [r * k // n for r in range(n)]

    env = {}
    if args.devices_per_rank is not None:
        if args.devices_per_rank < 1:
            raise UsageError("--devices-per-rank must be >= 1")
        env["DIOMP_DEVICES_PER_RANK"] = str(args.devices_per_rank)
    if args.transport:
        env["DIOMP_TRANSPORT"] = args.transport
    if args.segment_bytes:
        env["DIOMP_SEGMENT_BYTES"] = str(args.segment_bytes)
    if args.allocator:
        env["DIOMP_ALLOCATOR"] = args.allocator
    if args.peer_matrix:
        env["DIOMP_PEER_MATRIX"] = args.peer_matrix
    if args.max_active_streams:
        env["DIOMP_MAX_ACTIVE_STREAMS"] = str(args.max_active_streams)
    if args.sim_task_us is not None:
        env["DIOMP_SIM_TASK_US"] = str(args.sim_task_us)
    if args.kernels:
        env["DIOMP_KERNELS"] = args.kernels
    if args.timeout:
        env["DIOMP_TIMEOUT"] = str(args.timeout)

    opts = {}
    if args.subcommand == "p2p":
        opts = dict(mode=args.mode, sizes=args.sizes, iters=args.iters,
                    warmup=args.warmup)
        if n < 2:
            raise UsageError("p2p needs at least 2 ranks")
    elif args.subcommand == "collective":
        opts = dict(op=args.op, sizes=args.sizes, iters=args.iters,
                    warmup=args.warmup)
        if n < 2 and (args.devices_per_rank or 1) < 2:
            raise UsageError("collective needs at least 2 endpoints")
    elif args.subcommand == "matmul":
        dpr = args.devices_per_rank or 1
        p = args.p if args.p is not None else n * dpr
        if p != n * dpr:
            raise UsageError(f"--p {p} must equal nranks*devices = {n * dpr}")
        if args.n % p:
            raise UsageError(f"--n {args.n} must be divisible by P={p}")
        opts = dict(n=args.n, p=p, seed=args.seed, identity=args.identity)
    elif args.subcommand == "stencil":
        g = args.grid
        if len(g) == 1:
            g = [g[0]] * 3
        if len(g) != 3:
            raise UsageError("--grid takes 1 or 3 integers")
        if g[0] % n:
            raise UsageError(f"nx={g[0]} must be divisible by -n {n}")
        opts = dict(grid=g, steps=args.steps, exchange=args.exchange,
                    source=not args.no_source, dump_field=args.dump_field)
    elif args.subcommand == "selftest":
        opts = dict(only=args.only.split(",") if args.only else None)

    return RunPlan(nranks=n,
                   devices_per_rank=args.devices_per_rank or 1,
                   node_ids=node_ids, subcommand=args.subcommand, opts=opts,
                   env=env, out=args.out, baseline=args.baseline,
                   launch_timeout=args.launch_timeout)


def spawn_and_rendezvous(plan: RunPlan) -> int:
    """Launch the rank processes, supervise, merge CSVs. Returns exit code."""
    session = secrets.token_hex(6)
    port = free_port()
    outdir = tempfile.mkdtemp(prefix=f"diomp-{session}-")
    procs: list[subprocess.Popen] = []
    try:
        for rank in range(plan.nranks):
            env = os.environ.copy()
            env.update(plan.env)
            env.update({
                "DIOMP_RANK": str(rank),
                "DIOMP_NRANKS": str(plan.nranks),
                "DIOMP_NODE_ID": str(plan.node_ids[rank]),
                "DIOMP_RENDEZVOUS": f"127.0.0.1:{port}",
                "DIOMP_SESSION": session,
                "DIOMP_DEVICES_PER_RANK": plan.env.get(
                    "DIOMP_DEVICES_PER_RANK", str(plan.devices_per_rank)),
                "DIOMP_PLAN": json.dumps(
                    {"subcommand": plan.subcommand, "opts": plan.opts}),
                "DIOMP_OUT_FILE": os.path.join(outdir, f"rank{rank}.csv"),
            })
            try:
                procs.append(subprocess.Popen(
                    [sys.executable, "-m", "diomp._rank_main"], env=env))
            except OSError as e:
                raise UsageError(f"spawn failed: {e}")

        deadline = time.monotonic() + plan.launch_timeout
        statuses: dict[int, int] = {}
        timed_out = False
        while len(statuses) < len(procs):
            for i, p in enumerate(procs):
                if i not in statuses and p.poll() is not None:
                    statuses[i] = p.returncode
            bad = [s for s in statuses.values() if s != 0]
            if bad or time.monotonic() > deadline:
                timed_out = not bad
                _reap(procs, statuses)
                break
            time.sleep(0.02)

        first_bad = next((statuses[i] for i in sorted(statuses)
                          if statuses.get(i, 0) != 0), 0)
        if timed_out:
            print("launch timed out; children killed", file=sys.stderr)
            return 4
        if first_bad:
            print(f"rank failed with status {first_bad}", file=sys.stderr)
            return 3

        _merge_csv(plan, outdir)
        return 0
    finally:
        _reap(procs, {})
        for path in glob.glob(os.path.join(outdir, "*")):
            os.unlink(path)
        os.rmdir(outdir)
        for path in glob.glob(f"/dev/shm/diomp-{session}-*"):
            try:
                os.unlink(path)
            except OSError:
                pass


def _reap(procs, statuses):
    for p in procs:
        if p.poll() is None:
            p.send_signal(signal.SIGTERM)
    deadline = time.monotonic() + 5
    for p in procs:
        while p.poll() is None and time.monotonic() < deadline:
            time.sleep(0.02)
        if p.poll() is None:
            p.kill()
            p.wait()


def _merge_csv(plan: RunPlan, outdir: str):
    chunks = []
    header = None
    for rank in range(plan.nranks):
        path = os.path.join(outdir, f"rank{rank}.csv")
        if not os.path.exists(path):
            continue
        with open(path) as fh:
            lines = [ln for ln in fh.read().splitlines() if ln.strip()]
        if not lines:
            continue
        if lines[0].startswith("kind,") or "," in lines[0] and header is None:
            header = header or lines[0]
            lines = lines[1:] if lines[0] == header else lines
        chunks.extend(lines)
    text = "\n".join(([header] if header else []) + chunks)
    if plan.baseline and text:
        from .apps import bench as bench_mod
        rows = _rows_from_csv(text)
        with open(plan.baseline) as fh:
            bench_mod.apply_baseline(rows, fh.read())
        text = bench_mod.to_csv(rows, with_ratio=True).rstrip("\n")
    if plan.out:
        with open(plan.out, "w") as fh:
            fh.write(text + ("\n" if text else ""))
    elif text:
        print(text)


def _rows_from_csv(text: str):
    from .apps.bench import BenchRow
    rows = []
    for line in text.splitlines():
        if not line.strip() or line.startswith("kind,"):
            continue
        kind, size, iters, mean, bw = line.split(",")[:5]
        rows.append(BenchRow(kind, int(size), int(iters), float(mean),
                             float(bw)))
    return rows


def main(argv=None) -> int:
    try:
        plan = parse_args(argv if argv is not None else sys.argv[1:])
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    try:
        return spawn_and_rendezvous(plan)
    except UsageError as e:
        print(f"launch error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
