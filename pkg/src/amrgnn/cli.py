"""``amrgnn`` command line: generate, train, evaluate, rollout, bench, plot, mirror, replay.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure.
Every command writes a JSON run manifest; ``amrgnn replay`` re-executes one.
"""
from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointFormatError, load_checkpoint, save_checkpoint
from .mesh import DomainSpec, RefineCriterion
from .model import (ArchitectureConfig, HierarchyMismatch, IncompatibleArchitecture, MultiscaleModel,
                    NonFiniteOutput, build_hierarchy, forward, rollout)
from .pf_oracle import CrackOutsideDomain, SolverDiverged, frame_csv_rows, run_simulation
from .plotting import (UnreadableInput, error_table, plot_error_bars, plot_frames, plot_loss,
                       read_loss_csv, read_metrics, write_text)
from .records import RecordFormatError, atomic_write, load_record, save_record
from .scenario import InvalidScenario, MaterialParams, ScenarioConfig
from .training import (Dataset, EmptyDataset, FrameMisaligned, NonFiniteLoss, TrainConfig,
                       evaluate, fit_scales, loss_csv, metrics_csv, mirror_dataset, train,
                       transfer_weights)

SEED_ENV = "AMRGNN_SEED"
USAGE_ERRORS = (EmptyDataset, IncompatibleArchitecture, UnreadableInput, FrameMisaligned,
                HierarchyMismatch, RecordFormatError, CheckpointFormatError, InvalidScenario,
                CrackOutsideDomain, FileNotFoundError, ValueError)
NUMERICAL_ERRORS = (SolverDiverged, NonFiniteLoss, NonFiniteOutput, FloatingPointError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


class Timer:
    def __init__(self):
        self.phases: dict[str, float] = {}

    def __call__(self, name: str):
        timer = self

        class _Phase:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                timer.phases[name] = timer.phases.get(name, 0.0) + time.perf_counter() - self.t
        return _Phase()


def resolve_seed(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get(SEED_ENV)
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}")


def write_manifest(path: Path, command: str, argv: list[str], config: dict, inputs: list[str],
                   outputs: list[str], timer: Timer) -> None:
    manifest = {
        "command": command,
        "argv": argv,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
        "tool_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "timings_s": timer.phases,
    }
    atomic_write(path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def _manifest_path(args, default: Path) -> Path:
    return Path(args.manifest) if args.manifest else default


def _canonical_argv(args, seed: int) -> list[str]:
    # stored argv always carries the resolved seed so replay does not depend on the environment
    argv = list(args._argv)
    if "--seed" in argv:
        i = argv.index("--seed")
        argv[i + 1] = str(seed)
    else:
        argv += ["--seed", str(seed)]
    return argv


# -- generate ----------------------------------------------------------------

def _sample_scenarios(args, seed: int) -> list[ScenarioConfig]:
    kind, mode = args.scenario.rsplit("-", 1)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(args.count):
        cl = rng.uniform(*args.cl_range)
        cp = rng.uniform(*args.cp_range)
        ang = rng.uniform(*args.angle_range)
        out.append(ScenarioConfig(kind, mode, float(cl), float(cp), float(ang), args.load_increment, args.steps))
    return out


def _simulate(job):
    spec, scen, mat, crit, path = job
    rec = run_simulation(spec, scen, mat, crit)
    save_record(rec, path)
    return path, rec.n_frames


def cmd_generate(args, timer: Timer) -> dict:
    seed = resolve_seed(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = DomainSpec(args.side, args.base, args.max_level)
    mat = MaterialParams()
    crit = RefineCriterion(args.threshold, args.band if args.band is not None else 2 * mat.d)
    scens = _sample_scenarios(args, seed)
    jobs = [(spec, s, mat, crit, str(out / f"{args.prefix}{i:04d}.simrec")) for i, s in enumerate(scens)]
    written: list[str] = []
    try:
        with timer("simulate"):
            if args.jobs > 1 and len(jobs) > 1:
                with ProcessPoolExecutor(args.jobs) as pool:
                    for path, _ in pool.map(_simulate, jobs):
                        written.append(path)
            else:
                for job in jobs:
                    written.append(_simulate(job)[0])
    except BaseException:
        for j in jobs:
            Path(j[4]).unlink(missing_ok=True)
        raise
    if args.csv:
        rows = ["record,step,energy,crack_tip_x,max_abs_u"]
        for p in written:
            for r in frame_csv_rows(load_record(p)):
                rows.append(f"{Path(p).stem}," + ",".join(repr(x) for x in r))
        write_text(args.csv, "\n".join(rows) + "\n")
    print(f"wrote {len(written)} records to {out}")
    return {
        "seed": seed,
        "config": {"spec": spec.to_dict(), "material": mat.to_dict(),
                   "criterion": {"threshold": crit.threshold, "band_width": crit.band_width},
                   "scenarios": [s.to_dict() for s in scens]},
        "inputs": [], "outputs": written + ([args.csv] if args.csv else []),
        "manifest": out / "manifest.json",
    }


# -- train -------------------------------------------------------------------

def _arch_from_args(args, max_level: int) -> ArchitectureConfig:
    hidden = tuple(args.hidden) if args.hidden else (args.dm, args.dm)
    return ArchitectureConfig(args.arch.upper(), max_level, args.dm, args.heads, hidden, hidden)


def cmd_train(args, timer: Timer) -> dict:
    if args.transfer and not args.init_from:
        raise UsageError("--transfer requires --init-from")
    if args.freeze_transferred and not args.transfer:
        raise UsageError("--freeze-transferred requires --transfer")
    seed = resolve_seed(args.seed)
    ds = Dataset.from_dir(args.data, "train", seed)
    with timer("load"):
        records = ds.load()
    max_level = records[0].spec.max_level
    arch = _arch_from_args(args, max_level)
    frozen: tuple[str, ...] = ()
    if args.init_from:
        source, _ = load_checkpoint(args.init_from)
        if args.transfer:
            model = transfer_weights(source, arch, seed)
            if args.freeze_transferred:
                frozen = ("mlp_in.", "down.0.")
        else:
            if source.config != arch:
                raise IncompatibleArchitecture("--init-from checkpoint has a different architecture; "
                                               "use --transfer to copy the encoder only")
            model = source
            model.seed = seed
    else:
        model = MultiscaleModel.init(arch, fit_scales(records), seed)
    cfg = TrainConfig(args.epochs, args.lr, clip_norm=args.clip, weights=tuple(args.weights), seed=seed,
                      lr_min=args.lr_min)

    def log(epoch, loss):
        if args.verbose:
            print(f"epoch {epoch:4d}  loss {loss:.6e}", flush=True)

    with timer("train"):
        res = train(model, records, cfg, frozen=frozen, target_ratio=args.target_ratio, log=log)
    meta = {"train": cfg.to_dict(), "data": ds.names, "transfer_from": args.init_from if args.transfer else None,
            "frozen": list(frozen), "epochs_to_target": res.epochs_to_target}
    save_checkpoint(model, args.out, meta)
    loss_path = args.loss_csv or str(Path(args.out).with_suffix(".loss.csv"))
    write_text(loss_path, loss_csv(res.history))
    print(f"loss {res.initial_loss:.4e} -> {res.final_loss:.4e} "
          f"(ratio {res.initial_loss / max(res.final_loss, 1e-300):.1f}); "
          f"target reached at epoch {res.epochs_to_target}")
    return {"seed": seed, "config": {"arch": arch.to_dict(), **meta},
            "inputs": list(ds.paths) + ([args.init_from] if args.init_from else []),
            "outputs": [args.out, loss_path], "manifest": Path(args.out).with_suffix(".manifest.json")}


# -- evaluate / rollout ------------------------------------------------------

def cmd_evaluate(args, timer: Timer) -> dict:
    model, _ = load_checkpoint(args.checkpoint)
    ds = Dataset.from_dir(args.data, "test")
    records = ds.load()
    for name, rec in zip(ds.names, records):
        if rec.spec.max_level != model.config.max_level:
            raise FrameMisaligned(f"record {name} has max_level {rec.spec.max_level}, "
                                  f"checkpoint expects {model.config.max_level}")
    with timer("evaluate"):
        try:
            results = evaluate(model, records, ds.names, open_loop=args.open_loop, eps_rel=args.eps_rel)
        except FrameMisaligned as exc:
            raise FrameMisaligned(f"{exc} (data: {args.data})") from exc
    text = metrics_csv(results)
    write_text(args.out, text)
    sys.stdout.write(text)
    meta = {"mode": "open-loop" if args.open_loop else "closed-loop", "eps_rel": args.eps_rel,
            "denominator": "max(|true|, eps_rel * (field max - field min over the record))"}
    meta_path = Path(args.out).with_suffix(".meta.json")
    write_text(meta_path, json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return {"seed": None, "config": meta, "inputs": [args.checkpoint, *ds.paths],
            "outputs": [args.out, str(meta_path)], "manifest": Path(args.out).with_suffix(".manifest.json")}


def cmd_rollout(args, timer: Timer) -> dict:
    model, _ = load_checkpoint(args.checkpoint)
    rec = load_record(args.record)
    steps = rec.n_frames - 1 if args.steps is None else args.steps
    with timer("rollout"):
        pred = rollout(model, rec, steps)
    save_record(pred, args.out)
    rows = ["step,energy,crack_tip_x,max_abs_u"] + [",".join(repr(x) for x in r) for r in frame_csv_rows(pred)]
    csv_path = str(Path(args.out).with_suffix(".csv"))
    write_text(csv_path, "\n".join(rows) + "\n")
    print(f"rolled out {steps} steps to {args.out}")
    return {"seed": None, "config": {"steps": steps}, "inputs": [args.checkpoint, args.record],
            "outputs": [args.out, csv_path], "manifest": Path(args.out).with_suffix(".manifest.json")}


# -- bench -------------------------------------------------------------------

def bench_architectures(record, archs: list[str], reps: int = 20, dm: int = 128, heads: int = 4,
                        seed: int = 0, frame: int = -1) -> list[dict]:
    """Median forward wall time per architecture on one frame, identical inputs."""
    fr = record.frames[frame]
    rows = []
    for name in archs:
        cfg = ArchitectureConfig(name.upper(), record.spec.max_level, dm, heads, (dm, dm), (dm, dm))
        model = MultiscaleModel.init(cfg, fit_scales([record]), seed)
        h = build_hierarchy(fr.mesh, fr.phi, fr.u, fr.v, fr.load, cfg, model.scales)
        forward(model, h)  # warm-up
        times = []
        for _ in range(reps):
            model.mp_calls = 0
            t = time.perf_counter()
            forward(model, h)
            times.append(time.perf_counter() - t)
        rows.append({"arch": cfg.family, "mp_blocks": model.mp_calls, "n_nodes": fr.mesh.n_vertices,
                     "forward_ms": 1e3 * float(np.median(times)), "total_s": float(np.sum(times))})
    return rows


def cmd_bench(args, timer: Timer) -> dict:
    seed = resolve_seed(args.seed)
    src = Path(args.data)
    paths = sorted(src.glob("*.simrec")) if src.is_dir() else [src]
    if not paths:
        raise EmptyDataset(f"no records under {src}")
    rec = load_record(paths[0])
    with timer("bench"):
        rows = bench_architectures(rec, args.arch, args.reps, args.dm, args.heads, seed)
    lines = ["arch,mp_blocks,n_nodes,forward_ms,total_s"]
    lines += [f"{r['arch']},{r['mp_blocks']},{r['n_nodes']},{r['forward_ms']:.3f},{r['total_s']:.4f}" for r in rows]
    write_text(args.out, "\n".join(lines) + "\n")
    print("\n".join(lines))
    return {"seed": seed, "config": {"archs": args.arch, "reps": args.reps, "dm": args.dm},
            "inputs": [str(paths[0])], "outputs": [args.out],
            "manifest": Path(args.out).with_suffix(".manifest.json")}


# -- plot / mirror -----------------------------------------------------------

def cmd_plot(args, timer: Timer) -> dict:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs, inputs = [], []
    if not (args.record or args.metrics or args.loss):
        raise UsageError("give at least one of --record, --metrics, --loss")
    for p in args.record or []:
        try:
            rec = load_record(p)
        except (OSError, RecordFormatError) as exc:
            raise UnreadableInput(f"{p}: {exc}") from exc
        target = out / f"{Path(p).stem}_{args.field}.png"
        plot_frames(rec, target, args.frames, args.field)
        inputs.append(p)
        outputs.append(str(target))
    if args.metrics:
        groups = {}
        for item in args.metrics:
            label, _, path = item.rpartition("=")
            groups[label or Path(path).stem] = read_metrics(path)
            inputs.append(path)
        write_text(out / "errors_table.csv", error_table(groups))
        plot_error_bars(groups, out / "errors.png")
        outputs += [str(out / "errors_table.csv"), str(out / "errors.png")]
    for p in args.loss or []:
        target = out / f"{Path(p).stem}_loss.png"
        plot_loss(read_loss_csv(p), target)
        inputs.append(p)
        outputs.append(str(target))
    print("\n".join(outputs))
    return {"seed": None, "config": {"field": args.field, "frames": args.frames},
            "inputs": inputs, "outputs": outputs, "manifest": out / "manifest.json"}


def cmd_mirror(args, timer: Timer) -> dict:
    ds = Dataset.from_dir(args.data)
    out = Path(args.out)
    written = []
    for name, rec in zip(ds.names, mirror_dataset(ds.load())):
        p = out / f"{name}_mirrored.simrec"
        save_record(rec, p)
        written.append(str(p))
    print(f"mirrored {len(written)} records into {out}")
    return {"seed": None, "config": {}, "inputs": list(ds.paths), "outputs": written,
            "manifest": out / "manifest.json"}


def cmd_replay(args, timer: Timer) -> dict | None:
    try:
        manifest = json.loads(Path(args.manifest_file).read_text())
        argv = manifest["argv"]
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise UnreadableInput(f"{args.manifest_file}: {exc}") from exc
    code = main(argv)
    if code:
        raise SystemExit(code)
    return None


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="amrgnn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"amrgnn {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        if seed:
            sp.add_argument("--seed", type=int, default=None, help=f"random seed (fallback: ${SEED_ENV}, then 0)")
        sp.add_argument("--manifest", default=None, help="manifest path (default: next to the outputs)")

    g = sub.add_parser("generate", help="run the phase-field oracle and write .simrec files")
    g.add_argument("--scenario", default="left-edge-tension",
                   choices=[f"{k}-{m}" for k in ("left-edge", "center", "right-edge") for m in ("tension", "shear")])
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--out", required=True)
    g.add_argument("--prefix", default="sim")
    g.add_argument("--cl-range", type=float, nargs=2, default=(0.1, 0.3), metavar=("LO", "HI"))
    g.add_argument("--cp-range", type=float, nargs=2, default=(0.25, 0.25), metavar=("LO", "HI"))
    g.add_argument("--angle-range", type=float, nargs=2, default=(0.0, 0.0), metavar=("LO", "HI"))
    g.add_argument("--load-increment", type=float, default=2e-7)
    g.add_argument("--steps", type=int, default=20)
    g.add_argument("--side", type=float, default=0.5)
    g.add_argument("--base", type=int, default=16)
    g.add_argument("--max-level", type=int, default=2)
    g.add_argument("--threshold", type=float, default=0.95)
    g.add_argument("--band", type=float, default=None, help="refinement band width in meters (default 2d)")
    g.add_argument("--csv", default=None, help="per-frame summary CSV")
    g.add_argument("--jobs", type=int, default=1)
    common(g)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a multiscale model on a directory of records")
    t.add_argument("--arch", default="ssr", choices=["fsr", "tsr", "ssr", "FSR", "TSR", "SSR"])
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--loss-csv", default=None)
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--lr-min", type=float, default=None, help="cosine-decay the learning rate to this value")
    t.add_argument("--clip", type=float, default=1.0)
    t.add_argument("--weights", type=float, nargs=3, default=(1.0, 1.0, 1.0), metavar=("W_PHI", "W_U", "W_V"))
    t.add_argument("--dm", type=int, default=128)
    t.add_argument("--heads", type=int, default=4)
    t.add_argument("--hidden", type=int, nargs="*", default=None, help="encoder/decoder hidden widths")
    t.add_argument("--target-ratio", type=float, default=0.1)
    t.add_argument("--init-from", default=None)
    t.add_argument("--transfer", action="store_true")
    t.add_argument("--freeze-transferred", action="store_true")
    t.add_argument("--verbose", action="store_true")
    common(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="per-record percent errors of a rollout")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--open-loop", action="store_true", help="feed ground truth at every step")
    e.add_argument("--eps-rel", type=float, default=0.01)
    common(e, seed=False)
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("rollout", help="autoregressive prediction from a record's first frame")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--record", required=True)
    r.add_argument("--steps", type=int, default=None)
    r.add_argument("--out", required=True)
    common(r, seed=False)
    r.set_defaults(func=cmd_rollout)

    b = sub.add_parser("bench", help="forward timing per architecture")
    b.add_argument("--data", required=True, help="record file or directory (first record is used)")
    b.add_argument("--arch", nargs="+", default=["fsr", "tsr", "ssr"])
    b.add_argument("--reps", type=int, default=20)
    b.add_argument("--dm", type=int, default=128)
    b.add_argument("--heads", type=int, default=4)
    b.add_argument("--out", required=True)
    common(b)
    b.set_defaults(func=cmd_bench)

    pl = sub.add_parser("plot", help="render figures and plot-ready tables")
    pl.add_argument("--record", nargs="*", default=None)
    pl.add_argument("--frames", type=int, nargs="*", default=None)
    pl.add_argument("--field", default="phi", choices=["phi", "u", "v"])
    pl.add_argument("--metrics", nargs="*", default=None, help="metrics CSVs, optionally LABEL=PATH")
    pl.add_argument("--loss", nargs="*", default=None)
    pl.add_argument("--out", required=True, help="output directory")
    common(pl, seed=False)
    pl.set_defaults(func=cmd_plot)

    m = sub.add_parser("mirror", help="reflect every record about the vertical centre line")
    m.add_argument("--data", required=True)
    m.add_argument("--out", required=True)
    common(m, seed=False)
    m.set_defaults(func=cmd_mirror)

    rp = sub.add_parser("replay", help="re-run the command stored in a manifest")
    rp.add_argument("manifest_file")
    rp.set_defaults(func=cmd_replay, manifest=None)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args._argv = argv
    timer = Timer()
    try:
        with timer("total"):
            info = args.func(args, timer)
        if info is not None:
            seed = info.pop("seed")
            stored = _canonical_argv(args, seed) if seed is not None else argv
            write_manifest(_manifest_path(args, Path(info["manifest"])), args.command, stored,
                           info["config"], info["inputs"], info["outputs"], timer)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"amrgnn {args.command}: usage error: {exc}", file=sys.stderr)
        return 1
    except NUMERICAL_ERRORS as exc:
        print(f"amrgnn {args.command}: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except USAGE_ERRORS as exc:
        print(f"amrgnn {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
