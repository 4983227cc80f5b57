"""``sigmanet`` command line: data generation, training, benchmarks, diagnostics.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
``SIGMA_THREADS`` caps BLAS worker threads (default 1, which keeps every
artifact bit-reproducible).
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import bench, gradsuite
from .backbone import SigmaBackbone, SigmaConfig
from .checkpoint import CheckpointError, load_adapted, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .data import HsigError, HsiCube, MixtureGroundTruth, read_cube, synth_mixture_cube, synth_random_cube, write_cube
from .attention import sampled_points, write_offsets_csv
from .mae import MAE, run_pretrain
from .tasks.segmentation import run_finetune_seg
from .tasks.unmixing import run_finetune_unmix

log = logging.getLogger("sigmanet")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------- helpers
def _overrides(args, section: str, **flags) -> dict:
    out = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    for name, value in flags.items():
        if value is not None:
            out[f"{section}.{name}"] = value
    return out


def _load_config(args, section: str, **flags) -> RunConfig:
    return RunConfig.load(getattr(args, "config", None), _overrides(args, section, **flags))


def _write_config(cfg: RunConfig, out_dir: Path, *sections: str) -> None:
    (out_dir / "config.txt").write_text("\n".join(cfg.echo(*sections)) + "\n")


def _write_metrics(path: Path, metrics: dict) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["metric", "value"])
        for key, value in metrics.items():
            writer.writerow([key, repr(float(value)) if isinstance(value, (float, np.floating)) else value])


def _write_matrix_csv(path: Path, arr: np.ndarray, fmt: str = "%.9g") -> None:
    np.savetxt(path, np.atleast_2d(arr), delimiter=",", fmt=fmt)


def _read_cube(path) -> HsiCube:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"data file not found: {path}")
    return read_cube(path)


def _truth_paths(cube_path: Path) -> tuple[Path, Path]:
    stem = cube_path.with_suffix("")
    return Path(f"{stem}.endmembers.csv"), Path(f"{stem}.abundances.hsig")


def _load_truth(cube_path: Path) -> MixtureGroundTruth | None:
    em_path, ab_path = _truth_paths(cube_path)
    if not (em_path.exists() and ab_path.exists()):
        return None
    E = np.loadtxt(em_path, delimiter=",", ndmin=2)
    A = read_cube(ab_path).data.astype(np.float64)
    log.info("using ground truth %s, %s", em_path.name, ab_path.name)
    return MixtureGroundTruth(E, A, 0.0)


def _load_state(path):
    if path is None:
        return None
    path = Path(path)
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _write_adaptation(out_dir: Path, report) -> None:
    with open(out_dir / "adaptation.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["parameter", "action"])
        writer.writerows(report)
    for name, action in report:
        if action != "loaded":
            log.info("checkpoint adaptation: %s %s", name, action)


def _loss_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([row[0], *(repr(float(v)) for v in row[1:])])


# --------------------------------------------------------------------------- subcommands
def cmd_gen_synth(args) -> int:
    cfg = _load_config(args, "synth", h=args.h, w=args.w, c=args.c, ca=args.ca, noise=args.noise, seed=args.seed)
    s = cfg.section("synth")
    if min(s.h, s.w, s.c) < 1:
        raise UsageError(f"cube dimensions must be positive, got {s.h}x{s.w}x{s.c}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if s.ca:
        cube, truth = synth_mixture_cube(s.h, s.w, s.c, s.ca, noise_sigma=s.noise, seed=s.seed)
        write_cube(cube, out)
        em_path, ab_path = _truth_paths(out)
        _write_matrix_csv(em_path, truth.endmembers)
        write_cube(HsiCube(truth.abundances.astype(np.float32), {"kind": "abundances", "seed": s.seed}), ab_path)
    else:
        if s.noise:
            log.warning("--noise only applies to mixture cubes (--ca); ignored")
        write_cube(synth_random_cube(s.h, s.w, s.c, seed=s.seed), out)
    print(f"wrote {out} ({s.h}, {s.w}, {s.c})")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_config(args, "pretrain", kind=args.kind, steps=args.steps, seed=args.seed)
    p = cfg.section("pretrain")
    if p.kind not in ("spatial", "spectral"):
        raise UsageError(f"pretrain.kind must be spatial or spectral, got {p.kind!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(cfg, out, "pretrain")
    if p.steps == 0:
        model = MAE(p)
        save_checkpoint(model.export_state(), out / "checkpoint.sgmc")
        (out / "loss.csv").write_text("step,loss\n")
        print(f"steps=0: wrote initial checkpoint to {out}")
        return 0
    _, report = run_pretrain(p, out_dir=out)
    ratio = report.eval_final / report.eval_initial if report.eval_initial else float("nan")
    print(f"masked MSE {report.eval_initial:.6g} -> {report.eval_final:.6g} (ratio {ratio:.4f}); outputs in {out}")
    return 0


def cmd_finetune_unmix(args) -> int:
    cfg = _load_config(args, "unmix", seed=args.seed)
    u = cfg.section("unmix")
    data = Path(args.data)
    cube = _read_cube(data)
    truth = _load_truth(data)
    if truth is not None and truth.endmembers.shape[0] != u.n_endmembers:
        log.warning("ground truth has %d endmembers, config asks for %d; metrics skipped",
                    truth.endmembers.shape[0], u.n_endmembers)
        truth = None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(cfg, out, "unmix")
    Z, W, metrics, model = run_finetune_unmix(u, cube, _load_state(args.ckpt), truth)
    write_cube(HsiCube(Z.astype(np.float32), {"kind": "abundances", "seed": u.seed}), out / "abundances.hsig")
    _write_matrix_csv(out / "endmembers.csv", W)
    _write_metrics(out / "metrics.csv", metrics)
    _loss_csv(out / "loss.csv", ["epoch", "loss", "sad", "lhalf", "tv"], model.curve)
    _write_adaptation(out, model.adaptation)
    print(", ".join(f"{k}={v:.6g}" for k, v in metrics.items()))
    return 0


def _read_labels(path, shape) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"label file not found: {path}")
    labels = np.loadtxt(path, delimiter=",", ndmin=2)
    if labels.shape != tuple(shape):
        raise UsageError(f"label shape {labels.shape} does not match cube shape {tuple(shape)}")
    if not np.all(labels == np.round(labels)):
        raise UsageError(f"labels in {path} must be integers")
    return labels.astype(np.int64)


def cmd_finetune_seg(args) -> int:
    cfg = _load_config(args, "seg", seed=args.seed)
    s = cfg.section("seg")
    cube = _read_cube(args.data)
    labels = _read_labels(args.labels, cube.shape[:2])
    test = _read_labels(args.test_labels, cube.shape[:2]) if args.test_labels else None
    if labels.max() >= s.n_classes or labels.min() < -1:
        raise UsageError(f"labels must lie in -1..{s.n_classes - 1}, found {labels.min()}..{labels.max()}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(cfg, out, "seg")
    logits, metrics, model = run_finetune_seg(s, cube, labels, _load_state(args.ckpt), test)
    _write_matrix_csv(out / "predictions.csv", logits.argmax(-1), fmt="%d")
    _write_metrics(out / "metrics.csv", metrics)
    _loss_csv(out / "loss.csv", ["epoch", "loss"], model.curve)
    _write_adaptation(out, model.adaptation)
    print(", ".join(f"{k}={v:.6g}" for k, v in metrics.items()))
    return 0


def cmd_bench_attn(args) -> int:
    cfg = _load_config(args, "bench", mech=args.mech, nlist=args.nlist, dp=args.dp, np=args.np,
                       repeats=args.repeats, seed=args.seed)
    b = cfg.section("bench")
    mechs = [m.strip() for m in b.mech.split(",") if m.strip()]
    if mechs == ["both"]:
        mechs = list(bench.MECHANISMS)
    for m in mechs:
        if m not in bench.MECHANISMS:
            raise UsageError(f"unknown mechanism {m!r}; choose from {', '.join(bench.MECHANISMS)}")
    try:
        reports = [bench.measure_scaling(m, b.nlist, b.dp, b.np, b.repeats, seed=b.seed) for m in mechs]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    report = bench.merge(*reports)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    bench.emit_report(report, out, extra=cfg.echo("bench"))
    print(report.summary())
    return 0


def cmd_grad_check(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    results = gradsuite.run_suite(args.trials, args.seed, args.tol)
    table = gradsuite.format_table(results)
    print(table)
    if args.out:
        Path(args.out).write_text(table + "\n")
    return 0 if all(r.passed for r in results) else 1


def cmd_inspect_offsets(args) -> int:
    cfg = _load_config(args, "inspect", seed=args.seed)
    i = cfg.section("inspect")
    cube = _read_cube(args.data)
    h, w, c = cube.shape
    if h % i.patch or w % i.patch:
        raise UsageError(f"cube {h}x{w} is not divisible by patch {i.patch}")
    sc = SigmaConfig((h, w, c), i.depth, i.dim, i.heads, 4, i.patch, min(i.n_spec, c), i.n_points, True, i.seed,
                     spectral=False)
    model = SigmaBackbone(sc)
    state = _load_state(args.ckpt)
    if state is not None:
        for name, action in load_adapted(model, state, seed=i.seed):
            if action != "loaded":
                log.info("checkpoint adaptation: %s %s", name, action)
    if not 0 <= args.head < i.heads:
        raise UsageError(f"--head must be in 0..{i.heads - 1}")
    try:
        offsets = model.spat.layer_offsets(cube.data.astype(np.float32), args.layer)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_offsets_csv(out, sampled_points(offsets[args.head], model.spat.cfg.grid))
    print(f"wrote {out}: layer {args.layer}, head {args.head}, {offsets.shape[1]} queries x {offsets.shape[2]} points")
    return 0


# --------------------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sigmanet", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    add = sub.add_parser

    def add_parser(name, **kw):
        p = add(name, parents=[common], **kw)
        p.set_defaults(parser=p)
        return p

    sub.add_parser = add_parser

    def with_config(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int)
        return p

    p = with_config(sub.add_parser("gen-synth", help="write a synthetic HSIG cube"))
    p.add_argument("--h", type=int)
    p.add_argument("--w", type=int)
    p.add_argument("--c", type=int)
    p.add_argument("--ca", type=int, help="number of endmembers; writes a mixture cube plus ground truth")
    p.add_argument("--noise", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = with_config(sub.add_parser("pretrain", help="masked-autoencoder pre-training"))
    p.add_argument("--kind", choices=("spatial", "spectral"))
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = with_config(sub.add_parser("finetune-unmix", help="unmixing on one cube"))
    p.add_argument("--ckpt")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune_unmix)

    p = with_config(sub.add_parser("finetune-seg", help="pixel classification on one cube"))
    p.add_argument("--ckpt")
    p.add_argument("--data", required=True)
    p.add_argument("--labels", required=True, help="CSV label map, -1 for unlabelled")
    p.add_argument("--test-labels")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune_seg)

    p = with_config(sub.add_parser("bench-attn", help="FLOP check and wall-clock scaling"))
    p.add_argument("--mech", help="ssa, full or a comma list")
    p.add_argument("--nlist", help="comma-separated token counts")
    p.add_argument("--dp", type=int)
    p.add_argument("--np", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench_attn)

    p = sub.add_parser("grad-check", help="finite-difference check of every registered op")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--out")
    p.set_defaults(func=cmd_grad_check)

    p = with_config(sub.add_parser("inspect-offsets", help="sampled coordinates of one SSA layer"))
    p.add_argument("--ckpt")
    p.add_argument("--data", required=True)
    p.add_argument("--layer", type=int, default=1)
    p.add_argument("--head", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inspect_offsets)
    return parser


def _thread_limit() -> int:
    raw = os.environ.get("SIGMA_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"SIGMA_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"SIGMA_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=_thread_limit()):
            return args.func(args)
    except (UsageError, ConfigError) as exc:
        args.parser.print_usage(sys.stderr)
        print(f"sigmanet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (HsigError, CheckpointError, FloatingPointError, RuntimeError, ValueError, OSError) as exc:
        print(f"sigmanet {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
