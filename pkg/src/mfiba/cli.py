"""Command-line front end: ``mfiba <command> [options]``.

Data goes to files (or standard output); diagnostics go to standard error.
Every command exits 0 on success and 1 on any error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from mfiba._io import atomic_write_bytes, atomic_write_text
from mfiba.bdrate import bd_rate
from mfiba.calibration import fit_models, run_mfip
from mfiba.codec import FCMB_OVERHEAD_BYTES, PhiVector, ReferenceBackend, ScaleBitstream, decode_pyramid, encode_pyramid
from mfiba.config import RunConfig, load_config
from mfiba.evaluation import (
    MODES,
    importance_sweep,
    plan_allocation,
    read_curve_csv,
    rd_curve,
    write_curve_csv,
    write_report_csv,
    write_sweep_csv,
)
from mfiba.mfip import AllocationContext, finetune_weights
from mfiba.pyramid import FeaturePyramid, FeatureScale, load_pyramid_file, pyramid_to_bytes, synth_pyramid
from mfiba.rdmodel import ModelFile, fit_rate_phi

log = logging.getLogger("mfiba")

PYRAMID_SUFFIX = ".fpyr"
BUNDLE_SUFFIX = ".fcmb"


class CliError(RuntimeError):
    pass


# -- file helpers -------------------------------------------------------------


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_pyramid(p: FeaturePyramid, path: Path) -> None:
    """FPYR bytes plus a JSON sidecar for metadata the container does not carry."""
    atomic_write_bytes(path, pyramid_to_bytes(p))
    atomic_write_text(_sidecar(path), _json_text({"source_id": p.source_id, "object_size_param": p.object_size_param}))


def read_pyramid(path: str | Path) -> FeaturePyramid:
    path = Path(path)
    if not path.is_file():
        raise CliError(f"pyramid file not found: {path}")
    meta = {}
    if _sidecar(path).is_file():
        meta = json.loads(_sidecar(path).read_text())
    return load_pyramid_file(path, meta.get("source_id", path.stem), meta.get("object_size_param"))


def read_model(path: str | Path) -> ModelFile:
    path = Path(path)
    if not path.is_file():
        raise CliError(f"model file not found: {path}")
    try:
        return ModelFile.from_json(path.read_text())
    except (ValueError, TypeError) as exc:
        raise CliError(f"model file {path} is malformed: {exc}") from exc


def corpus_files(directory: str | Path) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise CliError(f"pyramid directory not found: {directory}")
    return sorted(directory.glob(f"*{PYRAMID_SUFFIX}"))


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        atomic_write_text(out, text)


def _pool_map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(fn, items))


# -- bundle format ------------------------------------------------------------


def write_bundle(streams: list[ScaleBitstream], like: FeaturePyramid, path: Path) -> int:
    """Concatenated FCMB streams plus a JSON sidecar with the geometry."""
    blob = b"".join(s.to_bytes() for s in streams)
    atomic_write_bytes(path, blob)
    meta = {
        "source_id": like.source_id,
        "object_size_param": like.object_size_param,
        "has_pool": like.has_pool,
        "shapes": [list(sc.shape) for sc in like.scales],
        "phis": [s.phi for s in streams],
        "total_bits": 8 * len(blob),
    }
    atomic_write_text(_sidecar(path), _json_text(meta))
    return len(blob)


def read_bundle(path: str | Path) -> tuple[list[ScaleBitstream], dict]:
    path = Path(path)
    if not path.is_file():
        raise CliError(f"bundle file not found: {path}")
    if not _sidecar(path).is_file():
        raise CliError(f"bundle manifest not found: {_sidecar(path)}")
    meta = json.loads(_sidecar(path).read_text())
    blob = path.read_bytes()
    streams, pos = [], 0
    for shape in meta["shapes"]:
        # The payload length sits in the last 8 bytes of the FCMB header.
        head = FCMB_OVERHEAD_BYTES - 8
        if pos + head > len(blob):
            raise CliError(f"bundle {path} is truncated")
        plen = int.from_bytes(blob[pos + head - 8 : pos + head], "little")
        end = pos + head + plen + 8
        streams.append(ScaleBitstream.from_bytes(blob[pos:end], tuple(shape)))
        pos = end
    if pos != len(blob):
        raise CliError(f"bundle {path} has {len(blob) - pos} trailing bytes")
    return streams, meta


def _placeholder(meta: dict) -> FeaturePyramid:
    scales = tuple(FeatureScale(i, np.zeros(shape, dtype=np.float32)) for i, shape in enumerate(meta["shapes"]))
    return FeaturePyramid(scales, meta["has_pool"], meta.get("source_id", ""), meta.get("object_size_param"))


# -- commands -----------------------------------------------------------------


def cmd_synth(cfg: RunConfig, args) -> int:
    out = Path(args.out or cfg.pyramid_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [args.seed] if args.seed is not None else list(cfg.seeds)
    spec = cfg.pyramid_spec
    for seed in seeds:
        write_pyramid(synth_pyramid(seed, spec), out / f"synth-{seed}{PYRAMID_SUFFIX}")
    log.info("wrote %d pyramids to %s", len(seeds), out)
    return 0


def _mfip_worker(job):
    path, cfg_dict = job
    cfg = RunConfig.from_dict(cfg_dict)
    p = read_pyramid(path)
    return run_mfip(p, ReferenceBackend(cfg.codec), cfg.make_evaluator(), cfg.levels)


def cmd_calibrate(cfg: RunConfig, args) -> int:
    files = corpus_files(args.pyramids or cfg.pyramid_dir)
    if not files:
        raise CliError(f"calibration corpus is empty: no *{PYRAMID_SUFFIX} files in {args.pyramids or cfg.pyramid_dir}")
    runs = _pool_map(_mfip_worker, [(f, cfg.to_dict()) for f in files], cfg.jobs)
    model, samples = fit_models(runs, k=cfg.k, codec=cfg.codec, refine=cfg.refine, provenance={"config": cfg.to_dict()})
    _emit(model.to_json(), args.out or cfg.model_file)
    log.info("calibrated on %d pyramids, %d loss-rate samples", len(runs), len(samples.loss_rate))
    return 0


def cmd_weights(cfg: RunConfig, args) -> int:
    p = read_pyramid(args.pyramid)
    backend = ReferenceBackend(cfg.codec)
    evaluator = cfg.make_evaluator()
    run = run_mfip(p, backend, evaluator, cfg.levels)
    out = {
        "pyramid": p.source_id,
        "weights": list(run.weights.w),
        "provenance": run.weights.provenance,
        "loss_matrix": run.losses.L.tolist(),
        "phi_levels": list(cfg.levels),
        "config": cfg.to_dict(),
    }
    if args.finetune or cfg.finetune:
        model = read_model(args.model or cfg.model_file)
        lambdas = tuple(args.lambda_prime) if args.lambda_prime else cfg.lambda_primes
        if not lambdas:
            raise CliError("finetuning needs at least one lambda' (--lambda or lambda_primes in the config)")
        rpm = fit_rate_phi(run.grid.rate_phi_samples())
        ctx = AllocationContext(model.loss_rate, rpm, cfg.k, (cfg.phi_min, cfg.phi_max), cfg.rate_floor)
        ft = finetune_weights(run.weights, p, backend, evaluator, lambdas, ctx, cfg.max_passes)
        out.update(
            weights=list(ft.weights.w),
            provenance=ft.weights.provenance,
            predicted_weights=list(run.weights.w),
            finetune={"passes": ft.passes, "converged": ft.converged, "start_score": ft.start_score, "score": ft.score},
        )
    _emit(_json_text(out), args.out)
    return 0


def _operating_point(args, p: FeaturePyramid) -> dict:
    if (args.lambda_prime is None) == (args.target_bpp is None):
        raise CliError("give exactly one of --lambda and --target-bpp")
    if args.lambda_prime is not None:
        if len(args.lambda_prime) != 1:
            raise CliError("allocate takes a single --lambda value")
        return {"lambda_prime": args.lambda_prime[0]}
    return {"target_bits": args.target_bpp * p.S0}


def cmd_allocate(cfg: RunConfig, args) -> int:
    p = read_pyramid(args.pyramid)
    model = read_model(args.model or cfg.model_file) if args.mode != "uniform" else None
    plan = plan_allocation(
        p,
        cfg.make_evaluator(),
        ReferenceBackend(cfg.codec),
        args.mode,
        model=model,
        settings=cfg.settings(),
        **_operating_point(args, p),
    )
    out = {
        "pyramid": p.source_id,
        "mode": plan.mode,
        "phis": list(plan.phis.values),
        "clamped": list(plan.clamped),
        "lambda_prime": plan.lambda_prime,
        "target_bits": plan.target_bits,
        "weights": None if plan.weights is None else list(plan.weights.w),
        "budget": None if plan.budget is None else list(plan.budget.R),
        "t_assign": plan.t_assign,
        "config": cfg.to_dict(),
    }
    _emit(_json_text(out), args.out)
    return 0


def _phis_from_args(args, cfg: RunConfig, count: int) -> PhiVector:
    if (args.allocation is None) == (args.phis is None):
        raise CliError("give exactly one of --allocation and --phis")
    if args.allocation is not None:
        path = Path(args.allocation)
        if not path.is_file():
            raise CliError(f"allocation file not found: {path}")
        values = json.loads(path.read_text())["phis"]
    else:
        try:
            values = [float(v) for v in args.phis.split(",")]
        except ValueError as exc:
            raise CliError(f"--phis must be comma-separated numbers: {exc}") from exc
        if len(values) == 1:
            values = values * count
    if len(values) != count:
        raise CliError(f"expected {count} phi values, got {len(values)}")
    return PhiVector(tuple(values), cfg.phi_min, cfg.phi_max)


def cmd_encode(cfg: RunConfig, args) -> int:
    p = read_pyramid(args.pyramid)
    phis = _phis_from_args(args, cfg, p.num_scales)
    streams, report = encode_pyramid(p, phis.values, cfg.codec)
    out = Path(args.out or Path(args.pyramid).with_suffix(BUNDLE_SUFFIX))
    write_bundle(streams, p, out)
    log.info("%s: %d bits (%.4f bpp)", out, report.total_bits, report.bpp_equivalent)
    return 0


def cmd_decode(cfg: RunConfig, args) -> int:
    streams, meta = read_bundle(args.bundle)
    p = decode_pyramid(streams, _placeholder(meta))
    out = Path(args.out or Path(args.bundle).with_suffix(".recon" + PYRAMID_SUFFIX))
    write_pyramid(p, out)
    return 0


def _pipeline_worker(job):
    path, cfg_dict, model_json = job
    cfg = RunConfig.from_dict(cfg_dict)
    p = read_pyramid(path)
    model = ModelFile.from_json(model_json) if model_json is not None else None
    backend = ReferenceBackend(cfg.codec)
    evaluator = cfg.make_evaluator()
    if cfg.lambda_primes:
        ops = {"lambda_primes": cfg.lambda_primes}
    else:
        ops = {"targets": [b * p.S0 for b in cfg.target_bpp]}
    out = []
    matched = None
    # Allocating modes first, so the uniform baseline can match their actual bits.
    for mode in sorted(cfg.modes, key=lambda m: m == "uniform"):
        mode_ops = ops
        if mode == "uniform" and matched is not None:
            mode_ops = {"targets": matched}
        curve, results = rd_curve(p, evaluator, backend, mode, model=model, settings=cfg.settings(), **mode_ops)
        if mode != "uniform" and matched is None:
            matched = [r.total_bits for r in results]
        out.append((curve, [(f"{p.source_id}/{mode}/{j}", r) for j, r in enumerate(results)]))
    return p.source_id, out


def cmd_evaluate(cfg: RunConfig, args) -> int:
    if args.recon is not None:
        return _evaluate_point(cfg, args)
    paths = [Path(f) for f in args.pyramids] if args.pyramids else corpus_files(cfg.pyramid_dir)
    if not paths:
        raise CliError("no pyramids to evaluate")
    needs_model = any(m != "uniform" for m in cfg.modes) or cfg.lambda_primes
    model_json = read_model(args.model or cfg.model_file).to_json() if needs_model else None
    results = _pool_map(_pipeline_worker, [(path, cfg.to_dict(), model_json) for path in paths], cfg.jobs)
    out = Path(args.out or cfg.report_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, curves = [], []
    for source_id, per_mode in results:
        for curve, rs in per_mode:
            rows.extend(rs)
            curves.append(type(curve)(curve.points, f"{source_id}:{curve.label}"))
    atomic_write_text(out / "report.csv", write_report_csv(rows))
    atomic_write_text(out / "curves.csv", write_curve_csv(curves))
    summary = {"config": cfg.to_dict(), "bd_rate": {}}
    if "uniform" in cfg.modes:
        for source_id, per_mode in results:
            by_mode = {c.label: c for c, _ in per_mode}
            for mode in by_mode:
                if mode != "uniform":
                    summary["bd_rate"][f"{source_id}:{mode}"] = bd_rate(by_mode[mode], by_mode["uniform"])
    atomic_write_text(out / "summary.json", _json_text(summary))
    return 0


def _evaluate_point(cfg: RunConfig, args) -> int:
    if len(args.pyramids) != 1:
        raise CliError("--recon needs exactly one reference pyramid")
    ref = read_pyramid(args.pyramids[0])
    recon = read_pyramid(args.recon)
    if not ref.same_geometry(recon):
        raise CliError("reference and reconstruction differ in geometry")
    out = {"reference": ref.source_id, "accuracy": float(cfg.make_evaluator().evaluate(recon, ref)), "config": cfg.to_dict()}
    if args.bundle is not None:
        _, meta = read_bundle(args.bundle)
        out["total_bits"] = meta["total_bits"]
        out["bpp"] = meta["total_bits"] / ref.S0
    _emit(_json_text(out), args.out)
    return 0


def cmd_bdrate(cfg: RunConfig, args) -> int:
    test_path = Path(args.curves)
    anchor_path = Path(args.anchor_file or args.curves)
    for path in (test_path, anchor_path):
        if not path.is_file():
            raise CliError(f"curve file not found: {path}")
    test = read_curve_csv(test_path.read_text(), args.test)[args.test]
    anchor = read_curve_csv(anchor_path.read_text(), args.anchor)[args.anchor]
    value = bd_rate(test, anchor)
    sys.stdout.write(f"{value:.3f}%\n")
    if args.out:
        atomic_write_text(args.out, _json_text({"test": args.test, "anchor": args.anchor, "bd_rate": value, "config": cfg.to_dict()}))
    return 0


def cmd_sweep(cfg: RunConfig, args) -> int:
    p = read_pyramid(args.pyramid)
    backend = ReferenceBackend(cfg.codec)
    evaluator = cfg.make_evaluator()
    scales = [args.scale] if args.scale is not None else range(p.num_scales)
    rows = [row for i in scales for row in importance_sweep(p, evaluator, backend, i, cfg.levels)]
    text = write_sweep_csv(rows)
    if args.out:
        atomic_write_text(args.out, text)
        atomic_write_text(args.out + ".config.json", cfg.to_json())
    else:
        sys.stdout.write(text)
    return 0


# -- parser -------------------------------------------------------------------

COMMANDS = {
    "synth": cmd_synth,
    "calibrate": cmd_calibrate,
    "weights": cmd_weights,
    "allocate": cmd_allocate,
    "encode": cmd_encode,
    "decode": cmd_decode,
    "evaluate": cmd_evaluate,
    "bdrate": cmd_bdrate,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration; flags override its values")
    common.add_argument("--seed", type=int, help="seed (synth writes only this seed)")
    common.add_argument("--jobs", type=int, help="worker processes for corpus commands")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="mfiba", description="Importance-weighted bit allocation for multiscale features.")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="write synthetic pyramids")

    p = sub.add_parser("calibrate", parents=[common], help="fit loss-rate and rate-phi models on a corpus")
    p.add_argument("--pyramids", help="corpus directory (default: config pyramid_dir)")

    p = sub.add_parser("weights", parents=[common], help="predict per-scale importance weights")
    p.add_argument("pyramid")
    p.add_argument("--finetune", action="store_true", help="refine weights by line search")
    p.add_argument("--model")
    p.add_argument("--lambda", dest="lambda_prime", type=float, action="append")

    p = sub.add_parser("allocate", parents=[common], help="choose per-scale phi for one pyramid")
    p.add_argument("pyramid")
    p.add_argument("--mode", choices=MODES, default="mfiba")
    p.add_argument("--model")
    p.add_argument("--lambda", dest="lambda_prime", type=float, action="append")
    p.add_argument("--target-bpp", type=float)

    p = sub.add_parser("encode", parents=[common], help="code a pyramid into an FCMB bundle")
    p.add_argument("pyramid")
    p.add_argument("--allocation", help="JSON written by 'allocate'")
    p.add_argument("--phis", help="comma-separated phi per scale, or one value for all")

    p = sub.add_parser("decode", parents=[common], help="decode an FCMB bundle into a pyramid")
    p.add_argument("bundle")

    p = sub.add_parser("evaluate", parents=[common], help="score a reconstruction, or run RD experiments")
    p.add_argument("pyramids", nargs="*")
    p.add_argument("--recon", help="decoded pyramid to score against the single reference")
    p.add_argument("--bundle", help="bundle whose size gives the bpp of --recon")
    p.add_argument("--model")

    p = sub.add_parser("bdrate", parents=[common], help="BD-rate between two curves in curve CSV files")
    p.add_argument("curves")
    p.add_argument("--test", required=True, help="mode label of the test curve")
    p.add_argument("--anchor", required=True, help="mode label of the anchor curve")
    p.add_argument("--anchor-file", help="read the anchor from this file instead")

    p = sub.add_parser("sweep", parents=[common], help="degrade one scale at a time over the phi levels")
    p.add_argument("pyramid")
    p.add_argument("--scale", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        cfg = load_config(args.config).override(seed=args.seed, jobs=args.jobs)
        return COMMANDS[args.command](cfg, args)
    except Exception as exc:
        if args.verbose:
            log.exception("%s failed", args.command)
        print(f"mfiba {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
