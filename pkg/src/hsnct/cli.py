"""Command-line interface: one binary, one subcommand per pipeline stage.

The pipeline can be run whole (``fhr``/``dhr``/``bench``) or stage by stage
(``phantom`` -> ``simulate`` -> ``normalize`` -> ``extract`` ->
``reconstruct`` -> ``expand``), with ``slice`` exporting 8-bit PGM images
for visual inspection.  Every subcommand is a pure function of its inputs
and flags; the only run-to-run differences at a fixed seed are the timing
fields inside reports.

Exit codes: 0 success, 1 validation/usage error, 2 file or container error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from hsnct.containers import (
    HyperspectralSinogram,
    SubspaceSinogram,
    ValidationError,
    geometry_from_header,
    load_basis,
    load_raw_scan,
    load_sinogram,
    load_subspace_sinogram,
    load_volume,
    read_container,
    sinogram_row_count,
    spectral_from_header,
    spectral_header,
    write_container,
)
from hsnct.phantom import (
    build_ground_truth,
    default_benchmark_phantom,
    simulate_scan,
    spec_from_dict,
)
from hsnct.pipeline import (
    PipelineConfig,
    RunReport,
    run_benchmark,
    run_dhr,
    run_fhr,
)
from hsnct.preprocess import NormalizationOptions, normalize
from hsnct.subspace import NmfOptions, expand, nmf_factorize
from hsnct.tomo import MbirOptions, reconstruct_stack

__all__ = ["main", "entry"]

log = logging.getLogger("hsnct")

_PRIOR_NAMES = {"quadratic": "quadratic-difference", "huber": "huber"}


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on usage errors; the contract here is
    # usage text on stderr and exit code 1
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _build_parser() -> _Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=1,
                        help="worker budget for slice reconstructions (default 1)")
    common.add_argument("--seed", type=int, default=0,
                        help="seed for the seeded stages (default 0)")
    common.add_argument("--verbose", action="store_true",
                        help="log progress lines to stderr")

    parser = _Parser(prog="hsnct",
                     description="Fast hyperspectral neutron CT reconstruction")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    p = sub.add_parser("phantom", parents=[common],
                       help="rasterize a phantom spec into a ground-truth volume")
    p.add_argument("--spec", required=True, help="phantom spec JSON")
    p.add_argument("--out-truth", required=True, help="output truth container")

    p = sub.add_parser("simulate", parents=[common],
                       help="simulate a noisy scan of a truth volume")
    p.add_argument("--truth", required=True)
    p.add_argument("--geom", required=True, help="scan geometry JSON")
    p.add_argument("--flux", required=True, type=float,
                   help="expected open-beam counts per bin")
    p.add_argument("--out", required=True)

    p = sub.add_parser("normalize", parents=[common],
                       help="counts to attenuation line integrals")
    p.add_argument("--scan", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-clamp", action="store_true",
                   help="keep negative attenuation values")
    p.add_argument("--floor", type=float, default=0.5,
                   help="count floor applied before the log (default 0.5)")

    p = sub.add_parser("extract", parents=[common],
                       help="factorize projections into coefficients and basis")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--rank", required=True, type=int)
    p.add_argument("--out-v", required=True, help="coefficient sinogram output")
    p.add_argument("--out-d", required=True, help="spectral basis output")
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--tol", type=float, default=1e-6)

    p = sub.add_parser("reconstruct", parents=[common],
                       help="reconstruct every channel of a sinogram container")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--engine", required=True, choices=("fbp", "mbir"))
    p.add_argument("--out", required=True)
    p.add_argument("--beta", type=float, default=None,
                   help="mbir regularization weight")
    p.add_argument("--prior", choices=tuple(_PRIOR_NAMES), default=None,
                   help="mbir prior")

    p = sub.add_parser("expand", parents=[common],
                       help="expand a coefficient volume through a basis")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--basis", required=True)
    p.add_argument("--out", required=True)

    for name, blurb in (("fhr", "extract, reconstruct and expand in one run"),
                        ("dhr", "per-bin baseline reconstruction")):
        p = sub.add_parser(name, parents=[common], help=blurb)
        p.add_argument("--in", dest="infile", required=True)
        if name == "fhr":
            p.add_argument("--rank", required=True, type=int)
        p.add_argument("--engine", required=True, choices=("fbp", "mbir"))
        p.add_argument("--out", required=True)
        p.add_argument("--report", required=True, help="run report JSON output")

    p = sub.add_parser("bench", parents=[common],
                       help="run both pipelines on the benchmark phantom")
    p.add_argument("--out", required=True, help="comparison CSV output")
    p.add_argument("--preset", choices=("desk",), default="desk")

    p = sub.add_parser("slice", parents=[common],
                       help="export one slice/bin image as 8-bit PGM")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--z", required=True, type=int)
    p.add_argument("--bin", required=True, type=int)
    p.add_argument("--out", required=True)

    return parser


def _read_json(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: expected a JSON object")
    return data


def _write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM; values mapped linearly from [0, max] to [0, 255]
    (non-positive images come out all black)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValidationError(f"PGM export needs a 2D image, got shape {img.shape}")
    top = float(img.max())
    if top > 0:
        data = np.clip(img / top, 0.0, 1.0)
    else:
        data = np.zeros_like(img)
    payload = np.round(data * 255.0).astype(np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + payload.tobytes())


def _report_payload(report: RunReport, n_k: int) -> dict:
    return {
        "algorithm": report.algorithm,
        "engine": report.engine,
        "n_k": n_k,
        "n_s": report.channels,
        "extract_s": report.extract_s,
        "recon_s": report.recon_s,
        "expand_s": report.expand_s,
        "total_s": report.total_s,
        "epsilon_frac": report.epsilon_frac,
        "snr_db": report.snr_db,
    }


def _write_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _cmd_phantom(args) -> int:
    blob = _read_json(args.spec)
    try:
        spec = spec_from_dict(blob["phantom"])
        axis = spectral_from_header(blob["spectral"])
    except KeyError as exc:
        raise ValidationError(f"{args.spec}: missing top-level key {exc}") from None
    truth = build_ground_truth(spec, axis)
    write_container(args.out_truth, truth,
                    extra_header={"spectral": spectral_header(axis)})
    log.info("wrote truth %s [%d voxels x %d bins]", args.out_truth,
             truth.voxels.shape[0], truth.num_channels)
    return 0


def _cmd_simulate(args) -> int:
    truth, header = load_volume(args.truth)
    if "spectral" not in header:
        raise ValidationError(
            f"{args.truth}: truth container carries no spectral metadata")
    axis = spectral_from_header(header["spectral"])
    geom = geometry_from_header(_read_json(args.geom))
    scan = simulate_scan(truth, geom, axis, args.flux, args.seed)
    write_container(args.out, scan)
    log.info("wrote scan %s [%d views, flux %g, seed %d]", args.out,
             geom.num_views, args.flux, args.seed)
    return 0


def _cmd_normalize(args) -> int:
    scan = load_raw_scan(args.scan)
    opts = NormalizationOptions(count_floor=args.floor,
                                clamp_negative=not args.no_clamp)
    sino = normalize(scan, opts)
    write_container(args.out, sino)
    log.info("wrote projections %s [%d rays x %d bins]", args.out,
             sino.values.shape[0], sino.values.shape[1])
    return 0


def _cmd_extract(args) -> int:
    sino = load_sinogram(args.infile)
    opts = NmfOptions(rank=args.rank, seed=args.seed, max_iters=args.max_iters,
                      rel_tol=args.tol)
    coeffs, basis, report = nmf_factorize(sino, opts)
    write_container(args.out_v, coeffs)
    write_container(args.out_d, basis)
    log.info("factorized rank %d in %d iterations, residual fraction %.3g",
             args.rank, report.iterations_run, report.residual_energy)
    return 0


def _cmd_reconstruct(args) -> int:
    header, arr = read_container(args.infile)
    role = header.get("role")
    geom = geometry_from_header(header.get("geometry", {}))
    extra = None
    if role == "subspace-sinogram":
        sinos = SubspaceSinogram(arr.reshape(sinogram_row_count(geom), -1), geom)
    elif role == "sinogram":
        axis = spectral_from_header(header.get("spectral", {}))
        sinos = HyperspectralSinogram(
            arr.reshape(sinogram_row_count(geom), axis.num_bins), geom, axis)
        extra = {"spectral": spectral_header(axis)}
    else:
        raise ValidationError(
            f"{args.infile}: expected a sinogram container, found role {role!r}")
    if args.engine == "fbp":
        if args.beta is not None or args.prior is not None:
            raise ValidationError("--beta/--prior only apply to the mbir engine")
        opts = None
    else:
        opts = MbirOptions(
            prior=_PRIOR_NAMES[args.prior or "quadratic"],
            regularization_weight=1.0 if args.beta is None else args.beta)
    vol = reconstruct_stack(sinos, geom, args.engine, opts, threads=args.threads)
    write_container(args.out, vol, extra_header=extra)
    log.info("wrote volume %s [%d voxels x %d channels, %s]", args.out,
             vol.voxels.shape[0], vol.num_channels, args.engine)
    return 0


def _cmd_expand(args) -> int:
    vol, _ = load_volume(args.infile)
    basis = load_basis(args.basis)
    out = expand(vol, basis)
    write_container(args.out, out,
                    extra_header={"spectral": spectral_header(basis.axis)})
    log.info("expanded %d channels to %d bins -> %s", vol.num_channels,
             basis.basis.shape[0], args.out)
    return 0


def _pipeline_config(args, rank: int) -> PipelineConfig:
    return PipelineConfig(subspace=NmfOptions(rank=rank, seed=args.seed),
                          recon_engine=args.engine, threads=args.threads)


def _cmd_fhr(args) -> int:
    sino = load_sinogram(args.infile)
    cfg = _pipeline_config(args, args.rank)
    vol, basis, report = run_fhr(sino, cfg)
    write_container(args.out, vol,
                    extra_header={"spectral": spectral_header(basis.axis)})
    _write_json(args.report, _report_payload(report, sino.axis.num_bins))
    log.info("fhr done: %d channels in %.2fs -> %s", report.channels,
             report.total_s, args.out)
    return 0


def _cmd_dhr(args) -> int:
    sino = load_sinogram(args.infile)
    cfg = _pipeline_config(args, rank=1)
    vol, report = run_dhr(sino, cfg)
    write_container(args.out, vol,
                    extra_header={"spectral": spectral_header(sino.axis)})
    _write_json(args.report, _report_payload(report, sino.axis.num_bins))
    log.info("dhr done: %d channels in %.2fs -> %s", report.channels,
             report.total_s, args.out)
    return 0


def _cmd_bench(args) -> int:
    # desk preset: the fixed benchmark phantom, MBIR engine on both
    # pipelines with identical solver settings, subspace rank 4
    spec, axis, geom = default_benchmark_phantom()
    mbir = MbirOptions(regularization_weight=2.0, max_iters=100)
    fhr_cfg = PipelineConfig(subspace=NmfOptions(rank=4, seed=args.seed),
                             recon_engine="mbir", recon=mbir, threads=args.threads)
    dhr_cfg = PipelineConfig(subspace=NmfOptions(rank=1, seed=args.seed),
                             recon_engine="mbir", recon=mbir, threads=args.threads)
    t0 = time.perf_counter()
    result = run_benchmark(spec, axis, geom, fhr_cfg, dhr_cfg)
    out = Path(args.out)
    out.write_text(result.csv_text, encoding="ascii", newline="")
    stem = out.with_suffix("")
    for key in sorted(result.slice_images):
        _write_pgm(f"{stem}_{key}.pgm", result.slice_images[key])
    log.info("benchmark finished in %.1fs: speedup %.2fx, snr gap %+.2f dB",
             time.perf_counter() - t0, result.rows[0]["speedup"],
             result.fhr_report.snr_db - result.dhr_report.snr_db)
    return 0


def _cmd_slice(args) -> int:
    vol, _ = load_volume(args.infile)
    if not (0 <= args.z < vol.num_rows):
        raise ValidationError(
            f"slice index {args.z} out of range [0, {vol.num_rows})")
    if not (0 <= args.bin < vol.num_channels):
        raise ValidationError(
            f"bin index {args.bin} out of range [0, {vol.num_channels})")
    _write_pgm(args.out, vol.slice_image(args.z, args.bin))
    log.info("wrote slice z=%d bin=%d -> %s", args.z, args.bin, args.out)
    return 0


_COMMANDS = {
    "phantom": _cmd_phantom,
    "simulate": _cmd_simulate,
    "normalize": _cmd_normalize,
    "extract": _cmd_extract,
    "reconstruct": _cmd_reconstruct,
    "expand": _cmd_expand,
    "fhr": _cmd_fhr,
    "dhr": _cmd_dhr,
    "bench": _cmd_bench,
    "slice": _cmd_slice,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse help (0) or usage error (1)
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr, force=True)
    try:
        return _COMMANDS[args.command](args)
    except ValueError as exc:  # ValidationError and malformed JSON/flags
        sys.stderr.write(f"hsnct {args.command}: error: {exc}\n")
        return 1
    except OSError as exc:  # missing files and ContainerError
        sys.stderr.write(f"hsnct {args.command}: error: {exc}\n")
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
