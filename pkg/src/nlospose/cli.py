"""Command-line entry point: ``nlospose <command> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, PipelineConfig, load_config
from .lct import Psf, build_psf, depth_max_project, load_correction, wiener_reconstruct
from .pose import (
    PoseError,
    RewardWeights,
    avg_acceleration,
    keypoint_error_2d,
    mpjpe,
    read_keypoints_jsonl,
    read_pose_jsonl,
    reward_terms,
    velocity_error,
)
from .rescan import ScanOrder, build_schedule, downsample_to_scan_rate, upsample_to_policy_rate
from .synth import augment_dataset
from .volumes import (
    AxisKind,
    FormatError,
    FrameSequence,
    HeatMap2D,
    ReflectanceVolume,
    TransientImage,
    frame_filename,
    read_depth_map,
    read_volume,
    write_volume,
)

log = logging.getLogger("nlospose")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that exits with the usage code (1) instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers

def _config(args, required: bool = True) -> PipelineConfig | None:
    if args.config is None:
        if required:
            raise UsageError(f"'{args.command}' needs --config (grid.wall_width_m and grid.bin_width_s)")
        return None
    return load_config(args.config, seed=args.seed)


def _executor(jobs: int):
    @contextmanager
    def ctx():
        if jobs <= 1:
            yield None
            return
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            yield ex
    return ctx()


def _write_manifest(path: Path, payload: dict) -> None:
    # No timestamps: reruns must be byte-identical.
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _manifest_base(args, cfg: PipelineConfig | None) -> dict:
    # Everything needed to replay the run except where its outputs went.
    skip = {"func", "command", "output"}
    replay = {k: v for k, v in sorted(vars(args).items()) if k not in skip}
    out = {"tool": "nlospose", "version": __version__, "command": args.command, "args": replay}
    if cfg is not None:
        out["config"] = cfg.canonical()
        out["config_sha256"] = cfg.digest()
    return out


def _out_dir(path: str | None, cfg: PipelineConfig | None, what: str = "output") -> Path:
    chosen = path or (cfg.output_dir if cfg else None)
    if not chosen:
        raise UsageError(f"no {what} directory given (-o or io.output_dir)")
    out = Path(chosen)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _in_dir(path: str | None, cfg: PipelineConfig | None) -> Path:
    chosen = path or (cfg.input_dir if cfg else None)
    if not chosen:
        raise UsageError("no input directory given (positional argument or io.input_dir)")
    p = Path(chosen)
    if not p.is_dir():
        raise DataError(f"input directory {str(p)!r} does not exist")
    return p


def _list_frames(d: Path, suffixes=(".nlvt",)) -> list[Path]:
    files = sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in suffixes)
    if not files:
        raise DataError(f"{d}: no {'/'.join(suffixes)} files found")
    return files


def _load_sequence(d: Path, grid=None, rate: float | None = None) -> FrameSequence:
    frames = []
    for p in _list_frames(d):
        vol = read_volume(p, grid=grid)
        if not isinstance(vol, TransientImage):
            raise DataError(f"{p}: not a transient volume")
        frames.append(vol)
    if rate is None:
        rate = 1.0 / (frames[1].t_start - frames[0].t_start) if len(frames) > 1 else 1.0
    try:
        return FrameSequence(tuple(frames), rate)
    except ValueError as exc:
        raise DataError(f"{d}: {exc}") from None


def _write_sequence(seq: FrameSequence, d: Path) -> list[str]:
    d.mkdir(parents=True, exist_ok=True)
    names = []
    for i, frame in enumerate(seq):
        name = frame_filename(i)
        write_volume(frame, d / name)
        names.append(name)
    return names


def heatmap_to_png(hm: HeatMap2D, path: Path, scale: float | None = None) -> None:
    """Save a heat map as 8-bit grayscale; rows of the image are the second array axis."""
    from PIL import Image

    data = hm.data.astype(np.float64)
    peak = data.max() if scale is None else scale
    if peak > 0:
        img = np.clip(np.rint(data / peak * 255.0), 0, 255).astype(np.uint8)
    else:
        img = np.zeros(data.shape, dtype=np.uint8)
    Image.fromarray(np.ascontiguousarray(img.T), mode="L").save(path, format="PNG")


def _psf_volume(psf: Psf) -> ReflectanceVolume:
    """Wrap the padded kernel in a reflectance-u container with doubled dims (spacing kept)."""
    g = psf.grid
    pg = g.with_dims(nx=2 * g.nx, ny=2 * g.ny, nt=2 * g.nt, nz=2 * g.nt, wall_width_m=2 * g.wall_width_m)
    return ReflectanceVolume(pg, psf.data, AxisKind.U)


def _load_psf(path: str, grid) -> Psf:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"PSF file {path!r} not found")
    vol = read_volume(p)
    want = (2 * grid.nx, 2 * grid.ny, 2 * grid.nt)
    if not isinstance(vol, ReflectanceVolume) or vol.axis is not AxisKind.U or vol.data.shape != want:
        raise DataError(f"{path}: expected a reflectance-u PSF with dims {want}")
    data = vol.data.astype(np.float64)
    data.setflags(write=False)
    return Psf(grid, data)


# ---------------------------------------------------------------------------
# commands

def cmd_psf(args) -> int:
    cfg = _config(args)
    out = Path(args.output)
    psf = build_psf(cfg.grid)
    write_volume(_psf_volume(psf), out)
    manifest = _manifest_base(args, cfg)
    manifest["outputs"] = [out.name]
    _write_manifest(out.with_name(out.name + ".manifest.json"), manifest)
    log.info("wrote PSF %s with dims %s", out, psf.data.shape)
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _config(args)
    src = _in_dir(args.depth_dir, cfg)
    out = _out_dir(args.output, cfg)
    files = _list_frames(src, (".png", ".nlvt"))
    depths, bad = [], []
    for p in files:
        try:
            depths.append(read_depth_map(p, cfg.grid, cfg.meters_per_unit))
        except (FormatError, OSError, ValueError) as exc:
            bad.append(f"  {p.name}: {exc}")
    if bad:
        raise DataError(f"{len(bad)} unreadable depth file(s) in {src}:\n" + "\n".join(bad))

    psf = build_psf(cfg.grid)
    with _executor(args.jobs) as ex:
        seqs = augment_dataset(depths, psf, cfg.augment, rate=args.rate, executor=ex)

    schedule = None
    if args.rescan:
        sched = build_schedule(cfg.grid, cfg.scan_rate, cfg.order)
        try:
            seqs = [upsample_to_policy_rate(downsample_to_scan_rate(s, sched), sched, args.rate) for s in seqs]
        except ValueError as exc:
            raise DataError(f"rescan: {exc}") from None
        schedule = sched.to_dict()

    levels = []
    for i, (delta, seq) in enumerate(zip(cfg.augment.shift_levels, seqs)):
        name = f"shift_{i:02d}_{delta:+.3f}m"
        written = _write_sequence(seq, out / name)
        levels.append({"dir": name, "shift_m": delta, "frames": len(written)})
        log.info("level %d (%+.3f m): %d frames", i, delta, len(written))

    manifest = _manifest_base(args, cfg)
    manifest.update(inputs=[p.name for p in files], levels=levels, rate_hz=args.rate, schedule=schedule)
    _write_manifest(out / MANIFEST, manifest)
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    cfg = _config(args)
    alpha = cfg.alpha if args.alpha is None else args.alpha
    if not alpha > 0:
        raise UsageError(f"alpha must be > 0 (got {alpha})")
    src = _in_dir(args.transient_dir, cfg)
    out = _out_dir(args.output, cfg)
    psf = _load_psf(args.psf, cfg.grid) if args.psf else build_psf(cfg.grid)
    corr_path = args.correction or cfg.correction
    correction = None
    if corr_path:
        if not Path(corr_path).is_file():
            raise DataError(f"correction file {corr_path!r} not found")
        correction = load_correction(corr_path, cfg.grid)

    files = _list_frames(src)
    frames = []
    for p in files:
        vol = read_volume(p, grid=cfg.grid)
        if not isinstance(vol, TransientImage):
            raise DataError(f"{p}: not a transient volume")
        frames.append(vol)

    psf.spectrum  # compute once before fanning out to threads

    def run(tau):
        rho = wiener_reconstruct(tau, psf, alpha, correction)
        return rho, depth_max_project(rho, args.axis)

    with _executor(args.jobs) as ex:
        results = list(ex.map(run, frames)) if ex else [run(t) for t in frames]

    for sub in ("volumes", "heatmaps", "png"):
        (out / sub).mkdir(exist_ok=True)
    scale = max(float(hm.data.max()) for _, hm in results) if args.global_max else None
    for i, (rho, hm) in enumerate(results):
        write_volume(rho, out / "volumes" / frame_filename(i))
        write_volume(hm, out / "heatmaps" / frame_filename(i))
        heatmap_to_png(hm, out / "png" / f"frame_{i:05d}.png", scale)

    manifest = _manifest_base(args, cfg)
    manifest.update(inputs=[p.name for p in files], alpha=alpha, correction=corr_path, axis=args.axis,
                    psf=args.psf, global_max=bool(args.global_max), frames=len(results))
    _write_manifest(out / MANIFEST, manifest)
    return EXIT_OK


def cmd_resample(args) -> int:
    cfg = _config(args, required=False)
    f_from, f_to = args.from_hz, args.to_hz
    if not (f_from > 0 and f_to > 0) or f_from == f_to:
        raise UsageError(f"unsupported rate pair {f_from} Hz -> {f_to} Hz "
                         "(rates must be positive and differ)")
    src = _in_dir(args.input_dir, cfg)
    out = _out_dir(args.output, cfg)
    seq = _load_sequence(src, grid=cfg.grid if cfg else None, rate=f_from)
    order = ScanOrder(args.order) if args.order else (cfg.order if cfg else ScanOrder.ROW_MAJOR)
    grid = seq[0].grid
    try:
        if f_from > f_to:
            sched = build_schedule(grid, f_to, order)
            res = downsample_to_scan_rate(seq, sched)
        else:
            sched = build_schedule(grid, f_from, order)
            res = upsample_to_policy_rate(seq, sched, f_to)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    names = _write_sequence(res, out)
    manifest = _manifest_base(args, cfg)
    manifest.update(from_hz=f_from, to_hz=f_to, schedule=sched.to_dict(),
                    inputs=[p.name for p in _list_frames(src)], frames=len(names))
    _write_manifest(out / MANIFEST, manifest)
    log.info("%d frames @ %g Hz -> %d frames @ %g Hz", len(seq), f_from, len(res), f_to)
    return EXIT_OK


def cmd_metrics(args) -> int:
    est = read_pose_jsonl(args.estimate, rate=args.rate)
    gt = read_pose_jsonl(args.ground_truth, rate=args.rate)
    report = {
        "mpjpe_mm": mpjpe(est, gt),
        "e_vel": velocity_error(est, gt),
        "a_accl": avg_acceleration(est),
    }
    if args.keypoints2d:
        kp_est, kp_gt = (read_keypoints_jsonl(p) for p in args.keypoints2d)
        report["e_key"] = keypoint_error_2d(kp_est, kp_gt)
    for k, v in report.items():
        print(f"{k}={v:.10g}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(report))
            w.writerow([f"{v:.10g}" for v in report.values()])
    return EXIT_OK


def _parse_weights(text: str) -> RewardWeights:
    try:
        parts = [float(s) for s in text.split(",")]
        if len(parts) != 4:
            raise ValueError("expected four comma-separated values")
        return RewardWeights(*parts)
    except ValueError as exc:
        raise UsageError(f"--weights: {exc}") from None


def cmd_reward(args) -> int:
    weights = _parse_weights(args.weights)
    est = read_pose_jsonl(args.estimate, rate=args.rate)
    gt = read_pose_jsonl(args.ground_truth, rate=args.rate)
    if len(est) != len(gt):
        raise DataError(f"sequence lengths differ: {len(est)} vs {len(gt)}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame", "r_q", "r_e", "r_p", "r_v", "total"])
    for i, (f, g) in enumerate(zip(est, gt)):
        r = reward_terms(f, g, weights)
        w.writerow([i] + [f"{x:.12g}" for x in (r.r_q, r.r_e, r.r_p, r.r_v, r.total)])
    if args.output:
        Path(args.output).write_text(buf.getvalue(), encoding="utf-8")
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nlospose", description="Confocal NLOS transient toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", help="key=value or JSON config file")
    p.add_argument("--seed", type=_u64, help="override augment.seed")
    p.add_argument("--jobs", type=_positive_int, default=1, help="worker threads for per-frame work")
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("psf", help="write the padded light-cone PSF")
    s.add_argument("-o", "--output", required=True, help="output .nlvt path")
    s.set_defaults(func=cmd_psf)

    s = sub.add_parser("synth", help="synthesize augmented transients from depth maps")
    s.add_argument("depth_dir", nargs="?")
    s.add_argument("-o", "--output")
    s.add_argument("--rate", type=float, default=30.0, help="depth frame rate in Hz")
    s.add_argument("--rescan", action="store_true", help="apply scan-rate down/up resampling")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("reconstruct", help="Wiener LCT reconstruction and heat maps")
    s.add_argument("transient_dir", nargs="?")
    s.add_argument("-o", "--output")
    s.add_argument("--psf", help="PSF file written by 'psf' (default: build from the grid)")
    s.add_argument("--alpha", type=float)
    s.add_argument("--correction", help="NLVT reflectance-u correction volume")
    s.add_argument("--axis", choices=("z", "y"), default="z")
    s.add_argument("--global-max", action="store_true", help="scale all PNGs by the sequence maximum")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("resample", help="convert a transient sequence between frame rates")
    s.add_argument("input_dir", nargs="?")
    s.add_argument("-o", "--output")
    s.add_argument("--from-hz", type=float, required=True)
    s.add_argument("--to-hz", type=float, required=True)
    s.add_argument("--order", choices=[o.value for o in ScanOrder])
    s.set_defaults(func=cmd_resample)

    s = sub.add_parser("metrics", help="MPJPE, E_vel, A_accl (and E_key)")
    s.add_argument("estimate")
    s.add_argument("ground_truth")
    s.add_argument("--keypoints2d", nargs=2, metavar=("EST", "GT"))
    s.add_argument("--rate", type=float, default=30.0)
    s.add_argument("--csv")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("reward", help="per-frame imitation rewards as CSV")
    s.add_argument("estimate")
    s.add_argument("ground_truth")
    s.add_argument("--weights", default="0.5,0.3,0.1,0.1", help="w_q,w_e,w_p,w_v")
    s.add_argument("--rate", type=float, default=30.0)
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_reward)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"nlospose: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, PoseError, OSError, ValueError) as exc:
        print(f"nlospose: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
