"""``bssd`` command line: scene synthesis, separation, diarization, metrics, plot data."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import gradcheck, metrics
from ._io import write_json, write_text
from .config import PipelineConfig, parse_overrides
from .container import load_tensor, save_tensor
from .diarization import BlockConfig, diarize, split_blocks
from .exceptions import BssdError, InvalidConfigError, InvalidInputError
from .geometry import ArrayGeometry, DoaGrid
from .localization import BeamExtractor, OracleEmbedder, TableEmbedder, localize
from .rir import RoomImpulseResponse, RoomSpec, label_doa, random_room, rotate_channels, simulate_rir
from .scenes import interleaved_sources, named_rng, plane_wave, speech_like
from .separation_td import AdaptionKernelsTD
from .signal import SAMPLE_RATE, MultiChannelSignal, convolve_rir, mix, read_wav, stft, write_wav
from .whitening import spatial_map_raw, spatial_map_whitened, weight_map, whitening_for

log = logging.getLogger("bssd")


class UsageError(BssdError):
    pass


def threads() -> int:
    """Worker cap from ``BSSD_THREADS`` (default: all cores)."""
    raw = os.environ.get("BSSD_THREADS", "")
    if not raw:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise InvalidConfigError(f"BSSD_THREADS={raw!r} is not an integer") from None
    if n < 1:
        raise InvalidConfigError("BSSD_THREADS must be >= 1")
    return n


def emit(record: dict, stream=None) -> None:
    print(json.dumps(record, sort_keys=True), file=stream or sys.stdout, flush=True)


# -- shared setup ------------------------------------------------------------

FLAG_KEYS = ("t_a", "block_len", "threshold", "estimator", "embedder", "embedder_path",
             "num_directions", "seed")


def load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    cfg = cfg.with_overrides(parse_overrides(args.set))
    flags = {k: getattr(args, k) for k in FLAG_KEYS if getattr(args, k, None) is not None}
    return cfg.with_overrides(flags).validate()


class Context:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.geometry = ArrayGeometry.load(cfg.geometry) if cfg.geometry else ArrayGeometry.circular()
        self.grid = DoaGrid.fibonacci(cfg.num_directions, self.geometry)
        self.stft_cfg = cfg.stft()
        self.whitening = whitening_for(self.geometry, cfg.fft_size, SAMPLE_RATE)

    def check_input(self, z: MultiChannelSignal) -> MultiChannelSignal:
        if z.num_channels != self.geometry.num_mics:
            raise InvalidInputError(f"input has {z.num_channels} channels, geometry has "
                                    f"{self.geometry.num_mics} microphones")
        if z.sample_rate != SAMPLE_RATE:
            raise InvalidInputError(f"sample rate must be {SAMPLE_RATE} Hz, got {z.sample_rate}")
        return z

    def embedder(self, args):
        cfg = self.cfg
        if cfg.embedder == "oracle":
            refs = [read_wav(p).mono() for p in reference_paths(args)]
            if not refs:
                raise UsageError("the oracle embedder needs --references or --manifest")
            return OracleEmbedder.orthogonal(refs, dim=len(refs))
        if cfg.embedder == "external-container":
            table = load_tensor(cfg.embedder_path, rank=2, real=True)
            if len(table) != self.grid.size:
                raise InvalidInputError(f"embedding table has {len(table)} rows, grid has {self.grid.size}")
            return TableEmbedder(table)
        return fixture_embedder(cfg.embedder_path, self.grid.size)

    def extractor(self, args) -> BeamExtractor:
        cfg = self.cfg
        weights = None
        if cfg.adaption_weights:
            weights = load_tensor(cfg.adaption_weights, rank=4)
        kernels = AdaptionKernelsTD.load(cfg.kernels) if cfg.kernels else None
        return BeamExtractor(self.grid, self.whitening, self.embedder(args), cfg.estimator,
                             self.stft_cfg, weights, kernels, cfg.t_a,
                             distortionless=cfg.distortionless)


def reference_paths(args) -> list[Path]:
    paths = [Path(p) for p in (getattr(args, "references", None) or [])]
    manifest = getattr(args, "manifest", None)
    if manifest:
        meta = json.loads(Path(manifest).read_text())
        paths += [Path(manifest).parent / p for p in meta.get("references", [])]
    for p in paths:
        if not p.exists():
            raise InvalidInputError(f"reference {p} does not exist")
    return paths


def fixture_embedder(path, num_directions: int):
    """JSON ``{"embeddings": {"<doa>": [...]}, "default": [...]}`` keyed by DOA index."""
    meta = json.loads(Path(path).read_text())
    table = {int(k): np.asarray(v, dtype=np.float64) for k, v in meta.get("embeddings", {}).items()}
    default = meta.get("default")
    default = None if default is None else np.asarray(default, dtype=np.float64)

    def embed(y, doa):
        if not 0 <= doa < num_directions:
            raise InvalidInputError(f"DOA index {doa} out of range")
        if doa in table:
            return table[doa].copy()
        if default is None:
            raise InvalidInputError(f"fixture has no embedding for DOA {doa}")
        return default.copy()

    return embed


def save_wav_checked(path: Path, signal: MultiChannelSignal, subtype: str = "float32") -> None:
    write_wav(path, signal, subtype)
    back = read_wav(path)
    if back.samples.shape != signal.samples.shape:
        raise BssdError(f"{path}: wrote {signal.samples.shape}, read back {back.samples.shape}")


def read_input(path, ctx: Context) -> MultiChannelSignal:
    if not Path(path).exists():
        raise InvalidInputError(f"{path} does not exist")
    return ctx.check_input(read_wav(path))


# -- commands ---------------------------------------------------------------

def cmd_simulate_rir(args, cfg: PipelineConfig) -> int:
    ctx = Context(cfg)
    out = Path(args.outdir)
    if args.rooms < 1 or args.rotations < 1:
        raise UsageError("--rooms and --rotations must be >= 1")

    def one(i):
        spec = random_room(named_rng(cfg.seed, f"room{i}"), ctx.geometry, seed=cfg.seed)
        return spec, simulate_rir(spec, ctx.geometry)

    with ThreadPoolExecutor(max_workers=threads()) as pool:
        rooms = list(pool.map(one, range(args.rooms)))
    files = []
    for i, (spec, h) in enumerate(rooms):
        for r in range(args.rotations):
            rir = label_doa(rotate_channels(h, r), ctx.grid)
            path = out / f"rir_{i:04d}_rot{r}.wav"
            rir.save(path)
            if read_wav(path).samples.shape != rir.taps.shape:
                raise BssdError(f"{path}: read-back shape mismatch")
            rec = {"file": path.name, "room": i, "rotation": r, "doa": rir.doa_label,
                   "rt60_target": spec.rt60_target, "dimensions": list(spec.dimensions)}
            files.append(rec)
            emit(rec)
    write_json(out / "manifest.json", {"config_hash": cfg.digest(), "seed": cfg.seed, "rirs": files})
    return 0


def _mix_source(item: dict, c: int, n: int, cfg: PipelineConfig, ctx: Context, base: Path, pool: dict):
    if "wav" in item:
        dry = read_wav(base / item["wav"]).mono()
        dry = np.pad(dry, (0, max(0, n - len(dry))))[:n]
    else:
        kind = item.get("synth", "speech")
        if kind == "speech":
            dry = speech_like(n, named_rng(cfg.seed, f"source{c}"))
        elif kind == "interleaved":
            dry = pool["interleaved"].pop(0)
        else:
            raise InvalidInputError(f"source {c}: unknown synth kind {kind!r}")
    dry = float(item.get("gain", 1.0)) * dry
    if "doa" in item:
        doa = ctx.grid.check_index(int(item["doa"]))
        return dry, plane_wave(dry, ctx.grid, doa), doa
    if "rir" in item:
        rir = RoomImpulseResponse.load(base / item["rir"])
    elif "room" in item:
        room = dict(item["room"])
        spec = RoomSpec(tuple(room.pop("dimensions")), float(room.pop("rt60_target", 0.3)),
                        tuple(room.pop("source_position")), tuple(room.pop("array_position")),
                        **room)
        rir = simulate_rir(spec, ctx.geometry)
    else:
        raise InvalidInputError(f"source {c}: needs one of doa, rir, room")
    if rir.doa_label is None:
        rir = label_doa(rir, ctx.grid)
    return dry, convolve_rir(MultiChannelSignal(dry), rir), rir.doa_label


def cmd_mix(args, cfg: PipelineConfig) -> int:
    ctx = Context(cfg)
    spec_path = Path(args.spec)
    if not spec_path.exists():
        raise InvalidInputError(f"{spec_path} does not exist")
    spec = json.loads(spec_path.read_text() or "{}")
    sources = spec.get("sources") or []
    if not sources:
        raise UsageError(f"{spec_path}: no sources listed")
    n = int(round(float(spec.get("duration", 4.0)) * SAMPLE_RATE))
    count = sum(1 for s in sources if s.get("synth") == "interleaved")
    pool = {"interleaved": interleaved_sources(count, n, named_rng(cfg.seed, "sources")) if count else []}
    out = Path(args.outdir)
    dry, images, doas = [], [], []
    for c, item in enumerate(sources):
        s, img, d = _mix_source(item, c, n, cfg, ctx, spec_path.parent, pool)
        dry.append(s)
        images.append(img)
        doas.append(int(d))
    z = mix(images)
    save_wav_checked(out / "mixture.wav", z)
    refs = []
    for c, s in enumerate(dry):
        name = f"reference_{c}.wav"
        save_wav_checked(out / name, MultiChannelSignal(s))
        refs.append(name)
    write_json(out / "manifest.json", {"config_hash": cfg.digest(), "mixture": "mixture.wav",
                                       "references": refs, "doas": doas,
                                       "num_samples": z.num_samples})
    emit({"mixture": str(out / "mixture.wav"), "doas": doas, "config_hash": cfg.digest()})
    return 0


def _localize(args, cfg: PipelineConfig):
    ctx = Context(cfg)
    z = read_input(args.input, ctx)
    outcome = localize(z, ctx.grid, ctx.whitening, ctx.extractor(args), cfg.threshold,
                       cfg.max_iter, ctx.stft_cfg)
    return ctx, z, outcome


def cmd_localize(args, cfg: PipelineConfig) -> int:
    _, _, outcome = _localize(args, cfg)
    for rec in outcome.records():
        emit(rec)
    emit({"doas": outcome.doas, "iterations": outcome.iterations, "truncated": outcome.truncated,
          "config_hash": cfg.digest()})
    return 0


def cmd_separate(args, cfg: PipelineConfig) -> int:
    ctx, z, outcome = _localize(args, cfg)
    out = Path(args.outdir)
    entries = []
    for i, res in enumerate(outcome.sources):
        name = f"source_{i}.wav"
        y = np.asarray(res.signal)[:z.num_samples]
        save_wav_checked(out / name, MultiChannelSignal(y, z.sample_rate))
        rec = {"file": name, "doa": res.doa_index, "mass": res.mass,
               "distance": None if np.isinf(res.distance) else res.distance}
        entries.append(rec)
        emit(rec)
    write_json(out / "manifest.json", {"config_hash": cfg.digest(), "input": str(args.input),
                                       "sources": entries, "localization": outcome.records(),
                                       "truncated": outcome.truncated})
    return 0


def cmd_diarize(args, cfg: PipelineConfig) -> int:
    ctx = Context(cfg)
    z = read_input(args.input, ctx)
    blocks = split_blocks(z, BlockConfig(cfg.block_len))
    result = diarize(blocks, ctx.grid, ctx.whitening, ctx.extractor(args), cfg.threshold,
                     cfg.max_iter, ctx.stft_cfg)
    out = Path(args.outdir)
    names = []
    for i, stream in enumerate(result.streams()):
        name = f"speaker_{i}.wav"
        save_wav_checked(out / name, MultiChannelSignal(stream, z.sample_rate))
        names.append(name)
    for entry in result.manifest:
        emit({k: entry[k] for k in ("block", "doas", "assignments", "dropped", "error")})
    write_json(out / "manifest.json", {
        "config_hash": cfg.digest(), "input": str(args.input), "block_len": cfg.block_len,
        "block_samples": result.block_samples, "speakers": names,
        "embeddings": result.embeddings.tolist() if result.speakers else [],
        "blocks": result.manifest})
    return 0


def cmd_eval(args, cfg: PipelineConfig) -> int:
    if args.embeddings:
        batch = load_tensor(args.embeddings, rank=3, real=True)
        rate, delta = metrics.eer(batch)
        rec = {"eer": rate, "threshold": delta}
        if args.threshold is not None:
            rec.update(far=metrics.far(batch, args.threshold), frr=metrics.frr(batch, args.threshold))
        emit(rec)
        return 0
    if not (args.estimate and args.reference):
        raise UsageError("eval needs --estimate and --reference, or --embeddings")
    est = read_wav(args.estimate)
    ref = read_wav(args.reference).mono()
    y = est.channel(args.channel)
    n = min(len(y), len(ref))
    rec = {"si_sdr": metrics.si_sdr(y[:n], ref[:n])}
    if args.mixture:
        z = read_wav(args.mixture).channel(0)
        m = min(n, len(z))
        rec["si_sdr_unprocessed"] = metrics.si_sdr(z[:m], ref[:m])
        rec["improvement"] = rec["si_sdr"] - rec["si_sdr_unprocessed"]
    emit(rec)
    return 0


def cmd_eer(args, cfg: PipelineConfig) -> int:
    batch = load_tensor(args.embeddings, rank=3, real=True)
    rate, delta = metrics.eer(batch)
    emit({"eer": rate, "threshold": delta, "far": metrics.far(batch, delta),
          "frr": metrics.frr(batch, delta)})
    return 0


def cmd_gradcheck(args, cfg: PipelineConfig) -> int:
    checks = gradcheck.run(args.points, cfg.seed, args.tolerance, cfg.loss_weights())
    failed = 0
    for name in dict.fromkeys(c.name for c in checks):
        sub = [c for c in checks if c.name == name]
        bad = [c.point for c in sub if not c.passed]
        failed += len(bad)
        emit({"check": name, "points": len(sub), "max_rel_error": max(c.rel_error for c in sub),
              "failed_points": bad, "passed": not bad})
    return 1 if failed else 0


def cmd_export_map(args, cfg: PipelineConfig) -> int:
    ctx = Context(cfg)
    z = read_input(args.input, ctx)
    spec = stft(z, ctx.stft_cfg)
    if args.kind == "raw":
        gmap = spatial_map_raw(spec, ctx.grid)
    else:
        gmap = spatial_map_whitened(spec, ctx.grid, ctx.whitening)
        if args.kind == "weighted":
            gmap = weight_map(gmap, spec)
    per_d = gmap.per_direction()
    pts = ctx.grid.points
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["d", "azimuth_deg", "elevation_deg", "x", "y", "z", "score"])
    for d, (p, s) in enumerate(zip(pts, per_d)):
        az = np.degrees(np.arctan2(p[1], p[0]))
        el = np.degrees(np.arcsin(np.clip(p[2], -1, 1)))
        w.writerow([d, f"{az:.6f}", f"{el:.6f}", f"{p[0]:.6f}", f"{p[1]:.6f}", f"{p[2]:.6f}", repr(float(s))])
    write_text(args.output, buf.getvalue())
    if args.frames:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["frame"] + [f"d{d}" for d in range(ctx.grid.size)])
        for l, row in enumerate(gmap.per_frame()):
            w.writerow([l] + [repr(float(v)) for v in row])
        write_text(args.frames, buf.getvalue())
    if args.container:
        save_tensor(args.container, gmap.values)
    emit({"output": str(args.output), "kind": args.kind, "argmax": int(np.argmax(per_d)),
          "config_hash": cfg.digest()})
    return 0


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--seed", type=int)
    common.add_argument("--num-directions", dest="num_directions", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    extract = argparse.ArgumentParser(add_help=False)
    extract.add_argument("--estimator")
    extract.add_argument("--embedder")
    extract.add_argument("--embedder-path", dest="embedder_path")
    extract.add_argument("--references", nargs="+", help="dry reference WAVs for the oracle embedder")
    extract.add_argument("--manifest", help="manifest written by `bssd mix` (supplies references)")
    extract.add_argument("--threshold", type=float, help="embedding distance threshold")
    extract.add_argument("--t-a", dest="t_a", type=int, help="time-domain kernel length in taps")

    p = argparse.ArgumentParser(prog="bssd", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate-rir", parents=[common], help="random shoebox RIRs with DOA labels")
    s.add_argument("outdir")
    s.add_argument("--rooms", type=int, default=1)
    s.add_argument("--rotations", type=int, default=1, help="channel rotations per room (1 = none)")
    s.set_defaults(func=cmd_simulate_rir)

    s = sub.add_parser("mix", parents=[common], help="mixture + references from a JSON scene file")
    s.add_argument("spec")
    s.add_argument("outdir")
    s.set_defaults(func=cmd_mix)

    s = sub.add_parser("localize", parents=[common, extract], help="iterative DOA estimation")
    s.add_argument("input")
    s.set_defaults(func=cmd_localize)

    s = sub.add_parser("separate", parents=[common, extract], help="extract every detected source")
    s.add_argument("input")
    s.add_argument("outdir")
    s.set_defaults(func=cmd_separate)

    s = sub.add_parser("diarize", parents=[common, extract], help="block-online speaker streams")
    s.add_argument("input")
    s.add_argument("outdir")
    s.add_argument("--block-len", dest="block_len", type=float)
    s.set_defaults(func=cmd_diarize)

    s = sub.add_parser("eval", parents=[common], help="SI-SDR or embedding metrics")
    s.add_argument("--estimate")
    s.add_argument("--reference")
    s.add_argument("--mixture", help="also report unprocessed channel-1 SI-SDR")
    s.add_argument("--channel", type=int, default=0)
    s.add_argument("--embeddings", help="(speakers, utterances, dim) container")
    s.add_argument("--threshold", type=float)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("eer", parents=[common], help="equal error rate and its threshold")
    s.add_argument("embeddings")
    s.set_defaults(func=cmd_eer)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    s.add_argument("--points", type=int, default=100)
    s.add_argument("--tolerance", type=float, default=gradcheck.TOLERANCE)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("export-map", parents=[common], help="spatial map as CSV")
    s.add_argument("input")
    s.add_argument("output", help="per-direction CSV")
    s.add_argument("--kind", choices=("raw", "whitened", "weighted"), default="weighted")
    s.add_argument("--frames", help="also write the per-frame (L x D) CSV here")
    s.add_argument("--container", help="also write the full (L, K, D) map as a container")
    s.set_defaults(func=cmd_export_map)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args)
        return args.func(args, cfg)
    except (InvalidConfigError, UsageError) as exc:
        print(f"bssd {args.command}: {exc}", file=sys.stderr)
        return 2
    except (BssdError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"bssd {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
