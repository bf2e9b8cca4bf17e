"""Command-line orchestrator wiring all stages into reproducible pipelines.

Grammar::

    phasenano target    --spec spec.json|--profile desk --pitch 10 --out DIR
    phasenano simulate  --spec ... --optics 20x|40x|100x --modality pcm
                        --snr 20 --seed 0 --pitch 23.125 --out DIR
    phasenano dataset   --profile desk --modality pcm --snr 20 --seed 0 --out FILE
    phasenano train     --dataset FILE --arch unet5|onet5|onet7 --epochs N --out FILE
    phasenano infer     --checkpoint FILE --image PNG --tile 64 --out DIR
    phasenano eval      --pred PNG --truth PNG --out DIR
    phasenano compare   --profile desk --modality pcm --seed 0 --jobs 1 --out DIR

Every run writes a ``manifest.json`` recording the resolved configuration,
input/output checksums and versions; the manifest ``hash`` field excludes
wall-clock time so identical configurations yield identical hashes. The
global seed falls back to the ``PHASENANO_SEED`` environment variable.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, optics
from .dataset import build_dataset, load_dataset, save_dataset
from .metrics import CompareConfig, compare_models, quality_metrics
from .nn import (
    NumericsError,
    TrainConfig,
    TrainingDiverged,
    build_onet,
    build_thetanet,
    build_unet,
    infer,
    load_checkpoint,
    save_checkpoint,
    save_history_csv,
    train,
    train_thetanet,
)
from .optics import OpticalConfig
from .pngio import read_png, read_sidecar, write_png16
from .profiles import get_profile
from .targets import (
    SamplingError,
    TargetSpecError,
    ground_truth,
    load_spec_json,
    rasterize_target,
    save_spec_json,
    standard_test_spec,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

OPTICS_PRESETS = {
    "20x": OpticalConfig.preset_20x,
    "40x": OpticalConfig.preset_40x,
    "100x": OpticalConfig.preset_100x,
}


class ConfigError(ValueError):
    pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, default=str)


class Manifest:
    """Per-run provenance: config, input/output hashes, versions, wall clock.

    Files are keyed by basename so the manifest ``hash`` (which excludes wall
    clock and absolute locations) is identical for identical configurations
    regardless of where outputs land.
    """

    def __init__(self, command: str, config: dict):
        self.command = command
        self.config = config
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self._t0 = time.monotonic()

    def add_input(self, path) -> None:
        p = Path(path)
        self.inputs[p.name] = _sha256(p)

    def add_output(self, path) -> None:
        p = Path(path)
        self.outputs[p.name] = _sha256(p)

    def write(self, out_dir) -> Path:
        doc = {
            "command": self.command,
            "config": self.config,
            "config_hash": hashlib.sha256(_canonical(self.config).encode()).hexdigest(),
            "inputs": self.inputs,
            "outputs": self.outputs,
            "versions": {
                "phasenano": __version__,
                "numpy": np.__version__,
                "python": platform.python_version(),
            },
        }
        doc["hash"] = hashlib.sha256(_canonical(doc).encode()).hexdigest()
        doc["wall_clock_s"] = round(time.monotonic() - self._t0, 3)
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))
        return path


def _seed_from(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("PHASENANO_SEED")
    return int(env) if env else 0


def _load_spec(args):
    if args.spec is not None:
        spec = load_spec_json(args.spec)
        return spec, {"spec": str(args.spec)}
    if args.profile == "standard":
        return standard_test_spec(), {"profile": "standard"}
    profile = get_profile(args.profile)
    return profile.eval_target(), {"profile": profile.name}


def _optics_from(args, modality: str) -> OpticalConfig:
    if args.optics in OPTICS_PRESETS:
        return OPTICS_PRESETS[args.optics](modality=modality)
    doc = json.loads(Path(args.optics).read_text())
    doc["modality"] = modality
    return OpticalConfig(**doc)


def _snr_value(text: str) -> float:
    return math.inf if text in ("inf", "none") else float(text)


# --- subcommands ---------------------------------------------------------------


def cmd_target(args) -> int:
    spec, spec_src = _load_spec(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = {"pitch": args.pitch, "source": spec_src}
    manifest = Manifest("target", config)
    if args.spec:
        manifest.add_input(args.spec)

    pm = rasterize_target(spec, args.pitch)
    gt = ground_truth(spec, args.pitch)
    spec_path = out / "target_spec.json"
    save_spec_json(spec, spec_path)
    from .targets import spec_to_dict

    provenance = spec_to_dict(spec)
    meta = {"kind": "phase_map", "background_opd_nm": spec.background_opd,
            "provenance": provenance}
    pm_path = write_png16(pm.opd, pm.pitch, out / "phase_map.png", meta=meta)
    mask_path = write_png16(gt.mask.astype(np.uint16) * 65535, gt.pitch,
                            out / "ground_truth_mask.png",
                            meta={"kind": "mask", "provenance": provenance})
    for p in (spec_path, pm_path, mask_path):
        manifest.add_output(p)
    manifest.add_output(manifest.write(out))
    print(f"wrote phase map {pm.shape} at {pm.pitch} nm/px to {out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    spec, spec_src = _load_spec(args)
    cfg = _optics_from(args, args.modality)
    seed = _seed_from(args)
    snr = _snr_value(args.snr)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = {"modality": args.modality, "optics": args.optics, "snr_db": str(args.snr),
              "seed": seed, "pitch": args.pitch, "source": spec_src}
    manifest = Manifest("simulate", config)
    if args.spec:
        manifest.add_input(args.spec)

    pitch = args.pitch if args.pitch else cfg.object_pitch / 2.0
    pm = rasterize_target(spec, pitch)
    img = optics.render(pm, cfg)
    img = optics.camera_sample(img, cfg)
    if math.isfinite(snr):
        from .dataset import coarse_mask

        mask = coarse_mask(spec, pitch, img.pitch)[: img.shape[0], : img.shape[1]]
        img = optics.add_noise(img, snr, seed=seed, signal_mask=mask)
    meta = {
        "modality": args.modality,
        "snr_db": "inf" if not math.isfinite(snr) else snr,
        "seed": seed,
        "optics": cfg.__dict__,
    }
    img_path = write_png16(img.intensity, img.pitch, out / f"render_{args.modality}.png",
                           meta=meta)
    manifest.add_output(img_path)
    if args.spectrum:
        png_path, csv_path = optics.export_spectrum(img, out / "spectrum")
        manifest.add_output(png_path)
        manifest.add_output(csv_path)
    manifest.add_output(manifest.write(out))
    print(f"rendered {args.modality} image {img.shape} at {img.pitch:.3f} nm/px")
    return EXIT_OK


def cmd_dataset(args) -> int:
    profile = get_profile(args.profile)
    seed = _seed_from(args)
    snr = _snr_value(args.snr) if args.snr else profile.train_snr_db
    tile = args.tile or profile.tile
    scenes = profile.scenes(seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    config = {"profile": profile.name, "modality": args.modality, "snr_db": str(snr),
              "tile": tile, "stride": args.stride, "seed": seed}
    manifest = Manifest("dataset", config)

    ds = build_dataset(
        scenes,
        profile.lr_cfg(args.modality),
        profile.hr_cfg(args.modality),
        snr_db=snr,
        tile=tile,
        stride=args.stride,
        seed=seed,
        supersample=profile.supersample,
    )
    save_dataset(ds, out)
    manifest.add_output(out)
    manifest.add_output(manifest.write(out.parent))
    print(f"built {len(ds)} {args.modality} pairs of {tile}px tiles -> {out}")
    return EXIT_OK


def _build_arch(name: str, base: int):
    if name == "unet5":
        return build_unet(depth=5, base_channels=base)
    if name == "unet3":
        return build_unet(depth=3, base_channels=base)
    if name == "onet5":
        return build_onet(depth=5, base_channels=base)
    if name == "onet7":
        return build_onet(depth=7, base_channels=base)
    if name == "thetanet":
        nodes = [build_onet(depth=5, base_channels=base) for _ in range(3)]
        return build_thetanet(nodes, shared_final=True)
    raise ConfigError(f"unknown architecture {name!r}")


def cmd_train(args) -> int:
    seed = _seed_from(args)
    ds = load_dataset(args.dataset)
    graph = _build_arch(args.arch, args.base_channels)
    cfg = TrainConfig(epochs=args.epochs, lr=args.lr, batch_size=args.batch,
                      seed=seed, loss=args.loss, optimizer=args.optimizer)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    config = {"arch": args.arch, "epochs": args.epochs, "lr": args.lr,
              "batch": args.batch, "seed": seed, "loss": args.loss,
              "optimizer": args.optimizer, "base_channels": args.base_channels}
    manifest = Manifest("train", config)
    manifest.add_input(args.dataset)

    if args.arch == "thetanet":
        raise ConfigError("thetanet training needs both modalities; use 'compare' "
                          "or the train_thetanet API")
    ckpt, history = train(graph, ds, cfg)
    save_checkpoint(ckpt, out)
    manifest.add_output(out)
    history_path = out.with_suffix(".history.csv")
    save_history_csv(history, history_path)
    manifest.add_output(history_path)
    manifest.add_output(manifest.write(out.parent))
    print(f"trained {args.arch}: {history[-1][0]} iterations, "
          f"final loss {history[-1][2]:.6f} -> {out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    arr = read_png(args.image).astype(np.float64)
    sidecar = read_sidecar(args.image)
    pitch = float(sidecar["pitch_nm"])
    lo, hi = sidecar.get("value_min", 0.0), sidecar.get("value_max", 1.0)
    full = 65535.0 if sidecar.get("bit_depth", 16) == 16 else 255.0
    values = lo + arr / full * (hi - lo)
    values -= min(float(values.min()), 0.0)  # intensity fields are non-negative
    img = optics.ImageField(values, pitch)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest("infer", {"tile": args.tile, "stride": args.stride})
    manifest.add_input(args.checkpoint)
    manifest.add_input(args.image)

    result = infer(ckpt, img, tile=args.tile, stride=args.stride)
    out_path = write_png16(result.intensity, result.pitch, out / "sr_output.png",
                           meta={"model": ckpt.graph.name})
    manifest.add_output(out_path)
    manifest.add_output(manifest.write(out))
    print(f"inferred {result.shape} super-resolved image -> {out_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    pred = read_png(args.pred).astype(np.float64)
    truth = read_png(args.truth).astype(np.float64)
    if pred.shape != truth.shape:
        raise ConfigError(f"prediction {pred.shape} and truth {truth.shape} differ")
    rng_val = float(max(truth.max(), 1.0))
    qm = quality_metrics(pred / rng_val, truth / rng_val, data_range=1.0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest("eval", {"pred": str(args.pred), "truth": str(args.truth)})
    manifest.add_input(args.pred)
    manifest.add_input(args.truth)
    report_path = out / "quality.json"
    report_path.write_text(json.dumps(qm, indent=2, sort_keys=True, default=str))
    manifest.add_output(report_path)
    manifest.add_output(manifest.write(out))
    print(json.dumps(qm, sort_keys=True, default=str))
    return EXIT_OK


def train_profile_models(profile, modality: str, seed: int, epochs: int | None = None,
                         architectures=None):
    """Train the profile's architecture set; returns {name: Checkpoint}."""
    epochs = epochs or profile.epochs
    archs = architectures or profile.architectures
    ds = profile.training_dataset(modality, seed)
    checkpoints = {}
    needs_both = any(a == "thetanet" for a in archs)
    other_ds = None
    if needs_both:
        other_mod = "pcm" if modality == "dic" else "dic"
        other_ds = profile.training_dataset(other_mod, seed)
    for arch in archs:
        graph = _build_arch(arch, profile.base_channels)
        cfg = TrainConfig(epochs=epochs, lr=profile.lr,
                          batch_size=profile.batch_size, seed=seed)
        if arch == "thetanet":
            dic_ds = ds if modality == "dic" else other_ds
            pcm_ds = ds if modality == "pcm" else other_ds
            result = train_thetanet(graph, dic_ds, pcm_ds, cfg)
            checkpoints[arch] = result[modality]
        else:
            ckpt, _ = train(graph, ds, cfg)
            checkpoints[arch] = ckpt
    return checkpoints, ds


def cmd_compare(args) -> int:
    profile = get_profile(args.profile)
    seed = _seed_from(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = {"profile": profile.name, "modality": args.modality, "seed": seed,
              "epochs": args.epochs or profile.epochs, "jobs": args.jobs}
    manifest = Manifest("compare", config)

    checkpoints, _ = train_profile_models(profile, args.modality, seed,
                                          epochs=args.epochs)
    for name, ckpt in checkpoints.items():
        path = out / f"{name}.pnbc"
        save_checkpoint(ckpt, path)
        manifest.add_output(path)

    entries = {"passthrough": None, **checkpoints}
    cc = CompareConfig(
        lr_cfg=profile.lr_cfg(args.modality),
        hr_cfg=profile.hr_cfg(args.modality),
        tile=profile.tile,
        seed=seed,
        supersample=profile.supersample,
        out_dir=out,
        jobs=args.jobs,
    )
    rows, reports = compare_models(entries, profile.snr_ladder,
                                   profile.eval_target(), cc)

    crossover = _crossover_note(rows)
    (out / "crossover.json").write_text(json.dumps(crossover, indent=2, sort_keys=True,
                                                   default=str))
    for name in ("comparison.csv", "comparison.json", "psnr_heatmap.png",
                 "crossover.json"):
        manifest.add_output(out / name)
    manifest.add_output(manifest.write(out))

    print(f"{'model':<12} {'snr_db':>7} {'psnr':>7} {'ssim':>6} {'resolved':>9}")
    for cell in rows:
        res = f"{cell.smallest_resolved:.0f}" if cell.smallest_resolved else "none"
        snr = "inf" if math.isinf(cell.snr_db) else f"{cell.snr_db:g}"
        print(f"{cell.model:<12} {snr:>7} {cell.psnr_db:>7.2f} {cell.ssim:>6.3f} {res:>9}")
    print("observed crossover:", crossover["summary"])
    return EXIT_OK


def _crossover_note(rows) -> dict:
    """Record which model family wins at each SNR; an observation, not a gate."""
    by_snr: dict[float, list] = {}
    for cell in rows:
        if cell.model == "passthrough":
            continue
        by_snr.setdefault(cell.snr_db, []).append(cell)
    winners = {}
    for snr, cells in sorted(by_snr.items()):
        best = max(cells, key=lambda c: c.psnr_db)
        key = "inf" if math.isinf(snr) else f"{snr:g}"
        winners[key] = best.model
    ordered = [winners[k] for k in winners]
    single_high = ordered and ordered[-1] in ("unet5", "onet5", "onet7")
    cascade_low = ordered and ordered[0] == "thetanet"
    return {
        "winners_by_snr": winners,
        "single_node_best_at_high_snr": single_high,
        "cascade_best_at_low_snr": cascade_low,
        "summary": (
            "single-node best at high SNR and cascade best at low SNR"
            if single_high and cascade_low
            else f"winners by SNR: {winners}"
        ),
    }


# --- argument parsing -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="phasenano",
        description="Simulation, training and evaluation pipelines for "
                    "label-free super-resolution of phase micrographs",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--seed", type=int, default=None,
                       help="global seed (default: PHASENANO_SEED or 0)")
        p.add_argument("--out", required=True, help="output directory or file")

    p = sub.add_parser("target", help="rasterize a bar target with ground truth")
    p.add_argument("--spec", default=None, help="target spec JSON")
    p.add_argument("--profile", default="desk", help="built-in target: desk|standard")
    p.add_argument("--pitch", type=float, default=10.0, help="nm per pixel")
    add_common(p)
    p.set_defaults(func=cmd_target)

    p = sub.add_parser("simulate", help="render a target through the microscope model")
    p.add_argument("--spec", default=None)
    p.add_argument("--profile", default="desk")
    p.add_argument("--optics", default="100x", help="20x|40x|100x or a JSON file")
    p.add_argument("--modality", default="pcm", choices=["brightfield", "pcm", "dic"])
    p.add_argument("--snr", default="inf", help="target SNR in dB, or 'inf'")
    p.add_argument("--pitch", type=float, default=None,
                   help="simulation pitch nm/px (default: half the camera pitch)")
    p.add_argument("--spectrum", action="store_true",
                   help="also export the Fourier-plane spectrum (PNG + CSV peaks)")
    add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("dataset", help="build a Source/Expected tile-pair dataset")
    p.add_argument("--profile", default="desk")
    p.add_argument("--modality", default="pcm", choices=["pcm", "dic"])
    p.add_argument("--snr", default=None, help="source SNR in dB (profile default)")
    p.add_argument("--tile", type=int, default=None, help="tile size (profile default)")
    p.add_argument("--stride", type=int, default=None, help="tile stride (default: tile)")
    add_common(p)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", help="train one architecture on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--arch", default="onet5",
                   choices=["unet3", "unet5", "onet5", "onet7", "thetanet"])
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--base-channels", type=int, default=8)
    p.add_argument("--loss", default="mse", choices=["mse", "mae"])
    p.add_argument("--optimizer", default="adam", choices=["adam", "sgd_momentum"])
    add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="super-resolve an image with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="PNG with pitch sidecar")
    p.add_argument("--tile", type=int, default=64)
    p.add_argument("--stride", type=int, default=None)
    add_common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="PSNR/SSIM of a prediction against truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="train all architectures and sweep the SNR ladder")
    p.add_argument("--profile", default="desk")
    p.add_argument("--modality", default="pcm", choices=["pcm", "dic"])
    p.add_argument("--epochs", type=int, default=None, help="override profile epochs")
    p.add_argument("--jobs", type=int, default=1, help="concurrent evaluation cells")
    add_common(p)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, TargetSpecError, SamplingError, ValueError, KeyError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericsError, TrainingDiverged, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
