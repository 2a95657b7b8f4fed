"""Command-line interface.

Exit codes: 0 ok, 1 usage, 2 input error, 3 data/weights error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import audio_io, scm
from .igcrn import IgcrnConfig, MissingTensorError, ShapeMismatchError, UnexpectedTensorError, init_weights, mac_count, parameter_breakdown, parameter_count
from .pipeline import (
    TINY_ARCH, TINY_STFT, TOY_ARCH, TOY_STFT, EnhanceConfig, TrainConfig, enhance, grad_check, metric_report,
    oracle_mask, si_sdr, snr_loss, smooth, tiny_scene, toy_scenes, train_toy,
)
from .scene import Scene, SceneConfig, circular_array, make_scene, synth_noise, synth_speech
from .spectral import StftConfig
from .weights_io import CorruptContainerError, UnknownVersionError, load_weights, save_weights

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4

DEFAULT_CONFIG = {
    "stft": {"frame_length": 320, "hop": 160, "sample_rate": 16000, "window": "sqrt_hann"},
    "scene": {
        "num_mics": 5, "array_radius": 0.1, "snr_db": None, "snr_range": [-10.0, 10.0], "sound_speed": 343.0,
        "seed": 0, "source_moving": True, "speed_range": [0.012, 2.404], "start_radius": [1.0, 3.0],
        "sensor_noise_db": 30.0,
    },
    "simulate": {"count": 4, "duration": 3.0, "wav_format": "float32"},
    "estimator": {"kind": "attention", "forgetting_factor": 0.995, "block_size": 30},
    "enhance": {"causal": True, "ref_channel": 0, "loading": 1e-6},
    "train": {
        "learning_rate": 1e-3, "batch_size": 8, "steps": 500, "seed": 0, "num_scenes": 10, "duration": 0.25,
        "preset": "toy",
    },
}


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def merge_config(base: dict, override: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise CliError(f"unknown config key {path + key!r}", EXIT_USAGE)
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise CliError(f"config key {path + key!r} must be an object", EXIT_USAGE)
            out[key] = merge_config(base[key], value, path + key + ".")
        else:
            out[key] = value
    return out


def load_config(path) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    try:
        override = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}", EXIT_INPUT) from None
    except json.JSONDecodeError as err:
        raise CliError(f"invalid config JSON: {err}", EXIT_USAGE) from None
    return merge_config(DEFAULT_CONFIG, override)


def _stft_cfg(cfg) -> StftConfig:
    return StftConfig(**cfg["stft"])


def _scene_cfg(cfg, seed) -> SceneConfig:
    s = cfg["scene"]
    return SceneConfig(
        geometry=circular_array(s["num_mics"], s["array_radius"]),
        snr_db=s["snr_db"], snr_range=tuple(s["snr_range"]), sound_speed=s["sound_speed"],
        sample_rate=cfg["stft"]["sample_rate"], seed=seed, source_moving=s["source_moving"],
        speed_range=tuple(s["speed_range"]), start_radius=tuple(s["start_radius"]),
        sensor_noise_db=s["sensor_noise_db"],
    )


def _enhance_cfg(cfg) -> EnhanceConfig:
    return EnhanceConfig(
        causal=cfg["enhance"]["causal"], estimator=scm.EstimatorConfig(**cfg["estimator"]),
        ref_channel=cfg["enhance"]["ref_channel"], stft=_stft_cfg(cfg), loading=cfg["enhance"]["loading"],
    )


def _read_wav(path, rate):
    if not Path(path).is_file():
        raise CliError(f"input file not found: {path}", EXIT_INPUT)
    try:
        return audio_io.read_wav(path, rate)[0]
    except ValueError as err:
        raise CliError(str(err), EXIT_INPUT) from None


def _load_weights(path):
    if not Path(path).is_file():
        raise CliError(f"weights file not found: {path}", EXIT_INPUT)
    try:
        return load_weights(path)
    except (CorruptContainerError, UnknownVersionError, MissingTensorError, UnexpectedTensorError, ShapeMismatchError) as err:
        raise CliError(f"bad weights: {err}", EXIT_DATA) from None


def cmd_config(args, cfg):
    print(json.dumps(cfg, indent=2, sort_keys=True))


def cmd_simulate(args, cfg):
    if args.count is not None:
        cfg["simulate"]["count"] = args.count
    if args.seed is not None:
        cfg["scene"]["seed"] = args.seed
    if args.snr_db is not None:
        cfg["scene"]["snr_db"] = args.snr_db
    if args.static:
        cfg["scene"]["source_moving"] = False
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise CliError(f"cannot create output directory: {err}", EXIT_INPUT) from None
    if not os.access(out, os.W_OK):
        raise CliError(f"output directory not writable: {out}", EXIT_INPUT)
    sim = cfg["simulate"]
    rate = cfg["stft"]["sample_rate"]
    base_seed = cfg["scene"]["seed"]
    for i in range(sim["count"]):
        seed = base_seed + i
        scfg = _scene_cfg(cfg, seed)
        speech = synth_speech(sim["duration"], rate, seed=10_000 + seed)
        noise = synth_noise(sim["duration"], rate, seed=20_000 + seed)
        scene = make_scene(scfg, speech, noise)
        stem = f"scene_{i:03d}"
        names = {k: f"{stem}_{k}.wav" for k in ("mixture", "speech", "noise")}
        for key, sig in (("mixture", scene.mixture), ("speech", scene.speech_image), ("noise", scene.noise_image)):
            audio_io.write_wav(out / names[key], sig, rate, sim["wav_format"])
        ref = scfg.ref_channel
        meta = dict(scene.metadata)
        meta["files"] = names
        meta["measured_power"] = {
            "speech_ref": float(np.mean(scene.speech_image[ref] ** 2)),
            "noise_ref": float(np.mean(scene.noise_image[ref] ** 2)),
        }
        meta["config"] = cfg
        audio_io.write_json(out / f"{stem}_meta.json", meta)
        print(f"{stem}: snr_db={scene.snr_db:.3f} moving={scfg.source_moving}")


def _sidecar_for(in_wav: Path):
    stem = in_wav.name.rsplit("_mixture.wav", 1)[0] if in_wav.name.endswith("_mixture.wav") else in_wav.stem
    meta = in_wav.with_name(f"{stem}_meta.json")
    return meta if meta.is_file() else None


def cmd_enhance(args, cfg):
    if args.causal is not None:
        cfg["enhance"]["causal"] = args.causal
    if args.estimator is not None:
        cfg["estimator"]["kind"] = args.estimator
    if args.lam is not None:
        cfg["estimator"]["forgetting_factor"] = args.lam
    if args.block_size is not None:
        cfg["estimator"]["block_size"] = args.block_size
    if args.ref_channel is not None:
        cfg["enhance"]["ref_channel"] = args.ref_channel
    try:
        ecfg = _enhance_cfg(cfg)
    except ValueError as err:
        raise CliError(str(err), EXIT_USAGE) from None
    in_wav = Path(args.in_wav)
    mixture = _read_wav(in_wav, ecfg.stft.sample_rate)
    weights = _load_weights(args.weights) if args.weights else None
    if weights is not None and weights.arch.num_mics != mixture.shape[0]:
        raise CliError(f"channel mismatch: input has {mixture.shape[0]} channels, model expects {weights.arch.num_mics}", EXIT_INPUT)
    if not 0 <= ecfg.ref_channel < mixture.shape[0]:
        raise CliError(f"reference channel {ecfg.ref_channel} out of range", EXIT_INPUT)

    scene = None
    mask = attention = None
    if args.oracle_mask:
        meta_path = _sidecar_for(in_wav)
        if meta_path is None:
            raise CliError("--oracle-mask needs the scene sidecar next to the input", EXIT_INPUT)
        meta = audio_io.read_json(meta_path)
        speech = _read_wav(in_wav.with_name(meta["files"]["speech"]), ecfg.stft.sample_rate)
        noise = _read_wav(in_wav.with_name(meta["files"]["noise"]), ecfg.stft.sample_rate)
        scene = Scene(mixture, speech, noise, meta["snr_db"], meta.get("noise_scale", 1.0), meta)
        mask = oracle_mask(scene, ecfg)
        if weights is None and ecfg.estimator.kind == "attention":
            t = mask.shape[1]
            rows = np.tril(np.ones((t, t))) if ecfg.causal else np.ones((t, t))
            rows /= rows.sum(axis=1, keepdims=True)
            attention = (rows, rows)
    elif weights is None:
        if ecfg.estimator.kind == "attention":
            raise CliError("weights are required for the attention estimator without --oracle-mask", EXIT_USAGE)
        raise CliError("weights are required unless --oracle-mask is given", EXIT_USAGE)

    start = time.perf_counter()
    try:
        enhanced, diag = enhance(mixture, weights, ecfg, mask=mask, attention=attention)
    except FloatingPointError as err:
        raise CliError(str(err), EXIT_NUMERIC) from None
    runtime = (time.perf_counter() - start) * 1e3
    report = {
        "estimator": ecfg.estimator.kind,
        "lambda": ecfg.estimator.forgetting_factor,
        "block_size": ecfg.estimator.block_size,
        "causal": ecfg.causal,
        "fallback_bin_ratio": diag["fallback_bin_ratio"],
        "runtime_ms": runtime,
        "config": cfg,
    }
    if scene is not None:
        metrics = metric_report(enhanced, scene, ecfg, runtime, diag)
        report.update(metrics)
        report["si_sdr_delta"] = metrics["si_sdr_out"] - metrics["si_sdr_in"]
    out_wav = Path(args.out)
    audio_io.write_wav(out_wav, enhanced, ecfg.stft.sample_rate)
    report_path = Path(args.report) if args.report else out_wav.with_suffix(".json")
    audio_io.write_json(report_path, report)
    print(json.dumps({k: v for k, v in report.items() if k != "config"}, indent=2))


def cmd_eval(args, cfg):
    rate = cfg["stft"]["sample_rate"]
    est = _read_wav(args.est_wav, rate)[0]
    ref = _read_wav(args.ref_wav, rate)
    ref = ref[min(args.ref_channel, ref.shape[0] - 1)]
    n = min(len(est), len(ref))
    try:
        metrics = {"si_sdr": si_sdr(est[:n], ref[:n]), "snr_loss": snr_loss(est[:n], ref[:n]), "samples": n}
    except ValueError as err:
        raise CliError(str(err), EXIT_DATA) from None
    print(json.dumps(metrics, indent=2))


def cmd_info(args, cfg):
    if args.weights:
        arch = _load_weights(args.weights).arch
    else:
        arch = IgcrnConfig()
    st = _stft_cfg(cfg)
    macs = mac_count(arch, 1.0, st.sample_rate, st.frame_length, st.hop)
    report = {
        "arch": arch.to_dict(),
        "parameters": parameter_count(arch),
        "parameter_breakdown": parameter_breakdown(arch),
        "macs_per_second_network": macs["network"],
        "macs_per_second_attention": macs["attention"],
        "mac_convention": "conv/deconv Cin*Cout*K*F*T; LSTM 4*(I*H+H*H)*F*T per layer; linear I*O*F*T; "
                          "attention F*T^2*D + F*T^2*M^2 per module, two modules, reported separately",
    }
    print(json.dumps(report, indent=2))


def cmd_gradcheck(args, cfg):
    if args.preset != "tiny":
        raise CliError(f"unknown preset {args.preset!r}", EXIT_USAGE)
    weights = init_weights(TINY_ARCH, seed=args.seed)
    scene = tiny_scene(args.seed)
    ok = True
    worst = 0.0
    for causal in (True, False):
        ecfg = EnhanceConfig(causal=causal, stft=TINY_STFT, loading=1e-3)
        try:
            errors = grad_check(weights, scene, ecfg)
        except ValueError as err:
            raise CliError(str(err), EXIT_NUMERIC) from None
        worst = max(worst, max(errors.values()))
        for group, err in errors.items():
            print(f"{'causal' if causal else 'noncausal'} {group}: {err:.3e}")
    ok = worst <= args.tol
    print(f"{'PASS' if ok else 'FAIL'} max_rel_err {worst:.3e} (tolerance {args.tol:g})")
    if not ok:
        raise CliError("gradient check failed", EXIT_NUMERIC)


def cmd_train(args, cfg):
    tr = cfg["train"]
    if args.steps is not None:
        tr["steps"] = args.steps
    if tr["preset"] != "toy":
        raise CliError(f"unknown training preset {tr['preset']!r}", EXIT_USAGE)
    scenes = toy_scenes(tr["num_scenes"], tr["duration"], tr["seed"], TOY_ARCH)
    tcfg = TrainConfig(learning_rate=tr["learning_rate"], batch_size=tr["batch_size"], steps=tr["steps"], seed=tr["seed"])
    ecfg = EnhanceConfig(causal=cfg["enhance"]["causal"], stft=TOY_STFT, loading=cfg["enhance"]["loading"])
    try:
        weights, trace = train_toy(scenes, init_weights(TOY_ARCH, seed=tr["seed"]), tcfg, ecfg)
    except FloatingPointError as err:
        raise CliError(str(err), EXIT_NUMERIC) from None
    save_weights(weights, args.out)
    trace_path = Path(args.trace) if args.trace else Path(args.out).with_suffix(".csv")
    with audio_io.atomic_path(trace_path) as tmp:
        with open(tmp, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss"])
            writer.writerows((i, f"{v:.10g}") for i, v in enumerate(trace))
    s = smooth(trace)
    print(json.dumps({"steps": len(trace), "initial_smoothed": float(s[0]) if len(s) else None,
                      "final_smoothed": float(s[-1]) if len(s) else None}, indent=2))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="abic", description="Attention-weighted MVDR speech enhancement toolkit.")
    p.add_argument("--config", help="JSON config overriding the defaults (see `config --dump`)")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS threads (env ABIC_THREADS)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("config", help="print the resolved configuration")
    c.add_argument("--dump", action="store_true", help="print all defaults merged with --config")
    c.set_defaults(func=cmd_config)

    s = sub.add_parser("simulate", help="render synthetic scenes (WAV + JSON sidecar)")
    s.add_argument("out_dir")
    s.add_argument("--count", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--snr-db", type=float)
    s.add_argument("--static", action="store_true", help="fixed source position")
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("enhance", help="enhance a multichannel WAV",
                       description="Frames are taken without padding; samples past the last full frame are output as zeros.")
    e.add_argument("in_wav")
    e.add_argument("weights", nargs="?")
    e.add_argument("--out", required=True)
    e.add_argument("--report")
    g = e.add_mutually_exclusive_group()
    g.add_argument("--causal", dest="causal", action="store_true", default=None)
    g.add_argument("--non-causal", dest="causal", action="store_false")
    e.add_argument("--estimator", choices=["attention", "online", "blockwise"])
    e.add_argument("--lambda", dest="lam", type=float)
    e.add_argument("--block-size", type=int)
    e.add_argument("--ref-channel", type=int)
    e.add_argument("--oracle-mask", action="store_true", help="use the ground-truth mask from the scene sidecar")
    e.set_defaults(func=cmd_enhance)

    v = sub.add_parser("eval", help="SI-SDR and SNR loss of an estimate against a reference")
    v.add_argument("est_wav")
    v.add_argument("ref_wav")
    v.add_argument("--ref-channel", type=int, default=0)
    v.set_defaults(func=cmd_eval)

    i = sub.add_parser("info", help="parameter and MAC report")
    i.add_argument("weights", nargs="?")
    i.set_defaults(func=cmd_info)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    gc.add_argument("--preset", default="tiny")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.set_defaults(func=cmd_gradcheck)

    t = sub.add_parser("train", help="toy-scale Adam training on synthetic scenes")
    t.add_argument("--out", required=True, help="output weight container")
    t.add_argument("--trace", help="loss trace CSV (default: next to --out)")
    t.add_argument("--steps", type=int)
    t.set_defaults(func=cmd_train)
    return p


def _thread_limit(n):
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    threads = args.threads or (int(os.environ["ABIC_THREADS"]) if os.environ.get("ABIC_THREADS") else None)
    try:
        cfg = load_config(args.config)
        with _thread_limit(threads):
            args.func(args, cfg)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
