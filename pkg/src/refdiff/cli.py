"""Command-line surface for the pipeline.

One binary with subcommands: analyze, blur, gendata, train, sample,
eval, ablate.  Exit codes: 0 success, 2 input error, 3 parameter error,
4 numerical failure.  ``--json`` modes emit exactly one JSON document
on stdout; numeric defaults mirror the module defaults and are echoed
in the JSON output.  The REFDIFF_OUT_DIR environment variable supplies
the default output directory; everything else is explicit flags.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import dsp, synthgen, trainer, transition
from .diffusion import ConditionBundle, sample as draw_sample

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_PARAMS = 3
EXIT_NUMERIC = 4


class InputError(Exception):
    pass


class ParamError(Exception):
    pass


def _out_dir(explicit: str | None) -> str:
    return explicit or os.environ.get("REFDIFF_OUT_DIR", ".")


def _load_spectrogram(path: str) -> dsp.MelSpectrogram:
    """Accept either a WAV file (converted with default settings) or MELS."""
    try:
        with open(path, "rb") as fh:
            magic = fh.read(4)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None
    if magic == dsp.MELS_MAGIC:
        try:
            return dsp.read_mels(path)
        except ValueError as exc:
            raise InputError(str(exc)) from None
    if magic == b"RIFF":
        try:
            audio = dsp.load_wav(path)
            return dsp.mel_spectrogram(audio)
        except dsp.WavError as exc:
            raise InputError(str(exc)) from None
    raise InputError(f"unrecognized input format: {path}")


def _emit(doc: dict, as_json: bool, summary: str) -> None:
    if as_json:
        print(json.dumps(doc, sort_keys=True))
    else:
        print(summary)


def cmd_analyze(args) -> int:
    mel = _load_spectrogram(args.input)
    if mel.is_log:
        raise InputError("transition analysis needs a linear-domain spectrogram")
    if args.k < 1 or args.k % 2 == 0 or args.w < 1:
        raise ParamError("k must be odd and positive, w must be >= 1")
    cfg = transition.TransitionConfig(smooth_k=args.k, window_w=args.w, eps=args.eps)
    series, regions = transition.analyze(mel, cfg)
    report = transition.region_report(series, regions, mel.hop, cfg, args.region_weight)
    _emit(
        report,
        args.json,
        f"{args.input}: {len(report['points'])} transition points, "
        f"{len(report['regions'])} regions over {regions.total_frames} frames",
    )
    return EXIT_OK


def cmd_blur(args) -> int:
    mel = _load_spectrogram(args.input)
    kernel = dsp.gaussian_kernel(args.kernel_size, args.sigma)
    if args.regions:
        try:
            with open(args.regions, "r", encoding="utf-8") as fh:
                report = json.load(fh)
            region_list = [(int(s), int(e)) for s, e in report["regions"]]
            regions = transition.TransitionRegionSet(
                regions=tuple(region_list),
                window=int(report["params"]["w"]),
                total_frames=mel.n_frames,
            )
        except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
            raise InputError(f"bad region report {args.regions}: {exc}") from None
    else:
        if mel.is_log:
            raise InputError("auto-detection needs a linear-domain spectrogram")
        cfg = transition.TransitionConfig(smooth_k=args.k, window_w=args.w)
        _, regions = transition.analyze(mel, cfg)
    blurred = transition.blur_regions(mel, regions, kernel)
    dsp.write_mels(args.output, blurred)
    _emit(
        {
            "input": args.input,
            "output": args.output,
            "regions": [[s, e] for s, e in regions.regions],
            "kernel": {"size": args.kernel_size, "sigma": args.sigma},
        },
        args.json,
        f"blurred {len(regions.regions)} regions -> {args.output}",
    )
    return EXIT_OK


def cmd_gendata(args) -> int:
    if args.n < 1:
        raise ParamError("n must be >= 1")
    out_dir = _out_dir(args.out)
    dataset = synthgen.make_dataset(args.n, args.seed)
    manifest = synthgen.write_dataset(dataset, out_dir)
    _emit(
        {
            "manifest": manifest,
            "n": args.n,
            "seed": args.seed,
            "norm": {"lo": dataset.norm_lo, "hi": dataset.norm_hi},
        },
        args.json,
        f"wrote {args.n} samples to {manifest}",
    )
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            cfg_obj = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read config {args.config}: {exc}") from None
    try:
        config = trainer.TrainConfig.from_json(cfg_obj)
    except (TypeError, ValueError) as exc:
        raise ParamError(f"bad training config: {exc}") from None
    dataset = _load_manifest(args.manifest)
    ckpt, history = trainer.train(config, dataset)
    out_dir = _out_dir(args.out)
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, args.name + ".rdck")
    curve_path = os.path.join(out_dir, args.name + "_loss.json")
    ckpt.save(ckpt_path)
    final_loss = history.loss_curve[-1]
    with open(curve_path, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "loss_curve": history.loss_curve,
                "evals": history.evals,
                "config": config.to_json(),
            },
            fh,
            sort_keys=True,
        )
    _emit(
        {"checkpoint": ckpt_path, "loss_curve": curve_path, "final_loss": final_loss},
        args.json,
        f"trained {config.total_steps} steps; final loss {final_loss:.6f} -> {ckpt_path}",
    )
    return EXIT_OK


def cmd_sample(args) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    dataset = _load_manifest(args.manifest)
    if not (0 <= args.index < len(dataset)):
        raise ParamError(f"index {args.index} outside dataset of {len(dataset)}")
    if not (1 <= args.steps <= ckpt.schedule.T):
        raise ParamError(f"steps must lie in 1..{ckpt.schedule.T}")
    item = dataset[args.index]
    prepared = trainer.prepare_sample(item, ckpt.config, ckpt.norm_lo, ckpt.norm_hi)
    bundle = ConditionBundle(cond=prepared.cond, ref_mel=prepared.ref_norm)
    predictor = trainer.make_predictor(ckpt, prepared)
    x0 = draw_sample(predictor, bundle, ckpt.schedule, args.steps, seed=args.seed)
    out = dsp.MelSpectrogram(data=x0, n_mels=item.gt_mel.n_mels, hop=item.gt_mel.hop, is_log=True)
    dsp.write_mels(args.output, out)
    mse = float(((x0 - item.gt_mel.data) ** 2).mean())
    _emit(
        {
            "output": args.output,
            "index": args.index,
            "steps": args.steps,
            "seed": args.seed,
            "mse_vs_gt": mse,
        },
        args.json,
        f"sampled index {args.index} at {args.steps} steps (mse {mse:.6f}) -> {args.output}",
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    dataset = _load_manifest(args.manifest)
    if not (1 <= args.steps <= ckpt.schedule.T):
        raise ParamError(f"steps must lie in 1..{ckpt.schedule.T}")
    metrics = trainer.evaluate(ckpt, dataset, args.steps, seed=args.seed)
    doc = {"steps": args.steps, "seed": args.seed, "metrics": metrics.to_json()}
    _emit(
        doc,
        args.json,
        f"global mse {metrics.global_mse:.6f} | region {metrics.region_mse:.6f} "
        f"| non-region {metrics.nonregion_mse:.6f}",
    )
    return EXIT_OK


def cmd_ablate(args) -> int:
    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            config = trainer.TrainConfig.from_json(json.load(fh))
    except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
        raise InputError(f"cannot read config {args.config}: {exc}") from None
    dataset = _load_manifest(args.manifest)
    eval_dataset = _load_manifest(args.eval_manifest) if args.eval_manifest else None
    table = trainer.ablation_suite(
        config,
        dataset,
        steps_grid=tuple(args.steps),
        eval_seed=args.seed,
        eval_dataset=eval_dataset,
    )
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(table, fh, sort_keys=True)
    lines = [
        f"{name}: region {v['metrics']['region_mse']:.6f} global {v['metrics']['global_mse']:.6f}"
        for name, v in table["variants"].items()
    ]
    _emit(table, args.json, "\n".join(lines))
    return EXIT_OK


def _load_manifest(path) -> synthgen.SynthDataset:
    try:
        return synthgen.load_dataset(path)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot load dataset {path}: {exc}") from None


def _load_ckpt(path) -> trainer.Checkpoint:
    try:
        return trainer.Checkpoint.load(path)
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"cannot load checkpoint {path}: {exc}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="refdiff",
        description="Reference-conditioned mel diffusion with transition-aware training",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="detect pitch-transition regions")
    p.add_argument("input", help="WAV or MELS file")
    p.add_argument("--k", type=int, default=9, help="smoothing kernel size")
    p.add_argument("--w", type=int, default=8, help="region window size")
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--region-weight", type=float, default=2.0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("blur", help="Gaussian-blur transition regions of a MELS file")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--regions", help="region report JSON (default: auto-detect)")
    p.add_argument("--kernel-size", type=int, default=5)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--k", type=int, default=9)
    p.add_argument("--w", type=int, default=8)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_blur)

    p = sub.add_parser("gendata", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output directory (default: $REFDIFF_OUT_DIR or .)")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_gendata)

    p = sub.add_parser("train", help="train a denoiser from a dataset manifest")
    p.add_argument("config", help="training config JSON")
    p.add_argument("manifest", help="dataset manifest.jsonl")
    p.add_argument("--out", help="output directory")
    p.add_argument("--name", default="model")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample one dataset item from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("output")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate the ablation grid")
    p.add_argument("config")
    p.add_argument("manifest")
    p.add_argument("--eval-manifest", help="held-out dataset for metrics (default: train set)")
    p.add_argument("--steps", type=int, nargs="+", default=[24, 54, 100])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the table JSON here as well")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ParamError as exc:
        print(f"parameter error: {exc}", file=sys.stderr)
        return EXIT_PARAMS
    except trainer.TrainingDivergedError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"parameter error: {exc}", file=sys.stderr)
        return EXIT_PARAMS


if __name__ == "__main__":
    sys.exit(main())
