"""Command-line entry point: simulate | train | separate | evaluate | profile.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from dpcss.checkpoint import CheckpointError, load_checkpoint
from dpcss.config import ConfigError, RunConfig, SeparatorConfig, dump_config, load_run_config
from dpcss.dsp import WavFormatError, read_wav, write_wav
from dpcss.metrics import (
    BUCKETS,
    MetricError,
    count_macs,
    count_params,
    overlap_bucket,
    pit_loss,
    window_snr_report,
    workload_frames,
)
from dpcss.pipeline import Separator, separate_recording
from dpcss.sim import GeometryError, SchedulingError, list_scenarios, load_scenario, random_meeting, save_scenario
from dpcss.tensor import GraphError, NumericDomainError, ShapeError
from dpcss.train import (
    TrainingError,
    WindowDataset,
    evaluate_window_snr,
    mixture_window_snr,
    oracle_masks,
    oracle_window_snr,
    train,
    windows_from_scenario,
    windows_from_signals,
)

logger = logging.getLogger("dpcss")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


def str2bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--verbose", action="store_true")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--arch")
    model.add_argument("--window-frames", type=int, choices=(50, 100, 150, 200))
    model.add_argument("--hop-frames", type=int)
    model.add_argument("--lambda", dest="sampling_factor", type=int, help="boosted model sampling factor")
    model.add_argument("--online", type=str2bool, metavar="BOOL")

    debug = argparse.ArgumentParser(add_help=False)
    debug.add_argument("--debug-oracle-mask", type=str2bool, default=False, metavar="BOOL")
    debug.add_argument("--debug-unit-mask", type=str2bool, default=False, metavar="BOOL")

    p = Parser(prog="dpcss", description="Dual-path continuous speech separation toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    s = sub.add_parser("simulate", parents=[common], help="generate a meeting dataset")
    s.add_argument("--n-meetings", type=int)

    t = sub.add_parser("train", parents=[common, model], help="train a separator")
    t.add_argument("--data", type=Path, required=True, help="dataset directory from 'simulate'")
    t.add_argument("--steps", type=int)
    t.add_argument("--resume", type=Path, help="last.ckpt to continue from")

    sep = sub.add_parser("separate", parents=[common, model, debug], help="separate a recording")
    sep.add_argument("input", type=Path)
    sep.add_argument("--checkpoint", type=Path)
    sep.add_argument("--refs", type=Path, nargs=2, help="reference WAVs (oracle mask mode)")

    e = sub.add_parser("evaluate", parents=[common, model, debug], help="window and stream SNR tables")
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--checkpoint", type=Path)

    pr = sub.add_parser("profile", parents=[common, model], help="parameter and MAC counts")
    pr.add_argument("--duration", type=float, help="workload length in seconds")
    return p


def resolve_config(args) -> RunConfig:
    model = {
        "arch": getattr(args, "arch", None),
        "window_frames": getattr(args, "window_frames", None),
        "hop_frames": getattr(args, "hop_frames", None),
        "sampling_factor": getattr(args, "sampling_factor", None),
        "online": getattr(args, "online", None),
    }
    overrides = {"model": model, "train": {}, "simulate": {}, "profile": {}}
    if args.seed is not None:
        overrides["model"]["seed"] = args.seed
        overrides["train"]["seed"] = args.seed
        overrides["simulate"]["seed"] = args.seed
    if getattr(args, "n_meetings", None) is not None:
        overrides["simulate"]["n_meetings"] = args.n_meetings
    if getattr(args, "steps", None) is not None:
        overrides["train"]["steps"] = args.steps
    if getattr(args, "duration", None) is not None:
        overrides["profile"]["duration"] = args.duration
    # a window change without an explicit hop keeps the default half-window hop
    if model["window_frames"] is not None and model["hop_frames"] is None:
        overrides["model"]["hop_frames"] = max(model["window_frames"] // 2, 1)
    return load_run_config(args.config, overrides)


def out_dir(args, default: str) -> Path:
    d = args.out if args.out is not None else Path(default)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {d}: {exc}") from exc
    return d


def write_records(path: Path, records: list[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_model(cfg: SeparatorConfig, checkpoint: Path | None) -> Separator:
    model = Separator(cfg)
    if checkpoint is None:
        raise ConfigError("a --checkpoint is required unless a debug mask mode is selected")
    state = load_checkpoint(checkpoint)
    names = {k for k, _ in model.named_parameters()}
    params = {k: v for k, v in state.items() if k in names}
    missing = sorted(names - set(params))
    if missing:
        raise ConfigError(
            f"checkpoint {checkpoint} does not match arch {cfg.arch!r} "
            f"(missing {len(missing)} parameters, e.g. {missing[0]}); check --arch/--config"
        )
    try:
        model.load_state_dict(params)
    except ShapeError as exc:
        raise ConfigError(f"checkpoint {checkpoint} does not match the model configuration: {exc}") from exc
    return model


# -- commands --------------------------------------------------------------------
def cmd_simulate(cfg: RunConfig, args) -> int:
    sc = cfg.simulate
    out = out_dir(args, "dataset")
    dump_config(cfg, out / "resolved_config.yaml")
    if sc.n_meetings == 0:
        logger.warning("n_meetings = 0: writing an empty dataset")
    noise = None if sc.noise_snr_min is None else (sc.noise_snr_min, sc.noise_snr_max)
    records = []
    for i in range(sc.n_meetings):
        scn = random_meeting(
            sc.seed * 1_000_003 + i,
            n_speakers=sc.n_speakers,
            duration=sc.duration,
            overlap_range=(sc.overlap_min, sc.overlap_max),
            noise_range=noise,
            max_order=sc.max_order,
            utterance_range=(sc.utterance_min, sc.utterance_max),
            source_dir=sc.source_dir,
        )
        save_scenario(scn, out / f"meeting_{i:04d}")
        records.append({"meeting": i, "seed": scn.seed, "target_overlap": scn.target_overlap,
                        "realized_overlap": scn.realized_overlap, "duration": scn.mixture.duration,
                        "noise_snr_db": scn.noise_snr})
    write_records(out / "summary.jsonl", records)
    hist = Counter(overlap_bucket(r["realized_overlap"]) for r in records)
    print(f"{sc.n_meetings} meetings written to {out}")
    print("realized overlap histogram:")
    for b in BUCKETS:
        print(f"  {b:>7}  {hist.get(b, 0):4d}  {'#' * hist.get(b, 0)}")
    return EXIT_OK


def dataset_windows(paths: list[Path], cfg: SeparatorConfig, offset: int = 0) -> WindowDataset:
    parts = [windows_from_scenario(load_scenario(p), cfg.window_frames, cfg.hop_frames, source_id=offset + i)
             for i, p in enumerate(paths)]
    return WindowDataset.concat(parts)


def cmd_train(cfg: RunConfig, args) -> int:
    paths = list_scenarios(args.data)
    if not paths:
        raise SchedulingError(f"dataset {args.data} contains no meetings")
    out = out_dir(args, "run")
    dump_config(cfg, out / "resolved_config.yaml")
    n_val = int(np.ceil(len(paths) * cfg.train.val_fraction)) if len(paths) > 1 else 0
    n_val = min(n_val, len(paths) - 1)
    train_paths, val_paths = paths[:len(paths) - n_val], paths[len(paths) - n_val:]
    train_set = dataset_windows(train_paths, cfg.model)
    val_set = dataset_windows(val_paths, cfg.model, offset=len(train_paths)) if val_paths else None
    print(f"training {cfg.model.arch} on {len(train_set)} windows "
          f"({len(train_paths)} meetings), validating on {len(val_set) if val_set else 0}")
    result = train(cfg.model, cfg.train, train_set, val_set, out_dir=out, resume=args.resume)
    for rec in result.history:
        print(f"epoch {rec['epoch']:4d}  step {rec['step']:6d}  lr {rec['lr']:.3g}  "
              f"train {rec['train_loss']:8.3f}  val {rec['val_loss']:8.3f}")
    print(f"best validation loss {result.best_val:.3f} dB; checkpoints in {out}")
    return EXIT_OK


def cmd_separate(cfg: RunConfig, args) -> int:
    w = read_wav(args.input)
    out = out_dir(args, "separated")
    dump_config(cfg, out / "resolved_config.yaml")
    mc = cfg.model
    window_masks, model = None, None
    if args.debug_oracle_mask:
        if not args.refs:
            raise ConfigError("--debug-oracle-mask needs --refs REF1 REF2")
        refs = [read_wav(r).samples for r in args.refs]
        data = windows_from_signals(w.samples, refs, mc.window_frames, mc.hop_frames, min_energy=-1.0)
        window_masks = oracle_masks(data)
    elif not args.debug_unit_mask:
        model = load_model(mc, args.checkpoint)
    s1, s2, report = separate_recording(w, mc, model, unit_mask=args.debug_unit_mask, window_masks=window_masks)
    write_wav(out / "stream1.wav", s1)
    write_wav(out / "stream2.wav", s2)
    report.pop("seconds_separation")
    report.pop("seconds_stitch_resynthesis")
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    print(f"streams written to {out} ({report['n_windows']} windows)")
    return EXIT_OK


def _fmt(v) -> str:
    return "    -" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{v:6.2f}"


def cmd_evaluate(cfg: RunConfig, args) -> int:
    paths = list_scenarios(args.data)
    if not paths:
        raise SchedulingError(f"dataset {args.data} contains no meetings")
    out = out_dir(args, "evaluation")
    dump_config(cfg, out / "resolved_config.yaml")
    mc = cfg.model
    oracle = args.debug_oracle_mask
    model = None
    if not oracle and not args.debug_unit_mask:
        model = load_model(mc, args.checkpoint)
    system = "oracle-psm" if oracle else ("unit-mask" if args.debug_unit_mask else mc.arch)

    rows = {system: ([], [], []), "mixture": ([], [], [])}  # window snrs, ratios, stream snrs
    for i, p in enumerate(paths):
        scn = load_scenario(p)
        if len(scn.refs) != 2:
            raise MetricError(f"{p}: evaluation needs exactly two reference streams, found {len(scn.refs)}")
        data = windows_from_signals(scn.mixture.samples, [r.samples for r in scn.refs], mc.window_frames,
                                    mc.hop_frames, scn.activity, source_id=i, min_energy=-1.0)
        if oracle:
            win = oracle_window_snr(data)
            masks = oracle_masks(data)
        elif args.debug_unit_mask:
            win = mixture_window_snr(data)
            masks = np.ones(data.mix.shape[:2] + (2, data.mix.shape[2]))
        else:
            win = evaluate_window_snr(model, data, chunk_windows=len(data))
            masks = None
        s1, s2, _ = separate_recording(scn.mixture, mc, model, unit_mask=args.debug_unit_mask and not oracle,
                                       window_masks=masks if oracle else None)
        stream = -pit_loss([s1, s2], scn.refs).loss
        mix_stream = -pit_loss([scn.mixture, scn.mixture], scn.refs).loss
        for name, w, st in ((system, win, stream), ("mixture", mixture_window_snr(data), mix_stream)):
            rows[name][0].extend(w.tolist())
            rows[name][1].extend(data.overlap.tolist())
            rows[name][2].append(st)

    records = []
    print(f"pre-stitching window SNR (dB) by overlap bucket, {len(paths)} meetings")
    print(f"{'system':>22} " + " ".join(f"{b:>7}" for b in BUCKETS) + "   stream SNR")
    for name, (wins, ratios, streams) in rows.items():
        rep = window_snr_report(wins, ratios)
        print(f"{name:>22} " + " ".join(f"{_fmt(rep.means[b]):>7}" for b in BUCKETS)
              + f"   {_fmt(float(np.mean(streams)))}")
        for row in rep.rows():
            records.append({"system": name, "kind": "window", **row})
        records.append({"system": name, "kind": "silent_windows", "count": rep.silent_windows})
        records.append({"system": name, "kind": "stream", "mean_snr_db": float(np.mean(streams)),
                        "per_meeting": [float(x) for x in streams]})
    counts = window_snr_report(rows["mixture"][0], rows["mixture"][1]).counts
    print(f"{'windows':>22} " + " ".join(f"{counts[b]:>7d}" for b in BUCKETS))
    write_records(out / "metrics.jsonl", records)
    return EXIT_OK


def cmd_profile(cfg: RunConfig, args) -> int:
    mc = cfg.model
    frames = workload_frames(cfg.profile.duration)
    params = count_params(mc)
    macs = count_macs(mc, frames)
    records = [{"kind": "layer", **r} for r in macs.records()]
    summary = {"kind": "total", "arch": mc.arch, "params": params.total_params, "params_m": params.total_params / 1e6,
               "macs": macs.total_macs, "giga_macs": macs.giga_macs, "duration_s": cfg.profile.duration,
               **macs.workload}
    print(f"{mc.arch}: K={mc.window_frames} P={mc.hop_frames} over {cfg.profile.duration:g} s ({frames} frames)")
    print(f"{'layer':>18} {'params':>12} {'MACs':>16}")
    for l in macs.layers:
        print(f"{l.name:>18} {l.params:12d} {l.macs:16d}")
    print(f"{'total':>18} {params.total_params:12d} {macs.total_macs:16d}")
    print(f"model size {params.total_params / 1e6:.3f} M, {macs.giga_macs:.2f} GMACs")
    if mc.arch == "dp-transformer-boosted":
        plain = SeparatorConfig(**{**mc.to_dict(), "arch": "dp-transformer"})
        ratio = 1.0 if mc.sampling_factor == 1 else macs.total_macs / count_macs(plain, frames).total_macs
        summary["mac_ratio_vs_plain"] = ratio
        print(f"boosted (lambda={mc.sampling_factor}) / plain dual-path MAC ratio: {ratio:.3f}")
    print(f"convention: {macs.convention}")
    records.append(summary)
    if args.out is not None:
        out = out_dir(args, "profile")
        dump_config(cfg, out / "resolved_config.yaml")
        write_records(out / "profile.jsonl", records)
    else:
        for rec in records:
            print(json.dumps(rec, sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "separate": cmd_separate,
    "evaluate": cmd_evaluate,
    "profile": cmd_profile,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"dpcss: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, UsageError) as exc:
        print(f"dpcss: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, NumericDomainError, GraphError, MetricError, ShapeError, SchedulingError,
            GeometryError, CheckpointError, WavFormatError, OSError, FloatingPointError) as exc:
        print(f"dpcss: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
