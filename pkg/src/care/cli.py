"""Command-line entry point: prepare / train / eval / corrupt-eval / render / sweep.

Experiments are described by a flat JSON config with nested sections
(data, preprocess, model, contrastive, train, output_dir); CLI flags
override file values. Every report embeds the resolved config and the
package version.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

from . import __version__
from .errors import CareError, ConfigError, InputError
from .img_repr import (render_composite, render_spatial_image, render_temporal_image,
                       save_png)
from .ingest import (build_sensor_registry, dataset_stats, load_coords, load_label_map,
                     parse_log, segment_activities)
from .model import CareModel, ModelConfig, load_checkpoint, save_checkpoint
from .objective import ContrastiveConfig
from .preprocess import (PreprocessConfig, fit_normalization_stats, filter_events,
                         process_segments, resolve_auto_length, write_cache)
from .robustness import corrupt_malfunction, perturb_positions
from .train_eval import (TrainConfig, aggregate_reports, build_dataset, evaluate,
                         run_pipeline, stratified_split, sweep)

_SECTIONS = ("data", "preprocess", "model", "contrastive", "train", "output_dir")
_DATA_KEYS = ("log", "coords", "label_map")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def load_run_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise InputError(f"config file not found: {path}")
    with path.open() as fh:
        raw = json.load(fh)
    for key in raw:
        if key not in _SECTIONS:
            raise ConfigError(f"unknown config section {key!r}")
    data = raw.get("data", {})
    for key in data:
        if key not in _DATA_KEYS:
            raise ConfigError(f"unknown data key {key!r}")
    return raw


def _build_configs(raw: dict, args):
    prep_kwargs = dict(raw.get("preprocess", {}))
    ccfg_kwargs = dict(raw.get("contrastive", {}))
    tcfg_kwargs = dict(raw.get("train", {}))
    model_kwargs = dict(raw.get("model", {}))

    def _to_float(text, flag):
        try:
            return float(text)
        except ValueError as exc:
            raise ConfigError(f"{flag} expects a number, got {text!r}") from exc

    if getattr(args, "theta", None) is not None:
        prep_kwargs["filter_threshold"] = (None if args.theta == "off"
                                           else _to_float(args.theta, "--theta"))
    if getattr(args, "bin_hours", None) not in (None, "off"):
        prep_kwargs["bin_width_hours"] = _to_float(args.bin_hours, "--bin-hours")
    no_time = getattr(args, "bin_hours", None) == "off"
    if getattr(args, "beta", None) is not None:
        ccfg_kwargs["beta"] = args.beta
    mode = getattr(args, "mode", None)
    view = "both"
    if mode is not None:
        if mode in ("cross", "cross_view"):
            ccfg_kwargs["mode"] = "cross_view"
        elif mode in ("within", "within_view"):
            ccfg_kwargs["mode"] = "within_view"
        elif mode in ("uni-seq", "uni-img"):
            ccfg_kwargs["mode"] = "off"
            view = "seq" if mode == "uni-seq" else "img"
        else:
            raise ConfigError(f"unknown mode {mode!r}")
    model_kwargs.setdefault("input_dim", 1)  # resolved from data later
    model_kwargs.setdefault("n_classes", 2)
    model_kwargs["view"] = view
    if "img_widths" in model_kwargs:
        model_kwargs["img_widths"] = tuple(model_kwargs["img_widths"])
    if "seeds" in tcfg_kwargs:
        tcfg_kwargs["seeds"] = tuple(tcfg_kwargs["seeds"])

    try:
        prep = PreprocessConfig(**prep_kwargs)
        ccfg = ContrastiveConfig(**ccfg_kwargs)
        tcfg = TrainConfig(**tcfg_kwargs)
        mcfg = ModelConfig(**model_kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad config key: {exc}") from exc
    return prep, mcfg, ccfg, tcfg, no_time


def _load_inputs(raw: dict):
    data = raw.get("data", {})
    for key in _DATA_KEYS:
        if key not in data:
            raise ConfigError(f"config data section is missing {key!r}")
    events, stats = parse_log(data["log"])
    label_map = load_label_map(data["label_map"])
    warnings: list[str] = []
    segments = segment_activities(events, label_map, warnings=warnings)
    coords = load_coords(data["coords"])
    registry = build_sensor_registry(events, coords, warnings=warnings)
    return events, segments, registry, label_map, stats, warnings


def _resolved_config(raw, prep, mcfg, ccfg, tcfg) -> dict:
    return {
        "version": __version__,
        "data": raw.get("data", {}),
        "preprocess": dataclasses.asdict(prep),
        "model": dataclasses.asdict(mcfg),
        "contrastive": dataclasses.asdict(ccfg),
        "train": dataclasses.asdict(tcfg),
    }


def _out_dir(raw, args) -> Path:
    out = getattr(args, "out", None) or raw.get("output_dir", "care_out")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _mode_tag(ccfg: ContrastiveConfig, view: str) -> str:
    if view != "both":
        return f"uni_{view}"
    if ccfg.mode == "off" or ccfg.beta == 0.0:
        return "naive_ce_fusion"
    return ccfg.mode


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(raw, args) -> int:
    prep, mcfg, ccfg, tcfg, _ = _build_configs(raw, args)
    _, segments, registry, label_map, parse_stats, warnings = _load_inputs(raw)
    seed = args.seed if args.seed is not None else tcfg.seeds[0]
    train_raw, _ = stratified_split(segments, tcfg.train_fraction, seed)
    temp_range = fit_normalization_stats(train_raw)
    prep = dataclasses.replace(prep, temperature_range=temp_range)
    if prep.fixed_length is None:
        filtered = train_raw
        if prep.filter_threshold is not None:
            filtered = [filter_events(s, prep.filter_threshold) for s in train_raw]
        length = resolve_auto_length(filtered)
    else:
        length = prep.fixed_length
    processed = process_segments(segments, registry, prep, length)

    out = _out_dir(raw, args)
    write_cache(out / "segments.cache", processed, len(registry), length,
                label_map.n_classes)
    stats = dataset_stats(segments, registry)
    stats.update({
        "config": _resolved_config(raw, prep, mcfg, ccfg, tcfg),
        "parse": dataclasses.asdict(parse_stats),
        "fixed_length": length,
        "temperature_range": temp_range,
        "split_seed": seed,
        "warnings": warnings,
        "class_names": label_map.class_names,
    })
    (out / "stats.json").write_text(json.dumps(stats, indent=2, default=str))
    print(f"prepared {len(processed)} segments over {len(registry)} sensors -> {out}")
    return 0


def _train_seeds(raw, args):
    prep, mcfg, ccfg, tcfg, no_time = _build_configs(raw, args)
    _, segments, registry, label_map, _, _ = _load_inputs(raw)
    mcfg = dataclasses.replace(mcfg, n_classes=label_map.n_classes)
    seeds = (args.seed,) if args.seed is not None else tcfg.seeds
    out = _out_dir(raw, args)
    reports = []
    for seed in seeds:
        model, report, train_log = run_pipeline(segments, registry, prep, mcfg, ccfg,
                                                tcfg, seed=seed, no_time=no_time)
        seed_dir = out / f"seed{seed}"
        seed_dir.mkdir(exist_ok=True)
        save_checkpoint(model, seed_dir / "checkpoint.bin")
        (seed_dir / "manifest.json").write_text(json.dumps({
            "model": dataclasses.asdict(model.config),
            "fixed_length": report.extras["fixed_length"],
            "temperature_range": report.extras["temperature_range"],
            "seed": seed,
        }, default=list))
        with (seed_dir / "train_log.csv").open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch", "train_ce", "train_sica",
                                                    "valid_f1", "valid_acc"])
            writer.writeheader()
            writer.writerows(train_log["epochs"])
        reports.append(report)
    return prep, mcfg, ccfg, tcfg, no_time, segments, registry, seeds, reports, out


def cmd_train(raw, args) -> int:
    prep, mcfg, ccfg, tcfg, _, _, _, seeds, reports, out = _train_seeds(raw, args)
    payload = {
        "config": _resolved_config(raw, prep, mcfg, ccfg, tcfg),
        "mode": _mode_tag(ccfg, mcfg.view),
        "seeds": list(seeds),
        "per_seed": [r.flat() for r in reports],
        "aggregate": aggregate_reports(reports),
    }
    (out / "report.json").write_text(json.dumps(payload, indent=2, default=str))
    agg = payload["aggregate"]
    print(f"trained {len(seeds)} seed(s): acc {agg['accuracy']['mean']:.3f}"
          f" +/- {agg['accuracy']['std']:.3f} -> {out / 'report.json'}")
    return 0


def _evaluate_run(raw, args, corruption=None) -> int:
    prep, mcfg, ccfg, tcfg, no_time = _build_configs(raw, args)
    _, segments, registry, label_map, _, _ = _load_inputs(raw)
    out = _out_dir(raw, args)
    seed = args.seed if args.seed is not None else tcfg.seeds[0]
    seed_dir = out / f"seed{seed}"
    manifest_path = seed_dir / "manifest.json"
    if not manifest_path.exists():
        raise InputError(f"no trained run at {seed_dir}; run `care train` first")
    manifest = json.loads(manifest_path.read_text())
    model_cfg = ModelConfig(**{**manifest["model"],
                               "img_widths": tuple(manifest["model"]["img_widths"])})
    model = load_checkpoint(seed_dir / "checkpoint.bin", model_cfg)

    _, test_raw = stratified_split(segments, tcfg.train_fraction, seed)
    temp_range = manifest["temperature_range"]
    if temp_range is not None:
        temp_range = tuple(temp_range)
    spec_echo = None
    if corruption is not None:
        kind, payload = corruption
        if kind == "malfunction":
            a, b = payload
            temp_min = temp_range[0] if temp_range is not None else None
            test_raw, spec = corrupt_malfunction(test_raw, a, b, seed=seed,
                                                 temperature_minimum=temp_min)
        else:
            registry, spec = perturb_positions(registry, payload, seed=seed)
        spec_echo = spec.echo()

    prep = dataclasses.replace(prep, temperature_range=temp_range)
    processed = process_segments(test_raw, registry, prep, manifest["fixed_length"])
    dataset = build_dataset(processed, registry, prep.bins_per_day, no_time=no_time,
                            with_images=model_cfg.view in ("both", "img"),
                            with_sequences=model_cfg.view in ("both", "seq"))
    report = evaluate(model, dataset, tcfg.batch_size, average=tcfg.average)
    payload = {
        "config": _resolved_config(raw, prep, mcfg, ccfg, tcfg),
        "mode": _mode_tag(ccfg, model_cfg.view),
        "seed": seed,
        "corruption": spec_echo,
        "metrics": report.flat(),
        "per_class": report.per_class,
        "confusion": report.confusion,
    }
    name = "corrupt_report.json" if corruption is not None else "eval_report.json"
    (seed_dir / name).write_text(json.dumps(payload, indent=2, default=str))
    print(f"accuracy {report.accuracy:.3f} f1 {report.f1:.3f} -> {seed_dir / name}")
    return 0


def cmd_eval(raw, args) -> int:
    return _evaluate_run(raw, args)


def cmd_corrupt_eval(raw, args) -> int:
    if args.malfunction is not None:
        try:
            a, b = (float(x) for x in args.malfunction.lower().split("x"))
        except ValueError as exc:
            raise ConfigError(f"--malfunction expects AxB, got {args.malfunction!r}") from exc
        corruption = ("malfunction", (a, b))
    elif args.reposition is not None:
        corruption = ("reposition", args.reposition)
    else:
        raise ConfigError("corrupt-eval needs --malfunction AxB or --reposition VAR")
    return _evaluate_run(raw, args, corruption=corruption)


def cmd_render(raw, args) -> int:
    prep, _, _, tcfg, _ = _build_configs(raw, args)
    _, segments, registry, _, _, _ = _load_inputs(raw)
    if not (0 <= args.segment < len(segments)):
        raise ConfigError(f"--segment must lie in [0,{len(segments)})")
    seed = args.seed if args.seed is not None else tcfg.seeds[0]
    train_raw, _ = stratified_split(segments, tcfg.train_fraction, seed)
    prep = dataclasses.replace(prep, temperature_range=fit_normalization_stats(train_raw))
    length = prep.fixed_length or resolve_auto_length(train_raw)
    processed = process_segments([segments[args.segment]], registry, prep, length)[0]
    out = _out_dir(raw, args)
    save_png(render_temporal_image(processed, registry, prep.bins_per_day),
             out / f"segment{args.segment}_temporal.png")
    save_png(render_spatial_image(processed, registry),
             out / f"segment{args.segment}_spatial.png")
    save_png(render_composite(processed, registry, prep.bins_per_day),
             out / f"segment{args.segment}_composite.png")
    print(f"rendered segment {args.segment} -> {out}")
    return 0


def cmd_sweep(raw, args) -> int:
    # grid flags hold comma lists here; keep them out of the base configs
    base_args = argparse.Namespace(**{**vars(args), "theta": None, "bin_hours": None,
                                      "mode": None, "beta": None})
    prep, mcfg, ccfg, tcfg, _ = _build_configs(raw, base_args)
    _, segments, registry, label_map, _, _ = _load_inputs(raw)
    mcfg = dataclasses.replace(mcfg, n_classes=label_map.n_classes)
    grid = {}
    if args.theta is not None:
        grid["theta"] = [None if v == "off" else float(v) for v in args.theta.split(",")]
    if args.bin_hours is not None:
        grid["bin_hours"] = ["no_time" if v == "off" else float(v)
                             for v in args.bin_hours.split(",")]
    if args.mode is not None:
        grid["mode"] = args.mode.split(",")
    if args.beta is not None:
        grid["beta"] = [args.beta]
    seed = args.seed if args.seed is not None else tcfg.seeds[0]
    rows = sweep(segments, registry, prep, mcfg, tcfg, grid, seed=seed)
    out = _out_dir(raw, args)
    path = out / "sweep.csv"
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    print(f"{len(rows)} sweep rows -> {path}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="care", description="CARE activity-recognition pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, mode_flags=True):
        p.add_argument("--config", required=True, help="run config JSON")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        if mode_flags:
            p.add_argument("--beta", type=float, default=None)
            p.add_argument("--theta", default=None, help="filter threshold or 'off'")
            p.add_argument("--bin-hours", dest="bin_hours", default=None,
                           help="bin width in hours or 'off' (no time feature)")
            p.add_argument("--mode", default=None,
                           help="cross|within|uni-seq|uni-img")

    common(sub.add_parser("prepare", help="parse, segment, preprocess, cache"))
    common(sub.add_parser("train", help="train and report metrics"))
    common(sub.add_parser("eval", help="evaluate a trained checkpoint"))
    corrupt = sub.add_parser("corrupt-eval", help="evaluate under corruption")
    common(corrupt)
    corrupt.add_argument("--malfunction", default=None, metavar="AxB")
    corrupt.add_argument("--reposition", type=float, default=None, metavar="VAR")
    render = sub.add_parser("render", help="export segment images as PNG")
    common(render, mode_flags=True)
    render.add_argument("--segment", type=int, default=0)
    common(sub.add_parser("sweep", help="grid sweep over preprocessing/objective"))
    return parser


_COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "eval": cmd_eval,
    "corrupt-eval": cmd_corrupt_eval,
    "render": cmd_render,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        raw = load_run_config(args.config)
        return _COMMANDS[args.command](raw, args)
    except CareError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
