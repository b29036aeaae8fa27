"""Command line entry point: ``tempcon <subcommand> [options] [key=value ...]``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import yaml

from . import __version__

log = logging.getLogger("tempcon")

SECTIONS = ("synth", "train")


class ConfigError(ValueError):
    pass


def _section_classes():
    from .datasets import SynthConfig
    from .training import TrainingConfig

    return {"synth": SynthConfig, "train": TrainingConfig}


def default_config() -> dict:
    return {name: asdict(cls()) for name, cls in _section_classes().items()}


def load_config(path: str | None, overrides: list[str], default_section: str | None) -> dict:
    """Merge defaults, an optional YAML/JSON file and ``key=value`` overrides."""
    cfg = default_config()
    if path:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a mapping")
        for section, values in data.items():
            if section not in cfg:
                raise ConfigError(f"unknown config section {section!r}")
            for key, value in (values or {}).items():
                _set(cfg, section, key, value)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        if "." in key:
            section, key = key.split(".", 1)
        elif default_section:
            section = default_section
        else:
            raise ConfigError(f"override {item!r} needs a section prefix such as train.{key}")
        _set(cfg, section, key, yaml.safe_load(raw))
    # validate by constructing
    for section, cls in _section_classes().items():
        try:
            cls(**cfg[section])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {section} config: {exc}") from exc
    return cfg


def _set(cfg: dict, section: str, key: str, value):
    if section not in cfg:
        raise ConfigError(f"unknown config section {section!r}")
    if key not in cfg[section]:
        raise ConfigError(f"unknown config key {section}.{key}")
    default = cfg[section][key]
    if isinstance(default, bool) and not isinstance(value, bool):
        raise ConfigError(f"{section}.{key} expects true/false, got {value!r}")
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if isinstance(default, int) and not isinstance(default, bool) and isinstance(value, float):
        if not value.is_integer():
            raise ConfigError(f"{section}.{key} expects an integer, got {value!r}")
        value = int(value)
    cfg[section][key] = value


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def _stamp(out_dir: Path, command: str, cfg: dict, seed: int, extra: dict | None = None) -> dict:
    stamp = {"command": command, "version": __version__, "config_hash": config_hash(cfg), "seed": seed,
             "config": cfg, **(extra or {})}
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run.json").write_text(json.dumps(stamp, indent=2, sort_keys=True) + "\n")
    return stamp


# --- subcommands ---------------------------------------------------------------

def cmd_synth(args, cfg):
    from .datasets import SynthConfig, make_flicker_dataset, write_dataset

    scfg = SynthConfig(**cfg["synth"])
    videos = make_flicker_dataset(scfg)
    out = Path(args.out)
    stamp = {"config_hash": config_hash(cfg), "seed": scfg.seed, "synth_config": cfg["synth"]}
    manifest = write_dataset(videos, out, scfg.flow_span, extra=stamp)
    _stamp(out, "synth", cfg, scfg.seed)
    print(manifest)


def cmd_train(args, cfg):
    import torch

    from .datasets import load_manifest
    from .training import TrainingConfig, train

    torch.set_num_threads(1)
    tcfg = TrainingConfig(**cfg["train"])
    samples = load_manifest(args.data, tcfg.flow_backend)
    out = Path(args.out)
    _stamp(out, "train", cfg, tcfg.seed, {"data": str(args.data)})

    def progress(it, c):
        if it % args.log_every == 0 or it == tcfg.iterations:
            log.info("iter %d: L_p=%.5g L_st=%.5g L_lt=%.5g total=%.5g", it, c.l_p, c.l_st, c.l_lt, c.total)

    train(tcfg, samples, checkpoint_dir=out / "checkpoints", resume=args.resume, log_path=out / "train_log.jsonl",
          callback=progress)
    print(out / "checkpoints" / "latest.pt")


def cmd_process(args, cfg):
    import torch

    from .network import load_params
    from .training import run_model
    from .video_data import load_frame_sequence, save_frame_sequence

    torch.set_num_threads(1)
    model = load_params(args.checkpoint)
    inputs = load_frame_sequence(args.input, args.pattern)
    processed = load_frame_sequence(args.processed, args.pattern)
    out = run_model(model, inputs, processed)
    save_frame_sequence(out, args.out, args.pattern)
    _stamp(Path(args.out), "process", cfg, model.cfg.seed, {"checkpoint": str(args.checkpoint)})
    print(args.out)


def _eval_provider(args, cfg):
    from .datasets import provider_from_entry
    from .flow import EstimatedFlowProvider, FileFlowProvider

    if args.flow_dir:
        return FileFlowProvider(args.flow_dir)
    if args.data:
        manifest_path = Path(args.data)
        manifest = json.loads(manifest_path.read_text())
        for entry in manifest["sequences"]:
            if entry["name"] == args.sequence:
                return provider_from_entry(entry, manifest_path.parent)
        raise ConfigError(f"sequence {args.sequence!r} not in {args.data}")
    return EstimatedFlowProvider()


def cmd_eval(args, cfg):
    import torch

    from .evaluation import evaluate
    from .training import TrainingConfig
    from .video_data import load_frame_sequence, save_report

    torch.set_num_threads(1)
    tcfg = TrainingConfig(**cfg["train"])
    outputs = load_frame_sequence(args.output, args.pattern)
    processed = load_frame_sequence(args.processed, args.pattern)
    flow_source = load_frame_sequence(args.input, args.pattern) if args.input else None
    provider = _eval_provider(args, cfg)
    report = evaluate(outputs, processed, provider, tcfg.make_metric(), flow_source=flow_source,
                      sequence_id=args.sequence or Path(args.output).name)
    report.metadata.update({"config_hash": config_hash(cfg), "seed": tcfg.seed})
    txt, _ = save_report(report, args.report)
    print(f"E_warp={report.e_warp:.6g} D_perceptual={report.d_perceptual:.6g} -> {txt}")


def _parse_pairs(text: str) -> tuple[tuple[float, float], ...]:
    try:
        pairs = tuple(tuple(float(x) for x in p.split(":")) for p in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad --pairs {text!r}: expected lambda_t:lambda_p,...") from exc
    if any(len(p) != 2 for p in pairs):
        raise ConfigError(f"bad --pairs {text!r}: expected lambda_t:lambda_p,...")
    return pairs


def write_sweep_table(rows: list[dict], path: Path) -> None:
    lines = [f"{'lambda_t':>9} {'lambda_p':>9} {'r':>8} {'E_warp':>12} {'D_perceptual':>13}"]
    for r in rows:
        lines.append(f"{r['lambda_t']:>9g} {r['lambda_p']:>9g} {r['r']:>8g} {r['e_warp']:>12.6f} {r['d_perceptual']:>13.6f}")
    path.write_text("\n".join(lines) + "\n")


def cmd_sweep(args, cfg):
    import torch

    from .datasets import load_manifest
    from .evaluation import plot_tradeoff
    from .training import SweepSpec, TrainingConfig, run_sweep

    torch.set_num_threads(1)
    tcfg = TrainingConfig(**cfg["train"])
    try:
        spec = SweepSpec(_parse_pairs(args.pairs), tcfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    train_set = load_manifest(args.data, tcfg.flow_backend)
    eval_set = load_manifest(args.eval_data or args.data, tcfg.flow_backend)
    out = Path(args.out)
    stamp = _stamp(out, "sweep", cfg, tcfg.seed, {"pairs": spec.pairs})
    rows = run_sweep(spec, train_set, eval_set, progress=log.info)
    (out / "sweep.json").write_text(json.dumps({"rows": rows, "config_hash": stamp["config_hash"],
                                                "seed": tcfg.seed}, indent=2) + "\n")
    write_sweep_table(rows, out / "sweep.txt")
    if not args.no_plot:
        plot_tradeoff(rows, out / "tradeoff.png")
    print((out / "sweep.txt").read_text(), end="")


def cmd_report(args, cfg):
    from .evaluation import plot_tradeoff
    from .video_data import load_report_dict

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.sweep:
        rows = json.loads(Path(args.sweep).read_text())["rows"]
        write_sweep_table(rows, out / "sweep.txt")
        if not args.no_plot:
            plot_tradeoff(rows, out / "tradeoff.png")
        print((out / "sweep.txt").read_text(), end="")
    if args.reports:
        ds = [load_report_dict(p) for p in args.reports]
        lines = [f"{'sequence':<20} {'frames':>6} {'E_warp':>12} {'D_perceptual':>13}"]
        for d in ds:
            meta = d.get("metadata", {})
            lines.append(f"{str(meta.get('sequence_id', '?')):<20} {len(d['pair_errors']) + 1:>6} "
                         f"{d['e_warp']:>12.6f} {d['d_perceptual']:>13.6f}")
        e = sum(d["e_warp"] for d in ds) / len(ds)
        dp = sum(d["d_perceptual"] for d in ds) / len(ds)
        lines.append(f"{'mean':<20} {'':>6} {e:>12.6f} {dp:>13.6f}")
        (out / "summary.txt").write_text("\n".join(lines) + "\n")
        print("\n".join(lines))
    if not args.sweep and not args.reports:
        raise ConfigError("report needs --sweep and/or --reports")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tempcon", description="Blind video temporal consistency")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML/JSON config file")
        sp.add_argument("--dump-config", action="store_true", help="print the effective config and exit")
        sp.add_argument("overrides", nargs="*", metavar="KEY=VALUE")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    sp = common(sub.add_parser("synth", help="generate a synthetic flicker dataset"))
    sp.add_argument("--out", required=False)

    sp = common(sub.add_parser("train", help="train a model on a dataset manifest"))
    sp.add_argument("--data")
    sp.add_argument("--out")
    sp.add_argument("--resume")
    sp.add_argument("--log-every", type=int, default=50)

    sp = common(sub.add_parser("process", help="stabilize a processed video"))
    sp.add_argument("--input")
    sp.add_argument("--processed")
    sp.add_argument("--checkpoint")
    sp.add_argument("--out")
    sp.add_argument("--pattern", default="%05d.png")

    sp = common(sub.add_parser("eval", help="compute E_warp and D_perceptual"))
    sp.add_argument("--output")
    sp.add_argument("--processed")
    sp.add_argument("--input", help="original frames used for flow (defaults to --output)")
    sp.add_argument("--flow-dir")
    sp.add_argument("--data", help="manifest holding the sequence's flow description")
    sp.add_argument("--sequence")
    sp.add_argument("--report")
    sp.add_argument("--pattern", default="%05d.png")

    sp = common(sub.add_parser("sweep", help="train/evaluate over (lambda_t, lambda_p) pairs"))
    sp.add_argument("--data")
    sp.add_argument("--eval-data")
    sp.add_argument("--out")
    sp.add_argument("--pairs", default="100:100,100:10,100:1")
    sp.add_argument("--no-plot", action="store_true")

    sp = common(sub.add_parser("report", help="render tables/plots from earlier outputs"))
    sp.add_argument("--sweep")
    sp.add_argument("--reports", nargs="*")
    sp.add_argument("--out")
    sp.add_argument("--no-plot", action="store_true")
    return p


_REQUIRED = {
    "synth": ("out",),
    "train": ("data", "out"),
    "process": ("input", "processed", "checkpoint", "out"),
    "eval": ("output", "processed", "report"),
    "sweep": ("data", "out"),
    "report": ("out",),
}

_COMMANDS = {"synth": cmd_synth, "train": cmd_train, "process": cmd_process, "eval": cmd_eval,
             "sweep": cmd_sweep, "report": cmd_report}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(message)s")
    section = args.command if args.command in SECTIONS else "train"
    try:
        cfg = load_config(args.config, args.overrides, section)
        if args.dump_config:
            print(yaml.safe_dump(cfg, sort_keys=False), end="")
            return 0
        missing = [f"--{k.replace('_', '-')}" for k in _REQUIRED[args.command] if not getattr(args, k)]
        if missing:
            raise ConfigError(f"{args.command} requires {', '.join(missing)}")
        if args.command == "eval" and args.data and not args.sequence:
            raise ConfigError("eval --data also needs --sequence")
        _COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())
