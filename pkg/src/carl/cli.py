"""Command-line front end: train, sweep, sanity, shadow, pack.

Exit codes are fixed for scriptability:
  0 success, 1 runtime failure (including shadow skip threshold),
  2 configuration error, 3 checkpoint rejection, 4 sanity-suite failure,
  5 downlink budget exceeded.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys

from . import policy, ppotrain, telbridge, xray
from .fswactions import ACTION_NAMES, MacroAction
from .twinsim import ConfigError, SpacecraftConfig

try:
    import tomllib
except ModuleNotFoundError:  # py310
    import tomli as tomllib

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_CHECKPOINT = 3
EXIT_SANITY = 4
EXIT_BUDGET = 5

KNOWN_SECTIONS = {"spacecraft", "train", "sweep", "shadow", "downlink"}


def load_run_config(path: str) -> dict:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file is not valid TOML: {exc}")
    unknown = set(doc) - KNOWN_SECTIONS
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return doc


def _reject_unknown(section: dict, allowed, label: str):
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in [{label}]: {sorted(unknown)}")


def build_spacecraft(doc: dict) -> SpacecraftConfig:
    return SpacecraftConfig.from_dict(doc.get("spacecraft", {}))


def build_train_config(doc: dict, seed: int | None) -> ppotrain.TrainConfig:
    section = dict(doc.get("train", {}))
    fields = {f.name for f in dataclasses.fields(ppotrain.TrainConfig)}
    _reject_unknown(section, fields, "train")
    if "hardening" in section:
        section["hardening"] = tuple((int(i), float(b), float(w))
                                     for i, b, w in section["hardening"])
    cfg = ppotrain.TrainConfig(**section)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    try:
        return cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc))


def build_sweep_spec(doc: dict, mode: str | None) -> xray.SweepSpec:
    section = dict(doc.get("sweep", {}))
    allowed = {"x_field", "x_min", "x_max", "x_steps",
               "y_field", "y_min", "y_max", "y_steps",
               "background_samples", "mode", "seed"}
    _reject_unknown(section, allowed, "sweep")
    spec = xray.SweepSpec(
        x_axis=xray.AxisSpec(section.get("x_field", "wheel_saturation"),
                             section.get("x_min", 0.0), section.get("x_max", 1.0),
                             int(section.get("x_steps", 50))),
        y_axis=xray.AxisSpec(section.get("y_field", "battery"),
                             section.get("y_min", 0.0), section.get("y_max", 1.0),
                             int(section.get("y_steps", 50))),
        background_samples=int(section.get("background_samples", 32)),
        mode=mode or section.get("mode", "blend"),
        seed=int(section.get("seed", 0)),
    )
    try:
        return spec.validate()
    except ValueError as exc:
        raise ConfigError(str(exc))


def build_bridge_config(doc: dict) -> telbridge.BridgeConfig:
    section = dict(doc.get("shadow", {}))
    allowed = {"format", "rates_are_inertial", "initial_charge_fraction", "mode_map",
               "max_skip_fraction"}
    _reject_unknown(section, allowed, "shadow")
    mode_map = {}
    for mode, action in section.get("mode_map", {}).items():
        try:
            mode_map[mode] = MacroAction[str(action).upper()]
        except KeyError:
            raise ConfigError(f"mode_map action {action!r} is not one of {ACTION_NAMES}")
    cfg = telbridge.BridgeConfig(
        spacecraft=build_spacecraft(doc),
        rates_are_inertial=bool(section.get("rates_are_inertial", False)),
        initial_charge_fraction=float(section.get("initial_charge_fraction", 1.0)),
    )
    if mode_map:
        cfg.mode_map = mode_map
    return cfg


def _load_checkpoint(path: str) -> policy.PolicyParams:
    params, _ = policy.load(path)
    return params


def cmd_train(args) -> int:
    doc = load_run_config(args.config)
    env_config = build_spacecraft(doc)
    train_config = build_train_config(doc, args.seed)
    os.makedirs(args.out, exist_ok=True)

    def progress(entry):
        print(f"iter {entry['iteration']:4d} episodes {entry['episodes_cumulative']:5d} "
              f"mean_reward {entry['mean_episode_reward']:+.4f} "
              f"survival {entry['mean_survival_fraction']:.3f}")

    report = ppotrain.train(env_config, train_config, args.out, progress=progress)
    report_path = os.path.join(args.out, "report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    print(f"checkpoints written: {len(report.checkpoints)}")
    print(f"selected: {report.selected_checkpoint} "
          f"(mean reward {report.selected_mean_reward})")
    print(f"report: {report_path}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    doc = load_run_config(args.config) if args.config else {}
    env_config = build_spacecraft(doc)
    spec = build_sweep_spec(doc, args.mode)
    params = _load_checkpoint(args.checkpoint)
    action_map = xray.sweep(params, spec, env_config)
    ppm, csv_text = xray.render(action_map, spec.mode)
    with open(args.out + ".ppm", "wb") as fh:
        fh.write(ppm)
    with open(args.out + ".csv", "w", encoding="utf-8") as fh:
        fh.write(csv_text)
    print(f"wrote {args.out}.ppm and {args.out}.csv "
          f"({spec.y_axis.steps}x{spec.x_axis.steps} cells, mode {spec.mode})")
    return EXIT_OK


def cmd_sanity(args) -> int:
    doc = load_run_config(args.config) if args.config else {}
    env_config = build_spacecraft(doc)
    params = _load_checkpoint(args.checkpoint)
    scenarios = xray.builtin_scenarios(env_config)
    backgrounds = xray.collect_backgrounds(env_config, params, n=24, seed=args.seed,
                                           sunlit_only=True)
    results = xray.sanity_suite(params, scenarios, backgrounds)
    all_passed = True
    for res in results:
        probs = ", ".join(f"{name}={p:.3f}" for name, p in zip(ACTION_NAMES, res.probabilities))
        verdict = "PASS" if res.passed else "FAIL"
        print(f"{verdict} {res.name}: top={ACTION_NAMES[res.top_action]} ({probs}) "
              f"expected={ACTION_NAMES[res.expected]} with p>{0.5}")
        all_passed &= res.passed
    return EXIT_OK if all_passed else EXIT_SANITY


def cmd_shadow(args) -> int:
    doc = load_run_config(args.config)
    bridge = build_bridge_config(doc)
    params = _load_checkpoint(args.checkpoint)
    fmt = args.format or doc.get("shadow", {}).get("format", "json_lines")
    # Parse tolerantly: a malformed line is a skip, never a crash.
    records = []
    parse_skips = 0
    header = None
    try:
        with open(args.telemetry, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                if fmt == "csv_with_header" and header is None:
                    header = next(csv.reader([line]))
                    continue
                try:
                    records.append(telbridge.parse_telemetry(line, fmt, header=header))
                except ValueError:
                    parse_skips += 1
    except FileNotFoundError:
        raise ConfigError(f"telemetry file not found: {args.telemetry}")
    report = telbridge.shadow_run(records, params, bridge, drop_dir=args.drop_dir)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            for entry in report.entries:
                fh.write(json.dumps(entry.to_dict(), sort_keys=True) + "\n")
    skips = parse_skips + len(report.skipped)
    total = len(report.entries) + skips
    rate = "n/a" if report.agreement_rate is None else f"{report.agreement_rate:.4f}"
    print(f"processed {total} records: {len(report.entries)} logged, "
          f"{skips} skipped, agreement {rate}")
    if total and skips / total > args.max_skip_fraction:
        print(f"skip fraction {skips / total:.3f} exceeds "
              f"--max-skip-fraction {args.max_skip_fraction}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_pack(args) -> int:
    doc = load_run_config(args.config) if args.config else {}
    section = doc.get("downlink", {})
    _reject_unknown(section, {"whitelist", "budget"}, "downlink")
    whitelist = (args.whitelist.split(",") if args.whitelist
                 else list(section.get("whitelist", [])))
    if not whitelist:
        raise ConfigError("no downlink whitelist given (--whitelist or [downlink])")
    budget = args.budget if args.budget is not None else section.get("budget")
    if budget is None:
        raise ConfigError("no downlink budget given (--budget or [downlink])")
    try:
        with open(args.infile, "r", encoding="utf-8") as fh:
            entries = [json.loads(line) for line in fh if line.strip()]
    except FileNotFoundError:
        raise ConfigError(f"input file not found: {args.infile}")
    packet = telbridge.pack_downlink(entries, whitelist, int(budget))
    with open(args.out, "wb") as fh:
        fh.write(packet)
    print(f"packed {len(entries)} entries into {len(packet)} bytes "
          f"(budget {budget})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="carl",
                                     description="CubeSat survival twin: train, "
                                                 "inspect, and shadow a macro-action policy")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a policy on the twin")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--out", required=True)
    p_train.set_defaults(func=cmd_train)

    p_sweep = sub.add_parser("sweep", help="grid-sweep a checkpoint into PPM+CSV")
    p_sweep.add_argument("--config", default=None)
    p_sweep.add_argument("--checkpoint", required=True)
    p_sweep.add_argument("--mode", choices=xray.RENDER_MODES, default=None)
    p_sweep.add_argument("--out", required=True, help="output path prefix")
    p_sweep.set_defaults(func=cmd_sweep)

    p_sanity = sub.add_parser("sanity", help="run the built-in sanity scenarios")
    p_sanity.add_argument("--checkpoint", required=True)
    p_sanity.add_argument("--config", default=None)
    p_sanity.add_argument("--seed", type=int, default=0)
    p_sanity.set_defaults(func=cmd_sanity)

    p_shadow = sub.add_parser("shadow", help="shadow-infer over a telemetry file")
    p_shadow.add_argument("--config", required=True)
    p_shadow.add_argument("--checkpoint", required=True)
    p_shadow.add_argument("--telemetry", required=True)
    p_shadow.add_argument("--format", choices=telbridge.FORMATS, default=None)
    p_shadow.add_argument("--out", default=None)
    p_shadow.add_argument("--max-skip-fraction", type=float, default=0.5)
    p_shadow.add_argument("--drop-dir", default=None)
    p_shadow.set_defaults(func=cmd_shadow)

    p_pack = sub.add_parser("pack", help="whitelist, compress, and frame a shadow log")
    p_pack.add_argument("--in", dest="infile", required=True)
    p_pack.add_argument("--whitelist", default=None, help="comma-separated field names")
    p_pack.add_argument("--budget", type=int, default=None)
    p_pack.add_argument("--out", required=True)
    p_pack.add_argument("--config", default=None)
    p_pack.set_defaults(func=cmd_pack)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except policy.CheckpointError as exc:
        print(f"checkpoint rejected: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except telbridge.BudgetError as exc:
        print(f"budget exceeded: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (telbridge.IntegrityError, ValueError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
