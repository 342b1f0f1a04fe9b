"""Command-line entry point: pretrain, stream-gen, adapt, ablate, report, selftest."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .config import ConfigError

log = logging.getLogger("mtta")

EXIT_USAGE = 2
EXIT_FAILURE = 1


class UsageError(Exception):
    pass


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_sets(items: list[str]) -> dict:
    """``section.key=value`` pairs into a nested override dict (values parsed as JSON when possible)."""
    out: dict = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_value(value)
    return out


def _deep_update(base: dict, extra: dict) -> dict:
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v
    return base


def resolve_config(args) -> config_mod.RunConfig:
    overrides = {"seed": args.seed, "threads": args.threads}
    suite = {k: v for k, v in (("n_persons", getattr(args, "persons", None)),
                               ("minutes", getattr(args, "minutes", None)),
                               ("shift", getattr(args, "shift", None))) if v is not None}
    if suite:
        overrides["suite"] = suite
    overrides = {k: v for k, v in overrides.items() if v is not None}
    _deep_update(overrides, parse_sets(args.set))
    return config_mod.load(args.config, overrides)


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(cfg, out: Path) -> None:
    config_mod.dump(cfg, out / "config.json")


def _load_pretrained(args):
    from .adapt import Pretrained
    from .networks import load_motion_model, load_pose_estimator
    f = load_pose_estimator(args.f_model)
    m, cb = load_motion_model(args.m_model)
    return Pretrained(f, m, cb)


# -- subcommands -------------------------------------------------------------------

def cmd_pretrain(args, cfg) -> int:
    from .networks import save_motion_model, save_pose_estimator
    from .pretrain import pretrain
    out = _out_dir(args, "artifacts")
    _echo_config(cfg, out)
    result = pretrain(cfg.pretrain, np.random.default_rng(cfg.seed))
    save_pose_estimator(out / "f_pre.mtta", result.f)
    save_motion_model(out / "m_pre.mtta", result.m, result.codebook)
    (out / "pretrain_report.json").write_text(json.dumps(result.report, indent=2, sort_keys=True) + "\n")
    f, m = result.report["f"], result.report["m"]
    print(f"F source MPJPE {f['source_mpjpe_mm']:.2f} mm; M reconstruction {m['recon_error']:.4f} "
          f"vs input {m['input_error']:.4f}; codebook utilization {m['utilization']:.2f}")
    return 0


def cmd_stream_gen(args, cfg) -> int:
    from .evaluation import suite_profiles
    from .stream import batch_filename, preset, stream_person, write_batch
    out = _out_dir(args, "streams")
    _echo_config(cfg, out)
    shift = preset(cfg.suite.shift)
    count = 0
    for p in suite_profiles(cfg.suite):
        for batch in stream_person(p, shift, cfg.suite.minutes, np.random.default_rng([cfg.seed, p.person_id, 0])):
            write_batch(out / batch_filename(batch.person_id, batch.index), batch, include_gt=not args.no_gt)
            count += 1
    print(f"wrote {count} batches for {cfg.suite.n_persons} persons to {out}")
    return 0


def cmd_adapt(args, cfg) -> int:
    from .adapt import adapt_streams, score
    from .evaluation import write_telemetry
    from .kinematics import Skeleton
    from .stream import has_ground_truth, list_batches, read_ground_truth, read_observations, write_predictions
    out = _out_dir(args, "adapt_out")
    _echo_config(cfg, out)
    files = list_batches(args.stream_dir)
    if not files:
        raise UsageError(f"--stream-dir {args.stream_dir} holds no batch files")
    if len({len(v) for v in files.values()}) != 1:
        raise UsageError("every person in --stream-dir must have the same number of batches")
    pre = _load_pretrained(args)
    streams = [(read_observations(p) for p in paths) for paths in files.values()]
    predictions = []

    def collect(batches, result):
        for e, b in enumerate(batches):
            predictions.append((b.person_id, b.index, result.theta[e], result.beta[e], result.psi[e]))

    rows = adapt_streams(pre, streams, cfg.adapt, np.random.default_rng([cfg.seed, 1]), on_result=collect)
    # evaluation side: ground truth is read only here, after adaptation produced its predictions
    paths = {(pid, i): p for pid, ps in files.items() for i, p in enumerate(ps)}
    pred_by_key = {(pid, idx): (th, be, ps) for pid, idx, th, be, ps in predictions}
    skel = Skeleton()
    for row in rows:
        key = (row["person_id"], row["batch_idx"])
        if has_ground_truth(paths[key]):
            row["mpjpe_mm"], row["mpjpe_pa_mm"] = score(*pred_by_key[key], read_ground_truth(paths[key]), skel)
    predictions.sort(key=lambda r: (r[0], r[1]))
    write_predictions(out / "predictions.bin", predictions)
    write_telemetry(out / "telemetry.csv", rows)
    print(f"adapted {len(files)} persons x {len(rows) // len(files)} batches; telemetry in {out / 'telemetry.csv'}")
    return 0


def _grid_cells(args):
    from .evaluation import AXES, GRIDS, cartesian
    if args.axis:
        axes = {}
        for item in args.axis:
            name, sep, values = item.partition("=")
            if name not in AXES:
                raise UsageError(f"unknown --axis {name!r}; known: {', '.join(sorted(AXES))}")
            axes[name] = [_parse_value(v) for v in values.split(",")] if sep and values else list(AXES[name][0])
        return cartesian(axes)
    if args.grid not in GRIDS:
        raise UsageError(f"unknown --grid {args.grid!r}; known: {', '.join(GRIDS)}")
    return GRIDS[args.grid]


def cmd_ablate(args, cfg) -> int:
    from .evaluation import ablation_grid, load_grid, report, save_grid
    cells = _grid_cells(args)
    out = _out_dir(args, "ablation")
    _echo_config(cfg, out)
    pre = _load_pretrained(args)
    seeds = [cfg.seed + i for i in range(args.seeds)]
    telemetry = ablation_grid(pre, cfg, cells, seeds, threads=cfg.threads,
                              on_done=lambda c, s: log.info("finished %s seed %d", c, s))
    save_grid(out, telemetry, cells, cfg)
    telemetry, index = load_grid(out)
    print(report(telemetry, out, suite=index["suite"]))
    return 0


def cmd_report(args, cfg) -> int:
    from .evaluation import load_grid, read_telemetry, report
    src = Path(args.input)
    if (src / "grid.json").exists():
        telemetry, index = load_grid(src)
        suite = index["suite"]
    elif (src / "telemetry.csv").exists():
        # a single adapt run: one cell, no baseline
        telemetry, suite = {("adapt", cfg.seed): read_telemetry(src / "telemetry.csv")}, None
    else:
        raise UsageError(f"--in {src} holds neither an ablation (grid.json) nor an adapt run (telemetry.csv)")
    out = _out_dir(args, str(src))
    _echo_config(cfg, out)
    print(report(telemetry, out, suite=suite))
    return 0


def cmd_selftest(args, cfg) -> int:
    from . import selftest
    if args.out:
        _echo_config(cfg, _out_dir(args, "."))
    return 0 if selftest.run(cfg.seed) else EXIT_FAILURE


# -- parser -------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="global seed (default 42)")
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, default=None, help="parallel ablation workers")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field, e.g. adapt.mu_f=0.9 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    suite = argparse.ArgumentParser(add_help=False)
    suite.add_argument("--persons", type=int, help="number of test persons")
    suite.add_argument("--minutes", type=float, help="stream length per person")
    suite.add_argument("--shift", help="domain shift preset: standard or corrupted")

    models = argparse.ArgumentParser(add_help=False)
    models.add_argument("--f-model", required=True, help="pre-trained pose estimator file")
    models.add_argument("--m-model", required=True, help="pre-trained motion model file (codebook embedded)")

    p = _Parser(prog="mtta", description="Online test-time adaptation for 3D pose with motion discretization")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("pretrain", parents=[common], help="pre-train F and M on the source domain")
    g = sub.add_parser("stream-gen", parents=[common, suite], help="write the test suite as batch files")
    g.add_argument("--no-gt", action="store_true", help="omit the ground-truth section")
    a = sub.add_parser("adapt", parents=[common, models], help="adapt on a stream directory")
    a.add_argument("--stream-dir", required=True)
    b = sub.add_parser("ablate", parents=[common, suite, models], help="run an ablation grid")
    b.add_argument("--grid", default="components", help="named grid (components, decay, losses, depth, "
                                                        "continuous, m_reset, replay)")
    b.add_argument("--axis", action="append", metavar="NAME[=V1,V2]", help="cartesian axis instead of --grid")
    b.add_argument("--seeds", type=int, default=5)
    r = sub.add_parser("report", parents=[common], help="render the report of an ablation directory")
    r.add_argument("--in", dest="input", required=True)
    sub.add_parser("selftest", parents=[common], help="run the invariant suites")
    return p


COMMANDS = {"pretrain": cmd_pretrain, "stream-gen": cmd_stream_gen, "adapt": cmd_adapt, "ablate": cmd_ablate,
            "report": cmd_report, "selftest": cmd_selftest}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as e:
        parser.print_usage(sys.stderr)
        print(f"mtta: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        print(f"mtta: {args.command} failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
