"""Command-line entry point.

Subcommands: gen-scene, ba, drift, cov-ablation, voma, jacobian-check.
Exit codes: 0 success, 1 experiment failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ConfigError, PointlineError
from .harness import (
    parse_config,
    generate_scene,
    reports_to_csv,
    reports_to_json,
    run_ba_experiment,
    run_covariance_ablation,
    run_drift_experiment,
    run_jacobian_check,
    run_voma_pipeline,
)
from .voma import export_csv, export_ply


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", type=str, default=None, help="key=value config file")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", type=str, default="out", help="output directory")
    parser.add_argument("--format", choices=("csv", "json"), default="csv")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pointline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("gen-scene", "generate a synthetic scene and write the serialized map"),
        ("ba", "run full bundle adjustment on a synthetic scene"),
        ("drift", "compare line BA with and without backprojection terms"),
        ("cov-ablation", "compare point covariance treatments"),
        ("voma", "run the volumetric mapping pipeline"),
        ("jacobian-check", "verify analytic Jacobians against finite differences"),
    ):
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        if name == "jacobian-check":
            p.add_argument("--trials", type=int, default=1000)
    return parser


def _write_reports(out: Path, reports, fmt: str, stem: str = "metrics"):
    if fmt == "json":
        (out / f"{stem}.json").write_text(reports_to_json(reports))
    else:
        (out / f"{stem}.csv").write_text(reports_to_csv(reports))
    for rep in reports:
        if rep.iteration_report is not None:
            (out / f"iterations_{rep.label}.csv").write_text(rep.iteration_report.to_csv())


def _write_rows(out: Path, rows: list[dict], fmt: str, stem: str):
    if fmt == "json":
        (out / f"{stem}.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
        return
    if not rows:
        (out / f"{stem}.csv").write_text("")
        return
    header = list(rows[0].keys())
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(f"{row[k]:.9g}" if isinstance(row[k], float) else str(row[k]) for k in header))
    (out / f"{stem}.csv").write_text("\n".join(lines) + "\n")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config, overrides={"seed": args.seed})
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        if args.command == "gen-scene":
            truth, smap = generate_scene(cfg)
            (out / "scene.map").write_text(smap.to_text())
            summary = {
                "keyframes": len(smap.keyframes),
                "points": len(smap.points),
                "lines": len(smap.lines),
                "point_observations": sum(len(k.point_obs) for k in smap.keyframes.values()),
                "line_observations": sum(len(k.line_obs) for k in smap.keyframes.values()),
            }
            _write_rows(out, [summary], args.format, "scene_summary")
            print(f"scene written to {out / 'scene.map'}")
        elif args.command == "ba":
            report, _, _, _ = run_ba_experiment(cfg)
            _write_reports(out, [report], args.format)
            print(reports_to_csv([report]), end="")
        elif args.command == "drift":
            rep_2d, rep_full = run_drift_experiment(cfg)
            _write_reports(out, [rep_2d, rep_full], args.format)
            print(reports_to_csv([rep_2d, rep_full]), end="")
        elif args.command == "cov-ablation":
            reports = run_covariance_ablation(cfg)
            _write_reports(out, reports, args.format)
            print(reports_to_csv(reports), end="")
        elif args.command == "voma":
            integrity, cloud = run_voma_pipeline(cfg)
            (out / "cloud.ply").write_text(export_ply(cloud))
            (out / "cloud.csv").write_text(export_csv(cloud))
            _write_rows(out, [integrity.row()], args.format, "voma_integrity")
            print(json.dumps(integrity.row(), indent=2, sort_keys=True))
            ok = (
                integrity.rebuild_equals_fresh
                and integrity.batch_independent
                and integrity.rebuild_identity_no_change
            )
            if not ok:
                print("voma integrity check failed", file=sys.stderr)
                return 1
        elif args.command == "jacobian-check":
            rows = run_jacobian_check(trials=args.trials, seed=cfg.seed)
            _write_rows(out, rows, args.format, "jacobian_check")
            for row in rows:
                status = "ok" if row["failures"] == 0 else "FAIL"
                print(
                    f"{row['family']:>14}: max rel err {row['max_rel_err']:.3e} "
                    f"({row['trials']} trials) {status}"
                )
            if any(row["failures"] for row in rows):
                return 1
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except PointlineError as e:
        print(f"experiment failed: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
