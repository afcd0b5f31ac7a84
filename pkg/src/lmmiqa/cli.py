"""Command line front end: ``lmmiqa <subcommand>``.

Exit statuses: 0 success, 1 fatal error, 2 configuration error, 3 run finished
with failed records.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import __version__
from .dataset import Dataset, ImageError, ManifestError, load_image, load_manifest, write_manifest
from .gateway import MOCK_BACKEND, AuthFailure, BackendConfig, Gateway, GatewayError, parse_region
from .metrics import MetricError, evaluate
from .noise import EstimatorConfig, ImageTooSmall, estimate_noise, summarize_noise
from .orchestrator import STRATEGIES, ConfigError, RunConfig, config_fingerprint, read_predictions, run_strategy
from .prompts import PromptConfig, build_region_query
from .report import RunSummary, write_figures, write_tables

log = logging.getLogger("lmmiqa")

EXIT_OK, EXIT_FATAL, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2, 3

RUN_KEYS = {
    "manifest", "backend", "strategy", "k", "seed", "warmup_count", "buffer_cap", "resample_per_step",
    "interleave_every", "limit", "out_dir", "cache_dir", "run_id", "template_version", "template_dir",
}


def resolve_backend(source) -> BackendConfig:
    """``"mock"``, a path to a backend JSON file, or an inline dict."""
    if source is None or source == "mock":
        return MOCK_BACKEND
    if isinstance(source, BackendConfig):
        return source
    if isinstance(source, dict):
        return BackendConfig.from_dict(source)
    path = Path(source)
    if not path.exists():
        raise ConfigError(f"backend {source!r} is neither 'mock' nor an existing JSON file")
    try:
        return BackendConfig.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: invalid backend config ({exc})") from exc


def build_run_config(args) -> RunConfig:
    values = {}
    if args.config:
        try:
            values = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError(f"{args.config}: expected a JSON object")
        unknown = set(values) - RUN_KEYS
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        # null in the file means "use the default"
        values = {k: v for k, v in values.items() if v is not None}
    for key in RUN_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag

    template_dir = values.pop("template_dir", None)
    prompt_cfg = PromptConfig(
        template_version=values.pop("template_version", "v1"),
        template_dir=Path(template_dir) if template_dir else None,
    )
    try:
        values["backend"] = resolve_backend(values.get("backend"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if not values.get("manifest"):
        raise ConfigError("no manifest given (positional argument or 'manifest' in the config file)")
    try:
        cfg = RunConfig(prompt=prompt_cfg, **values)
        cfg.validate()
    except TypeError as exc:
        raise ConfigError(f"invalid run configuration ({exc})") from exc
    return cfg


def _load(path) -> Dataset:
    return load_manifest(path)


def cmd_ingest_check(args) -> int:
    try:
        ds = _load(args.manifest)
    except (OSError, ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    bad = 0
    for r in ds.records:
        try:
            load_image(r, ds.root)
        except ImageError as exc:
            print(f"error: {r.id}: {exc}", file=sys.stderr)
            bad += 1
    n_train, n_test = ds.counts()
    unscored = sum(r.score is None for r in ds.test)
    tagged = sum(bool(r.region) for r in ds.records)
    noised = sum(r.noise is not None for r in ds.records)
    print(f"train: {n_train}  test: {n_test}  unscored test: {unscored}")
    print(f"region labels: {tagged}/{len(ds.records)}  noise values: {noised}/{len(ds.records)}")
    if bad:
        print(f"{bad} image(s) failed to decode", file=sys.stderr)
        return EXIT_FATAL
    return EXIT_OK


def _rebase(ds: Dataset, out_manifest: Path) -> Dataset:
    """Keep relative image paths valid when the manifest is written elsewhere."""
    new_root = out_manifest.resolve().parent
    if new_root == ds.root.resolve():
        return ds
    records = []
    for r in ds.records:
        p = Path(r.path)
        if not p.is_absolute():
            p = Path(os.path.relpath((ds.root / p).resolve(), new_root))
        records.append(replace(r, path=p.as_posix()))
    return Dataset(tuple(records), new_root)


def cmd_estimate_noise(args) -> int:
    try:
        ds = _load(args.manifest)
    except (OSError, ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    populated = sum(r.noise is not None for r in ds.records)
    if populated:
        print(f"warning: overwriting {populated} existing noise value(s)", file=sys.stderr)
    cfg = EstimatorConfig(patch_size=args.patch_size)
    records = []
    for r in ds.records:
        try:
            estimate = estimate_noise(load_image(r, ds.root), cfg)
        except (ImageError, ImageTooSmall) as exc:
            print(f"error: {ds.resolve(r)}: {exc}", file=sys.stderr)
            return EXIT_FATAL
        records.append(replace(r, noise=summarize_noise(estimate, args.decimals)))
        log.info("%s: a=%.3g b=%.3g sigma_ref=%.4f", r.id, estimate.a, estimate.b, estimate.sigma_ref)
    out = Path(args.out_manifest)
    write_manifest(_rebase(ds.with_records(records), out), out)
    print(f"wrote noise for {len(records)} record(s) to {out}")
    return EXIT_OK


def cmd_tag_regions(args) -> int:
    try:
        ds = _load(args.manifest)
        backend = resolve_backend(args.backend)
    except (OSError, ManifestError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    prompt_cfg = PromptConfig(region_vocabulary=tuple(args.labels.split(","))) if args.labels else PromptConfig()
    failed, unknown = [], 0
    records = []
    with Gateway(backend, args.cache_dir, seed=args.seed) as gw:
        for r in ds.records:
            try:
                completion = gw.complete(build_region_query(load_image(r, ds.root), prompt_cfg))
            except AuthFailure as exc:
                print(f"error: {exc}", file=sys.stderr)
                return EXIT_FATAL
            except (GatewayError, ImageError) as exc:
                print(f"warning: {r.id}: {exc}", file=sys.stderr)
                failed.append(r.id)
                records.append(r)
                continue
            label = parse_region(completion.text, prompt_cfg.region_vocabulary)
            if label is None:
                unknown += 1
                label = "unknown"
            records.append(replace(r, region=label))
    out = Path(args.out_manifest)
    write_manifest(_rebase(ds.with_records(records), out), out)
    print(f"tagged {len(records) - len(failed)} record(s); {unknown} unparseable -> unknown; {len(failed)} failed")
    if ds.records and len(failed) > 0.1 * len(ds.records):
        print("error: more than 10% of records failed", file=sys.stderr)
        return EXIT_FATAL
    return EXIT_OK


def _metric_report(ds: Dataset, ids, scores):
    by_id = ds.by_id()
    truth = [by_id[i].score for i in ids]
    if any(t is None for t in truth):
        return None
    try:
        return evaluate(truth, scores)
    except MetricError as exc:
        log.warning("metrics unavailable: %s", exc)
        return None


def cmd_run(args) -> int:
    try:
        cfg = build_run_config(args)
        ds = _load(cfg.manifest)
    except (ConfigError, ManifestError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    fingerprint = config_fingerprint(cfg, ds)
    run_id = cfg.run_id or f"{cfg.strategy}-{fingerprint[:12]}"
    run_dir = Path(cfg.out_dir) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    started = time.monotonic()
    try:
        with Gateway(cfg.backend, cfg.cache_dir, seed=cfg.seed) as gw:
            result = run_strategy(
                cfg.strategy, ds, cfg.backend, cfg, gateway=gw,
                out_path=run_dir / "predictions.jsonl",
                feedback_path=run_dir / "feedback.jsonl" if cfg.strategy == "feedback" else None,
            )
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GatewayError, OSError, ValueError) as exc:
        print(f"fatal: {exc}", file=sys.stderr)
        return EXIT_FATAL

    report = _metric_report(ds, [p.id for p in result.predictions], [p.y_hat for p in result.predictions])
    summary = RunSummary(
        cfg.strategy, cfg.backend.model_name, report, len(result.failures), len(result.predictions),
        result.cache_hit_rate, round(time.monotonic() - started, 3),
    )
    doc = summary.to_dict()
    doc["run_id"] = run_id
    doc["config_fingerprint"] = result.config_fingerprint
    doc["failed_ids"] = [rid for rid, _ in result.failures]
    (run_dir / "summary.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")

    print(f"run {run_id}: {summary.scored}/{summary.requested} scored, cache hits {summary.cache_hit_rate:.0%}")
    if report:
        _print_report(report)
    print(f"predictions: {run_dir / 'predictions.jsonl'}")
    for rid, err in result.failures:
        print(f"failed: {rid}: {err}", file=sys.stderr)
    return EXIT_PARTIAL if result.failures else EXIT_OK


def _print_report(report) -> None:
    print(f"PLCC     {report.plcc:.4f}")
    print(f"SROCC    {report.srocc:.4f}")
    print(f"KROCC    {report.krocc:.4f}")
    print(f"Overall  {report.overall:.4f}  (n={report.n})")


def _paired_scores(predictions_path, ds: Dataset):
    rows = read_predictions(predictions_path)
    by_id = ds.by_id()
    truth, pred = [], []
    for row in rows:
        rec = by_id.get(row["id"])
        if rec is None:
            raise ConfigError(f"prediction id {row['id']!r} is not in the manifest")
        if rec.score is None:
            raise ConfigError(f"no radiologist score for id {row['id']!r} (blind test set?)")
        truth.append(rec.score)
        pred.append(float(row["y_hat"]))
    return rows, truth, pred


def cmd_evaluate(args) -> int:
    try:
        ds = _load(args.manifest)
        _, truth, pred = _paired_scores(args.predictions, ds)
    except (ConfigError, ManifestError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        report = evaluate(truth, pred)
    except MetricError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    _print_report(report)
    out = Path(args.out) if args.out else Path(args.predictions).with_name("metrics.json")
    out.write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        ds = _load(args.manifest)
    except (ManifestError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    summaries = []
    for run_dir in map(Path, args.run_dirs):
        try:
            _, truth, pred = _paired_scores(run_dir / "predictions.jsonl", ds)
            meta_path = run_dir / "summary.json"
            meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else {}
            report = evaluate(truth, pred)
        except (ConfigError, OSError, ValueError, KeyError) as exc:
            print(f"error: {run_dir}: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        model = meta.get("model_name", run_dir.name)
        strategy = meta.get("strategy", "unknown")
        summaries.append(RunSummary(strategy, model, report, int(meta.get("failures", 0)), len(pred),
                                    float(meta.get("cache_hit_rate", 0.0)), float(meta.get("wall_time", 0.0))))
        write_figures(truth, pred, run_dir, f"{model} ({strategy})")
    table_dir = Path(args.out) if args.out else Path(args.run_dirs[0])
    for path in write_tables(summaries, table_dir):
        print(f"wrote {path}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lmmiqa", description="LMM-based quality assessment harness for low-dose CT")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest-check", help="validate a manifest and decode every image")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_ingest_check)

    p = sub.add_parser("estimate-noise", help="fill the noise column from Poisson-Gaussian estimates")
    p.add_argument("manifest")
    p.add_argument("out_manifest")
    p.add_argument("--decimals", type=int, default=3)
    p.add_argument("--patch-size", type=int, default=8)
    p.set_defaults(func=cmd_estimate_noise)

    p = sub.add_parser("tag-regions", help="fill the region column by querying the model")
    p.add_argument("manifest")
    p.add_argument("out_manifest")
    p.add_argument("--backend", default="mock", help="'mock' or a backend JSON file")
    p.add_argument("--cache-dir", default="cache")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--labels", help="comma-separated region vocabulary")
    p.set_defaults(func=cmd_tag_regions)

    p = sub.add_parser("run", help="score the test split with one strategy")
    p.add_argument("manifest", nargs="?")
    p.add_argument("--config", help="JSON run configuration; flags override it")
    p.add_argument("--backend", help="'mock' or a backend JSON file")
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--warmup-count", dest="warmup_count", type=int)
    p.add_argument("--buffer-cap", dest="buffer_cap", type=int)
    p.add_argument("--resample-per-step", dest="resample_per_step", action="store_const", const=True)
    p.add_argument("--interleave-every", dest="interleave_every", type=int)
    p.add_argument("--limit", type=int, help="score only the first N test records")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--cache-dir", dest="cache_dir")
    p.add_argument("--run-id", dest="run_id")
    p.add_argument("--template-dir", dest="template_dir")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("evaluate", help="PLCC/SROCC/KROCC of a predictions file")
    p.add_argument("predictions")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="metrics JSON path (default: metrics.json beside the predictions)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="tables and figures for one or more run directories")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="directory for table.{csv,json,md} (default: first run directory)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
