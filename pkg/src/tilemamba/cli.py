"""Command-line interface.

Subcommands: gen-data, split, train, eval, audit-params, gradcheck,
nc-metrics, gradcam, sweep. Exit codes: 0 success, 1 contract/config
error, 2 I/O or format error, 3 acceptance-check failure (gradcheck,
audit-params). Report-producing commands write their delimited output
plus a rendered figure next to it, and every run stores its resolved
configuration.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import tensor as T
from .config import RunConfig
from .data import (DatasetManifest, generate_synthetic_dataset, load_tile,
                   load_split_arrays, split_dataset)
from .errors import (ConfigError, ContractError, DimensionError, FormatError,
                     TileMambaError)
from .gradcam import grad_cam, save_heatmap_pgm, save_heatmap_tile
from .head import FixedOrthogonalMatrix, nc_metrics
from .model import (build_model, count_parameters, default_gradcam_layer,
                    load_checkpoint, save_checkpoint)
from .sweep import format_sweep_table, parse_axis_values, run_sweep
from .train import evaluate, fit

EXIT_OK = 0
EXIT_CONTRACT = 1
EXIT_IO = 2
EXIT_CHECK_FAILED = 3


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None,
                   help="flat key=value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int, default=None, help="override seed")
    p.add_argument("--out", type=Path, default=None, help="output directory")
    p.add_argument("--precision", choices=("f32", "f64"), default=None)


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    cfg = cfg.apply_overrides(args.overrides)
    updates = []
    if args.seed is not None:
        updates.append(f"seed={args.seed}")
    if args.precision is not None:
        updates.append(f"precision={args.precision}")
    return cfg.apply_overrides(updates)


def _out_dir(args, default: str) -> Path:
    out = args.out if args.out is not None else Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_flat(path: Path, record: dict) -> None:
    lines = [f"{k}={_fmt(v)}" for k, v in record.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _load_splits(manifest_path: Path, cfg: RunConfig) -> dict:
    return {s: load_split_arrays(manifest_path, s, dtype=cfg.dtype())
            for s in ("train", "val", "test")}


def _find_manifest(data: Path) -> Path:
    if data.is_dir():
        candidate = data / "manifest.json"
        if not candidate.exists():
            raise FormatError(f"no manifest.json under {data}")
        return candidate
    return data


# -- subcommands --------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args, "dataset")
    manifest = generate_synthetic_dataset(cfg.synthetic_spec(), out)
    cfg.write(out / "resolved_config.txt")
    print(f"wrote {len(manifest.entries)} tiles under {out}")
    for name, count in sorted(manifest.counts.items()):
        print(f"  {name}: {count}")
    return EXIT_OK


def cmd_split(args) -> int:
    manifest_path = _find_manifest(args.manifest)
    manifest = DatasetManifest.load(manifest_path)
    seed = args.seed if args.seed is not None else manifest.split_seed
    fresh = split_dataset(manifest.entries, seed)
    fresh.save(manifest_path)
    print(f"re-split {len(fresh.entries)} entries with seed {seed}")
    for name, count in sorted(fresh.counts.items()):
        print(f"  {name}: {count}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .plots import plot_confusion, plot_training_curves

    cfg = _resolve_config(args)
    out = _out_dir(args, "run")
    if args.data is not None:
        manifest_path = _find_manifest(args.data)
    else:
        data_dir = out / "data"
        generate_synthetic_dataset(cfg.synthetic_spec(), data_dir)
        manifest_path = data_dir / "manifest.json"
    splits = _load_splits(manifest_path, cfg)
    model = build_model(cfg.model_config(), T.RngStream(cfg.seed),
                        dtype=cfg.dtype())
    cfg.write(out / "resolved_config.txt")
    result = fit(model, splits, cfg.train_config(), seed=cfg.seed)

    log_lines = []
    for r in result["history"]:
        log_lines.append(
            f"epoch={r['epoch']} mean_loss={_fmt(r['mean_loss'])} "
            f"lr={_fmt(float(r['lr']))} "
            f"val_accuracy={_fmt(r['val_accuracy'])} val_f1={_fmt(r['val_f1'])}"
        )
    (out / "epochs.log").write_text("\n".join(log_lines) + "\n",
                                    encoding="utf-8")
    nc_lines = [f"epoch={r['epoch']} "
                f"within_class_variance={_fmt(r['within_class_variance'])}"
                for r in result["nc_trace"]]
    (out / "nc_trace.log").write_text("\n".join(nc_lines) + "\n",
                                      encoding="utf-8")
    report = result["test_metrics"]
    _write_flat(out / "metrics.txt", report.to_flat_dict())
    save_checkpoint(model, out / "checkpoint.xlmc")
    plot_training_curves(result["history"], out / "training_curves.png")
    plot_confusion(report.normalized_rates(), out / "confusion.png")
    print(f"test accuracy={report.accuracy:.4f} f1={report.f1:.4f} "
          f"precision={report.precision:.4f} recall={report.recall:.4f}")
    print(f"artifacts under {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .plots import plot_confusion

    cfg = _resolve_config(args)
    out = _out_dir(args, "eval")
    model = load_checkpoint(args.checkpoint, cfg.model_config())
    manifest_path = _find_manifest(args.data)
    images, labels = load_split_arrays(manifest_path, args.split,
                                       dtype=cfg.dtype())
    report = evaluate(model, images, labels,
                      batch_size=cfg.eval_batch_size)
    _write_flat(out / "metrics.txt", report.to_flat_dict())
    plot_confusion(report.normalized_rates(), out / "confusion.png")
    cfg.write(out / "resolved_config.txt")
    print(f"{args.split} accuracy={report.accuracy:.4f} f1={report.f1:.4f}")
    return EXIT_OK


def cmd_audit_params(args) -> int:
    cfg = _resolve_config(args)
    model = build_model(cfg.model_config(), T.RngStream(cfg.seed),
                        dtype=cfg.dtype())
    audit = count_parameters(model)
    table = audit.format_table()
    print(table)
    target = cfg.audit_target
    tol = cfg.audit_tolerance
    lo = target * (1 - tol)
    hi = target * (1 + tol)
    ok = audit.within_band(target, tol)
    verdict = "PASS" if ok else "FAIL"
    print(f"target {target} +-{tol:.0%} -> band [{lo:.0f}, {hi:.0f}]; "
          f"trainable {audit.total_trainable}: {verdict}")
    if args.out is not None:
        out = _out_dir(args, "audit")
        (out / "audit.txt").write_text(
            table + f"\nband=[{lo:.0f},{hi:.0f}] verdict={verdict}\n",
            encoding="utf-8")
        cfg.write(out / "resolved_config.txt")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_gradcheck(args) -> int:
    from .checks import DEFAULT_TOL, gradient_check_suite

    results = gradient_check_suite(seeds=args.seeds, tolerance=DEFAULT_TOL)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:28s} "
              f"max_rel_err={r.max_rel_err:.3e} tol={r.tolerance:g}")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_CHECK_FAILED


def cmd_nc_metrics(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args, "nc")
    model = load_checkpoint(args.checkpoint, cfg.model_config())
    manifest_path = _find_manifest(args.data)
    images, labels = load_split_arrays(manifest_path, args.split,
                                       dtype=cfg.dtype())
    _, feats = evaluate(model, images, labels,
                        batch_size=cfg.eval_batch_size, return_features=True)
    final = model.head_layers[-1]
    classifier_w = final.w.data if isinstance(final, FixedOrthogonalMatrix) \
        else None
    report = nc_metrics(feats, labels, classifier_w=classifier_w)
    _write_flat(out / "nc_report.txt", report.to_flat_dict())
    cfg.write(out / "resolved_config.txt")
    for key, value in report.to_flat_dict().items():
        print(f"{key}={_fmt(value)}")
    return EXIT_OK


def cmd_gradcam(args) -> int:
    from .plots import plot_heatmap_overlay

    cfg = _resolve_config(args)
    out = _out_dir(args, "gradcam")
    model = load_checkpoint(args.checkpoint, cfg.model_config())
    if args.tile is not None:
        image, label = load_tile(args.tile)
    else:
        manifest_path = _find_manifest(args.data)
        images, labels = load_split_arrays(manifest_path, args.split,
                                           dtype=cfg.dtype())
        if not 0 <= args.index < images.shape[0]:
            raise ConfigError(f"tile index {args.index} outside the "
                              f"{args.split} split of {images.shape[0]}")
        image, label = images[args.index], int(labels[args.index])
    if args.target_class is not None:
        target = args.target_class
    else:
        with T.no_grad():
            logits = model.eval().forward(T.Tensor(image[None].astype(model.dtype)))
        target = int(logits.data.argmax())
    layer = args.layer or default_gradcam_layer(cfg.model_config())
    heat = grad_cam(model, image, target, layer_name=layer)
    save_heatmap_tile(heat, out / "heatmap.xlmt")
    save_heatmap_pgm(heat, out / "heatmap.pgm")
    plot_heatmap_overlay(image, heat.values, out / "overlay.png")
    cfg.write(out / "resolved_config.txt")
    print(f"layer={heat.layer_name} target_class={heat.target_class} "
          f"tile_label={label} peak={heat.values.max():.3f}")
    print(f"wrote heatmap.xlmt / heatmap.pgm / overlay.png under {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .plots import plot_sweep

    cfg = _resolve_config(args)
    out = _out_dir(args, "sweep")
    values = parse_axis_values(args.axis, args.values)
    if args.data is not None:
        manifest_path = _find_manifest(args.data)
    else:
        data_dir = out / "data"
        generate_synthetic_dataset(cfg.synthetic_spec(), data_dir)
        manifest_path = data_dir / "manifest.json"
    rows, skipped = run_sweep(args.axis, values, cfg, manifest_path)
    table = format_sweep_table(rows)
    (out / "sweep.tsv").write_text(table, encoding="utf-8")
    if rows:
        plot_sweep(rows, args.axis, out / "sweep.png")
    cfg.write(out / "resolved_config.txt")
    print(table, end="")
    for s in skipped:
        print(f"skipped {s['value']}: {s['reason']}", file=sys.stderr)
    return EXIT_OK if not skipped else EXIT_CONTRACT


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tilemamba",
        description="Ultra-light ConvNeXt/Mamba tile classifier toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic tile dataset")
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("split", help="re-split an existing dataset manifest")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train on a tile dataset")
    _add_common(p)
    p.add_argument("--data", type=Path, default=None,
                   help="dataset dir or manifest (generated when omitted)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default="test",
                   choices=("train", "val", "test"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("audit-params",
                       help="per-layer parameter table; exit 3 outside band")
    _add_common(p)
    p.set_defaults(func=cmd_audit_params)

    p = sub.add_parser("gradcheck",
                       help="finite-difference suite; exit 3 on failure")
    p.add_argument("--seeds", type=int, default=10)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("nc-metrics",
                       help="neural-collapse report for a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_nc_metrics)

    p = sub.add_parser("gradcam", help="class activation map for one tile")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--tile", type=Path, default=None,
                   help="single tile file (alternative to --data/--index)")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--target-class", type=int, default=None)
    p.add_argument("--layer", default=None,
                   help="defaults to the deepest stage with extent >= 4x4")
    p.set_defaults(func=cmd_gradcam)

    p = sub.add_parser("sweep", help="ablation sweep along one axis")
    _add_common(p)
    p.add_argument("--axis", required=True,
                   choices=("momentum", "lr", "optimizer", "head_config"))
    p.add_argument("--values", default=None,
                   help="comma-separated values (defaults to the studied grid)")
    p.add_argument("--data", type=Path, default=None)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TileMambaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
