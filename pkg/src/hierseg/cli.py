"""Command-line surface for the hierarchical segmentation pipeline.

Four subcommands cover the offline workflow end to end: ``gen-data``
writes a synthetic corpus, ``derive`` turns per-stage confusion CSVs
into a supervision plan, ``train`` fits a network under a supervision
variant, and ``eval`` scores a checkpoint. Every command writes a
manifest that echoes its full resolved configuration, so a run can be
reproduced byte for byte from the manifest alone.

Exit codes follow the usual convention: 0 on success, 1 for runtime
failures (bad files, diverged training), 2 for usage errors.

The HS3_THREADS environment variable caps BLAS thread counts and
defaults to 1, keeping repeated runs bit-exact.
"""

from __future__ import annotations

import os


def _cap_threads() -> None:
    value = os.environ.get("HS3_THREADS", "1")
    if not value.isdigit() or int(value) < 1:
        value = "1"
    for var in (
        "OPENBLAS_NUM_THREADS",
        "OMP_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        os.environ.setdefault(var, value)


_cap_threads()

import argparse  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

from .ioutil import write_json  # noqa: E402
from .segmetrics import (  # noqa: E402
    ClusterMap,
    ConfusionMatrix,
    load_cluster_map,
    merge_confusion,
    metrics_from_confusion,
    read_confusion_csv,
    write_confusion_csv,
)
from .speclust import (  # noqa: E402
    ClassEmbeddingSet,
    cluster_embeddings,
    manual_contiguous_map,
    symmetrize_affinity,
)
from .tradeoff import (  # noqa: E402
    SelectorConfig,
    build_stage_curves,
    identity_plan,
    load_plan,
    manual_plan,
    plan_from_curves,
    reference_from_confusion,
    resolve_gammas,
    save_plan,
    write_curves_csv,
)
from .toynet import (  # noqa: E402
    CLUSTERING_MODES,
    NetworkConfig,
    SegNet,
    TrainConfig,
    evaluate,
    load_checkpoint,
    network_config_for_plan,
    save_checkpoint,
    train,
    two_phase_pipeline,
    write_history_csv,
)
from .ocrfuse import attach_fuse, build_fuse_plan  # noqa: E402
from .synthdata import SceneSpec, generate, load_dataset, save_dataset  # noqa: E402

REFERENCE_CHANNELS = (8, 16, 32)
REFERENCE_POOLS = (2, 2, 2)


class UsageError(Exception):
    """Inconsistent or incomplete command configuration."""


def _manifest_path(target: Path) -> Path:
    return Path(str(target) + ".manifest.json")


def _resolved_config(args: argparse.Namespace) -> dict:
    config = {}
    for key, value in vars(args).items():
        if key == "func":
            continue
        if isinstance(value, tuple):
            value = list(value)
        config[key] = value
    return config


def _write_manifest(
    target: Path, command: str, args: argparse.Namespace, outputs: list[Path]
) -> None:
    write_json(
        _manifest_path(target),
        {
            "command": command,
            "config": _resolved_config(args),
            "outputs": [str(p) for p in outputs],
        },
    )


def _selector_from(args: argparse.Namespace) -> SelectorConfig:
    mode = args.selector_mode
    if mode is None:
        mode = "theta" if args.theta is not None else "ratio"
    theta = args.theta if args.theta is not None else 0.0
    axis_scale = tuple(args.axis_scale) if args.axis_scale else None
    try:
        return SelectorConfig(mode=mode, theta_degrees=theta, axis_scale=axis_scale)
    except ValueError as err:
        raise UsageError(str(err)) from err


def _gammas_from(args: argparse.Namespace, num_stages: int):
    if not args.gamma:
        return None
    if len(args.gamma) == 1:
        return args.gamma[0]
    if len(args.gamma) != num_stages:
        raise UsageError(
            f"got {len(args.gamma)} --gamma values for {num_stages} stages"
        )
    return list(args.gamma)


def cmd_gen_data(args: argparse.Namespace) -> int:
    try:
        spec = SceneSpec(
            height=args.height,
            width=args.width,
            num_groups=args.num_groups,
            classes_per_group=args.classes_per_group,
            shapes_min=args.shapes_min,
            shapes_max=args.shapes_max,
            noise_sigma=args.noise_sigma,
            seed=args.seed,
        )
    except ValueError as err:
        raise UsageError(str(err)) from err
    dataset, hierarchy = generate(spec, args.count)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(out, dataset)
    write_json(
        _manifest_path(out),
        {
            "command": "gen-data",
            "config": _resolved_config(args),
            "outputs": [str(out)],
            "num_classes": dataset.num_classes,
            "planted_groups": hierarchy.group_map.to_json_dict(),
        },
    )
    print(f"wrote {dataset.count} samples of {dataset.num_classes} classes to {out}")
    return 0


def cmd_derive(args: argparse.Namespace) -> int:
    stage_confs = [read_confusion_csv(p) for p in args.stage_csv]
    final_conf = read_confusion_csv(args.final_csv)
    k_full = final_conf.num_classes
    for i, conf in enumerate(stage_confs):
        if conf.num_classes != k_full:
            raise UsageError(
                f"stage {i + 1} CSV has {conf.num_classes} classes, "
                f"final CSV has {k_full}"
            )

    selector = _selector_from(args)
    gammas = _gammas_from(args, len(stage_confs))
    cluster_fns = None
    if args.clustering == "kmeans":
        cluster_fns = []
        for conf in stage_confs:
            emb = ClassEmbeddingSet(symmetrize_affinity(conf).weights)
            cluster_fns.append(lambda k, e=emb: cluster_embeddings(e, k, args.seed))
    elif args.clustering == "manual":
        cluster_fns = [
            (lambda k: manual_contiguous_map(k_full, k)) for _ in stage_confs
        ]

    curves = build_stage_curves(stage_confs, args.seed, cluster_fns=cluster_fns)
    if args.clustering == "manual":
        plan = manual_plan(k_full, len(curves), gammas)
    else:
        plan = plan_from_curves(
            curves, reference_from_confusion(final_conf), selector, gammas
        )

    out_plan = Path(args.out_plan)
    out_plan.parent.mkdir(parents=True, exist_ok=True)
    save_plan(out_plan, plan)
    outputs = [out_plan]
    if args.out_curves:
        out_curves = Path(args.out_curves)
        out_curves.parent.mkdir(parents=True, exist_ok=True)
        write_curves_csv(out_curves, curves)
        outputs.append(out_curves)
    _write_manifest(out_plan, "derive", args, outputs)

    print("stage  classes")
    for stage in plan.stages:
        print(f"{stage.stage_id:>5}  {stage.class_set.num_clusters:>7}")
    print(f"final  {plan.final.class_set.num_clusters:>7}")
    return 0


def _identity_plan_weighted(num_classes: int, num_stages: int, gammas):
    plan = identity_plan(num_classes, num_stages)
    for stage, weight in zip(plan.stages, resolve_gammas(gammas, num_stages)):
        stage.weight = weight
    return plan


def cmd_train(args: argparse.Namespace) -> int:
    variant = args.variant
    if variant in ("hs3", "hs3fuse"):
        if args.plan is None and not args.two_phase:
            raise UsageError(f"variant {variant} needs --plan or --two-phase")
        if args.plan is not None and args.two_phase:
            raise UsageError("--plan and --two-phase are mutually exclusive")
    elif args.plan is not None or args.two_phase:
        raise UsageError(f"--plan and --two-phase do not apply to variant {variant}")

    try:
        tcfg = TrainConfig(
            epochs=args.epochs,
            batch_size=args.batch_size,
            learning_rate=args.learning_rate,
            momentum=args.momentum,
            seed=args.seed,
        )
    except ValueError as err:
        raise UsageError(str(err)) from err

    dataset = load_dataset(args.data)
    val = None
    if args.val_data is not None:
        val_set = load_dataset(args.val_data)
        if val_set.num_classes != dataset.num_classes:
            raise UsageError(
                f"validation set has {val_set.num_classes} classes, "
                f"train set has {dataset.num_classes}"
            )
        val = (val_set.images, val_set.labels)

    k = dataset.num_classes
    base_cfg = NetworkConfig(
        head_counts=(k,) * len(REFERENCE_CHANNELS),
        stage_channels=REFERENCE_CHANNELS,
        pool_factors=REFERENCE_POOLS,
    )
    gammas = _gammas_from(args, base_cfg.num_intermediate)
    fuse_plan = None
    if variant == "hs3fuse":
        fuse_plan = build_fuse_plan(
            base_cfg.stage_channels[-1], base_cfg.num_intermediate, args.fuse_scale
        )

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs: list[Path] = []

    if variant == "none":
        net, history = train(
            dataset.images, dataset.labels, None, base_cfg, tcfg, val=val
        )
    elif variant == "ds":
        plan = _identity_plan_weighted(k, base_cfg.num_intermediate, gammas)
        net, history = train(
            dataset.images, dataset.labels, plan, base_cfg, tcfg, val=val
        )
    elif args.two_phase:
        result = two_phase_pipeline(
            dataset.images,
            dataset.labels,
            base_cfg,
            tcfg,
            selector=_selector_from(args),
            gammas=gammas,
            clustering=args.clustering,
            reduced_fraction=args.reduced_fraction,
            phase1_epochs=args.phase1_epochs,
            val=val,
            fuse_plan=fuse_plan,
        )
        net, history = result.net, result.phase2_history
        plan_path = out_dir / "plan.json"
        save_plan(plan_path, result.plan)
        curves_path = out_dir / "curves.csv"
        write_curves_csv(curves_path, result.curves)
        phase1_path = out_dir / "phase1_history.csv"
        write_history_csv(phase1_path, result.phase1_history)
        outputs.extend([plan_path, curves_path, phase1_path])
        for i, conf in enumerate(result.analysis_confusions):
            name = (
                f"analysis_stage_{i + 1}.csv"
                if i < len(result.analysis_confusions) - 1
                else "analysis_final.csv"
            )
            conf_path = out_dir / name
            write_confusion_csv(conf_path, conf)
            outputs.append(conf_path)
    else:
        plan = load_plan(args.plan)
        if plan.num_classes != k:
            raise UsageError(
                f"plan covers {plan.num_classes} classes, dataset has {k}"
            )
        net_cfg = network_config_for_plan(base_cfg, plan)
        net = SegNet(net_cfg, tcfg.seed)
        if fuse_plan is not None:
            net = attach_fuse(net, fuse_plan, tcfg.seed)
        net, history = train(
            dataset.images, dataset.labels, plan, net_cfg, tcfg, val=val, net=net
        )

    checkpoint_path = out_dir / "checkpoint.bin"
    save_checkpoint(
        checkpoint_path, net, meta={"variant": variant, "seed": tcfg.seed}
    )
    history_path = out_dir / "history.csv"
    write_history_csv(history_path, history)
    outputs.extend([checkpoint_path, history_path])
    write_json(
        out_dir / "manifest.json",
        {
            "command": "train",
            "config": _resolved_config(args),
            "outputs": [str(p) for p in outputs],
        },
    )

    last = history[-1]
    line = f"epoch {last.epoch}: loss {last.total_loss:.6f}"
    if val is not None:
        line += f" val_miou {last.val_miou:.4f}"
    print(line)
    return 0


def _metrics_block(conf: ConfusionMatrix) -> dict:
    metrics = metrics_from_confusion(conf)
    per_class = [
        float(iou) if defined else None
        for iou, defined in zip(metrics.per_class_iou, metrics.defined)
    ]
    miou = float(metrics.miou) if any(metrics.defined) else None
    return {
        "num_classes": conf.num_classes,
        "miou": miou,
        "pixel_accuracy": float(metrics.pixel_accuracy),
        "per_class_iou": per_class,
    }


def cmd_eval(args: argparse.Namespace) -> int:
    net, _ = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    k = net.config.num_classes
    if k != dataset.num_classes:
        raise UsageError(
            f"checkpoint predicts {k} classes, dataset has {dataset.num_classes}"
        )
    cmap = load_cluster_map(args.map) if args.map else ClusterMap.identity(k)
    if cmap.num_source_classes != k:
        raise UsageError(
            f"map covers {cmap.num_source_classes} classes, checkpoint has {k}"
        )

    conf = evaluate(net, dataset.images, dataset.labels)
    merged = merge_confusion(conf, cmap)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report = {
        "full": _metrics_block(conf),
        "merged": _metrics_block(merged),
        "map": cmap.to_json_dict(),
    }
    write_json(out, report)
    _write_manifest(out, "eval", args, [out])

    full_miou = report["full"]["miou"]
    merged_miou = report["merged"]["miou"]
    print(
        f"full miou {full_miou if full_miou is None else format(full_miou, '.6f')}  "
        f"merged miou {merged_miou if merged_miou is None else format(merged_miou, '.6f')}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hierseg",
        description="Hierarchically supervised semantic segmentation pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a synthetic dataset")
    gen.add_argument("--out", required=True, help="output dataset path")
    gen.add_argument("--count", type=int, default=400, help="number of samples")
    gen.add_argument("--height", type=int, default=64)
    gen.add_argument("--width", type=int, default=64)
    gen.add_argument("--num-groups", type=int, default=3)
    gen.add_argument("--classes-per-group", type=int, default=4)
    gen.add_argument("--shapes-min", type=int, default=3)
    gen.add_argument("--shapes-max", type=int, default=6)
    gen.add_argument("--noise-sigma", type=float, default=0.05)
    gen.add_argument("--seed", type=int, default=0)
    gen.set_defaults(func=cmd_gen_data)

    derive = sub.add_parser("derive", help="derive a supervision plan from CSVs")
    derive.add_argument(
        "--stage-csv",
        action="append",
        required=True,
        help="confusion CSV for one intermediate stage (repeat, shallow first)",
    )
    derive.add_argument("--final-csv", required=True, help="final-stage confusion CSV")
    derive.add_argument("--out-plan", required=True, help="output plan JSON path")
    derive.add_argument("--out-curves", help="optional trade-off curves CSV path")
    derive.add_argument(
        "--selector-mode", choices=("ratio", "theta"), default=None
    )
    derive.add_argument("--theta", type=float, default=None, help="angle in degrees")
    derive.add_argument(
        "--axis-scale", type=float, nargs=2, default=None, metavar=("SX", "SY")
    )
    derive.add_argument("--gamma", type=float, action="append", default=None)
    derive.add_argument(
        "--clustering", choices=CLUSTERING_MODES, default="spectral"
    )
    derive.add_argument("--seed", type=int, default=0)
    derive.set_defaults(func=cmd_derive)

    tr = sub.add_parser("train", help="train a segmentation network")
    tr.add_argument("--data", required=True, help="training dataset path")
    tr.add_argument("--val-data", default=None, help="optional validation dataset")
    tr.add_argument("--out-dir", required=True, help="output directory")
    tr.add_argument(
        "--variant", choices=("none", "ds", "hs3", "hs3fuse"), required=True
    )
    tr.add_argument("--plan", default=None, help="supervision plan JSON (hs3 variants)")
    tr.add_argument(
        "--two-phase",
        action="store_true",
        help="derive the plan internally from a phase-1 run",
    )
    tr.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    tr.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    tr.add_argument("--learning-rate", type=float, default=TrainConfig.learning_rate)
    tr.add_argument("--momentum", type=float, default=TrainConfig.momentum)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--gamma", type=float, action="append", default=None)
    tr.add_argument("--selector-mode", choices=("ratio", "theta"), default=None)
    tr.add_argument("--theta", type=float, default=None)
    tr.add_argument(
        "--axis-scale", type=float, nargs=2, default=None, metavar=("SX", "SY")
    )
    tr.add_argument("--clustering", choices=CLUSTERING_MODES, default="spectral")
    tr.add_argument("--phase1-epochs", type=int, default=None)
    tr.add_argument("--reduced-fraction", type=float, default=0.9)
    tr.add_argument("--fuse-scale", type=float, default=1.0)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="score a checkpoint on a dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", required=True, help="metrics JSON path")
    ev.add_argument("--map", default=None, help="optional cluster map JSON")
    ev.set_defaults(func=cmd_eval)
    return parser


def entrypoint(argv: list[str] | None = None) -> int:
    raw_threads = os.environ.get("HS3_THREADS")
    if raw_threads is not None and (
        not raw_threads.isdigit() or int(raw_threads) < 1
    ):
        print(
            f"hierseg: HS3_THREADS must be a positive integer, got {raw_threads!r}",
            file=sys.stderr,
        )
        return 2
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as err:
        print(f"hierseg: {err}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as err:
        print(f"hierseg: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(entrypoint())
