"""Command-line interface: data synthesis, training, inference, evaluation
and the normalizer benchmark.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
Set CLOUDCORR_VERBOSE=1 for extra progress output.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluation, pointcloud, training
from .autodiff import NumericError
from .pointcloud import ContractError, GeometryError, ParseError, PointCloud, ShapePair
from .training import CheckpointError, ConfigError, TrainConfig

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _verbose() -> bool:
    return os.environ.get("CLOUDCORR_VERBOSE", "") not in ("", "0")


def _say(message: str) -> None:
    if _verbose():
        print(message, file=sys.stderr)


# ---------------------------------------------------------------------------
# dataset layout: out_dir/manifest.txt lists pair directories, each holding
# source.xyz, target.xyz and gt.csv


def write_pairs(pairs: list[ShapePair], out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for i, pair in enumerate(pairs):
        name = f"pair_{i:04d}"
        pair_dir = out_dir / name
        pair_dir.mkdir(exist_ok=True)
        (pair_dir / "source.xyz").write_text(pointcloud.write_xyz(pair.source), encoding="utf-8")
        (pair_dir / "target.xyz").write_text(pointcloud.write_xyz(pair.target), encoding="utf-8")
        if pair.gt is not None:
            (pair_dir / "gt.csv").write_text(evaluation.write_corr_csv(pair.gt), encoding="utf-8")
        names.append(name)
    (out_dir / "manifest.txt").write_text("\n".join(names) + "\n", encoding="utf-8")


def load_pairs(data_dir: Path) -> list[ShapePair]:
    manifest = data_dir / "manifest.txt"
    if not manifest.exists():
        raise ParseError(f"no manifest.txt in {data_dir}")
    pairs = []
    for name in manifest.read_text(encoding="utf-8").splitlines():
        name = name.strip()
        if not name:
            continue
        pair_dir = data_dir / name
        source = pointcloud.load_cloud(pair_dir / "source.xyz")
        target = pointcloud.load_cloud(pair_dir / "target.xyz")
        gt_path = pair_dir / "gt.csv"
        gt = None
        if gt_path.exists():
            gt = evaluation.read_corr_csv(gt_path.read_text(encoding="utf-8"))
        pairs.append(ShapePair(source=source, target=target, gt=gt, name=name))
    if not pairs:
        raise ParseError(f"manifest in {data_dir} lists no pairs")
    return pairs


def synth_pairs(kind: str, n: int, count: int, seed: int, amplitude: float = 0.3) -> list[ShapePair]:
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(count):
        base = pointcloud.random_blob(n, rng)
        pair_seed = int(rng.integers(0, 2**63 - 1))
        if kind == "rigid":
            pairs.append(pointcloud.synth_rigid_pair(base, pair_seed))
        else:
            pairs.append(pointcloud.synth_nonrigid_pair(base, amplitude, pair_seed))
    return pairs


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    pairs = synth_pairs(args.kind, args.n, args.pairs, args.seed, args.amplitude)
    write_pairs(pairs, Path(args.out_dir))
    _say(f"wrote {len(pairs)} {args.kind} pairs to {args.out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = training.parse_config(Path(args.config).read_text(encoding="utf-8"))
    pairs = load_pairs(Path(args.data))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    params, log = training.train(pairs, cfg, checkpoint_path=out)
    log_path = Path(args.log) if args.log else out.with_suffix(out.suffix + ".loss.csv")
    lines = ["epoch,mean_loss"] + [f"{i + 1},{value!r}" for i, value in enumerate(log)]
    log_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    _say(f"final loss {log[-1]:.6f}; checkpoint at {out}, loss log at {log_path}")
    if not np.isfinite(log[-1]):
        print(f"error: final loss is not finite ({log[-1]})", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _load_model(args) -> tuple[training.ModelParams, TrainConfig]:
    if args.config:
        cfg = training.parse_config(Path(args.config).read_text(encoding="utf-8"))
    else:
        cfg = TrainConfig()
    params = training.init_params(cfg)
    training.load_checkpoint(params, args.checkpoint)
    return params, cfg


def cmd_infer(args) -> int:
    params, cfg = _load_model(args)
    source = pointcloud.load_cloud(args.source)
    target = pointcloud.load_cloud(args.target)
    if args.keypoints:
        def model(kp_a: PointCloud, kp_b: PointCloud):
            return training.predict_indices(params, cfg, kp_a, kp_b)

        indices = evaluation.pseudo_cluster_correspond(source, target, args.keypoints, model)
    else:
        if source.n != target.n:
            raise ContractError(
                f"clouds differ in size ({source.n} vs {target.n}); "
                "use --keypoints to correspond them through pseudo clustering"
            )
        indices = training.predict_indices(params, cfg, source, target)
    Path(args.out).write_text(evaluation.write_corr_csv(indices), encoding="utf-8")
    _say(f"wrote {len(indices)} correspondences to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    pred = evaluation.read_corr_csv(Path(args.pred).read_text(encoding="utf-8"))
    gt = evaluation.read_corr_csv(Path(args.gt).read_text(encoding="utf-8"))
    target = pointcloud.load_cloud(args.target)
    if args.validate and not pointcloud.is_bijection(gt, len(gt)):
        raise ContractError("ground-truth correspondence is not a bijection")
    report = evaluation.corr_report(pred, gt, target)
    print(f"Corr: {100.0 * report.strict:.2f}%")
    if args.out:
        Path(args.out).write_text(evaluation.write_curve_csv(report.curve), encoding="utf-8")
        if args.validate:
            fractions = [frac for _, frac in report.curve]
            if fractions != sorted(fractions):
                raise ContractError("tolerance curve is not monotone")
    return EXIT_OK


def cmd_bench(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    rows = evaluation.bench_normalizers(sizes, args.iterations, args.repeats, args.seed)
    Path(args.out).write_text(evaluation.write_bench_csv(rows), encoding="utf-8")
    for method, n, seconds in rows:
        _say(f"{method} n={n}: {seconds:.6f}s")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cloudcorr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic training pairs")
    p.add_argument("--kind", choices=["rigid", "nonrigid"], default="rigid")
    p.add_argument("--n", type=int, default=128, help="points per cloud")
    p.add_argument("--pairs", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--amplitude", type=float, default=0.3, help="nonrigid bend amplitude")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a synth dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", default=None, help="loss log CSV (default: <out>.loss.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict a hard correspondence")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", default=None, help="config the checkpoint was trained with")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--keypoints", type=int, default=0, help="pseudo-cluster via m key points")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score a prediction against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--target", required=True, help="target cloud file")
    p.add_argument("--out", default=None, help="tolerance curve CSV")
    p.add_argument("--validate", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time the sharpening normalizer against sinkhorn")
    p.add_argument("--sizes", default="128,256,512,1024")
    p.add_argument("--iterations", type=int, default=30, help="sinkhorn iterations")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except (ParseError, GeometryError, ContractError, ConfigError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
