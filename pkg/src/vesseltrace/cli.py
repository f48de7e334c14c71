"""Command-line entry points for the extraction pipeline.

Subcommands: ``phantom`` (volume + ground truth), ``filter`` (CVM + tensor
field + seeds), ``extract`` (geodesic tree, optionally the distance and
label fields), ``eval`` (metrics CSV), ``pipeline`` (all stages), and
``selftest`` (built-in invariant checks).

Exit codes: 0 success, 2 bad configuration or usage (the message names the
field), 3 missing input file, 1 any other failure. Every failure prints a
single machine-parsable line ``error: <category>: <detail>`` on stderr.
Artifacts are byte-identical across re-runs with the same configuration,
whatever the worker count.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import yaml

from .config import ConfigError, PipelineConfig, load_config
from .filtering import (
    SeedSet,
    detect_seeds,
    icosphere_bases,
    multiscale_synthesize,
    ola_weight_field,
    tubular_saliency,
)
from .kernels import response_identity_residuals
from .marching import MetricField, extract_tree, init_front, propagate_until_collision
from .metrics import metrics_csv_header, metrics_csv_row, tree_metrics
from .phantoms import (
    NOISE_HEAVY,
    NOISE_LIGHT,
    PHANTOM_KINDS,
    centerline_from_tree,
    centerline_to_tree,
    degrade,
    generate_tree_volume,
    make_phantom,
)
from .tree import load_tree, save_tree
from .volume import ScalarVolume, TensorFieldLE, eig_sym3_field, vec_to_sym_field
from .volio import read_tensor_field, read_volume, write_tensor_field, write_volume

__all__ = ["main"]

_SEEDS_HEADER = "vesseltrace-seeds v1"

_NOISE_BY_NAME = {"none": None, "n1": NOISE_LIGHT, "n2": NOISE_HEAVY}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _parse_dims(text: str):
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(
            "dims must be three comma-separated integers, got %r" % text
        )
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(
            "dims must be three comma-separated integers, got %r" % text
        ) from None
    if any(d < 1 for d in dims):
        raise argparse.ArgumentTypeError("dims must be positive, got %r" % text)
    return dims


def _build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML configuration file")
    common.add_argument("--input", help="input file or directory")
    common.add_argument("--output-dir", help="artifact directory")
    common.add_argument("--workers", type=int, help="block-filter worker threads")
    common.add_argument("--seed", type=int, help="random seed override")
    common.add_argument(
        "--debug-dumps", action="store_true",
        help="write intermediate volumes next to the artifacts",
    )

    parser = _Parser(prog="vesseltrace")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common],
                       help="generate a benchmark volume with ground truth")
    p.add_argument("--kind", required=True, choices=PHANTOM_KINDS + ("tree",))
    p.add_argument("--dims", type=_parse_dims,
                   help="volume shape, e.g. 64,64,64")
    p.add_argument("--terminals", type=int, default=6,
                   help="terminal count for --kind tree")
    p.add_argument("--noise", choices=sorted(_NOISE_BY_NAME), default="none")

    sub.add_parser("filter", parents=[common],
                   help="synthesize the vesselness map, tensor field, seeds")
    sub.add_parser("extract", parents=[common],
                   help="extract the geodesic tree from filter artifacts")

    p = sub.add_parser("eval", parents=[common],
                       help="score a tree file against a ground-truth tree file")
    p.add_argument("--gt", required=True, help="ground-truth tree file")
    p.add_argument("--volume-id", help="CSV volume id (default: input stem)")
    p.add_argument("--noise-label", default="none", help="CSV noise level column")

    p = sub.add_parser("pipeline", parents=[common],
                       help="filter, extract, and (with --gt) evaluate")
    p.add_argument("--gt", help="ground-truth tree file")
    p.add_argument("--volume-id", help="CSV volume id (default: input stem)")
    p.add_argument("--noise-label", default="none", help="CSV noise level column")

    sub.add_parser("selftest", parents=[common],
                   help="run the built-in invariant checks")
    return parser


def _flag_overrides(args) -> dict:
    out = {}
    if args.input is not None:
        out["input_path"] = args.input
    if args.output_dir is not None:
        out["output_dir"] = args.output_dir
    if args.workers is not None:
        out["workers"] = args.workers
    if args.seed is not None:
        out["rng_seed"] = args.seed
    return out


def _require_output_dir(cfg: PipelineConfig) -> Path:
    if cfg.output_dir is None:
        raise ConfigError("output_dir", "required by this subcommand")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_input(cfg: PipelineConfig) -> Path:
    if cfg.input_path is None:
        raise ConfigError("input_path", "required by this subcommand")
    path = Path(cfg.input_path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    return path


def _wrote(path: Path) -> None:
    print("wrote %s" % path)


def _write_seeds(path: Path, seeds: SeedSet) -> None:
    lines = [_SEEDS_HEADER, "count %d" % len(seeds)]
    lines += ["%d %d %d" % tuple(v) for v in seeds.voxels]
    path.write_text("\n".join(lines) + "\n", encoding="ascii")


def _read_seeds(path: Path) -> SeedSet:
    if not path.exists():
        raise FileNotFoundError(str(path))
    lines = path.read_text(encoding="ascii").splitlines()
    if not lines or lines[0] != _SEEDS_HEADER:
        raise ValueError("%s: not a seeds file" % path)
    n = int(lines[1].split()[1])
    voxels = np.array(
        [[int(t) for t in ln.split()] for ln in lines[2:2 + n]], dtype=np.int64
    ).reshape(n, 3)
    return SeedSet(voxels=voxels, orientations=np.tile(np.eye(3), (n, 1, 1)))


# ---------------------------------------------------------------------------
# subcommands

def _cmd_phantom(cfg: PipelineConfig, args) -> int:
    out = _require_output_dir(cfg)
    if args.kind == "tree":
        dims = args.dims or (64, 64, 64)
        volume, gt = generate_tree_volume(
            cfg.rng_seed, n_terminals=args.terminals, dims=dims
        )
    else:
        dims = args.dims or (48, 48, 48)
        volume, gt = make_phantom(args.kind, dims=dims)
    spec = _NOISE_BY_NAME[args.noise]
    if spec is not None:
        volume = degrade(volume, spec, rng_seed=cfg.rng_seed)
    vol_path = out / "volume.nii.gz"
    write_volume(vol_path, volume)
    _wrote(vol_path)
    gt_path = out / "gt.tree"
    save_tree(centerline_to_tree(gt), gt_path)
    _wrote(gt_path)
    return 0


def _run_filter(cfg: PipelineConfig, volume: ScalarVolume, out: Path,
                debug_dumps: bool) -> SeedSet:
    dictionary = cfg.build_dictionary()
    sink = None
    if debug_dumps:
        debug_dir = out / "debug"
        debug_dir.mkdir(exist_ok=True)

        def sink(name, obj):
            path = debug_dir / ("%s.nii.gz" % name)
            if isinstance(obj, TensorFieldLE):
                write_tensor_field(path, obj)
            else:
                write_volume(path, obj)
            _wrote(path)

    cvm, tf = multiscale_synthesize(
        volume, cfg.scales, dictionary, p=cfg.quantile,
        n_ico=cfg.icosphere_level, block_edge=cfg.block_edge,
        workers=cfg.workers, debug_sink=sink,
    )
    saliency = tubular_saliency(
        volume, dictionary.tube, icosphere_bases(cfg.icosphere_level)
    )
    seeds = detect_seeds(saliency, cfg.quantile)

    cvm_path = out / "cvm.nii.gz"
    write_volume(cvm_path, cvm)
    _wrote(cvm_path)
    tf_path = out / "tf.nii.gz"
    write_tensor_field(tf_path, tf)
    _wrote(tf_path)
    seeds_path = out / "seeds.txt"
    _write_seeds(seeds_path, seeds)
    _wrote(seeds_path)
    return seeds


def _cmd_filter(cfg: PipelineConfig, args) -> int:
    out = _require_output_dir(cfg)
    volume = read_volume(_require_input(cfg))
    _run_filter(cfg, volume, out, args.debug_dumps)
    return 0


def _run_extract(cfg: PipelineConfig, cvm: ScalarVolume, tf: TensorFieldLE,
                 seeds: SeedSet, out: Path, debug_dumps: bool):
    tree = extract_tree(
        cvm, tf, seeds,
        epsilon_factor=cfg.epsilon_factor, keep_fields=debug_dumps,
    )
    tree_path = out / "tree.txt"
    save_tree(tree, tree_path)
    _wrote(tree_path)
    if debug_dumps:
        # unreached voxels carry the -1 background sentinel
        u = np.where(np.isfinite(tree.u), tree.u, -1.0)
        u_path = out / "u.nii.gz"
        write_volume(u_path, ScalarVolume(data=u, spacing=cvm.spacing))
        _wrote(u_path)
        voronoi_path = out / "voronoi.nii.gz"
        write_volume(
            voronoi_path,
            ScalarVolume(data=tree.voronoi.astype(np.float64),
                         spacing=cvm.spacing),
        )
        _wrote(voronoi_path)
    return tree


def _cmd_extract(cfg: PipelineConfig, args) -> int:
    out = _require_output_dir(cfg)
    src = _require_input(cfg)
    if not src.is_dir():
        raise ConfigError(
            "input_path", "extract expects a filter artifact directory"
        )
    cvm = read_volume(src / "cvm.nii.gz")
    tf = read_tensor_field(src / "tf.nii.gz")
    seeds = _read_seeds(src / "seeds.txt")
    _run_extract(cfg, cvm, tf, seeds, out, args.debug_dumps)
    return 0


def _tree_bounds(tree) -> np.ndarray:
    points = [np.rint([n.position for n in tree.nodes]).astype(np.int64)]
    points += [n.voxels.reshape(-1, 3) for n in tree.nodes]
    points += [e.path.voxels for e in tree.edges]
    return np.vstack([p for p in points if p.size]).max(axis=0)


def _run_eval(cfg: PipelineConfig, tree, gt_tree, dims, out: Path,
              volume_id: str, noise_label: str):
    gt = centerline_from_tree(gt_tree, dims)
    m = tree_metrics(tree, gt, rho=cfg.rho)
    row = metrics_csv_row(volume_id, noise_label, m)
    csv_path = out / "metrics.csv"
    csv_path.write_text(
        metrics_csv_header() + "\n" + row + "\n", encoding="ascii"
    )
    print(row)
    _wrote(csv_path)
    return m


def _cmd_eval(cfg: PipelineConfig, args) -> int:
    out = _require_output_dir(cfg)
    tree_path = _require_input(cfg)
    gt_path = Path(args.gt)
    if not gt_path.exists():
        raise FileNotFoundError(str(gt_path))
    tree = load_tree(tree_path)
    gt_tree = load_tree(gt_path)
    # the metrics are pairwise distances, so any box holding both suffices
    dims = tuple(
        int(d) + 1
        for d in np.maximum(_tree_bounds(tree), _tree_bounds(gt_tree))
    )
    volume_id = args.volume_id or tree_path.stem
    _run_eval(cfg, tree, gt_tree, dims, out, volume_id, args.noise_label)
    return 0


def _cmd_pipeline(cfg: PipelineConfig, args) -> int:
    out = _require_output_dir(cfg)
    src = _require_input(cfg)
    volume = read_volume(src)

    resolved = out / "resolved_config.yaml"
    mapping = cfg.to_mapping()
    # only the parameters that determine the data artifacts are recorded
    for plumbing in ("input_path", "output_dir", "workers"):
        del mapping[plumbing]
    resolved.write_text(
        yaml.safe_dump(mapping, sort_keys=True), encoding="ascii"
    )
    _wrote(resolved)

    seeds = _run_filter(cfg, volume, out, args.debug_dumps)
    cvm = read_volume(out / "cvm.nii.gz")
    tf = read_tensor_field(out / "tf.nii.gz")
    tree = _run_extract(cfg, cvm, tf, seeds, out, args.debug_dumps)

    if args.gt is not None:
        gt_path = Path(args.gt)
        if not gt_path.exists():
            raise FileNotFoundError(str(gt_path))
        gt_tree = load_tree(gt_path)
        volume_id = args.volume_id or src.stem
        _run_eval(cfg, tree, gt_tree, volume.dims, out, volume_id,
                  args.noise_label)
    return 0


# ---------------------------------------------------------------------------
# selftest

def _check_gauge_identity(cfg: PipelineConfig) -> None:
    d = cfg.build_dictionary()
    kc = cfg._kernel_config()
    for kern in d.oriented_kernels():
        residuals, gamma_sums = response_identity_residuals(
            kern.params, kc.support, kc.oversample
        )
        worst = float(residuals.max())
        if worst > 1e-9:
            raise AssertionError(
                "%s kernel response deviation %g" % (kern.kind, worst)
            )
        gap = float(np.abs(gamma_sums - 1.0).max())
        if gap > 1e-10:
            raise AssertionError(
                "%s kernel gamma weights sum off by %g" % (kern.kind, gap)
            )


def _check_partition_of_unity(cfg: PipelineConfig) -> None:
    be = cfg.block_edge
    dims = (2 * be, 2 * be - be // 2, 2 * be + 3)
    w = ola_weight_field(dims, be)
    h = be // 2
    interior = w[h:-h, h:-h, h:-h]
    gap = float(np.abs(interior - 1.0).max())
    if gap > 1e-6:
        raise AssertionError("interior window sum off by %g" % gap)


def _check_axis_update(cfg: PipelineConfig) -> None:
    dims = (7, 7, 7)
    seeds = SeedSet(
        voxels=np.array([[3, 3, 3]], dtype=np.int64),
        orientations=np.eye(3)[None],
    )
    front = init_front(seeds, dims)
    metric = MetricField(
        tensors=TensorFieldLE(data=np.zeros(dims + (6,))),
        speed_inv=ScalarVolume(data=np.ones(dims)),
        epsilon_c=1.0,
    )
    propagate_until_collision(front, metric)
    for offset in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0),
                   (0, 0, 1), (0, 0, -1)):
        value = float(front.u[3 + offset[0], 3 + offset[1], 3 + offset[2]])
        if abs(value - 1.0) > 1e-9:
            raise AssertionError(
                "unit-cost face neighbor at %g instead of 1" % value
            )


def _selftest_synthesize(cfg: PipelineConfig):
    volume, _ = make_phantom("tube", dims=(32, 32, 32))
    return multiscale_synthesize(
        volume, (1.0,), cfg.build_dictionary(), p=cfg.quantile,
        n_ico=cfg.icosphere_level, block_edge=cfg.block_edge,
        workers=cfg.workers,
    )


def _check_tensor_validity(cfg: PipelineConfig) -> None:
    _, tf = _selftest_synthesize(cfg)
    w, _ = eig_sym3_field(vec_to_sym_field(tf.data))
    det_gap = float(np.abs(np.exp(w.sum(axis=-1)) - 1.0).max())
    if det_gap > 1e-6:
        raise AssertionError("tensor determinant off by %g" % det_gap)


def _check_determinism(cfg: PipelineConfig) -> None:
    cvm_a, tf_a = _selftest_synthesize(cfg)
    cvm_b, tf_b = _selftest_synthesize(cfg)
    if not (np.array_equal(cvm_a.data, cvm_b.data)
            and np.array_equal(tf_a.data, tf_b.data)):
        raise AssertionError("repeated synthesis differs")


_SELFTEST_CHECKS = (
    ("kernel gauge identity", _check_gauge_identity),
    ("overlap-add partition of unity", _check_partition_of_unity),
    ("marching axis update", _check_axis_update),
    ("tensor field validity", _check_tensor_validity),
    ("synthesis determinism", _check_determinism),
)


def _cmd_selftest(cfg: PipelineConfig, args) -> int:
    for name, check in _SELFTEST_CHECKS:
        try:
            check(cfg)
        except Exception as exc:
            print("error: selftest: %s: %s" % (name, exc), file=sys.stderr)
            return 1
        print("ok: %s" % name)
    print("selftest passed (%d checks)" % len(_SELFTEST_CHECKS))
    return 0


_COMMANDS = {
    "phantom": _cmd_phantom,
    "filter": _cmd_filter,
    "extract": _cmd_extract,
    "eval": _cmd_eval,
    "pipeline": _cmd_pipeline,
    "selftest": _cmd_selftest,
}


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except _UsageError as exc:
        print("error: usage: %s" % exc, file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config, flag_overrides=_flag_overrides(args))
        return _COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print("error: config: %s" % exc, file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        missing = exc.filename if exc.filename else str(exc)
        print("error: missing-input: %s" % missing, file=sys.stderr)
        return 3
    except Exception as exc:
        print("error: run: %s" % exc, file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
