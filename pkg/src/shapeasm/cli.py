"""Command-line entry points.

Every verb takes ``--config PATH`` (JSON), ``--seed N``, ``--set key=value``
overrides and ``--out DIR``. Failures exit with status 1 and a single
``shapeasm: error: ...`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import apps
from . import encoder as enc
from .io import Config, PrimitiveFile, load_config
from .optim import NonFiniteLossError, fit_instance, train_amortized, write_trace_csv
from .stochastic import mle_mask, sigmoid
from .synthetic import CLASSES, generate_shape, label_points
from .volume import MeshError, TargetShape, load_mesh, sample_surface, write_obj


class CliError(Exception):
    pass


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> Config:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides)


def _target(path, cfg: Config) -> TargetShape:
    return TargetShape.from_obj(path, cfg.occ_res, cfg.df_res, cfg.df_extent)


def read_manifest(path) -> list[Path]:
    """One OBJ path per line, relative to the manifest; ``#`` starts a comment."""
    path = Path(path)
    entries = []
    for line in path.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            entries.append((path.parent / line).resolve())
    if not entries:
        raise CliError(f"{path}: manifest lists no shapes")
    missing = [str(e) for e in entries if not e.exists()]
    if missing:
        raise CliError(f"{path}: missing shape {missing[0]}")
    return entries


# -- verbs -------------------------------------------------------------------

def cmd_gen_synthetic(args, cfg: Config):
    if args.n < 1:
        raise CliError("--n must be at least 1")
    out = _out_dir(args)
    rng = np.random.default_rng(cfg.seed)
    names = []
    for i in range(args.n):
        shape = generate_shape(args.shape_class, rng)
        stem = f"{args.shape_class}_{i:03d}"
        write_obj(out / f"{stem}.obj", shape.mesh)
        m = shape.parts.M
        PrimitiveFile(shape.parts, np.ones(m, dtype=bool), args.shape_class,
                      list(shape.part_labels)).save(out / f"{stem}.gt.json")
        (out / f"{stem}.labels.txt").write_text("\n".join(shape.vertex_labels) + "\n")
        names.append(f"{stem}.obj")
    (out / "manifest.txt").write_text("\n".join(names) + "\n")
    print(f"wrote {args.n} {args.shape_class} shapes to {out}")


def cmd_preprocess(args, cfg: Config):
    paths = [Path(p) for p in args.meshes]
    if args.manifest:
        paths += read_manifest(args.manifest)
    if not paths:
        raise CliError("no meshes given")
    for p in paths:
        target = TargetShape.from_mesh(load_mesh(p), cfg.occ_res, cfg.df_res, cfg.df_extent, p.stem)
        dfg, occ = target.save_cache(p)
        print(f"{p}: {dfg.name}, {occ.name}")


def _finish_assembly(asm, mask, cfg: Config, out: Path, stem: str, label=None):
    pruned = apps.remove_redundant(asm, mask, cfg.overlap_threshold, seed=cfg.seed)
    PrimitiveFile(asm, pruned, label).save(out / f"{stem}.prims.json")
    apps.write_assembly_obj(out / f"{stem}.assembly.obj", asm, pruned)
    return pruned


def cmd_fit(args, cfg: Config):
    out = _out_dir(args)
    path = Path(args.mesh)
    target = _target(path, cfg)
    res = fit_instance(target, cfg.M, cfg.fit, seed=cfg.seed, cfg=cfg.loss_config())
    write_trace_csv(out / f"{path.stem}.trace.csv", res.trace)
    kept = _finish_assembly(res.assembly, res.mask, cfg, out, path.stem)
    print(f"{path.stem}: {int(kept.sum())} of {cfg.M} primitives, best iter {res.best_iter}")


def cmd_train(args, cfg: Config):
    out = _out_dir(args)
    paths = read_manifest(args.manifest)
    dataset = [_target(p, cfg) for p in paths]
    net = enc.init_weights(enc.EncoderNet(cfg.M, cfg.occ_res), cfg.seed)
    res = train_amortized(dataset, net, cfg.train, seed=cfg.seed, cfg=cfg.loss_config())
    enc.save_checkpoint(res.net, out / "encoder.cae")
    write_trace_csv(out / "train_trace.csv", res.trace)
    print(f"trained on {len(dataset)} shapes, final loss {res.trace.total[-1]:.4g}")


def cmd_infer(args, cfg: Config):
    out = _out_dir(args)
    net = enc.load_checkpoint(args.checkpoint)
    if (args.config or any(s.startswith("M=") for s in args.set or [])) and net.n_prims != cfg.M:
        raise CliError(f"checkpoint has M={net.n_prims} but config has M={cfg.M}")
    paths = [Path(p) for p in args.meshes]
    if args.manifest:
        paths += read_manifest(args.manifest)
    if not paths:
        raise CliError("no meshes given")
    for p in paths:
        target = _target(p, cfg)
        if target.occupancy.resolution != net.in_res:
            raise CliError(f"{p}: occupancy resolution {target.occupancy.resolution} != {net.in_res}")
        heads, _ = enc.forward(net, target.occupancy.bits)
        asm, logits = enc.decode_heads(heads[0])
        mask = mle_mask(sigmoid(logits))
        if not mask.any():
            print(f"shapeasm: warning: {p.stem}: every existence probability is below 0.5",
                  file=sys.stderr)
        kept = _finish_assembly(asm, mask, cfg, out, p.stem)
        print(f"{p.stem}: {int(kept.sum())} of {net.n_prims} primitives")


def _surface_points(mesh_path, cfg: Config, salt: int):
    mesh = load_mesh(mesh_path)
    rng = np.random.default_rng([cfg.seed, salt])
    return mesh, sample_surface(mesh, cfg.n_points, rng)


def cmd_parse(args, cfg: Config):
    out = _out_dir(args)
    prims = PrimitiveFile.load(args.prims)
    if not prims.exists.any():
        raise CliError(f"{args.prims}: no existing primitives")
    _, pts = _surface_points(args.mesh, cfg, 0)
    gt = None
    if args.gt:
        ref = PrimitiveFile.load(args.gt)
        if ref.part_labels is None:
            raise CliError(f"{args.gt}: primitives carry no labels")
        gt = label_points(pts, ref.asm, ref.part_labels)
    lab = apps.PartLabeling(pts, apps.parse_points(pts, prims.asm, prims.exists), gt)
    dest = out / f"{Path(args.mesh).stem}.parts.csv"
    apps.write_labeling_csv(dest, lab)
    print(f"wrote {dest}")


def _selection(args) -> apps.Selection:
    prims = None
    if args.prims_select:
        prims = tuple(int(x) for x in args.prims_select.split(","))
    groups = tuple(args.groups.split(",")) if args.groups else apps.GROUPS
    return apps.Selection(prims, groups)


def cmd_embed(args, cfg: Config):
    out = _out_dir(args)
    files = [PrimitiveFile.load(p) for p in args.prims]
    if len({f.M for f in files}) != 1:
        raise CliError("all primitive files must have the same M")
    sel = _selection(args)
    descs = [apps.descriptor(f.asm, f.exists, sel) for f in files]
    dist = apps.distance_matrix(descs)
    names = [Path(p).name for p in args.prims]
    apps.write_matrix_csv(out / "distances.csv", names, dist)
    k = min(args.k, len(files) - 1)
    nn = apps.nearest_neighbors(dist, k)
    with open(out / "knn.csv", "w") as f:
        f.write("item," + ",".join(f"nn{j + 1}" for j in range(k)) + "\n")
        for name, row in zip(names, nn.tolist()):
            f.write(",".join([name] + [names[j] for j in row]) + "\n")
    print(f"wrote distances for {len(files)} shapes")


def cmd_deform(args, cfg: Config):
    out = _out_dir(args)
    src = PrimitiveFile.load(args.source)
    dst = PrimitiveFile.load(args.target)
    if src.M != dst.M or not np.array_equal(src.exists, dst.exists):
        raise CliError("source and target primitive files must have equal M and existence")
    if not src.exists.any():
        raise CliError(f"{args.source}: no existing primitives")
    mesh = load_mesh(args.mesh)
    spec = apps.DeformationSpec(src.asm, dst.asm, src.exists)
    dest = out / f"{Path(args.mesh).stem}.deformed.obj"
    write_obj(dest, apps.deform_mesh(mesh, spec))
    print(f"wrote {dest}")


def cmd_eval_parsing(args, cfg: Config):
    out = _out_dir(args)
    pred_dir = Path(args.pred)
    labelings = []
    for i, p in enumerate(read_manifest(args.manifest)):
        gt_path = p.with_suffix(".gt.json")
        pred_path = pred_dir / f"{p.stem}.prims.json"
        for q in (gt_path, pred_path):
            if not q.exists():
                raise CliError(f"missing {q}")
        ref = PrimitiveFile.load(gt_path)
        pred = PrimitiveFile.load(pred_path)
        if ref.part_labels is None:
            raise CliError(f"{gt_path}: primitives carry no labels")
        if not pred.exists.any():
            raise CliError(f"{pred_path}: no existing primitives")
        _, pts = _surface_points(p, cfg, i)
        labelings.append(apps.PartLabeling(pts, apps.parse_points(pts, pred.asm, pred.exists),
                                           label_points(pts, ref.asm, ref.part_labels)))
    acc = apps.parsing_accuracy(labelings)
    mapping = apps.label_mapping(labelings)
    report = {"accuracy": acc, "shapes": len(labelings),
              "mapping": {str(k): v for k, v in sorted(mapping.items())}}
    (out / "parsing.json").write_text(json.dumps(report, indent=1) + "\n")
    print(f"parsing accuracy {acc:.4f} over {len(labelings)} shapes")


# -- argument parsing --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="config override, e.g. fit.stage2_iters=500")
    common.add_argument("--out", default=".", help="output directory")

    p = argparse.ArgumentParser(prog="shapeasm", description="Fit and learn cuboid assemblies.")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("gen-synthetic", parents=[common], help="generate a labeled synthetic corpus")
    s.add_argument("--class", dest="shape_class", choices=CLASSES, required=True)
    s.add_argument("--n", type=int, default=1)
    s.set_defaults(func=cmd_gen_synthetic)

    s = sub.add_parser("preprocess", parents=[common], help="build DF and occupancy caches")
    s.add_argument("meshes", nargs="*")
    s.add_argument("--manifest")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("fit", parents=[common], help="fit an assembly to one mesh")
    s.add_argument("mesh")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("train", parents=[common], help="train the encoder on a manifest")
    s.add_argument("manifest")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", parents=[common], help="predict assemblies with a trained encoder")
    s.add_argument("checkpoint")
    s.add_argument("meshes", nargs="*")
    s.add_argument("--manifest")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("parse", parents=[common], help="label surface points by primitive")
    s.add_argument("prims")
    s.add_argument("mesh")
    s.add_argument("--gt", help="labeled ground-truth primitive file")
    s.set_defaults(func=cmd_parse)

    s = sub.add_parser("embed", parents=[common], help="descriptor distances between assemblies")
    s.add_argument("prims", nargs="+")
    s.add_argument("--select", dest="prims_select", help="comma-separated primitive indices")
    s.add_argument("--groups", help="comma-separated subset of dims,rot,trans")
    s.add_argument("--k", type=int, default=5)
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("deform", parents=[common], help="deform a mesh with its primitives")
    s.add_argument("mesh")
    s.add_argument("source")
    s.add_argument("target")
    s.set_defaults(func=cmd_deform)

    s = sub.add_parser("eval-parsing", parents=[common], help="dataset-level parsing accuracy")
    s.add_argument("manifest")
    s.add_argument("--pred", required=True, help="directory of predicted primitive files")
    s.set_defaults(func=cmd_eval_parsing)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        args.func(args, cfg)
    except (CliError, MeshError, ValueError, OSError, NonFiniteLossError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"shapeasm: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
