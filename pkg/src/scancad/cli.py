"""Command-line pipeline driver: mesh to grids, training, embeddings, serving.

Every subcommand is deterministic for a fixed --seed. Errors go to stderr
with an ``error:`` prefix and a nonzero exit code; --json swaps the human
summary on stdout for a JSON report.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .annotserve import AnnotationService, make_server
from .autodiff import Tensor, default_dtype, read_checkpoint, write_checkpoint
from .benchmark import (
    aggregate,
    build_tasks,
    category_accuracy,
    ranking_quality,
    read_annotations,
    report_as_json,
    report_as_text,
    retrieval_accuracy,
)
from .datagen import generate_dataset, load_pairs, save_pairs
from .embedspace import (
    EmbeddingIndex,
    EmbeddingVector,
    confusion_score,
    knn,
    read_embeddings,
    write_embeddings,
)
from .nets import ArchitectureConfig, AutoencoderModel, HourglassModel
from .trainer import TrainConfig, train, train_autoencoder
from .voxel import Domain, read_obj, rotate_up_axis, voxelize, write_grid

_EMBED_BATCH = 8


class CliError(Exception):
    """User-facing failure: printed with the error: prefix, exit code 1."""


# --- shared helpers ---

def _architecture(name: str) -> ArchitectureConfig:
    return ArchitectureConfig.tiny() if name == "tiny" else ArchitectureConfig()


def _batched(grids) -> Tensor:
    occ = np.stack([g.occupancy for g in grids]).astype(default_dtype())
    return Tensor(occ[:, None])


def _count_blocks(params, prefix: str) -> int:
    i = 1
    while f"{prefix}.block{i}.conv1.weight" in params:
        i += 1
    if i == 1:
        raise CliError(f"checkpoint has no {prefix} residual blocks")
    return i - 1


def _load_model(path):
    """Rebuild the model a checkpoint came from; shapes pin the architecture."""
    iteration, params, _ = read_checkpoint(path)
    if "ae.encoder.conv_in.weight" in params:
        width = params["ae.encoder.conv_in.weight"].data.shape[0]
        blocks = _count_blocks(params, "ae.encoder")
        cfg = ArchitectureConfig(
            base_channels=2 * width,
            latent_dim=2,  # unused by the autoencoder; smallest valid value
            embed_dim=params["ae.encoder.conv_latent.weight"].data.shape[0],
            residual_blocks_per_encoder=blocks,
            grid_dim=2 ** (blocks + 1),
        )
        return AutoencoderModel(cfg, params), True, iteration
    if "seg.encoder.conv_in.weight" in params:
        blocks = _count_blocks(params, "seg.encoder")
        cfg = ArchitectureConfig(
            base_channels=params["seg.encoder.conv_in.weight"].data.shape[0],
            latent_dim=params["seg.encoder.conv_latent.weight"].data.shape[0],
            embed_dim=params["final.encoder.conv_latent.weight"].data.shape[0],
            residual_blocks_per_encoder=blocks,
            grid_dim=2 ** (blocks + 1),
        )
        return HourglassModel(cfg, params), False, iteration
    raise CliError(f"{path}: parameter names match neither the joint model nor the autoencoder")


def _dataset(data_dir):
    return [pair for pair, _ in load_pairs(data_dir)]


# --- subcommand handlers: return (json report, human text), or None ---

def _cmd_voxelize(args):
    mesh = read_obj(args.mesh_in)
    dims = (args.dims, args.dims, args.dims)
    grid = voxelize(mesh, dims=dims).with_meta(object_id=Path(args.mesh_in).stem)
    write_grid(args.grid_out, grid)
    report = {"grid": str(args.grid_out), "dims": list(dims), "occupied": grid.count()}
    return report, f"wrote {args.grid_out}: {grid.count()} occupied voxels of {args.dims}^3"


def _cmd_gen_data(args):
    samples = generate_dataset(
        args.pairs,
        args.seed,
        clutter_density=args.clutter,
        dropout_fraction=args.dropout,
        noise_flip_prob=args.noise,
    )
    manifest = save_pairs(args.out, samples)
    report = {
        "manifest": str(manifest),
        "pairs": len(samples),
        "categories": sorted({s.category for s in samples}),
    }
    return report, f"wrote {len(samples)} pairs under {args.out}"


def _train_config(args) -> TrainConfig:
    kw = {"rotation_augment": args.rotations, "seed": args.seed}
    if args.iterations is not None:
        kw["max_iterations"] = args.iterations
    if args.batch is not None:
        kw["batch_size"] = args.batch
    if args.margin is not None:
        kw["margin"] = args.margin
    return TrainConfig.tiny(**kw) if args.config == "tiny" else TrainConfig(**kw)


def _cmd_train(args):
    dataset = _dataset(args.data)
    cfg = _train_config(args)
    model = HourglassModel.init(_architecture(args.config), seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    history = train(
        model, dataset, cfg, checkpoint_dir=out, metrics_path=out / "metrics.jsonl"
    )
    checkpoint = out / f"ckpt_{cfg.max_iterations:07d}.scck"
    report = {
        "checkpoint": str(checkpoint),
        "iterations": cfg.max_iterations,
        "final_loss": history[-1].total,
        "metrics": str(out / "metrics.jsonl"),
    }
    text = (
        f"trained {cfg.max_iterations} iterations, final loss {history[-1].total:.4f}\n"
        f"checkpoint: {checkpoint}"
    )
    return report, text


def _cmd_train_ae(args):
    dataset = _dataset(args.data)
    model = AutoencoderModel.init(_architecture(args.config), seed=args.seed)
    losses = train_autoencoder(
        model,
        [p.cad for p in dataset],
        iterations=args.iterations,
        lr=args.lr,
        batch_size=args.batch,
        seed=args.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint = out / f"ae_{args.iterations:07d}.scck"
    write_checkpoint(checkpoint, args.iterations, model.params)
    report = {
        "checkpoint": str(checkpoint),
        "iterations": args.iterations,
        "final_loss": losses[-1],
    }
    return report, f"autoencoder: {args.iterations} iterations, final loss {losses[-1]:.4f}\ncheckpoint: {checkpoint}"


def _cmd_embed(args):
    model, is_ae, _ = _load_model(args.checkpoint)
    if is_ae and args.domain == "scan":
        raise CliError("autoencoder checkpoints embed CAD grids only")
    dataset = _dataset(args.data)
    index = EmbeddingIndex(model.config.embed_dim)
    counts = {"scan": 0, "cad": 0}

    def _add(grids, owners, domain, rotation):
        for lo in range(0, len(grids), _EMBED_BATCH):
            chunk = grids[lo : lo + _EMBED_BATCH]
            batch = _batched(chunk)
            if is_ae:
                emb = model.autoencode(batch)[0]
            elif domain is Domain.SCAN:
                emb = model.embed_scan(batch).embedding
            else:
                emb = model.embed_cad(batch)
            for sample, row in zip(owners[lo : lo + _EMBED_BATCH], emb.data):
                index.add(
                    EmbeddingVector(
                        id=sample.sample_id,
                        domain=domain,
                        category=sample.category,
                        values=row,
                        rotation_step=rotation,
                    )
                )
                counts["scan" if domain is Domain.SCAN else "cad"] += 1

    if args.domain in (None, "scan") and not is_ae:
        _add([p.scan for p in dataset], dataset, Domain.SCAN, 0)
    if args.domain in (None, "cad"):
        rotations = range(12) if args.rotations else range(1)
        for r in rotations:
            cads = [rotate_up_axis(p.cad, r) if r else p.cad for p in dataset]
            _add(cads, dataset, Domain.CAD, r)

    write_embeddings(args.out, index)
    report = {
        "out": str(args.out),
        "dimension": index.dimension,
        "scan_vectors": counts["scan"],
        "cad_vectors": counts["cad"],
    }
    return report, f"wrote {len(index)} vectors (dim {index.dimension}) to {args.out}"


def _cmd_retrieve(args):
    index = read_embeddings(args.embeddings)
    index.freeze()
    categories = index.categories()
    domain = next((d for d in (Domain.SCAN, Domain.CAD) if (d, args.query_id) in categories), None)
    if domain is None:
        raise CliError(f"query id {args.query_id!r} not in the embedding file")
    query = index.vector_for(domain, args.query_id)
    hits = knn(index, query, args.k, exclude_self=True, query_key=(domain, args.query_id))
    report = {
        "query_id": args.query_id,
        "query_domain": domain.name.lower(),
        "results": [
            {"id": hid, "domain": hdom.name.lower(), "distance": dist} for hid, hdom, dist in hits
        ],
    }
    lines = [f"query {args.query_id} ({domain.name.lower()}), top {args.k}:"]
    for rank, (hid, hdom, dist) in enumerate(hits, start=1):
        lines.append(f"{rank:>3}  {hdom.name.lower():<4}  {dist:10.6f}  {hid}")
    return report, "\n".join(lines)


def _cmd_evaluate(args):
    index = read_embeddings(args.embeddings)
    index.freeze()
    records = read_annotations(args.annotations)
    if not records:
        raise CliError(f"{args.annotations}: no annotation records")
    with open(args.catalog, "r", encoding="utf-8") as fh:
        catalog = json.load(fh)
    if not isinstance(catalog, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in catalog.items()
    ):
        raise CliError(f"{args.catalog}: catalog must be a JSON object mapping CAD id to category")

    tasks = build_tasks(records, catalog, seed=args.seed)
    embeddings = {r.scan_id: index.vector_for(Domain.SCAN, r.scan_id) for r in records}
    confusion = {"k10": confusion_score(index, 10), "k50": confusion_score(index, 50)}
    retrieval = [retrieval_accuracy(t, index, embeddings[t.record.scan_id]) for t in tasks]
    ranking = [ranking_quality(t, index, embeddings[t.record.scan_id]) for t in tasks]
    top1 = category_accuracy(tasks, index, embeddings, k=1)
    top5 = category_accuracy(tasks, index, embeddings, k=5)
    task_categories = [t.record.category for t in tasks]
    tables = {
        "retrieval": aggregate(retrieval, task_categories),
        "ranking": aggregate(ranking, task_categories),
    }

    report = {
        "confusion": confusion,
        "category_top1": top1,
        "category_top5": top5,
        "tasks": len(tasks),
        **json.loads(report_as_json(tables)),
    }
    text = (
        f"tasks            {len(tasks)}\n"
        f"confusion @10    {confusion['k10']:.3f}\n"
        f"confusion @50    {confusion['k50']:.3f}\n"
        f"category top-1   {top1:.3f}\n"
        f"category top-5   {top5:.3f}\n\n"
        + report_as_text(tables)
    )
    return report, text


def _cmd_serve(args):
    pairs = load_pairs(args.data_dir)
    embeddings_path = Path(args.embeddings) if args.embeddings else Path(args.data_dir) / "ae_embeddings.scem"
    if not embeddings_path.exists():
        raise CliError(f"no embedding file at {embeddings_path}; run train-ae then embed first")
    annotations = (
        Path(args.annotations_file) if args.annotations_file else Path(args.data_dir) / "annotations.jsonl"
    )
    service = AnnotationService(
        pairs,
        read_embeddings(embeddings_path),
        annotations,
        seed=args.seed,
        lease_minutes=args.lease_minutes,
    )
    server = make_server(service, host=args.host, port=args.port)
    host, port = server.server_address[:2]
    print(f"serving on http://{host}:{port} (annotations: {annotations})", file=sys.stderr)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return None


# --- argument parsing ---

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scancad", description="scan-to-CAD shape embedding pipeline"
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="emit a JSON report to stdout")

    p = sub.add_parser("voxelize", parents=[common], help="rasterize an OBJ mesh into an occupancy grid")
    p.add_argument("mesh_in", help="input .obj mesh")
    p.add_argument("grid_out", help="output .scvx grid")
    p.add_argument("--dims", type=int, default=32)
    p.set_defaults(func=_cmd_voxelize)

    p = sub.add_parser("gen-data", parents=[common], help="generate synthetic scan/CAD training pairs")
    p.add_argument("--out", default="data")
    p.add_argument("--pairs", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clutter", type=float, default=0.4)
    p.add_argument("--dropout", type=float, default=0.3)
    p.add_argument("--noise", type=float, default=0.02)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train the joint embedding model")
    p.add_argument("--data", default="data")
    p.add_argument("--out", default="runs")
    p.add_argument("--config", choices=("tiny", "paper"), default="paper")
    p.add_argument("--rotations", action="store_true", help="rotation-augmented recipe")
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--margin", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("train-ae", parents=[common], help="train the proposal autoencoder on CAD grids")
    p.add_argument("--data", default="data")
    p.add_argument("--out", default="runs")
    p.add_argument("--config", choices=("tiny", "paper"), default="paper")
    p.add_argument("--iterations", type=int, default=500)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_train_ae)

    p = sub.add_parser("embed", parents=[common], help="embed every object in a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default="data")
    p.add_argument("--out", default="embeddings.scem")
    p.add_argument("--domain", choices=("scan", "cad"))
    p.add_argument("--rotations", action="store_true", help="12 rotated copies per CAD")
    p.set_defaults(func=_cmd_embed)

    p = sub.add_parser("retrieve", parents=[common], help="nearest neighbors of one embedded object")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--query-id", required=True)
    p.add_argument("-k", type=int, default=4)
    p.set_defaults(func=_cmd_retrieve)

    p = sub.add_parser("evaluate", parents=[common], help="run the annotation-driven benchmark")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--catalog", required=True, help="JSON object mapping CAD id to category")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("serve", parents=[common], help="run the annotation-collection service")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--annotations-file")
    p.add_argument("--embeddings", help="autoencoder SCEM file (default: DATA_DIR/ae_embeddings.scem)")
    p.add_argument("--lease-minutes", type=float, default=15.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = args.func(args)
    except (CliError, ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if result is not None:
        report, text = result
        print(json.dumps(report, indent=2, sort_keys=True) if args.json else text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
