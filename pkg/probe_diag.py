"""Diagnostics: seg-only capacity check, then joint training with fast decay."""

import numpy as np

from scancad.autodiff import Tensor, default_dtype
from scancad.datagen import generate_dataset
from scancad.embedspace import EmbeddingIndex, EmbeddingVector, confusion_score, knn
from scancad.nets import ArchitectureConfig, HourglassModel
from scancad.trainer import AdamState, TrainConfig, train
from scancad.voxel import Domain, iou, threshold

CATS = ("box", "cylinder", "table", "chair")


def _batch(grids):
    return Tensor(np.stack([g.occupancy for g in grids]).astype(default_dtype())[:, None])


def _vec(id, values, domain, category):
    return EmbeddingVector(id=id, domain=domain, category=category,
                           values=np.asarray(values, dtype=np.float32))


def seg_only():
    print("=== seg-only isolation (1500 it, lr 3e-3) ===", flush=True)
    dataset = generate_dataset(20, seed=11, categories=CATS)
    pairs = dataset[:8]
    model = HourglassModel.init(ArchitectureConfig.tiny(), seed=11)
    cfg = TrainConfig.tiny(lr0=0.003, use_completion=False, use_triplet=False,
                           max_iterations=1500, seed=11)
    adam = AdamState.for_params(model.params)
    scans = _batch([s.scan for s in pairs])
    for chunk in range(6):
        start = chunk * 250
        hist = train(model, pairs, cfg, max_iterations=start + 250,
                     adam=adam, start_iteration=start)
        out = model.embed_scan(scans)
        fg_iou = [iou(threshold(out.fg.data[i, 0]), pairs[i].gt_fg) for i in range(8)]
        logits_p = out.fg.data
        print(f"  @{start+250}: seg={hist[-1].l_seg:.4f} fg_iou_mean={np.mean(fg_iou):.3f} "
              f"fg_p(mean={logits_p.mean():.3f} max={logits_p.max():.3f} frac>.5={(logits_p > .5).mean():.4f})",
              flush=True)
    print(f"  final per-pair fg iou: {['%.3f' % v for v in fg_iou]}", flush=True)


def joint_decay(lr0, decay_every):
    print(f"=== joint fast-decay (2000 it, lr {lr0}, decay_every {decay_every}) ===", flush=True)
    dataset = generate_dataset(20, seed=11, categories=CATS)
    pairs = dataset[:8]
    model = HourglassModel.init(ArchitectureConfig.tiny(), seed=11)
    cfg = TrainConfig.tiny(lr0=lr0, decay_every=decay_every, max_iterations=2000, seed=11)
    adam = AdamState.for_params(model.params)
    scans = _batch([s.scan for s in pairs])
    all_cads = _batch([s.cad for s in dataset])
    first = None
    for chunk in range(8):
        start = chunk * 250
        hist = train(model, pairs, cfg, max_iterations=start + 250,
                     adam=adam, start_iteration=start)
        if first is None:
            first = hist[9].total
        out = model.embed_scan(scans)
        e = out.embedding.data
        z = model.embed_cad(all_cads).data
        seg_iou = np.mean([iou(threshold(out.fg.data[i, 0]), pairs[i].gt_fg) for i in range(8)])
        cmp_iou = np.mean([iou(threshold(out.cmp.data[i, 0]), pairs[i].cad) for i in range(8)])
        h = hist[-1]
        print(f"  @{start+250}: tot={h.total:.4f} seg={h.l_seg:.4f} cmp={h.l_cmp:.4f} "
              f"trip={h.l_trip:.5f} |e|={np.linalg.norm(e, axis=1).mean():.2f} "
              f"|z|={np.linalg.norm(z[:8], axis=1).mean():.2f} "
              f"espr={e.std(axis=0).mean():.4f} zspr={z[:8].std(axis=0).mean():.4f} "
              f"segI={seg_iou:.3f} cmpI={cmp_iou:.3f}", flush=True)
    pool = EmbeddingIndex(32)
    for s, row in zip(dataset, z):
        pool.add(_vec(s.sample_id, row, Domain.CAD, s.category))
    pool = pool.freeze()
    hits = sum(knn(pool, e[i], 1)[0][0] == pairs[i].sample_id for i in range(8))
    mixed = EmbeddingIndex(32)
    for s, row in zip(pairs, e):
        mixed.add(_vec(s.sample_id, row, Domain.SCAN, s.category))
    for s, row in zip(pairs, z[:8]):
        mixed.add(_vec(s.sample_id, row, Domain.CAD, s.category))
    conf = confusion_score(mixed.freeze(), 3)
    ratio = hist[-1].total / first
    print(f"  ratio={ratio:.3f} hits={hits}/8 confusion@3={conf:.3f}", flush=True)


if __name__ == "__main__":
    seg_only()
    joint_decay(0.005, 400)
