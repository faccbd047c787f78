"""Probe run for the acceptance experiments; prints calibration numbers."""

import time

import numpy as np

from scancad.autodiff import Tensor, default_dtype
from scancad.datagen import generate_dataset
from scancad.embedspace import EmbeddingIndex, EmbeddingVector, confusion_score, knn
from scancad.nets import ArchitectureConfig, AutoencoderModel, HourglassModel
from scancad.trainer import TrainConfig, train, train_autoencoder
from scancad.voxel import Domain, iou, rotate_up_axis, threshold

CATS = ("box", "cylinder", "table", "chair")


def _batch(grids):
    return Tensor(np.stack([g.occupancy for g in grids]).astype(default_dtype())[:, None])


def _vec(id, values, domain, category):
    return EmbeddingVector(id=id, domain=domain, category=category,
                           values=np.asarray(values, dtype=np.float32))


def probe_ae():
    print("=== AE overfit probe (base 4, lr 3e-3) ===", flush=True)
    samples = generate_dataset(4, seed=21, categories=CATS)
    cads = [s.cad for s in samples]
    arch = ArchitectureConfig(base_channels=4, latent_dim=64, embed_dim=32,
                              residual_blocks_per_encoder=4, grid_dim=32)
    t0 = time.monotonic()
    for budget in (400, 800):
        model = AutoencoderModel.init(arch, seed=21)
        train_autoencoder(model, cads, iterations=budget, lr=0.003, seed=21)
        _, recon = model.autoencode(_batch(cads))
        ious = [iou(threshold(recon.data[i, 0]), cads[i]) for i in range(4)]
        print(f"iters {budget}: ious={['%.3f' % v for v in ious]} t={time.monotonic()-t0:.0f}s", flush=True)


def probe_overfit(lr):
    print(f"=== overfit probe (2000 it, batch 8, lr {lr}) ===", flush=True)
    dataset = generate_dataset(20, seed=11, categories=CATS)
    pairs = dataset[:8]
    model = HourglassModel.init(ArchitectureConfig.tiny(), seed=11)
    cfg = TrainConfig.tiny(max_iterations=2000, seed=11, lr0=lr)
    t0 = time.monotonic()
    hist = train(model, pairs, cfg)
    elapsed = time.monotonic() - t0
    for it in (10, 250, 500, 750, 1000, 1250, 1500, 1750, 2000):
        h = hist[it - 1]
        print(f"  @{it}: total={h.total:.4f} seg={h.l_seg:.4f} cmp={h.l_cmp:.4f} trip={h.l_trip:.5f}", flush=True)
    ratio = hist[-1].total / hist[9].total
    print(f"  train {elapsed:.0f}s  ratio={ratio:.3f} (need <0.25)", flush=True)

    out = model.embed_scan(_batch([s.scan for s in pairs]))
    scan_vecs = out.embedding.data
    cad_vecs = model.embed_cad(_batch([s.cad for s in dataset])).data
    print(f"  |e|={np.linalg.norm(scan_vecs, axis=1).mean():.3f} "
          f"|z|={np.linalg.norm(cad_vecs[:8], axis=1).mean():.3f} "
          f"scan spread={scan_vecs.std(axis=0).mean():.4f} "
          f"cad spread={cad_vecs[:8].std(axis=0).mean():.4f}", flush=True)

    pool = EmbeddingIndex(32)
    for s, row in zip(dataset, cad_vecs):
        pool.add(_vec(s.sample_id, row, Domain.CAD, s.category))
    pool = pool.freeze()
    hits = [knn(pool, scan_vecs[i], 1)[0][0] == pairs[i].sample_id for i in range(8)]
    print(f"  top-1 hits: {sum(hits)}/8 {hits}", flush=True)

    d = np.sqrt(((scan_vecs[:, None, :] - cad_vecs[None, :, :]) ** 2).sum(-1))  # 8 x 20
    own = d[np.arange(8), np.arange(8)]
    masked = d.copy()
    masked[np.arange(8), np.arange(8)] = np.inf
    winner = masked.argmin(axis=1)
    print(f"  own d: {np.round(own, 3).tolist()}", flush=True)
    print(f"  gap (best other - own): {np.round(masked.min(axis=1) - own, 3).tolist()}", flush=True)
    print(f"  nearest rival: {[dataset[w].sample_id for w in winner]}", flush=True)
    zz = np.sqrt(((cad_vecs[:, None, :] - cad_vecs[None, :, :]) ** 2).sum(-1))
    same = [zz[i, j] for i in range(20) for j in range(i + 1, 20)
            if dataset[i].category == dataset[j].category]
    diff = [zz[i, j] for i in range(20) for j in range(i + 1, 20)
            if dataset[i].category != dataset[j].category]
    print(f"  cad-cad dist: same-cat mean={np.mean(same):.3f} cross-cat mean={np.mean(diff):.3f}",
          flush=True)

    seg_ious = [iou(threshold(out.fg.data[i, 0]), pairs[i].gt_fg) for i in range(8)]
    cmp_ious = [iou(threshold(out.cmp.data[i, 0]), pairs[i].cad) for i in range(8)]
    print(f"  seg ious: {['%.3f' % v for v in seg_ious]} mean={np.mean(seg_ious):.3f}", flush=True)
    print(f"  cmp ious: {['%.3f' % v for v in cmp_ious]} mean={np.mean(cmp_ious):.3f}", flush=True)
    for i in (0, 3):
        probs = out.fg.data[i, 0]
        on = probs[pairs[i].gt_fg.occupancy]
        off = probs[~pairs[i].gt_fg.occupancy]
        print(f"  fg probs pair {i}: true-voxel q10/q50/q90="
              f"{np.quantile(on, 0.1):.3f}/{np.quantile(on, 0.5):.3f}/{np.quantile(on, 0.9):.3f}"
              f" false q99={np.quantile(off, 0.99):.3f} frac_on>{0.5}={np.mean(on > 0.5):.3f}",
          flush=True)

    mixed = EmbeddingIndex(32)
    for s, row in zip(pairs, scan_vecs):
        mixed.add(_vec(s.sample_id, row, Domain.SCAN, s.category))
    for s, row in zip(pairs, cad_vecs[:8]):
        mixed.add(_vec(s.sample_id, row, Domain.CAD, s.category))
    conf = confusion_score(mixed.freeze(), 3)
    print(f"  confusion@3={conf:.3f} (need >=0.3)", flush=True)
    passed = ratio < 0.25 and sum(hits) == 8 and np.mean(seg_ious) > 0.8 \
        and np.mean(cmp_ious) > 0.8 and conf >= 0.3
    print(f"  overfit criteria {'PASS' if passed else 'FAIL'}", flush=True)
    return passed


def probe_rotation(lr):
    print(f"=== rotation probe (3000 it, margin 0.1, lr {lr}) ===", flush=True)
    pairs = generate_dataset(8, seed=11, categories=CATS)
    model = HourglassModel.init(ArchitectureConfig.tiny(), seed=13)
    cfg = TrainConfig.tiny(rotation_augment=True, max_iterations=3000, seed=13, lr0=lr)
    assert cfg.margin == 0.1
    t0 = time.monotonic()
    hist = train(model, pairs, cfg)
    print(f"  train {time.monotonic()-t0:.0f}s final total={hist[-1].total:.4f} "
          f"trip={hist[-1].l_trip:.5f}", flush=True)

    index = EmbeddingIndex(32)
    for step in range(12):
        rotated = model.embed_cad(_batch([rotate_up_axis(s.cad, step) for s in pairs])).data
        for s, row in zip(pairs, rotated):
            index.add(EmbeddingVector(id=s.sample_id, domain=Domain.CAD, category=s.category,
                                      values=row.astype(np.float32), rotation_step=step))
    index = index.freeze()
    baselines = {}
    agree = total = 0
    for step in range(12):
        queries = model.embed_scan(_batch([rotate_up_axis(s.scan, step) for s in pairs])).embedding.data
        for i, s in enumerate(pairs):
            top = knn(index, queries[i], 1)[0][0]
            if step == 0:
                baselines[s.sample_id] = top
            total += 1
            agree += top == baselines[s.sample_id]
    truth = sum(baselines[s.sample_id] == s.sample_id for s in pairs)
    print(f"  consistency {agree}/{total} = {agree/total:.3f} (need >=0.9); "
          f"unrotated truth {truth}/8", flush=True)


if __name__ == "__main__":
    probe_ae()
    winner = None
    for lr in (0.003, 0.005):
        if probe_overfit(lr):
            winner = lr
            break
    probe_rotation(winner if winner is not None else 0.005)
    print(f"=== done (winner lr {winner}) ===", flush=True)
