"""Chunky-data seg isolation and Adam beta2 stability scan."""
import numpy as np

from scancad.autodiff import AdamState, Tensor, bce, default_dtype
from scancad.datagen import generate_dataset
from scancad.nets import ArchitectureConfig, HourglassModel
from scancad.trainer import TrainConfig, train
from scancad.voxel import iou, threshold

CATS = ("box", "cylinder", "table", "chair")


def _batch(grids):
    return Tensor(np.stack([g.occupancy for g in grids]).astype(default_dtype())[:, None])


def seg_only(lr, total=800):
    print(f"=== seg-only, chunky data, lr {lr} ===", flush=True)
    pairs = generate_dataset(20, seed=11, categories=CATS)[:8]
    model = HourglassModel.init(ArchitectureConfig.tiny(), seed=11)
    cfg = TrainConfig.tiny(use_completion=False, use_triplet=False,
                           max_iterations=total, seed=11, lr0=lr)
    adam = AdamState.for_params(model.params)
    scan = _batch([s.scan for s in pairs])
    fg_t = np.stack([s.gt_fg.occupancy for s in pairs]).astype(default_dtype())[:, None]
    bg_t = np.stack([s.gt_bg.occupancy for s in pairs]).astype(default_dtype())[:, None]
    for upto in range(200, total + 1, 200):
        train(model, pairs, cfg, adam=adam, start_iteration=upto - 200, max_iterations=upto)
        fg, bg, _ = model.segment(scan)
        ious = [iou(threshold(fg.data[i, 0]), pairs[i].gt_fg) for i in range(8)]
        print(f"  @{upto}: fg_bce={bce(fg, fg_t).item():.4f} bg_bce={bce(bg, bg_t).item():.4f} "
              f"fg_iou={np.mean(ious):.3f} min={min(ious):.3f} "
              f"fg_maxp={fg.data.max():.3f}", flush=True)


def beta2_scan(total=600):
    pairs = generate_dataset(20, seed=11, categories=CATS)[:8]
    for lr, b2 in ((0.002, 0.99), (0.003, 0.99), (0.003, 0.95)):
        print(f"=== joint stability: lr {lr}, beta2 {b2}, {total} it ===", flush=True)
        model = HourglassModel.init(ArchitectureConfig.tiny(), seed=11)
        cfg = TrainConfig.tiny(max_iterations=total, seed=11, lr0=lr)
        adam = AdamState.for_params(model.params, beta2=b2)
        for upto in range(200, total + 1, 200):
            hist = train(model, pairs, cfg, adam=adam,
                         start_iteration=upto - 200, max_iterations=upto)
            out = model.embed_scan(_batch([s.scan for s in pairs]))
            e = out.embedding.data
            z = model.embed_cad(_batch([s.cad for s in pairs])).data
            cmp_ious = [iou(threshold(out.cmp.data[i, 0]), pairs[i].cad) for i in range(8)]
            h = hist[-1]
            print(f"  @{upto}: seg={h.l_seg:.4f} cmp={h.l_cmp:.4f} trip={h.l_trip:.5f} "
                  f"|e|={np.linalg.norm(e, axis=1).mean():.2f} "
                  f"espr={e.std(axis=0).mean():.4f} zspr={z.std(axis=0).mean():.4f} "
                  f"cmpI={np.mean(cmp_ious):.3f}", flush=True)


if __name__ == "__main__":
    seg_only(0.001)
    seg_only(0.003)
    beta2_scan()
