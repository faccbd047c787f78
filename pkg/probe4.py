"""Capacity anchor (tiny AE) and Adam-epsilon stability scan."""
import time

import numpy as np

from scancad.autodiff import AdamState, Tensor, adam_step, bce, default_dtype
from scancad.datagen import generate_dataset
from scancad.nets import ArchitectureConfig, AutoencoderModel, HourglassModel
from scancad.trainer import TrainConfig, train
from scancad.voxel import iou, threshold

CATS = ("box", "cylinder", "table", "chair")


def _batch(grids):
    return Tensor(np.stack([g.occupancy for g in grids]).astype(default_dtype())[:, None])


def ae_tiny(lr, total=2000):
    print(f"=== tiny AE anchor (base 2, embed 32, 8 cads, lr {lr}) ===", flush=True)
    cads = [s.cad for s in generate_dataset(8, seed=11, categories=CATS)]
    arch = ArchitectureConfig.tiny()
    ae = AutoencoderModel.init(arch, seed=11)
    adam = AdamState.for_params(ae.params)
    batch = _batch(cads)
    t0 = time.monotonic()
    for it in range(1, total + 1):
        _, recon = ae.autoencode(batch)
        loss = bce(recon, batch.data)
        ae.zero_grad()
        loss.backward()
        adam_step(ae.params, ae.gradients(), adam, lr)
        if it % 250 == 0:
            scores = [iou(threshold(recon.data[i, 0]), cads[i]) for i in range(8)]
            print(f"  @{it}: loss={loss.item():.4f} iou_mean={np.mean(scores):.3f} "
                  f"min={min(scores):.3f} t={time.monotonic()-t0:.0f}s", flush=True)


def eps_scan(lr=0.003, total=600):
    pairs = generate_dataset(20, seed=11, categories=CATS)[:8]
    for eps in (1e-8, 1e-6, 1e-5):
        print(f"=== joint stability: lr {lr}, eps {eps:g}, {total} it ===", flush=True)
        model = HourglassModel.init(ArchitectureConfig.tiny(), seed=11)
        cfg = TrainConfig.tiny(max_iterations=total, seed=11, lr0=lr)
        adam = AdamState.for_params(model.params, epsilon=eps)
        for upto in range(200, total + 1, 200):
            hist = train(model, pairs, cfg, adam=adam,
                         start_iteration=upto - 200, max_iterations=upto)
            out = model.embed_scan(_batch([s.scan for s in pairs]))
            e = out.embedding.data
            z = model.embed_cad(_batch([s.cad for s in pairs])).data
            h = hist[-1]
            print(f"  @{upto}: seg={h.l_seg:.4f} cmp={h.l_cmp:.4f} trip={h.l_trip:.5f} "
                  f"|e|={np.linalg.norm(e, axis=1).mean():.2f} "
                  f"espr={e.std(axis=0).mean():.4f} zspr={z.std(axis=0).mean():.4f}", flush=True)


if __name__ == "__main__":
    ae_tiny(0.003)
    eps_scan()
