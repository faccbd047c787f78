"""Short lr/width sweep before pinning the tiny-profile defaults."""

import time

import numpy as np

from scancad.autodiff import Tensor, default_dtype
from scancad.datagen import generate_dataset
from scancad.nets import ArchitectureConfig, AutoencoderModel, HourglassModel
from scancad.trainer import TrainConfig, train, train_autoencoder
from scancad.voxel import iou, threshold

CATS = ("box", "cylinder", "table", "chair")


def _batch(grids):
    return Tensor(np.stack([g.occupancy for g in grids]).astype(default_dtype())[:, None])


def sweep_joint():
    print("=== joint lr sweep (500 it, batch 8) ===", flush=True)
    samples = generate_dataset(20, seed=11, categories=CATS)[:8]
    for lr in (0.002, 0.003, 0.005):
        model = HourglassModel.init(ArchitectureConfig.tiny(), seed=11)
        cfg = TrainConfig.tiny(max_iterations=500, seed=11, lr0=lr)
        t0 = time.monotonic()
        hist = train(model, samples, cfg)
        h = lambda i: hist[i].total
        last = hist[-1]
        print(
            f"lr={lr}: @10={h(9):.4f} @100={h(99):.4f} @500={h(499):.4f} "
            f"[seg={last.l_seg:.4f} cmp={last.l_cmp:.4f} trip={last.l_trip:.4f}] "
            f"t={time.monotonic() - t0:.0f}s",
            flush=True,
        )


def sweep_ae():
    print("=== AE width/lr sweep (400 it) ===", flush=True)
    samples = generate_dataset(4, seed=21, categories=CATS)
    cads = [s.cad for s in samples]
    for base, lr in ((4, 0.001), (4, 0.003), (8, 0.001)):
        arch = ArchitectureConfig(base_channels=base, latent_dim=64, embed_dim=32,
                                  residual_blocks_per_encoder=4, grid_dim=32)
        model = AutoencoderModel.init(arch, seed=21)
        t0 = time.monotonic()
        losses = train_autoencoder(model, cads, iterations=400, lr=lr, seed=21)
        _, recon = model.autoencode(_batch(cads))
        ious = [iou(threshold(recon.data[i, 0]), cads[i]) for i in range(4)]
        print(
            f"base={base} lr={lr}: loss@1={losses[0]:.4f} @100={losses[99]:.4f} "
            f"@400={losses[-1]:.4f} ious={['%.3f' % v for v in ious]} "
            f"pstd={recon.data.std():.4f} t={time.monotonic() - t0:.0f}s",
            flush=True,
        )


if __name__ == "__main__":
    sweep_ae()
    sweep_joint()
