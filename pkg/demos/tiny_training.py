"""Train a very small network for a few epochs and watch the metrics move.

This is a smoke-scale run (a couple of minutes on one core); the acceptance
suite runs the full-size version.
"""
import time

from lymphoseg import explain, segnet
from lymphoseg.pipeline import split_dataset
from lymphoseg.train import evaluate_patches, synthetic_dataset, train

patches = synthetic_dataset(n_slides=3, width=256, height=256, counts={0: 23, 1: 23, 2: 23, 3: 23, 4: 18})
split = split_dataset(patches, seed=0)
by_id = {p.patch_id: p for p in patches}
tr, va, te = ([by_id[i] for i in ids] for ids in (split.train, split.val, split.test))
print(f"{len(patches)} patches: {len(tr)} train / {len(va)} val / {len(te)} test")

params = segnet.build_network(segnet.NetworkConfig(widths=(8, 16, 32)))
t0 = time.time()
res = train(params, tr, va, epochs=25, on_epoch=lambda r: print(f"epoch {r.epoch}: train {r.train_loss:.3f} val {r.val_loss:.3f}"))
print(f"{time.time() - t0:.0f}s, best epoch {res.best_epoch}")

pix, cen = evaluate_patches(res.params, te)
for rep in (pix, cen):
    print(f"{rep.regime:12s} macro P/R/F1 = " + " / ".join(f"{v:.3f}" for v in rep.average))

opt = explain.optimize_input(res.params, explain.mean_training_image(tr), steps=100, lr=0.01)
print(f"quadrant loss {opt.losses[0]:.4f} -> {opt.losses[-1]:.4f} over 100 steps")
