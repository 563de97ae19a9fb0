"""End-to-end run on the synthetic benchmark: reconstruct, detect, evaluate.

The default size finishes in a few minutes on one core.  Pass a larger scene
count and epoch numbers to approach the full toy benchmark:

    python3 demos/04_toy_pipeline.py               # 40 scenes, 2 + 2 epochs
    python3 demos/04_toy_pipeline.py 200 6 10      # the benchmark setting
"""

import sys
import time

from pcad import config, data, train

n_scenes, recon_epochs, detect_epochs = (int(a) for a in (sys.argv[1:] + ["40", "2", "2"][len(sys.argv) - 1:]))
cfg = config.toy_config(training=config.TrainingConfig(recon_epochs=recon_epochs, detect_epochs=detect_epochs,
                                                       validate=False))
scenes = [data.generate_synthetic_scene(train.derive_seed(cfg.seed, "scene", i), class_map=cfg.classes)
          for i in range(n_scenes)]
n_train = int(0.7 * n_scenes)
train_set, test_set = scenes[:n_train], scenes[int(0.8 * n_scenes):]
print(f"{len(train_set)} training scenes, {len(test_set)} test scenes")

t0 = time.time()
recon, curve = train.train_reconstructor(train_set, cfg)
print(f"reconstructor: L_R {curve[0][1]:.5f} -> {curve[-1][1]:.5f} in {time.time() - t0:.0f} s")
bad, good = train.reconstruction_error_split(recon, test_set, cfg)
print(f"mean reconstruction error: withheld shapes {bad:.3f}, known objects {good:.3f}")

t0 = time.time()
detector, _ = train.train_detector(train_set, cfg, recon)
print(f"detector trained in {time.time() - t0:.0f} s")
report = train.evaluate_scenes(detector, recon, test_set, cfg)
print(f"test AUROC {report.auroc:.3f}  AUPR {report.aupr:.3f}  mIoU {report.miou:.3f}")
