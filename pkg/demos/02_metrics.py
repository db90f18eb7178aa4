# Image AUROC, pixel AUROC and AUPRO on hand-made score maps.
# Run: python demos/02_metrics.py
import numpy as np

from ulsad.inference import normalize_map
from ulsad.metrics import aupro, auroc, pixel_auroc, pro_curve

print("AUROC of a simple ranking:", auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]))  # 0.75

# two defects on a 16x16 image: a big blob and a small speck
mask = np.zeros((16, 16), dtype=bool)
mask[2:8, 2:8] = True
mask[12, 12] = True

rng = np.random.default_rng(0)
noise = rng.normal(0.0, 0.3, size=mask.shape)

# map A finds only the big blob; map B finds both, more weakly
map_a = noise + 2.0 * np.pad(np.ones((6, 6)), ((2, 8), (2, 8)))
map_b = noise + 1.0 * mask

for name, m in (("finds blob only", map_a), ("finds both", map_b)):
    print(f"{name:16s} pixel AUROC {pixel_auroc([m], [mask]):.3f}   AUPRO {aupro([m], [mask]):.3f}")
# pixel AUROC is dominated by the big region; AUPRO weights every region equally

fpr, pro = pro_curve([map_b], [mask])
print("first points of the PRO curve:", list(zip(fpr[:4].round(3), pro[:4].round(3))))

# quantile normalisation is monotone, so it leaves every ranking metric unchanged
norm = normalize_map(map_b, 0.2, 1.1)
print("AUPRO before/after normalisation:", aupro([map_b], [mask]), aupro([norm], [mask]))
