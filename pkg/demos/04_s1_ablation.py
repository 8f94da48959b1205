"""Directional comparison on S1 over five seeds: quintuplet loss vs. none, attention vs. average pooling.

Run: python3 demos/04_s1_ablation.py   (about 3 minutes on one core)
"""
import numpy as np

from photorec.benchmark import s1_run

runs = []
for seed in range(5):
    r = s1_run(seed)
    runs.append(r)
    print(f"seed {seed}: " + "  ".join(f"{k} {v:.4f}" for k, v in r.items()))

wins = sum(r["MEAL"] > r["no-visual-similarity"] for r in runs)
print(f"MEAL beats the no-visual-similarity variant in {wins}/5 seeds")
for name in runs[0]:
    vals = [r[name] for r in runs]
    print(f"{name:22s} mean MAP@5 {np.mean(vals):.4f} (sd {np.std(vals):.4f})")
