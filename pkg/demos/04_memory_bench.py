"""Naive (materialized h x h covariance) vs efficient loss evaluation.

The efficient route stores the nhat x h features and one nhat x nhat
Cholesky factor; the naive route pays O(h^2) memory and O(h^3) time.
"""

from vbpc import run_bench

H, NHAT = 2048, 100
print(f"loss + KL evaluation at h={H}, nhat={NHAT}, k=10, batch=128\n")
rows = []
for mode, reps in (("efficient", 5), ("naive", 1)):
    out = run_bench(h=H, nhat=NHAT, mode=mode, reps=reps)
    rows.append(out)
    print(f"{mode:9s}  peak {out['peak_f64'] * 8 / 1e6:8.1f} MB   "
          f"{out['ms_per_100'] / 1e3:8.2f} s per 100 evals   "
          f"largest block {out['largest_block'] * 8 / 1e6:.1f} MB")

eff, naive = rows
print(f"\nsame loss value from both routes: "
      f"{abs(eff['loss'] - naive['loss']) / abs(naive['loss']):.2e} relative diff")
print(f"memory ratio {eff['peak_f64'] / naive['peak_f64']:.3f}, "
      f"time ratio {eff['ms_per_100'] / naive['ms_per_100']:.4f}")
print(f"efficient path never allocates an h^2 = {H * H:,}-element buffer: "
      f"{eff['largest_block'] < H * H}")
