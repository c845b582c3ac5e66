"""Probit-scaled expected log-softmax against the Monte Carlo oracle.

The probit rule is exact at zero variance and shrinks confidence as the
predictive variance grows; against the true expected log-softmax it carries
a Jensen bias that grows with the variance (it is a training surrogate, not
an unbiased estimator).
"""

import numpy as np

from vbpc import mc_log_softmax, probit_log_softmax

mean = np.array([1.0, 0.0])

print("variance   probit[0]   MC[0] (1e6 samples)   gap")
for var in (0.0, 0.1, 0.25, 1.0, 4.0):
    probit = probit_log_softmax(mean.reshape(1, -1), np.array([[var]])).data[0]
    mc = mc_log_softmax(mean, var, samples=1_000_000, seed=7)
    print(f"  {var:4.2f}    {probit[0]:+.5f}    {mc[0]:+.5f}        "
          f"{abs(probit[0] - mc[0]):.5f}")

print("\nconfidence shrinks with variance (max class probability):")
wide = np.array([[2.0, 0.3, -1.0]])
for var in (0.0, 1.0, 4.0, 16.0):
    probs = np.exp(probit_log_softmax(wide, np.array([[var]])).data)
    print(f"  variance {var:5.1f}: max prob {probs.max():.4f} "
          f"(argmax stays class {probs.argmax()})")
