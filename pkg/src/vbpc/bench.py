"""Naive (dense h x h) vs efficient loss evaluation: time and tracked memory.

The efficient mode runs the exact training-path loss (tape included) on a
random instance. The naive mode materializes the shared covariance through
the primal h x h inverse, takes its log-determinant and trace directly, and
computes predictive variances through the dense matrix. Both paths flow
through the tracked array layer, so peak live float64 elements are
comparable evidence.
"""

import math
import time

import numpy as np

from . import ndiff as nd
from . import network
from .objective import _loss_graph
from .posterior import Hyperparams
from .predictive import probit_log_softmax

NAIVE_H_LIMIT = 8192


def _instance(h, nhat, k, batch, seed):
    rng = np.random.default_rng(seed)
    phi_hat = rng.standard_normal((nhat, h)) / math.sqrt(h)
    labels = rng.standard_normal((nhat, k))
    phi_b = rng.standard_normal((batch, h)) / math.sqrt(h)
    y_b = np.eye(k)[rng.integers(0, k, batch)]
    hyper = Hyperparams(rho=1.0, gamma=100.0, beta_s=float(nhat), beta_d=1e-8)
    return phi_hat, labels, phi_b, y_b, hyper


def efficient_loss(phi_hat, labels, phi_b, y_b, n_total, hyper):
    """The training loss path: identity feature map over raw features."""
    h = phi_hat.shape[1]
    net = network.init_net((h,), y_b.shape[1], seed=0)
    tape = nd.Tape()
    images = tape.leaf(nd.Array(phi_hat), label="images")
    lab = tape.leaf(nd.Array(labels), label="labels")
    total, _, _ = _loss_graph(images, lab, net, nd.Array(phi_b), y_b,
                              n_total, hyper, tape)
    return total.item()


def naive_loss(phi_hat, labels, phi_b, y_b, n_total, hyper):
    """Dense route: V* materialized via the primal h x h system."""
    h = phi_hat.shape[1]
    k = y_b.shape[1]
    g = hyper.gamma / hyper.beta_s
    phi = nd.Array(phi_hat)
    lab = nd.Array(labels)
    phi_t = nd.transpose(phi)
    eye_h = nd.eye(h)
    primal = nd.add(nd.scale(eye_h, hyper.rho), nd.scale(nd.matmul(phi_t, phi), g))
    v_star = nd.cholesky_solve_spd(primal, eye_h)   # V* = primal^{-1}, h x h
    means = nd.scale(nd.matmul(v_star, nd.matmul(phi_t, lab)), g)

    logdet_v = nd.logdet_spd(v_star).item()
    trace_v = nd.trace_matmul(v_star, eye_h).item()
    msq = nd.sum(nd.hadamard(means, means)).item()
    kl = 0.5 * (k * (-h * math.log(hyper.rho) - logdet_v) - k * h
                + k * hyper.rho * trace_v + hyper.rho * msq)

    bphi = nd.Array(phi_b)
    mean_te = nd.matmul(bphi, means)
    spread = nd.matmul(bphi, v_star)
    variance = nd.sum(nd.hadamard(spread, bphi), axis=1)
    log_probs = probit_log_softmax(mean_te, variance, alpha=hyper.alpha)
    picked = float((y_b * log_probs.data).sum())
    likelihood = -(n_total / y_b.shape[0]) * picked
    return likelihood + hyper.beta_d * kl


def run_bench(h, nhat, mode, reps=3, k=10, batch=128, seed=0, n_total=None):
    """Time the loss evaluation and report tracked allocation peaks.

    Returns {"mode", "h", "peak_f64", "ms_per_100", "largest_block",
    "loss"}; ms_per_100 extrapolates mean wall time per evaluation.
    """
    if mode not in ("naive", "efficient"):
        raise ValueError(f"unknown bench mode {mode!r}")
    if mode == "naive" and h > NAIVE_H_LIMIT:
        raise ValueError(f"naive mode refuses h={h} > {NAIVE_H_LIMIT}")
    if reps < 1:
        raise ValueError("reps must be >= 1")
    phi_hat, labels, phi_b, y_b, hyper = _instance(h, nhat, k, batch, seed)
    n_total = n_total if n_total is not None else 50 * batch
    evaluate = efficient_loss if mode == "efficient" else naive_loss

    loss = evaluate(phi_hat, labels, phi_b, y_b, n_total, hyper)  # warmup
    with nd.track_allocations() as window:
        started = time.perf_counter()
        for _ in range(reps):
            evaluate(phi_hat, labels, phi_b, y_b, n_total, hyper)
        elapsed = time.perf_counter() - started
    return {"mode": mode,
            "h": h,
            "nhat": nhat,
            "peak_f64": int(window.peak - window.base),
            "largest_block": int(window.largest_block),
            "ms_per_100": 100.0 * (elapsed / reps) * 1e3,
            "loss": loss}
