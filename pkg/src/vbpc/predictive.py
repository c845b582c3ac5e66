"""Predictive moments, probit-approximate expected log-softmax, and
single-forward-pass Bayesian model averaging.

For a test feature phi the logits are Gaussian with mean phi^T m_j and one
shared scalar variance per input. The expected log-softmax under that
Gaussian is approximated by

    log softmax( mean / sqrt(1 + alpha * variance) ),   alpha = pi/8,

which is exact at zero variance. A seeded Monte Carlo estimator of the same
expectation serves as the test oracle.
"""

import numpy as np

from . import ndiff as nd
from .posterior import ALPHA_PROBIT

VARIANCE_CLAMP = -1e-12


class PredictiveBatch:
    """Per-input logit means (n x k) and shared scalar variances (n x 1)."""

    def __init__(self, mean, variance):
        self.mean = mean
        self.variance = variance

    @property
    def n(self):
        return self.mean.shape[0]


def _clamp_variance(variance, tape):
    if float(variance.data.min()) < VARIANCE_CLAMP:
        raise ValueError(
            f"negative predictive variance {variance.data.min():.3e} beyond "
            f"round-off clamp; the posterior solve is broken")
    return nd.relu(variance, tape)


def predictive_moments(p, phi_batch):
    """Gaussian predictive moments for a feature batch (n x h).

    mean = Phi_b @ M; variance_i uses the stored nhat x nhat factorization:
    (beta_s/gamma) (c ||phi_i||^2 - c^2 phi_i Phi^T A^{-1} Phi phi_i^T) with
    c = gamma/(rho beta_s). No h x h buffer; differentiable on the tape.
    """
    hyper = p.hyper
    tape = p.tape
    phi_batch = nd.constant(phi_batch)
    if phi_batch.shape[1] != hyper.h:
        raise nd.ShapeError(
            f"feature dim {phi_batch.shape[1]} != posterior dim {hyper.h}")
    mean = nd.matmul(phi_batch, p.means, tape)

    cross = nd.matmul(phi_batch, nd.transpose(p.phi, tape), tape)     # n x nhat
    solved = nd.cholesky_solve_spd(p.system, nd.transpose(cross, tape), tape)
    quad = nd.sum(nd.hadamard(cross, nd.transpose(solved, tape), tape),
                  axis=1, tape=tape)                                   # n x 1
    norms = nd.sum(nd.hadamard(phi_batch, phi_batch, tape), axis=1, tape=tape)
    coeff = hyper.gamma / (hyper.rho ** 2 * hyper.beta_s)
    variance = nd.sub(nd.scale(norms, 1.0 / hyper.rho, tape),
                      nd.scale(quad, coeff, tape), tape)
    return PredictiveBatch(mean, _clamp_variance(variance, tape))


def probit_log_softmax(mean, variance, alpha=ALPHA_PROBIT, tape=None):
    """Probit-scaled expected log-softmax, row-wise.

    mean: n x k, variance: n x 1 with entries >= 0 (round-off clamped).
    Row i is log softmax(mean_i / sqrt(1 + alpha * variance_i)).
    """
    mean = nd.constant(mean)
    variance = nd.constant(variance)
    if variance.shape != (mean.shape[0], 1):
        raise nd.ShapeError(f"variance shape {variance.shape} for mean {mean.shape}")
    variance = _clamp_variance(variance, tape)
    scaling = nd.rsqrt_shift(variance, alpha=alpha, tape=tape)
    return nd.row_log_softmax(nd.hadamard(mean, scaling, tape), tape)


def mc_log_softmax(mean, variance, samples, seed, return_stderr=False):
    """Monte Carlo estimate of E[log softmax(z)], z ~ N(mean, variance I_k).

    mean is a k-vector, variance a scalar. Deterministic for a fixed seed;
    chunked so 1e6-sample runs stay cheap on memory. This is the oracle the
    probit approximation is validated against.
    """
    mean = np.asarray(mean, dtype=np.float64).ravel()
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    sd = np.sqrt(variance)
    k = mean.size
    total = np.zeros(k)
    total_sq = np.zeros(k)
    done = 0
    while done < samples:
        m = min(100_000, samples - done)
        z = mean + sd * rng.standard_normal((m, k))
        z -= z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        total += logp.sum(axis=0)
        total_sq += (logp ** 2).sum(axis=0)
        done += m
    est = total / samples
    if not return_stderr:
        return est
    var = np.maximum(total_sq / samples - est ** 2, 0.0)
    return est, np.sqrt(var / samples)


def bma_predict(p, phi_test):
    """Model-averaged class probabilities for test features (n x k numpy).

    Softmax of the probit-scaled predictive means; needs exactly one feature
    evaluation per input since the moments come from the stored posterior.
    """
    batch = predictive_moments(p, phi_test)
    logp = probit_log_softmax(batch.mean, batch.variance,
                              alpha=p.hyper.alpha, tape=p.tape)
    return np.exp(logp.data)


def metrics(log_probs, labels):
    """(accuracy, mean negative log-likelihood) for row log-distributions.

    labels may be integer class ids or one-hot rows. Argmax ties resolve to
    the lowest class index.
    """
    logp = log_probs.data if isinstance(log_probs, nd.Array) else np.asarray(log_probs)
    labels = np.asarray(labels)
    idx = labels.argmax(axis=1) if labels.ndim == 2 else labels.astype(np.int64)
    if idx.min() < 0 or idx.max() >= logp.shape[1]:
        raise ValueError("label index out of range")
    acc = float((logp.argmax(axis=1) == idx).mean())
    nll = float(-logp[np.arange(logp.shape[0]), idx].mean())
    return acc, nll
