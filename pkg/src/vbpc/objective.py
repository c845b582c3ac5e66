"""Stochastic outer loss for coreset learning, and its gradient oracles.

The loss is -(n/|B|) sum_B sum_j y_ij [probit log softmax]_ij + beta_d * KL,
assembled entirely from tape primitives so one backward pass yields the
coreset gradients by direct differentiation through the closed-form inner
solution. Batch features enter as constants: the data and the pool network
are fixed for a coreset step, so gradients flow only into the coreset
leaves. The n/|B| rescaling applies to the likelihood term only; the KL is
unscaled.
"""

from dataclasses import dataclass

import numpy as np

from . import ndiff as nd
from . import network
from .posterior import solve_posterior, kl_to_prior
from .predictive import predictive_moments, probit_log_softmax

FD_COORD_LIMIT = 2000


@dataclass(frozen=True)
class OuterLossBreakdown:
    total: float
    likelihood_term: float
    kl_term: float


def _loss_graph(images, labels, net, batch_phi, batch_onehot, n_total, hyper,
                tape, noise=None):
    """Core assembly shared by the taped loss and the FD oracle."""
    used = images if noise is None else nd.add(images, nd.constant(noise), tape)
    phi = network.features_graph(net, used, tape)
    post = solve_posterior(phi, labels, hyper, tape=tape)
    batch = predictive_moments(post, batch_phi)
    log_probs = probit_log_softmax(batch.mean, batch.variance,
                                   alpha=hyper.alpha, tape=tape)
    picked = nd.sum(nd.hadamard(nd.constant(batch_onehot), log_probs, tape),
                    tape=tape)
    batch_size = batch_onehot.shape[0]
    likelihood = nd.scale(picked, -float(n_total) / batch_size, tape)
    kl_term = nd.scale(kl_to_prior(post), hyper.beta_d, tape)
    total = nd.add(likelihood, kl_term, tape)
    return total, likelihood, kl_term


def outer_loss(coreset, net, batch, n_total, hyper, tape, noise=None):
    """Build the stochastic outer loss on `tape`.

    coreset supplies images (nhat x d) and labels (nhat x k); batch is
    (X_b, Y_b) with one-hot Y_b. Registers the coreset leaves under the
    labels "images" / "labels" and returns (loss node, breakdown).
    """
    x_b, y_b = batch
    if y_b.shape[0] == 0:
        raise ValueError("empty batch")
    images = tape.leaf(nd.Array(coreset.images), label="images")
    labels = tape.leaf(nd.Array(coreset.labels), label="labels")
    batch_phi = nd.Array(network.features(net, x_b))
    total, likelihood, kl_term = _loss_graph(
        images, labels, net, batch_phi, np.asarray(y_b, dtype=np.float64),
        n_total, hyper, tape, noise)
    return total, OuterLossBreakdown(total.item(), likelihood.item(),
                                     kl_term.item())


def coreset_grad(loss, tape):
    """(grad images, grad labels) of a loss built by outer_loss."""
    grads = nd.backward(tape, loss)
    return (grads[tape.leaf_id("images")].data,
            grads[tape.leaf_id("labels")].data)


def loss_value(images, labels, net, batch, n_total, hyper, noise=None):
    """Un-taped forward evaluation of the same loss (used by the oracle)."""
    x_b, y_b = batch
    batch_phi = nd.Array(network.features(net, x_b))
    total, _, _ = _loss_graph(nd.constant(images), nd.constant(labels), net,
                              batch_phi, np.asarray(y_b, dtype=np.float64),
                              n_total, hyper, None, noise)
    return total.item()


def fd_grad_oracle(coreset, net, batch, n_total, hyper, eps=1e-5, noise=None):
    """Central-difference gradient of the outer loss w.r.t. the coreset.

    Two forward evaluations per coordinate; guarded to tiny instances. The
    oracle shares only the forward loss definition with the taped path, not
    the adjoints it is checking.
    """
    images = np.array(coreset.images, dtype=np.float64)
    labels = np.array(coreset.labels, dtype=np.float64)
    if images.size + labels.size > FD_COORD_LIMIT:
        raise ValueError(
            f"instance too large for finite differences: "
            f"{images.size + labels.size} > {FD_COORD_LIMIT} coordinates")

    def central(target):
        grad = np.zeros_like(target)
        flat, gflat = target.ravel(), grad.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_value(images, labels, net, batch, n_total, hyper, noise)
            flat[i] = orig - eps
            down = loss_value(images, labels, net, batch, n_total, hyper, noise)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * eps)
        return grad

    return central(images), central(labels)
