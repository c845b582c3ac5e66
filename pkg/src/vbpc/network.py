"""Feature extractor (ReLU multilayer perceptron), its Gaussian-likelihood
training step, and the rotating model pool.

The network is a deterministic feature map followed by a linear head; only
the head enters the Bayesian posterior, but the Gaussian-likelihood step
trains every parameter. Pool slots are retrained for a fixed period and then
reborn from a deterministic seed stream, so the coreset never overfits one
feature map.
"""

from dataclasses import dataclass, field

import numpy as np

from . import ndiff as nd
from .optim import AdamState, adam_step, sgd_step


@dataclass(frozen=True)
class FeatureNet:
    """widths = (d, w1, ..., h); head maps features to k logits (no bias)."""

    widths: tuple
    weights: tuple          # per feature layer, shape (w_in, w_out)
    biases: tuple           # per feature layer, shape (1, w_out)
    head: np.ndarray        # (h, k)

    @property
    def feature_dim(self):
        return self.widths[-1]

    @property
    def params(self):
        return list(self.weights) + list(self.biases) + [self.head]

    def replace_params(self, params):
        n = len(self.weights)
        return FeatureNet(self.widths, tuple(params[:n]),
                          tuple(params[n:2 * n]), params[2 * n])


def init_net(widths, k, seed):
    """Fresh network: weights ~ N(0, 1/fan_in), biases zero, per seed."""
    widths = tuple(int(w) for w in widths)
    if len(widths) < 1 or any(w < 1 for w in widths) or k < 1:
        raise ValueError(f"invalid widths {widths} / classes {k}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for w_in, w_out in zip(widths[:-1], widths[1:]):
        weights.append(rng.standard_normal((w_in, w_out)) / np.sqrt(w_in))
        biases.append(np.zeros((1, w_out)))
    head = rng.standard_normal((widths[-1], k)) / np.sqrt(widths[-1])
    return FeatureNet(widths, tuple(weights), tuple(biases), head)


def features(net, x):
    """Plain numpy forward pass through the feature layers (head excluded)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] != net.widths[0]:
        raise nd.ShapeError(f"input dim {x.shape[1]} != net input {net.widths[0]}")
    for w, b in zip(net.weights, net.biases):
        x = np.maximum(x @ w + b, 0.0)
    return x


def features_graph(net, x, tape, param_arrays=None):
    """Taped forward pass. `x` is an Array (a leaf if the coreset is being
    trained); param_arrays supplies leaf Arrays when the net itself is being
    trained, otherwise parameters enter as constants."""
    if param_arrays is None:
        ws = [nd.constant(w) for w in net.weights]
        bs = [nd.constant(b) for b in net.biases]
    else:
        n = len(net.weights)
        ws, bs = param_arrays[:n], param_arrays[n:2 * n]
    out = x
    for w, b in zip(ws, bs):
        out = nd.relu(nd.add(nd.matmul(out, w, tape), b, tape), tape)
    return out


def gaussian_likelihood_loss(net, images, labels, gamma, tape, param_arrays):
    """(gamma/2) ||Y - features(X) @ W||_F^2 on the tape."""
    phi = features_graph(net, nd.constant(images), tape, param_arrays)
    head = param_arrays[-1] if param_arrays is not None else nd.constant(net.head)
    resid = nd.sub(nd.constant(labels), nd.matmul(phi, head, tape), tape)
    return nd.scale(nd.sum(nd.hadamard(resid, resid, tape), tape=tape),
                    gamma / 2.0, tape)


def gaussian_step(net, images, labels, gamma, lr, state=None, plain=False):
    """One optimizer step on the Gaussian likelihood over all parameters.

    Adam by default (`state` carries the moments; pass None to start fresh);
    plain=True uses a bare gradient step for hand-checkable tests. Returns
    (new_net, new_state).
    """
    tape = nd.Tape()
    leaves = [tape.leaf(nd.Array(p)) for p in net.params]
    loss = gaussian_likelihood_loss(net, images, labels, gamma, tape, leaves)
    grad_map = nd.backward(tape, loss)
    grads = [grad_map[tape.node_id(leaf)].data for leaf in leaves]
    params = [p for p in net.params]
    if plain:
        return net.replace_params(sgd_step(params, grads, lr)), state
    if state is None:
        state = AdamState.init(params)
    state, params = adam_step(state, params, grads, lr)
    return net.replace_params(params), state


@dataclass
class ModelPool:
    """P rotating feature networks with per-slot step counters.

    A slot that reaches `period` updates is reinitialized from the seed
    stream (seed, slot, generation) and its counter and optimizer state
    reset. Mutated by exactly one training loop.
    """

    nets: list
    counters: list
    period: int
    widths: tuple
    k: int
    seed: int
    generations: list = field(default_factory=list)
    opt_states: list = field(default_factory=list)

    def __post_init__(self):
        if not self.generations:
            self.generations = [0] * len(self.nets)
        if not self.opt_states:
            self.opt_states = [None] * len(self.nets)


def _slot_seed(seed, slot, generation):
    return np.random.SeedSequence([seed, slot, generation])


def pool_new(p, widths, k, seed, period):
    """P independently seeded networks, counters at zero."""
    if p < 1:
        raise ValueError("pool size must be >= 1")
    nets = [init_net(widths, k, _slot_seed(seed, i, 0)) for i in range(p)]
    return ModelPool(nets=nets, counters=[0] * p, period=period,
                     widths=tuple(widths), k=k, seed=seed)


def pool_sample(pool, rng):
    """Uniformly pick a slot; returns (index, live network)."""
    idx = int(rng.integers(len(pool.nets)))
    return idx, pool.nets[idx]


def pool_update(pool, index, images, labels, gamma, lr):
    """Gaussian step on one slot, then rotate it if its period is up."""
    net, state = gaussian_step(pool.nets[index], images, labels, gamma, lr,
                               state=pool.opt_states[index])
    pool.nets[index] = net
    pool.opt_states[index] = state
    pool.counters[index] += 1
    if pool.counters[index] >= pool.period:
        pool.generations[index] += 1
        pool.nets[index] = init_net(
            pool.widths, pool.k,
            _slot_seed(pool.seed, index, pool.generations[index]))
        pool.counters[index] = 0
        pool.opt_states[index] = None
