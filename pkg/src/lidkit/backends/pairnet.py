"""Siamese i-vector post-processing net trained on same/different-language pairs.

Both members of a pair go through the one stored copy of the parameters; the
pair score is ``sigmoid(scale * cos(e_a, e_b) + offset)``.
"""

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit

from ..errors import ConfigError, DataError, LidWarning

log = logging.getLogger(__name__)


@dataclass
class PairNet:
    layers: list = field(default_factory=list)   # [(W, b)], logistic sigmoid
    final_linear: np.ndarray = None               # (embedding_dim, last hidden) or None
    scale: np.ndarray = field(default_factory=lambda: np.array([5.0]))
    offset: np.ndarray = field(default_factory=lambda: np.array([0.0]))
    input_mean: np.ndarray = None
    input_scale: np.ndarray = None

    @property
    def embedding_dim(self):
        if self.final_linear is not None:
            return self.final_linear.shape[0]
        return self.layers[-1][0].shape[0]

    def parameters(self):
        """Trainable arrays by name (live views, updated in place)."""
        params = {}
        for i, (W, b) in enumerate(self.layers):
            params[f"W{i}"] = W
            params[f"b{i}"] = b
        if self.final_linear is not None:
            params["E"] = self.final_linear
        params["scale"] = self.scale
        params["offset"] = self.offset
        return params

    def embed(self, x):
        return _forward(self, np.atleast_2d(np.asarray(x, dtype=np.float64)))[0]


def _init_layer(rng, fan_out, fan_in):
    return rng.uniform(-1.0, 1.0, (fan_out, fan_in)) / np.sqrt(fan_in)


def _forward(net, x):
    h = (x - net.input_mean) / net.input_scale
    acts = [h]
    for W, b in net.layers:
        h = expit(h @ W.T + b)
        acts.append(h)
    e = h @ net.final_linear.T if net.final_linear is not None else h
    return e, acts


def _backward(net, acts, de, grads):
    """Accumulate parameter gradients for d loss / d embedding = ``de``."""
    if net.final_linear is not None:
        grads["E"] += de.T @ acts[-1]
        dh = de @ net.final_linear
    else:
        dh = de
    for i in range(len(net.layers) - 1, -1, -1):
        W, _ = net.layers[i]
        out = acts[i + 1]
        dz = dh * out * (1.0 - out)
        grads[f"W{i}"] += dz.T @ acts[i]
        grads[f"b{i}"] += dz.sum(axis=0)
        dh = dz @ W


def _cosine(ea, eb):
    na = np.linalg.norm(ea, axis=1)
    nb = np.linalg.norm(eb, axis=1)
    na = np.maximum(na, 1e-12)
    nb = np.maximum(nb, 1e-12)
    return np.sum(ea * eb, axis=1) / (na * nb), na, nb


def pairnet_loss_and_grad(net, xa, xb, same):
    """Mean binary cross-entropy over pairs and its gradient for every parameter.

    Gradients from the left and right members are summed into the shared
    parameters.
    """
    same = np.asarray(same, dtype=np.float64)
    ea, acts_a = _forward(net, xa)
    eb, acts_b = _forward(net, xb)
    cos, na, nb = _cosine(ea, eb)
    z = net.scale[0] * cos + net.offset[0]
    n = len(same)
    loss = -np.mean(same * log_expit(z) + (1.0 - same) * log_expit(-z))
    dz = (expit(z) - same) / n
    grads = {k: np.zeros_like(v) for k, v in net.parameters().items()}
    grads["scale"][0] = np.sum(dz * cos)
    grads["offset"][0] = np.sum(dz)
    dcos = dz * net.scale[0]
    dea = dcos[:, None] * (eb / (na * nb)[:, None] - cos[:, None] * ea / (na ** 2)[:, None])
    deb = dcos[:, None] * (ea / (na * nb)[:, None] - cos[:, None] * eb / (nb ** 2)[:, None])
    _backward(net, acts_a, dea, grads)
    _backward(net, acts_b, deb, grads)
    return float(loss), grads


def generate_pairs(labels, rounds=20, balance=False, seed=0):
    """Random same/different-language index pairs.

    Each round gives every vector one positive and one negative partner.
    With ``balance`` a vector of language l gets ``ceil(n_max / n_l)``
    partners of each kind, so minority languages are oversampled.
    Returns an int array of rows ``(index_a, index_b, same)``.
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    langs = sorted(set(labels.tolist()))
    members = {lang: np.flatnonzero(labels == lang) for lang in langs}
    if len(langs) < 2:
        raise DataError("pair generation needs at least two languages")
    n_max = max(len(m) for m in members.values())
    for lang, m in members.items():
        if len(m) < 2:
            warnings.warn(f"language {lang!r} has a single vector; no positive pairs for it",
                          LidWarning, stacklevel=2)
    pairs = []
    for _ in range(rounds):
        for i, lab in enumerate(labels):
            own = members[lab]
            reps = int(np.ceil(n_max / len(own))) if balance else 1
            others = np.flatnonzero(labels != lab)
            for _ in range(reps):
                if len(own) >= 2:
                    # uniform over own minus {i}: skip past i's slot
                    k = rng.integers(len(own) - 1)
                    if own[k] >= i:
                        k += 1
                    pairs.append((i, own[k], 1))
                pairs.append((i, others[rng.integers(len(others))], 0))
    return np.array(pairs, dtype=int).reshape(-1, 3)


def _new_net(rng, x, first_hidden):
    net = PairNet(input_mean=x.mean(axis=0), input_scale=np.maximum(x.std(axis=0), 1e-8))
    net.layers.append((_init_layer(rng, first_hidden, x.shape[1]), np.zeros(first_hidden)))
    return net


def _sgd(net, x, pairs, epochs, lr, batch_size, rng, history):
    params = net.parameters()
    for _ in range(epochs):
        order = rng.permutation(len(pairs))
        total = 0.0
        for start in range(0, len(order), batch_size):
            batch = pairs[order[start:start + batch_size]]
            loss, grads = pairnet_loss_and_grad(net, x[batch[:, 0]], x[batch[:, 1]], batch[:, 2])
            for name, g in grads.items():
                params[name] -= lr * g
            total += loss * len(batch)
        if history is not None:
            history.append(total / len(pairs))


def pairnet_train(ivectors, labels, hidden_dims=(256,), embedding_dim=64, epochs=15, lr=0.5,
                  seed=0, rounds=20, balance=True, batch_size=128, history=None):
    """Layer-by-layer training of the tied-weight pair network.

    Stage 1 trains the first hidden layer alone (its sigmoid outputs are the
    embedding); every further hidden layer and finally the linear embedding
    layer are appended in turn and the whole stack retrained.  Each stage
    runs ``epochs`` passes of plain minibatch gradient descent at fixed
    ``lr``.  Weights start uniform in +/- 1/sqrt(fan_in).
    """
    hidden_dims = list(hidden_dims)
    if not hidden_dims or min(hidden_dims) < 1 or embedding_dim < 1:
        raise ConfigError("pairnet needs positive hidden_dims and embedding_dim")
    x = np.asarray(ivectors, dtype=np.float64)
    labels = np.asarray(labels)
    if len(set(labels.tolist())) < 2:
        raise DataError("pairnet needs at least two languages")
    rng = np.random.default_rng(seed)
    pairs = generate_pairs(labels, rounds, balance, seed)
    net = _new_net(rng, x, hidden_dims[0])
    _sgd(net, x, pairs, epochs, lr, batch_size, rng, history)
    for h in hidden_dims[1:]:
        prev = net.layers[-1][0].shape[0]
        net.layers.append((_init_layer(rng, h, prev), np.zeros(h)))
        _sgd(net, x, pairs, epochs, lr, batch_size, rng, history)
    net.final_linear = _init_layer(rng, embedding_dim, hidden_dims[-1])
    _sgd(net, x, pairs, epochs, lr, batch_size, rng, history)
    return net


def pairnet_centroids(net, ivectors, labels):
    """Unit-norm mean embedding per language."""
    labels = np.asarray(labels)
    emb = net.embed(ivectors)
    cents = {}
    for lang in sorted(set(labels.tolist())):
        c = emb[labels == lang].mean(axis=0)
        cents[lang] = c / max(np.linalg.norm(c), 1e-300)
    return cents


def pairnet_score(net, centroids, test):
    """Cosine between the embedded test vector(s) and each language centroid."""
    single = np.ndim(test) == 1
    e = net.embed(test)
    order = sorted(centroids)
    C = np.stack([centroids[k] for k in order])
    norms = np.linalg.norm(e, axis=1, keepdims=True)
    if np.any(norms == 0):
        warnings.warn("zero embedding; its scores are set to zero", LidWarning, stacklevel=2)
    cn = np.linalg.norm(C, axis=1)
    out = (e @ C.T) / np.where(norms == 0, np.inf, norms) / np.where(cn == 0, np.inf, cn)
    out = np.clip(out, -1.0, 1.0)
    return out[0] if single else out
