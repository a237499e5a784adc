"""OCML: a transfer module that turns a class prototype into the weight
vector of a one-class classifier.

The transfer module is a small fully connected map on the main embedding
space: w_c = g(prototype_c), and the query probability is sigmoid(w_c . f(x)).
Prototypes are fed directly (the per-class mean of main-space support
embeddings), so any shot count works. Training minimizes BCE over (query,
episode class) pairs either jointly with the extractor or with the extractor
frozen; frozen mode is what augments an existing closed-set model without
touching its predictions.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, affine, as_tensor, bce, dot, mean_rows, relu, reshape, sigmoid
from .backbone import embed


class OcmlError(ValueError):
    pass


@dataclass
class TransferModule:
    """Dense layers (W, b); ReLU between layers, final layer bias-free."""

    layers: list
    architecture: str = "1layer"

    def tensors(self):
        out = []
        for w, b in self.layers:
            out.append(w)
            if b is not None:
                out.append(b)
        return out

    def copy(self):
        layers = [
            (
                Tensor(w.data.copy(), requires_grad=True),
                None if b is None else Tensor(b.data.copy(), requires_grad=True),
            )
            for w, b in self.layers
        ]
        return TransferModule(layers, self.architecture)


def make_transfer_module(embed_dim, middle_dim=None, seed=0, init_scale=0.01):
    """Single dense layer embed_dim -> embed_dim, or two layers through
    middle_dim with a ReLU between them.

    init_scale shrinks the fan-in uniform init so freshly generated weights
    give probabilities near 0.5; large random weights saturate the sigmoid
    on the first episodes and wreck early training.
    """
    rng = np.random.default_rng(seed)
    if embed_dim < 1:
        raise OcmlError(f"bad embedding dim {embed_dim}")
    if middle_dim is None:
        bound = init_scale / np.sqrt(embed_dim)
        w = Tensor(rng.uniform(-bound, bound, (embed_dim, embed_dim)), requires_grad=True)
        return TransferModule([(w, None)], "1layer")
    if middle_dim < 1:
        raise OcmlError(f"bad middle dim {middle_dim}")
    b1 = init_scale / np.sqrt(embed_dim)
    w1 = Tensor(rng.uniform(-b1, b1, (embed_dim, middle_dim)), requires_grad=True)
    bias1 = Tensor(rng.uniform(-b1, b1, (middle_dim,)), requires_grad=True)
    b2 = init_scale / np.sqrt(middle_dim)
    w2 = Tensor(rng.uniform(-b2, b2, (middle_dim, embed_dim)), requires_grad=True)
    return TransferModule([(w1, bias1), (w2, None)], f"2layers_mid{middle_dim}")


def architecture_menu(embed_dim):
    """The four transfer-module architectures of the ablation grid: one
    linear layer, plus two-layer variants whose middle widths {100, 500,
    1000} are quoted at a nominal 1600-dim embedding and rescaled."""
    scale = embed_dim / 1600.0
    menu = [("1layer", None)]
    for ref in (100, 500, 1000):
        mid = max(1, round(ref * scale))
        menu.append((f"2layers_mid{mid}", mid))
    return menu


def transfer_to_group(transfer):
    """Checkpoint group ("ocml", params) plus module metadata."""
    params = []
    for i, (w, b) in enumerate(transfer.layers):
        params.append((f"w{i}", w.data))
        if b is not None:
            params.append((f"b{i}", b.data))
    return ("ocml", params), {"architecture": transfer.architecture}


def transfer_from_group(group_params, meta):
    by_name = dict(group_params)
    layers = []
    i = 0
    while f"w{i}" in by_name:
        w = Tensor(np.array(by_name[f"w{i}"], dtype=np.float64), requires_grad=True)
        b = None
        if f"b{i}" in by_name:
            b = Tensor(np.array(by_name[f"b{i}"], dtype=np.float64), requires_grad=True)
        layers.append((w, b))
        i += 1
    if not layers:
        raise OcmlError("ocml checkpoint group holds no layers")
    return TransferModule(layers, meta.get("architecture", "1layer"))


def generate_weight(transfer, prototype):
    """w_c = g(prototype); accepts [e] or a stack [n, e] of prototypes."""
    h = as_tensor(prototype)
    if h.data.shape[-1] != transfer.layers[0][0].data.shape[0]:
        raise OcmlError(
            f"prototype dim {h.data.shape[-1]} != transfer input dim "
            f"{transfer.layers[0][0].data.shape[0]}"
        )
    last = len(transfer.layers) - 1
    for i, (w, b) in enumerate(transfer.layers):
        h = affine(h, w, b)
        if i < last:
            h = relu(h)
    return h


def prob_known(weight, query_embedding):
    """sigmoid(w . f) for main-space embeddings; pairwise over stacks."""
    w = np.asarray(weight.data if isinstance(weight, Tensor) else weight, dtype=np.float64)
    f = np.asarray(query_embedding, dtype=np.float64)
    if w.shape[-1] != f.shape[-1]:
        raise OcmlError(f"weight dim {w.shape[-1]} != embedding dim {f.shape[-1]}")
    single_w, single_f = w.ndim == 1, f.ndim == 1
    logits = np.atleast_2d(f) @ np.atleast_2d(w).T  # [m, n]
    probs = sigmoid(Tensor(logits)).data
    if single_w and single_f:
        return float(probs[0, 0])
    if single_w:
        return probs[:, 0]
    if single_f:
        return probs[0]
    return probs


def prob_unknown(transfer, prototypes, query_embedding):
    """1 - max over per-class probabilities, same decision rule as Meta-BCE."""
    p = np.asarray(prototypes, dtype=np.float64)
    if p.size == 0:
        raise OcmlError("prob_unknown needs at least one prototype")
    w = generate_weight(transfer, p if p.ndim == 2 else p[None, :])
    probs = np.atleast_2d(prob_known(w, query_embedding))
    p_u = 1.0 - probs.max(axis=1)
    return float(p_u[0]) if np.asarray(query_embedding).ndim == 1 else p_u


def episode_loss(transfer, params, episode):
    """Mean BCE over all (known query, episode class) pairs using
    sigmoid(w_c . f(x)) probabilities; prototypes come from the support set."""
    n, k, q = episode.n, episode.k, episode.q
    if episode.query_known.size == 0:
        raise OcmlError("episode has no known queries")
    dim = episode.support.shape[-1]
    emb_s = embed(params, episode.support.reshape(n * k, dim))
    protos = mean_rows(emb_s, groups=n)
    if n == 1:
        protos = reshape(protos, (1, params.embed_dim))
    weights = generate_weight(transfer, protos)
    emb_q = embed(params, episode.query_known.reshape(n * q, dim))
    logits = dot(emb_q, weights)
    targets = np.zeros((n * q, n))
    targets[np.arange(n * q), np.repeat(np.arange(n), q)] = 1.0
    return bce(logits, Tensor(targets))
