"""Meta-BCE one-class head.

The head scores a query against a single class as sigmoid(-(d + t)), where d
is the squared Euclidean distance between the query and the class prototype
in a dedicated one-class feature space, and t is a learnable offset. The
one-class space is either the branch copy of the extractor's last block
("branch", the main method) or a learned dense projection of the main
embedding ("projected", the ablation variant that keeps the main branch).

Meta-training minimizes binary cross-entropy over every (query, episode
class) pair; negatives are the episode's other classes, so no background
categories are needed. For n classes, a query is unknown when even its
best-matching class rejects it: p_unknown = 1 - max_c p_c, with ties at 0.5
resolved as known.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, bce, mean_rows, reshape, scale_shift, sigmoid, squared_distance
from .backbone import embed_branch, embed_projected

VARIANTS = ("branch", "projected")


class MetaBceError(ValueError):
    pass


@dataclass
class MetaBceHead:
    t: Tensor
    variant: str = "branch"

    def copy(self):
        return MetaBceHead(Tensor(self.t.data.copy(), requires_grad=True), self.variant)


def init_head(variant="branch"):
    if variant not in VARIANTS:
        raise MetaBceError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    return MetaBceHead(Tensor(0.0, requires_grad=True), variant)


def oneclass_embed(head, params, x):
    """Embed into the head's one-class feature space."""
    if head.variant == "branch":
        return embed_branch(params, x)
    return embed_projected(params, x)


def prob_known(head, query_embedding, prototype):
    """sigmoid(-(d + t)) for one-class embeddings.

    query_embedding: [e] or [m, e]; prototype: [e] or [n, e]. Both must live
    in the head's one-class space. Returns a scalar, [n], [m] (n == 1
    squeezed only when prototype is a single vector), or [m, n].
    """
    q = np.asarray(query_embedding, dtype=np.float64)
    p = np.asarray(prototype, dtype=np.float64)
    if q.shape[-1] != p.shape[-1]:
        raise MetaBceError(f"embedding dim {q.shape[-1]} != prototype dim {p.shape[-1]}")
    single_q, single_p = q.ndim == 1, p.ndim == 1
    q2 = q[None, :] if single_q else q
    p2 = p[None, :] if single_p else p
    diff = q2[:, None, :] - p2[None, :, :]
    d = np.einsum("mnd,mnd->mn", diff, diff)
    t = float(head.t.data)
    probs = sigmoid(Tensor(-(d + t))).data
    if single_q and single_p:
        return float(probs[0, 0])
    if single_p:
        return probs[:, 0]
    if single_q:
        return probs[0]
    return probs


def prob_unknown(head, query_embedding, prototypes):
    """1 - max over per-class known probabilities; unknown wins only on
    strict inequality with 0.5."""
    p = np.asarray(prototypes, dtype=np.float64)
    if p.size == 0:
        raise MetaBceError("prob_unknown needs at least one prototype")
    probs = prob_known(head, query_embedding, p if p.ndim == 2 else p[None, :])
    probs = np.atleast_2d(probs)
    p_u = 1.0 - probs.max(axis=1)
    return float(p_u[0]) if np.asarray(query_embedding).ndim == 1 else p_u


def episode_loss(head, params, episode):
    """Mean BCE over all (known query, episode class) pairs, with target 1
    exactly when the query belongs to the class."""
    n, k, q = episode.n, episode.k, episode.q
    if episode.query_known.size == 0:
        raise MetaBceError("episode has no known queries")
    dim = episode.support.shape[-1]
    emb_s = oneclass_embed(head, params, episode.support.reshape(n * k, dim))
    protos = mean_rows(emb_s, groups=n)
    if n == 1:
        protos = reshape(protos, (1, params.embed_dim))
    emb_q = oneclass_embed(head, params, episode.query_known.reshape(n * q, dim))
    d = squared_distance(emb_q, protos)
    neg_t = scale_shift(head.t, Tensor(-1.0), Tensor(0.0))
    logits = scale_shift(d, Tensor(-1.0), neg_t)
    targets = np.zeros((n * q, n))
    targets[np.arange(n * q), np.repeat(np.arange(n), q)] = 1.0
    return bce(logits, Tensor(targets))


def trainable_tensors(head, params):
    """Parameters updated when training this head: the offset plus the branch
    block (branch variant) or the projection map (projected variant)."""
    if head.variant == "branch":
        return [head.t] + params.branch_tensors()
    return [head.t] + params.projection_tensors()


def head_to_group(head):
    """Checkpoint group ("mbce", params) plus head metadata."""
    return ("mbce", [("t", head.t.data)]), {"variant": head.variant}


def head_from_group(group_params, meta):
    params = dict(group_params)
    if "t" not in params:
        raise MetaBceError("mbce checkpoint group is missing parameter t")
    head = init_head(meta.get("variant", "branch"))
    head.t = Tensor(np.array(params["t"], dtype=np.float64), requires_grad=True)
    return head
