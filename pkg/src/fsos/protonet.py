"""Prototypical-network closed-set classifier and the min-distance
threshold baseline used as the open-set comparison point.

Closed-set logits are negative squared Euclidean distances to per-class
prototypes; argmax ties break toward the lowest class id. The threshold
baseline scores a query by its distance to the nearest prototype and accepts
it as known when that distance is at most tau.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, mean_rows, row_block_mean, scale_shift, softmax_xent, squared_distance
from .backbone import embed


class ProtonetError(ValueError):
    pass


@dataclass(frozen=True)
class Prototype:
    class_id: int
    vector: np.ndarray
    k: int


def prototypes(embeddings_by_class):
    """Per-class mean embeddings, ordered by class id."""
    protos = []
    for cid in sorted(embeddings_by_class):
        arr = np.asarray(embeddings_by_class[cid], dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] == 0:
            raise ProtonetError(f"class {cid} has no embeddings")
        protos.append(Prototype(int(cid), row_block_mean(arr)[0], arr.shape[0]))
    if not protos:
        raise ProtonetError("no classes given")
    return protos


def _proto_matrix(protos):
    if not protos:
        raise ProtonetError("no prototypes given")
    return np.stack([p.vector for p in protos])


def pairwise_sq_distances(queries, protos_matrix):
    q = np.asarray(queries, dtype=np.float64)
    single = q.ndim == 1
    q2 = q[None, :] if single else q
    if q2.shape[1] != protos_matrix.shape[1]:
        raise ProtonetError(
            f"query dim {q2.shape[1]} != prototype dim {protos_matrix.shape[1]}"
        )
    diff = q2[:, None, :] - protos_matrix[None, :, :]
    d = np.einsum("mnd,mnd->mn", diff, diff)
    return d[0] if single else d


def closed_logits(query_embedding, protos):
    """Negative squared distance to each prototype, prototype order."""
    return -pairwise_sq_distances(query_embedding, _proto_matrix(protos))


def predict_closed(query_embedding, protos):
    """Argmax class ids; np.argmax keeps the first (lowest-id) max on ties."""
    logits = closed_logits(query_embedding, protos)
    ids = np.array([p.class_id for p in protos])
    if logits.ndim == 1:
        return int(ids[int(np.argmax(logits))])
    return ids[np.argmax(logits, axis=1)]


def episode_loss(params, episode):
    """Mean softmax cross-entropy of closed logits over the known queries."""
    n, k, q = episode.n, episode.k, episode.q
    if n < 2:
        raise ProtonetError(f"closed-set episode loss needs n >= 2 classes, got {n}")
    dim = episode.support.shape[-1]
    emb_s = embed(params, episode.support.reshape(n * k, dim))
    protos = mean_rows(emb_s, groups=n)
    emb_q = embed(params, episode.query_known.reshape(n * q, dim))
    d = squared_distance(emb_q, protos)
    logits = scale_shift(d, Tensor(-1.0), Tensor(0.0))
    labels = Tensor(np.repeat(np.arange(n), q).astype(np.float64))
    return softmax_xent(logits, labels)


def threshold_score(query_embedding, protos):
    """Distance to the nearest prototype; higher means more unknown."""
    d = pairwise_sq_distances(query_embedding, _proto_matrix(protos))
    return float(d.min()) if d.ndim == 1 else d.min(axis=1)


@dataclass(frozen=True)
class ThresholdBaseline:
    tau: float

    def __post_init__(self):
        if not np.isfinite(self.tau) or self.tau < 0:
            raise ProtonetError(f"tau must be finite and >= 0, got {self.tau}")


def scan_threshold(known_scores, unknown_scores):
    """Pick tau maximizing balanced accuracy over pooled validation scores.

    Candidates are the midpoints of consecutive sorted unique scores; the
    smallest maximizing tau wins. A query counts known when score <= tau.
    """
    ks = np.asarray(known_scores, dtype=np.float64)
    us = np.asarray(unknown_scores, dtype=np.float64)
    if ks.size == 0:
        raise ProtonetError("threshold calibration needs known-query scores")
    if us.size == 0:
        raise ProtonetError("threshold calibration needs unknown-query scores")
    uniq = np.unique(np.concatenate([ks, us]))
    if uniq.size == 1:
        return ThresholdBaseline(float(uniq[0]))
    mids = (uniq[:-1] + uniq[1:]) / 2.0
    best_tau, best_bal = None, -1.0
    for tau in mids:
        bal = 0.5 * np.mean(ks <= tau) + 0.5 * np.mean(us > tau)
        if bal > best_bal:
            best_tau, best_bal = float(tau), float(bal)
    return ThresholdBaseline(best_tau)


def calibrate_threshold(params, episodes):
    """Calibrate tau on validation episodes in the main embedding space."""
    known_scores, unknown_scores = [], []
    for ep in episodes:
        dim = ep.support.shape[-1]
        emb_s = embed(params, ep.support.reshape(ep.n * ep.k, dim)).data
        protos = row_block_mean(emb_s, ep.n)
        qk = embed(params, ep.query_known.reshape(-1, dim)).data
        known_scores.append(pairwise_sq_distances(qk, protos).min(axis=1))
        if ep.n_U:
            qu = embed(params, ep.query_unknown.reshape(-1, dim)).data
            unknown_scores.append(pairwise_sq_distances(qu, protos).min(axis=1))
    if not known_scores:
        raise ProtonetError("threshold calibration needs at least one episode")
    if not unknown_scores:
        raise ProtonetError("threshold calibration needs episodes with unknown queries")
    return scan_threshold(np.concatenate(known_scores), np.concatenate(unknown_scores))
