"""Episode sampling, meta-training drivers, and the evaluation procedures.

Episodes draw n support classes and n_U unknown classes (disjoint, without
replacement) from one meta-split partition; examples are drawn without
replacement within each class. Every stochastic step derives its generator
from (seed, stream, index), so training runs, evaluations, and reports are
reproducible bit for bit. Evaluation may fan episodes out to worker threads;
per-episode results are merged in index order, so the output is identical to
a serial run.
"""

import concurrent.futures
import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import metabce, metrics, ocml, protonet
from .autodiff import Tape, backward, row_block_mean
from .backbone import add_projection, embed, init_backbone
from .metrics import UNKNOWN
from .optim import make_optimizer

# rng stream tags, namespacing derived seeds per purpose
_TRAIN_STREAM = 0
_VAL_STREAM = 1
_EVAL_STREAM = 2
_CALIB_STREAM = 3


class EpisodeError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class MetaSplit:
    meta_train: tuple
    meta_val: tuple
    meta_test: tuple

    def __post_init__(self):
        for name in ("meta_train", "meta_val", "meta_test"):
            ids = tuple(int(c) for c in getattr(self, name))
            if not ids:
                raise SplitError(f"{name} partition is empty")
            if len(set(ids)) != len(ids):
                raise SplitError(f"{name} partition repeats class ids")
            object.__setattr__(self, name, ids)
        tr, va, te = set(self.meta_train), set(self.meta_val), set(self.meta_test)
        if tr & va or tr & te or va & te:
            raise SplitError("meta-split partitions overlap")

    def partition(self, name):
        if name not in ("meta_train", "meta_val", "meta_test"):
            raise SplitError(f"unknown partition {name!r}")
        return getattr(self, name)


@dataclass(frozen=True)
class EpisodeConfig:
    n: int
    k: int
    q: int
    n_unknown: int = -1  # -1 means "as many unknown classes as known"
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.k < 1 or self.q < 1:
            raise EpisodeError(f"n, k, q must be >= 1, got {self.n}, {self.k}, {self.q}")
        if self.n_unknown == -1:
            object.__setattr__(self, "n_unknown", self.n)
        if self.n_unknown < 0:
            raise EpisodeError(f"n_unknown must be >= 0, got {self.n_unknown}")

    def as_dict(self):
        return {
            "n": self.n,
            "k": self.k,
            "q": self.q,
            "n_unknown": self.n_unknown,
            "seed": self.seed,
        }


@dataclass
class Episode:
    known_class_ids: tuple
    unknown_class_ids: tuple
    support: np.ndarray  # [n, k, dim]
    query_known: np.ndarray  # [n, q, dim]
    query_unknown: np.ndarray  # [n_U, q, dim]
    relabel: dict = field(default_factory=dict)

    def __post_init__(self):
        if set(self.known_class_ids) & set(self.unknown_class_ids):
            raise EpisodeError("support and unknown classes overlap")
        if not self.relabel:
            self.relabel = {c: i for i, c in enumerate(self.known_class_ids)}

    @property
    def n(self):
        return len(self.known_class_ids)

    @property
    def k(self):
        return self.support.shape[1]

    @property
    def q(self):
        return self.query_known.shape[1]

    @property
    def n_U(self):
        return len(self.unknown_class_ids)


def sample_episode(dataset, classes, cfg, rng=None):
    """Draw one episode from the given class partition, deterministically for
    a given rng (or cfg.seed when rng is None)."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    pool = sorted(int(c) for c in classes)
    needed = cfg.n + cfg.n_unknown
    if len(pool) < needed:
        raise EpisodeError(
            f"partition has {len(pool)} classes, episode needs {needed} "
            f"(n={cfg.n} known + n_unknown={cfg.n_unknown})"
        )
    chosen = rng.choice(np.array(pool), size=needed, replace=False)
    known = tuple(int(c) for c in chosen[: cfg.n])
    unknown = tuple(int(c) for c in chosen[cfg.n :])
    support, query_known, query_unknown = [], [], []
    for cid in known:
        ex = dataset.examples(cid)
        if ex.shape[0] < cfg.k + cfg.q:
            raise EpisodeError(
                f"class {cid} has {ex.shape[0]} examples, needs k+q={cfg.k + cfg.q}"
            )
        idx = rng.permutation(ex.shape[0])
        support.append(ex[idx[: cfg.k]])
        query_known.append(ex[idx[cfg.k : cfg.k + cfg.q]])
    for cid in unknown:
        ex = dataset.examples(cid)
        if ex.shape[0] < cfg.q:
            raise EpisodeError(f"class {cid} has {ex.shape[0]} examples, needs q={cfg.q}")
        idx = rng.permutation(ex.shape[0])
        query_unknown.append(ex[idx[: cfg.q]])
    dim = dataset.dim
    return Episode(
        known,
        unknown,
        np.stack(support),
        np.stack(query_known),
        np.stack(query_unknown) if unknown else np.zeros((0, cfg.q, dim)),
    )


def _episode_rng(seed, stream, index):
    return np.random.default_rng([int(seed), int(stream), int(index)])


def _eval_classes(dataset, partition):
    if partition == "meta_train":
        raise EpisodeError("evaluation on meta_train classes is refused")
    classes = dataset.split.partition(partition)
    leaked = set(classes) & set(dataset.split.meta_train)
    if leaked:
        raise EpisodeError(f"evaluation classes {sorted(leaked)} appear in meta_train")
    return classes


# ---------------------------------------------------------------------------
# known/unknown gates


def _support_prototypes(emb_flat, n, k):
    """Per-class means from a class-ordered stack of support embeddings;
    identical arithmetic to the grouped mean_rows primitive."""
    return row_block_mean(emb_flat, n)


class MetaBceGate:
    """Scores queries with the Meta-BCE head in its one-class space."""

    name = "mbce"

    def __init__(self, head):
        self.head = head

    def judge(self, params, episode, queries_flat):
        n, k = episode.n, episode.k
        dim = episode.support.shape[-1]
        emb_s = metabce.oneclass_embed(self.head, params, episode.support.reshape(n * k, dim))
        protos = _support_prototypes(emb_s.data, n, k)
        emb_q = metabce.oneclass_embed(self.head, params, queries_flat).data
        probs = np.atleast_2d(metabce.prob_known(self.head, emb_q, protos))
        score = probs.max(axis=1)
        return score, score >= 0.5


class OcmlGate:
    """Scores queries with generated one-class weights in the main space."""

    name = "ocml"

    def __init__(self, transfer):
        self.transfer = transfer

    def judge(self, params, episode, queries_flat):
        n, k = episode.n, episode.k
        dim = episode.support.shape[-1]
        emb_s = embed(params, episode.support.reshape(n * k, dim)).data
        protos = _support_prototypes(emb_s, n, k)
        weights = ocml.generate_weight(self.transfer, protos).data
        emb_q = embed(params, queries_flat).data
        probs = np.atleast_2d(ocml.prob_known(weights, emb_q))
        score = probs.max(axis=1)
        return score, score >= 0.5


class ThresholdGate:
    """Min-distance baseline: known when the nearest prototype is within tau.
    Scores rank by negative distance so higher still means more known."""

    name = "threshold"

    def __init__(self, baseline):
        self.baseline = baseline

    def judge(self, params, episode, queries_flat):
        n, k = episode.n, episode.k
        dim = episode.support.shape[-1]
        emb_s = embed(params, episode.support.reshape(n * k, dim)).data
        protos = _support_prototypes(emb_s, n, k)
        emb_q = embed(params, queries_flat).data
        dmin = protonet.pairwise_sq_distances(emb_q, protos).min(axis=1)
        return -dmin, dmin <= self.baseline.tau


# ---------------------------------------------------------------------------
# meta-training


@dataclass(frozen=True)
class TrainSchedule:
    """Episode count, optimizer settings, and the validation cadence.

    offset_learning_rate, when set, gives the Meta-BCE scalar offset its own
    rate: the offset has to travel across the whole distance scale while the
    branch weights only fine-tune, so one shared rate serves both poorly.
    """

    episodes: int
    learning_rate: float = 5e-3
    optimizer: str = "adam"
    val_interval: int = 0  # 0 -> episodes // 5
    val_episodes: int = 40
    offset_learning_rate: float = None

    def __post_init__(self):
        if self.episodes < 1:
            raise EpisodeError(f"schedule needs >= 1 episodes, got {self.episodes}")
        if self.val_episodes < 1:
            raise EpisodeError("schedule needs >= 1 validation episodes")

    @property
    def effective_val_interval(self):
        return self.val_interval if self.val_interval > 0 else max(1, self.episodes // 5)

    def as_dict(self):
        return {
            "episodes": self.episodes,
            "learning_rate": self.learning_rate,
            "optimizer": self.optimizer,
            "val_interval": self.effective_val_interval,
            "val_episodes": self.val_episodes,
            "offset_learning_rate": self.offset_learning_rate,
        }


def default_schedule(method, episodes=None):
    """Training settings that reach the benchmark floors on the default
    synthetic benchmark; see the acceptance suite."""
    if method == "protonet":
        return TrainSchedule(
            episodes or 3000, learning_rate=2e-3, optimizer="adam",
            val_interval=100, val_episodes=40,
        )
    if method == "mbce":
        return TrainSchedule(
            episodes or 8000, learning_rate=1e-4, optimizer="sgd",
            val_interval=125, val_episodes=50, offset_learning_rate=0.05,
        )
    if method in ("ocml_frozen", "ocml_joint"):
        return TrainSchedule(
            episodes or 8000, learning_rate=3e-3, optimizer="adam",
            val_interval=250, val_episodes=40,
        )
    raise EpisodeError(f"unknown method {method!r}, expected one of {METHODS}")


@dataclass
class TrainResult:
    method: str
    params: object  # best-on-validation BackboneParams
    head: object  # MetaBceHead | TransferModule | None
    loss_curve: list
    val_history: list  # (episode_index, metric value)
    best_val: float


METHODS = ("protonet", "mbce", "ocml_joint", "ocml_frozen")


def _closed_accuracy(params, dataset, classes, cfg, episodes, seed, stream=_VAL_STREAM):
    correct, total = 0, 0
    for i in range(episodes):
        ep = sample_episode(dataset, classes, cfg, _episode_rng(seed, stream, i))
        dim = ep.support.shape[-1]
        emb_s = embed(params, ep.support.reshape(ep.n * ep.k, dim)).data
        protos = protonet.prototypes(
            {cid: emb_s.reshape(ep.n, ep.k, -1)[i_] for i_, cid in enumerate(ep.known_class_ids)}
        )
        emb_q = embed(params, ep.query_known.reshape(-1, dim)).data
        pred = protonet.predict_closed(emb_q, protos)
        truth = np.repeat(np.array(ep.known_class_ids), ep.q)
        correct += int(np.sum(pred == truth))
        total += truth.size
    return correct / total


def _gate_val_na(gate, params, dataset, classes, k, episodes, seed, stream=_VAL_STREAM):
    """Mean open-set normalized accuracy of a gate on validation episodes.

    Selecting head snapshots by NA (not AUROC) matters: ranking quality alone
    says nothing about whether the fixed 0.5 decision threshold is calibrated
    for unseen classes. The episode shape is clamped to the partition size.
    """
    n = max(1, min(5, len(classes) - 1))
    n_u = max(1, min(n, len(classes) - n))
    cfg = EpisodeConfig(n=n, k=k, q=10, n_unknown=n_u)
    nas = []
    for i in range(episodes):
        ep = sample_episode(dataset, classes, cfg, _episode_rng(seed, stream, i))
        dim = ep.support.shape[-1]
        emb_s = embed(params, ep.support.reshape(-1, dim)).data
        protos = protonet.prototypes(
            {cid: emb_s.reshape(ep.n, ep.k, -1)[j] for j, cid in enumerate(ep.known_class_ids)}
        )
        queries = np.vstack(
            [ep.query_known.reshape(-1, dim), ep.query_unknown.reshape(-1, dim)]
        )
        emb_q = embed(params, queries).data
        closed = protonet.predict_closed(emb_q, protos)
        truth = np.concatenate(
            [
                np.repeat(np.array(ep.known_class_ids, dtype=np.int64), ep.q),
                np.full(ep.n_U * ep.q, UNKNOWN),
            ]
        )
        score, is_known = gate.judge(params, ep, queries)
        final = np.where(is_known, closed, UNKNOWN)
        triple = (truth, final, score)
        nas.append(metrics.normalized_accuracy(metrics.aks(triple), metrics.aus(triple)))
    return float(np.mean(nas))


def run_meta_training(
    method,
    dataset,
    episode_cfg,
    schedule,
    seed,
    base_params=None,
    spec=None,
    variant="branch",
    transfer_middle=None,
):
    """Episodic training of one method; returns best-on-validation parameters.

    protonet trains the extractor (trunk + head) from scratch or from
    base_params. mbce and ocml_frozen require base_params (augmentation of a
    pretrained extractor) and never touch trunk or head. ocml_joint trains
    the transfer module together with the extractor.
    """
    if method not in METHODS:
        raise EpisodeError(f"unknown method {method!r}, expected one of {METHODS}")
    train_classes = dataset.split.meta_train
    val_classes = dataset.split.meta_val
    # no background categories: training and closed-set validation episodes
    # draw known classes only, negatives come from within the episode
    episode_cfg = EpisodeConfig(
        n=episode_cfg.n, k=episode_cfg.k, q=episode_cfg.q, n_unknown=0, seed=episode_cfg.seed
    )

    head = None
    if method == "protonet":
        params = base_params.copy() if base_params is not None else init_backbone(
            spec, seed
        )
        trainable = params.trunk_tensors() + params.head_tensors()
        loss_fn = lambda ep: protonet.episode_loss(params, ep)
    elif method == "mbce":
        if base_params is None:
            raise EpisodeError("mbce training augments a pretrained backbone: base_params required")
        params = base_params.copy()
        if variant == "projected" and params.projection is None:
            add_projection(params)
        head = metabce.init_head(variant)
        trainable = metabce.trainable_tensors(head, params)
        loss_fn = lambda ep: metabce.episode_loss(head, params, ep)
    else:
        if method == "ocml_frozen":
            if base_params is None:
                raise EpisodeError(
                    "ocml_frozen training augments a pretrained backbone: base_params required"
                )
            params = base_params.copy()
        else:
            params = base_params.copy() if base_params is not None else init_backbone(
                spec, seed
            )
        head = ocml.make_transfer_module(params.embed_dim, transfer_middle, seed)
        trainable = head.tensors()
        if method == "ocml_joint":
            trainable = trainable + params.trunk_tensors() + params.head_tensors()
        loss_fn = lambda ep: ocml.episode_loss(head, params, ep)

    optimizers = []
    if method == "mbce" and schedule.offset_learning_rate is not None:
        optimizers.append(
            make_optimizer(schedule.optimizer, [head.t], schedule.offset_learning_rate)
        )
        rest = [p for p in trainable if p is not head.t]
        optimizers.append(make_optimizer(schedule.optimizer, rest, schedule.learning_rate))
    else:
        optimizers.append(make_optimizer(schedule.optimizer, trainable, schedule.learning_rate))
    interval = schedule.effective_val_interval

    def validate():
        if method == "protonet":
            # the val partition may be smaller than the training way count
            val_cfg = EpisodeConfig(
                n=min(episode_cfg.n, len(val_classes)),
                k=episode_cfg.k,
                q=episode_cfg.q,
                n_unknown=0,
                seed=episode_cfg.seed,
            )
            return _closed_accuracy(
                params, dataset, val_classes, val_cfg, schedule.val_episodes, seed
            )
        gate = MetaBceGate(head) if method == "mbce" else OcmlGate(head)
        return _gate_val_na(
            gate, params, dataset, val_classes, episode_cfg.k, schedule.val_episodes, seed
        )

    def snapshot():
        return params.copy(), None if head is None else head.copy()

    loss_curve = []
    val_history = []
    best_val = -np.inf
    best = snapshot()
    for i in range(schedule.episodes):
        ep = sample_episode(
            dataset, train_classes, episode_cfg, _episode_rng(seed, _TRAIN_STREAM, i)
        )
        with Tape() as tape:
            loss = loss_fn(ep)
        backward(tape, loss)
        for opt in optimizers:
            opt.step()
        loss_curve.append(float(loss.data))
        if (i + 1) % interval == 0 or (i + 1) == schedule.episodes:
            metric = validate()
            val_history.append((i + 1, metric))
            if metric > best_val:
                best_val = metric
                best = snapshot()
    return TrainResult(method, best[0], best[1], loss_curve, val_history, float(best_val))


def calibrate_threshold_baseline(params, dataset, cfg, episodes, seed, partition="meta_val"):
    """Calibrate the distance threshold on validation episodes.

    The unknown-class count is clamped so the episode shape fits the
    validation partition (it is usually smaller than meta-test).
    """
    classes = dataset.split.partition(partition)
    if cfg.n_unknown < 1:
        raise EpisodeError("threshold calibration needs episodes with unknown queries")
    if len(classes) < 2:
        raise EpisodeError(
            f"partition {partition} has {len(classes)} classes, calibration needs >= 2"
        )
    n = min(cfg.n, len(classes) - 1)
    n_unknown = min(cfg.n_unknown, len(classes) - n)
    cal_cfg = EpisodeConfig(n=n, k=cfg.k, q=cfg.q, n_unknown=n_unknown, seed=cfg.seed)
    eps = [
        sample_episode(dataset, classes, cal_cfg, _episode_rng(seed, _CALIB_STREAM, i))
        for i in range(episodes)
    ]
    return protonet.calibrate_threshold(params, eps)


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class MetricSummary:
    mean: float
    ci: float


@dataclass
class EvaluationReport:
    task: str
    config: dict
    seed: int
    m_episodes: int
    metrics: dict  # name -> MetricSummary
    per_episode: list  # dicts: episode_id + metric columns
    degenerate_ci: bool
    records: list = field(default_factory=list)  # optional (episode_id, records) pairs

    def as_dict(self):
        return {
            "task": self.task,
            "config": self.config,
            "seed": self.seed,
            "m_episodes": self.m_episodes,
            "degenerate_ci": self.degenerate_ci,
            "metrics": {
                name: {"mean": s.mean, "ci": s.ci} for name, s in sorted(self.metrics.items())
            },
        }

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.as_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")

    def write_episode_csv(self, path):
        names = sorted(self.metrics)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["episode_id"] + names)
            for row in self.per_episode:
                writer.writerow([row["episode_id"]] + [repr(row[n]) for n in names])

    def write_records_csv(self, path):
        if not self.records:
            raise EpisodeError("report was built without per-query records")
        flat, ids = [], []
        for eid, recs in self.records:
            flat.extend(recs)
            ids.extend([eid] * len(recs))
        metrics.write_records_csv(path, flat, episode_ids=ids)


def confidence_interval(samples):
    """(mean, 1.96 * unbiased std / sqrt(M), degenerate flag). A single
    sample reports half-width 0 and flags itself as degenerate."""
    arr = np.asarray(samples, dtype=np.float64)
    if arr.size == 0:
        raise EpisodeError("confidence interval of an empty sample set")
    mean = float(arr.mean())
    if arr.size == 1:
        return mean, 0.0, True
    if np.all(arr == arr[0]):
        return mean, 0.0, False
    half = float(1.96 * arr.std(ddof=1) / np.sqrt(arr.size))
    return mean, half, False


def _aggregate(task, config, seed, m, names, per_episode, records):
    summaries = {}
    degenerate = False
    for name in names:
        vals = [row[name] for row in per_episode]
        mean, half, dg = confidence_interval(vals)
        degenerate = degenerate or dg
        summaries[name] = MetricSummary(mean, half)
    return EvaluationReport(task, config, seed, m, summaries, per_episode, degenerate, records)


def _run_indexed(worker, m, workers):
    results = [None] * m
    if workers and workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            for idx, value in zip(range(m), pool.map(worker, range(m))):
                results[idx] = value
    else:
        for i in range(m):
            results[i] = worker(i)
    return results


def evaluate_oneclass(
    params,
    gate,
    dataset,
    cfg,
    m_episodes,
    seed,
    partition="meta_test",
    workers=1,
    collect_records=False,
):
    """One-class protocol: 1-way k-shot support, q known + q-per-unknown-class
    queries; accuracy, binary F1 (known positive), AUROC per episode."""
    if cfg.n != 1:
        raise EpisodeError(f"one-class evaluation requires n=1, got n={cfg.n}")
    if cfg.n_unknown < 1:
        raise EpisodeError("one-class evaluation needs at least one unknown class")
    if m_episodes < 1:
        raise EpisodeError("m_episodes must be >= 1")
    classes = _eval_classes(dataset, partition)

    def worker(i):
        ep = sample_episode(dataset, classes, cfg, _episode_rng(seed, _EVAL_STREAM, i))
        dim = ep.support.shape[-1]
        queries = np.vstack(
            [ep.query_known.reshape(-1, dim), ep.query_unknown.reshape(-1, dim)]
        )
        score, is_known = gate.judge(params, ep, queries)
        cid = ep.known_class_ids[0]
        truth = np.concatenate(
            [np.full(ep.q, cid, dtype=np.int64), np.full(ep.n_U * ep.q, UNKNOWN)]
        )
        pred = np.where(is_known, cid, UNKNOWN)
        triple = (truth, pred, score)
        row = {
            "episode_id": i,
            "accuracy": float(np.mean((truth != UNKNOWN) == is_known)),
            "f1": metrics.binary_f1(triple),
            "auroc": metrics.auroc(triple),
        }
        recs = metrics.records_from_arrays(truth, pred, score) if collect_records else None
        return row, recs

    results = _run_indexed(worker, m_episodes, workers)
    per_episode = [r[0] for r in results]
    records = [(i, r[1]) for i, r in enumerate(results) if r[1] is not None]
    config = {
        "task": "oneclass",
        "partition": partition,
        "gate": gate.name,
        **cfg.as_dict(),
        "m_episodes": m_episodes,
    }
    return _aggregate(
        "oneclass", config, seed, m_episodes, ["accuracy", "f1", "auroc"], per_episode, records
    )


def evaluate_openset(
    params,
    gate,
    dataset,
    cfg,
    m_episodes,
    seed,
    partition="meta_test",
    workers=1,
    collect_records=False,
):
    """Open-set protocol: ungated closed-set accuracy, gated AKS/AUS/NA,
    F1-open, and known-vs-unknown AUROC per episode.

    The final label of a query gated known comes from the closed-set
    classifier; the gate never alters closed-set logits.
    """
    if cfg.n_unknown < 1:
        raise EpisodeError("open-set evaluation needs n_unknown >= 1")
    if m_episodes < 1:
        raise EpisodeError("m_episodes must be >= 1")
    classes = _eval_classes(dataset, partition)

    def worker(i):
        ep = sample_episode(dataset, classes, cfg, _episode_rng(seed, _EVAL_STREAM, i))
        n, k, q, dim = ep.n, ep.k, ep.q, ep.support.shape[-1]
        emb_s = embed(params, ep.support.reshape(n * k, dim)).data
        protos = protonet.prototypes(
            {cid: emb_s.reshape(n, k, -1)[j] for j, cid in enumerate(ep.known_class_ids)}
        )
        queries = np.vstack(
            [ep.query_known.reshape(-1, dim), ep.query_unknown.reshape(-1, dim)]
        )
        emb_q = embed(params, queries).data
        closed_pred = protonet.predict_closed(emb_q, protos)
        truth = np.concatenate(
            [
                np.repeat(np.array(ep.known_class_ids, dtype=np.int64), q),
                np.full(ep.n_U * q, UNKNOWN),
            ]
        )
        known_truth = truth != UNKNOWN
        closed_acc = float(np.mean(closed_pred[known_truth] == truth[known_truth]))
        score, is_known = gate.judge(params, ep, queries)
        final = np.where(is_known, closed_pred, UNKNOWN)
        triple = (truth, final, score)
        aks_v = metrics.aks(triple)
        aus_v = metrics.aus(triple)
        row = {
            "episode_id": i,
            "accuracy": closed_acc,
            "aks": aks_v,
            "aus": aus_v,
            "na": metrics.normalized_accuracy(aks_v, aus_v),
            "f1_open": metrics.f1_open(triple),
            "auroc": metrics.auroc(triple),
        }
        recs = metrics.records_from_arrays(truth, final, score) if collect_records else None
        return row, recs

    results = _run_indexed(worker, m_episodes, workers)
    per_episode = [r[0] for r in results]
    records = [(i, r[1]) for i, r in enumerate(results) if r[1] is not None]
    config = {
        "task": "openset",
        "partition": partition,
        "gate": gate.name,
        **cfg.as_dict(),
        "m_episodes": m_episodes,
    }
    names = ["accuracy", "aks", "aus", "na", "f1_open", "auroc"]
    return _aggregate("openset", config, seed, m_episodes, names, per_episode, records)
