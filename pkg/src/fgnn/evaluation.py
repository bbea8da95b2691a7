"""Ranking metrics, frequency/similarity baselines, and corpus analyses.

Rankings order items by descending score with ties broken by ascending item
index, so every metric is deterministic across platforms.  Recall@K counts
the fraction of examples whose label lands in the top K; MRR@K averages the
reciprocal rank, zeroed when the label falls outside the top K.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .errors import ContractError
from .graphs import GlobalGraph, SamplingConfig, sample_bcs
from .ingest import Example
from .model import GraphBatchView, ModelConfig, ModelParams

SHORT_SESSION_MAX = 5  # inputs up to this length count as "short"


def rank_items(scores: np.ndarray) -> np.ndarray:
    """Item indices by descending score; equal scores keep ascending index."""
    return np.argsort(-np.asarray(scores), kind="stable")


def recall_at_k(ranked: np.ndarray, label: int, k: int) -> int:
    """1 when the label is among the first k entries, else 0."""
    return int(label in ranked[:k])


def mrr_at_k(ranked: np.ndarray, label: int, k: int) -> float:
    """Reciprocal of the label's 1-based rank, 0 when it is beyond k."""
    hits = np.nonzero(ranked[:k] == label)[0]
    if hits.size == 0:
        return 0.0
    return 1.0 / (int(hits[0]) + 1)


@dataclass
class EvalReport:
    ks: tuple
    n_examples: int
    recall: dict
    mrr: dict
    buckets: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "n_examples": self.n_examples,
            "recall": {str(k): v for k, v in self.recall.items()},
            "mrr": {str(k): v for k, v in self.mrr.items()},
            "buckets": self.buckets,
        }

    def table(self) -> str:
        """Plain-text metric table, one row per cutoff."""
        lines = [f"{'K':>4}  {'R@K':>8}  {'MRR@K':>8}"]
        for k in self.ks:
            lines.append(f"{k:>4}  {self.recall[k]:>8.4f}  {self.mrr[k]:>8.4f}")
        lines.append(f"examples: {self.n_examples}")
        return "\n".join(lines)


def evaluate(score_batch, examples: list[Example], ks=(5, 10, 20),
             batch_size: int = 100) -> EvalReport:
    """Aggregate ranking metrics of a scoring function over test examples.

    ``score_batch`` maps a list of examples to a (batch, vocabulary) score
    matrix.  Examples with input length up to 5 aggregate into the "short"
    bucket, longer ones into "long".  Aggregation is a histogram of integer
    label ranks, so results are exactly independent of the example order.
    """
    ks = tuple(int(k) for k in ks)
    max_k = max(ks)
    # rank_hist[name][r] counts labels landing at 1-based rank r <= max_k
    rank_hist = {name: np.zeros(max_k + 1, dtype=np.int64)
                 for name in ("all", "short", "long")}
    totals = {name: 0 for name in rank_hist}
    for lo in range(0, len(examples), batch_size):
        batch = examples[lo:lo + batch_size]
        scores = np.asarray(score_batch(batch))
        for ex, row in zip(batch, scores):
            top = rank_items(row)[:max_k]
            position = np.nonzero(top == ex.label)[0]
            rank = int(position[0]) + 1 if position.size else 0  # 0 = miss
            names = ("all", "short" if len(ex.items) <= SHORT_SESSION_MAX else "long")
            for name in names:
                totals[name] += 1
                if rank:
                    rank_hist[name][rank] += 1

    def metrics(name):
        n = totals[name]
        hist = rank_hist[name]
        recall, mrr = {}, {}
        for k in ks:
            hits = int(hist[1:k + 1].sum())
            reciprocal = float(np.dot(hist[1:k + 1], 1.0 / np.arange(1, k + 1)))
            recall[k] = hits / n if n else 0.0
            mrr[k] = reciprocal / n if n else 0.0
        return recall, mrr

    recall_all, mrr_all = metrics("all")
    buckets = {}
    for name in ("short", "long"):
        recall_b, mrr_b = metrics(name)
        buckets[name] = {
            "count": totals[name],
            "recall": {str(k): v for k, v in recall_b.items()},
            "mrr": {str(k): v for k, v in mrr_b.items()},
        }
    return EvalReport(
        ks=ks,
        n_examples=totals["all"],
        recall=recall_all,
        mrr=mrr_all,
        buckets=buckets,
    )


# ---------------------------------------------------------------------------
# model scorer
# ---------------------------------------------------------------------------

def _example_seed(base_seed: int, ex: Example) -> int:
    """Deterministic per-example seed tied to content, not dataset position."""
    digest = zlib.crc32(" ".join(str(i) for i in ex.items).encode())
    return (int(base_seed) << 32) ^ digest


def model_scorer(params: ModelParams, config: ModelConfig, graph: GlobalGraph,
                 sampling: SamplingConfig, seed: int = 0):
    """Batch scoring function running the model over sampled session graphs."""

    def score_batch(batch: list[Example]) -> np.ndarray:
        graphs = [
            sample_bcs(
                graph, ex.items, sampling.n_hops, sampling.sample_cap,
                rng_seed=_example_seed(seed, ex),
            )
            for ex in batch
        ]
        view = GraphBatchView.from_graphs(graphs)
        return M.forward_logits(view, params, config).data

    return score_batch


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

@dataclass
class TrainStats:
    """Precomputed corpus statistics shared by the simple baselines."""

    vocab_size: int
    item_counts: np.ndarray                  # click occurrences per item
    session_sets: list[set]                  # item -> set of session ids
    session_items: list[list[int]]           # session id -> distinct items
    session_frequency: np.ndarray            # sessions containing each item
    n_sessions: int

    @classmethod
    def from_sessions(cls, sessions, vocab_size: int) -> "TrainStats":
        counts = np.zeros(vocab_size)
        session_sets = [set() for _ in range(vocab_size)]
        session_items = []
        for sid, items in enumerate(sessions):
            distinct = sorted({int(i) for i in items})
            session_items.append(distinct)
            for item in items:
                counts[item] += 1
            for item in distinct:
                session_sets[item].add(sid)
        freq = np.array([len(s) for s in session_sets], dtype=float)
        return cls(
            vocab_size=vocab_size,
            item_counts=counts,
            session_sets=session_sets,
            session_items=session_items,
            session_frequency=freq,
            n_sessions=len(sessions),
        )


KNN_REGULARIZATION = 20.0


def baseline_scores(kind: str, stats: TrainStats, session) -> np.ndarray:
    """Score vector over the vocabulary for one of the simple baselines."""
    if kind == "pop":
        return stats.item_counts.astype(float)
    if kind == "spop":
        in_session = np.zeros(stats.vocab_size)
        for item in session:
            if 0 <= item < stats.vocab_size:
                in_session[item] += 1
        # lexicographic (session count, global count): exact in float64
        scale = stats.item_counts.max() + 1.0
        return in_session * scale + stats.item_counts
    if kind == "itemknn":
        # cosine similarity of session-incidence vectors to the last known
        # item, dampened so rarely-seen items cannot spike
        scores = np.zeros(stats.vocab_size)
        anchor = None
        for item in reversed(session):
            if 0 <= item < stats.vocab_size and stats.session_sets[item]:
                anchor = item
                break
        if anchor is None:
            return scores
        co = np.zeros(stats.vocab_size)
        for sid in stats.session_sets[anchor]:
            for other in stats.session_items[sid]:
                co[other] += 1.0
        n_anchor = stats.session_frequency[anchor]
        denom = np.sqrt(n_anchor * np.maximum(stats.session_frequency, 1.0))
        scores = co / (denom + KNN_REGULARIZATION)
        scores[anchor] = -1.0  # self excluded: rank strictly last
        return scores
    raise ContractError(f"unknown baseline kind {kind!r}")


def baseline_predict(kind: str, stats: TrainStats, session) -> np.ndarray:
    """Full ranked item list for one session under a baseline."""
    return rank_items(baseline_scores(kind, stats, session))


def baseline_scorer(kind: str, stats: TrainStats):
    def score_batch(batch: list[Example]) -> np.ndarray:
        return np.stack([baseline_scores(kind, stats, ex.items) for ex in batch])

    return score_batch


# ---------------------------------------------------------------------------
# cross-session correlation analysis
# ---------------------------------------------------------------------------

def _pearson_sparse(counts_a: dict, counts_b: dict, m: int):
    """Pearson r of two item-count vectors over an m-item vocabulary."""
    sa = float(sum(counts_a.values()))
    sb = float(sum(counts_b.values()))
    saa = float(sum(v * v for v in counts_a.values()))
    sbb = float(sum(v * v for v in counts_b.values()))
    sab = float(sum(v * counts_b[k] for k, v in counts_a.items() if k in counts_b))
    var_a = saa - sa * sa / m
    var_b = sbb - sb * sb / m
    if var_a <= 0.0 or var_b <= 0.0:
        return None
    cov = sab - sa * sb / m
    return float(np.clip(cov / np.sqrt(var_a * var_b), -1.0, 1.0))


def session_correlation(sessions, vocab_size: int, max_pairs: int = 1_000_000,
                        seed: int = 0, bin_width: float = 0.05) -> dict:
    """Pearson correlation between sessions sharing at least one item.

    Sessions are represented by their raw item-count vectors over the full
    vocabulary.  Qualifying pairs beyond ``max_pairs`` are subsampled, so on
    large corpora the result is an estimate.
    """
    if len(sessions) < 2:
        raise ContractError("session_correlation needs at least 2 sessions")
    count_vectors = []
    by_item: dict[int, list[int]] = {}
    for sid, items in enumerate(sessions):
        counts: dict[int, int] = {}
        for item in items:
            counts[item] = counts.get(item, 0) + 1
        count_vectors.append(counts)
        for item in counts:
            by_item.setdefault(item, []).append(sid)

    pairs: set[tuple[int, int]] = set()
    hard_cap = 5 * max_pairs
    for item in sorted(by_item):
        holders = by_item[item]
        for i in range(len(holders)):
            for j in range(i + 1, len(holders)):
                pairs.add((holders[i], holders[j]))
                if len(pairs) >= hard_cap:
                    break
            if len(pairs) >= hard_cap:
                break
        if len(pairs) >= hard_cap:
            break
    pair_list = sorted(pairs)
    estimated = len(pair_list) > max_pairs or len(pairs) >= hard_cap
    if len(pair_list) > max_pairs:
        rng = np.random.default_rng(seed)
        keep = rng.choice(len(pair_list), size=max_pairs, replace=False)
        pair_list = [pair_list[i] for i in np.sort(keep)]

    values = []
    skipped = 0
    for a, b in pair_list:
        r = _pearson_sparse(count_vectors[a], count_vectors[b], vocab_size)
        if r is None:
            skipped += 1
        else:
            values.append(r)

    edges = np.arange(-1.0, 1.0 + bin_width / 2, bin_width)
    hist, _ = np.histogram(values, bins=edges)
    return {
        "mean": float(np.mean(values)) if values else 0.0,
        "pairs": len(values),
        "skipped_zero_variance": skipped,
        "estimated": estimated,
        "bin_width": bin_width,
        "bin_edges": [round(float(e), 4) for e in edges],
        "histogram": hist.tolist(),
    }
