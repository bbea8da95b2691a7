"""Fast invariant suite behind the ``selftest`` CLI subcommand.

Each check re-verifies one structural guarantee of the pipeline on freshly
generated data.  The suite trades depth for speed (a few seconds); the pytest
suite runs the same properties at full strength.
"""

from __future__ import annotations

import numpy as np

from . import evaluation as E
from . import model as M
from . import tensor as T
from .graphs import build_global_graph, build_session_graph, sample_bcs
from .ingest import Example, Session, augment
from .model import GraphBatchView, ModelConfig
from .train import Adam, init_params


def _check_masked_softmax():
    rng = np.random.default_rng(0)
    for _ in range(20):
        cols = int(rng.integers(2, 10))
        x = T.Tensor(rng.normal(size=(3, cols)) * 8)
        mask = rng.random(cols) < 0.5
        mask[int(rng.integers(cols))] = True
        out = T.masked_softmax(x, mask).data
        assert np.all(out[:, ~mask] == 0.0), "off-mask output not exactly zero"
        assert np.allclose(out.sum(axis=1), 1.0, atol=1e-12), "rows do not sum to 1"


def _check_attention_rows():
    rng = np.random.default_rng(1)
    for trial in range(100):
        sessions = [rng.integers(0, 8, size=rng.integers(2, 6)).tolist() for _ in range(5)]
        graph = build_global_graph(sessions)
        bcs = sample_bcs(graph, sessions[0], n_hops=1, sample_cap=3, rng_seed=trial)
        view = GraphBatchView.from_graphs([bcs])
        x = T.Tensor(rng.normal(size=(view.n_nodes, 3)))
        head = M.HeadParams(
            w=T.Tensor(rng.normal(size=(2, 3))), att=T.Tensor(rng.normal(size=5))
        )
        alpha = M.attention_coefficients(view, x, head)
        sums = np.add.reduceat(alpha, view.dst_offsets[:-1])
        assert np.allclose(sums, 1.0, atol=1e-12), "attention rows do not sum to 1"


def _check_gradients():
    rng = np.random.default_rng(2)
    sessions = [rng.integers(0, 7, size=rng.integers(2, 6)).tolist() for _ in range(20)]
    graph = build_global_graph(sessions)
    cfg = ModelConfig(d=4, layers=2, heads=2, readout_steps=2).validate()
    params = init_params(cfg, vocab_size=7, seed=3, init_std=0.5)
    bcs = sample_bcs(graph, sessions[3], n_hops=1, sample_cap=2, rng_seed=3)
    view = GraphBatchView.from_graphs([bcs])
    label = [int(sessions[3][-1])]
    err = T.grad_check(
        lambda: M.loss(M.forward_logits(view, params, cfg), label),
        params.all_tensors(),
    )
    assert err < 1e-4, f"gradient check error {err:.2e}"


def _check_bcs_structure():
    rng = np.random.default_rng(3)
    sessions = [rng.integers(0, 20, size=rng.integers(2, 7)).tolist() for _ in range(30)]
    graph = build_global_graph(sessions)
    session = sessions[0]
    bcs0 = sample_bcs(graph, session, n_hops=0, rng_seed=1)
    distinct = list(dict.fromkeys(session))
    assert bcs0.nodes == distinct, "hop-0 node set differs from session items"
    prev = set(bcs0.nodes)
    for hops in (1, 2):
        nodes = set(sample_bcs(graph, session, n_hops=hops, sample_cap=2, rng_seed=1).nodes)
        assert prev <= nodes, "hop nesting violated"
        prev = nodes
    a = sample_bcs(graph, session, n_hops=2, sample_cap=2, rng_seed=9)
    b = sample_bcs(graph, session, n_hops=2, sample_cap=2, rng_seed=9)
    assert a.nodes == b.nodes and np.array_equal(a.edge_weight, b.edge_weight), \
        "same-seed sampling not reproducible"
    single = build_global_graph([session])
    assert single.edges == build_session_graph(session).edges, \
        "single-session global graph differs from the session graph"


def _check_sampling_frequency():
    from .graphs import GlobalGraph

    graph = GlobalGraph(
        {(10, 11): 3, (10, 12): 1, (10, 10): 1, (11, 11): 1, (12, 12): 1}, 3
    )
    hits = 0
    draws = 1500
    for seed in range(draws):
        sampled = set(sample_bcs(graph, [10], 1, sample_cap=1, rng_seed=seed).nodes)
        hits += 11 in sampled
    freq = hits / draws
    assert abs(freq - 0.75) < 0.05, f"weighted sampling frequency {freq:.3f}"


def _check_metrics():
    rng = np.random.default_rng(4)
    for _ in range(300):
        m = 25
        ranked = rng.permutation(m)
        label = int(rng.integers(m))
        k = int(rng.integers(1, m + 1))
        top = list(ranked[:k])
        hit = 1 if label in top else 0
        reciprocal = 1.0 / (top.index(label) + 1) if hit else 0.0
        assert E.recall_at_k(ranked, label, k) == hit
        assert E.mrr_at_k(ranked, label, k) == reciprocal


def _check_augment():
    rng = np.random.default_rng(5)
    for _ in range(50):
        items = tuple(rng.integers(0, 9, size=rng.integers(2, 9)).tolist())
        examples = augment(Session(items=items, end_time=0.0))
        assert len(examples) == len(items) - 1
        assert examples[-1].items + (examples[-1].label,) == items


def _check_adam():
    p = T.Tensor(np.array(0.0), requires_grad=True)
    adam = Adam([("p", p)], l2=0.0)
    p.grad[...] = 1.0
    adam.step(1e-3)
    assert abs(float(p.data) + 1e-3) < 1e-9, "first Adam step deviates from closed form"


def _check_mask_readout():
    rng = np.random.default_rng(6)
    d = 4
    edges = [(i, i, 1.0) for i in range(4)]
    from .tensor import GRUParams, Tensor

    view = GraphBatchView(
        nodes=np.arange(4, dtype=np.int64),
        edge_src=np.array([e[0] for e in edges], dtype=np.int64),
        edge_dst=np.array([e[1] for e in edges], dtype=np.int64),
        edge_weight=np.ones(4),
        dst_offsets=np.arange(5, dtype=np.int64),
        core_mask=np.array([True, False, False, False]),
        graph_offsets=np.array([0, 4], dtype=np.int64),
        node_graph=np.zeros(4, dtype=np.int64),
    )
    gru = GRUParams(*[
        Tensor(rng.normal(scale=0.4, size=s))
        for s in [(2 * d, d), (d, d), (d,)] * 3
    ])
    x1 = rng.normal(size=(4, d))
    x2 = x1.copy()
    x2[1:] += 50.0
    out1 = M.readout(Tensor(x1), view, gru, steps=2, mode="mask")
    out2 = M.readout(Tensor(x2), view, gru, steps=2, mode="mask")
    assert np.array_equal(out1.data, out2.data), "mask readout saw non-core features"


CHECKS = [
    ("masked softmax exact zeros and normalisation", _check_masked_softmax),
    ("attention rows sum to one", _check_attention_rows),
    ("end-to-end gradient check", _check_gradients),
    ("subgraph sampling structure", _check_bcs_structure),
    ("weighted sampling frequency", _check_sampling_frequency),
    ("ranking metrics against brute force", _check_metrics),
    ("session augmentation losslessness", _check_augment),
    ("optimizer first-step value", _check_adam),
    ("mask readout independence", _check_mask_readout),
]


def run_selftest(out=print) -> bool:
    ok = True
    for name, check in CHECKS:
        try:
            check()
        except Exception as err:  # report every failure, keep going
            ok = False
            out(f"FAIL  {name}: {err}")
        else:
            out(f"PASS  {name}")
    return ok
