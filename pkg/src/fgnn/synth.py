"""Synthetic corpora with known structure, for tests and demos.

The generator walks a first-order Markov chain in which each item has one
designated successor taking ``deterministic_mass`` of the probability; the
remainder spreads uniformly over a small global pool of "hub" items shared
by every context.  Any context's label support is therefore its successor
plus the hubs (11 items by default), small enough that a model which learns
the chain can fit the full support inside a top-20 list.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ingest import Session


@dataclass
class MarkovChain:
    successor: np.ndarray       # (m,) main next item per item
    hubs: np.ndarray            # shared alternate next items
    deterministic_mass: float

    @property
    def n_items(self) -> int:
        return int(self.successor.shape[0])

    def support(self, item: int) -> set:
        return {int(self.successor[item])} | {int(h) for h in self.hubs}


def make_chain(n_items: int, seed: int, n_hubs: int = 10,
               deterministic_mass: float = 0.8) -> MarkovChain:
    rng = np.random.default_rng([seed, 101])
    successor = rng.permutation(n_items)
    hubs = rng.choice(n_items, size=n_hubs, replace=False)
    return MarkovChain(successor, hubs, deterministic_mass)


def sample_sessions(chain: MarkovChain, n_sessions: int, seed: int,
                    min_len: int = 4, max_len: int = 10) -> list[Session]:
    """Sessions of random length; end times increase with generation order."""
    rng = np.random.default_rng([seed, 202])
    sessions = []
    for sid in range(n_sessions):
        length = int(rng.integers(min_len, max_len + 1))
        item = int(rng.integers(chain.n_items))
        items = [item]
        for _ in range(length - 1):
            if rng.random() < chain.deterministic_mass:
                item = int(chain.successor[item])
            else:
                item = int(rng.choice(chain.hubs))
            items.append(item)
        sessions.append(Session(items=tuple(items), end_time=float(sid)))
    return sessions


def write_click_log(path, sessions, id_prefix: str = "s") -> None:
    """Render sessions as a generic-format click log (session, time, item)."""
    with open(path, "w", encoding="utf-8") as fh:
        for sid, session in enumerate(sessions):
            base = session.end_time * 1000.0
            for pos, item in enumerate(session.items):
                fh.write(f"{id_prefix}{sid},{base + pos:.1f},{item}\n")
