"""Small synthetic networks and traffic for desk-scale experiments."""

from __future__ import annotations

import numpy as np

from .data import shortest_path_routing

# 6-node ring with two chords, links in both directions
TOY_EDGES = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0), (0, 3), (1, 4)]


def toy_adjacency(n_nodes: int = 6, edges=TOY_EDGES) -> np.ndarray:
    adj = np.zeros((n_nodes, n_nodes))
    for u, v in edges:
        adj[u, v] = adj[v, u] = 1.0
    return adj


def toy_routing(n_nodes: int = 6, edges=TOY_EDGES) -> np.ndarray:
    """Routing matrix over all ``n_nodes**2`` OD pairs, self-flows included,
    using per-node access links so every flow crosses at least one link."""
    A, _ = shortest_path_routing(toy_adjacency(n_nodes, edges), access_links=True)
    return A


def diurnal_traffic(
    n_nodes: int = 6,
    n_times: int = 3672,
    seed: int = 0,
    period: int = 288,
    amplitude: float = 0.6,
    noise: float = 0.1,
) -> np.ndarray:
    """Gravity-model OD traffic with a daily cycle and multiplicative noise.

    Returns a ``(n_nodes**2, n_times)`` tensor in arbitrary volume units.
    Each flow has its own phase offset (up to two hours at 5-minute slots)
    and a weekly modulation so windows are not all alike.
    """
    rng = np.random.default_rng(seed)
    weight = rng.lognormal(mean=0.0, sigma=0.7, size=n_nodes)
    base = np.outer(weight, weight).ravel() * 1e6
    phase = rng.uniform(-np.pi / 6, np.pi / 6, size=base.size)
    t = np.arange(n_times)
    daily = 1.0 + amplitude * np.sin(2 * np.pi * t[None, :] / period + phase[:, None])
    weekly = 1.0 + 0.15 * np.sin(2 * np.pi * t / (7 * period))
    eps = rng.standard_normal((base.size, n_times))
    X = base[:, None] * daily * weekly[None, :] * (1.0 + noise * eps)
    return np.maximum(X, 0.0)
