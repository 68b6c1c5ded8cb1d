"""Episode graphs: initial adjacency, degree normalisation, masks, edge targets.

Node order is support items first (in episode order), then queries.
Unlabeled support nodes behave like queries for initialisation and are
left out of the support mask and the loss targets.
"""

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import DomainError, NumericalError

DEGREE_EPS = 1e-12


@dataclass
class EpisodeGraph:
    nodes: np.ndarray  # [V, d]
    A0: np.ndarray  # [V, V]
    Mq: np.ndarray
    Ms: np.ndarray
    targets: np.ndarray
    valid: np.ndarray


@dataclass
class NormalizedAdjacency:
    A: dc.Tensor
    degree: dc.Tensor


def _node_labels(ep):
    """Class slot per node, with -1 wherever the label is not visible."""
    sup = np.where(ep.support_labeled, ep.support_y, -1)
    return np.concatenate([sup, np.full(ep.Q, -1)])


def init_adjacency(ep):
    lab = _node_labels(ep)
    known = lab >= 0
    both = known[:, None] & known[None, :]
    same = lab[:, None] == lab[None, :]
    A = np.where(both, same.astype(np.float64), 0.5)
    np.fill_diagonal(A, 1.0)
    return A


def normalize_adjacency(A_tilde):
    """D^-1/2 A D^-1/2 over the last two axes, differentiable through A."""
    A_tilde = dc.as_tensor(A_tilde)
    if (A_tilde.data < 0).any():
        raise DomainError("adjacency entries must be non-negative")
    deg = dc.sum(A_tilde, axis=-1)
    zero = np.argwhere(deg.data == 0)
    if zero.size:
        raise NumericalError(f"zero-degree row {int(zero[0][-1])}")
    s = dc.pow_scalar(deg + DEGREE_EPS, -0.5)
    shape = s.shape
    row = dc.reshape(s, shape + (1,))
    col = dc.reshape(s, shape[:-1] + (1, shape[-1]))
    # s_i * s_j first so a symmetric input gives an exactly symmetric output
    return NormalizedAdjacency(A_tilde * (row * col), deg)


def build_masks(ep):
    V = ep.num_nodes
    S = len(ep.support_y)
    is_query = np.zeros(V, dtype=bool)
    is_query[S:] = True
    is_lab_support = np.zeros(V, dtype=bool)
    is_lab_support[:S] = ep.support_labeled
    Mq = np.repeat(is_query[:, None], V, axis=1).astype(np.float64)
    Ms = np.repeat(is_lab_support[None, :], V, axis=0).astype(np.float64)
    return Mq, Ms


def edge_targets(ep):
    truth = np.concatenate([ep.support_y, ep.query_y])
    targets = (truth[:, None] == truth[None, :]).astype(np.float64)
    Mq, Ms = build_masks(ep)
    return targets, Mq * Ms


def build_graph(ep):
    Mq, Ms = build_masks(ep)
    targets, valid = edge_targets(ep)
    nodes = np.concatenate([ep.support_x, ep.query_x])
    return EpisodeGraph(nodes, init_adjacency(ep), Mq, Ms, targets, valid)


def stack_graphs(graphs):
    """Batch graphs of equal size into arrays with a leading episode axis."""
    return EpisodeGraph(
        *(np.stack([getattr(g, f) for g in graphs]) for f in ("nodes", "A0", "Mq", "Ms", "targets", "valid"))
    )
