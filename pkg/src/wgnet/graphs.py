"""Direction-expanded inverse and forward graphs with their edge features.

Both graphs share the transducer node set. Each measured path contributes two
directed message-passing edges, stored as all canonical (i -> j) directions
first, then all reciprocals (j -> i), which fixes a deterministic layout.

Inverse edge feature:  [r_j - r_i, ||r_j - r_i||, z_ij]   (width 3 + 2K)
Forward edge feature:  [r_j - r_i, ||r_j - r_i||, ||p - r_i||, ||p - r_j||]

The reciprocal direction negates the displacement, keeps the length, shares
the measured descriptor (inverse) and swaps the two candidate distances
(forward). Forward features stay differentiable in the candidate coordinate,
with a finite subgradient when the candidate sits exactly on a transducer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DataError, NumericError
from .geometry import ForwardPathSet, PathSet, TransducerLayout

DTYPE = torch.float64

# Keeps the gradient of sqrt finite at coincident points without perturbing
# any physically distinct distance.
_NORM_CLAMP = 1e-300


def safe_norm(vec: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.sqrt(torch.clamp(torch.sum(vec * vec, dim=dim), min=_NORM_CLAMP))


def directed_edge_index(pairs: tuple[tuple[int, int], ...]) -> torch.Tensor:
    """(2, 2P) long tensor: canonical directions first, reciprocals second."""
    src = [i for i, _ in pairs] + [j for _, j in pairs]
    dst = [j for _, j in pairs] + [i for i, _ in pairs]
    return torch.tensor([src, dst], dtype=torch.long)


@dataclass
class InverseGraph:
    node_coords: torch.Tensor  # (N, 2)
    edge_index: torch.Tensor  # (2, 2P)
    edge_features: torch.Tensor  # (2P, 3 + 2K)
    path_index: torch.Tensor  # (2P,) measured-path id per directed edge

    @property
    def n_nodes(self) -> int:
        return int(self.node_coords.shape[0])

    @property
    def n_directed_edges(self) -> int:
        return int(self.edge_index.shape[1])


@dataclass
class ForwardGraph:
    node_coords: torch.Tensor  # (N, 2)
    edge_index: torch.Tensor  # (2, 2|P_f|)
    edge_features: torch.Tensor  # (2|P_f|, 5)
    candidate: torch.Tensor  # (2,)
    path_index: torch.Tensor  # (2|P_f|,)

    @property
    def n_directed_edges(self) -> int:
        return int(self.edge_index.shape[1])


def geometric_edge_features(coords: torch.Tensor, edge_index: torch.Tensor) -> torch.Tensor:
    """[displacement, length] per directed edge, shape (E, 3)."""
    src, dst = edge_index[0], edge_index[1]
    disp = coords[dst] - coords[src]
    length = safe_norm(disp).unsqueeze(-1)
    return torch.cat([disp, length], dim=-1)


def build_inverse_graph(
    layout: TransducerLayout,
    paths: PathSet,
    descriptors: np.ndarray | torch.Tensor,
) -> InverseGraph:
    """Assemble the measured-response graph for one sample.

    ``descriptors`` is the (|P|, 2K) path-wise spectral matrix; both directed
    edges of a path share the same descriptor row because only one measured
    channel exists per transducer pair.
    """
    z = torch.as_tensor(np.asarray(descriptors), dtype=DTYPE)
    n_paths = len(paths)
    if z.ndim != 2 or z.shape[0] != n_paths:
        raise DataError(f"need one descriptor per path: got {tuple(z.shape)} for {n_paths} paths")
    coords = torch.as_tensor(layout.coordinates, dtype=DTYPE)
    edge_index = directed_edge_index(paths.pairs)
    geom = geometric_edge_features(coords, edge_index)
    spectral = torch.cat([z, z], dim=0)  # shared across the two directions
    path_index = torch.arange(n_paths, dtype=torch.long).repeat(2)
    return InverseGraph(
        node_coords=coords,
        edge_index=edge_index,
        edge_features=torch.cat([geom, spectral], dim=1),
        path_index=path_index,
    )


def forward_edge_features(
    coords: torch.Tensor,
    edge_index: torch.Tensor,
    candidates: torch.Tensor,
) -> torch.Tensor:
    """Candidate-conditioned forward features, batched and differentiable.

    ``candidates`` is (..., 2); the result is (..., E, 5) with columns
    [displacement (2), path length, candidate-to-source, candidate-to-target].
    """
    geom = geometric_edge_features(coords, edge_index)  # (E, 3)
    src, dst = edge_index[0], edge_index[1]
    cand = candidates.unsqueeze(-2)  # (..., 1, 2)
    d_src = safe_norm(cand - coords[src]).unsqueeze(-1)  # (..., E, 1)
    d_dst = safe_norm(cand - coords[dst]).unsqueeze(-1)
    geom = geom.expand(*d_src.shape[:-2], -1, -1)
    return torch.cat([geom, d_src, d_dst], dim=-1)


def build_forward_graph(
    layout: TransducerLayout,
    fwd_paths: ForwardPathSet,
    candidate: np.ndarray | torch.Tensor,
) -> ForwardGraph:
    """Forward-branch graph for one candidate defect coordinate.

    The candidate may lie outside the unit square (the no-damage target does);
    it only has to be finite.
    """
    cand = torch.as_tensor(np.asarray(candidate, dtype=np.float64), dtype=DTYPE).reshape(2)
    if not torch.isfinite(cand).all():
        raise NumericError(f"candidate coordinate is not finite: {cand.tolist()}")
    coords = torch.as_tensor(layout.coordinates, dtype=DTYPE)
    edge_index = directed_edge_index(fwd_paths.pairs)
    features = forward_edge_features(coords, edge_index, cand)
    path_index = torch.arange(len(fwd_paths), dtype=torch.long).repeat(2)
    return ForwardGraph(
        node_coords=coords,
        edge_index=edge_index,
        edge_features=features,
        candidate=cand,
        path_index=path_index,
    )
