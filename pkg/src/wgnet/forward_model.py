"""Forward consistency branch: candidate coordinate -> energy-deviation pattern.

Directed forward edges are embedded from candidate-conditioned geometry and
refined by residual message passing in which each edge exchanges information
with edges sharing one of its endpoints; coordinate-derived node embeddings
act as aggregation anchors. The two directions of each measured path are
averaged before a softplus decoder emits one non-negative deviation per path.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import NumericError
from .graphs import ForwardGraph, forward_edge_features
from .nn_common import incident_mean_matrix, mlp


@dataclass
class ForwardConfig:
    hidden_dim: int = 128
    layers: int = 3
    decoder_hidden: int = 64


class EdgeMessageLayer(nn.Module):
    """Residual edge update from endpoint-aggregated context."""

    def __init__(self, dim: int):
        super().__init__()
        self.transform = mlp([5 * dim, dim, dim])
        self.norm = nn.LayerNorm(dim)

    def forward(
        self,
        u: torch.Tensor,  # (B, E, d)
        node_anchor: torch.Tensor,  # (N, d)
        incident: torch.Tensor,  # (N, E) mean-aggregation matrix
        edge_index: torch.Tensor,
    ) -> torch.Tensor:
        agg = torch.einsum("ne,bed->bnd", incident, u)  # per-node mean of incident edges
        src, dst = edge_index[0], edge_index[1]
        anchors = node_anchor.unsqueeze(0).expand(u.shape[0], -1, -1)
        context = torch.cat(
            [u, agg[:, src], agg[:, dst], anchors[:, src], anchors[:, dst]], dim=-1
        )
        return self.norm(u + self.transform(context))


class ForwardModel(nn.Module):
    def __init__(self, cfg: ForwardConfig = ForwardConfig(), dtype: torch.dtype = torch.float32):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden_dim
        self.edge_encoder = mlp([5, d, d])
        self.node_embed = mlp([2, d])
        self.layers = nn.ModuleList(EdgeMessageLayer(d) for _ in range(cfg.layers))
        self.decoder = nn.Sequential(
            nn.Linear(d, cfg.decoder_hidden),
            nn.ELU(),
            nn.Linear(cfg.decoder_hidden, 1),
            nn.Softplus(),
        )
        self.to(dtype)
        self.compute_dtype = dtype

    def forward(
        self,
        edge_features: torch.Tensor,  # (..., 2|P_f|, 5), canonical block then reciprocal
        edge_index: torch.Tensor,
        node_coords: torch.Tensor,
    ) -> torch.Tensor:
        if not torch.isfinite(edge_features).all():
            raise NumericError("forward edge features contain non-finite values")
        squeeze = edge_features.dim() == 2
        if squeeze:
            edge_features = edge_features.unsqueeze(0)
        u = self.edge_encoder(edge_features)
        anchors = self.node_embed(node_coords)
        incident = incident_mean_matrix(edge_index, node_coords.shape[0], u.dtype)
        for layer in self.layers:
            u = layer(u, anchors, incident, edge_index)
        n_paths = edge_features.shape[-2] // 2
        per_path = 0.5 * (u[..., :n_paths, :] + u[..., n_paths:, :])  # direction mean
        out = self.decoder(per_path).squeeze(-1)
        return out[0] if squeeze else out

    def predict_candidates(
        self,
        candidates: torch.Tensor,  # (..., 2)
        edge_index: torch.Tensor,
        node_coords: torch.Tensor,
    ) -> torch.Tensor:
        """Deviation pattern for a batch of candidate coordinates, (..., |P_f|)."""
        features = forward_edge_features(node_coords, edge_index, candidates)
        return self.forward(features, edge_index, node_coords)


def forward_predict(model: ForwardModel, graph: ForwardGraph) -> torch.Tensor:
    """Predicted energy-deviation vector for one assembled forward graph."""
    with torch.no_grad():
        return model.forward(
            graph.edge_features.to(model.compute_dtype),
            graph.edge_index,
            graph.node_coords.to(model.compute_dtype),
        )


def coordinate_gradient(
    model: ForwardModel,
    candidates: torch.Tensor,  # (B, 2) or (2,)
    observed: torch.Tensor,  # (B, |P_f|) or (|P_f|,)
    edge_index: torch.Tensor,
    node_coords: torch.Tensor,
) -> torch.Tensor:
    """Gradient of the per-sample forward mismatch w.r.t. the candidate.

    Runs as a detached probe: the input coordinates are cloned, so no
    second-order graph reaches whatever produced them, and the forward
    parameters receive no gradient. A zero gradient is a valid return.
    """
    single = candidates.dim() == 1
    cand = candidates.detach().reshape(-1, 2).clone().requires_grad_(True)
    obs = observed.detach().reshape(cand.shape[0], -1)
    with torch.enable_grad():
        pred = model.predict_candidates(cand, edge_index, node_coords)
        per_sample = ((pred - obs) ** 2).mean(dim=-1)
        (grad,) = torch.autograd.grad(per_sample.sum(), cand, create_graph=False)
    grad = grad.detach()
    return grad[0] if single else grad
