"""Inverse localization branch.

Frequency-bin attention compresses each edge's spectral descriptor into a
context vector, edges initialize node states, a stack of multi-head graph
attention layers propagates information across the sensing network, and a
max-pooled graph embedding is decoded to a 2-D coordinate. The regression
head is linear so predictions can reach the out-of-domain no-damage target.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import NumericError
from .graphs import InverseGraph
from .nn_common import GraphAttentionLayer, incoming_mean_matrix, mlp, neighbor_mask


@dataclass
class InverseConfig:
    spectral_bins: int  # K
    hidden_dim: int = 256
    heads: int = 16
    layers: int = 4
    dropout: float = 0.2
    bin_feat_dim: int = 64
    attn_hidden: int = 32


class BinAttentionEncoder(nn.Module):
    """Attention over the K (amplitude, phase) bin tokens of each edge.

    Produces softmax weights per bin from the token content alone, sums the
    per-bin features under those weights, and fuses the resulting context with
    the 3-dim geometric part into the initial edge embedding.
    """

    def __init__(self, cfg: InverseConfig):
        super().__init__()
        self.k = cfg.spectral_bins
        # Per-bin maps stay shallow: they run on B*E*K tokens, and the edge
        # combiner supplies the deep nonlinearity.
        self.scorer = mlp([2, cfg.attn_hidden, 1], activation=nn.ReLU)
        self.bin_feat = mlp([2, cfg.bin_feat_dim], final_activation=nn.ReLU)
        self.combine = mlp([cfg.bin_feat_dim + 3, cfg.hidden_dim, cfg.hidden_dim])

    def bin_tokens(self, spectral: torch.Tensor) -> torch.Tensor:
        # spectral: (..., 2K) laid out [K amplitudes, K phases] -> (..., K, 2)
        amp = spectral[..., : self.k]
        phase = spectral[..., self.k :]
        return torch.stack([amp, phase], dim=-1)

    def attention_weights(self, spectral: torch.Tensor) -> torch.Tensor:
        scores = self.scorer(self.bin_tokens(spectral)).squeeze(-1)  # (..., K)
        return torch.softmax(scores, dim=-1)

    def forward(self, edge_features: torch.Tensor) -> torch.Tensor:
        # edge_features: (..., E, 3 + 2K)
        geom = edge_features[..., :3]
        spectral = edge_features[..., 3:]
        tokens = self.bin_tokens(spectral)
        alpha = torch.softmax(self.scorer(tokens).squeeze(-1), dim=-1)
        context = torch.einsum("...k,...kd->...d", alpha, self.bin_feat(tokens))
        return self.combine(torch.cat([context, geom], dim=-1))


class InverseModel(nn.Module):
    def __init__(self, cfg: InverseConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden_dim
        self.edge_encoder = BinAttentionEncoder(cfg)
        self.node_embed = mlp([2, d])
        self.node_combine = mlp([2 * d, d, d])
        self.gat_layers = nn.ModuleList(
            GraphAttentionLayer(d, cfg.heads, dropout=cfg.dropout) for _ in range(cfg.layers)
        )
        self.norms = nn.ModuleList(nn.LayerNorm(d) for _ in range(cfg.layers))
        self.act = nn.ELU()
        self.head = mlp([d, d, d, 2])
        self.to(dtype)
        self.compute_dtype = dtype

    def encode_edges(self, edge_features: torch.Tensor) -> torch.Tensor:
        """Initial edge embeddings h0, shape (B, E, hidden)."""
        return self.edge_encoder(edge_features)

    def init_nodes(
        self,
        edge_embeddings: torch.Tensor,
        edge_index: torch.Tensor,
        node_coords: torch.Tensor,
    ) -> torch.Tensor:
        """Node states from coordinate embeddings plus mean incoming edges."""
        agg = incoming_mean_matrix(edge_index, node_coords.shape[0], edge_embeddings.dtype)
        incoming = torch.einsum("ne,bed->bnd", agg, edge_embeddings)
        coord = self.node_embed(node_coords).unsqueeze(0).expand_as(incoming)
        return self.node_combine(torch.cat([coord, incoming], dim=-1))

    def forward(
        self,
        edge_features: torch.Tensor,  # (B, E, 3 + 2K)
        edge_index: torch.Tensor,  # (2, E)
        node_coords: torch.Tensor,  # (N, 2)
    ) -> torch.Tensor:
        h0 = self.encode_edges(edge_features)
        x = self.init_nodes(h0, edge_index, node_coords)
        mask = neighbor_mask(edge_index, node_coords.shape[0])
        for layer_idx, (gat, norm) in enumerate(zip(self.gat_layers, self.norms)):
            # Dropout acts on the attention coefficients inside each layer;
            # node states themselves stay intact (state dropout at this data
            # scale starves the damaged-sample fit).
            x = self.act(norm(gat(x, mask)))
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite node states after attention layer {layer_idx}")
        pooled = x.max(dim=1).values
        return self.head(pooled)

    def predict_graph(self, graph: InverseGraph) -> torch.Tensor:
        """Coordinate prediction for a single assembled inverse graph."""
        out = self.forward(
            graph.edge_features.unsqueeze(0).to(self.compute_dtype),
            graph.edge_index,
            graph.node_coords.to(self.compute_dtype),
        )
        return out[0]


def inverse_predict(
    model: InverseModel, graph: InverseGraph, training_mode: bool = False
) -> torch.Tensor:
    """Single-graph prediction with an explicit training-mode flag."""
    was_training = model.training
    model.train(training_mode)
    try:
        if training_mode:
            return model.predict_graph(graph)
        with torch.no_grad():
            return model.predict_graph(graph)
    finally:
        model.train(was_training)
