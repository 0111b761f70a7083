"""Comparison models: 1D-CNN, LSTM, GNN-MLP, and a plain GAT.

All consume the same preprocessed descriptors as the main model and regress
a 2-D coordinate. The non-graph models read a path-token matrix (one row per
measured path, canonical order); the graph models read the inverse graph but
use a static feed-forward edge encoder instead of frequency-bin attention,
and train with the localization loss only.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .errors import ConfigError
from .graphs import DTYPE, geometric_edge_features
from .nn_common import AttentionPool, GraphAttentionLayer, incoming_mean_matrix, mlp, neighbor_mask

PATH_INPUT_KINDS = ("cnn1d", "lstm")
GRAPH_INPUT_KINDS = ("gnn-mlp", "gat")
BASELINE_KINDS = PATH_INPUT_KINDS + GRAPH_INPUT_KINDS

_CNN_CHANNELS = (16, 32, 64, 128, 256)


def path_token_matrix(layout, paths, descriptors: np.ndarray) -> torch.Tensor:
    """(|P|, 3 + 2K) matrix: per path, geometry then spectral descriptor.

    Featurization matches the inverse edges, one direction only (i < j),
    rows in canonical path order.
    """
    coords = torch.as_tensor(layout.coordinates, dtype=DTYPE)
    src = torch.tensor([i for i, _ in paths.pairs], dtype=torch.long)
    dst = torch.tensor([j for _, j in paths.pairs], dtype=torch.long)
    geom = geometric_edge_features(coords, torch.stack([src, dst]))
    z = torch.as_tensor(np.asarray(descriptors), dtype=DTYPE)
    return torch.cat([geom, z], dim=1)


class Cnn1dModel(nn.Module):
    """Five Conv1d blocks over the path axis, channels 16 -> 256, kernel 3."""

    def __init__(self, feature_dim: int, dtype: torch.dtype = torch.float32):
        super().__init__()
        blocks: list[nn.Module] = []
        prev = feature_dim
        for ch in _CNN_CHANNELS:
            blocks += [nn.Conv1d(prev, ch, kernel_size=3, padding=1), nn.ReLU(), nn.MaxPool1d(2)]
            prev = ch
        self.blocks = nn.Sequential(*blocks)
        self.head = mlp([prev, 256, 256, 2], activation=nn.ReLU)
        self.to(dtype)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        # tokens: (B, P, F); convolve along the path axis
        x = self.blocks(tokens.transpose(1, 2))
        return self.head(x.mean(dim=-1))


class LstmModel(nn.Module):
    """3-layer BiLSTM over path tokens with self-attention pooling."""

    def __init__(self, feature_dim: int, hidden: int = 128, dropout: float = 0.3,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.rnn = nn.LSTM(
            input_size=feature_dim,
            hidden_size=hidden,
            num_layers=3,
            bidirectional=True,
            dropout=dropout,
            batch_first=True,
        )
        self.pool = AttentionPool(2 * hidden)
        self.head = mlp([2 * hidden, 256, 256, 2], activation=nn.ReLU)
        self.to(dtype)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        out, _ = self.rnn(tokens)
        return self.head(self.pool(out))


class _StaticEdgeGraphModel(nn.Module):
    """Shared skeleton: static 4-layer edge encoder + node initialization."""

    def __init__(self, feature_dim: int, dim: int = 256):
        super().__init__()
        self.edge_encoder = mlp([feature_dim, dim, dim, dim, dim], activation=nn.ReLU)
        self.node_embed = mlp([2, dim], activation=nn.ReLU)
        self.node_combine = mlp([2 * dim, dim], activation=nn.ReLU)
        self.dim = dim

    def init_nodes(self, edge_features, edge_index, node_coords):
        h = self.edge_encoder(edge_features)
        agg = incoming_mean_matrix(edge_index, node_coords.shape[0], h.dtype)
        incoming = torch.einsum("ne,bed->bnd", agg, h)
        coord = self.node_embed(node_coords).unsqueeze(0).expand_as(incoming)
        return self.node_combine(torch.cat([coord, incoming], dim=-1))


class GnnMlpModel(_StaticEdgeGraphModel):
    """Message passing with mean aggregation and mean pooling."""

    def __init__(self, feature_dim: int, dim: int = 256, mp_layers: int = 4,
                 dtype: torch.dtype = torch.float32):
        super().__init__(feature_dim, dim)
        self.mp = nn.ModuleList(
            mlp([2 * dim, dim, dim], activation=nn.ReLU) for _ in range(mp_layers)
        )
        self.head = mlp([dim, 256, 256, 2], activation=nn.ReLU)
        self.to(dtype)

    def forward(self, edge_features, edge_index, node_coords):
        x = self.init_nodes(edge_features, edge_index, node_coords)
        mask = neighbor_mask(edge_index, node_coords.shape[0], self_loops=False)
        weights = mask.to(x.dtype)
        weights = weights / torch.clamp(weights.sum(dim=1, keepdim=True), min=1.0)
        for update in self.mp:
            neigh = torch.einsum("ij,bjd->bid", weights, x)
            x = update(torch.cat([x, neigh], dim=-1))
        return self.head(x.mean(dim=1))


class GatBaselineModel(_StaticEdgeGraphModel):
    """Plain stacked graph attention with learned-query pooling."""

    def __init__(self, feature_dim: int, dim: int = 256, layers: int = 4, heads: int = 16,
                 dtype: torch.dtype = torch.float32):
        super().__init__(feature_dim, dim)
        self.gat_layers = nn.ModuleList(GraphAttentionLayer(dim, heads) for _ in range(layers))
        self.pool = AttentionPool(dim)
        self.head = mlp([dim, 256, 256, 2], activation=nn.ReLU)
        self.to(dtype)

    def forward(self, edge_features, edge_index, node_coords):
        x = self.init_nodes(edge_features, edge_index, node_coords)
        mask = neighbor_mask(edge_index, node_coords.shape[0])
        for gat in self.gat_layers:
            x = gat(x, mask)
        return self.head(self.pool(x))


def build_baseline(kind: str, feature_dim: int, dtype: torch.dtype = torch.float32) -> nn.Module:
    if kind == "cnn1d":
        return Cnn1dModel(feature_dim, dtype=dtype)
    if kind == "lstm":
        return LstmModel(feature_dim, dtype=dtype)
    if kind == "gnn-mlp":
        return GnnMlpModel(feature_dim, dtype=dtype)
    if kind == "gat":
        return GatBaselineModel(feature_dim, dtype=dtype)
    raise ConfigError(f"unknown baseline kind {kind!r}")


def baseline_predict(
    kind: str,
    model: nn.Module,
    inputs: torch.Tensor,
    edge_index: torch.Tensor | None = None,
    node_coords: torch.Tensor | None = None,
) -> torch.Tensor:
    """Batched prediction with kind/input compatibility checks."""
    if kind in PATH_INPUT_KINDS:
        if edge_index is not None or node_coords is not None:
            raise ConfigError(f"{kind} operates on path-token matrices, not graphs")
        return model(inputs)
    if kind in GRAPH_INPUT_KINDS:
        if edge_index is None or node_coords is None:
            raise ConfigError(f"{kind} needs the inverse graph structure")
        return model(inputs, edge_index, node_coords)
    raise ConfigError(f"unknown baseline kind {kind!r}")
