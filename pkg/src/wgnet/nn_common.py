"""Shared neural building blocks: MLPs, dense graph attention, pooling."""

from __future__ import annotations

import torch
from torch import nn


def mlp(sizes: list[int], activation=nn.ELU, final_activation=None) -> nn.Sequential:
    """Stack of Linear layers with ``activation`` between them."""
    layers: list[nn.Module] = []
    for k in range(len(sizes) - 1):
        layers.append(nn.Linear(sizes[k], sizes[k + 1]))
        if k < len(sizes) - 2:
            layers.append(activation())
    if final_activation is not None:
        layers.append(final_activation())
    return nn.Sequential(*layers)


def neighbor_mask(edge_index: torch.Tensor, n_nodes: int, self_loops: bool = True) -> torch.Tensor:
    """(N, N) boolean mask: mask[i, j] is True when j may send messages to i."""
    mask = torch.zeros(n_nodes, n_nodes, dtype=torch.bool, device=edge_index.device)
    mask[edge_index[1], edge_index[0]] = True
    if self_loops:
        mask.fill_diagonal_(True)
    return mask


def incoming_mean_matrix(edge_index: torch.Tensor, n_nodes: int, dtype: torch.dtype) -> torch.Tensor:
    """(N, E) matrix averaging directed-edge values onto their target node.

    Rows of isolated nodes are all-zero, so empty neighborhoods aggregate to
    the zero vector.
    """
    n_edges = edge_index.shape[1]
    mat = torch.zeros(n_nodes, n_edges, dtype=dtype, device=edge_index.device)
    mat[edge_index[1], torch.arange(n_edges)] = 1.0
    deg = mat.sum(dim=1, keepdim=True)
    return mat / torch.clamp(deg, min=1.0)


def incident_mean_matrix(edge_index: torch.Tensor, n_nodes: int, dtype: torch.dtype) -> torch.Tensor:
    """(N, E) matrix averaging directed-edge values over all incident edges
    (source or target)."""
    n_edges = edge_index.shape[1]
    mat = torch.zeros(n_nodes, n_edges, dtype=dtype, device=edge_index.device)
    idx = torch.arange(n_edges)
    mat[edge_index[0], idx] = 1.0
    mat[edge_index[1], idx] = 1.0
    deg = mat.sum(dim=1, keepdim=True)
    return mat / torch.clamp(deg, min=1.0)


class GraphAttentionLayer(nn.Module):
    """Multi-head attention over node states restricted to graph neighbors.

    Heads are concatenated; ``heads * head_dim == dim`` is enforced. Dropout
    acts on the attention coefficients (training mode only).
    """

    def __init__(self, dim: int, heads: int, dropout: float = 0.0, negative_slope: float = 0.2):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.proj = nn.Linear(dim, dim)
        self.attn_src = nn.Parameter(torch.empty(heads, self.head_dim))
        self.attn_dst = nn.Parameter(torch.empty(heads, self.head_dim))
        nn.init.xavier_uniform_(self.attn_src)
        nn.init.xavier_uniform_(self.attn_dst)
        self.leaky = nn.LeakyReLU(negative_slope)
        self.attn_dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        # x: (B, N, dim); mask: (N, N) with mask[i, j] = j visible to i
        b, n, _ = x.shape
        h = self.proj(x).view(b, n, self.heads, self.head_dim)
        score_dst = (h * self.attn_dst).sum(-1)  # receiving node i
        score_src = (h * self.attn_src).sum(-1)  # sending node j
        scores = self.leaky(score_dst.unsqueeze(2) + score_src.unsqueeze(1))  # (B, N_i, N_j, H)
        scores = scores.masked_fill(~mask.unsqueeze(0).unsqueeze(-1), float("-inf"))
        alpha = torch.softmax(scores, dim=2)
        alpha = self.attn_dropout(alpha)
        out = torch.einsum("bijh,bjhd->bihd", alpha, h)
        return out.reshape(b, n, self.heads * self.head_dim)


class AttentionPool(nn.Module):
    """Learned-query softmax pooling over node states."""

    def __init__(self, dim: int):
        super().__init__()
        self.query = nn.Parameter(torch.empty(dim))
        nn.init.normal_(self.query, std=dim**-0.5)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        weights = torch.softmax(x @ self.query, dim=-1)  # (B, N)
        return torch.einsum("bn,bnd->bd", weights, x)
