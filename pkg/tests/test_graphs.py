import numpy as np
import pytest
import torch

from wgnet.errors import DataError, NumericError
from wgnet.geometry import P_UNDAMAGED, TransducerLayout, enumerate_paths
from wgnet.graphs import (
    build_forward_graph,
    build_inverse_graph,
    directed_edge_index,
    forward_edge_features,
    safe_norm,
)


class TestInverseGraph:
    def test_counts_and_width_for_default_layout(self, geometry, rng):
        layout, _, _, paths, _ = geometry
        z = rng.standard_normal((66, 512))
        g = build_inverse_graph(layout, paths, z)
        assert g.n_directed_edges == 132
        assert g.edge_features.shape == (132, 3 + 512)

    def test_reciprocal_edges_share_descriptor_and_negate_displacement(self, geometry, rng):
        layout, _, _, paths, _ = geometry
        z = rng.standard_normal((66, 32))
        g = build_inverse_graph(layout, paths, z)
        p = len(paths)
        fwd_feats, rev_feats = g.edge_features[:p], g.edge_features[p:]
        assert torch.equal(fwd_feats[:, 3:], rev_feats[:, 3:])  # shared spectral block
        assert torch.allclose(fwd_feats[:, :2], -rev_feats[:, :2])  # negated displacement
        assert torch.allclose(fwd_feats[:, 2], rev_feats[:, 2])  # same length
        # direction bookkeeping
        assert torch.equal(g.edge_index[0, :p], g.edge_index[1, p:])
        assert torch.equal(g.path_index[:p], g.path_index[p:])

    def test_coincident_transducers_still_valid(self, rng):
        layout = TransducerLayout(
            coordinates=np.array([[0.5, 0.5], [0.5, 0.5], [0.2, 0.9]]),
            top_row=(2,),
            bottom_row=(0, 1),
        )
        paths = enumerate_paths(3)
        g = build_inverse_graph(layout, paths, rng.standard_normal((3, 8)))
        k = paths.pairs.index((0, 1))
        assert float(g.edge_features[k, 2]) == pytest.approx(0.0, abs=1e-140)
        assert torch.allclose(g.edge_features[k, :2], torch.zeros(2, dtype=torch.float64))
        assert torch.isfinite(g.edge_features).all()

    def test_missing_descriptor_rejected(self, geometry, rng):
        layout, _, _, paths, _ = geometry
        with pytest.raises(DataError):
            build_inverse_graph(layout, paths, rng.standard_normal((65, 32)))


class TestForwardGraph:
    def test_counts_and_width(self, geometry):
        layout, _, _, _, fwd = geometry
        g = build_forward_graph(layout, fwd, np.array([0.4, 0.3]))
        assert g.n_directed_edges == 72
        assert g.edge_features.shape == (72, 5)

    def test_candidate_at_transducer_zeroes_source_distance(self, geometry):
        layout, _, _, _, fwd = geometry
        i = fwd.pairs[0][0]
        g = build_forward_graph(layout, fwd, layout.coordinates[i])
        src = g.edge_index[0]
        sourced_at_i = src == i
        assert sourced_at_i.any()
        assert float(g.edge_features[sourced_at_i, 3].abs().max()) < 1e-140

    def test_no_damage_candidate_gives_finite_positive_distances(self, geometry):
        layout, _, _, _, fwd = geometry
        g = build_forward_graph(layout, fwd, P_UNDAMAGED)
        assert torch.isfinite(g.edge_features).all()
        assert (g.edge_features[:, 3:] > 0).all()

    def test_non_finite_candidate_rejected(self, geometry):
        layout, _, _, _, fwd = geometry
        with pytest.raises(NumericError):
            build_forward_graph(layout, fwd, np.array([np.nan, 0.2]))

    def test_direction_swap_maps_features_correctly(self, geometry, rng):
        # [d, l, a, b] -> [-d, l, b, a] under (i, j) -> (j, i)
        layout, _, _, _, fwd = geometry
        g = build_forward_graph(layout, fwd, rng.uniform(0, 1, 2))
        p = len(fwd)
        f_fwd, f_rev = g.edge_features[:p], g.edge_features[p:]
        assert torch.allclose(f_fwd[:, :2], -f_rev[:, :2])
        assert torch.allclose(f_fwd[:, 2], f_rev[:, 2])
        assert torch.allclose(f_fwd[:, 3], f_rev[:, 4])
        assert torch.allclose(f_fwd[:, 4], f_rev[:, 3])

    def test_features_differentiable_with_finite_subgradient_at_kink(self, geometry):
        layout, _, _, _, fwd = geometry
        coords = torch.as_tensor(layout.coordinates, dtype=torch.float64)
        edge_index = directed_edge_index(fwd.pairs)
        # generic point: gradient must be finite and nonzero
        cand = torch.tensor([0.31, 0.77], dtype=torch.float64, requires_grad=True)
        feats = forward_edge_features(coords, edge_index, cand)
        feats.sum().backward()
        assert torch.isfinite(cand.grad).all()
        assert float(cand.grad.norm()) > 0
        # exactly on a transducer: subgradient must stay finite
        cand2 = coords[0].clone().detach().requires_grad_(True)
        feats2 = forward_edge_features(coords, edge_index, cand2)
        feats2.sum().backward()
        assert torch.isfinite(cand2.grad).all()


def test_safe_norm_matches_euclidean_away_from_zero(rng):
    v = torch.as_tensor(rng.standard_normal((50, 2)))
    assert torch.allclose(safe_norm(v), torch.linalg.norm(v, dim=-1))
