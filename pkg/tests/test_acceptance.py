"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with ``pytest tests/test_acceptance.py -v -s`` to stream the per-criterion
lines. Criterion 8 trains the full desk-scale protocol (three seeds, two
model variants) and dominates the runtime; criterion 11 only runs when a
real ingested store is supplied via WGNET_OGW_STORE.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from wgnet.cli import EXIT_OK, dispatch
from wgnet.data_io import SyntheticConfig, generate_synthetic, load_store
from wgnet.evaluation import evaluate_run, fpr, mae
from wgnet.forward_model import ForwardConfig, ForwardModel, coordinate_gradient
from wgnet.geometry import default_layout, enumerate_paths, select_forward_paths
from wgnet.graphs import build_inverse_graph, directed_edge_index
from wgnet.inverse_model import InverseConfig, InverseModel, inverse_predict
from wgnet.signal_prep import energy_deviation
from wgnet.training import (
    BandConfig,
    CouplingConfig,
    StagePlan,
    configure_torch,
    focus_weight,
    lambda_schedule,
    load_checkpoint,
    prepare_dataset,
    train_model,
)

configure_torch()


def report(criterion: int, name: str) -> None:
    print(f"ACCEPTANCE {criterion:02d} [{name}]: PASS")


def test_01_combinatorics():
    t0 = time.time()
    layout, _, _ = default_layout()
    paths = enumerate_paths(12)
    fwd = select_forward_paths(paths, layout)
    assert len(paths) == 66
    assert len(fwd) == 36
    assert time.time() - t0 < 1.0
    report(1, "combinatorics")


def test_02_energy_target_properties(tiny_dataset):
    t0 = time.time()
    # every target of a real store preparation lies in [0, 1]
    assert float(tiny_dataset.energy.min()) >= 0.0
    assert float(tiny_dataset.energy.max()) <= 1.0
    # amplitudes equal to the pristine reference give exactly zero
    ref = np.abs(np.random.default_rng(0).standard_normal((10, 8)))
    zero = energy_deviation(ref, ref, e_max=0.5, fwd_paths=np.arange(10))
    assert np.all(zero.values == 0.0)
    # constructed negative deviation clamps to zero
    below = energy_deviation(0.25 * ref, ref, e_max=0.5, fwd_paths=np.arange(10))
    assert np.all(below.values == 0.0)
    assert time.time() - t0 < 10.0
    report(2, "energy-target properties")


def test_03_focus_weights_exact():
    assert float(focus_weight(torch.tensor(0.0))) == 1.0
    assert float(focus_weight(torch.tensor(1.0))) == pytest.approx(101.0, abs=1e-12)
    assert float(focus_weight(torch.tensor(0.5))) == pytest.approx(51.0, abs=1e-12)
    # the approximate-100 reading holds alongside the exact value 101
    assert float(focus_weight(torch.tensor(1.0))) == pytest.approx(100.0, rel=0.05)
    report(3, "focus weights")


def test_04_lambda_schedule_exact():
    cfg = CouplingConfig()  # warmup 40, ramp 100, max 3
    for epoch in range(40):
        assert lambda_schedule(epoch, cfg) == 0.0
    for epoch in range(140, 700):
        assert lambda_schedule(epoch, cfg) == 3.0
    for epoch in range(40, 140):
        expected = 3.0 * (epoch - 40) / 100
        assert lambda_schedule(epoch, cfg) == pytest.approx(expected, abs=1e-12)
    # piecewise-linear and non-decreasing over the whole stage range
    values = [lambda_schedule(e, cfg) for e in range(600)]
    assert all(b >= a for a, b in zip(values, values[1:]))
    report(4, "lambda schedule")


def test_05_gradient_correctness():
    t0 = time.time()
    layout, _, _ = default_layout()
    fwd = select_forward_paths(enumerate_paths(12), layout)
    coords = torch.as_tensor(layout.coordinates, dtype=torch.float64)
    edge_index = directed_edge_index(fwd.pairs)
    rng = np.random.default_rng(5050)
    for trial in range(10):
        torch.manual_seed(1000 + trial)  # fresh random parameters each triple
        model = ForwardModel(ForwardConfig(), dtype=torch.float64).eval()
        cand = torch.as_tensor(rng.uniform(-0.1, 1.1, 2))
        target = torch.as_tensor(rng.uniform(0.0, 1.0, 36))
        grad = coordinate_gradient(model, cand, target, edge_index, coords)
        fd = torch.zeros(2, dtype=torch.float64)
        eps = 1e-6
        for d in range(2):
            dp, dm = cand.clone(), cand.clone()
            dp[d] += eps
            dm[d] -= eps
            with torch.no_grad():
                lp = ((model.predict_candidates(dp, edge_index, coords) - target) ** 2).mean()
                lm = ((model.predict_candidates(dm, edge_index, coords) - target) ** 2).mean()
            fd[d] = (lp - lm) / (2 * eps)
        rel = float((grad - fd).norm() / fd.norm())
        assert rel < 1e-4, f"triple {trial}: relative error {rel:.2e}"
    # unit-norm correction direction whenever the gradient is appreciable
    torch.manual_seed(77)
    model = ForwardModel(ForwardConfig(), dtype=torch.float64).eval()
    with torch.no_grad():
        for p in model.parameters():
            p.mul_(3.0)
    checked = 0
    for _ in range(40):
        cand = torch.as_tensor(rng.uniform(-0.2, 1.2, 2))
        target = torch.as_tensor(rng.uniform(0.5, 3.0, 36))
        g = coordinate_gradient(model, cand, target, edge_index, coords)
        if float(g.norm()) > 1e-3:
            direction = g / (g.norm() + 1e-8)
            assert 1 - 1e-6 <= float(direction.norm()) <= 1.0
            checked += 1
    assert checked >= 5
    assert time.time() - t0 < 30.0
    report(5, "coordinate gradient vs finite differences")


def test_06_freeze_invariant(tiny_dataset, tmp_path):
    t0 = time.time()
    plan = StagePlan(stage1_epochs=2, stage2_epochs=2, stage3_epochs=5)
    coupling = CouplingConfig(warmup_epochs=1, ramp_epochs=2)
    manifest = train_model(tiny_dataset, "wgn-coupled", 0, tmp_path / "mini", plan, coupling)
    assert manifest["forward_checksum_pre_stage3"] == manifest["forward_checksum_post_stage3"]
    assert time.time() - t0 < 120.0
    report(6, "forward freeze through stage III")


def test_07_permutation_invariance(geometry):
    layout, _, _, paths, _ = geometry
    rng = np.random.default_rng(31)
    z = rng.standard_normal((66, 32))
    graph = build_inverse_graph(layout, paths, z)
    perm = rng.permutation(12)
    inv_perm = np.argsort(perm)
    graph_p = type(graph)(
        node_coords=graph.node_coords[torch.as_tensor(inv_perm)],
        edge_index=torch.as_tensor(perm, dtype=torch.long)[graph.edge_index],
        edge_features=graph.edge_features.clone(),
        path_index=graph.path_index.clone(),
    )

    torch.manual_seed(2)
    inverse = InverseModel(InverseConfig(spectral_bins=16), dtype=torch.float64).eval()
    delta_inv = float(
        (inverse_predict(inverse, graph_p) - inverse_predict(inverse, graph)).abs().max()
    )
    assert delta_inv < 1e-5

    from wgnet.baselines import build_baseline

    torch.manual_seed(3)
    gnn = build_baseline("gnn-mlp", 3 + 32, dtype=torch.float64).eval()
    with torch.no_grad():
        base = gnn(graph.edge_features.unsqueeze(0), graph.edge_index, graph.node_coords)
        permuted = gnn(graph_p.edge_features.unsqueeze(0), graph_p.edge_index, graph_p.node_coords)
    delta_gnn = float((permuted - base).abs().max())
    assert delta_gnn < 1e-5

    torch.manual_seed(4)
    lstm = build_baseline("lstm", 3 + 32, dtype=torch.float64).eval()
    from wgnet.baselines import path_token_matrix

    tokens = path_token_matrix(layout, paths, z)
    order = rng.permutation(66)
    with torch.no_grad():
        a = lstm(tokens.unsqueeze(0))
        b = lstm(tokens[torch.as_tensor(order)].unsqueeze(0))
    delta_lstm = float((a - b).abs().max())
    assert delta_lstm > 1e-6
    print(
        f"  permutation deltas: inverse={delta_inv:.2e}, gnn-mlp={delta_gnn:.2e}, "
        f"lstm={delta_lstm:.2e} (order-sensitive)"
    )
    report(7, "permutation invariance")


# ---------------------------------------------------------------------------
# Criterion 8: synthetic end-to-end protocol (desk scale)

SYNTH_SEEDS = (0, 1, 42)
DESK_PLAN_INVERSE = StagePlan(single_stage_epochs=300, lr_initial=1e-3)
DESK_PLAN_COUPLED = StagePlan(
    stage1_epochs=150, stage2_epochs=300, stage3_epochs=150, lr_initial=1e-3, lr_stage3=1e-4
)
DESK_COUPLING = CouplingConfig(warmup_epochs=20, ramp_epochs=60)


@pytest.fixture(scope="module")
def synth_protocol(tmp_path_factory):
    """Full desk-scale protocol: 3 seeds x {wgn-inverse, wgn-coupled} on split A."""
    root = tmp_path_factory.mktemp("synth_protocol")
    t0 = time.time()
    cfg = SyntheticConfig(t_samples=1024, noise_level=0.1, shadow_sigma=0.1)
    store = generate_synthetic(cfg, seed=7, store_dir=root / "store")
    results: dict = {}
    for seed in SYNTH_SEEDS:
        dataset = prepare_dataset(store, "A", seed, BandConfig(n_bins=32))
        for kind, plan in (
            ("wgn-inverse", DESK_PLAN_INVERSE),
            ("wgn-coupled", DESK_PLAN_COUPLED),
        ):
            run_dir = root / f"A_{kind}_seed{seed}"
            manifest = train_model(dataset, kind, seed, run_dir, plan, DESK_COUPLING)
            model, _, _ = load_checkpoint(run_dir / "checkpoint.pt", dataset)
            evaluation = evaluate_run(model, kind, dataset)
            stage_hist = manifest["history"]["single"] or manifest["history"]["stage1"]
            results[(kind, seed)] = {
                "metrics": evaluation["metrics"],
                "min_train_mae": min(h["train_damaged_mae"] for h in stage_hist),
            }
    results["elapsed"] = time.time() - t0
    return results


def test_08a_inverse_fits_training_zone(synth_protocol):
    for seed in SYNTH_SEEDS:
        reached = synth_protocol[("wgn-inverse", seed)]["min_train_mae"]
        assert reached < 0.05, f"seed {seed}: train MAE only reached {reached:.4f}"
    report(8, "synthetic 8a: inverse train MAE < 0.05 within 300 epochs")


def test_08b_coupling_helps_unseen_zone(synth_protocol):
    wins = 0
    for seed in SYNTH_SEEDS:
        coupled = synth_protocol[("wgn-coupled", seed)]["metrics"]["unseen_mae_norm"]
        inverse = synth_protocol[("wgn-inverse", seed)]["metrics"]["unseen_mae_norm"]
        print(f"  seed {seed}: coupled unseen={coupled:.4f} vs inverse unseen={inverse:.4f}")
        wins += coupled <= inverse
    assert wins >= 2, f"coupled beat inverse in only {wins}/3 seeds"
    report(8, "synthetic 8b: coupled <= inverse unseen MAE in >= 2/3 seeds")


def test_08c_coupled_pristine_fpr(synth_protocol):
    zero_fpr = 0
    for seed in SYNTH_SEEDS:
        fraction = synth_protocol[("wgn-coupled", seed)]["metrics"]["fpr_fraction"]
        print(f"  seed {seed}: coupled FPR {fraction}")
        zero_fpr += fraction.split("/")[0] == "0"
    assert zero_fpr >= 2, f"coupled FPR was zero in only {zero_fpr}/3 seeds"
    report(8, "synthetic 8c: coupled FPR 0/6 in >= 2/3 seeds")


def test_08d_protocol_runtime(synth_protocol):
    assert synth_protocol["elapsed"] < 1200, f"took {synth_protocol['elapsed']:.0f}s"
    report(8, f"synthetic 8d: runtime {synth_protocol['elapsed']:.0f}s < 20 min")


def test_09_metric_arithmetic():
    norm, mm = mae([[0.22, 0.0]], [[0.0, 0.0]], side_length_mm=500.0)
    assert mm == pytest.approx(110.0)
    rate, fraction = fpr(np.vstack([np.full((7, 2), 0.5), np.full((11, 2), -0.1)]))
    assert fraction == "7/18"
    assert f"{100 * rate:.1f}%" == "38.9%"
    report(9, "metric arithmetic")


def test_10_determinism_bit_identical_reports(tmp_path):
    def pipeline(tag: str) -> Path:
        out = tmp_path / tag
        store = tmp_path / f"store_{tag}"
        assert dispatch(
            ["synth", "--out", str(store), "--seed", "0",
             "--t-samples", "512", "--noise", "0.05", "--pristine-count", "12"]
        ) == EXIT_OK
        common = ["--store", str(store), "--out", str(out), "--split", "A",
                  "--seeds", "0", "--bins", "16"]
        assert dispatch(
            ["train", *common, "--model", "wgn-coupled",
             "--stage1-epochs", "3", "--stage2-epochs", "3", "--stage3-epochs", "4",
             "--warmup", "1", "--ramp", "2"]
        ) == EXIT_OK
        assert dispatch(["eval", *common, "--models", "wgn-coupled"]) == EXIT_OK
        assert dispatch(["report", "--out", str(out)]) == EXIT_OK
        return out / "report" / "report.json"

    first = pipeline("runA").read_bytes()
    second = pipeline("runB").read_bytes()
    assert first == second
    report(10, "seed-0 determinism, bit-identical report.json")


OGW_ENV = "WGNET_OGW_STORE"


@pytest.mark.skipif(OGW_ENV not in os.environ, reason=f"set {OGW_ENV} to an ingested OGW store")
def test_11_real_data_reproduction():
    """Conditional: full protocol on the real ingested benchmark store.

    Checks the unseen-MAE band 0.15-0.30 for the coupled model on split A and
    the coupled <= gat <= gnn-mlp rank order; runs the full 900-epoch protocol
    and is expected to take hours.
    """
    store = load_store(os.environ[OGW_ENV])
    plan = StagePlan()
    coupling = CouplingConfig()
    unseen: dict[str, list[float]] = {"wgn-coupled": [], "gat": [], "gnn-mlp": []}
    for seed in SYNTH_SEEDS:
        dataset = prepare_dataset(store, "A", seed, BandConfig())
        for kind in unseen:
            run_dir = Path(os.environ.get("WGNET_OGW_OUT", "/tmp/wgnet_ogw")) / f"{kind}_s{seed}"
            train_model(dataset, kind, seed, run_dir, plan, coupling)
            model, _, _ = load_checkpoint(run_dir / "checkpoint.pt", dataset)
            unseen[kind].append(evaluate_run(model, kind, dataset)["metrics"]["unseen_mae_norm"])
    coupled = float(np.mean(unseen["wgn-coupled"]))
    assert 0.15 <= coupled <= 0.30
    assert coupled <= float(np.mean(unseen["gat"])) <= float(np.mean(unseen["gnn-mlp"]))
    report(11, "real-data reproduction band and rank order")
