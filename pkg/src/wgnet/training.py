"""Losses, schedules, and the staged optimization pipeline.

Stage I pretrains the inverse branch on the localization loss, Stage II
pretrains the forward branch on focus-weighted energy-deviation regression at
ground-truth coordinates, and Stage III updates only the inverse branch under
the coupled objective

    L_total = L_loc + lambda(epoch) * L_fwd + mu * L_corr

with the forward branch frozen. Baselines and the inverse-only variant train
single-stage on L_loc under the shared optimization protocol.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .baselines import BASELINE_KINDS, PATH_INPUT_KINDS, build_baseline
from .errors import ConfigError, TrainingAbort
from .forward_model import ForwardConfig, ForwardModel, coordinate_gradient
from .geometry import (
    P_UNDAMAGED,
    assign_partitions,
    enumerate_paths,
    make_split,
    select_forward_paths,
)
from .graphs import directed_edge_index, geometric_edge_features
from .inverse_model import InverseConfig, InverseModel
from .signal_prep import PreprocessModel, select_band

log = logging.getLogger(__name__)

MODEL_KINDS = BASELINE_KINDS + ("wgn-inverse", "wgn-coupled")


def configure_torch(threads: int | None = None) -> int:
    """Pin the intra-op thread count for run-to-run reproducibility.

    Tiny graphs gain nothing from intra-op threading, and a fixed count keeps
    floating-point reduction order stable across runs. Override with
    WGNET_THREADS.
    """
    import os

    resolved = threads or int(os.environ.get("WGNET_THREADS", "1"))
    torch.set_num_threads(resolved)
    return resolved


@dataclass
class StagePlan:
    """Epoch counts and optimization settings shared across models."""

    stage1_epochs: int = 150
    stage2_epochs: int = 150
    stage3_epochs: int = 600
    lr_initial: float = 1e-4
    lr_stage3: float = 1e-5
    batch_size: int = 8
    plateau_factor: float = 0.8
    plateau_patience: int = 20
    single_stage_epochs: int = 900  # baselines and the inverse-only variant

    def __post_init__(self):
        if min(self.lr_initial, self.lr_stage3) <= 0:
            raise ConfigError("learning rates must be positive")
        if self.stage1_epochs + self.stage2_epochs + self.stage3_epochs <= 0:
            raise ConfigError("total epochs must be positive")


@dataclass
class CouplingConfig:
    """Stage III coupling weights and schedule."""

    lambda_max: float = 3.0
    warmup_epochs: int = 40
    ramp_epochs: int = 100
    mu: float = 1.0
    alpha: float = 0.1
    eps_weight: float = 0.01
    eps_grad: float = 1e-8
    grad_clip: float = 5.0

    def __post_init__(self):
        for name in ("lambda_max", "warmup_epochs", "ramp_epochs", "mu", "alpha", "eps_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")


@dataclass
class BandConfig:
    low_hz: float = 69.4e3
    high_hz: float = 128e3
    n_bins: int = 256


# ---------------------------------------------------------------------------
# Losses and schedules


def loss_localization(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Squared Euclidean distance, averaged over the batch."""
    return ((pred - target) ** 2).sum(dim=-1).mean()


def focus_weight(delta_e, eps: float = 0.01):
    """Per-path weight (dE + eps) / eps: 1 for unaffected paths, ~100 at dE=1."""
    return (delta_e + eps) / eps


def loss_forward_pretrain(
    pred: torch.Tensor, target: torch.Tensor, eps: float = 0.01
) -> torch.Tensor:
    """Focus-weighted MSE over samples and forward paths."""
    return (focus_weight(target, eps) * (pred - target) ** 2).mean()


def loss_forward_consistency(
    pred_coords: torch.Tensor,  # (B, 2), gradients flow to the inverse branch
    observed: torch.Tensor,  # (B, |P_f|)
    forward_model: ForwardModel,
    fwd_edge_index: torch.Tensor,
    node_coords: torch.Tensor,
    damaged_mask: torch.Tensor,
) -> torch.Tensor:
    """Unweighted forward mismatch on damaged samples; 0 for an empty batch."""
    if not bool(damaged_mask.any()):
        return pred_coords.new_zeros(())
    coords = pred_coords[damaged_mask]
    pred = forward_model.predict_candidates(coords, fwd_edge_index, node_coords)
    return ((pred - observed[damaged_mask]) ** 2).mean()


def physics_correction(
    pred_coords: torch.Tensor,
    observed: torch.Tensor,
    truth: torch.Tensor,
    forward_model: ForwardModel,
    fwd_edge_index: torch.Tensor,
    node_coords: torch.Tensor,
    alpha: float,
    eps_grad: float,
    damaged_mask: torch.Tensor,
) -> torch.Tensor:
    """One-step physics-guided correction loss on damaged samples.

    The correction direction comes from a detached coordinate-space probe of
    the frozen forward branch, so gradients reach the inverse branch only
    through the predicted coordinate itself.
    """
    if not bool(damaged_mask.any()):
        return pred_coords.new_zeros(())
    coords = pred_coords[damaged_mask]
    grad = coordinate_gradient(
        forward_model, coords, observed[damaged_mask], fwd_edge_index, node_coords
    )
    direction = grad / (grad.norm(dim=-1, keepdim=True) + eps_grad)
    corrected = coords - alpha * direction
    return ((corrected - truth[damaged_mask]) ** 2).sum(dim=-1).mean()


def lambda_schedule(epoch_in_stage3: int, cfg: CouplingConfig) -> float:
    """0 during warmup, linear ramp to lambda_max over ramp_epochs, flat after."""
    if epoch_in_stage3 < cfg.warmup_epochs:
        return 0.0
    if cfg.ramp_epochs <= 0 or epoch_in_stage3 >= cfg.warmup_epochs + cfg.ramp_epochs:
        return cfg.lambda_max
    return cfg.lambda_max * (epoch_in_stage3 - cfg.warmup_epochs) / cfg.ramp_epochs


def total_stage3_loss(
    pred_coords: torch.Tensor,
    targets: torch.Tensor,
    observed: torch.Tensor,
    damaged_mask: torch.Tensor,
    forward_model: ForwardModel,
    fwd_edge_index: torch.Tensor,
    node_coords: torch.Tensor,
    coupling: CouplingConfig,
    epoch_in_stage3: int,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Coupled objective and its separately-logged components."""
    lam = lambda_schedule(epoch_in_stage3, coupling)
    loc = loss_localization(pred_coords, targets)
    fwd = loss_forward_consistency(
        pred_coords, observed, forward_model, fwd_edge_index, node_coords, damaged_mask
    )
    corr = physics_correction(
        pred_coords,
        observed,
        targets,
        forward_model,
        fwd_edge_index,
        node_coords,
        coupling.alpha,
        coupling.eps_grad,
        damaged_mask,
    )
    total = loc + lam * fwd + coupling.mu * corr
    components = {
        "loc": float(loc.detach()),
        "fwd": float(fwd.detach()),
        "corr": float(corr.detach()),
        "lambda": lam,
        "mu": coupling.mu,
    }
    return total, components


# ---------------------------------------------------------------------------
# Prepared dataset


@dataclass
class PreparedDataset:
    """Preprocessed tensors plus graph structure for one (store, split, seed)."""

    sample_ids: list[str]
    spectral: torch.Tensor  # (S, |P|, 2K)
    targets: torch.Tensor  # (S, 2) true coordinate or the no-damage target
    energy: torch.Tensor  # (S, |P_f|)
    damaged: torch.Tensor  # (S,) bool
    partition: list[str]  # "train" | "val" | "test"
    node_coords: torch.Tensor  # (N, 2)
    inv_edge_index: torch.Tensor  # (2, 2|P|)
    inv_geom: torch.Tensor  # (2|P|, 3)
    edge_path_index: torch.Tensor  # (2|P|,)
    path_geom: torch.Tensor  # (|P|, 3) canonical direction only
    fwd_edge_index: torch.Tensor  # (2, 2|P_f|)
    n_fwd_paths: int
    side_length_mm: float
    split_name: str
    seed: int
    band_info: dict
    e_max: float

    @property
    def n_samples(self) -> int:
        return len(self.sample_ids)

    @property
    def spectral_bins(self) -> int:
        return int(self.spectral.shape[2]) // 2

    def indices(self, partition: str, damaged_only: bool = False, pristine_only: bool = False):
        out = [
            k
            for k in range(self.n_samples)
            if self.partition[k] == partition
            and (not damaged_only or bool(self.damaged[k]))
            and (not pristine_only or not bool(self.damaged[k]))
        ]
        return np.asarray(out, dtype=int)

    def edge_features(self, idx) -> torch.Tensor:
        """(B, 2|P|, 3 + 2K) inverse edge features for a batch of samples."""
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        z = self.spectral[idx][:, self.edge_path_index]  # (B, 2P, 2K)
        geom = self.inv_geom.unsqueeze(0).expand(z.shape[0], -1, -1)
        return torch.cat([geom, z], dim=-1)

    def path_tokens(self, idx) -> torch.Tensor:
        """(B, |P|, 3 + 2K) path-token matrices (canonical direction only)."""
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        z = self.spectral[idx]
        geom = self.path_geom.unsqueeze(0).expand(z.shape[0], -1, -1)
        return torch.cat([geom, z], dim=-1)


def prepare_dataset(
    store,
    split_name: str,
    seed: int,
    band_cfg: BandConfig = BandConfig(),
    dtype: torch.dtype = torch.float32,
) -> PreparedDataset:
    """Fit preprocessing on the training partition and tensorize everything.

    ``dtype`` is the compute precision used for training; preprocessing
    itself always runs in float64 numpy.
    """
    layout, catalog = store.layout, store.catalog
    paths = enumerate_paths(layout.n_transducers)
    fwd_paths = select_forward_paths(paths, layout)

    split = make_split(split_name, catalog, seed)
    damaged_ids = {s.sample_id: s.damage_label for s in store.samples if not s.pristine}
    pristine_ids = [s.sample_id for s in store.samples if s.pristine]
    assignment = assign_partitions(split, damaged_ids, pristine_ids, seed)

    sample_order = sorted(store.samples, key=lambda s: s.sample_id)
    first = sample_order[0]
    band = select_band(
        first.signals.shape[0],
        first.sampling_rate_hz,
        band_cfg.low_hz,
        band_cfg.high_hz,
        band_cfg.n_bins,
    )
    train_samples = [s for s in sample_order if assignment.partition_of(s.sample_id) == "train"]
    prep = PreprocessModel.fit(train_samples, band, fwd_paths)

    spectral, energy, targets, damaged, partition, ids = [], [], [], [], [], []
    for s in sample_order:
        desc, target = prep.apply(s)
        spectral.append(desc)
        energy.append(target)
        targets.append(s.target_coordinate)
        damaged.append(not s.pristine)
        partition.append(assignment.partition_of(s.sample_id))
        ids.append(s.sample_id)

    node_coords = torch.as_tensor(layout.coordinates, dtype=dtype)
    inv_edge_index = directed_edge_index(paths.pairs)
    fwd_edge_index = directed_edge_index(fwd_paths.pairs)
    canonical = directed_edge_index(paths.pairs)[:, : len(paths)]
    return PreparedDataset(
        sample_ids=ids,
        spectral=torch.as_tensor(np.stack(spectral), dtype=dtype),
        targets=torch.as_tensor(np.stack(targets), dtype=dtype),
        energy=torch.as_tensor(np.stack(energy), dtype=dtype),
        damaged=torch.as_tensor(damaged, dtype=torch.bool),
        partition=partition,
        node_coords=node_coords,
        inv_edge_index=inv_edge_index,
        inv_geom=geometric_edge_features(node_coords, inv_edge_index),
        edge_path_index=torch.arange(len(paths), dtype=torch.long).repeat(2),
        path_geom=geometric_edge_features(node_coords, canonical),
        fwd_edge_index=fwd_edge_index,
        n_fwd_paths=len(fwd_paths),
        side_length_mm=store.plate.side_length_mm,
        split_name=split_name,
        seed=seed,
        band_info={
            "bin_indices": [int(b) for b in band.bin_indices],
            "low_hz": band_cfg.low_hz,
            "high_hz": band_cfg.high_hz,
            "n_bins": band_cfg.n_bins,
            "frequencies_hz": [float(f) for f in band.frequencies_hz[[0, -1]]],
        },
        e_max=prep.stats.e_max,
    )


def save_prepared(dataset: PreparedDataset, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(
        path,
        spectral=dataset.spectral.numpy(),
        targets=dataset.targets.numpy(),
        energy=dataset.energy.numpy(),
        damaged=dataset.damaged.numpy(),
        node_coords=dataset.node_coords.numpy(),
        side_length_mm=dataset.side_length_mm,
        e_max=dataset.e_max,
        seed=dataset.seed,
    )
    meta = {
        "sample_ids": dataset.sample_ids,
        "partition": dataset.partition,
        "split": dataset.split_name,
        "seed": dataset.seed,
        "band": dataset.band_info,
        "e_max": dataset.e_max,
        "n_fwd_paths": dataset.n_fwd_paths,
    }
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_prepared(path: Path, store, dtype: torch.dtype = torch.float32) -> PreparedDataset:
    path = Path(path)
    with open(path.with_suffix(".json")) as fh:
        meta = json.load(fh)
    layout = store.layout
    paths = enumerate_paths(layout.n_transducers)
    fwd_paths = select_forward_paths(paths, layout)
    with np.load(path) as z:
        node_coords = torch.as_tensor(z["node_coords"], dtype=dtype)
        inv_edge_index = directed_edge_index(paths.pairs)
        canonical = inv_edge_index[:, : len(paths)]
        return PreparedDataset(
            sample_ids=list(meta["sample_ids"]),
            spectral=torch.as_tensor(z["spectral"], dtype=dtype),
            targets=torch.as_tensor(z["targets"], dtype=dtype),
            energy=torch.as_tensor(z["energy"], dtype=dtype),
            damaged=torch.as_tensor(z["damaged"], dtype=torch.bool),
            partition=list(meta["partition"]),
            node_coords=node_coords,
            inv_edge_index=inv_edge_index,
            inv_geom=geometric_edge_features(node_coords, inv_edge_index),
            edge_path_index=torch.arange(len(paths), dtype=torch.long).repeat(2),
            path_geom=geometric_edge_features(node_coords, canonical),
            fwd_edge_index=directed_edge_index(fwd_paths.pairs),
            n_fwd_paths=len(fwd_paths),
            side_length_mm=float(z["side_length_mm"]),
            split_name=meta["split"],
            seed=int(meta["seed"]),
            band_info=meta["band"],
            e_max=float(z["e_max"]),
        )


# ---------------------------------------------------------------------------
# Training orchestration


def state_checksum(module: torch.nn.Module) -> str:
    """Content hash over named parameters and buffers, order-stable."""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def make_predictor(kind: str, model: torch.nn.Module, dataset: PreparedDataset):
    """Uniform (indices) -> (B, 2) prediction callable for any model kind."""
    if kind in PATH_INPUT_KINDS:
        return lambda idx: model(dataset.path_tokens(idx))
    return lambda idx: model(
        dataset.edge_features(idx), dataset.inv_edge_index, dataset.node_coords
    )


def build_localizer(kind: str, dataset: PreparedDataset) -> torch.nn.Module:
    feature_dim = 3 + 2 * dataset.spectral_bins
    dtype = dataset.spectral.dtype
    if kind in BASELINE_KINDS:
        return build_baseline(kind, feature_dim, dtype=dtype)
    if kind in ("wgn-inverse", "wgn-coupled"):
        return InverseModel(InverseConfig(spectral_bins=dataset.spectral_bins), dtype=dtype)
    raise ConfigError(f"unknown model kind {kind!r}")


def validation_score(
    predictor,
    forward_model: ForwardModel | None,
    dataset: PreparedDataset,
    val_damaged_idx: np.ndarray,
) -> tuple[float, float, float]:
    """(s_val, coordinate MSE, forward MSE) on damaged validation samples."""
    if val_damaged_idx.size == 0:
        raise ConfigError("validation requires at least one damaged sample")
    with torch.no_grad():
        pred = predictor(val_damaged_idx)
        mse_loc = float(((pred - dataset.targets[val_damaged_idx]) ** 2).sum(dim=-1).mean())
        mse_fwd = 0.0
        if forward_model is not None:
            fwd_pred = forward_model.predict_candidates(
                pred, dataset.fwd_edge_index, dataset.node_coords
            )
            mse_fwd = float(((fwd_pred - dataset.energy[val_damaged_idx]) ** 2).mean())
    return mse_loc + mse_fwd, mse_loc, mse_fwd


def _abort_snapshot(out_dir: Path, stage: str, epoch: int, detail: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "abort_snapshot.json", "w") as fh:
        json.dump({"stage": stage, "epoch": epoch, **detail}, fh, indent=2, sort_keys=True)


def _check_finite(loss: torch.Tensor, out_dir: Path, stage: str, epoch: int, components: dict):
    if not torch.isfinite(loss):
        _abort_snapshot(out_dir, stage, epoch, {"components": components})
        raise TrainingAbort(f"non-finite loss in {stage} at epoch {epoch}: {components}")


def _batches(rng: np.random.Generator, indices: np.ndarray, batch_size: int):
    order = indices.copy()
    rng.shuffle(order)
    for start in range(0, order.size, batch_size):
        yield order[start : start + batch_size]


def train_model(
    dataset: PreparedDataset,
    kind: str,
    seed: int,
    out_dir: str | Path,
    plan: StagePlan = StagePlan(),
    coupling: CouplingConfig = CouplingConfig(),
) -> dict:
    """Train one model on one prepared dataset; returns the run manifest."""
    if kind not in MODEL_KINDS:
        raise ConfigError(f"model kind must be one of {MODEL_KINDS}, got {kind!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    threads = configure_torch()
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = build_localizer(kind, dataset)
    predictor = make_predictor(kind, model, dataset)

    train_idx = dataset.indices("train")
    val_damaged_idx = dataset.indices("val", damaged_only=True)
    train_damaged_idx = dataset.indices("train", damaged_only=True)
    if train_idx.size == 0 or val_damaged_idx.size == 0:
        raise ConfigError("training requires non-empty train and damaged validation sets")

    def train_damaged_mae() -> float:
        with torch.no_grad():
            pred = predictor(train_damaged_idx)
            err = (pred - dataset.targets[train_damaged_idx]).norm(dim=-1)
        return float(err.mean())

    history: dict[str, list] = {"stage1": [], "stage2": [], "stage3": [], "single": []}
    manifest: dict = {
        "model": kind,
        "split": dataset.split_name,
        "seed": seed,
        "band": dataset.band_info,
        "e_max": dataset.e_max,
        "plan": asdict(plan),
        "coupling": asdict(coupling),
        "n_train": int(train_idx.size),
        "n_val_damaged": int(val_damaged_idx.size),
        "transducers": dataset.node_coords.tolist(),
        "torch_threads": threads,
    }
    manifest["config_hash"] = hashlib.sha256(
        json.dumps(
            {k: manifest[k] for k in ("model", "split", "seed", "band", "plan", "coupling")},
            sort_keys=True,
        ).encode()
    ).hexdigest()

    def run_localization_stage(stage_name: str, epochs: int, lr: float, track_best: bool):
        optimizer = torch.optim.Adam(model.parameters(), lr=lr)
        scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
            optimizer, factor=plan.plateau_factor, patience=plan.plateau_patience
        )
        best = (float("inf"), None, -1)
        for epoch in range(epochs):
            model.train()
            epoch_loss, n_batches = 0.0, 0
            for batch in _batches(rng, train_idx, plan.batch_size):
                optimizer.zero_grad()
                pred = predictor(batch)
                loss = loss_localization(pred, dataset.targets[batch])
                _check_finite(loss, out_dir, stage_name, epoch, {"loc": float(loss.detach())})
                loss.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), coupling.grad_clip)
                optimizer.step()
                epoch_loss += float(loss.detach())
                n_batches += 1
            model.eval()
            _, val_mse, _ = validation_score(predictor, None, dataset, val_damaged_idx)
            scheduler.step(val_mse)
            history[stage_name].append(
                {
                    "epoch": epoch,
                    "loc": epoch_loss / max(n_batches, 1),
                    "val_mse": val_mse,
                    "train_damaged_mae": train_damaged_mae(),
                }
            )
            if track_best and val_mse < best[0]:
                best = (val_mse, copy.deepcopy(model.state_dict()), epoch)
        return best

    forward_model: ForwardModel | None = None
    if kind == "wgn-coupled":
        forward_model = ForwardModel(ForwardConfig(), dtype=dataset.spectral.dtype)
        run_localization_stage("stage1", plan.stage1_epochs, plan.lr_initial, track_best=False)
        _run_forward_stage(
            forward_model, dataset, plan, coupling, rng, history, out_dir
        )
        for p in forward_model.parameters():
            p.requires_grad_(False)
        forward_model.eval()
        manifest["forward_checksum_pre_stage3"] = state_checksum(forward_model)
        best = _run_coupled_stage(
            model, predictor, forward_model, dataset, plan, coupling, rng, history, out_dir,
            train_idx, val_damaged_idx,
        )
        manifest["forward_checksum_post_stage3"] = state_checksum(forward_model)
        if manifest["forward_checksum_pre_stage3"] != manifest["forward_checksum_post_stage3"]:
            raise TrainingAbort("forward branch changed during stage III (freeze violated)")
    else:
        best = run_localization_stage(
            "single", plan.single_stage_epochs, plan.lr_initial, track_best=True
        )

    best_score, best_state, best_epoch = best
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()

    checkpoint_path = out_dir / "checkpoint.pt"
    payload = {
        "kind": kind,
        "spectral_bins": dataset.spectral_bins,
        "inverse_state": model.state_dict(),
        "forward_state": None if forward_model is None else forward_model.state_dict(),
        "seed": seed,
        "split": dataset.split_name,
    }
    torch.save(payload, checkpoint_path)
    manifest.update(
        {
            "checkpoint": checkpoint_path.name,
            "checkpoint_checksum": state_checksum(model),
            "best_epoch": best_epoch,
            "best_score": best_score,
            "history": history,
        }
    )
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def _run_forward_stage(forward_model, dataset, plan, coupling, rng, history, out_dir):
    """Stage II: forward branch regression at ground-truth/no-damage coordinates."""
    train_idx = dataset.indices("train")
    val_idx = dataset.indices("val")
    optimizer = torch.optim.Adam(forward_model.parameters(), lr=plan.lr_initial)
    scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
        optimizer, factor=plan.plateau_factor, patience=plan.plateau_patience
    )
    for epoch in range(plan.stage2_epochs):
        forward_model.train()
        epoch_loss, n_batches = 0.0, 0
        for batch in _batches(rng, train_idx, plan.batch_size):
            optimizer.zero_grad()
            pred = forward_model.predict_candidates(
                dataset.targets[batch], dataset.fwd_edge_index, dataset.node_coords
            )
            loss = loss_forward_pretrain(pred, dataset.energy[batch], coupling.eps_weight)
            _check_finite(loss, out_dir, "stage2", epoch, {"fwd_pretrain": float(loss.detach())})
            loss.backward()
            torch.nn.utils.clip_grad_norm_(forward_model.parameters(), coupling.grad_clip)
            optimizer.step()
            epoch_loss += float(loss.detach())
            n_batches += 1
        forward_model.eval()
        with torch.no_grad():
            val_pred = forward_model.predict_candidates(
                dataset.targets[val_idx], dataset.fwd_edge_index, dataset.node_coords
            )
            val_loss = float(
                loss_forward_pretrain(val_pred, dataset.energy[val_idx], coupling.eps_weight)
            )
        scheduler.step(val_loss)
        history["stage2"].append(
            {"epoch": epoch, "fwd_pretrain": epoch_loss / max(n_batches, 1), "val": val_loss}
        )


def _run_coupled_stage(
    model, predictor, forward_model, dataset, plan, coupling, rng, history, out_dir,
    train_idx, val_damaged_idx,
):
    """Stage III: inverse-only updates under the coupled objective."""
    optimizer = torch.optim.Adam(model.parameters(), lr=plan.lr_stage3)
    scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
        optimizer, factor=plan.plateau_factor, patience=plan.plateau_patience
    )
    best = (float("inf"), None, -1)
    for epoch in range(plan.stage3_epochs):
        model.train()
        sums = {"loc": 0.0, "fwd": 0.0, "corr": 0.0, "total": 0.0}
        n_batches = 0
        for batch in _batches(rng, train_idx, plan.batch_size):
            optimizer.zero_grad()
            pred = predictor(batch)
            total, comps = total_stage3_loss(
                pred,
                dataset.targets[batch],
                dataset.energy[batch],
                dataset.damaged[batch],
                forward_model,
                dataset.fwd_edge_index,
                dataset.node_coords,
                coupling,
                epoch,
            )
            _check_finite(total, out_dir, "stage3", epoch, comps)
            total.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), coupling.grad_clip)
            optimizer.step()
            for key in ("loc", "fwd", "corr"):
                sums[key] += comps[key]
            sums["total"] += float(total.detach())
            n_batches += 1
        model.eval()
        s_val, val_mse, val_fwd = validation_score(
            predictor, forward_model, dataset, val_damaged_idx
        )
        scheduler.step(val_mse)
        with torch.no_grad():
            train_d = dataset.indices("train", damaged_only=True)
            train_mae = float(
                (predictor(train_d) - dataset.targets[train_d]).norm(dim=-1).mean()
            )
        history["stage3"].append(
            {
                "epoch": epoch,
                "lambda": lambda_schedule(epoch, coupling),
                **{k: v / max(n_batches, 1) for k, v in sums.items()},
                "s_val": s_val,
                "val_mse": val_mse,
                "val_fwd": val_fwd,
                "train_damaged_mae": train_mae,
            }
        )
        if s_val < best[0]:
            best = (s_val, copy.deepcopy(model.state_dict()), epoch)
    return best


def load_checkpoint(path: str | Path, dataset: PreparedDataset):
    """Rebuild (localizer, forward_model_or_None, kind) from a checkpoint file."""
    payload = torch.load(path, weights_only=True)
    kind = payload["kind"]
    model = build_localizer(kind, dataset)
    model.load_state_dict(payload["inverse_state"])
    model.eval()
    forward_model = None
    if payload["forward_state"] is not None:
        forward_model = ForwardModel(ForwardConfig(), dtype=dataset.spectral.dtype)
        forward_model.load_state_dict(payload["forward_state"])
        forward_model.eval()
    return model, forward_model, kind
