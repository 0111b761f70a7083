"""Canonical sample store, OGW-1 ingestion, and the synthetic benchmark generator.

Store layout::

    store/
      layout.json            # transducer/catalog metadata (normalized units)
      samples/<id>.bin       # magic + shape header + float64 column-major data
      samples/<id>.json      # label, coordinate, acquisition metadata
      oracle.json            # synthetic stores only: ground-truth deviations
      manifest.json          # written last; acts as the commit marker

The matrix container is deliberately minimal for language-neutral, bit-exact
interchange: 8-byte magic, two little-endian uint64 dimensions, then the
float64 payload in column-major order.

The synthetic generator builds samples whose per-path damage response scales
with ``exp(-d^2 / (2 sigma^2))`` of the defect's distance to the path segment,
injected as a band-limited spectral bump on top of a fixed pristine carrier,
and writes those geometric deviations alongside as an oracle for tests.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, IngestionError
from .geometry import (
    DamageCatalog,
    PlateSpec,
    TransducerLayout,
    default_layout,
    enumerate_paths,
    load_layout_file,
)
from .signal_prep import RawSample

MATRIX_MAGIC = b"WGNMAT01"


def write_matrix(path: Path, matrix: np.ndarray) -> None:
    arr = np.asarray(matrix, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(MATRIX_MAGIC)
        fh.write(struct.pack("<QQ", arr.shape[0], arr.shape[1]))
        fh.write(np.asfortranarray(arr).tobytes(order="F"))


def read_matrix(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MATRIX_MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}")
        rows, cols = struct.unpack("<QQ", fh.read(16))
        payload = fh.read(rows * cols * 8)
        if len(payload) != rows * cols * 8:
            raise DataError(f"{path}: truncated payload")
    return np.frombuffer(payload, dtype="<f8").reshape((rows, cols), order="F").copy()


def _json_dump(path: Path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass
class Store:
    """A loaded canonical store."""

    root: Path
    samples: list[RawSample]
    layout: TransducerLayout
    catalog: DamageCatalog
    plate: PlateSpec
    manifest: dict

    @property
    def oracle_path(self) -> Path:
        return self.root / "oracle.json"

    def sample_by_id(self, sample_id: str) -> RawSample:
        for s in self.samples:
            if s.sample_id == sample_id:
                return s
        raise DataError(f"sample {sample_id!r} not in store")


def _write_store(
    root: Path,
    samples: list[RawSample],
    layout_payload: dict,
    extra_manifest: dict,
    oracle: dict | None = None,
) -> Path:
    root = Path(root)
    sample_dir = root / "samples"
    sample_dir.mkdir(parents=True, exist_ok=True)
    _json_dump(root / "layout.json", layout_payload)
    ids = []
    for sample in samples:
        write_matrix(sample_dir / f"{sample.sample_id}.bin", sample.signals)
        sidecar = {
            "label": "pristine" if sample.pristine else "damaged",
            "damage_label": sample.damage_label,
            "coordinate": None if sample.coordinate is None else list(map(float, sample.coordinate)),
            "sampling_rate_hz": sample.sampling_rate_hz,
            "excitation_freq_hz": sample.excitation_freq_hz,
            "split_hint": None,
        }
        _json_dump(sample_dir / f"{sample.sample_id}.json", sidecar)
        ids.append(sample.sample_id)
    if oracle is not None:
        _json_dump(root / "oracle.json", oracle)
    manifest = {
        "samples": sorted(ids),
        "n_damaged": sum(0 if s.pristine else 1 for s in samples),
        "n_pristine": sum(1 if s.pristine else 0 for s in samples),
        "t_samples": int(samples[0].signals.shape[0]),
        "n_paths": int(samples[0].signals.shape[1]),
        "sampling_rate_hz": samples[0].sampling_rate_hz,
        **extra_manifest,
    }
    _json_dump(root / "manifest.json", manifest)  # commit marker, written last
    return root


def load_store(root: str | Path) -> Store:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"{root} is not a committed store (missing manifest.json)")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    layout, catalog, plate = load_layout_file(root / "layout.json")
    samples = []
    for sid in manifest["samples"]:
        signals = read_matrix(root / "samples" / f"{sid}.bin")
        with open(root / "samples" / f"{sid}.json") as fh:
            meta = json.load(fh)
        samples.append(
            RawSample(
                sample_id=sid,
                signals=signals,
                sampling_rate_hz=float(meta["sampling_rate_hz"]),
                excitation_freq_hz=float(meta["excitation_freq_hz"]),
                damage_label=meta["damage_label"],
                coordinate=None if meta["coordinate"] is None else np.asarray(meta["coordinate"]),
            )
        )
    return Store(
        root=root, samples=samples, layout=layout, catalog=catalog, plate=plate, manifest=manifest
    )


def load_oracle(store: Store) -> dict[str, np.ndarray]:
    """Per-sample ground-truth path deviations written by the generator."""
    with open(store.oracle_path) as fh:
        payload = json.load(fh)
    return {sid: np.asarray(vals) for sid, vals in payload["deviations"].items()}


def point_segment_distance(point: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    """Euclidean distance from ``point`` to the segment [a, b]."""
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return float(np.linalg.norm(point - a))
    t = np.clip(float((point - a) @ ab) / denom, 0.0, 1.0)
    return float(np.linalg.norm(point - (a + t * ab)))


def path_deviations(
    defect: np.ndarray, layout: TransducerLayout, pairs, sigma: float
) -> np.ndarray:
    """Gaussian shadowing of every path by a defect at ``defect``."""
    coords = layout.coordinates
    out = np.empty(len(pairs))
    for k, (i, j) in enumerate(pairs):
        d = point_segment_distance(defect, coords[i], coords[j])
        out[k] = np.exp(-(d * d) / (2.0 * sigma * sigma))
    return out


@dataclass
class SyntheticConfig:
    """Desk-scale synthetic dataset mirroring the real store's shape."""

    t_samples: int = 4096
    sampling_rate_hz: float = 1e6
    excitation_freq_hz: float = 100e3
    shadow_sigma: float = 0.05
    noise_level: float = 0.01  # relative to pristine carrier RMS
    samples_per_location: int = 1
    pristine_count: int = 60
    carrier_center_hz: float = 100e3
    carrier_width_hz: float = 20e3
    bump_center_hz: float = 100e3
    bump_width_hz: float = 15e3
    bump_scale: float = 1.0
    layout_file: str | None = None  # None -> packaged default

    def __post_init__(self):
        if self.shadow_sigma <= 0:
            raise ConfigError("shadow_sigma must be positive")
        if self.noise_level < 0:
            raise ConfigError("noise_level must be non-negative")
        if self.t_samples < 16:
            raise ConfigError("t_samples too small")


def generate_synthetic(cfg: SyntheticConfig, seed: int, store_dir: str | Path) -> Store:
    """Write a seeded synthetic store plus its ground-truth deviation oracle.

    Fully deterministic for a fixed (config, seed): the pristine carrier and
    the damage-response spectra are drawn once per store, then per-sample
    noise is drawn in a fixed sample order.
    """
    if cfg.layout_file is None:
        layout, catalog, plate = default_layout()
        with open(Path(__file__).parent / "resources" / "ogw1_layout.json") as fh:
            layout_payload = json.load(fh)
    else:
        layout, catalog, plate = load_layout_file(cfg.layout_file)
        with open(cfg.layout_file) as fh:
            layout_payload = json.load(fh)

    paths = enumerate_paths(layout.n_transducers)
    n_paths = len(paths)
    rng = np.random.default_rng(seed)

    freqs = np.fft.rfftfreq(cfg.t_samples, d=1.0 / cfg.sampling_rate_hz)
    n_bins = freqs.size
    carrier_mag = np.exp(-((freqs - cfg.carrier_center_hz) ** 2) / (2 * cfg.carrier_width_hz**2))
    bump_mag = cfg.bump_scale * np.exp(
        -((freqs - cfg.bump_center_hz) ** 2) / (2 * cfg.bump_width_hz**2)
    )
    carrier_phase = rng.uniform(-np.pi, np.pi, size=(n_paths, n_bins))
    bump_phase = rng.uniform(-np.pi, np.pi, size=(n_paths, n_bins))
    carrier = carrier_mag * np.exp(1j * carrier_phase)  # (n_paths, n_bins)
    bump = bump_mag * np.exp(1j * bump_phase)

    pristine_time = np.fft.irfft(carrier, n=cfg.t_samples, axis=1).T  # (T, n_paths)
    noise_rms = float(np.sqrt(np.mean(pristine_time**2)))

    def noisy(base: np.ndarray) -> np.ndarray:
        if cfg.noise_level == 0:
            return base
        return base + cfg.noise_level * noise_rms * rng.standard_normal(base.shape)

    samples: list[RawSample] = []
    deviations: dict[str, list[float]] = {}
    for label in catalog.labels:
        defect = catalog.coordinate(label)
        dev = path_deviations(defect, layout, paths.pairs, cfg.shadow_sigma)
        for rep in range(cfg.samples_per_location):
            sid = f"{label}_r{rep}"
            spectrum = carrier + dev[:, None] * bump
            signals = noisy(np.fft.irfft(spectrum, n=cfg.t_samples, axis=1).T)
            samples.append(
                RawSample(
                    sample_id=sid,
                    signals=signals,
                    sampling_rate_hz=cfg.sampling_rate_hz,
                    excitation_freq_hz=cfg.excitation_freq_hz,
                    damage_label=label,
                    coordinate=defect,
                )
            )
            deviations[sid] = [float(v) for v in dev]
    for k in range(cfg.pristine_count):
        samples.append(
            RawSample(
                sample_id=f"P{k:03d}",
                signals=noisy(pristine_time),
                sampling_rate_hz=cfg.sampling_rate_hz,
                excitation_freq_hz=cfg.excitation_freq_hz,
            )
        )

    oracle = {
        "shadow_sigma": cfg.shadow_sigma,
        "paths": [list(p) for p in paths.pairs],
        "deviations": deviations,
    }
    extra = {
        "source": "synthetic",
        "seed": seed,
        "config": {
            k: v for k, v in vars(cfg).items() if not isinstance(v, (np.ndarray, TransducerLayout))
        },
    }
    _write_store(Path(store_dir), samples, layout_payload, extra, oracle=oracle)
    return load_store(store_dir)


def ingest_ogw(
    source_dir: str | Path, store_dir: str | Path, excitation_hz: float = 100e3
) -> Store:
    """Ingest an OGW-style source directory into the canonical store.

    The source must contain ``metadata.json`` describing every measurement
    (id, kind, damage label, coordinate, excitation frequency, signal file;
    see README) plus the layout metadata. Only single-defect and pristine
    acquisitions at the requested excitation frequency are retained. All
    inputs are validated before anything is written, so a malformed source
    leaves no partial store behind.
    """
    source = Path(source_dir)
    meta_path = source / "metadata.json"
    if not meta_path.exists():
        raise IngestionError(f"{source}: missing metadata.json")
    try:
        with open(meta_path) as fh:
            meta = json.load(fh)
    except json.JSONDecodeError as exc:
        raise IngestionError(f"{meta_path}: invalid JSON ({exc})") from exc

    if "layout" in meta:
        layout_payload = meta["layout"]
    else:
        layout_path = source / "layout.json"
        if not layout_path.exists():
            raise IngestionError(f"{source}: no layout metadata (layout.json or metadata.layout)")
        with open(layout_path) as fh:
            layout_payload = json.load(fh)
    side_mm = float(layout_payload.get("side_length_mm", 500.0))

    try:
        records = meta["samples"]
        fs = float(meta["sampling_rate_hz"])
    except KeyError as exc:
        raise IngestionError(f"{meta_path}: missing field {exc}") from exc

    samples: list[RawSample] = []
    shape = None
    for rec in records:
        try:
            kind = rec["kind"]
            excitation = float(rec["excitation_freq_hz"])
            rel = rec["file"]
            sid = rec["id"]
        except KeyError as exc:
            raise IngestionError(f"{meta_path}: sample record missing field {exc}") from exc
        if excitation != excitation_hz or kind not in ("damaged", "pristine"):
            continue  # multi-defect and off-frequency runs are excluded
        signal_path = source / rel
        if not signal_path.exists():
            raise IngestionError(f"missing signal file {signal_path}")
        if signal_path.suffix == ".npy":
            signals = np.load(signal_path)
        elif signal_path.suffix == ".bin":
            signals = read_matrix(signal_path)
        else:
            raise IngestionError(f"{signal_path}: unsupported signal container")
        if signals.ndim != 2:
            raise IngestionError(f"{signal_path}: expected a 2-D matrix")
        if shape is None:
            shape = signals.shape
        elif signals.shape != shape:
            raise IngestionError(
                f"{signal_path}: shape {signals.shape} inconsistent with {shape}"
            )
        coordinate = None
        damage_label = None
        if kind == "damaged":
            damage_label = rec.get("damage_label")
            if damage_label is None:
                raise IngestionError(f"{sid}: damaged sample lacks damage_label")
            if "coordinate" in rec:
                coordinate = np.asarray(rec["coordinate"], dtype=float)
            elif "coordinate_mm" in rec:
                coordinate = np.asarray(rec["coordinate_mm"], dtype=float) / side_mm
            else:
                raise IngestionError(f"{sid}: damaged sample lacks a coordinate")
        samples.append(
            RawSample(
                sample_id=sid,
                signals=np.asarray(signals, dtype=np.float64),
                sampling_rate_hz=fs,
                excitation_freq_hz=excitation,
                damage_label=damage_label,
                coordinate=coordinate,
            )
        )

    if not samples:
        raise IngestionError(f"{source}: no single-defect/pristine samples at {excitation_hz} Hz")
    n_paths_expected = len(enumerate_paths(len(layout_payload["transducers"])))
    if samples[0].signals.shape[1] != n_paths_expected:
        raise IngestionError(
            f"signals have {samples[0].signals.shape[1]} columns, layout implies {n_paths_expected}"
        )
    extra = {"source": "ogw", "source_dir": str(source), "excitation_hz": excitation_hz}
    _write_store(Path(store_dir), samples, layout_payload, extra)
    return load_store(store_dir)
