"""Synthetic data generation.

Strain paths are natural cubic splines through randomly spaced knots
whose per-component increments are Gaussian, redrawn whenever a knot
would leave the +/-2% strain band (the spline may overshoot between
knots; only knots are capped).  Paths are sampled at randomly drawn
time increments, labeled by integrating the reference material, and
optionally perturbed with Gaussian stress noise.  Every sequence is
generated from its own seeded generator (base seed + sequence index),
so datasets are reproducible bit for bit and generation could run in
parallel across sequences.

Dataset files are JSON with schema tag "gsmnet-data-v1"; floats are
written in shortest round-trip decimal form, so a write/read cycle is
lossless.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from . import refmat, solver
from .mandel import SQRT2
from .networks import DATA_SCHEMA

# Mandel components suppressed under plane strain: eps33, eps23, eps13
PLANE_ZERO_IDX = (2, 3, 4)

NOISE_TAGS = ("ideal", "noisy")
DOMAIN_TAGS = ("full", "plane")


@dataclass(frozen=True)
class PathConfig:
    """Strain-path sampling parameters (times in s, strains dimensionless)."""

    steps: int = 200
    knot_dt: tuple = (0.2, 1.0)
    knot_std: float = 0.005
    strain_cap: float = 0.02
    sampling_dt: tuple = (0.03, 0.07)
    plane_strain: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        for name in ("knot_dt", "sampling_dt"):
            lo, hi = getattr(self, name)
            if not (0.0 < lo <= hi):
                raise ValueError(f"{name} range must be positive and ordered")
        if not self.knot_std > 0.0:
            raise ValueError("knot_std must be positive")
        if not self.strain_cap > 0.0:
            raise ValueError("strain_cap must be positive")


def test_path_config(seed: int, plane_strain: bool = False) -> PathConfig:
    """The fixed evaluation-path convention: 250 steps at constant 0.05 s."""
    return PathConfig(
        steps=250, sampling_dt=(0.05, 0.05), plane_strain=plane_strain, seed=seed
    )


@dataclass
class Sequence:
    """One loading history: times (s), Mandel strains, optional labels (MPa)."""

    t: np.ndarray
    eps: np.ndarray
    sig: np.ndarray | None = None
    q: np.ndarray | None = None
    sig_ideal: np.ndarray | None = None

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.eps = np.asarray(self.eps, dtype=np.float64)
        n = self.t.size
        if self.t.ndim != 1 or n < 1:
            raise ValueError("t must be a non-empty 1-D array")
        if np.any(np.diff(self.t) <= 0.0):
            raise ValueError("times must be strictly increasing")
        for name in ("eps", "sig", "q", "sig_ideal"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=np.float64)
            setattr(self, name, arr)
            if arr.shape != (n, 6):
                raise ValueError(f"{name} must have shape ({n}, 6), got {arr.shape}")
            if np.any(arr[0] != 0.0):
                raise ValueError(f"first state of {name} must be all-zero")

    @property
    def n_steps(self) -> int:
        return self.t.size - 1


@dataclass
class Dataset:
    sequences: list
    noise: str = "ideal"
    domain: str = "full"
    seed: int = 0

    def __post_init__(self):
        if self.noise not in NOISE_TAGS:
            raise ValueError(f"noise tag must be one of {NOISE_TAGS}")
        if self.domain not in DOMAIN_TAGS:
            raise ValueError(f"domain tag must be one of {DOMAIN_TAGS}")


# ---------------------------------------------------------------------------
# path sampling
# ---------------------------------------------------------------------------


def _active_components(cfg: PathConfig):
    if cfg.plane_strain:
        return tuple(c for c in range(6) if c not in PLANE_ZERO_IDX)
    return tuple(range(6))


def _sample_knots(cfg: PathConfig, rng):
    """Knot times and strains covering the worst-case path duration."""
    horizon = cfg.steps * cfg.sampling_dt[1]
    active = _active_components(cfg)
    knot_t = [0.0]
    knot_eps = [np.zeros(6)]
    while knot_t[-1] < horizon:
        knot_t.append(knot_t[-1] + rng.uniform(*cfg.knot_dt))
        prev = knot_eps[-1]
        nxt = prev.copy()
        for c in active:
            while True:
                inc = rng.normal(0.0, cfg.knot_std)
                if abs(prev[c] + inc) <= cfg.strain_cap:
                    nxt[c] = prev[c] + inc
                    break
        knot_eps.append(nxt)
    return np.array(knot_t), np.stack(knot_eps)


def sample_strain_path(cfg: PathConfig, seed: int | None = None) -> Sequence:
    """Draw one unlabeled strain path; ``seed`` overrides ``cfg.seed``."""
    rng = np.random.Generator(np.random.PCG64(cfg.seed if seed is None else seed))
    knot_t, knot_eps = _sample_knots(cfg, rng)
    t = np.zeros(cfg.steps + 1)
    t[1:] = np.cumsum(rng.uniform(cfg.sampling_dt[0], cfg.sampling_dt[1], cfg.steps))
    eps = np.zeros((cfg.steps + 1, 6))
    for c in _active_components(cfg):
        spline = CubicSpline(knot_t, knot_eps[:, c], bc_type="natural")
        eps[:, c] = spline(t)
    eps[0] = 0.0
    return Sequence(t=t, eps=eps)


# ---------------------------------------------------------------------------
# labeling and noise
# ---------------------------------------------------------------------------


def label_with_reference(
    path: Sequence,
    ref_params: refmat.RefMaterialParams | None = None,
    solver_cfg: solver.SolverConfig | None = None,
) -> Sequence:
    """Attach reference-material stresses and internal variables."""
    p = ref_params if ref_params is not None else refmat.RefMaterialParams()
    states = refmat.ref_predict_sequence(p, path.t, path.eps, solver_cfg)
    return dataclasses.replace(
        path,
        sig=np.stack([s.sig.m for s in states]),
        q=np.stack([s.q.m for s in states]),
    )


def add_noise(ds: Dataset, sigma_noise: float, seed: int) -> Dataset:
    """Perturb stress labels with iid Gaussian noise per physical component.

    Off-diagonal Mandel coordinates store sqrt(2) times the physical
    component, so their stored perturbation is scaled accordingly.  The
    unperturbed stresses are kept in the ``sig_ideal`` channel, times,
    strains and internal variables are untouched, and the first (rest)
    state of every sequence stays exact.  Zero noise is a no-op.
    """
    if sigma_noise < 0.0:
        raise ValueError("noise std must be non-negative")
    if sigma_noise == 0.0:
        return ds
    rng = np.random.Generator(np.random.PCG64(seed))
    out = []
    for s in ds.sequences:
        if s.sig is None:
            raise ValueError("dataset has no stress labels to perturb")
        noise = rng.normal(0.0, sigma_noise, (s.n_steps, 6))
        noise[:, 3:] *= SQRT2
        sig = s.sig.copy()
        sig[1:] += noise
        out.append(dataclasses.replace(s, sig=sig, sig_ideal=s.sig.copy()))
    return Dataset(sequences=out, noise="noisy", domain=ds.domain, seed=ds.seed)


def generate_dataset(
    cfg: PathConfig,
    n_sequences: int,
    ref_params: refmat.RefMaterialParams | None = None,
    solver_cfg: solver.SolverConfig | None = None,
) -> Dataset:
    """Sample, label, and collect ``n_sequences`` paths (seeds cfg.seed + i)."""
    if n_sequences < 1:
        raise ValueError("n_sequences must be at least 1")
    seqs = [
        label_with_reference(
            sample_strain_path(cfg, cfg.seed + i), ref_params, solver_cfg
        )
        for i in range(n_sequences)
    ]
    return Dataset(
        sequences=seqs,
        noise="ideal",
        domain="plane" if cfg.plane_strain else "full",
        seed=cfg.seed,
    )


# ---------------------------------------------------------------------------
# serialization ("gsmnet-data-v1")
# ---------------------------------------------------------------------------


def dataset_to_payload(ds: Dataset) -> dict:
    seqs = []
    for s in ds.sequences:
        entry = {"t": s.t.tolist(), "eps": s.eps.tolist()}
        for name in ("sig", "q", "sig_ideal"):
            arr = getattr(s, name)
            if arr is not None:
                entry[name] = arr.tolist()
        seqs.append(entry)
    return {
        "schema": DATA_SCHEMA,
        "noise": ds.noise,
        "domain": ds.domain,
        "seed": int(ds.seed),
        "sequences": seqs,
    }


def dataset_from_payload(d: dict) -> Dataset:
    if not isinstance(d, dict) or d.get("schema") != DATA_SCHEMA:
        raise ValueError(
            f"expected dataset schema {DATA_SCHEMA!r}, got {d.get('schema')!r}"
            if isinstance(d, dict)
            else "dataset payload must be a JSON object"
        )
    try:
        raw_seqs = d["sequences"]
        seqs = [
            Sequence(
                t=entry["t"],
                eps=entry["eps"],
                sig=entry.get("sig"),
                q=entry.get("q"),
                sig_ideal=entry.get("sig_ideal"),
            )
            for entry in raw_seqs
        ]
        return Dataset(
            sequences=seqs,
            noise=d["noise"],
            domain=d["domain"],
            seed=int(d["seed"]),
        )
    except (KeyError, TypeError) as err:
        raise ValueError(f"malformed dataset payload: {err}") from err


def save_dataset(ds: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(dataset_to_payload(ds), f, indent=1)
        f.write("\n")


def load_dataset(path) -> Dataset:
    with open(path, "r", encoding="utf-8") as f:
        return dataset_from_payload(json.load(f))
