"""Channel datasets: node placement, gain generation, user association and
the tensor/vector index maps shared by every other module.

Conventions
-----------
``H`` has shape ``(B, Q, B)`` and ``H[b, q, k]`` is the power gain from BS ``k``
to the user on channel ``q`` of BS ``b``.  A power matrix ``P`` has shape
``(B, Q)``; its vector form stacks the columns, so ``P[b, q] == p[q * B + b]``.
The network input stacks ``H`` with ``b`` fastest, then ``k``, then ``q``.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    ConfigError,
    InfeasibleRegime,
    PlacementFailure,
    RatioError,
    ShapeMismatch,
)

GAUSSIAN = "gaussian"
PATHLOSS = "pathloss"

PLACEMENT_ATTEMPTS = 10_000
# consecutive rejected candidates for one sample before giving up (>99% discard)
MAX_SAMPLE_ATTEMPTS = 100
DATASET_FORMAT_VERSION = 1


@dataclass
class NetworkConfig:
    B: int = 4
    Q: int = 2
    W: float = 5e6
    P_max: Optional[float] = None
    alpha: float | list = 2.5e6
    model: str = GAUSSIAN
    sigma2: Optional[float] = None
    noise_psd_dbm: float = -169.0
    area_side: float = 500.0
    min_bs_bs: float = 100.0
    min_bs_user: float = 5.0
    min_user_user: float = 2.0
    carrier: float = 2.4e9
    pathloss_intercept_db: float = 128.1
    pathloss_slope_db: float = 37.6
    shadowing_db: float = 8.0

    def __post_init__(self):
        if self.model not in (GAUSSIAN, PATHLOSS):
            raise ConfigError(f"unknown channel model {self.model!r}")
        if self.P_max is None:
            # 1 mW keeps almost no path-loss sample feasible at 2.5 Mbps
            self.P_max = 1e-3 if self.model == GAUSSIAN else 1.0
        if self.B < 1 or self.Q < 1:
            raise ConfigError("B and Q must be >= 1")
        if self.W <= 0 or self.P_max <= 0:
            raise ConfigError("W and P_max must be positive")
        if self.sigma2 is not None and self.sigma2 <= 0:
            raise ConfigError("sigma2 must be positive")
        if np.any(self.alpha_matrix < 0):
            raise ConfigError("alpha must be non-negative")

    @property
    def U(self) -> int:
        return self.B * self.Q

    @property
    def noise_power(self) -> float:
        if self.sigma2 is not None:
            return float(self.sigma2)
        if self.model == GAUSSIAN:
            return 1e-8  # 0.01 uW
        return 10 ** (self.noise_psd_dbm / 10) * 1e-3 * self.W

    @property
    def alpha_matrix(self) -> np.ndarray:
        a = np.asarray(self.alpha, dtype=float)
        if a.ndim == 0:
            return np.full((self.B, self.Q), float(a))
        if a.shape != (self.B, self.Q):
            raise ConfigError(f"alpha must be scalar or shape {(self.B, self.Q)}")
        return a

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if isinstance(d["alpha"], np.ndarray):
            d["alpha"] = d["alpha"].tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Layout:
    bs_positions: np.ndarray
    user_positions: np.ndarray


@dataclass
class Dataset:
    samples: np.ndarray  # (N, B, Q, B)
    config: NetworkConfig
    seed: int
    ratios: tuple = (0.9, 0.05, 0.05)
    witness: Optional[np.ndarray] = None  # (N, U) min-power profiles, watts
    candidates: int = 0
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        w = None if self.witness is None else self.witness[idx]
        return Dataset(self.samples[idx], self.config, self.seed, self.ratios, w,
                       metadata=dict(self.metadata))


# ---------------------------------------------------------------------------
# index maps

def mat_to_vec(P: np.ndarray) -> np.ndarray:
    P = np.asarray(P)
    if P.ndim != 2:
        raise ShapeMismatch(f"expected a (B, Q) matrix, got shape {P.shape}")
    return P.reshape(-1, order="F").copy()


def vec_to_mat(p: np.ndarray, B: int, Q: int) -> np.ndarray:
    p = np.asarray(p)
    if p.shape != (B * Q,):
        raise ShapeMismatch(f"expected vector of length {B * Q}, got shape {p.shape}")
    return p.reshape((B, Q), order="F").copy()


def tensor_to_input(H: np.ndarray) -> np.ndarray:
    """Flatten ``H`` (or a stack of them) into the network input ordering."""
    H = np.asarray(H)
    if H.ndim < 3 or H.shape[-1] != H.shape[-3]:
        raise ShapeMismatch(f"expected (..., B, Q, B) gains, got shape {H.shape}")
    lead = H.shape[:-3]
    return np.moveaxis(H, -3, -1).reshape(*lead, -1)


def input_to_tensor(h: np.ndarray, B: int, Q: int) -> np.ndarray:
    h = np.asarray(h)
    if h.shape[-1] != B * Q * B:
        raise ShapeMismatch(f"expected trailing length {B * Q * B}, got {h.shape[-1]}")
    lead = h.shape[:-1]
    return np.moveaxis(h.reshape(*lead, Q, B, B), -1, -3).copy()


def reshape(x: np.ndarray, direction: str, B: int, Q: int) -> np.ndarray:
    """Dispatch over the four index maps: ``mat2vec``, ``vec2mat``, ``tensor2input``, ``input2tensor``."""
    if direction == "mat2vec":
        if np.shape(x) != (B, Q):
            raise ShapeMismatch(f"expected {(B, Q)}, got {np.shape(x)}")
        return mat_to_vec(x)
    if direction == "vec2mat":
        return vec_to_mat(x, B, Q)
    if direction == "tensor2input":
        if np.shape(x)[-3:] != (B, Q, B):
            raise ShapeMismatch(f"expected (..., {B}, {Q}, {B}), got {np.shape(x)}")
        return tensor_to_input(x)
    if direction == "input2tensor":
        return input_to_tensor(x, B, Q)
    raise ValueError(f"unknown direction {direction!r}")


# ---------------------------------------------------------------------------
# generation

def _sample_point(rng, side, anchors_and_mins, attempts, batch=64):
    drawn = 0
    while drawn < attempts:
        k = min(batch, attempts - drawn)
        pts = rng.uniform(0.0, side, size=(k, 2))
        ok = np.ones(k, dtype=bool)
        for anchors, dmin in anchors_and_mins:
            if len(anchors):
                d = np.hypot(pts[:, None, 0] - anchors[None, :, 0],
                             pts[:, None, 1] - anchors[None, :, 1])
                ok &= d.min(axis=1) >= dmin
        hit = np.flatnonzero(ok)
        if hit.size:
            return pts[hit[0]]
        drawn += k
    raise PlacementFailure(f"no valid position after {attempts} attempts")


def place_nodes(cfg: NetworkConfig, rng) -> Layout:
    """Rejection-sample BS and user positions honouring the minimum spacings."""
    if cfg.model != PATHLOSS:
        raise ConfigError("node placement only applies to the path-loss model")
    rng = np.random.default_rng(rng)
    bs = np.empty((0, 2))
    for _ in range(cfg.B):
        pt = _sample_point(rng, cfg.area_side, [(bs, cfg.min_bs_bs)], PLACEMENT_ATTEMPTS)
        bs = np.vstack([bs, pt])
    users = np.empty((0, 2))
    for _ in range(cfg.U):
        pt = _sample_point(rng, cfg.area_side,
                           [(bs, cfg.min_bs_user), (users, cfg.min_user_user)],
                           PLACEMENT_ATTEMPTS)
        users = np.vstack([users, pt])
    return Layout(bs, users)


def pathloss_db(d_m, cfg: NetworkConfig):
    d_km = np.maximum(np.asarray(d_m, dtype=float), 1e-3) / 1000.0
    return cfg.pathloss_intercept_db + cfg.pathloss_slope_db * np.log10(d_km)


def _raw_gains(cfg: NetworkConfig, rng) -> np.ndarray:
    """Gains from every BS to every user, shape (U, B)."""
    shape = (cfg.U, cfg.B)
    if cfg.model == GAUSSIAN:
        re = rng.standard_normal(shape)
        im = rng.standard_normal(shape)
        return re * re + im * im
    layout = place_nodes(cfg, rng)
    diff = layout.user_positions[:, None, :] - layout.bs_positions[None, :, :]
    dist = np.hypot(diff[..., 0], diff[..., 1])
    loss_db = pathloss_db(dist, cfg) + cfg.shadowing_db * rng.standard_normal(shape)
    fading = rng.exponential(1.0, size=shape)
    return 10 ** (-loss_db / 10) * fading


def associate_and_sort(raw_gains: np.ndarray, Q: int) -> np.ndarray:
    """Greedy association: BS 0 takes its Q strongest users, then BS 1 from the
    rest, and so on; within a BS channel 0 gets the strongest user.

    ``raw_gains`` has shape (U, B).  Returns ``H`` of shape (B, Q, B).
    """
    raw = np.asarray(raw_gains, dtype=float)
    U, B = raw.shape
    if U != B * Q:
        raise ShapeMismatch(f"{U} users cannot fill {B} BSs with quota {Q}")
    pool = list(range(U))
    H = np.empty((B, Q, B))
    for b in range(B):
        # stable sort keeps lower user index first on ties
        ranked = sorted(pool, key=lambda u: -raw[u, b])[:Q]
        for q, u in enumerate(ranked):
            H[b, q, :] = raw[u, :]
        pool = [u for u in pool if u not in ranked]
    return H


def _sample_rng(seed: int, index: int):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _generate_one(cfg: NetworkConfig, seed: int, index: int):
    from .feasibility import feasibility_filter

    rng = _sample_rng(seed, index)
    for attempt in range(1, MAX_SAMPLE_ATTEMPTS + 1):
        H = associate_and_sort(_raw_gains(cfg, rng), cfg.Q)
        report = feasibility_filter(H, cfg)
        if report.feasible:
            return H, report.witness, attempt
    raise InfeasibleRegime(
        f"sample {index}: {MAX_SAMPLE_ATTEMPTS} consecutive candidates infeasible; "
        "alpha is too aggressive for this geometry")


def gen_dataset(cfg: NetworkConfig, n_samples: int, seed: int = 0,
                ratios=(0.9, 0.05, 0.05), threads: int = 1) -> Dataset:
    """Generate ``n_samples`` feasible channel realizations.

    Each sample has its own RNG stream keyed on ``(seed, index)``; infeasible
    candidates are redrawn from that stream, so results do not depend on
    ``threads``.
    """
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    _check_ratios(ratios)
    idx = range(n_samples)
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            out = list(ex.map(lambda i: _generate_one(cfg, seed, i), idx))
    else:
        out = [_generate_one(cfg, seed, i) for i in idx]
    samples = np.stack([o[0] for o in out])
    witness = np.stack([mat_to_vec(o[1]) for o in out])
    candidates = int(sum(o[2] for o in out))
    if n_samples / candidates < 0.01:
        raise InfeasibleRegime(f"{candidates - n_samples} of {candidates} candidates discarded")
    meta = {
        "gaussian_convention": "complex coefficient, iid N(0,1) real/imag parts; gain mean 2",
        "pathloss_law": f"{cfg.pathloss_intercept_db} + {cfg.pathloss_slope_db} log10(d_km) dB, "
                        f"{cfg.shadowing_db} dB log-normal shadowing, unit-mean Rayleigh power "
                        "(defaults, not stated by the source model)",
    }
    return Dataset(samples, cfg, int(seed), tuple(ratios), witness, candidates, meta)


# ---------------------------------------------------------------------------
# splitting and persistence

def _check_ratios(ratios):
    r = np.asarray(ratios, dtype=float)
    if r.shape != (3,) or np.any(r < 0) or not math.isclose(r.sum(), 1.0, abs_tol=1e-9):
        raise RatioError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    return r


def split_bounds(n: int, ratios) -> tuple[int, int]:
    r = _check_ratios(ratios)
    n_train = int(round(n * r[0]))
    n_val = int(round(n * r[1]))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    return n_train, n_train + n_val


def split_dataset(ds: Dataset, ratios=None):
    """Contiguous split into (train, val, test).  Samples are already i.i.d."""
    ratios = ds.ratios if ratios is None else ratios
    a, b = split_bounds(len(ds), ratios)
    n = len(ds)
    return ds.subset(range(0, a)), ds.subset(range(a, b)), ds.subset(range(b, n))


def _atomic_write(path: Path, data: bytes):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_dataset(ds: Dataset, out_dir) -> Path:
    """Write ``gains.bin`` (little-endian float64 records) and ``metadata.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    flat = tensor_to_input(ds.samples).astype("<f8")
    _atomic_write(out / "gains.bin", flat.tobytes())
    a, b = split_bounds(len(ds), ds.ratios)
    meta = {
        "format_version": DATASET_FORMAT_VERSION,
        "record": "float64 little-endian, B*Q*B gains per sample, network input ordering",
        "config": ds.config.to_dict(),
        "seed": ds.seed,
        "count": len(ds),
        "candidates": ds.candidates,
        "ratios": list(ds.ratios),
        "split_boundaries": [a, b],
        "noise_power": ds.config.noise_power,
        **ds.metadata,
    }
    _atomic_write(out / "metadata.json", json.dumps(meta, indent=2, sort_keys=True).encode())
    return out


def load_dataset(path) -> Dataset:
    from .feasibility import feasibility_filter

    path = Path(path)
    if path.is_file():
        path = path.parent
    meta_file = path / "metadata.json"
    if not meta_file.exists():
        raise ConfigError(f"{meta_file} not found")
    meta = json.loads(meta_file.read_text())
    if meta.get("format_version") != DATASET_FORMAT_VERSION:
        raise ConfigError(f"unsupported dataset format {meta.get('format_version')}")
    cfg = NetworkConfig.from_dict(meta["config"])
    flat = np.fromfile(path / "gains.bin", dtype="<f8")
    rec = cfg.B * cfg.Q * cfg.B
    if flat.size != meta["count"] * rec:
        raise ShapeMismatch("gains.bin size does not match metadata count")
    samples = input_to_tensor(flat.reshape(-1, rec), cfg.B, cfg.Q)
    witness = []
    for H in samples:
        rep = feasibility_filter(H, cfg)
        witness.append(mat_to_vec(rep.witness) if rep.feasible else np.full(cfg.U, np.nan))
    extra = {k: v for k, v in meta.items()
             if k not in {"format_version", "record", "config", "seed", "count", "candidates",
                          "ratios", "split_boundaries", "noise_power"}}
    return Dataset(samples, cfg, meta["seed"], tuple(meta["ratios"]), np.array(witness),
                   meta.get("candidates", 0), extra)
