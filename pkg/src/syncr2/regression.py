"""Centered ridge maps, uniform multi-output R2, and a small MLP baseline.

The ridge solve centers X and Y first, factorizes the regularized gram
matrix once per source, and recovers the intercept as b = y_mean - x_mean W,
so only W is shrunk. A dual N x N form is used automatically when the
source dimension exceeds the row count.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .errors import DataError, NumericError

log = logging.getLogger(__name__)

MAP_MAGIC = b"REPM"
MAP_VERSION = 1


class RankDeficiencyError(NumericError):
    """Gram factorization failed; the system needs lambda > 0."""


class DivergenceError(NumericError):
    def __init__(self, msg: str, epoch: int):
        super().__init__(msg)
        self.epoch = epoch


@dataclass
class AffineMap:
    W: np.ndarray
    b: np.ndarray
    lam: float
    source_layer: int = -1
    target_layer: int = -1
    solver: str = "primal_cholesky"

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[1] != self.W.shape[0]:
            raise ValueError(f"X has {X.shape[1]} columns, map expects {self.W.shape[0]}")
        return X @ self.W + self.b


@dataclass
class FitReport:
    train_r2: float
    test_r2: float
    n_train: int
    n_test: int
    solver: str


@dataclass(frozen=True)
class MlpConfig:
    hidden: int = 512
    lr: float = 1e-4
    weight_decay: float = 0.1
    epochs: int = 200
    batch_size: int | None = 32
    seed: int = 0
    standardize: bool = False


@dataclass
class MlpMap:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    config: MlpConfig
    loss_trajectory: list[float] = field(default_factory=list)
    x_mean: np.ndarray | None = None
    x_scale: np.ndarray | None = None

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[1] != self.W1.shape[0]:
            raise ValueError(f"X has {X.shape[1]} columns, map expects {self.W1.shape[0]}")
        if self.x_mean is not None:
            X = (X - self.x_mean) / self.x_scale
        H = np.maximum(X @ self.W1 + self.b1, 0.0)
        return H @ self.W2 + self.b2


class RidgeSolver:
    """One centered factorization of a source matrix, reusable across targets."""

    def __init__(self, X: np.ndarray, lam: float, standardize: bool = False):
        if lam < 0:
            raise ValueError("lambda must be non-negative")
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] < 2:
            raise DataError(f"X must be 2-d with N >= 2 rows, got shape {X.shape}")
        if not np.isfinite(X).all():
            raise DataError("X contains non-finite values")
        self.lam = float(lam)
        self.x_mean = X.mean(axis=0)
        self._scale = None
        Xc = X - self.x_mean
        if standardize:
            scale = Xc.std(axis=0)
            scale[scale == 0.0] = 1.0
            Xc = Xc / scale
            self._scale = scale
        self._Xc = Xc
        n, d = Xc.shape
        self.solver = "primal_cholesky" if d <= n else "dual_form"
        try:
            if self.solver == "primal_cholesky":
                G = Xc.T @ Xc
                G[np.diag_indices_from(G)] += self.lam
            else:
                G = Xc @ Xc.T
                G[np.diag_indices_from(G)] += self.lam
            self._chol = cho_factor(G, lower=True, check_finite=False)
        except LinAlgError as e:
            raise RankDeficiencyError(
                f"gram factorization failed ({e}); the centered source matrix is "
                "rank-deficient, set lambda > 0"
            ) from None

    def solve(self, Y: np.ndarray, source_layer: int = -1,
              target_layer: int = -1) -> AffineMap:
        Y = np.asarray(Y, dtype=np.float64)
        if Y.ndim == 1:
            Y = Y[:, None]
        if Y.shape[0] != self._Xc.shape[0]:
            raise DataError(f"Y has {Y.shape[0]} rows, X has {self._Xc.shape[0]}")
        if not np.isfinite(Y).all():
            raise DataError("Y contains non-finite values")
        y_mean = Y.mean(axis=0)
        Yc = Y - y_mean
        if self.solver == "primal_cholesky":
            W = cho_solve(self._chol, self._Xc.T @ Yc, check_finite=False)
        else:
            W = self._Xc.T @ cho_solve(self._chol, Yc, check_finite=False)
        if self._scale is not None:
            W = W / self._scale[:, None]
        b = y_mean - self.x_mean @ W
        return AffineMap(W, b, self.lam, source_layer, target_layer, self.solver)


def fit_ridge(X: np.ndarray, Y: np.ndarray, lam: float = 0.1,
              standardize: bool = False) -> AffineMap:
    return RidgeSolver(X, lam, standardize).solve(Y)


def fit_ridge_family(X: np.ndarray, Y_family, lam: float = 0.1,
                     standardize: bool = False) -> list[AffineMap]:
    """Fit every target against one source with a single factorization."""
    Y_family = list(Y_family)
    if not Y_family:
        return []
    solver = RidgeSolver(X, lam, standardize)
    return [solver.solve(Y) for Y in Y_family]


def normal_equation_residual(m: AffineMap, X: np.ndarray, Y: np.ndarray) -> float:
    """Normalized max-abs residual of (Xc'Xc + lam I) W = Xc'Yc."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    Xc = X - X.mean(axis=0)
    Yc = Y - Y.mean(axis=0)
    rhs = Xc.T @ Yc
    lhs = Xc.T @ (Xc @ m.W) + m.lam * m.W
    return float(np.abs(lhs - rhs).max() / (1.0 + np.abs(rhs).max()))


def r2_uniform(Y_true: np.ndarray, Y_pred: np.ndarray) -> float:
    """Mean over output columns of 1 - SS_res/SS_tot on the evaluation set.

    SS_tot uses the evaluation set's own column means, so the mean predictor
    scores exactly 0. A zero-variance column contributes 1.0 when predicted
    exactly and 0.0 otherwise.
    """
    Yt = np.asarray(Y_true, dtype=np.float64)
    Yp = np.asarray(Y_pred, dtype=np.float64)
    if Yt.ndim == 1:
        Yt = Yt[:, None]
    if Yp.ndim == 1:
        Yp = Yp[:, None]
    if Yt.shape != Yp.shape:
        raise ValueError(f"shape mismatch {Yt.shape} vs {Yp.shape}")
    if Yt.shape[0] < 2:
        raise ValueError("need at least 2 evaluation rows")
    ss_res = ((Yt - Yp) ** 2).sum(axis=0)
    ss_tot = ((Yt - Yt.mean(axis=0)) ** 2).sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = 1.0 - ss_res / ss_tot
    degenerate = ss_tot == 0.0
    r2[degenerate] = np.where(ss_res[degenerate] == 0.0, 1.0, 0.0)
    return float(r2.mean())


def predict(m, X: np.ndarray) -> np.ndarray:
    if not isinstance(m, (AffineMap, MlpMap)):
        raise TypeError(f"cannot predict with {type(m).__name__}")
    return m.predict(X)


def _init_mlp(d_src: int, d_tgt: int, cfg: MlpConfig) -> MlpMap:
    rng = np.random.default_rng(cfg.seed)
    s1 = 1.0 / np.sqrt(d_src)
    s2 = 1.0 / np.sqrt(cfg.hidden)
    return MlpMap(
        W1=rng.uniform(-s1, s1, size=(d_src, cfg.hidden)),
        b1=np.zeros(cfg.hidden),
        W2=rng.uniform(-s2, s2, size=(cfg.hidden, d_tgt)),
        b2=np.zeros(d_tgt),
        config=cfg,
    )


def fit_mlp(X: np.ndarray, Y: np.ndarray, config: MlpConfig = MlpConfig()) -> MlpMap:
    """Two-layer ReLU regressor trained with decoupled-weight-decay Adam.

    Deterministic given the seed. Weight decay follows the decoupled update
    (applied to every parameter, matching the reference optimizer default).
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.ndim != 2 or X.shape[0] < 2:
        raise DataError(f"X must be 2-d with N >= 2 rows, got shape {X.shape}")
    if Y.shape[0] != X.shape[0]:
        raise DataError(f"Y has {Y.shape[0]} rows, X has {X.shape[0]}")
    m = _init_mlp(X.shape[1], Y.shape[1], config)
    if config.standardize:
        m.x_mean = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale == 0.0] = 1.0
        m.x_scale = scale
        X = (X - m.x_mean) / m.x_scale
    n = X.shape[0]
    bs = n if config.batch_size is None else min(config.batch_size, n)
    params = [m.W1, m.b1, m.W2, m.b2]
    mom = [np.zeros_like(p) for p in params]
    vel = [np.zeros_like(p) for p in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    rng = np.random.default_rng(config.seed + 1)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            xb, yb = X[idx], Y[idx]
            h_pre = xb @ m.W1 + m.b1
            h = np.maximum(h_pre, 0.0)
            pred = h @ m.W2 + m.b2
            err = pred - yb
            loss = float((err ** 2).mean())
            epoch_loss += loss * len(idx)
            g_pred = 2.0 * err / err.size
            gW2 = h.T @ g_pred
            gb2 = g_pred.sum(axis=0)
            g_h = (g_pred @ m.W2.T) * (h_pre > 0.0)
            gW1 = xb.T @ g_h
            gb1 = g_h.sum(axis=0)
            step += 1
            c1 = 1.0 - beta1 ** step
            c2 = 1.0 - beta2 ** step
            for p, g, mo, ve in zip(params, [gW1, gb1, gW2, gb2], mom, vel):
                mo *= beta1
                mo += (1.0 - beta1) * g
                ve *= beta2
                ve += (1.0 - beta2) * g * g
                p -= config.lr * (mo / c1 / (np.sqrt(ve / c2) + eps)
                                  + config.weight_decay * p)
        epoch_loss /= n
        if not np.isfinite(epoch_loss):
            raise DivergenceError(f"training loss non-finite at epoch {epoch}", epoch)
        m.loss_trajectory.append(epoch_loss)
    return m


def save_maps(path: str | Path, maps: list[AffineMap]) -> None:
    """Persist fitted affine maps to a binary sidecar (f64 payload)."""
    descriptors = []
    blobs = []
    for mp in maps:
        W = np.ascontiguousarray(mp.W, dtype="<f8")
        b = np.ascontiguousarray(mp.b, dtype="<f8")
        descriptors.append({
            "source_layer": mp.source_layer,
            "target_layer": mp.target_layer,
            "lam": mp.lam,
            "solver": mp.solver,
            "d_src": int(W.shape[0]),
            "d_tgt": int(W.shape[1]),
        })
        blobs.append(W.tobytes() + b.tobytes())
    header = {"dtype": "f64le", "maps": descriptors}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAP_MAGIC)
        f.write(struct.pack("<I", MAP_VERSION))
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        for blob in blobs:
            f.write(blob)


def load_maps(path: str | Path) -> list[AffineMap]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAP_MAGIC:
        raise DataError(f"{path}: not a map sidecar (bad magic)")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != MAP_VERSION:
        raise DataError(f"{path}: unsupported map sidecar version {version}")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: bad map sidecar header: {e}") from None
    offset = 12 + hlen
    expected = sum((d["d_src"] + 1) * d["d_tgt"] * 8 for d in header["maps"])
    if len(raw) - offset != expected:
        raise DataError(
            f"{path}: payload has {len(raw) - offset} bytes, expected {expected}"
        )
    maps = []
    for d in header["maps"]:
        nw = d["d_src"] * d["d_tgt"]
        W = np.frombuffer(raw, dtype="<f8", count=nw, offset=offset)
        offset += nw * 8
        b = np.frombuffer(raw, dtype="<f8", count=d["d_tgt"], offset=offset)
        offset += d["d_tgt"] * 8
        maps.append(AffineMap(
            W.reshape(d["d_src"], d["d_tgt"]).copy(), b.copy(), d["lam"],
            d["source_layer"], d["target_layer"], d["solver"],
        ))
    return maps
