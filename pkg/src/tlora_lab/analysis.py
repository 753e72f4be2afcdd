"""Diagnostics over trained adapters: histograms, norm/scale timelines, layer
heatmaps, symmetric-part spectra, singular values, cosine similarity and
element-wise differences.

The eigensolvers are cyclic Jacobi with a round-robin (tournament) ordering:
each round rotates n/2 disjoint index pairs at once, which is equivalent to
applying those rotations one after another because they touch disjoint rows
and columns.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, LabIOError, NumericalError
from .runio import load_flat, read_json

DEFAULT_BINS = 61
ZERO_EIG = 1e-12
UNDEFINED = "undefined"


# ---------------------------------------------------------------- histograms


@dataclass
class HistogramReport:
    site: str
    component: str
    edges: list[float]
    counts: list[int]
    mean: float
    std: float
    excess_kurtosis: float | None
    degenerate: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def moments(x: np.ndarray) -> tuple[float, float, float | None]:
    """Mean, population std and excess kurtosis (None when std is zero)."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    mu = float(x.mean())
    c = x - mu
    var = float(np.mean(c * c))
    if var == 0.0:
        return mu, 0.0, None
    kurt = float(np.mean(c**4) / (var * var) - 3.0)
    return mu, math.sqrt(var), kurt


def weight_histogram(matrix, n_bins: int = DEFAULT_BINS, site: str = "", component: str = "") -> HistogramReport:
    """Equal-width bins over [min, max]. A constant matrix yields one flagged bin."""
    if n_bins < 2:
        raise ConfigError(f"n_bins must be >= 2, got {n_bins}")
    x = np.asarray(matrix, dtype=np.float64).reshape(-1)
    mu, sd, kurt = moments(x)
    lo, hi = float(x.min()), float(x.max())
    if lo == hi:
        return HistogramReport(site, component, [lo - 0.5, lo + 0.5], [int(x.size)], mu, sd, kurt, degenerate=True)
    counts, edges = np.histogram(x, bins=n_bins, range=(lo, hi))
    return HistogramReport(site, component, edges.tolist(), counts.tolist(), mu, sd, kurt)


# ---------------------------------------------------------------- Jacobi


def _tournament(n: int) -> list[np.ndarray]:
    """Round-robin schedule: n-1 rounds (n even) of disjoint pairs covering all pairs."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p < n and q < n]
        if pairs:
            rounds.append(np.array(pairs, dtype=np.int64))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _rotation(theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(c, s) of the rotation that annihilates the pair, given theta = (a_qq - a_pp) / (2 a_pq)."""
    with np.errstate(over="ignore"):
        # huge theta means a negligible off-diagonal entry: t -> 0, no rotation
        t = np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
    t = np.where(theta == 0.0, 1.0, t)
    c = 1.0 / np.sqrt(t * t + 1.0)
    return c, t * c


def jacobi_eigh(S, tol: float = 1e-10, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix: returns (eigenvalues, Q), S = Q diag Q^T.

    Iterates until the off-diagonal Frobenius norm drops below
    ``tol * max(1, ||S||_F)``. Eigenvalues come back sorted descending.
    """
    A = np.array(S, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"jacobi_eigh needs a square matrix, got shape {A.shape}")
    n = A.shape[0]
    Q = np.eye(n)
    if n == 1:
        return A.diagonal().copy(), Q
    A = 0.5 * (A + A.T)
    target = tol * max(1.0, float(np.linalg.norm(A)))
    rounds = _tournament(n)
    for _ in range(max_sweeps):
        off = float(np.linalg.norm(A - np.diag(np.diag(A))))
        if off < target:
            break
        for pairs in rounds:
            p, q = pairs[:, 0], pairs[:, 1]
            apq = A[p, q]
            active = np.abs(apq) > 0.0
            if not active.any():
                continue
            p, q, apq = p[active], q[active], apq[active]
            with np.errstate(over="ignore"):
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
            c, s = _rotation(theta)
            J = np.eye(n)
            J[p, p] = c
            J[q, q] = c
            J[p, q] = s
            J[q, p] = -s
            A = J.T @ A @ J
            A[p, q] = 0.0
            A[q, p] = 0.0
            Q = Q @ J
    else:
        raise NumericalError("Jacobi eigensolver did not converge")
    w = A.diagonal().copy()
    order = np.argsort(-w, kind="stable")
    return w[order], Q[:, order]


def jacobi_singular_values(M, tol: float = 1e-14, max_sweeps: int = 100) -> np.ndarray:
    """Singular values (descending) by one-sided Jacobi: orthogonalise column pairs,
    then read off column norms."""
    W = np.array(M, dtype=np.float64)
    if W.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {W.shape}")
    if W.shape[1] > W.shape[0]:
        W = W.T.copy()
    n = W.shape[1]
    rounds = _tournament(n)
    for _ in range(max_sweeps):
        rotated = False
        for pairs in rounds:
            p, q = pairs[:, 0], pairs[:, 1]
            a = np.einsum("ij,ij->j", W[:, p], W[:, p])
            b = np.einsum("ij,ij->j", W[:, q], W[:, q])
            g = np.einsum("ij,ij->j", W[:, p], W[:, q])
            active = np.abs(g) > tol * np.sqrt(a * b)
            if not active.any():
                continue
            rotated = True
            p, q, a, b, g = p[active], q[active], a[active], b[active], g[active]
            with np.errstate(over="ignore"):
                c, s = _rotation((b - a) / (2.0 * g))
            wp, wq = W[:, p].copy(), W[:, q].copy()
            W[:, p] = c * wp - s * wq
            W[:, q] = s * wp + c * wq
        if not rotated:
            break
    else:
        raise NumericalError("one-sided Jacobi did not converge")
    return np.sort(np.linalg.norm(W, axis=0))[::-1]


# ---------------------------------------------------------------- spectra


@dataclass
class SpectrumReport:
    site: str
    method: str
    positive: list[float]
    negative: list[float]
    n_zero: int
    singular_values: list[float]

    def to_dict(self) -> dict:
        return asdict(self)


def eigen_spectrum(delta_w, site: str = "", method: str = "") -> SpectrumReport:
    """Sign-split eigenvalue magnitudes of the symmetric part plus singular values.

    Eigenvalues with |lambda| < 1e-12 * max(1, max|lambda|) are counted as zeros.
    """
    M = np.asarray(delta_w, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"eigen_spectrum needs a square matrix, got shape {M.shape}")
    w, _ = jacobi_eigh(0.5 * (M + M.T))
    thresh = ZERO_EIG * max(1.0, float(np.max(np.abs(w))) if w.size else 1.0)
    pos = sorted((float(x) for x in w if x >= thresh), reverse=True)
    neg = sorted((float(-x) for x in w if x <= -thresh), reverse=True)
    sv = jacobi_singular_values(M).tolist()
    return SpectrumReport(site, method, pos, neg, int(w.size - len(pos) - len(neg)), sv)


def numerical_rank(m, tol_rel: float = 1e-8) -> int:
    """Count of singular values >= tol_rel * sigma_1 (0 for the zero matrix)."""
    if not 0.0 < tol_rel < 1.0:
        raise ConfigError(f"tol_rel must be in (0, 1), got {tol_rel}")
    s = np.linalg.svd(np.asarray(m, dtype=np.float64), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s >= tol_rel * s[0]))


# ---------------------------------------------------------------- similarity


def cosine_similarity(m1, m2) -> float | None:
    """Cosine of the flattened matrices.

    Returns None (undefined) when both are all-zero; 0.0 when exactly one is.
    """
    a = np.asarray(m1, dtype=np.float64).reshape(-1)
    b = np.asarray(m2, dtype=np.float64).reshape(-1)
    if np.shape(m1) != np.shape(m2):
        raise DimensionError(f"shape mismatch: {np.shape(m1)} vs {np.shape(m2)}")
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 and nb == 0.0:
        return None
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(a / na, b / nb), -1.0, 1.0))


def elementwise_diff(m1, m2) -> tuple[np.ndarray, dict]:
    a, b = np.asarray(m1, dtype=np.float64), np.asarray(m2, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = a - b
    ad = np.abs(d)
    return d, {"max_abs": float(ad.max()), "mean_abs": float(ad.mean())}


@dataclass
class SiteSimilarity:
    site: str
    layer: int
    component: str
    cosine: float | str
    max_abs_diff: float
    mean_abs_diff: float


@dataclass
class SimilarityReport:
    sites: list[SiteSimilarity] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"sites": [asdict(s) for s in self.sites]}


# ---------------------------------------------------------------- runs on disk


@dataclass
class LoadedRun:
    """Read-only view of a run directory's weights."""

    path: Path
    config: dict
    manifest: dict | None

    @classmethod
    def open(cls, path) -> "LoadedRun":
        path = Path(path)
        if not path.is_dir():
            raise LabIOError(f"run directory not found: {path}")
        config = read_json(path / "config.json")
        mpath = path / "weights" / "manifest.json"
        manifest = read_json(mpath) if mpath.exists() else None
        return cls(path, config, manifest)

    @property
    def method(self) -> str:
        return self.config.get("method", "frozen")

    @property
    def sites(self) -> list[str]:
        return [s["site"] for s in self.manifest["sites"]] if self.manifest else []

    def site_info(self, site: str) -> dict:
        for s in self.manifest["sites"]:
            if s["site"] == site:
                return s
        raise KeyError(site)

    @property
    def epochs(self) -> list[int]:
        if not self.manifest:
            return []
        return [e["epoch"] for e in self.manifest["snapshots"] if e["file"] != "abort.bin"]

    def weights(self, epoch: int) -> dict[str, np.ndarray]:
        for entry in self.manifest["snapshots"] if self.manifest else []:
            if entry["epoch"] == epoch and entry["file"] != "abort.bin":
                f = self.path / "weights" / entry["file"]
                if not f.exists():
                    raise LabIOError(f"missing weights for epoch {epoch}: {f}")
                return load_flat(f, entry["layout"])
        raise LabIOError(f"no snapshot recorded for epoch {epoch} in {self.path}")

    def base_weights(self) -> dict[str, np.ndarray]:
        layout = read_json(self.path / "base_model.json")["tensors"]
        return load_flat(self.path / "base_model.bin", layout)

    def delta_w(self, epoch: int | None = None) -> dict[str, np.ndarray]:
        epoch = self.epochs[-1] if epoch is None else epoch
        w = self.weights(epoch)
        out = {}
        for site in self.sites:
            info = self.site_info(site)
            if info["method"] == "tlora":
                out[site] = float(w[f"{site}.alpha"][0]) * (w[f"{site}.A"] @ w[f"{site}.B"] @ w[f"{site}.C"])
            else:
                out[site] = info["scaling"] * (w[f"{site}.up"] @ w[f"{site}.down"])
        return out


def _as_run(run) -> LoadedRun:
    return run if isinstance(run, LoadedRun) else LoadedRun.open(run)


def norm_timeline(run) -> dict:
    """Per-site series of B Frobenius norms and alpha values, one entry per snapshot."""
    run = _as_run(run)
    if not run.epochs:
        raise LabIOError(f"run {run.path} has no adapter snapshots")
    series = {s: {"b_norm": [], "alpha": []} for s in run.sites}
    for epoch in run.epochs:
        w = run.weights(epoch)
        for site in run.sites:
            info = run.site_info(site)
            if info["method"] == "tlora":
                series[site]["b_norm"].append(float(np.linalg.norm(w[f"{site}.B"])))
                series[site]["alpha"].append(float(w[f"{site}.alpha"][0]))
            else:
                dw = info["scaling"] * (w[f"{site}.up"] @ w[f"{site}.down"])
                series[site]["b_norm"].append(float(np.linalg.norm(dw)))
                series[site]["alpha"].append(float(info["scaling"]))
    return {"epochs": run.epochs, "sites": series}


def layer_heatmap(run, component: str = "q") -> dict:
    """Frobenius norms of A, B, C for each layer's q or v adapter at every snapshot.

    ``grid[i][j][l]`` is epoch ``epochs[i]``, matrix ``"ABC"[j]``, layer ``layers[l]``.
    """
    run = _as_run(run)
    if run.method != "tlora":
        raise ConfigError(f"layer heatmap is defined for TLoRA runs only, got method {run.method!r}")
    if component not in ("q", "v"):
        raise ConfigError(f"component must be 'q' or 'v', got {component!r}")
    kind = {"q": "query", "v": "value"}[component]
    sites = [s for s in run.sites if s.endswith(f".attn.{kind}")]
    layers = [int(s.split(".")[1]) for s in sites]
    grid = []
    for epoch in run.epochs:
        w = run.weights(epoch)
        grid.append([[float(np.linalg.norm(w[f"{s}.{m}"])) for s in sites] for m in "ABC"])
    return {"component": component, "epochs": run.epochs, "layers": layers, "matrices": ["A", "B", "C"], "grid": grid}
