"""GMM-UBM verification back-end.

PCA reduction, k-means initialised diagonal-covariance EM for the universal
background model, mean-only MAP adaptation of client models, windowed
log-likelihood-ratio scoring and zt score normalisation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DataError
from .storage import read_container, write_container

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-6
ZSTAT_FLOOR = 1e-6
GMM_TAG = "kinauth-gmm-v1"
_LOG2PI = np.log(2.0 * np.pi)


@dataclass
class PcaModel:
    mean: np.ndarray
    basis: np.ndarray
    explained_variance: np.ndarray

    @property
    def d(self):
        return self.basis.shape[0]

    def project(self, Y):
        return (np.asarray(Y) - self.mean) @ self.basis.T

    def reconstruct(self, Z):
        return np.asarray(Z) @ self.basis + self.mean


def fit_pca(features, d: int) -> PcaModel:
    Y = np.asarray(features, dtype=np.float64)
    Q, N = Y.shape
    if d > N:
        raise ValueError(f"target dimension {d} exceeds feature dimension {N}")
    if d < 1:
        raise ValueError("target dimension must be positive")
    if Q <= d:
        raise ValueError(f"PCA to {d} dims needs more than {d} samples, got {Q}")
    mean = Y.mean(axis=0)
    _, s, vt = np.linalg.svd(Y - mean, full_matrices=False)
    return PcaModel(mean, vt[:d].copy(), (s[:d] ** 2) / Q)


@dataclass
class GmmParams:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    @property
    def M(self):
        return len(self.weights)

    @property
    def N(self):
        return self.means.shape[1]

    def copy(self):
        return GmmParams(self.weights.copy(), self.means.copy(), self.variances.copy())


@dataclass
class ClientModel:
    """MAP-adapted means; weights and variances are the UBM's own arrays."""

    means: np.ndarray
    ubm: GmmParams
    relevance: float
    alpha: np.ndarray = None
    counts: np.ndarray = None
    client_id: str = ""

    @property
    def weights(self):
        return self.ubm.weights

    @property
    def variances(self):
        return self.ubm.variances

    def as_gmm(self):
        return GmmParams(self.ubm.weights, self.means, self.ubm.variances)


def _log_components(Y, g):
    """(Q, M) array of log pi_i + log N(y; mu_i, diag var_i)."""
    Y = np.atleast_2d(Y)
    inv = 1.0 / g.variances
    maha = (Y * Y) @ inv.T - 2.0 * Y @ (g.means * inv).T + np.sum(g.means ** 2 * inv, axis=1)
    const = -0.5 * (g.N * _LOG2PI + np.sum(np.log(g.variances), axis=1))
    with np.errstate(divide="ignore"):
        logw = np.log(g.weights)
    return logw + const - 0.5 * maha


def _logsumexp(a):
    m = np.max(a, axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return (m + np.log(np.sum(np.exp(a - m), axis=1, keepdims=True)))[:, 0]


def gmm_loglik(y, g):
    """log p(y) per row (scalar for a single vector)."""
    y = np.asarray(y, dtype=np.float64)
    out = _logsumexp(_log_components(y, g))
    return float(out[0]) if y.ndim == 1 else out


def responsibilities(y, g):
    y = np.asarray(y, dtype=np.float64)
    lc = _log_components(y, g)
    post = np.exp(lc - _logsumexp(lc)[:, None])
    return post[0] if y.ndim == 1 else post


def _sq_dists(Y, C):
    return np.maximum((Y * Y).sum(1)[:, None] - 2.0 * Y @ C.T + (C * C).sum(1)[None, :], 0.0)


def kmeans_init(features, M: int, iters: int = 100, seed=0, floor=VAR_FLOOR) -> GmmParams:
    """Lloyd's k-means (k-means++ seeding) turned into an initial GMM."""
    Y = np.asarray(features, dtype=np.float64)
    Q = len(Y)
    if M < 1 or M > Q:
        raise ValueError(f"cannot form {M} clusters from {Q} samples")
    rng = np.random.default_rng(seed)
    centers = [Y[rng.integers(Q)]]
    d2 = _sq_dists(Y, np.array(centers))[:, 0]
    for _ in range(1, M):
        total = d2.sum()
        idx = rng.integers(Q) if total <= 0 else rng.choice(Q, p=d2 / total)
        centers.append(Y[idx])
        d2 = np.minimum(d2, _sq_dists(Y, Y[idx:idx + 1])[:, 0])
    C = np.array(centers)
    assign = np.full(Q, -1)
    for _ in range(iters):
        new = _sq_dists(Y, C).argmin(axis=1)
        for k in range(M):
            members = new == k
            if members.any():
                C[k] = Y[members].mean(axis=0)
            else:
                far = _sq_dists(Y, C[k:k + 1])[:, 0].argmax()
                log.info("k-means cluster %d empty; reseeded at sample %d", k, far)
                C[k] = Y[far]
                new[far] = k
        if np.array_equal(new, assign):
            break
        assign = new
    assign = _sq_dists(Y, C).argmin(axis=1)
    weights = np.bincount(assign, minlength=M) / Q
    variances = np.empty_like(C)
    for k in range(M):
        members = Y[assign == k]
        if len(members):
            C[k] = members.mean(axis=0)
            variances[k] = members.var(axis=0)
        else:
            variances[k] = Y.var(axis=0)
    weights = np.maximum(weights, 1e-12)
    return GmmParams(weights / weights.sum(), C, np.maximum(variances, floor))


def em_fit(features, init: GmmParams, iters: int = 100, floor=VAR_FLOOR,
           history: Optional[list] = None) -> GmmParams:
    """Diagonal-covariance EM. Appends the mean log-likelihood before every
    iteration, and after the last one, to ``history`` when given."""
    Y = np.asarray(features, dtype=np.float64)
    Q = len(Y)
    g = init.copy()
    for it in range(iters + 1):
        lc = _log_components(Y, g)
        ll = _logsumexp(lc)
        if history is not None:
            history.append(float(ll.mean()))
        if it == iters:
            break
        post = np.exp(lc - ll[:, None])
        nk = post.sum(axis=0)
        dead = nk < 1e-10
        if dead.any():
            worst = ll.argsort()[: int(dead.sum())]
            log.info("EM: reinitialising %d empty components", int(dead.sum()))
        safe = np.where(dead, 1.0, nk)
        means = (post.T @ Y) / safe[:, None]
        var = (post.T @ (Y * Y)) / safe[:, None] - means ** 2
        weights = nk / Q
        if dead.any():
            means[dead] = Y[worst]
            var[dead] = Y.var(axis=0)
            weights[dead] = 1e-12
        g = GmmParams(weights / weights.sum(), means, np.maximum(var, floor))
    return g


def fit_ubm(features, M, kmeans_iters=100, em_iters=100, seed=0, history=None):
    init = kmeans_init(features, M, kmeans_iters, seed)
    return em_fit(features, init, em_iters, history=history)


def map_adapt(ubm: GmmParams, enrollment, r: float = 4.0, iters: int = 5,
              client_id="") -> ClientModel:
    Y = np.asarray(enrollment, dtype=np.float64)
    if Y.size == 0:
        raise ValueError("enrollment set is empty")
    Y = np.atleast_2d(Y)
    means = ubm.means.copy()
    alpha = n = None
    for _ in range(iters):
        post = responsibilities(Y, GmmParams(ubm.weights, means, ubm.variances))
        post = np.atleast_2d(post)
        n = post.sum(axis=0)
        alpha = n / (n + r)
        with np.errstate(invalid="ignore", divide="ignore"):
            E = np.where(n[:, None] > 0, (post.T @ Y) / n[:, None], 0.0)
        means = np.where(n[:, None] > 0,
                         alpha[:, None] * E + (1.0 - alpha[:, None]) * ubm.means,
                         ubm.means)
    return ClientModel(means, ubm, r, alpha, n, client_id)


def log_ratios(Y, model, ubm: GmmParams, ubm_ll=None):
    """Per-vector log p(y|model) - log p(y|UBM)."""
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    g = model.as_gmm() if isinstance(model, ClientModel) else model
    if ubm_ll is None:
        ubm_ll = _logsumexp(_log_components(Y, ubm))
    return _logsumexp(_log_components(Y, g)) - ubm_ll


@dataclass
class ScoreRecord:
    raw: float
    session_id: str = ""
    genuine: Optional[bool] = None
    z: Optional[float] = None
    zt: Optional[float] = None
    client_id: str = ""
    window: int = 0


def window_size(window_s: float, rate_hz: float) -> int:
    n = int(round(window_s * rate_hz))
    if n < 1:
        raise ValueError(f"a {window_s}s window at {rate_hz} Hz holds no feature vector")
    return n


def score_session(Y, ubm: GmmParams, client, window_s: float = 30.0,
                  rate_hz: float = 2.0, session_id="", genuine=None):
    """One record per complete window; the score is the mean log ratio."""
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if len(Y) == 0:
        raise ValueError("no feature vectors to score")
    per = window_size(window_s, rate_hz)
    ratios = log_ratios(Y, client, ubm)
    cid = getattr(client, "client_id", "")
    return [ScoreRecord(float(ratios[w * per:(w + 1) * per].mean()), session_id, genuine,
                        client_id=cid, window=w)
            for w in range(len(Y) // per)]


def session_windows(Y, window_s, rate_hz):
    per = window_size(window_s, rate_hz)
    Y = np.atleast_2d(Y)
    return [Y[w * per:(w + 1) * per] for w in range(len(Y) // per)]


@dataclass
class ZtNormParams:
    ubm: GmmParams
    t_models: list
    t_zstats: np.ndarray
    z_sequences: list
    client_zstats: dict = field(default_factory=dict)
    flagged: list = field(default_factory=list)

    def z_scores(self, model):
        return np.array([log_ratios(Z, model, self.ubm, ll).mean()
                         for Z, ll in zip(self.z_sequences, self._z_ubm_ll)])

    def __post_init__(self):
        self._z_ubm_ll = [_logsumexp(_log_components(Z, self.ubm)) for Z in self.z_sequences]

    def enroll(self, client: ClientModel, client_id=None):
        """Compute and store the client's z statistics."""
        key = client_id or client.client_id
        stats = _zstats(self.z_scores(client), f"client {key}", self.flagged)
        self.client_zstats[key] = stats
        return stats


def _zstats(scores, what, flagged):
    mu, sigma = float(np.mean(scores)), float(np.std(scores))
    if sigma < ZSTAT_FLOOR:
        log.warning("z statistics of %s have sigma %.3g; floored", what, sigma)
        flagged.append(what)
        sigma = ZSTAT_FLOOR
    return mu, sigma


def _row_keys(Y):
    Y = np.ascontiguousarray(np.atleast_2d(Y), dtype=np.float64)
    return {row.tobytes() for row in Y}


def check_disjoint(t_subsets, z_sequences):
    named = [(f"t-subset {i}", s) for i, s in enumerate(t_subsets)]
    named += [(f"z-sequence {i}", s) for i, s in enumerate(z_sequences)]
    seen = {}
    for name, subset in named:
        for key in _row_keys(subset):
            if key in seen and seen[key] != name:
                raise ValueError(f"{seen[key]} and {name} share feature vectors")
            seen[key] = name


def fit_ztnorm(ubm: GmmParams, t_subsets: Sequence, z_sequences: Sequence,
               r: float = 4.0, iters: int = 5, check=True) -> ZtNormParams:
    """t-models by MAP adaptation of each subset; each z-sequence is scored
    as one unit (mean log ratio over its vectors)."""
    if check:
        check_disjoint(t_subsets, z_sequences)
    t_models = [map_adapt(ubm, s, r, iters, client_id=f"t{i}") for i, s in enumerate(t_subsets)]
    params = ZtNormParams(ubm, t_models, np.zeros((len(t_models), 2)),
                          [np.atleast_2d(np.asarray(z, float)) for z in z_sequences])
    for i, tm in enumerate(t_models):
        params.t_zstats[i] = _zstats(params.z_scores(tm), f"t-model {i}", params.flagged)
    return params


def zt_normalize(raw: float, client_stats, params: ZtNormParams, Y):
    """Return (z, zt) for one score. ``client_stats`` is (mu, sigma) or a client id."""
    if not isinstance(client_stats, tuple):
        client_stats = params.client_zstats[client_stats]
    mu_c, sigma_c = client_stats
    z = (raw - mu_c) / sigma_c
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    ubm_ll = _logsumexp(_log_components(Y, params.ubm))
    cohort = np.array([log_ratios(Y, tm, params.ubm, ubm_ll).mean() for tm in params.t_models])
    cohort_z = (cohort - params.t_zstats[:, 0]) / params.t_zstats[:, 1]
    mu_t, sigma_t = float(cohort_z.mean()), float(cohort_z.std())
    sigma_t = max(sigma_t, ZSTAT_FLOOR)
    return z, (z - mu_t) / sigma_t


# -- persistence ------------------------------------------------------------------

def save_gmm(path, ubm: GmmParams, pca: Optional[PcaModel] = None, clients=None,
             zt: Optional[ZtNormParams] = None, meta=None, force=True):
    arrays = {"ubm.weights": ubm.weights, "ubm.means": ubm.means,
              "ubm.variances": ubm.variances}
    if pca is not None:
        arrays.update({"pca.mean": pca.mean, "pca.basis": pca.basis,
                       "pca.explained": pca.explained_variance})
    header = dict(meta or {})
    ids = []
    for cid, cm in (clients or {}).items():
        key = f"client{len(ids)}"
        ids.append(str(cid))
        arrays[f"{key}.means"] = cm.means
        if zt is not None and cid in zt.client_zstats:
            arrays[f"{key}.zstats"] = np.array(zt.client_zstats[cid])
    if ids:
        header["clients"] = ";".join(ids)
    if zt is not None:
        header["t_models"] = len(zt.t_models)
        for i, tm in enumerate(zt.t_models):
            arrays[f"t{i}.means"] = tm.means
        arrays["t.zstats"] = zt.t_zstats
        header["z_sequences"] = len(zt.z_sequences)
        for i, z in enumerate(zt.z_sequences):
            arrays[f"z{i}"] = z
    write_container(path, GMM_TAG, header, arrays, force=force)


def load_gmm(path):
    """Returns a dict with keys ubm, pca, clients, zt, meta (absent parts None)."""
    meta, a = read_container(path, GMM_TAG)
    ubm = GmmParams(a["ubm.weights"], a["ubm.means"], a["ubm.variances"])
    pca = None
    if "pca.mean" in a:
        pca = PcaModel(a["pca.mean"], a["pca.basis"], a["pca.explained"])
    zt = None
    if "t_models" in meta:
        n_t, n_z = int(meta["t_models"]), int(meta["z_sequences"])
        t_models = [ClientModel(a[f"t{i}.means"], ubm, np.nan, client_id=f"t{i}")
                    for i in range(n_t)]
        zt = ZtNormParams(ubm, t_models, a["t.zstats"], [a[f"z{i}"] for i in range(n_z)])
    clients = {}
    for i, cid in enumerate(filter(None, meta.get("clients", "").split(";"))):
        clients[cid] = ClientModel(a[f"client{i}.means"], ubm, np.nan, client_id=cid)
        if zt is not None and f"client{i}.zstats" in a:
            zt.client_zstats[cid] = tuple(float(v) for v in a[f"client{i}.zstats"])
    if not np.isclose(ubm.weights.sum(), 1.0, atol=1e-5):
        raise DataError(f"{path}: UBM weights do not sum to one")
    return {"ubm": ubm, "pca": pca, "clients": clients, "zt": zt, "meta": meta}
