"""Fisher Vector and VLAD encodings, with the diagonal-covariance GMM (EM)
and k-means codebook training they require."""

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

GMM_MAGIC = b"YT8MGMM0"
KMS_MAGIC = b"YT8MKMS0"

VAR_FLOOR_FRAC = 1e-4


@dataclass
class GmmCodebook:
    weights: np.ndarray    # (N,) sum to 1
    means: np.ndarray      # (N, D)
    variances: np.ndarray  # (N, D) diagonal covariance
    log_likelihoods: list = field(default_factory=list, compare=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.variances = np.asarray(self.variances, dtype=np.float64)
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("component weights must sum to 1")
        if np.any(self.weights <= 0) or np.any(self.variances <= 0):
            raise ValueError("weights and variances must be positive")

    @property
    def n_components(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]


@dataclass
class KmeansCodebook:
    centers: np.ndarray  # (k, D)
    sse_trace: list = field(default_factory=list, compare=False)

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        if self.centers.ndim != 2 or self.centers.shape[0] < 1:
            raise ValueError("centers must be a non-empty (k, D) array")
        if not np.all(np.isfinite(self.centers)):
            raise ValueError("centers must be finite")

    @property
    def k(self):
        return self.centers.shape[0]

    @property
    def dim(self):
        return self.centers.shape[1]


def _log_posteriors(x, gmm):
    """Log responsibilities (T, N), computed with max-subtraction."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    diff = x[:, None, :] - gmm.means[None, :, :]       # (T, N, D)
    log_pdf = -0.5 * (np.sum(diff * diff / gmm.variances[None], axis=2)
                      + np.sum(np.log(2.0 * np.pi * gmm.variances), axis=1))
    joint = np.log(gmm.weights)[None, :] + log_pdf     # (T, N)
    norm = logsumexp(joint, axis=1, keepdims=True)
    return joint - norm, norm[:, 0]


def gmm_posteriors(x, gmm):
    """Per-frame component posteriors gamma_i(x_t), rows summing to 1."""
    log_post, _ = _log_posteriors(x, gmm)
    return np.exp(log_post)


def fit_kmeans(frames, k, seed, max_iter=100):
    """Lloyd's algorithm from k-means++ seeding; empty clusters are
    re-seeded from the farthest point. Stops on assignment fixpoint."""
    x = np.asarray(frames, dtype=np.float64)
    n = x.shape[0]
    if n < k:
        raise ValueError("need at least k samples")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x4B4D]))

    # k-means++ seeding
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[i] = x[rng.integers(n)]
        else:
            centers[i] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((x - centers[i]) ** 2, axis=1))

    assign = np.full(n, -1)
    sse_trace = []
    for _ in range(max_iter):
        dists = np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_assign = np.argmin(dists, axis=1)
        sse_trace.append(float(dists[np.arange(n), new_assign].sum()))
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for i in range(k):
            members = x[assign == i]
            if len(members) == 0:
                farthest = int(np.argmax(dists[np.arange(n), assign]))
                centers[i] = x[farthest]
            else:
                centers[i] = members.mean(axis=0)
    return KmeansCodebook(centers=centers, sse_trace=sse_trace)


def fit_gmm(frames, n_components, seed, max_iter=100, rel_tol=1e-6):
    """EM for a diagonal-covariance GMM, initialized from k-means. The
    per-frame average log-likelihood is recorded each iteration."""
    x = np.asarray(frames, dtype=np.float64)
    n, dim = x.shape
    if n < 10 * n_components:
        raise ValueError("need at least 10 samples per component")

    global_var = x.var(axis=0)
    var_floor = np.maximum(VAR_FLOOR_FRAC * global_var, 1e-12)

    def init(seed_offset):
        km = fit_kmeans(x, n_components, seed=int(seed) + seed_offset)
        assign = np.argmin(
            np.sum((x[:, None, :] - km.centers[None, :, :]) ** 2, axis=2), axis=1)
        weights = np.maximum(np.bincount(assign, minlength=n_components), 1)
        weights = weights / weights.sum()
        means = km.centers.copy()
        variances = np.empty((n_components, dim))
        for i in range(n_components):
            members = x[assign == i]
            if len(members) < 2:
                variances[i] = global_var
            else:
                variances[i] = members.var(axis=0)
        variances = np.maximum(variances, var_floor)
        return GmmCodebook(weights=weights, means=means, variances=variances)

    gmm = init(0)
    reseeded = False
    trace = []
    prev_ll = -np.inf
    it = 0
    while it < max_iter:
        log_post, log_norm = _log_posteriors(x, gmm)
        ll = float(log_norm.mean())
        trace.append(ll)
        post = np.exp(log_post)                   # (n, N)
        counts = post.sum(axis=0)                 # (N,)
        if np.any(counts < 1e-10):
            if reseeded:
                warnings.warn("empty GMM component persisted after reseed")
                break
            reseeded = True
            gmm = init(1)
            trace = []
            prev_ll = -np.inf
            it = 0
            continue
        weights = counts / n
        means = (post.T @ x) / counts[:, None]
        sq = (post.T @ (x * x)) / counts[:, None]
        variances = np.maximum(sq - means ** 2, var_floor)
        gmm = GmmCodebook(weights=weights, means=means, variances=variances)
        if np.isfinite(prev_ll) and ll - prev_ll < rel_tol * max(abs(prev_ll), 1.0):
            break
        prev_ll = ll
        it += 1
    gmm.log_likelihoods = trace
    return gmm


def encode_fisher(frames, gmm):
    """Fisher Vector: normalized log-likelihood gradients w.r.t. GMM means
    and standard deviations, concatenated as [mu blocks; sigma blocks].
    Output dimension is 2*N*D."""
    x = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    n_frames = x.shape[0]
    if x.shape[1] != gmm.dim:
        raise ValueError("dimension mismatch")
    gamma = gmm_posteriors(x, gmm)                  # (T, N)
    sigma = np.sqrt(gmm.variances)                  # (N, D)
    diff = (x[:, None, :] - gmm.means[None]) / sigma[None]  # (T, N, D)

    tau_mu = np.einsum("tn,tnd->nd", gamma, diff)
    tau_mu /= n_frames * np.sqrt(gmm.weights)[:, None]
    tau_sigma = np.einsum("tn,tnd->nd", gamma, diff * diff - 1.0)
    tau_sigma /= n_frames * np.sqrt(2.0 * gmm.weights)[:, None]
    return np.concatenate([tau_mu.reshape(-1), tau_sigma.reshape(-1)])


def encode_vlad(frames, codebook):
    """VLAD: per-center residual accumulation with intra (per-block) and
    global L2 normalization. Output dimension is k*D. Zero blocks stay zero;
    an all-zero encoding is returned as-is with a warning."""
    x = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    if x.shape[1] != codebook.dim:
        raise ValueError("dimension mismatch")
    dists = np.sum((x[:, None, :] - codebook.centers[None]) ** 2, axis=2)
    assign = np.argmin(dists, axis=1)  # argmin takes the lowest index on ties

    acc = np.zeros_like(codebook.centers)
    np.add.at(acc, assign, x - codebook.centers[assign])

    norms = np.linalg.norm(acc, axis=1)
    nonzero = norms > 0.0
    acc[nonzero] /= norms[nonzero, None]
    flat = acc.reshape(-1)
    total = np.linalg.norm(flat)
    if total == 0.0:
        warnings.warn("all-zero VLAD encoding (every frame equals a center)")
        return flat
    return flat / total


def save_gmm(gmm, path):
    with open(path, "wb") as fh:
        fh.write(GMM_MAGIC)
        fh.write(struct.pack("<II", gmm.n_components, gmm.dim))
        fh.write(np.asarray(gmm.weights, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(gmm.means, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(gmm.variances, dtype="<f4").tobytes())


def load_gmm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != GMM_MAGIC:
        raise ValueError("bad magic in %s" % path)
    n, dim = struct.unpack_from("<II", data, 8)
    off = 16
    weights = np.frombuffer(data, dtype="<f4", count=n, offset=off).astype(np.float64)
    off += 4 * n
    means = np.frombuffer(data, dtype="<f4", count=n * dim,
                          offset=off).reshape(n, dim).astype(np.float64)
    off += 4 * n * dim
    variances = np.frombuffer(data, dtype="<f4", count=n * dim,
                              offset=off).reshape(n, dim).astype(np.float64)
    weights = weights / weights.sum()  # float32 round-trip renormalization
    return GmmCodebook(weights=weights, means=means, variances=variances)


def save_kmeans(codebook, path):
    with open(path, "wb") as fh:
        fh.write(KMS_MAGIC)
        fh.write(struct.pack("<II", codebook.k, codebook.dim))
        fh.write(np.ascontiguousarray(codebook.centers, dtype="<f4").tobytes())


def load_kmeans(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != KMS_MAGIC:
        raise ValueError("bad magic in %s" % path)
    k, dim = struct.unpack_from("<II", data, 8)
    centers = np.frombuffer(data, dtype="<f4", count=k * dim,
                            offset=16).reshape(k, dim).astype(np.float64)
    return KmeansCodebook(centers=centers)
