"""Two-covariance PLDA back end.

Generative model per embedding e: e = mu + y + z with the speaker factor
y ~ N(0, between) shared by all of a speaker's embeddings and channel
noise z ~ N(0, within) drawn per embedding. `between` and `within` are
the between-speaker and within-speaker covariance matrices.

Scoring uses the closed two-Gaussian form: the log ratio of the joint
density of a pair under "same speaker" (covariance [[T, B], [B, T]] with
T = between + within, B = between) versus "different speakers"
([[T, 0], [0, T]]). That reduces to

    llr(u, v) = u' Q u + v' Q v + u' P v + k

on centered embeddings, with Q, P, k precomputed from the model.

Unsupervised adaptation matches the model's total covariance to
adaptation-data statistics: directions where the adaptation data shows
more variance than T get the excess added back, split between the two
covariances; directions with less variance are left alone.

All math is 64-bit; embeddings are upcast on entry.
"""

import struct
import warnings

import numpy as np
from scipy import linalg as sla
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import DataError, FormatError, NumericalError
from .validation import check_embeddings, check_labels, check_square, check_vector

_RIDGE_REL = 1e-6


def length_normalize(x):
    """Scale embeddings to norm sqrt(dim); keeps the input's 1-D/2-D shape."""
    arr = check_embeddings(x, name="embeddings")
    norms = np.linalg.norm(arr, axis=1, keepdims=True)
    if np.any(norms <= 0.0):
        raise DataError("cannot length-normalize a zero vector")
    out = arr * (np.sqrt(arr.shape[1]) / norms)
    return out[0] if np.asarray(x).ndim == 1 else out


def _symmetrize(m):
    return (m + m.T) / 2.0


def _group_indices(labels):
    groups = {}
    for i, lab in enumerate(labels):
        groups.setdefault(lab, []).append(i)
    return groups


def _fit_lda(x, labels, out_dim):
    """Generalized-eigenvector LDA projection, (out_dim, d) row matrix."""
    n, d = x.shape
    if not 1 <= out_dim <= d:
        raise DataError(f"lda_dim must be in [1, {d}], got {out_dim}")
    groups = _group_indices(labels)
    if len(groups) < 2:
        raise DataError("LDA needs >= 2 speakers")
    overall = x.mean(axis=0)
    s_within = np.zeros((d, d))
    s_between = np.zeros((d, d))
    for idx in groups.values():
        xc = x[idx]
        mc = xc.mean(axis=0)
        centered = xc - mc
        s_within += centered.T @ centered
        diff = mc - overall
        s_between += len(idx) * np.outer(diff, diff)
    s_within /= n
    s_between /= n
    try:
        np.linalg.cholesky(s_within + 0.0)
    except np.linalg.LinAlgError:
        ridge = _RIDGE_REL * np.trace(s_within) / d
        if ridge <= 0.0:
            ridge = _RIDGE_REL
        warnings.warn(f"singular within-class scatter; adding ridge {ridge:g}")
        s_within = s_within + ridge * np.eye(d)
    vals, vecs = sla.eigh(_symmetrize(s_between), _symmetrize(s_within))
    order = np.argsort(vals)[::-1][:out_dim]
    proj = vecs[:, order].T
    for row in proj:
        if row[np.argmax(np.abs(row))] < 0.0:
            row *= -1.0
    return np.ascontiguousarray(proj)


class EmbeddingPreprocessor(BaseEstimator, TransformerMixin):
    """Mean subtraction, optional LDA, then length normalization.

    The stages apply in that fixed order; length normalization scales each
    vector to norm sqrt(dim) of the (possibly LDA-reduced) space.
    """

    def __init__(self, lda_dim=None, length_norm=True):
        self.lda_dim = lda_dim
        self.length_norm = length_norm

    def fit(self, X, y=None):
        x = check_embeddings(X, name="X")
        self.mean_ = x.mean(axis=0)
        if self.lda_dim is not None:
            if y is None:
                raise DataError("LDA requires speaker labels")
            labels = check_labels(y, len(x), name="y")
            self.projection_ = _fit_lda(x - self.mean_, labels, int(self.lda_dim))
        else:
            self.projection_ = None
        return self

    def transform(self, X):
        if not hasattr(self, "mean_"):
            raise DataError("preprocessor is not fitted")
        single = np.asarray(X).ndim == 1
        x = check_embeddings(X, dim=self.mean_.shape[0], name="X") - self.mean_
        if self.projection_ is not None:
            x = x @ self.projection_.T
        if self.length_norm:
            x = length_normalize(x)
        return x[0] if single else x

    @property
    def output_dim(self):
        if self.projection_ is not None:
            return self.projection_.shape[0]
        return self.mean_.shape[0]


def _check_covariances(between, within):
    d = between.shape[0]
    scale = max(np.trace(between) + np.trace(within), 1.0) / d
    if np.abs(between - between.T).max() > 1e-8 * scale:
        raise DataError("between-speaker covariance is not symmetric")
    if np.abs(within - within.T).max() > 1e-8 * scale:
        raise DataError("within-speaker covariance is not symmetric")
    eigs = np.linalg.eigvalsh(_symmetrize(between))
    if eigs.min() < -1e-8 * scale:
        raise DataError(f"between-speaker covariance has negative eigenvalue {eigs.min():g}")
    try:
        np.linalg.cholesky(_symmetrize(within))
    except np.linalg.LinAlgError:
        raise DataError("within-speaker covariance is not positive definite") from None


def _log_gaussian_quadforms(diffs, cov):
    """log N(diff; 0, cov) per row, via one Cholesky."""
    chol, lower = sla.cho_factor(cov, lower=True)
    solved = sla.cho_solve((chol, lower), diffs.T)
    quad = np.einsum("ij,ji->i", diffs, solved)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    d = cov.shape[0]
    return -0.5 * (d * np.log(2.0 * np.pi) + logdet + quad)


class TwoCovPlda(BaseEstimator):
    """Two-covariance PLDA estimator.

    fit(X, y) runs EM on labeled embeddings: the E-step computes each
    speaker's posterior over y from that speaker's embedding mean, the
    M-step re-estimates the mean and both covariances. The per-iteration
    marginal log-likelihood (stored in loglik_curve_) never decreases.

    Fitted attributes: mu_, between_, within_, loglik_curve_.
    """

    def __init__(self, n_iter=10, tol=1e-6):
        self.n_iter = n_iter
        self.tol = tol

    @classmethod
    def from_params(cls, mu, between, within, n_iter=10, tol=1e-6):
        model = cls(n_iter=n_iter, tol=tol)
        mu = check_vector(mu, name="mu")
        d = mu.shape[0]
        between = check_square(between, dim=d, name="between-speaker covariance")
        within = check_square(within, dim=d, name="within-speaker covariance")
        _check_covariances(between, within)
        model.mu_ = mu
        model.between_ = _symmetrize(between)
        model.within_ = _symmetrize(within)
        model.loglik_curve_ = []
        return model

    @property
    def dim_(self):
        self._check_fitted()
        return self.mu_.shape[0]

    def _check_fitted(self):
        if not hasattr(self, "mu_"):
            raise DataError("PLDA model is not fitted")

    # ---------------- EM training ----------------

    def fit(self, X, y):
        if self.n_iter < 1:
            raise DataError(f"n_iter must be >= 1, got {self.n_iter}")
        x = check_embeddings(X, name="X")
        labels = check_labels(y, len(x), name="y")
        groups = _group_indices(labels)
        if len(groups) < 2:
            raise DataError(f"PLDA needs >= 2 speakers, got {len(groups)}")
        counts = np.array([len(idx) for idx in groups.values()])
        if counts.max() < 2:
            raise DataError(
                "within-speaker covariance is unidentifiable: "
                "every speaker has a single embedding"
            )
        n, d = x.shape
        means = np.stack([x[idx].mean(axis=0) for idx in groups.values()])
        scatter_within = np.zeros((d, d))
        for idx, m in zip(groups.values(), means):
            centered = x[idx] - m
            scatter_within += centered.T @ centered
        xsum = x.sum(axis=0)
        mu = xsum / n
        total = _symmetrize(x.T @ x / n - np.outer(mu, mu))
        ridge = max(_RIDGE_REL * np.trace(total) / d, 1e-12)
        between = total / 2.0 + ridge * np.eye(d)
        within = total / 2.0 + ridge * np.eye(d)
        const = -0.5 * n * d * np.log(2.0 * np.pi) - 0.5 * d * np.log(counts).sum()
        logliks = [self._marginal_ll(mu, between, within, means, counts,
                                     scatter_within, n, const)]
        for _ in range(self.n_iter):
            mu, between, within = self._em_step(
                mu, between, within, means, counts, xsum, x.T @ x, n
            )
            logliks.append(self._marginal_ll(mu, between, within, means, counts,
                                             scatter_within, n, const))
            if logliks[-1] - logliks[-2] < self.tol:
                break
        self.mu_ = mu
        self.between_ = between
        self.within_ = within
        self.loglik_curve_ = logliks
        self.__dict__.pop("_scorer_cache", None)
        return self

    @staticmethod
    def _marginal_ll(mu, between, within, means, counts, scatter_within, n, const):
        n_speakers = means.shape[0]
        chol, lower = sla.cho_factor(within, lower=True)
        logdet_within = 2.0 * np.log(np.diag(chol)).sum()
        trace_term = np.trace(sla.cho_solve((chol, lower), scatter_within))
        ll = const - 0.5 * (n - n_speakers) * logdet_within - 0.5 * trace_term
        for cnt in np.unique(counts):
            mask = counts == cnt
            ll += _log_gaussian_quadforms(means[mask] - mu, between + within / cnt).sum()
        return float(ll)

    @staticmethod
    def _em_step(mu, between, within, means, counts, xsum, xxsum, n):
        d = mu.shape[0]
        n_speakers = means.shape[0]
        yhat = np.empty_like(means)
        post_cov = {}
        for cnt in np.unique(counts):
            mask = counts == cnt
            cov = between + within / cnt
            k_gain = np.linalg.solve(cov, between).T
            yhat[mask] = (means[mask] - mu) @ k_gain.T
            post_cov[cnt] = _symmetrize(between - k_gain @ between)
        n_yhat = counts[:, None] * yhat
        mu_new = (xsum - n_yhat.sum(axis=0)) / n
        gamma = yhat.T @ yhat
        weighted = np.zeros((d, d))
        for cnt in np.unique(counts):
            mask = counts == cnt
            gamma += post_cov[cnt] * int(mask.sum())
            weighted += post_cov[cnt] * int(mask.sum()) * cnt
        between_new = _symmetrize(gamma / n_speakers)
        xx_centered = (
            xxsum
            - np.outer(xsum, mu_new)
            - np.outer(mu_new, xsum)
            + n * np.outer(mu_new, mu_new)
        )
        cross = (counts[:, None] * (means - mu_new)).T @ yhat
        weighted += (counts[:, None] * yhat).T @ yhat
        within_new = _symmetrize((xx_centered - cross - cross.T + weighted) / n)
        scale = max(np.trace(between_new) + np.trace(within_new), 1e-300) / d
        eigs = np.linalg.eigvalsh(between_new)
        if eigs.min() < -1e-8 * scale:
            raise NumericalError(
                f"between-speaker covariance update went indefinite ({eigs.min():g})"
            )
        if eigs.min() < 0.0:
            vals, vecs = np.linalg.eigh(between_new)
            between_new = _symmetrize((vecs * np.maximum(vals, 0.0)) @ vecs.T)
        try:
            np.linalg.cholesky(within_new)
        except np.linalg.LinAlgError:
            raise NumericalError("within-speaker covariance update lost definiteness") from None
        return mu_new, between_new, within_new

    # ---------------- scoring ----------------

    @property
    def _scorer(self):
        self._check_fitted()
        cached = self.__dict__.get("_scorer_cache")
        if cached is None:
            total = self.between_ + self.within_
            total_inv = np.linalg.inv(total)
            schur = total - self.between_ @ total_inv @ self.between_
            schur_inv = np.linalg.inv(schur)
            sign_t, logdet_t = np.linalg.slogdet(total)
            sign_s, logdet_s = np.linalg.slogdet(schur)
            if sign_t <= 0 or sign_s <= 0:
                raise NumericalError("total covariance is not positive definite")
            cached = {
                "quad": _symmetrize(0.5 * (total_inv - schur_inv)),
                "cross": _symmetrize(total_inv @ self.between_ @ schur_inv),
                "offset": 0.5 * (logdet_t - logdet_s),
            }
            self.__dict__["_scorer_cache"] = cached
        return cached

    def score_matrix(self, enrol, test):
        """LLR for every (enrol row, test row) pair, shape (m, n)."""
        s = self._scorer
        u = check_embeddings(enrol, dim=self.dim_, name="enrol embeddings") - self.mu_
        v = check_embeddings(test, dim=self.dim_, name="test embeddings") - self.mu_
        qu = np.einsum("ij,ij->i", u @ s["quad"], u)
        qv = np.einsum("ij,ij->i", v @ s["quad"], v)
        return qu[:, None] + qv[None, :] + u @ s["cross"] @ v.T + s["offset"]

    def score_pairs(self, a, b):
        """LLR per parallel row pair."""
        s = self._scorer
        u = check_embeddings(a, dim=self.dim_, name="enrol embeddings") - self.mu_
        v = check_embeddings(b, dim=self.dim_, name="test embeddings") - self.mu_
        if u.shape[0] != v.shape[0]:
            raise DataError(f"{u.shape[0]} vs {v.shape[0]} rows in score_pairs")
        qu = np.einsum("ij,ij->i", u @ s["quad"], u)
        qv = np.einsum("ij,ij->i", v @ s["quad"], v)
        cross = np.einsum("ij,ij->i", u @ s["cross"], v)
        return qu + qv + cross + s["offset"]

    def score(self, enrol, test):
        return float(self.score_pairs(np.atleast_2d(enrol), np.atleast_2d(test))[0])

    def score_enrolment(self, enrol_list, test):
        """Average the enrolment embeddings, re-length-normalize, score."""
        enrol = check_embeddings(np.asarray(enrol_list), dim=self.dim_,
                                 name="enrolment embeddings")
        pooled = length_normalize(enrol.mean(axis=0))
        return self.score(pooled, test)

    # ---------------- adaptation ----------------

    def adapt(self, X, alpha_within=0.75, alpha_between=0.25):
        """Covariance-matching adaptation from raw embeddings."""
        x = check_embeddings(X, dim=self.dim_, name="adaptation embeddings")
        if x.shape[0] < self.dim_ + 1:
            raise DataError(
                f"need >= dim+1 = {self.dim_ + 1} adaptation embeddings, got {x.shape[0]}"
            )
        mean = x.mean(axis=0)
        centered = x - mean
        total = centered.T @ centered / x.shape[0]
        return self.adapt_from_stats(mean, total, alpha_within, alpha_between)

    def adapt_from_stats(self, mean, total_cov, alpha_within=0.75, alpha_between=0.25):
        """As adapt, but from a precomputed mean and total covariance.

        The model total T = between + within and the adaptation covariance
        are simultaneously diagonalized; per direction, adaptation variance
        above 1 (relative to T) is excess, added back split
        alpha_between : alpha_within. Directions at or below 1 are kept.
        """
        self._check_fitted()
        if alpha_within < 0 or alpha_between < 0 or abs(alpha_within + alpha_between - 1.0) > 1e-9:
            raise DataError(
                f"alphas must be >= 0 and sum to 1, got ({alpha_within}, {alpha_between})"
            )
        mean = check_vector(mean, dim=self.dim_, name="adaptation mean")
        s_a = _symmetrize(check_square(total_cov, dim=self.dim_, name="adaptation covariance"))
        eigs = np.linalg.eigvalsh(s_a)
        scale = max(np.trace(s_a) / self.dim_, 1e-300)
        if eigs.min() < -1e-8 * scale:
            raise DataError(f"adaptation covariance has negative eigenvalue {eigs.min():g}")
        if eigs.min() < 1e-10 * scale:
            ridge = _RIDGE_REL * scale
            warnings.warn(f"rank-deficient adaptation covariance; adding ridge {ridge:g}")
            s_a = s_a + ridge * np.eye(self.dim_)
        total = self.between_ + self.within_
        chol = np.linalg.cholesky(total)
        half = sla.solve_triangular(chol, s_a, lower=True)
        whitened = _symmetrize(sla.solve_triangular(chol, half.T, lower=True).T)
        vals, vecs = np.linalg.eigh(whitened)
        back = chol @ vecs
        excess = _symmetrize((back * np.maximum(vals - 1.0, 0.0)) @ back.T)
        return TwoCovPlda.from_params(
            mean,
            self.between_ + alpha_between * excess,
            self.within_ + alpha_within * excess,
            n_iter=self.n_iter,
            tol=self.tol,
        )


_P_MAGIC = b"SVP1"
_C_MAGIC = b"SVC1"
_U32 = struct.Struct("<I")


def _write_f64(fh, arr):
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_f64(fh, shape, path):
    count = int(np.prod(shape))
    raw = fh.read(count * 8)
    if len(raw) != count * 8:
        raise FormatError(f"{path}: truncated payload")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()


def write_plda(path, model):
    model._check_fitted()
    d = model.dim_
    with open(path, "wb") as fh:
        fh.write(_P_MAGIC)
        fh.write(_U32.pack(d))
        _write_f64(fh, model.mu_)
        _write_f64(fh, model.between_)
        _write_f64(fh, model.within_)


def read_plda(path):
    with open(path, "rb") as fh:
        if fh.read(4) != _P_MAGIC:
            raise FormatError(f"{path}: not a PLDA model file")
        raw = fh.read(_U32.size)
        if len(raw) != _U32.size:
            raise FormatError(f"{path}: truncated header")
        (d,) = _U32.unpack(raw)
        if d < 1:
            raise FormatError(f"{path}: bad dimension {d}")
        mu = _read_f64(fh, (d,), path)
        between = _read_f64(fh, (d, d), path)
        within = _read_f64(fh, (d, d), path)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes")
    return TwoCovPlda.from_params(mu, between, within)


def write_preprocessor(path, chain):
    if not hasattr(chain, "mean_"):
        raise DataError("preprocessor is not fitted")
    with open(path, "wb") as fh:
        fh.write(_C_MAGIC)
        fh.write(_U32.pack(chain.mean_.shape[0]))
        lda_rows = 0 if chain.projection_ is None else chain.projection_.shape[0]
        fh.write(_U32.pack(lda_rows))
        fh.write(_U32.pack(1 if chain.length_norm else 0))
        _write_f64(fh, chain.mean_)
        if lda_rows:
            _write_f64(fh, chain.projection_)


def read_preprocessor(path):
    with open(path, "rb") as fh:
        if fh.read(4) != _C_MAGIC:
            raise FormatError(f"{path}: not a preprocessor file")
        raw = fh.read(3 * _U32.size)
        if len(raw) != 3 * _U32.size:
            raise FormatError(f"{path}: truncated header")
        d, lda_rows, norm_flag = struct.unpack("<III", raw)
        if d < 1:
            raise FormatError(f"{path}: bad dimension {d}")
        mean = _read_f64(fh, (d,), path)
        projection = _read_f64(fh, (lda_rows, d), path) if lda_rows else None
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes")
    chain = EmbeddingPreprocessor(
        lda_dim=lda_rows if lda_rows else None, length_norm=bool(norm_flag)
    )
    chain.mean_ = mean
    chain.projection_ = projection
    return chain
