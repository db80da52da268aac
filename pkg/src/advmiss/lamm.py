"""Learned adversarial missingness: an MLP mask policy trained through WEM.

The policy maps ``x_V`` to a softmax over the ``2**|V|`` local patterns.
Weighted EM (WEM) replaces sampled masks by their exact expectation under
the policy, so the converged Gaussian parameters are a differentiable
function of the policy weights.  Training descends the KL from the target
law to the WEM output plus a penalty on the expected missingness rate,
averaged over several fixed WEM starting points.

All tensors are float64.
"""
from __future__ import annotations

import copy
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.datasets import make_spd_matrix

from ._validation import check_data, check_fitted, check_index_set
from .adversary import MissingnessMechanism, patterns_for_subset
from .scm import as_covariance

logger = logging.getLogger(__name__)

DTYPE = torch.float64
MAX_POLICY_BITS = 12
LOG_2PI = math.log(2.0 * math.pi)


class DivergenceError(RuntimeError):
    """Training loss blew up; ``trace`` holds the losses so far."""

    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


class PatternCodec:
    """Bijection between local observation patterns and output indices.

    Index ``k`` observes ``V[b]`` iff bit ``b`` of ``k`` is set; coordinates
    outside ``V`` are always observed.
    """

    def __init__(self, V, d):
        self.V = check_index_set(V, d, "V")
        if len(self.V) > MAX_POLICY_BITS:
            raise ValueError(f"|V|={len(self.V)} exceeds the cap of {MAX_POLICY_BITS}")
        self.d = d
        self.support = patterns_for_subset(self.V, d)

    @property
    def size(self) -> int:
        return self.support.shape[0]

    def encode(self, patterns) -> np.ndarray:
        P = np.atleast_2d(np.asarray(patterns, dtype=bool))
        outside = np.setdiff1d(np.arange(self.d), self.V)
        if not P[:, outside].all():
            raise ValueError("pattern masks a coordinate outside V")
        weights = 1 << np.arange(len(self.V))
        return P[:, self.V].astype(np.int64) @ weights

    def decode(self, k) -> np.ndarray:
        return self.support[k]

    def missing_counts(self) -> np.ndarray:
        return (~self.support).sum(axis=1)

    def has_global_zero(self) -> bool:
        return len(self.V) == self.d


class MlpPolicy(torch.nn.Module):
    """ReLU MLP ending in a softmax over the codec's patterns.

    Inputs are divided by ``input_scale`` (fixed at construction, typically
    the training standard deviations of ``x_V``) before the first layer.
    """

    def __init__(self, V, d, hidden=(100, 100), input_scale=None, seed=None):
        super().__init__()
        self.codec = PatternCodec(V, d)
        dims = [len(self.codec.V), *hidden, self.codec.size]
        self.layer_dims = tuple(dims)
        gen = torch.Generator().manual_seed(int(np.random.default_rng(seed).integers(2**62)))
        self.layers = torch.nn.ModuleList()
        for a, b in zip(dims[:-1], dims[1:]):
            lin = torch.nn.Linear(a, b, dtype=DTYPE)
            bound = math.sqrt(6.0 / (a + b))
            with torch.no_grad():
                lin.weight.uniform_(-bound, bound, generator=gen)
                lin.bias.zero_()
            self.layers.append(lin)
        scale = np.ones(len(self.codec.V)) if input_scale is None else np.asarray(input_scale)
        self.register_buffer("input_scale", torch.as_tensor(scale, dtype=DTYPE).clone())

    @property
    def V(self):
        return self.codec.V

    def logits(self, x_V):
        h = torch.as_tensor(x_V, dtype=DTYPE) / self.input_scale
        for lin in self.layers[:-1]:
            h = torch.relu(lin(h))
        return self.layers[-1](h)

    def forward(self, x_V):
        return torch.softmax(self.logits(x_V), dim=-1)


def policy_forward(policy: MlpPolicy, x_V) -> np.ndarray:
    """Pattern probabilities as a numpy array."""
    with torch.no_grad():
        return policy(np.atleast_2d(x_V)).numpy()


def missingness_weights(probs, codec: PatternCodec):
    """``P(r | x)`` renormalized over patterns with something observed.

    Only when ``V`` is every variable does index 0 mask the whole row; it is
    then dropped.  Otherwise the probabilities are returned unchanged.
    """
    if not codec.has_global_zero():
        return probs
    w = probs.clone() if torch.is_tensor(probs) else np.array(probs, dtype=float)
    w[:, 0] = 0.0
    return w / w.sum(axis=1, keepdims=True) if not torch.is_tensor(w) \
        else w / w.sum(dim=1, keepdim=True)


# --------------------------------------------------------------------------
# weighted EM

@dataclass
class WemState:
    mu: torch.Tensor
    sigma: torch.Tensor
    n_iter: int = 0
    j_trace: list = field(default_factory=list)
    converged: bool = False


class _PatternMoments:
    """Per-pattern weighted moments ``w_r``, ``s_r``, ``M_r`` of the data."""

    def __init__(self, X, omega, codec):
        self.N = X.shape[0]
        self.w = omega.sum(dim=0)
        self.s = omega.T @ X
        self.M = torch.einsum("ir,ij,ik->rjk", omega, X, X)
        self.blocks = []
        for r in range(codec.size):
            o = np.flatnonzero(codec.support[r])
            if o.size == 0:
                continue
            m = np.flatnonzero(~codec.support[r])
            self.blocks.append((r, torch.as_tensor(o), torch.as_tensor(m)))


def _as_tensor(a):
    if torch.is_tensor(a):
        return a.to(DTYPE)
    return torch.tensor(np.asarray(a), dtype=DTYPE)


def _safe_cholesky(S, what="covariance"):
    L, info = torch.linalg.cholesky_ex(S)
    if int(info) != 0:
        warnings.warn(f"{what} lost positive definiteness; adding 1e-8 jitter", RuntimeWarning)
        L = torch.linalg.cholesky(S + 1e-8 * torch.eye(S.shape[0], dtype=S.dtype))
    return L


def _wem_step(mom: _PatternMoments, mu, sigma):
    d = mu.shape[0]
    T1 = torch.zeros(d, dtype=DTYPE)
    T2 = torch.zeros(d, d, dtype=DTYPE)
    for r, o, m in mom.blocks:
        w, s, M = mom.w[r], mom.s[r], mom.M[r]
        if m.numel() == 0:
            T1 = T1 + s
            T2 = T2 + M
            continue
        S_oo = sigma[o][:, o]
        S_mo = sigma[m][:, o]
        L = _safe_cholesky(S_oo, "observed block")
        K = torch.cholesky_solve(S_mo.T, L).T
        A = torch.zeros(d, d, dtype=DTYPE)
        A[o, o] = 1.0
        A[m[:, None], o[None, :]] = K
        c = torch.zeros(d, dtype=DTYPE)
        c[m] = mu[m] - K @ mu[o]
        C = torch.zeros(d, d, dtype=DTYPE)
        C[m[:, None], m[None, :]] = sigma[m][:, m] - K @ S_mo.T
        As = A @ s
        T1 = T1 + As + w * c
        T2 = T2 + A @ M @ A.T + torch.outer(As, c) + torch.outer(c, As) \
            + w * torch.outer(c, c) + w * C
    mu_new = T1 / mom.N
    sigma_new = T2 / mom.N - torch.outer(mu_new, mu_new)
    return mu_new, 0.5 * (sigma_new + sigma_new.T)


def _wem_loglik(mom: _PatternMoments, mu, sigma):
    J = torch.zeros((), dtype=DTYPE)
    for r, o, _ in mom.blocks:
        w, s, M = mom.w[r], mom.s[r][o], mom.M[r][o][:, o]
        L = _safe_cholesky(sigma[o][:, o], "observed block")
        mu_o = mu[o]
        scatter = M - torch.outer(s, mu_o) - torch.outer(mu_o, s) + w * torch.outer(mu_o, mu_o)
        quad = torch.trace(torch.cholesky_solve(scatter, L))
        logdet = 2.0 * torch.log(torch.diagonal(L)).sum()
        J = J - 0.5 * (w * (o.numel() * LOG_2PI + logdet) + quad)
    return J


def wem(omega, X, codec: PatternCodec, mu0, sigma0, eps: float = 1e-5,
        max_iter: int = 1000, n_iter: int | None = None) -> WemState:
    """Weighted EM for a Gaussian under expected masks.

    ``omega[i, r]`` weights pattern ``r`` for row ``i``.  Iterates until the
    weighted log-likelihood gain drops below ``eps * |J|`` (or exactly
    ``n_iter`` times when given) and returns the latest iterate.  Gradients
    flow through every executed iteration.
    """
    X = _as_tensor(X)
    omega = _as_tensor(omega)
    mom = _PatternMoments(X, omega, codec)
    mu = torch.as_tensor(mu0, dtype=DTYPE)
    sigma = torch.as_tensor(sigma0, dtype=DTYPE)
    j_prev = float(_wem_loglik(mom, mu, sigma).detach())
    state = WemState(mu, sigma, 0, [j_prev])
    limit = n_iter if n_iter is not None else max_iter
    for t in range(1, limit + 1):
        mu, sigma = _wem_step(mom, mu, sigma)
        j = float(_wem_loglik(mom, mu, sigma).detach())
        state.mu, state.sigma, state.n_iter = mu, sigma, t
        state.j_trace.append(j)
        if n_iter is None and j - j_prev < eps * abs(j_prev):
            state.converged = True
            break
        j_prev = j
    return state


# --------------------------------------------------------------------------
# loss and gradients

def torch_gaussian_kl(sigma1, sigma2, mu2=None):
    """``KL(N(0, sigma1) || N(mu2, sigma2))``."""
    d = sigma1.shape[0]
    L1 = torch.linalg.cholesky(sigma1)
    L2 = _safe_cholesky(sigma2)
    M = torch.linalg.solve_triangular(L2, L1, upper=False)
    kl = torch.sum(M * M) - d + 2.0 * (torch.log(torch.diagonal(L2)).sum()
                                       - torch.log(torch.diagonal(L1)).sum())
    if mu2 is not None:
        z = torch.linalg.solve_triangular(L2, mu2.reshape(-1, 1), upper=False)
        kl = kl + torch.sum(z * z)
    return 0.5 * kl


def rate_term(probs, codec: PatternCodec):
    """Mean over rows of the expected masked fraction."""
    ell = torch.as_tensor(codec.missing_counts(), dtype=DTYPE) / codec.d
    return (probs @ ell).mean()


def lamm_loss(mu_tilde, sigma_tilde, sigma_alpha, probs, codec: PatternCodec, lam: float,
              include_mean: bool = True):
    """KL from the target law to ``N(mu_tilde, sigma_tilde)`` plus ``lam`` times the rate."""
    sigma_alpha = torch.as_tensor(sigma_alpha, dtype=DTYPE)
    kl = torch_gaussian_kl(sigma_alpha, sigma_tilde, mu_tilde if include_mean else None)
    return kl + lam * rate_term(probs, codec)


def _objective(policy, X, sigma_alpha, inits, lam, eps, n_iter=None):
    Xt = _as_tensor(X)
    probs = policy(Xt[:, policy.V])
    omega = missingness_weights(probs, policy.codec)
    losses = []
    for mu0, sigma0 in inits:
        st = wem(omega, Xt, policy.codec, mu0, sigma0, eps, n_iter=n_iter)
        losses.append(lamm_loss(st.mu, st.sigma, sigma_alpha, probs, policy.codec, lam))
    return torch.stack(losses)


def grad_phi(policy: MlpPolicy, X, sigma_alpha, inits, lam: float = 0.0, eps: float = 1e-5,
             n_iter=None):
    """Loss averaged over ``inits`` and its gradient for each policy parameter."""
    policy.zero_grad()
    losses = _objective(policy, X, sigma_alpha, inits, lam, eps, n_iter)
    loss = losses.mean()
    loss.backward()
    grads = []
    for name, p in policy.named_parameters():
        g = p.grad.detach().clone()
        if not torch.all(torch.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}: {g}")
        grads.append(g.numpy())
    return float(loss.detach()), grads


def random_inits(X, K: int, seed=None):
    """``K`` SPD covariances matched to the column variances, zero means."""
    X = np.asarray(X, dtype=float)
    d = X.shape[1]
    v = X.var(axis=0)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(K):
        S = make_spd_matrix(d, random_state=int(rng.integers(2**31)))
        s = np.sqrt(v / np.diag(S))
        S = S * np.outer(s, s)
        out.append((torch.zeros(d, dtype=DTYPE), torch.as_tensor(0.5 * (S + S.T), dtype=DTYPE)))
    return out


@dataclass
class LammConfig:
    """Training settings.

    ``epochs`` is the cap; with ``patience`` set, training stops once the
    monitored loss (that of the last initialization) has not improved by
    ``min_delta`` for ``patience`` epochs, and the best weights are restored.
    """

    theta_alpha: object
    V: list
    lam: float = 1e-2
    K: int = 5
    epochs: int = 300
    lr: float = 1e-2
    wem_eps: float = 1e-5
    hidden: tuple = (100, 100)
    patience: int | None = None
    min_delta: float = 1e-4

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.K < 1:
            raise ValueError("K must be >= 1")


def lamm_train(config: LammConfig, X, seed=None):
    """Train a policy with Adam; returns ``(policy, loss_trace)``."""
    X = check_data(X)
    d = X.shape[1]
    sigma_alpha = as_covariance(config.theta_alpha)
    if sigma_alpha.shape[0] != d:
        raise ValueError("target covariance and data dimensions differ")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    s_policy, s_inits = ss.spawn(2)
    V = check_index_set(config.V, d, "V")
    torch.manual_seed(int(s_policy.generate_state(1)[0]))
    policy = MlpPolicy(V, d, config.hidden, X[:, V].std(axis=0), seed=s_policy)
    inits = random_inits(X, config.K, s_inits)
    opt = torch.optim.Adam(policy.parameters(), lr=config.lr, betas=(0.9, 0.999), eps=1e-8)
    trace = []
    best, best_state, wait, blowups = math.inf, None, 0, 0
    for epoch in range(config.epochs):
        before = copy.deepcopy(policy.state_dict()) if config.patience is not None else None
        opt.zero_grad()
        losses = _objective(policy, X, sigma_alpha, inits, config.lam, config.wem_eps)
        loss = losses.mean()
        loss.backward()
        for name, p in policy.named_parameters():
            if not torch.all(torch.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient in {name} at epoch {epoch}")
        trace.append(float(loss.detach()))
        if trace[-1] > 10.0 * trace[0]:
            blowups += 1
            if blowups >= 10:
                raise DivergenceError("loss above 10x its initial value for 10 epochs", trace)
        else:
            blowups = 0
        if config.patience is not None:
            # losses[-1] belongs to the weights held before this step
            monitored = float(losses[-1].detach())
            if monitored < best - config.min_delta:
                best, best_state, wait = monitored, before, 0
            else:
                wait += 1
                if wait >= config.patience:
                    logger.info("early stop at epoch %d", epoch)
                    break
        opt.step()
    if best_state is not None:
        policy.load_state_dict(best_state)
    return policy, trace


# --------------------------------------------------------------------------
# mechanism wrapper and serialization

class LammMechanism(MissingnessMechanism):
    """A trained policy exposed through the missingness-mechanism interface."""

    def __init__(self, policy: MlpPolicy):
        self.policy = policy

    def fit(self, X=None, y=None):
        return self

    @property
    def support(self):
        return self.policy.codec.support

    def pattern_probs(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        probs = policy_forward(self.policy, X[:, self.policy.V])
        return probs / probs.sum(axis=1, keepdims=True)


class Lamm(BaseEstimator):
    """Estimator-style front end to :func:`lamm_train`."""

    def __init__(self, theta_alpha=None, V=None, lam=1e-2, K=5, epochs=300, lr=1e-2,
                 wem_eps=1e-5, hidden=(100, 100), patience=None, min_delta=1e-4, seed=None):
        self.theta_alpha = theta_alpha
        self.V = V
        self.lam = lam
        self.K = K
        self.epochs = epochs
        self.lr = lr
        self.wem_eps = wem_eps
        self.hidden = hidden
        self.patience = patience
        self.min_delta = min_delta
        self.seed = seed

    def fit(self, X, y=None):
        cfg = LammConfig(self.theta_alpha, self.V, self.lam, self.K, self.epochs, self.lr,
                         self.wem_eps, tuple(self.hidden), self.patience, self.min_delta)
        self.policy_, self.loss_trace_ = lamm_train(cfg, X, self.seed)
        self.mechanism_ = LammMechanism(self.policy_)
        return self

    def pattern_probs(self, X):
        check_fitted(self, "mechanism_")
        return self.mechanism_.pattern_probs(X)


def save_policy(policy: MlpPolicy, path, columns=None) -> None:
    """Plain-text dump: header lines, then each layer's weight and bias rows."""
    cols = columns if columns is not None else [f"X{j + 1}" for j in range(policy.codec.d)]
    lines = [
        "# mlp-policy v1",
        "codec lsb-first: index k observes V[b] iff bit b of k is set",
        "d " + str(policy.codec.d),
        "V " + " ".join(str(j) for j in policy.V),
        "V_names " + " ".join(cols[j] for j in policy.V),
        "layer_dims " + " ".join(str(k) for k in policy.layer_dims),
        "input_scale " + " ".join(repr(float(v)) for v in policy.input_scale),
    ]
    for i, lin in enumerate(policy.layers):
        W = lin.weight.detach().numpy()
        lines.append(f"weight {i} {W.shape[0]} {W.shape[1]}")
        lines += [" ".join(repr(float(v)) for v in row) for row in W]
        lines.append(f"bias {i} {W.shape[0]}")
        lines.append(" ".join(repr(float(v)) for v in lin.bias.detach().numpy()))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_policy(path) -> MlpPolicy:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("# mlp-policy"):
        raise ValueError(f"{path}: not a policy file")
    head = {}
    pos = 2
    while pos < len(lines) and not lines[pos].startswith("weight"):
        key, _, rest = lines[pos].partition(" ")
        head[key] = rest.split()
        pos += 1
    d = int(head["d"][0])
    V = [int(v) for v in head["V"]]
    dims = [int(v) for v in head["layer_dims"]]
    scale = [float(v) for v in head["input_scale"]]
    policy = MlpPolicy(V, d, tuple(dims[1:-1]), scale)
    with torch.no_grad():
        for lin in policy.layers:
            _, _, rows, cols = lines[pos].split()
            rows, cols = int(rows), int(cols)
            W = np.array([[float(v) for v in lines[pos + 1 + r].split()] for r in range(rows)])
            pos += 1 + rows
            b = np.array([float(v) for v in lines[pos + 1].split()])
            pos += 2
            if W.shape != (rows, cols) or b.shape != (rows,):
                raise ValueError(f"{path}: malformed layer block")
            lin.weight.copy_(torch.as_tensor(W))
            lin.bias.copy_(torch.as_tensor(b))
    return policy
