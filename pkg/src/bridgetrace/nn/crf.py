"""Linear-chain CRF: forward algorithm, Viterbi, max-marginals and exact NLL gradients.

Path score for tags y_1..y_T::

    start[y_1] + sum_t emissions[t, y_t] + sum_t transitions[y_t, y_{t+1}] + end[y_T]
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import ShapeError, logsumexp


@dataclass
class CrfParams:
    transitions: np.ndarray  # [K, K], from-tag x to-tag
    start: np.ndarray  # [K]
    end: np.ndarray  # [K]

    @property
    def n_tags(self) -> int:
        return self.start.shape[0]

    @classmethod
    def zeros(cls, n_tags: int) -> "CrfParams":
        return cls(np.zeros((n_tags, n_tags)), np.zeros(n_tags), np.zeros(n_tags))


def _check(emissions: np.ndarray, params: CrfParams) -> None:
    K = params.n_tags
    if emissions.ndim != 2 or emissions.shape[0] < 1 or emissions.shape[1] != K:
        raise ShapeError(f"emissions {emissions.shape} incompatible with {K} tags")
    if params.transitions.shape != (K, K) or params.end.shape != (K,):
        raise ShapeError("inconsistent CRF parameter shapes")


def path_score(emissions: np.ndarray, tags, params: CrfParams) -> float:
    tags = list(tags)
    s = params.start[tags[0]] + params.end[tags[-1]]
    s += sum(emissions[t, y] for t, y in enumerate(tags))
    s += sum(params.transitions[a, b] for a, b in zip(tags, tags[1:]))
    return float(s)


def _alphas(emissions, params):
    T, K = emissions.shape
    alpha = np.empty((T, K))
    alpha[0] = params.start + emissions[0]
    for t in range(1, T):
        alpha[t] = logsumexp(alpha[t - 1][:, None] + params.transitions, axis=0) + emissions[t]
    return alpha


def _betas(emissions, params):
    T, K = emissions.shape
    beta = np.empty((T, K))
    beta[T - 1] = params.end
    for t in range(T - 2, -1, -1):
        beta[t] = logsumexp(params.transitions + (emissions[t + 1] + beta[t + 1])[None, :], axis=1)
    return beta


def crf_log_partition(emissions: np.ndarray, params: CrfParams) -> float:
    _check(emissions, params)
    alpha = _alphas(emissions, params)
    return float(logsumexp(alpha[-1] + params.end))


def crf_viterbi(emissions: np.ndarray, params: CrfParams) -> tuple[list[int], float]:
    """Best path and its score; ties resolve to the lowest tag index."""
    _check(emissions, params)
    T, K = emissions.shape
    delta = params.start + emissions[0]
    back = np.zeros((T, K), dtype=int)
    for t in range(1, T):
        cand = delta[:, None] + params.transitions
        back[t] = np.argmax(cand, axis=0)
        delta = cand[back[t], np.arange(K)] + emissions[t]
    final = delta + params.end
    y = int(np.argmax(final))
    best = float(final[y])
    path = [y]
    for t in range(T - 1, 0, -1):
        y = int(back[t, y])
        path.append(y)
    return path[::-1], best


def crf_max_marginals(emissions: np.ndarray, params: CrfParams) -> np.ndarray:
    """[T, K] score of the best path constrained to pass through tag k at step t."""
    _check(emissions, params)
    T, K = emissions.shape
    fwd = np.empty((T, K))
    bwd = np.empty((T, K))
    fwd[0] = params.start + emissions[0]
    for t in range(1, T):
        fwd[t] = np.max(fwd[t - 1][:, None] + params.transitions, axis=0) + emissions[t]
    bwd[T - 1] = params.end
    for t in range(T - 2, -1, -1):
        bwd[t] = np.max(params.transitions + (emissions[t + 1] + bwd[t + 1])[None, :], axis=1)
    return fwd + bwd


def crf_nll_and_grad(emissions: np.ndarray, gold_tags, params: CrfParams):
    """Negative log-likelihood of the gold path and its exact gradients.

    Returns ``(loss, d_emissions, CrfParams-of-gradients)``.
    """
    _check(emissions, params)
    T, K = emissions.shape
    gold = np.asarray(list(gold_tags), dtype=int)
    if gold.shape != (T,) or gold.min() < 0 or gold.max() >= K:
        raise ShapeError("gold path does not match emissions")
    alpha = _alphas(emissions, params)
    beta = _betas(emissions, params)
    log_z = float(logsumexp(alpha[-1] + params.end))
    loss = log_z - path_score(emissions, gold, params)

    unary = np.exp(alpha + beta - log_z)
    d_em = unary.copy()
    d_em[np.arange(T), gold] -= 1.0
    d_trans = np.zeros((K, K))
    for t in range(T - 1):
        pair = alpha[t][:, None] + params.transitions + (emissions[t + 1] + beta[t + 1])[None, :]
        d_trans += np.exp(pair - log_z)
        d_trans[gold[t], gold[t + 1]] -= 1.0
    d_start = unary[0].copy()
    d_start[gold[0]] -= 1.0
    d_end = unary[-1].copy()
    d_end[gold[-1]] -= 1.0
    # log-sum-exp dominates every path score; clamp rounding noise
    return max(loss, 0.0), d_em, CrfParams(d_trans, d_start, d_end)
