"""Score networks, normalized attention weights and the self-excitation term.

The batched functions take a flat list of (query, past event) pairs with a
``segments`` array naming the query each pair belongs to. They work on plain
arrays and on autodiff variables alike.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad


def head_prefix(m):
    return f"score{m}."


def embed_events(times, sensors, horizon, coords):
    """Value-embedding inputs (t / T, sensor coordinate x, sensor coordinate y)."""
    times = np.asarray(times, dtype=float)
    horizon = np.broadcast_to(np.asarray(horizon, dtype=float), times.shape)
    xy = np.asarray(coords, dtype=float)[np.asarray(sensors, dtype=np.intp)]
    return np.column_stack([times / horizon, xy.reshape(len(times), 2)])


def score_features(dt, alpha, time_scale=1.0):
    """Stack score-network inputs; ``alpha=None`` means temporal-only."""
    dt_col = np.asarray(dt, dtype=float).reshape(-1, 1) / time_scale
    if alpha is None:
        return dt_col
    return ad.concat([dt_col, ad.reshape(alpha, (-1, 1)) if isinstance(alpha, ad.Var)
                      else np.asarray(alpha, dtype=float).reshape(-1, 1)], axis=1)


def batch_scores(arrays, m, features):
    return ad.mlp_forward(arrays, features, prefix=head_prefix(m))


def batch_normalize(raw, segments, n_queries):
    totals = ad.segment_sum(raw, segments, n_queries)
    return raw / ad.take(totals, segments)


def batch_head(arrays, m, weights, pair_embed, segments, n_queries):
    """h_m for every query: weighted sum of past-event embeddings times W_m^v."""
    pooled = ad.segment_sum(ad.reshape(weights, (-1, 1)) * pair_embed, segments, n_queries)
    return ad.matmul(pooled, arrays[f"value{m}"])


def batch_self_excitation(arrays, heads, has_history):
    h = ad.concat(heads, axis=1) if len(heads) > 1 else heads[0]
    return ad.softplus(ad.matmul(h, arrays["out.W"]) + arrays["out.b"]) * has_history


# single-event forms -----------------------------------------------------------

def score(theta, dt, alpha=None, prefix="", time_scale=1.0):
    """Positive importance score of a past event ``dt`` hours earlier."""
    if not dt > 0:
        raise ValueError("past event must be strictly earlier than the current event")
    x = score_features([dt], None if alpha is None else [alpha], time_scale)
    return float(ad.mlp_forward(theta, x, prefix=prefix)[0])


def normalize_scores(raw):
    raw = np.asarray(raw, dtype=float)
    if raw.size == 0:
        raise ValueError("cannot normalize an empty score list")
    if np.any(raw <= 0):
        raise ValueError("scores must be positive")
    return raw / raw.sum()


def attention_head(theta, value_matrix, history_embed, dts, alphas=None, prefix="", time_scale=1.0):
    """h_m(x) for one query given the embeddings of its past events."""
    value_matrix = np.asarray(value_matrix, dtype=float)
    history_embed = np.asarray(history_embed, dtype=float).reshape(-1, value_matrix.shape[0])
    if len(history_embed) == 0:
        return np.zeros(value_matrix.shape[1])
    raw = ad.mlp_forward(theta, score_features(dts, alphas, time_scale), prefix=prefix)
    w = normalize_scores(raw)
    return (w @ history_embed) @ value_matrix


def self_excitation(arrays, n_heads, history_embed, dts, alphas=None, time_scale=1.0):
    """lambda' for one query; zero when there is no history."""
    history_embed = np.asarray(history_embed, dtype=float)
    if history_embed.size == 0:
        return 0.0
    heads = [attention_head(arrays, arrays[f"value{m}"], history_embed, dts, alphas,
                            prefix=head_prefix(m), time_scale=time_scale)
             for m in range(n_heads)]
    z = np.concatenate(heads) @ np.asarray(arrays["out.W"]) + float(arrays["out.b"])
    return float(np.logaddexp(0.0, z))
