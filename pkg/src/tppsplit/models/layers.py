"""Event embedding, GRU history encoder and the mark PMF head."""
from dataclasses import dataclass

import numpy as np

from ..diffgraph import ops
from ..errors import NonPositiveTau


def glorot(rng, shape):
    fan_out, fan_in = shape[0], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class EmbeddingConfig:
    d_t: int = 4
    d_k: int = 4

    def __post_init__(self):
        if self.d_t % 2:
            raise ValueError("d_t must be even")

    @property
    def d_e(self):
        return self.d_t + self.d_k

    @property
    def frequencies(self):
        j = np.arange(self.d_t // 2)
        return 1000.0 ** (-2.0 * j / self.d_t)


def time_encoding(t, cfg):
    """Interleaved [sin(a_j t), cos(a_j t)] for j = 0 .. d_t/2 - 1; shape (..., d_t)."""
    t = np.asarray(t, dtype=np.float64)
    ang = t[..., None] * cfg.frequencies
    out = np.empty(t.shape + (cfg.d_t,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def embed_event(t, k, cfg, table):
    """Embedding of a single event: time encoding followed by row k of the mark table."""
    table = np.asarray(table)
    if not 0 <= k < table.shape[0]:
        raise IndexError(f"mark {k} outside table of {table.shape[0]} marks")
    return np.concatenate([time_encoding(t, cfg), table[k]])


class GRUEncoder:
    """Single-layer GRU over event embeddings; gate order (reset, update, new)."""

    def __init__(self, store, prefix, num_marks, emb, d_h, owner_tag, rng):
        self.prefix = prefix
        self.emb = emb
        self.d_h = d_h
        self.num_marks = num_marks
        H = d_h
        store.add(prefix + "emb", glorot(rng, (num_marks, emb.d_k)), owner_tag)
        store.add(prefix + "W_ih", glorot(rng, (3 * H, emb.d_e)), owner_tag)
        store.add(prefix + "b_ih", np.zeros(3 * H), owner_tag)
        store.add(prefix + "W_hh", glorot(rng, (3 * H, H)), owner_tag)
        store.add(prefix + "b_hh", np.zeros(3 * H), owner_tag)

    def __call__(self, p, step_times, step_marks):
        """States h_0..h_n for a (n_steps, B) block of events, stacked step-major."""
        n_steps, B = step_times.shape
        pre = self.prefix
        t_enc = time_encoding(step_times.reshape(-1), self.emb)
        k_emb = ops.take_rows(p[pre + "emb"], step_marks.reshape(-1))
        e = ops.concat([ops.constant(t_enc), k_emb], axis=-1)
        xproj = ops.affine(e, p[pre + "W_ih"], p[pre + "b_ih"])
        return ops.gru_sequence(xproj, p[pre + "W_hh"], p[pre + "b_hh"], n_steps, B)


def encode_history(times, marks, enc, p):
    """History vector after consuming the given prefix (zero for an empty prefix)."""
    times = np.asarray(times, dtype=np.float64).reshape(-1, 1)
    marks = np.asarray(marks, dtype=np.int64).reshape(-1, 1)
    H = enc(p, times, marks)
    return H.value[-1]


class MarkHead:
    """softmax(W2 relu(W1 [h || log tau] + b1) + b2); without log tau when time-independent."""

    def __init__(self, store, prefix, d_h, d_1, num_marks, owner_tag, rng, time_dependent=True,
                 tau_floor=1e-8):
        self.prefix = prefix
        self.time_dependent = time_dependent
        self.tau_floor = tau_floor
        d_in = d_h + (1 if time_dependent else 0)
        store.add(prefix + "W1", glorot(rng, (d_1, d_in)), owner_tag)
        store.add(prefix + "b1", np.zeros(d_1), owner_tag)
        store.add(prefix + "W2", glorot(rng, (num_marks, d_1)), owner_tag)
        store.add(prefix + "b2", np.zeros(num_marks), owner_tag)

    def log_probs(self, p, h, tau):
        pre = self.prefix
        x = h
        if self.time_dependent:
            tau = np.asarray(tau, dtype=np.float64)
            if np.any(tau < 0):
                raise NonPositiveTau("negative inter-arrival time passed to the mark head")
            log_tau = np.log(np.maximum(tau, self.tau_floor))
            x = ops.concat([h, ops.constant(log_tau.reshape(-1, 1))], axis=-1)
        hidden = ops.relu(ops.affine(x, p[pre + "W1"], p[pre + "b1"]))
        return ops.log_softmax(ops.affine(hidden, p[pre + "W2"], p[pre + "b2"]), axis=-1)


def mark_pmf(h, tau, head, p):
    """Probability vector over marks for one history vector and one gap."""
    h = ops.constant(np.asarray(h, dtype=np.float64).reshape(1, -1))
    return np.exp(head.log_probs(p, h, np.array([tau])).value[0])
