"""Time decoders.

All graph methods take ``p`` (block name -> Node), the history rows ``h`` of
shape (R, d_h), gaps ``tau`` since the previous event and the previous event
times ``t_prev``.  ``tau`` is either (R,) or a per-row grid (R, Q) used for
quadrature; outputs follow its shape.

THP, SAHP and FNN decoders have a configurable channel count: with C channels
their outputs are summed into a ground intensity (the disjoint "+" models);
with K channels each channel is the intensity of one mark (the original,
marked parametrisation, also used for the duplicated models).
"""
import math

import numpy as np

from ..diffgraph import ops
from .layers import glorot

_LOG_2PI = math.log(2.0 * math.pi)


def _expand(node, tau):
    """Row features (R, c) aligned with ``tau``: unchanged for (R,), (R, 1, c) for a grid."""
    if np.ndim(tau) == 2:
        R, c = node.shape
        return ops.reshape(node, (R, 1, c))
    return node


class TimeDecoder:
    family = None
    closed_compensator = False
    closed_density = False

    def __init__(self, prefix):
        self.prefix = prefix
        self.diagnostics = {}

    def channel_intensity(self, p, h, tau, t_prev):
        raise NotImplementedError

    def log_intensity(self, p, h, tau, t_prev):
        return ops.log(ops.sum(self.channel_intensity(p, h, tau, t_prev), axis=-1))

    def intensity_grid(self, p, h, grid, t_prev):
        return ops.sum(self.channel_intensity(p, h, grid, t_prev), axis=-1)

    def log_channel_intensity(self, p, h, tau, t_prev):
        return ops.log(self.channel_intensity(p, h, tau, t_prev))

    def compensator(self, p, h, tau, t_prev):
        raise NotImplementedError(f"{self.family} has no closed-form compensator")

    def log_density(self, p, h, tau, t_prev):
        return ops.sub(self.log_intensity(p, h, tau, t_prev), self.compensator(p, h, tau, t_prev))

    def log_survival(self, p, h, tau, t_prev):
        return ops.neg(self.compensator(p, h, tau, t_prev))


class RMTPPDecoder(TimeDecoder):
    """lambda(tau) = exp(w_t tau + w_h.h + b) with w_t = softplus(raw) > 0."""
    family = "rmtpp"
    closed_compensator = True
    closed_density = True

    def __init__(self, store, prefix, d_h, owner_tag, rng, exp_clamp=30.0):
        super().__init__(prefix)
        self.exp_clamp = exp_clamp
        self.diagnostics = {"clamped": 0}
        store.add(prefix + "w_t", np.zeros(1), owner_tag)
        store.add(prefix + "w_h", glorot(rng, (1, d_h)), owner_tag)
        store.add(prefix + "b", np.zeros(1), owner_tag)

    def _parts(self, p, h, tau):
        pre = self.prefix
        c = ops.reshape(ops.affine(h, p[pre + "w_h"], p[pre + "b"]), (h.shape[0],))
        if np.ndim(tau) == 2:
            c = ops.reshape(c, (h.shape[0], 1))
        return c, ops.softplus(p[pre + "w_t"])

    def log_intensity(self, p, h, tau, t_prev):
        c, w_t = self._parts(p, h, tau)
        lim = self.exp_clamp
        return ops.clip(ops.add(ops.mul(w_t, tau), c), -lim, lim, self.diagnostics)

    def intensity_grid(self, p, h, grid, t_prev):
        return ops.exp(self.log_intensity(p, h, grid, t_prev))

    def channel_intensity(self, p, h, tau, t_prev):
        lam = self.intensity_grid(p, h, tau, t_prev)
        return ops.reshape(lam, lam.shape + (1,))

    def compensator(self, p, h, tau, t_prev):
        # exp(c)/w_t (exp(w_t tau) - 1) = exp(c) tau exprel(w_t tau); finite as w_t -> 0
        c, w_t = self._parts(p, h, tau)
        lim = self.exp_clamp
        ec = ops.exp(ops.clip(c, -lim, lim, self.diagnostics))
        rel = ops.exprel(ops.clip(ops.mul(w_t, tau), -lim, lim, self.diagnostics))
        return ops.mul(ops.mul(ec, rel), tau)


class LNMDecoder(TimeDecoder):
    """Mixture of M log-normals over the inter-arrival time."""
    family = "lnm"
    closed_compensator = True
    closed_density = True

    def __init__(self, store, prefix, d_h, n_mix, owner_tag, rng, tau_floor=1e-8):
        super().__init__(prefix)
        self.tau_floor = tau_floor
        for name in ("W_p", "W_mu", "W_sigma"):
            store.add(prefix + name, glorot(rng, (n_mix, d_h)), owner_tag)
        for name in ("b_p", "b_mu", "b_sigma"):
            store.add(prefix + name, np.zeros(n_mix), owner_tag)

    def mixture(self, p, h):
        pre = self.prefix
        log_w = ops.log_softmax(ops.affine(h, p[pre + "W_p"], p[pre + "b_p"]), axis=-1)
        mu = ops.affine(h, p[pre + "W_mu"], p[pre + "b_mu"])
        log_sigma = ops.affine(h, p[pre + "W_sigma"], p[pre + "b_sigma"])
        return log_w, mu, log_sigma

    def _z(self, p, h, tau):
        log_w, mu, log_sigma = (_expand(n, tau) for n in self.mixture(p, h))
        log_tau = np.log(np.maximum(np.asarray(tau, dtype=np.float64), self.tau_floor))
        x = log_tau[..., None]
        z = ops.div(ops.sub(x, mu), ops.exp(log_sigma))
        return log_w, log_sigma, z, log_tau

    def log_density(self, p, h, tau, t_prev):
        log_w, log_sigma, z, log_tau = self._z(p, h, tau)
        comp = ops.sub(ops.sub(log_w, log_sigma), ops.mul(0.5, ops.square(z)))
        return ops.sub(ops.logsumexp(comp, axis=-1), log_tau + 0.5 * _LOG_2PI)

    def log_survival(self, p, h, tau, t_prev):
        log_w, _, z, _ = self._z(p, h, tau)
        out = ops.logsumexp(ops.add(log_w, ops.log_ndtr(ops.neg(z))), axis=-1)
        # F(0) = 0 exactly; the log-tau floor would otherwise leak mass of very wide components
        return ops.where(np.asarray(tau) > 0, out, 0.0)

    def compensator(self, p, h, tau, t_prev):
        return ops.neg(self.log_survival(p, h, tau, t_prev))

    def log_intensity(self, p, h, tau, t_prev):
        return ops.sub(self.log_density(p, h, tau, t_prev), self.log_survival(p, h, tau, t_prev))

    def intensity_grid(self, p, h, grid, t_prev):
        return ops.exp(self.log_intensity(p, h, grid, t_prev))

    def channel_intensity(self, p, h, tau, t_prev):
        lam = self.intensity_grid(p, h, tau, t_prev)
        return ops.reshape(lam, lam.shape + (1,))


class THPDecoder(TimeDecoder):
    """softplus(w_t (t - t_prev)/t_prev + W h + b) per channel, w_t = softplus(raw)."""
    family = "thp"

    def __init__(self, store, prefix, d_h, channels, owner_tag, rng, eps=1e-6):
        super().__init__(prefix)
        self.eps = eps
        self.channels = channels
        # softplus(w_t) starts at eps, so the first interval (t_prev floored at eps) has drift ~ tau
        store.add(prefix + "w_t", np.full(channels, np.log(np.expm1(eps))), owner_tag)
        store.add(prefix + "W", glorot(rng, (channels, d_h)), owner_tag)
        store.add(prefix + "b", np.zeros(channels), owner_tag)

    def channel_intensity(self, p, h, tau, t_prev):
        pre = self.prefix
        base = _expand(ops.affine(h, p[pre + "W"], p[pre + "b"]), tau)
        tau = np.asarray(tau, dtype=np.float64)
        denom = np.maximum(np.asarray(t_prev, dtype=np.float64), self.eps)
        ratio = tau / (denom if tau.ndim == 1 else denom[:, None])
        drift = ops.mul(ops.softplus(p[pre + "w_t"]), ratio[..., None])
        return ops.softplus(ops.add(base, drift))


class SAHPDecoder(TimeDecoder):
    """softplus(mu - (eta - mu) exp(-gamma tau)) per channel, with
    mu = gelu(W_mu h), eta = softplus(W_eta h), gamma = gelu(W_gamma h)."""
    family = "sahp"

    def __init__(self, store, prefix, d_h, channels, owner_tag, rng):
        super().__init__(prefix)
        self.channels = channels
        for name in ("W_mu", "W_eta", "W_gamma"):
            store.add(prefix + name, glorot(rng, (channels, d_h)), owner_tag)

    def rates(self, p, h):
        pre = self.prefix
        mu = ops.gelu(ops.affine(h, p[pre + "W_mu"]))
        eta = ops.softplus(ops.affine(h, p[pre + "W_eta"]))
        gamma = ops.gelu(ops.affine(h, p[pre + "W_gamma"]))
        return mu, eta, gamma

    def channel_intensity(self, p, h, tau, t_prev):
        mu, eta, gamma = (_expand(n, tau) for n in self.rates(p, h))
        t = np.asarray(tau, dtype=np.float64)[..., None]
        decay = ops.exp(ops.mul(ops.neg(gamma), t))
        return ops.softplus(ops.sub(mu, ops.mul(ops.sub(eta, mu), decay)))

    def negative_decay_fraction(self, p, h):
        """Share of (row, channel) pairs whose decay rate is negative (non-decaying intensity)."""
        _, _, gamma = self.rates(p, h)
        return float(np.mean(gamma.value < 0))


def _softplus_pair(x):
    return ops.softplus(x), ops.sigmoid(x)


def _sigmoid_pair(x):
    s = ops.sigmoid(x)
    return s, ops.mul(s, ops.sub(1.0, s))


# Monotone activations for the FNN hidden layer, as (value, derivative) graph pairs.
MONOTONE_ACTIVATIONS = {"softplus": _softplus_pair, "sigmoid": _sigmoid_pair}


class FNNDecoder(TimeDecoder):
    """Compensator network G(tau) = 1^T softplus(W act(w_t tau + W_h h + b_1) + b_2).

    W and w_t are softplus of free parameters, so G is nondecreasing in tau.
    The intensity dG/dtau is built by pushing the tangent d/dtau forward
    through the same layers, so it stays differentiable w.r.t. the parameters.
    """
    family = "fnn"
    closed_compensator = True
    closed_density = True

    def __init__(self, store, prefix, d_h, d_1, channels, owner_tag, rng, activation="softplus"):
        super().__init__(prefix)
        if activation not in MONOTONE_ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = MONOTONE_ACTIVATIONS[activation]
        self.channels = channels
        store.add(prefix + "W_h", glorot(rng, (d_1, d_h)), owner_tag)
        store.add(prefix + "b_1", np.zeros(d_1), owner_tag)
        store.add(prefix + "w_t", np.zeros(d_1), owner_tag)
        # softplus(W) ~ 1 / (d_1 * channels) keeps the initial ground rate of order one
        scale = rng.uniform(0.5, 1.5, size=(channels, d_1)) / (d_1 * channels)
        store.add(prefix + "W", np.log(np.expm1(scale)), owner_tag)
        store.add(prefix + "b_2", np.zeros(channels), owner_tag)

    def _hidden(self, p, h, tau):
        pre = self.prefix
        base = _expand(ops.affine(h, p[pre + "W_h"], p[pre + "b_1"]), tau)
        w_t = ops.softplus(p[pre + "w_t"])
        z = ops.add(base, ops.mul(w_t, np.asarray(tau, dtype=np.float64)[..., None]))
        return z, w_t, ops.softplus(p[pre + "W"])

    def channel_compensator(self, p, h, tau, t_prev):
        z, _, W = self._hidden(p, h, tau)
        a, _ = self.activation(z)
        g_tau = ops.softplus(ops.affine(a, W, p[self.prefix + "b_2"]))
        z0, _, _ = self._hidden(p, h, np.zeros_like(np.asarray(tau, dtype=np.float64)))
        a0, _ = self.activation(z0)
        g_0 = ops.softplus(ops.affine(a0, W, p[self.prefix + "b_2"]))
        return ops.sub(g_tau, g_0)

    def channel_intensity(self, p, h, tau, t_prev):
        z, w_t, W = self._hidden(p, h, tau)
        a, da = self.activation(z)
        u = ops.affine(a, W, p[self.prefix + "b_2"])
        du = ops.affine(ops.mul(da, w_t), W)
        return ops.mul(ops.sigmoid(u), du)

    def compensator(self, p, h, tau, t_prev):
        return ops.sum(self.channel_compensator(p, h, tau, t_prev), axis=-1)


# ---------------------------------------------------------------- scalar conveniences


def _rows(h):
    return ops.constant(np.asarray(h, dtype=np.float64).reshape(1, -1))


def rmtpp_intensity(h, tau, dec, p):
    return float(np.exp(dec.log_intensity(p, _rows(h), np.array([tau]), np.zeros(1)).value[0]))


def rmtpp_compensator(h, tau, dec, p):
    return float(dec.compensator(p, _rows(h), np.array([tau]), np.zeros(1)).value[0])


def lnm_density(h, tau, dec, p):
    """(density, cdf) at one gap."""
    from ..errors import NonPositiveTau
    if tau <= 0:
        raise NonPositiveTau(f"tau={tau}")
    hr, t = _rows(h), np.array([tau])
    f = np.exp(dec.log_density(p, hr, t, np.zeros(1)).value[0])
    F = -np.expm1(dec.log_survival(p, hr, t, np.zeros(1)).value[0])
    return float(f), float(F)


def thp_intensity(h, t, t_prev, dec, p):
    lam = dec.channel_intensity(p, _rows(h), np.array([t - t_prev]), np.array([t_prev]))
    return float(lam.value.sum())


def sahp_intensity(h, tau, dec, p):
    lam = dec.channel_intensity(p, _rows(h), np.array([tau]), np.zeros(1))
    return float(lam.value.sum())


def fnn_compensator(h, tau, dec, p):
    return float(dec.compensator(p, _rows(h), np.array([tau]), np.zeros(1)).value[0])


def fnn_intensity(h, tau, dec, p):
    return float(dec.channel_intensity(p, _rows(h), np.array([tau]), np.zeros(1)).value.sum())
