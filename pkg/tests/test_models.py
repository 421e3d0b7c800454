import math

import numpy as np
import pytest
from scipy import integrate as sci_integrate
from scipy.stats import norm

from tppsplit.diffgraph import ParamStore, grad_check, ops, param_count
from tppsplit.errors import NonPositiveTau, UnsupportedForm, ZeroTotalIntensity
from tppsplit.models import (
    FAMILIES,
    SETTINGS,
    Batch,
    EmbeddingConfig,
    FNNDecoder,
    GRUEncoder,
    LNMDecoder,
    MarkHead,
    ModelSpec,
    MTPPModel,
    RMTPPDecoder,
    SAHPDecoder,
    THPDecoder,
    balance_widths,
    duplicate_from_shared,
    duplicated_split,
    embed_event,
    encode_history,
    fnn_compensator,
    fnn_intensity,
    lnm_density,
    mark_pmf,
    rmtpp_compensator,
    rmtpp_intensity,
    sahp_intensity,
    survival,
    thp_intensity,
)
from tppsplit.quadrature import QuadratureConfig, integrate

from conftest import jitter, tiny_model

RNG = np.random.default_rng


def inv_softplus(y):
    return math.log(math.expm1(y))


def zero_all(store):
    for b in store:
        store.set(b.name, np.zeros_like(b.values))


# ---------------------------------------------------------------- embeddings and encoder


def test_embedding_examples():
    cfg = EmbeddingConfig(4, 2)
    table = np.array([[0.1, 0.2], [0.3, 0.4]])
    e0 = embed_event(0.0, 1, cfg, table)
    np.testing.assert_array_equal(e0, [0, 1, 0, 1, 0.3, 0.4])
    e = embed_event(np.pi / 2, 0, EmbeddingConfig(2, 2), table)
    np.testing.assert_allclose(e, [1, 0, 0.1, 0.2], atol=1e-15)
    a, b = embed_event(3.0, 0, cfg, table), embed_event(3.0, 1, cfg, table)
    np.testing.assert_array_equal(a[:4], b[:4])
    assert not np.array_equal(a[4:], b[4:])
    assert EmbeddingConfig().d_e == 8


def _encoder(d_h=3, K=2, seed=0):
    store = ParamStore()
    enc = GRUEncoder(store, "enc.", K, EmbeddingConfig(2, 2), d_h, "shared", RNG(seed))
    return store, enc


def test_encode_history_empty_and_zero_weights():
    store, enc = _encoder()
    p = store.leaves()
    np.testing.assert_array_equal(encode_history([], [], enc, p), np.zeros(3))
    zero_all(store)
    np.testing.assert_array_equal(encode_history([0.5, 1.2], [0, 1], enc, store.leaves()), np.zeros(3))


def test_encode_history_matches_cell_oracle():
    store, enc = _encoder(seed=4)
    for b in store:
        store.set(b.name, RNG(1).normal(size=b.values.shape))
    p = store.leaves()
    cfg = enc.emb
    W_ih, b_ih, W_hh, b_hh = (store["enc." + n].values for n in ("W_ih", "b_ih", "W_hh", "b_hh"))
    table = store["enc.emb"].values

    def cell(h, x):
        sig = lambda v: 1 / (1 + np.exp(-v))  # noqa: E731
        gx, gh = W_ih @ x + b_ih, W_hh @ h + b_hh
        H = len(h)
        r, z = sig(gx[:H] + gh[:H]), sig(gx[H:2 * H] + gh[H:2 * H])
        n = np.tanh(gx[2 * H:] + r * gh[2 * H:])
        return (1 - z) * n + z * h

    h = np.zeros(3)
    for t, k in [(0.4, 1), (1.3, 0)]:
        h = cell(h, embed_event(t, k, cfg, table))
    np.testing.assert_allclose(encode_history([0.4, 1.3], [1, 0], enc, p), h, rtol=1e-12)


# ---------------------------------------------------------------- mark head


def _head(time_dependent=True, K=3, seed=0):
    store = ParamStore()
    head = MarkHead(store, "head.", 3, 4, K, "mark", RNG(seed), time_dependent=time_dependent)
    return store, head


def test_mark_pmf_uniform_when_zero():
    store, head = _head()
    zero_all(store)
    np.testing.assert_allclose(mark_pmf(RNG(0).normal(size=3), 0.7, head, store.leaves()), [1 / 3] * 3)


def test_mark_pmf_time_independent_constant():
    store, head = _head(time_dependent=False)
    jitter(type("M", (), {"store": store})(), 0.5)
    h = RNG(2).normal(size=3)
    p = store.leaves()
    np.testing.assert_array_equal(mark_pmf(h, 0.1, head, p), mark_pmf(h, 9.0, head, p))


def test_mark_pmf_depends_on_tau_and_is_differentiable():
    store, head = _head()
    jitter(type("M", (), {"store": store})(), 0.5, seed=3)
    h = RNG(2).normal(size=3)
    p = store.leaves()
    a, b = mark_pmf(h, 0.1, head, p), mark_pmf(h, 2.0, head, p)
    assert np.abs(a - b).max() > 1e-6
    assert a.sum() == pytest.approx(1.0, abs=1e-12)
    hn = ops.constant(h.reshape(1, -1))
    rep = grad_check(lambda s: ops.index(head.log_probs(s.leaves(), hn, np.array([0.3])), (0, 1)), store)
    assert rep.passed
    with pytest.raises(NonPositiveTau):
        head.log_probs(p, hn, np.array([-0.1]))


# ---------------------------------------------------------------- decoders


def _dec(cls, *args, d_h=3, seed=0, **kw):
    store = ParamStore()
    dec = cls(store, "dec.", d_h, *args, "time", RNG(seed), **kw)
    return store, dec


def test_rmtpp_examples():
    store, dec = _dec(RMTPPDecoder)
    zero_all(store)
    store.set("dec.w_t", [inv_softplus(1.0)])
    p = store.leaves()
    h = np.zeros(3)
    assert rmtpp_intensity(h, 0.0, dec, p) == pytest.approx(1.0, abs=1e-12)
    assert rmtpp_compensator(h, math.log(2), dec, p) == pytest.approx(1.0, abs=1e-12)
    store.set("dec.w_t", [-25.0])
    store.set("dec.b", [0.3])
    p = store.leaves()
    tau = 1.7
    quad, _ = integrate(lambda s: np.array([rmtpp_intensity(h, x, dec, p) for x in s]), 0, tau)
    assert rmtpp_compensator(h, tau, dec, p) == pytest.approx(math.exp(0.3) * tau, rel=1e-6)
    assert rmtpp_compensator(h, tau, dec, p) == pytest.approx(quad, rel=1e-6)


def test_rmtpp_clamp_is_counted():
    store, dec = _dec(RMTPPDecoder)
    store.set("dec.b", [100.0])
    rmtpp_intensity(np.zeros(3), 0.5, dec, store.leaves())
    assert dec.diagnostics["clamped"] > 0


def test_lnm_examples():
    store, dec = _dec(LNMDecoder, 1)
    zero_all(store)
    p = store.leaves()
    f, F = lnm_density(np.zeros(3), 1.0, dec, p)
    assert f == pytest.approx(1 / math.sqrt(2 * math.pi), abs=1e-12)
    assert F == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(NonPositiveTau):
        lnm_density(np.zeros(3), 0.0, dec, p)
    store2, dec2 = _dec(LNMDecoder, 3, seed=2)
    jitter(type("M", (), {"store": store2})(), 0.5)
    h = RNG(0).normal(size=3)
    p2 = store2.leaves()
    total, _ = sci_integrate.quad(lambda t: lnm_density(h, t, dec2, p2)[0], 0, np.inf, limit=200)
    assert total == pytest.approx(1.0, abs=1e-6)


def test_lnm_degenerate_mixture():
    store, dec = _dec(LNMDecoder, 2)
    zero_all(store)
    store.set("dec.b_mu", [0.4, 0.4])
    store.set("dec.b_sigma", [math.log(0.7)] * 2)
    f, F = lnm_density(np.zeros(3), 1.3, dec, store.leaves())
    from scipy.stats import lognorm
    assert f == pytest.approx(lognorm.pdf(1.3, 0.7, scale=math.exp(0.4)), rel=1e-12)
    assert F == pytest.approx(lognorm.cdf(1.3, 0.7, scale=math.exp(0.4)), rel=1e-12)


def test_thp_examples():
    store, dec = _dec(THPDecoder, 2)
    zero_all(store)
    p = store.leaves()
    assert thp_intensity(np.zeros(3), 2.0, 2.0, dec, p) == pytest.approx(2 * math.log(2), abs=1e-14)
    jitter(type("M", (), {"store": store})(), 0.5)
    p = store.leaves()
    h = RNG(0).normal(size=3)
    lam = [thp_intensity(h, t, 1.5, dec, p) for t in np.linspace(1.5, 4, 20)]
    assert np.all(np.diff(lam) >= 0)
    assert np.isfinite(thp_intensity(h, 0.3, 0.0, dec, p))


def test_sahp_examples():
    store, dec = _dec(SAHPDecoder, 2, seed=1)
    p = store.leaves()
    h = RNG(3).normal(size=3)
    hn = ops.constant(h.reshape(1, -1))
    mu, eta, gamma = (n.value[0] for n in dec.rates(p, hn))
    sp = lambda x: np.logaddexp(0, x)  # noqa: E731
    assert sahp_intensity(h, 0.0, dec, p) == pytest.approx(sp(2 * mu - eta).sum(), rel=1e-12)
    if np.all(gamma > 0):
        assert sahp_intensity(h, 1e4, dec, p) == pytest.approx(sp(mu).sum(), rel=1e-9)
    store.set("dec.W_gamma", -np.abs(store["dec.W_gamma"].values) * 0 - 1.0)
    h_pos = np.abs(h)
    p = store.leaves()
    assert dec.negative_decay_fraction(p, ops.constant(h_pos.reshape(1, -1))) > 0
    assert sahp_intensity(h_pos, 3.0, dec, p) > 0


def test_fnn_examples():
    store, dec = _dec(FNNDecoder, 4, 2)
    for b in store:
        store.set(b.name, -np.abs(RNG(0).normal(size=b.values.shape)) - 0.5)
    p = store.leaves()
    h = RNG(1).normal(size=3)
    assert fnn_compensator(h, 0.0, dec, p) == 0.0
    step = 1e-5
    for tau in (0.3, 1.0, 2.5):
        fd = (fnn_compensator(h, tau + step, dec, p) - fnn_compensator(h, tau - step, dec, p)) / (2 * step)
        assert fnn_intensity(h, tau, dec, p) == pytest.approx(fd, rel=1e-4)
    grid = np.linspace(0, 5, 100)
    assert np.all(np.diff([fnn_compensator(h, t, dec, p) for t in grid]) >= 0)


def test_fnn_sigmoid_activation():
    store, dec = _dec(FNNDecoder, 4, 2, activation="sigmoid")
    p = store.leaves()
    h = RNG(1).normal(size=3)
    fd = (fnn_compensator(h, 1 + 1e-5, dec, p) - fnn_compensator(h, 1 - 1e-5, dec, p)) / 2e-5
    assert fnn_intensity(h, 1.0, dec, p) == pytest.approx(fd, rel=1e-4)
    with pytest.raises(ValueError):
        _dec(FNNDecoder, 4, 2, activation="relu")


@pytest.mark.parametrize("family", FAMILIES)
def test_decoder_invariants(family):
    m = jitter(tiny_model(family, "plus", d_h=4), 0.3, seed=5)
    p = {n: ops.constant(b.values) for n, b in m.store.blocks.items()}
    h = ops.constant(RNG(0).normal(size=(3, 4)))
    t_prev = np.array([0.0, 1.0, 2.5])
    dec = m.time_decoder
    grid = np.tile(np.linspace(0, 5, 100), (3, 1))
    lam = dec.intensity_grid(p, h, grid[:, 1:], t_prev).value
    assert np.all(lam > 0)
    S = np.stack([m.log_survival(p, h, grid[:, j], t_prev).value for j in range(100)], axis=1)
    np.testing.assert_allclose(S[:, 0], 0.0, atol=1e-12)
    assert np.all(np.diff(-S, axis=1) >= -1e-12)


def test_rmtpp_density_identity():
    m = jitter(tiny_model("rmtpp", "plus", d_h=4), 0.3)
    p = {n: ops.constant(b.values) for n, b in m.store.blocks.items()}
    h = ops.constant(RNG(0).normal(size=(4, 4)))
    tau = np.array([0.1, 0.5, 1.0, 3.0])
    dec = m.time_decoder
    f = np.exp(dec.log_density(p, h, tau, tau).value)
    lam = np.exp(dec.log_intensity(p, h, tau, tau).value)
    np.testing.assert_allclose(f, lam * np.exp(-dec.compensator(p, h, tau, tau).value), rtol=1e-12)


# ---------------------------------------------------------------- duplication and survival


def test_duplicated_split_examples():
    ground, pmf = duplicated_split([[2.0, 2.0]], [[1.0, 3.0]])
    np.testing.assert_allclose(pmf, [[0.25, 0.75]])
    assert ground[0] == 4.0
    lam = RNG(0).uniform(0.1, 2, size=(10, 3))
    g, p = duplicated_split(lam, lam)
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    np.testing.assert_allclose(p, lam / g[:, None])
    with pytest.raises(ZeroTotalIntensity):
        duplicated_split([[1.0, 1.0]], [[0.0, 0.0]])


@pytest.mark.parametrize("family", ["fnn", "thp", "sahp"])
def test_identical_copies_reproduce_base_marks(family, small_ds):
    base = jitter(tiny_model(family, "base"), 0.2)
    for setting in ("dup", "dupdisjoint"):
        dup = duplicate_from_shared(base, setting)
        a = base.predictive(small_ds).probs
        b = dup.predictive(small_ds).probs
        np.testing.assert_array_equal(a, b)


def test_survival_examples():
    m = tiny_model("rmtpp", "plus")
    zero_all(m.store)
    m.store.set("dec.w_t", [-40.0])
    m.store.set("dec.b", [math.log(2.0)])
    h = np.zeros(3)
    assert survival(m, h, 0.0) == 1.0
    assert survival(m, h, 0.5) == pytest.approx(math.exp(-1), rel=1e-12)
    m = tiny_model("lnm", "plus", n_mix=1)
    zero_all(m.store)
    m.store.set("dec.b_mu", [0.2])
    m.store.set("dec.b_sigma", [math.log(0.8)])
    quad, _ = integrate(lambda s: np.array([lnm_density(h, x, m.time_decoder, m.store.leaves())[0] for x in s]),
                        1e-9, 1.7, QuadratureConfig(nodes=200))
    assert survival(m, h, 1.7) == pytest.approx(1 - norm.cdf((math.log(1.7) - 0.2) / 0.8), rel=1e-12)
    assert survival(m, h, 1.7) == pytest.approx(1 - quad, abs=1e-6)
    m = jitter(tiny_model("thp", "plus"), 0.3)
    Lam, _ = integrate(lambda s: np.array([thp_intensity(h, x, 0.0, m.time_decoder, m.store.leaves()) for x in s]),
                       0, 0.8, QuadratureConfig(nodes=64))
    assert survival(m, h, 0.8) == pytest.approx(math.exp(-Lam), rel=1e-8)


# ---------------------------------------------------------------- assembly


def test_setting_structure():
    for family in FAMILIES:
        for setting in SETTINGS:
            m = tiny_model(family, setting)
            shared = m.store.names({"shared"})
            if m.spec.disjoint_encoders:
                assert shared == []
            else:
                assert shared and all(n.startswith("enc.") or n.startswith("dec.") for n in shared)
    assert tiny_model("rmtpp", "dup").store.names() == tiny_model("rmtpp", "plus").store.names()
    m = tiny_model("sahp", "dupdisjoint")
    assert set(m.store.names({"time"})) == {n for n in m.store.names() if n.startswith("time.")}
    assert param_count(m.store, {"time"}) + param_count(m.store, {"mark"}) == param_count(m.store)


def test_spec_round_trip_and_validation():
    spec = ModelSpec("lnm", "plusplus", 4, d_h=7)
    assert ModelSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ValueError):
        ModelSpec("hawkes", "base", 2)
    with pytest.raises(ValueError):
        ModelSpec("lnm", "triple", 2)


def test_balance_widths():
    base = MTPPModel(ModelSpec("rmtpp", "base", 2))
    spec = balance_widths(ModelSpec("rmtpp", "plusplus", 2), param_count(base.store), hi=64)
    pp = MTPPModel(spec)
    assert abs(param_count(pp.store) - param_count(base.store)) / param_count(base.store) < 0.10


def test_batch_layout(small_ds):
    seqs = small_ds.sequences[:3]
    b = Batch.from_sequences(seqs)
    assert b.event_w.sum() == sum(len(s) for s in seqs)
    assert b.tail_w.sum() == 3
    for j, s in enumerate(seqs):
        rows = np.nonzero((b.seq_index == j) & ((b.event_w + b.tail_w) > 0))[0]
        assert b.tau[rows].sum() == pytest.approx(s.T)


def test_unsupported_form():
    m = tiny_model("thp", "plus")
    with pytest.raises(UnsupportedForm):
        m.forward(Batch.from_sequences([]), "density") if False else m.time_terms(
            m.store.leaves(), ops.constant(np.zeros((1, 3))), np.ones(1), np.zeros(1), "compensator")
