"""Model construction for every decoder family and sharing setting.

Settings:

* ``base``        the original parametrisation, one shared encoder.  RMTPP/LNM use a
                  time-independent mark head; THP/SAHP/FNN use one marked decoder
                  for both tasks.
* ``plus``        shared encoder, disjoint time decoder and time-dependent mark head.
* ``plusplus``    separate time and mark encoders as well.
* ``dup``         two copies of the marked decoder (ground intensity from one,
                  mark distribution from the other) on a shared encoder.
* ``dupdisjoint`` as ``dup`` but the whole model is duplicated.

For RMTPP and LNM the duplicated settings coincide with ``plus``/``plusplus``.
"""
from dataclasses import asdict, dataclass, replace

import numpy as np

from ..diffgraph import ParamStore, ops, param_count
from ..errors import UnsupportedForm, ZeroTotalIntensity
from ..predictive import PredictiveOutputs
from ..quadrature import QuadratureConfig, unit_rule
from .decoders import FNNDecoder, LNMDecoder, RMTPPDecoder, SAHPDecoder, THPDecoder
from .layers import EmbeddingConfig, GRUEncoder, MarkHead

FAMILIES = ("rmtpp", "lnm", "fnn", "thp", "sahp")
SETTINGS = ("base", "plus", "plusplus", "dup", "dupdisjoint")
MARKED_FAMILIES = ("fnn", "thp", "sahp")
DEFAULT_FORM = {"rmtpp": "density", "lnm": "density", "fnn": "compensator",
                "thp": "intensity", "sahp": "intensity"}
FORMS = ("density", "intensity", "compensator")


@dataclass
class ModelSpec:
    family: str
    setting: str
    num_marks: int
    d_t: int = 4
    d_k: int = 4
    d_h: int = 32
    d_h_mark: int = None
    d_1: int = 32
    n_mix: int = 32
    n_proj: int = 32
    activation: str = "softplus"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown decoder family {self.family!r}")
        if self.setting not in SETTINGS:
            raise ValueError(f"unknown setting {self.setting!r}")
        if self.num_marks < 1:
            raise ValueError("num_marks must be >= 1")

    @property
    def effective_setting(self):
        if self.family not in MARKED_FAMILIES:
            return {"dup": "plus", "dupdisjoint": "plusplus"}.get(self.setting, self.setting)
        return self.setting

    @property
    def disjoint_encoders(self):
        return self.effective_setting in ("plusplus", "dupdisjoint")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Batch:
    """A mini-batch laid out as rows r = i * B + b, i = 0 .. n_steps.

    Row (i, b) is the i-th event of sequence b when i < n_b, the survival
    window [t_n, T] when i == n_b, and padding otherwise.
    """
    step_times: np.ndarray
    step_marks: np.ndarray
    tau: np.ndarray
    t_prev: np.ndarray
    event_w: np.ndarray
    tail_w: np.ndarray
    target: np.ndarray
    seq_index: np.ndarray
    event_index: np.ndarray
    n_seqs: int

    @property
    def n_rows(self):
        return len(self.tau)

    @property
    def event_rows(self):
        return np.nonzero(self.event_w > 0)[0]

    @classmethod
    def from_sequences(cls, seqs):
        B = len(seqs)
        n_steps = max((len(s) for s in seqs), default=0)
        R = (n_steps + 1) * B
        step_times = np.zeros((n_steps, B))
        step_marks = np.zeros((n_steps, B), dtype=np.int64)
        tau = np.ones(R)
        t_prev = np.ones(R)
        event_w = np.zeros(R)
        tail_w = np.zeros(R)
        target = np.zeros(R, dtype=np.int64)
        seq_index = np.tile(np.arange(B), n_steps + 1)
        event_index = np.repeat(np.arange(n_steps + 1), B)
        for b, s in enumerate(seqs):
            n = len(s)
            step_times[:n, b] = s.times
            step_marks[:n, b] = s.marks
            prev = np.concatenate([[0.0], s.times])
            rows = np.arange(n + 1) * B + b
            tau[rows[:n]] = s.times - prev[:n]
            tau[rows[n]] = s.T - prev[n]
            t_prev[rows] = prev
            event_w[rows[:n]] = 1.0
            tail_w[rows[n]] = 1.0
            target[rows[:n]] = s.marks
        return cls(step_times, step_marks, tau, t_prev, event_w, tail_w, target,
                   seq_index, event_index, B)


def _make_decoder(spec, store, prefix, tag, rng, channels):
    fam = spec.family
    if fam == "rmtpp":
        return RMTPPDecoder(store, prefix, spec.d_h, tag, rng)
    if fam == "lnm":
        return LNMDecoder(store, prefix, spec.d_h, spec.n_mix, tag, rng)
    if fam == "thp":
        return THPDecoder(store, prefix, spec.d_h, channels, tag, rng)
    if fam == "sahp":
        return SAHPDecoder(store, prefix, spec.d_h, channels, tag, rng)
    return FNNDecoder(store, prefix, spec.d_h, spec.d_1, channels, tag, rng, spec.activation)


class MTPPModel:
    def __init__(self, spec, seed=0):
        self.spec = spec
        self.seed = seed
        self.store = store = ParamStore()
        rng = np.random.default_rng(seed)
        emb = EmbeddingConfig(spec.d_t, spec.d_k)
        K = spec.num_marks
        s = spec.effective_setting
        d_h_mark = spec.d_h_mark or spec.d_h
        marked = spec.family in MARKED_FAMILIES

        if spec.disjoint_encoders:
            self.encoders = {
                "time": GRUEncoder(store, "time.enc.", K, emb, spec.d_h, "time", rng),
                "mark": GRUEncoder(store, "mark.enc.", K, emb, d_h_mark, "mark", rng),
            }
        else:
            enc = GRUEncoder(store, "enc.", K, emb, spec.d_h, "shared", rng)
            self.encoders = {"time": enc, "mark": enc}
            d_h_mark = spec.d_h

        self.head = None
        if marked and s == "base":
            self.time_decoder = _make_decoder(spec, store, "dec.", "shared", rng, K)
            self.mark_decoder = self.time_decoder
        elif marked and s in ("dup", "dupdisjoint"):
            self.time_decoder = _make_decoder(spec, store, "time.dec.", "time", rng, K)
            self.mark_decoder = _make_decoder(replace(spec, d_h=d_h_mark), store, "mark.dec.", "mark", rng, K)
        else:
            split = spec.disjoint_encoders
            self.time_decoder = _make_decoder(spec, store, "time.dec." if split else "dec.", "time", rng,
                                              spec.n_proj)
            self.mark_decoder = None
            time_dependent = s != "base"
            self.head = MarkHead(store, "mark.head." if split else "head.", d_h_mark, spec.d_1, K, "mark",
                                 rng, time_dependent=time_dependent)

    # ------------------------------------------------------------ structure

    @property
    def default_form(self):
        return DEFAULT_FORM[self.spec.family]

    @property
    def num_marks(self):
        return self.spec.num_marks

    def shared_blocks(self):
        return self.store.names({"shared"})

    def component_of(self, name):
        return name.split(".")[-2]

    def param_split(self):
        total = param_count(self.store)
        enc = sum(b.size for b in self.store if self.component_of(b.name) == "enc")
        return {"total": total, "encoder": enc, "decoder": total - enc}

    # ------------------------------------------------------------ forward pieces

    def encode(self, p, batch):
        cache = {}
        out = {}
        for role, enc in self.encoders.items():
            if id(enc) not in cache:
                cache[id(enc)] = enc(p, batch.step_times, batch.step_marks)
            out[role] = cache[id(enc)]
        return out

    def time_terms(self, p, h, tau, t_prev, form=None, quad=None):
        """(log f*(tau), log S*(tau), extras) per row under the requested NLL form."""
        form = form or self.default_form
        quad = quad or QuadratureConfig()
        dec = self.time_decoder
        extras = {}
        if form == "density":
            if not dec.closed_density:
                raise UnsupportedForm(f"{dec.family} has no closed-form density")
            return dec.log_density(p, h, tau, t_prev), dec.log_survival(p, h, tau, t_prev), extras
        if form == "compensator":
            if not dec.closed_compensator:
                raise UnsupportedForm(f"{dec.family} has no closed-form compensator")
            log_lam = dec.log_intensity(p, h, tau, t_prev)
            lam_int = dec.compensator(p, h, tau, t_prev)
            extras["log_intensity"] = log_lam
            return ops.sub(log_lam, lam_int), ops.neg(lam_int), extras
        if form == "intensity":
            log_lam = dec.log_intensity(p, h, tau, t_prev)
            lam_int, stderr = self._integrate(p, h, tau, t_prev, quad)
            extras["log_intensity"] = log_lam
            extras["stderr"] = stderr
            return ops.sub(log_lam, lam_int), ops.neg(lam_int), extras
        raise ValueError(f"unknown NLL form {form!r}")

    def _integrate(self, p, h, tau, t_prev, quad):
        tau = np.asarray(tau, dtype=np.float64)
        u, w = unit_rule(quad, len(tau))
        grid = tau[:, None] * u
        lam = self.time_decoder.intensity_grid(p, h, grid, t_prev)
        total = ops.sum(ops.mul(lam, tau[:, None] * w), axis=1)
        stderr = np.zeros(len(tau))
        if quad.method == "monte_carlo":
            stderr = tau * lam.value.std(axis=1, ddof=1) / np.sqrt(quad.nodes)
        return total, stderr

    def log_survival(self, p, h, tau, t_prev, quad=None):
        """log(1 - F*(tau)): analytic where the decoder allows, else by quadrature."""
        dec = self.time_decoder
        if dec.closed_compensator:
            return dec.log_survival(p, h, tau, t_prev)
        lam_int, _ = self._integrate(p, h, tau, t_prev, quad or QuadratureConfig())
        return ops.neg(lam_int)

    def mark_log_probs(self, p, h, tau, t_prev):
        if self.head is not None:
            return self.head.log_probs(p, h, tau)
        log_lam = self.mark_decoder.log_channel_intensity(p, h, tau, t_prev)
        return ops.log_softmax(log_lam, axis=-1)

    def forward(self, batch, form=None, quad=None, p=None):
        p = self.store.leaves() if p is None else p
        H = self.encode(p, batch)
        log_f, log_S, extras = self.time_terms(p, H["time"], batch.tau, batch.t_prev, form, quad)
        log_pm = self.mark_log_probs(p, H["mark"], batch.tau, batch.t_prev)
        return RowOutputs(log_f, log_S, log_pm, extras)

    # ------------------------------------------------------------ prediction

    def predictive(self, dataset, quad=None, batch_size=64, chunk=4096):
        """Teacher-forced predictive quantities for every event of ``dataset``."""
        quad = quad or QuadratureConfig()
        p = {n: ops.constant(b.values) for n, b in self.store.blocks.items()}
        hs, taus, tprevs, marks, probs, seq_idx, ev_idx = [], [], [], [], [], [], []
        for start in range(0, len(dataset), batch_size):
            seqs = dataset.sequences[start:start + batch_size]
            batch = Batch.from_sequences(seqs)
            rows = batch.event_rows
            if len(rows) == 0:
                continue
            H = self.encode(p, batch)
            h_t = H["time"].value[rows]
            h_m = H["mark"].value[rows]
            tau, t_prev = batch.tau[rows], batch.t_prev[rows]
            lp = self.mark_log_probs(p, ops.constant(h_m), tau, t_prev).value
            hs.append(h_t)
            taus.append(tau)
            tprevs.append(t_prev)
            marks.append(batch.target[rows])
            probs.append(np.exp(lp))
            seq_idx.append(batch.seq_index[rows] + start)
            ev_idx.append(batch.event_index[rows])
        K = self.num_marks
        h_all = np.concatenate(hs) if hs else np.zeros((0, self.spec.d_h))
        tp_all = np.concatenate(tprevs) if tprevs else np.zeros(0)

        def log_survival(q):
            q = np.asarray(q, dtype=np.float64)
            out = np.empty(len(q))
            for a in range(0, len(q), chunk):
                sl = slice(a, a + chunk)
                out[sl] = self.log_survival(p, ops.constant(h_all[sl]), q[sl], tp_all[sl], quad).value
            return out

        cat = (lambda xs, shape=(0,): np.concatenate(xs) if xs else np.zeros(shape))
        return PredictiveOutputs(
            tau=cat(taus), marks=cat(marks).astype(np.int64), probs=cat(probs, (0, K)),
            log_survival=log_survival, seq_index=cat(seq_idx).astype(np.int64),
            event_index=cat(ev_idx).astype(np.int64))


@dataclass
class RowOutputs:
    log_f: object
    log_S: object
    log_pm: object
    extras: dict


def build_model(spec, seed=0):
    return MTPPModel(spec, seed)


def duplicated_split(lam_time, lam_mark):
    """Ground intensity from the time copy and the mark PMF from the mark copy.

    Both arguments are marked intensities with marks on the last axis.
    """
    lam_time = np.asarray(lam_time, dtype=np.float64)
    lam_mark = np.asarray(lam_mark, dtype=np.float64)
    total = lam_mark.sum(axis=-1, keepdims=True)
    if np.any(total <= 0):
        raise ZeroTotalIntensity("all marked intensities vanish at a query time")
    return lam_time.sum(axis=-1), lam_mark / total


def survival(model, h, delta, t_prev=0.0, quad=None):
    """1 - F*(delta) for one time-history vector."""
    p = {n: ops.constant(b.values) for n, b in model.store.blocks.items()}
    h = ops.constant(np.asarray(h, dtype=np.float64).reshape(1, -1))
    if delta == 0:
        return 1.0
    return float(np.exp(model.log_survival(p, h, np.array([float(delta)]), np.array([float(t_prev)]),
                                           quad).value[0]))


def duplicate_from_shared(shared, setting="dupdisjoint"):
    """Duplicated model whose time and mark copies both start from ``shared``'s parameters."""
    spec = replace(shared.spec, setting=setting)
    dup = MTPPModel(spec, seed=shared.seed)
    for b in shared.store:
        for role in ("time", "mark"):
            name = f"{role}.{b.name}"
            if name in dup.store:
                dup.store.set(name, b.values)
            elif b.name in dup.store:
                dup.store.set(b.name, b.values)
    return dup


def balance_widths(spec, target, lo=1, hi=256):
    """Spec with the encoder width d_h chosen so the parameter count is closest to ``target``."""
    best, best_gap = spec, None
    for d_h in range(lo, hi + 1):
        cand = replace(spec, d_h=d_h, d_h_mark=None)
        gap = abs(param_count(MTPPModel(cand).store) - target)
        if best_gap is None or gap < best_gap:
            best, best_gap = cand, gap
    return best
