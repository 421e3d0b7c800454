"""Marked event sequences: data model, JSONL I/O, preprocessing, splits and a
multivariate exponential Hawkes simulator used as synthetic ground truth."""
import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import (
    EmptyDataset,
    MarkOutOfRange,
    NonIncreasingTimes,
    ParseError,
    TooFewSequences,
    UnstableProcess,
)


class Event(NamedTuple):
    t: float
    k: int


@dataclass
class EventSequence:
    times: np.ndarray
    marks: np.ndarray
    T: float
    seq_id: str = ""

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        self.marks = np.asarray(self.marks, dtype=np.int64).reshape(-1)
        self.T = float(self.T)
        if self.times.shape != self.marks.shape:
            raise ValueError("times and marks differ in length")

    @classmethod
    def from_events(cls, events, T, seq_id=""):
        events = list(events)
        return cls([e[0] for e in events], [e[1] for e in events], T, seq_id)

    def __len__(self):
        return len(self.times)

    @property
    def events(self):
        return [Event(float(t), int(k)) for t, k in zip(self.times, self.marks)]

    @property
    def inter_arrivals(self):
        """tau_i = t_i - t_{i-1} with t_0 = 0."""
        return np.diff(self.times, prepend=0.0)

    def validate(self, num_marks):
        t, k = self.times, self.marks
        if len(t) and t[0] < 0:
            raise NonIncreasingTimes(self.seq_id, 0)
        bad = np.nonzero(np.diff(t) <= 0)[0]
        if len(bad):
            raise NonIncreasingTimes(self.seq_id, int(bad[0]) + 1)
        if len(t) and t[-1] > self.T:
            raise NonIncreasingTimes(self.seq_id, len(t) - 1)
        out = np.nonzero((k < 0) | (k >= num_marks))[0]
        if len(out):
            i = int(out[0])
            raise MarkOutOfRange(self.seq_id, i, int(k[i]), num_marks)


@dataclass
class Dataset:
    sequences: list
    num_marks: int
    name: str = ""

    def __len__(self):
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    def __getitem__(self, i):
        return self.sequences[i]

    @property
    def n_events(self):
        return sum(len(s) for s in self.sequences)

    def validate(self, num_marks=None):
        """Check every sequence against ``num_marks`` (default: the dataset's own K)."""
        k = self.num_marks if num_marks is None else num_marks
        for s in self.sequences:
            s.validate(k)
        return self

    def subset(self, indices, name=None):
        return Dataset([self.sequences[i] for i in indices], self.num_marks, name or self.name)


@dataclass
class SplitSpec:
    train: float = 0.6
    val: float = 0.2
    test: float = 0.2
    seed: int = 0

    def __post_init__(self):
        fr = (self.train, self.val, self.test)
        if min(fr) <= 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be positive and sum to 1, got {fr}")


# ---------------------------------------------------------------- I/O


def load_dataset(path, format="jsonl", num_marks=None, name=None):
    """Read one sequence per line: {"seq_id", "T", "events": [{"t", "k"}, ...]}.

    Times must already be strictly increasing; nothing is re-sorted.  When
    ``num_marks`` is omitted it is inferred as max mark + 1.
    """
    if format != "jsonl":
        raise ValueError(f"unsupported format {format!r}")
    seqs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            try:
                rec = json.loads(line)
                events = rec["events"]
                seq = EventSequence([float(e["t"]) for e in events], [int(e["k"]) for e in events],
                                    float(rec["T"]), str(rec.get("seq_id", lineno)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(lineno, str(exc)) from exc
            seqs.append(seq)
    if num_marks is None:
        num_marks = 1 + max((int(s.marks.max()) for s in seqs if len(s)), default=0)
    ds = Dataset(seqs, int(num_marks), name or str(path))
    return ds.validate()


def dumps_sequence(seq):
    events = [{"t": float(t), "k": int(k)} for t, k in zip(seq.times, seq.marks)]
    return json.dumps({"seq_id": seq.seq_id, "T": seq.T, "events": events})


def save_dataset(ds, path):
    with open(path, "w", encoding="utf-8") as fh:
        for s in ds.sequences:
            fh.write(dumps_sequence(s) + "\n")


# ---------------------------------------------------------------- preprocessing


def rescale_times(ds, lo=0.0, hi=10.0):
    """Affine map of [0, max T] onto [lo, hi], applied to every time and horizon."""
    if not hi > lo >= 0:
        raise ValueError("need hi > lo >= 0")
    if ds.n_events == 0:
        raise EmptyDataset("cannot rescale a dataset without events")
    t_max = max(s.T for s in ds)
    scale = (hi - lo) / t_max
    seqs = [EventSequence(lo + s.times * scale, s.marks.copy(), lo + s.T * scale, s.seq_id) for s in ds]
    return Dataset(seqs, ds.num_marks, ds.name)


def filter_top_k_marks(ds, k_max):
    """Keep events of the ``k_max`` most frequent marks, relabelled by rank.

    Ties in frequency go to the lower original mark id.  Sequences that lose all
    their events are kept (empty).
    """
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    all_marks = np.concatenate([s.marks for s in ds]) if len(ds) else np.zeros(0, dtype=np.int64)
    ids, counts = np.unique(all_marks, return_counts=True)
    order = sorted(zip(ids.tolist(), counts.tolist()), key=lambda ic: (-ic[1], ic[0]))
    kept = [i for i, _ in order[:k_max]]
    relabel = {old: new for new, old in enumerate(kept)}
    seqs = []
    for s in ds:
        keep = np.isin(s.marks, kept)
        marks = np.array([relabel[m] for m in s.marks[keep].tolist()], dtype=np.int64)
        seqs.append(EventSequence(s.times[keep], marks, s.T, s.seq_id))
    return Dataset(seqs, len(kept), ds.name)


def split_sizes(n, fractions):
    """Floor each share, then hand leftovers to the largest remainders (ties: earlier fold)."""
    raw = [n * f for f in fractions]
    sizes = [int(np.floor(r + 1e-9)) for r in raw]
    left = n - sum(sizes)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[:left]:
        sizes[i] += 1
    return sizes


def split_dataset(ds, spec):
    n_train, n_val, n_test = split_sizes(len(ds), (spec.train, spec.val, spec.test))
    if n_train == 0:
        raise TooFewSequences(f"{len(ds)} sequences leave the train split empty")
    perm = np.random.default_rng(spec.seed).permutation(len(ds))
    parts = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
    return tuple(ds.subset(sorted(p.tolist()), f"{ds.name}:{tag}")
                 for p, tag in zip(parts, ("train", "val", "test")))


# ---------------------------------------------------------------- Hawkes


@dataclass
class HawkesConfig:
    """Multivariate Hawkes process with kernels alpha[k, m] * exp(-beta[k, m] s).

    ``alpha[k, m]`` is the jump in the intensity of mark k caused by an event
    of mark m.
    """
    mu: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    T: float = 10.0
    K: int = field(default=None)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        K = len(self.mu)
        self.alpha = np.asarray(self.alpha, dtype=np.float64).reshape(K, K)
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(K, K)
        if self.K is not None and self.K != K:
            raise ValueError(f"K={self.K} but mu has {K} entries")
        self.K = K
        if np.any(self.mu < 0) or np.any(self.alpha < 0) or np.any(self.beta <= 0) or self.T <= 0:
            raise ValueError("need mu >= 0, alpha >= 0, beta > 0, T > 0")
        rho = self.spectral_radius
        if rho >= 1.0:
            raise UnstableProcess(f"spectral radius of alpha/beta is {rho:.4f} >= 1")

    @property
    def spectral_radius(self):
        return float(np.max(np.abs(np.linalg.eigvals(self.alpha / self.beta))))

    def stationary_rates(self):
        """Per-mark long-run rates (I - alpha/beta)^-1 mu."""
        return np.linalg.solve(np.eye(self.K) - self.alpha / self.beta, self.mu)

    def to_dict(self):
        return {"mu": self.mu.tolist(), "alpha": self.alpha.tolist(),
                "beta": self.beta.tolist(), "T": self.T}


def _thin_one(cfg, rng):
    mu, alpha, beta, T = cfg.mu, cfg.alpha, cfg.beta, cfg.T
    K = cfg.K
    excite = np.zeros((K, K))
    t = 0.0
    times, marks = [], []
    while True:
        # intensities only decay between events, so the current total bounds the future
        lam_bar = mu.sum() + (alpha * excite).sum()
        if lam_bar <= 0.0:
            break
        w = rng.exponential(1.0 / lam_bar)
        t += w
        if t > T:
            break
        excite *= np.exp(-beta * w)
        lam = mu + (alpha * excite).sum(axis=1)
        if rng.uniform() * lam_bar <= lam.sum():
            k = int(np.searchsorted(np.cumsum(lam), rng.uniform() * lam.sum(), side="right"))
            k = min(k, K - 1)
            times.append(t)
            marks.append(k)
            excite[:, k] += 1.0
    return times, marks


def simulate_hawkes(cfg, n_seq, seed):
    """Ogata thinning, one independent child RNG stream per sequence."""
    children = np.random.SeedSequence(seed).spawn(n_seq)
    seqs = []
    for i, child in enumerate(children):
        times, marks = _thin_one(cfg, np.random.default_rng(child))
        seqs.append(EventSequence(times, marks, cfg.T, f"hawkes-{seed}-{i}"))
    return Dataset(seqs, cfg.K, f"hawkes(seed={seed})")


class HawkesProcess:
    """Closed-form conditional quantities of a known Hawkes process.

    Used as the ground-truth predictive model in calibration checks.
    """

    def __init__(self, cfg):
        self.cfg = cfg

    def excitation_before_events(self, seq):
        """Excitation state A[i, k, m] just after event i-1 (A[0] = 0), plus one tail row."""
        cfg = self.cfg
        n = len(seq)
        A = np.zeros((n + 1, cfg.K, cfg.K))
        cur = np.zeros((cfg.K, cfg.K))
        prev = 0.0
        for i in range(n):
            A[i] = cur
            dt = seq.times[i] - prev
            cur = cur * np.exp(-cfg.beta * dt)
            cur[:, seq.marks[i]] += 1.0
            prev = seq.times[i]
        A[n] = cur
        return A

    def marked_intensity(self, excite, s):
        """lambda_k(t_prev + s) for states ``excite`` (N, K, K) and gaps ``s`` (N,)."""
        cfg = self.cfg
        s = np.asarray(s, dtype=np.float64)
        decay = np.exp(-cfg.beta[None] * s[:, None, None])
        return cfg.mu[None] + (cfg.alpha[None] * excite * decay).sum(axis=2)

    def compensator(self, excite, s):
        cfg = self.cfg
        s = np.asarray(s, dtype=np.float64)
        frac = -np.expm1(-cfg.beta[None] * s[:, None, None]) / cfg.beta[None]
        return cfg.mu.sum() * s + (cfg.alpha[None] * excite * frac).sum(axis=(1, 2))
