from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass
class PredictiveOutputs:
    """Per-event predictive quantities under teacher forcing.

    ``log_survival(q)`` returns log(1 - F*(q_i)) for a query gap q_i per event,
    conditioned on the same history as event i.
    """
    tau: np.ndarray
    marks: np.ndarray
    probs: np.ndarray
    log_survival: Callable[[np.ndarray], np.ndarray]
    seq_index: np.ndarray = None
    event_index: np.ndarray = None

    def __len__(self):
        return len(self.tau)

    def cdf(self, q):
        return -np.expm1(self.log_survival(np.asarray(q, dtype=np.float64)))

    def pit(self):
        return self.cdf(self.tau)
