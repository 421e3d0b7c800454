from .assembly import (
    DEFAULT_FORM,
    FAMILIES,
    FORMS,
    MARKED_FAMILIES,
    SETTINGS,
    Batch,
    ModelSpec,
    MTPPModel,
    balance_widths,
    build_model,
    duplicate_from_shared,
    duplicated_split,
    survival,
)
from .decoders import (
    MONOTONE_ACTIVATIONS,
    FNNDecoder,
    LNMDecoder,
    RMTPPDecoder,
    SAHPDecoder,
    THPDecoder,
    fnn_compensator,
    fnn_intensity,
    lnm_density,
    rmtpp_compensator,
    rmtpp_intensity,
    sahp_intensity,
    thp_intensity,
)
from .layers import EmbeddingConfig, GRUEncoder, MarkHead, embed_event, encode_history, mark_pmf, time_encoding

__all__ = [
    "DEFAULT_FORM", "FAMILIES", "FORMS", "MARKED_FAMILIES", "MONOTONE_ACTIVATIONS", "SETTINGS",
    "Batch", "EmbeddingConfig", "FNNDecoder", "GRUEncoder", "LNMDecoder", "MTPPModel", "MarkHead",
    "ModelSpec", "RMTPPDecoder", "SAHPDecoder", "THPDecoder", "balance_widths", "build_model",
    "duplicate_from_shared", "duplicated_split", "embed_event", "encode_history", "fnn_compensator",
    "fnn_intensity", "lnm_density", "mark_pmf", "rmtpp_compensator", "rmtpp_intensity",
    "sahp_intensity", "survival", "thp_intensity", "time_encoding",
]
