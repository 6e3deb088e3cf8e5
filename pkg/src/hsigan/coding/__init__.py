from .bitpack import BitReader, Bitpacker
from .entropy import (DEFAULT_SUPPORT, P_FLOOR, FactorizedEntropyModel, HyperPrior,
                      LatentCode, QuantStats, StraightThrough, TableEntropyModel,
                      ad_decode, ae_encode, floored_pmf, model_rate_loss, quantize,
                      rate, round_half_away, to_symbols)
from .rangecoder import BitstreamError, decode_indices, encode_indices, pmf_to_cdf

__all__ = [
    "BitReader", "Bitpacker", "BitstreamError", "DEFAULT_SUPPORT", "FactorizedEntropyModel",
    "HyperPrior", "LatentCode", "P_FLOOR", "QuantStats", "StraightThrough",
    "TableEntropyModel", "ad_decode", "ae_encode", "decode_indices", "encode_indices",
    "floored_pmf", "model_rate_loss", "pmf_to_cdf", "quantize", "rate",
    "round_half_away", "to_symbols",
]
