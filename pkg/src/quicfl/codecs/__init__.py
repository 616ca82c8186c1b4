from .baselines import (
    BSQMessage,
    MinMaxMessage,
    QSGDMessage,
    bsq_decode,
    bsq_encode,
    bsq_vnmse_bound,
    minmax_hadamard_decode,
    minmax_hadamard_encode,
    qsgd_decode,
    qsgd_encode,
)
from .bitpack import pack, packed_size, unpack
from .quicfl import (
    EncodedVector,
    SenderDecision,
    client_estimates,
    decode_aggregate,
    encode_alg1,
    encode_quicfl,
    encode_rows,
    quantile_rounding,
    sender_distribution,
    sender_moments,
    shared_indices,
)
from .reference import one_bit_reference
