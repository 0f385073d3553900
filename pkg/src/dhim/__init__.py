"""Binary document hashing by global-local mutual information maximization.

Token-embedding sequences are fused into per-position and per-document
logits by a windowed convolutional encoder, binarized through a Bernoulli
layer with straight-through gradients, and trained so that a document's
global code carries the information shared by its local n-gram codes.
Retrieval runs in Hamming space over bit-packed codes.
"""

from .binarize import (
    BinaryCode,
    deterministic_binarize,
    median_binarize,
    pack_bits,
    read_codes,
    sample_binary,
    sigmoid,
    st_backward,
    unpack_bits,
    write_codes,
)
from .corpus import (
    Corpus,
    DocEmbedding,
    Document,
    EmbeddingTable,
    build_random_embedding_table,
    embed_tokens,
    load_corpus,
    write_corpus,
)
from .encoder import EncoderParams, conv_local, encoder_backward, fuse_and_readout, init_encoder
from .errors import (
    ConfigError,
    ConsistencyError,
    DhimError,
    EvaluationError,
    FormatError,
    ManifestError,
    NumericError,
    ShapeError,
)
from .objective import (
    AffineHead,
    DiscriminatorParams,
    MlpHead,
    PairBatch,
    build_pairs,
    disc_score,
    init_discriminator,
    jsd_mi,
    softplus,
    total_loss,
)
from .retrieval import CodeIndex, EvalReport, RetrievalResult, evaluate, hamming, precision_at_k, topk
from .synth import make_cluster_corpus
from .trainer import (
    AdamState,
    Model,
    ModelCheckpoint,
    TrainConfig,
    adam_step,
    encode_split,
    init_model,
    train,
)

__version__ = "0.1.0"
