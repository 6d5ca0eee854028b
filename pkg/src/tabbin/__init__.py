"""Structure-aware embeddings for tables with hierarchical metadata and nesting."""

__version__ = "0.1.0"

from .tables import (  # noqa: F401
    BiCoordinate,
    Cell,
    CellAddress,
    HeaderNode,
    HeaderTree,
    Table,
    assign_coordinates,
    is_relational,
    parse_table,
    serialize_table,
)
from .featurize import (  # noqa: F401
    NumberFeatures,
    TokenRecord,
    TypeDictionary,
    UnitDictionary,
    Vocabulary,
    detect_unit,
    infer_type,
    number_features,
    tokenize_cell,
)
from .sequences import (  # noqa: F401
    AblationFlags,
    SegmentKind,
    TokenSequence,
    apply_ablation,
    build_sequences,
    build_visibility_matrix,
)
from .encoder import EncoderConfig, EncoderWeights, encoder_forward, masked_attention  # noqa: F401
from .embeddings import EmbeddingWeights, embed_components, embed_token  # noqa: F401
from .autodiff import Tensor, grad_check, no_grad  # noqa: F401
from .pretrain import TrainConfig, make_clc_instance, make_mlm_instance, train  # noqa: F401
from .bundle import ModelBundle, SegmentModel, load_bundle, save_bundle  # noqa: F401
from .composites import (  # noqa: F401
    CompositeEmbedding,
    column_composite,
    numeric_composite,
    pool,
    range_composite,
    table_composite,
)
from .evaluate import (  # noqa: F401
    EvalOptions,
    GroundTruth,
    RankedList,
    ap_at_k,
    centroid_cluster,
    cosine,
    lsh_block,
    map_mrr,
    run_task,
    topk_cluster,
)
from .corpus import CorpusSpec, generate_corpus  # noqa: F401
