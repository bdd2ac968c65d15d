"""Multi-exit binary-hash retrieval at desk scale.

A four-stage encoder emits binary codes at every stage; exit policies decide
per query how deep to run; retrieval is bit-packed Hamming search; evaluation
produces accuracy-vs-compute curves under average-cost budgets.
"""

from .autodiff import Tensor
from .config import RunConfig, substream
from .encoder import (
    EncoderConfig,
    ExitOutput,
    FeatureMap,
    MultiExitEncoder,
    paper_dims_config,
    part_pool,
    toy_config,
)
from .evaluation import (
    BudgetPoint,
    CostModel,
    ExitReport,
    RetrievalEval,
    budget_curve,
    cmc_map,
    exit_report,
    stagewise_eval,
)
from .hamming import (
    GalleryIndex,
    HashCode,
    PackedCodes,
    bench,
    bench_table,
    hamming_distance,
    pack,
    pack_matrix,
    topk,
    unpack,
    unpack_matrix,
)
from .losses import (
    LossWeights,
    PKBatchSampler,
    classifier_nll,
    combined_loss,
    ranking_regularizer,
    triplet_batch_hard,
)
from .numerics import (
    LayerParams,
    LrSchedule,
    batch_norm,
    check_gradients,
    linear,
    load_checkpoint,
    relu_act,
    save_checkpoint,
    sgd_step,
    sign_act,
    softsign_act,
    tanh_act,
)
from .policy import (
    EtsClassifier,
    FlipHistory,
    PolicyState,
    QueryContext,
    decide_exit,
    gs_exit,
    label_from_flips,
    qs_exit,
    train_ets,
)
from .synth import Dataset, SyntheticSpec, generate

__version__ = "0.1.0"
