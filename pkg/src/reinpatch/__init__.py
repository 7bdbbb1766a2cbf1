"""ReinPatch: reinforcement-learned sequence patching for forecasting."""

from .boundaries import (
    BoundaryVector,
    CompressionConfig,
    PatchPartition,
    boundaries_to_partition,
    compression_rate,
    enforce_min_compression,
    level_boundaries,
    partition_to_boundaries,
)
from .policy import (
    PatchPolicy,
    PolicyConfig,
    PolicyOutput,
    boundary_logit,
    log_prob,
    policy_entropy,
    sample_group,
)
from .backbone import (
    BackboneConfig,
    Forecaster,
    ForecastWindow,
    reward,
    task_loss,
)
from .trainer import (
    GrpgTrainer,
    TrainConfig,
    group_advantages,
    grpg_surrogate,
    train_backbone_with_patcher,
)
from .adaptation import (
    PolicyPatcher,
    StreamState,
    auto_boundaries,
    expected_k,
    stream_decide,
    topk_boundaries,
)
from .baselines import (
    RandomPatcher,
    StaticPatcher,
    VariancePatcher,
    random_partition,
    static_partition,
    variance_partition,
)
from .data import (
    SeriesTable,
    SplitSpec,
    load_csv,
    make_windows,
    synth_piecewise,
    windows_from_array,
)
from .evaluation import emit_table, evaluate, mae, mse
from .persistence import (
    load_checkpoint,
    load_patcher,
    save_checkpoint,
    save_patcher,
)

__version__ = "0.1.0"
