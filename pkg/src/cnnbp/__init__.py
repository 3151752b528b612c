"""Trace-driven branch-prediction research toolkit.

Trains per-branch CNN helper predictors offline from branch traces, folds
them into a 2-bit lookup-table/FIFO/popcount inference engine, and
evaluates them against TAGE-style and perceptron baselines with k-fold
cross-workload reuse measurement.
"""

from .baselines import (
    BranchStats,
    H2pScreenConfig,
    PerceptronConfig,
    PerceptronPredictor,
    TageLite,
    TageLiteConfig,
    screen_h2ps,
    simulate_baseline,
)
from .cnn import (
    CnnModel,
    TrainConfig,
    evaluate,
    forward_fp,
    forward_ternary_reference,
    finalize_ternary,
    init_model,
    load_model,
    quantize_ternary,
    save_model,
    train,
)
from .deploy import (
    DeployedHelper,
    FifoBuffer,
    LookupTable,
    build_table,
    derive_threshold,
    deserialize_helper,
    fifo_update,
    predict,
    rollback,
    serialize_helper,
    storage_bytes,
)
from .encoder import (
    EncoderConfig,
    HistoryWindow,
    PAD,
    build_history_matrix,
    collect_training_set,
    encode_index,
    encode_trace,
)
from .harness import (
    ExperimentConfig,
    WorkloadSpec,
    compute_mpki,
    emit_report,
    load_experiment_config,
    run_crossval,
    run_fold,
)
from .synth import (
    BODY_IP,
    CORRELATED_IP,
    H2P_IP,
    LOOP_IP,
    SynthConfig,
    generate_corrloop_trace,
    generate_spread_trace,
)
from .trace import (
    BranchRecord,
    Trace,
    TraceFormatError,
    TraceMeta,
    position_histogram,
    read_trace,
    write_trace,
)

__version__ = "0.1.0"
