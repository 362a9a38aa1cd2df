"""Tree-structured neural classifiers for high-resolution DOA estimation.

A uniform-linear-array signal simulator, a from-scratch classifier net, a
hierarchical (one-net-per-node) DOA classifier with a multi-emitter
extension, classical baselines (flat classifier, polynomial-rooting
subspace estimator, Cramer-Rao bound), and a deterministic Monte-Carlo
benchmark harness with a CLI front end.
"""

__version__ = "0.1.0"

from .array_signal import (
    ArrayConfig,
    SourceSet,
    analytic_covariance,
    extract_features,
    feature_length,
    multi_source_features,
    sample_covariance,
    sampled_features,
    single_source_features,
    source_set_for_snr,
    steering_vector,
    synth_snapshots,
)
from .mlnn import (
    MlnnModel,
    TrainConfig,
    TrainResult,
    backprop_gradients,
    bce_loss,
    cce_loss,
    forward,
    load_model,
    new_model,
    predict_class,
    save_model,
    train,
)
from .tree import (
    TdnnModel,
    TreeSpec,
    TreeTrainResult,
    build_node_training_set,
    cell_of,
    cell_to_labels,
    cells_of,
    complexity_report,
    doa_to_labels,
    labels_to_cell,
    labels_to_doa,
    level_widths,
    load_tree,
    node_prefixes,
    oracle_quantize,
    quantization_floor,
    route_predict,
    save_tree,
    train_tree,
    training_grid,
)
from .multi import (
    QTdnnModel,
    QTdnnTrainResult,
    build_multi_training_set,
    load_qtdnn,
    multi_rmse,
    predict_multi,
    sample_training_tuples,
    save_qtdnn,
    train_qtdnn,
)
from .baselines import (
    FlatDnnModel,
    crlb_deterministic,
    crlb_single_source,
    crlb_stochastic,
    load_flat,
    music_spectrum_oracle,
    predict_flat,
    root_music,
    save_flat,
    train_flat_dnn,
)
from .bench import (
    BenchResult,
    ExperimentConfig,
    GridConfig,
    Trial,
    TrialResult,
    aggregate_plot_data,
    build_multi_dataset,
    build_single_dataset,
    emit_plot_data,
    emit_results,
    flat_estimator,
    load_results,
    oracle_estimator,
    qtdnn_estimator,
    rmse_of_rows,
    root_music_estimator,
    run_classes_sweep,
    run_q_sweep,
    run_snr_sweep,
    tdnn_estimator,
)
from .profiles import desk_array, desk_tree, full_array, full_tree_2level, full_tree_3level, get_profile
