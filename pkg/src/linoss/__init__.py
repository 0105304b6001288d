"""Oscillatory state-space sequence models with parallel-scan training."""

from .dynamics import (
    EffectiveA,
    DiscreteTransition,
    State,
    LayerParams,
    parameterize_A,
    build_transition,
    assemble_forcing,
    step,
    init_params,
)
from .scan import (
    ScanElement,
    combine,
    scan_sequential,
    scan_parallel,
    solve_recurrence,
)
from .model import (
    BlockParams,
    ModelParams,
    UniversalityBlock,
    gelu,
    glu,
    layer_forward,
    block_forward,
    model_forward,
    head_classify,
    head_forecast,
    universality_block_forward,
    sine_bank,
    init_model_params,
    flatten_params,
    unflatten_params,
)
from .spectral import (
    SpectrumReport,
    eigvals_im,
    eigvals_imex,
    eigvals_numeric,
    moment_im,
    moment_mc,
    hamiltonian,
    imex_invariant,
    spectrum_report,
)
from .backprop import (
    adjoint_recurrence,
    model_forward_cached,
    model_backward,
    finite_diff_check,
)
from .datasets import (
    SequenceBatch,
    DatasetSpec,
    gen_harmonic,
    sine_transform_oracle,
    load_csv,
    load_dataset_dir,
    write_dataset_dir,
    append_time_channel,
    apply_forecast_mask,
)
from .training import (
    ModelConfig,
    TrainResult,
    parse_config,
    load_config,
    config_to_text,
    mse_loss,
    mae_metric,
    cross_entropy,
    AdamMoments,
    adam_init,
    adam_step,
    clip_gradients,
    batch_loss,
    evaluate_model,
    train,
    write_metrics_csv,
    read_metrics_csv,
)
from .checkpoint import (
    Checkpoint,
    save_checkpoint,
    load_checkpoint,
)

__version__ = "0.1.0"
