"""structdrop: structured dropout patterns that shrink training matmuls.

Row- and tile-based dropout patterns replace per-unit Bernoulli dropout so
masked matrix products can gather only the kept data, multiply densely and
scatter the results; a gradient-descent search makes the pattern draw
statistically equivalent to Bernoulli dropout at a target rate.  Conv
layers drop rows/blocks of the unrolled input matrix guided by a sampled
sensitivity vote, with the drop ratio following a skew-normal curve over
epochs.
"""

from .data import (ImageDataset, TextDataset, load_idx_dataset, load_text,
                   read_idx_images, read_idx_labels, synthetic_dataset,
                   synthetic_text, write_idx_images, write_idx_labels,
                   write_synthetic_idx)
from .errors import (ConfigError, InvariantError, ParameterError, ShapeError,
                     StateError)
from .layers import (ConvLayer, DenseLayer, DropoutMode, LstmLayer, MacCounter,
                     ReluLayer, SigmoidLayer, SoftmaxCrossEntropy, StepContext,
                     TanhLayer, backward_dense_masked, forward_dense_masked)
from .maskmm import (CompactProduct, Workspace, apply_output_pattern,
                     bench_masked_matmul, row_masked_matmul, tile_masked_matmul)
from .patterns import (BinaryMask, DropoutPattern, PatternKind, TileConfig,
                       load_mask, mask_from_pattern, mask_keep_fraction,
                       pattern_space, row_mask, save_mask, tile_mask)
from .schedule import (RatioSchedule, SkewNormalParams, build_schedule,
                       save_schedule_csv, skew_moments, skew_pdf,
                       solve_location_scale)
from .search import (PatternDistribution, SearchConfig, drop_rate_vector,
                     load_distribution, neuron_drop_probability, sample_pattern,
                     sample_pattern_arrays, save_distribution,
                     search_distribution)
from .sensitivity import (SensitivityConfig, SensitivityMask, bsdp_select,
                          load_sensitivity_mask, partition_by_magnitude,
                          predict_sensitivity, rsdp_select,
                          save_sensitivity_mask)
from .tensor import (ConvShape, default_dtype, gemm, im2col, im2col_batch,
                     load_matrix, load_matrix_csv, make_rng, save_matrix,
                     set_default_dtype)
from .train import (LayerSpec, Model, ModelSpec, SequenceModel, TrainConfig,
                    TrainLog, ablate_magnitude_parts, ablate_weight_vs_input,
                    cnn_spec, evaluate, lstm_perplexity, lstm_spec, mlp_spec,
                    train_cnn, train_lstm, train_mlp)

__version__ = "0.1.0"
