"""Zero-shot post-training quantization toolkit."""
from .allocator import (BitAssignment, GroupedSearchParams, ParetoPoint, dp_optimize,
                        exhaustive_search, grouped_refinement, pareto_frontier)
from .distill import (DistillConfig, DistilledBatch, bn_stat_loss, bn_stat_loss_grad,
                      generate_distilled_data)
from .fixtures import make_fixture
from .formats import load_model, save_model
from .model import ModelGraph, RunTrace, calibrate_bn_stats, run
from .quant import apply_weight_quantization, capture_activation_ranges, quantize_model
from .quantizer import FULL, QuantParams, dequantize, fake_quantize, make_quant_params, quantize
from .sensitivity import (SensitivityTable, build_sensitivity_table, kl_divergence,
                          joint_sensitivity, layer_sensitivity)

__version__ = "0.1.0"
