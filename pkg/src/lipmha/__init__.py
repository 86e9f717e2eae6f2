"""Lipschitz analysis of multihead self-attention: forward maps, exact
Jacobians, closed-form bounds, contractive normalization, and fixed-point
inversion of the residual map, with a CLI for the accompanying experiments."""

from .attention import (
    LayerNormParams,
    MaskSet,
    MhaParams,
    apply_mask,
    dp_logits,
    l2_logits,
    layer_norm,
    load_params,
    mha_forward,
    params_from_dict,
    params_to_dict,
    save_params,
)
from .bounds import (
    BoundReport,
    bound_2,
    bound_inf,
    bound_masked_inf,
    composition_bound,
    dropout_factor,
    layernorm_bound_inf,
)
from .contractive import (
    ContractiveMha,
    InversionResult,
    adversarial_batch,
    contractive_forward,
    max_reconstruction_error,
    residual_forward,
    residual_inverse,
)
from .experiments import (
    DominanceViolation,
    SweepRow,
    bound_tightness_sweep,
    dp_divergence_demo,
    glorot_params,
    invertibility_grid,
    lower_bound_search,
)
from .jacobian import (
    JacobianBlocks,
    dp_jacobian,
    finite_diff_jacobian,
    jacobian_norm,
    l2_jacobian_tied,
    l2_jacobian_untied,
    layernorm_jacobian,
    mha_jacobian,
    softmax_deriv,
)
from .linalg import (
    is_row_stochastic,
    jacobi_eigenvalues,
    op_norm_inf,
    phi,
    phi_inv,
    power_iteration,
    softmax_rows,
    spectral_norm_oracle,
)
from .optimize import AdamState, adam_maximize, maximize_jacobian_norm

__version__ = "0.1.0"
