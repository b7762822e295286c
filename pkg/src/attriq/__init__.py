"""Post-hoc attributions for tabular and image models, and metrics that score them."""

__version__ = "0.1.0"

from .attrib_image import (
    AttributionMap,
    ImageExplainer,
    grad_cam,
    grad_input_map,
    integrated_gradients_map,
    occlusion_sensitivity,
    saliency_map,
    smoothgrad,
)
from .attrib_tabular import (
    Attribution,
    Background,
    TabularExplainer,
    exact_shapley,
    feature_ablation,
    grad_x_input,
    integrated_gradients,
    kernel_shap,
    lime_tabular,
    saliency,
)
from .models import (
    LinearModel,
    ModelOutput,
    SequentialNet,
    TreeEnsemble,
    activation_gradient,
    forward_with_activations,
    input_gradient,
    predict,
    target_score,
)

__all__ = [
    "AttributionMap",
    "ImageExplainer",
    "grad_cam",
    "grad_input_map",
    "integrated_gradients_map",
    "occlusion_sensitivity",
    "saliency_map",
    "smoothgrad",
    "Attribution",
    "Background",
    "TabularExplainer",
    "exact_shapley",
    "feature_ablation",
    "grad_x_input",
    "integrated_gradients",
    "kernel_shap",
    "lime_tabular",
    "saliency",
    "LinearModel",
    "ModelOutput",
    "SequentialNet",
    "TreeEnsemble",
    "activation_gradient",
    "forward_with_activations",
    "input_gradient",
    "predict",
    "target_score",
]
