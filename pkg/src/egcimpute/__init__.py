"""Mixed-type missing value imputation with an extended Gaussian copula.

Ordered variables (continuous, ordinal) and categorical variables share one
latent Gaussian; categorical values are the argmax of a shifted latent block.
"""

__version__ = "0.1.0"

from .data_model import (  # noqa: E402
    CATEGORICAL, CONTINUOUS, ORDINAL, DataError, LatentIndexMap, MixedDataset, SchemaError,
    VariableSchema, VariableSpec, build_latent_index_map, load_dataset, write_dataset,
)
from .marginals import (  # noqa: E402
    CategoricalMarginal, MarginalFitConfig, OrderedMarginal, RareCategoryError, argmax_prob,
    estimate_categorical_mu, fit_marginal,
)
from .truncnorm import EmptyRegionError, Involution, build_truncation, trunc_moments, trunc_sample  # noqa: E402
from .em_fit import (  # noqa: E402
    CopulaModel, FitConfig, LowRankParams, SingularCovarianceError, fit, observed_loglik_mc,
    online_update, p_cat, p_cor,
)
from .impute import (  # noqa: E402
    MultipleImputation, multiple_impute, online_impute, single_impute, summarize_uncertainty,
)
from .model_io import load_model, save_model  # noqa: E402

__all__ = [
    "CATEGORICAL", "CONTINUOUS", "ORDINAL", "DataError", "LatentIndexMap", "MixedDataset", "SchemaError",
    "VariableSchema", "VariableSpec", "build_latent_index_map", "load_dataset", "write_dataset",
    "CategoricalMarginal", "MarginalFitConfig", "OrderedMarginal", "RareCategoryError", "argmax_prob",
    "estimate_categorical_mu", "fit_marginal", "EmptyRegionError", "Involution", "build_truncation",
    "trunc_moments", "trunc_sample", "CopulaModel", "FitConfig", "LowRankParams",
    "SingularCovarianceError", "fit", "observed_loglik_mc", "online_update", "p_cat", "p_cor",
    "MultipleImputation", "multiple_impute", "online_impute", "single_impute", "summarize_uncertainty",
    "load_model", "save_model", "__version__",
]
