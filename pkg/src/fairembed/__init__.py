"""Fair tabular representation learning toolkit.

Trains an embedding network whose per-group embedding distributions
match a shared Gaussian prior (sliced Wasserstein distance), whose
embeddings align each row with a generated counterfactual twin, and
whose downstream utility is preserved by self-distillation over
feature-mixing perturbations. Ships a counterfactual generator, an
evaluation harness (AUC/RMSE, demographic parity, equalized odds,
counterfactual parity, leakage), and a CLI pipeline.
"""

__version__ = "0.1.0"
