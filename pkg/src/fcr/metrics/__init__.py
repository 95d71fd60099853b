from .mcc import AssignmentResult, mcc
from .nmi import nmi
from .leiden import cluster_labels, knn_graph, leiden_communities
from .independence import hsic, kci_test, kci_protocol, HsicResult, KciResult
from .prediction import (
    CounterfactualResult,
    DegMseResult,
    counterfactual_predict,
    deg_mse,
    r2_score,
)
from .report import MetricsReport, evaluate_model

__all__ = [
    "AssignmentResult", "mcc", "nmi",
    "cluster_labels", "knn_graph", "leiden_communities",
    "hsic", "kci_test", "kci_protocol", "HsicResult", "KciResult",
    "CounterfactualResult", "DegMseResult", "counterfactual_predict",
    "deg_mse", "r2_score",
    "MetricsReport", "evaluate_model",
]
