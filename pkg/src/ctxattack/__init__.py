"""Context-aware sequential adversarial attacks on toy object detectors.

Pipeline: parse annotation corpora into scenes, estimate context graphs
(co-occurrence, distance, size), compose context-aware attack plans, craft
L-infinity-bounded perturbations with the iterative sign-step method over a
surrogate ensemble, and drive a query-bounded sequential loop against a
hard-label blackbox detector.
"""

from .kernels import BACKEND_NAME as KERNEL_BACKEND

__version__ = "0.1.0"
__all__ = ["KERNEL_BACKEND", "__version__"]
