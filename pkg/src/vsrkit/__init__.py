"""Desk-scale dual-path visual speech recognition.

Global and local visual feature extraction, two-stage progressive
training (speech-unit alignment, then hybrid CTC-attention
recognition with cross-attention fusion), a synthetic degradable
audio-visual corpus, and a condition-stratified evaluation harness.
"""

try:
    # the model's matrices are small enough that BLAS threading only
    # adds overhead; one thread is also the deterministic choice
    from threadpoolctl import threadpool_limits

    threadpool_limits(limits=1)
except ImportError:
    pass

from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"
__all__ = ["KERNEL_BACKEND", "__version__"]
