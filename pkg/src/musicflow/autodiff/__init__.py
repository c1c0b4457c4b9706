from musicflow.autodiff.array import Array, Tape, backward
from musicflow.autodiff.gradcheck import grad_check

__all__ = ["Array", "Tape", "backward", "grad_check"]
