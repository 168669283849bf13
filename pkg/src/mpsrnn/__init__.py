"""MPS-RNN variational wave functions: vanilla, 1D, 2D, tensor and compressed tensor recurrences."""
import jax

jax.config.update("jax_enable_x64", True)

from mpsrnn.lattice import Lattice, build_lattice  # noqa: E402
from mpsrnn.ansatz import RnnParams, evaluate_amplitude, log_amplitude  # noqa: E402

__all__ = ["Lattice", "build_lattice", "RnnParams", "evaluate_amplitude", "log_amplitude"]
