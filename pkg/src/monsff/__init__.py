"""Spectral form factors of continuously monitored quantum systems."""

__version__ = "0.1.0"

from .errors import (ConfigError, FeatureNotFound, MonsffError, ResourceError,  # noqa: E402
                     SpectrumFileError, StepSizeError, ValidationError)
from .noise import TimeGrid, WienerPath, derive_stream, refine_path, sample_wiener_path  # noqa: E402
from .spectrum import (DosModel, SpectrumRealization, SykParameters, build_syk_hamiltonian,  # noqa: E402
                       diagonalize, load_spectrum, sample_gue_spectrum, sample_syk_couplings,
                       save_spectrum, syk_dos, syk_spectrum)
from .trajectory import (coherent_gibbs, collapse_statistics, dephased_partition_function,  # noqa: E402
                         energy_variance, evolve_closed_form, integrate_sme, mean_energy, purity)
from .sff import (AveragingSpec, SffCurve, SffParams, average_sff, annealed_relative_error,  # noqa: E402
                  sff_dephasing, sff_efficiency, sff_monitored, sff_nojump, sff_unitary)
from .analysis import (decompose_sff, dip_time_lambert, extract_dip_time, extract_plateau_time,  # noqa: E402
                       lambert_w, smooth_curve, sweep)
