"""Grey-box impedance participation analysis for small-signal stability.

Modules: ``lticore`` (state-space and pole-residue forms), ``netmodel``
(network assembly and whole-system admittance), ``apparatus`` (parameterized
apparatus models), ``participation`` (participation factors and layers),
``vecfit`` (rational fitting of sampled spectra), ``cli`` (command line).
"""

__version__ = "0.1.0"
