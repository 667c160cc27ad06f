"""Spiking wavelet neural operator toolkit.

Subpackages: :mod:`vswno.tensor` (reverse-mode autodiff), :mod:`vswno.wavelet`
(Daubechies filter banks), :mod:`vswno.neurons` (artificial / LIF /
variable-spiking layers and encodings), :mod:`vswno.operator` (the network),
:mod:`vswno.training` (optimizer, losses, metrics, energy model),
:mod:`vswno.data` (generators and the container format), :mod:`vswno.cli`.
"""

__version__ = "0.1.0"
