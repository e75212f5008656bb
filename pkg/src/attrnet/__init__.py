"""Multi-task CNN for facial attribute classification, built on numpy.

Modules: ``tensor`` (precision and convolution kernels), ``layers``,
``topology`` (MCNN / independent / AUX networks), ``metrics``, ``data``,
``trainer``, ``export`` and ``cli``.
"""

__version__ = "0.1.0"
