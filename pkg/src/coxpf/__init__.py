"""Nearly unbiased particle filtering for diffusions observed through a marked Cox process.

The package provides exact samplers for linear-Gaussian diffusions, a Poisson
path-integral estimator with controlled negative-estimate probability, two
bootstrap particle filters (time-discretised and continuous-time random
weight), closed-form oracles for the 1D benchmark model, data simulation via
thinning, PMMH calibration and a configuration-driven CLI.
"""

__version__ = "0.1.0"
