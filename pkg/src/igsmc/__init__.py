"""Sequential Monte Carlo samplers with information-geometric transition kernels.

The package provides:

* ``core``       -- weights, ESS, tempering schedules, resampling, RNG streams
* ``models``     -- tempered-model interface and the univariate Gaussian model
* ``ode``        -- ODE systems with forward sensitivities (Fitzhugh-Nagumo,
                    Lotka-Volterra, user-defined)
* ``metric``     -- Fisher metrics for ODE likelihoods, prior Hessians,
                    heteroscedastic/truncated noise extensions
* ``kernels``    -- transition kernels: uniform random walk, adaptive MVN,
                    manifold MALA (Euler, simplified, Ozaki)
* ``smc``        -- the SMC sampler engine with ESS-triggered resampling
* ``geodesic``   -- closed-form geodesics on the univariate Gaussian manifold
* ``experiments``-- reproducible experiment runner with CSV/JSON/SVG outputs
"""

__version__ = "0.1.0"
