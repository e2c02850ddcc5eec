"""Multi-task incremental learning for detecting and attributing GAN images.

Modules: ``diffcore`` (autodiff + Adam), ``model`` (backbone and heads),
``losses``, ``memory`` (exemplars and the nearest-mean rule), ``learner``
(the incremental protocol), ``datagen`` (synthetic data and containers),
``experiment``/``cli`` (runs, sweeps, reports).
"""

__version__ = "0.1.0"
