"""kinoctl

Learned forward kinodynamic models for a simulated car-like robot: dataset
generation, window-recurrent network training, Levenberg-Marquardt control
optimization over the learned model, an inverse-model baseline and a
latency-compensated closed-loop runtime with its experiments.
"""

__version__ = "0.1.0"
