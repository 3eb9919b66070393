"""Joint personality and emotion learning on a shared convolutional backbone.

Desk-scale numpy implementation: autodiff engine, synthetic data with a
planted emotion-to-personality relationship, model heads, losses, trainer,
metrics and a command-line driver.
"""

__version__ = "0.1.0"
