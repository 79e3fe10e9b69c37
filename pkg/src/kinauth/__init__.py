"""Continuous authentication from inertial sensor streams.

Temporal feature extractors (RNN, LSTM, clockwork and dense clockwork RNNs
over a 1-d convolutional front-end) feeding a GMM-UBM verification back-end.
"""

__version__ = "0.1.0"
