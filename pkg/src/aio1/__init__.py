"""All-in-one music structure analysis.

Joint estimation of beats, downbeats, section boundaries, and functional
section labels from demixed-stem spectrograms, with dynamic-programming
decoders, the standard evaluation metrics, and a small seeded training
harness. Everything runs on a self-contained numpy tensor core with
reverse-mode gradients.
"""

__version__ = "0.1.0"
