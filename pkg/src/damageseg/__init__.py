"""Bi-temporal building-damage segmentation pipeline.

Submodules:
  dataset    manifests, polygon rasterization, fold splitting
  synth      synthetic pre/post scene generator
  augment    paired augmentation engine
  model      Siamese encoder-decoder models and fusion
  objective  class-weighted cross-entropy
  metrics    weighted-F1 competition score
  training   fold-wise training loop
  ensemble   probability averaging and class-weight tuning
  cli        command-line entry points
"""

__version__ = "0.1.0"
