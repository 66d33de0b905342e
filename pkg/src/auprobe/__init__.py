"""Workbench for probing what an expression-recognition CNN learns.

Trains a small convolutional classifier on action-unit-tagged face (or
synthetic glyph) images, projects feature-map activations back to pixel
space through the deconvolution pathway, and ranks feature maps by a
symmetric KL-style distance between activation responses with and
without each action unit.
"""

__version__ = "0.1.0"
