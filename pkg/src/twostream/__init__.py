"""Spiking two-stream action recognition: retina coding, STDP-trained convolutional
layers, motion-stream inputs, pooled features and a linear SVM read-out."""

__version__ = "0.1.0"
