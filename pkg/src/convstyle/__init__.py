"""Conversational speaking-style transplantation toolkit.

HPC-controlled non-attentive acoustic model, discrete-VAE voice conversion
for data augmentation, adversarial speaker disentanglement and automated
checkpoint selection, at desk scale.
"""
__version__ = '0.1.0'

SAMPLE_RATE = 22050
HOP_LENGTH = 256
