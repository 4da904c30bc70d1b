"""Semi-supervised 4D valve segmentation with memory readout and topology consistency."""

__version__ = "0.1.0"
