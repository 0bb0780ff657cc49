"""modfuse: desk-scale dynamic multi-modal fusion training.

Modality-specific encoders train on their own unpaired data and labels;
a unified classifier trains on paired samples' concatenated features;
inference falls back to the base modality's own head when the auxiliary
modality is missing.
"""

__version__ = "0.1.0"
