"""embhist: teacher-embedding history transfer with exact verification.

Pipeline: extract teacher activations per event, compress with a
prefix-nested autoencoder, quantize to a compact codec, group by user
into strictly-past sequences, and feed them to a small student model
alongside soft-label distillation. A discrete enumeration engine checks
the information-gain decomposition, pipeline loss bounds, and
transfer-ratio bound exactly on small worlds.
"""

__version__ = "0.1.0"
