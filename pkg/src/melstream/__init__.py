"""Streaming Mel-spectrogram speech enhancement with interleaved full-band
and sub-band recurrent networks."""

__version__ = "0.1.0"
