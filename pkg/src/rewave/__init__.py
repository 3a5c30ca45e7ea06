"""rewave: text-to-waveform synthesis with a reward-guided duration aligner."""

__version__ = "0.1.0"
