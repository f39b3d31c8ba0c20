"""End-to-end neural diarization with encoder-decoder attractors (EEND-EDA),
extended with a conversational summary vector that conditions attractor
generation.

Subpackages cover the full desk-scale toolchain: mixture simulation and
RTTM I/O (`data`), log-Mel feature extraction (`features`), the
summary-aware Conformer encoder with convolutional sub/upsampling
(`encoder`), the LSTM attractor module (`eda`), training objectives
(`losses`), training/inference orchestration (`pipeline`), DER scoring and
diagnostics (`metrics`), and the command-line interface (`cli`).
"""

__version__ = "0.1.0"
