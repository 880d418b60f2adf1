"""Global-to-local bottleneck reconstruction at desk scale.

A single-weight-shared transformer encoder compresses a global view of a
frame into one bottleneck token; a small transformer decoder reconstructs a
heavily masked local crop from that token plus a few visible patches.
Synthetic sprite videos provide ground truth for probing what the bottleneck
encodes, and trajectory-geometry tools measure how smoothly the embedding of
a clip evolves over time.
"""

__version__ = "0.1.0"
