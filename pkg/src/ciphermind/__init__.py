"""CipherMind: covert messaging through twin-model hidden states.

Two parties derive bit-identical model twins from a pre-shared 128-bit key,
then exchange messages as sequences of intermediate-layer hidden-state
vectors. The tapped layer for each token is driven by a chained 64-bit
state advanced per transmitted token, so the layer schedule depends on the
key and the whole message history.
"""

__version__ = "0.1.0"
