"""spacepointfm: a desk-scale pipeline that pretrains a selective state-space
sequence model on sparse detector spacepoints and adapts it, frozen, to track
finding, particle identification, and noise tagging."""

__version__ = "0.1.0"
