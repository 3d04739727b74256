"""regionssl: a desk-scale laboratory for region-level dense self-supervised
learning, with coupling-rate and positional-bias diagnostics and object-level
kNN evaluation, runnable end-to-end on synthetic multi-object scenes."""

__version__ = "0.1.0"
