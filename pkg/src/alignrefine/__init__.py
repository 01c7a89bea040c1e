"""Two-pass sequence transduction: a streaming transducer first pass whose
frame alignments are iteratively refined by a parallel greedy CTC decoder."""

__version__ = "0.1.0"
