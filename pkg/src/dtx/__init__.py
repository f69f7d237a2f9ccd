"""dtx: a desk-scale distributed transactional key-value store.

Transactions are serialized with a hybrid of optimistic concurrency
control and two-phase commit; commit decisions are persisted to a
persistent-memory-style write-ahead log whose space is reclaimed by a
watermark-driven garbage collector.
"""

__version__ = "0.1.0"
